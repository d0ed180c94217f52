// SPDX-License-Identifier: Apache-2.0

use std::ffi::CString;
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use gaplanes_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0u8; 512];
    let n = unsafe { gp_last_error(buf.as_mut_ptr().cast(), buf.len()) };
    buf.truncate(n.min(511));
    String::from_utf8(buf).unwrap()
}

fn plane(expr: &str, k: usize, r1: usize, interp: GpInterp, dec: GpDecoder, bias: bool, seed: u64) -> (GpStatus, *mut GpModel) {
    let expr = CString::new(expr).unwrap();
    let mut out = ptr::null_mut();
    let s = unsafe { gp_model_plane(expr.as_ptr(), k, r1, 2, interp, dec, 8, bias, seed, &mut out) };
    (s, out)
}

#[test]
fn assembled_rank_matches_bound() {
    let (s, m) = plane("mul(e1,e2)", 4, 20, GpInterp::Nearest, GpDecoder::Linear, false, 3);
    assert_eq!(s, GpStatus::Ok, "{}", last_error());
    let mut mat = vec![0.0; 400];
    let mut rank = 0;
    unsafe {
        assert_eq!(gp_model_assemble(m, 20, 20, mat.as_mut_ptr()), GpStatus::Ok);
        assert_eq!(gp_numeric_rank(mat.as_ptr(), 20, 20, 1e-9, &mut rank), GpStatus::Ok);
        gp_model_free(m);
    }
    assert_eq!(rank, 4);
}

#[test]
fn predict_agrees_with_assemble_at_nodes() {
    let (_, m) = plane("concat(e1,e2)", 3, 8, GpInterp::Multilinear, GpDecoder::Mlp, true, 1);
    let mut mat = vec![0.0; 64];
    let coords: Vec<f64> = (0..64).flat_map(|i| [(i / 8) as f64 / 7.0, (i % 8) as f64 / 7.0]).collect();
    let mut pred = vec![0.0; 64];
    unsafe {
        assert_eq!(gp_model_assemble(m, 8, 8, mat.as_mut_ptr()), GpStatus::Ok);
        assert_eq!(gp_model_predict(m, coords.as_ptr(), 64, pred.as_mut_ptr()), GpStatus::Ok);
        gp_model_free(m);
    }
    for (a, b) in mat.iter().zip(&pred) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn fitting_reduces_loss() {
    let expr = CString::new(gaplanes::combiner::presets::CONCAT).unwrap();
    let (d, r) = ([4usize, 4, 2], [8usize, 8, 4]);
    let mut m = ptr::null_mut();
    let mut params = 0;
    let mut dims = 0;
    let n = 500;
    let coords: Vec<f64> = (0..n * 3).map(|i| ((i * 7919) % 1000) as f64 / 999.0).collect();
    let targets: Vec<f64> = coords.chunks(3).map(|p| f64::from(p[0] + p[1] < 1.0)).collect();
    let opts = GpTrainOptions { steps: 300, batch_size: 500, lr_grids: 1e-2, lr_decoder: 1e-2, seed: 0 };
    let (mut before, mut after) = (0.0, 0.0);
    unsafe {
        assert_eq!(gp_model_volume(expr.as_ptr(), d.as_ptr(), r.as_ptr(), GpMode::Convex, 8, 0, &mut m), GpStatus::Ok, "{}", last_error());
        assert_eq!(gp_model_dims(m, &mut dims), GpStatus::Ok);
        assert_eq!(gp_model_param_count(m, false, &mut params), GpStatus::Ok);
        let one = GpTrainOptions { steps: 1, ..opts };
        assert_eq!(gp_model_fit_points(m, coords.as_ptr(), targets.as_ptr(), n, &one, &mut before), GpStatus::Ok);
        assert_eq!(gp_model_fit_points(m, coords.as_ptr(), targets.as_ptr(), n, &opts, &mut after), GpStatus::Ok, "{}", last_error());
        gp_model_free(m);
    }
    assert_eq!(dims, 3);
    assert!(params > 0);
    assert!(after < 0.5 * before, "{before} -> {after}");
}

#[test]
fn errors_map_to_codes() {
    let (s, m) = plane("mul(e1,", 2, 8, GpInterp::Nearest, GpDecoder::Linear, true, 0);
    assert_eq!(s, GpStatus::InvalidArgument);
    assert!(m.is_null());
    assert!(!last_error().is_empty());

    let mut out = ptr::null_mut();
    assert_eq!(unsafe { gp_model_plane(ptr::null(), 2, 8, 2, GpInterp::Nearest, GpDecoder::Linear, 4, true, 0, &mut out) }, GpStatus::NullPointer);
    let mut dims = 0;
    assert_eq!(unsafe { gp_model_dims(ptr::null(), &mut dims) }, GpStatus::NullPointer);
    assert_eq!(unsafe { gp_numeric_rank([1.0].as_ptr(), 1, 1, f64::NAN, &mut dims) }, GpStatus::Ok);

    let (_, m) = plane("mul(e1,e2)", 2, 8, GpInterp::Nearest, GpDecoder::Linear, true, 0);
    let coords = [0.5, 0.5];
    let targets = [f64::NAN];
    let opts = GpTrainOptions { steps: 1, batch_size: 1, lr_grids: 1e-2, lr_decoder: 1e-2, seed: 0 };
    assert_eq!(unsafe { gp_model_fit_points(m, coords.as_ptr(), targets.as_ptr(), 1, &opts, ptr::null_mut()) }, GpStatus::Shape);
    let bad = GpTrainOptions { steps: 0, ..opts };
    assert_eq!(unsafe { gp_model_fit_points(m, coords.as_ptr(), [0.0].as_ptr(), 1, &bad, ptr::null_mut()) }, GpStatus::InvalidArgument);
    unsafe {
        gp_model_free(m);
        gp_model_free(ptr::null_mut());
    }
}

#[test]
fn header_is_current_and_compiles_from_c() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/gaplanes.h")).unwrap();
    for sym in ["gp_model_plane", "gp_model_volume", "gp_model_predict", "gp_model_fit_points", "gp_model_assemble", "gp_model_free", "gp_last_error", "GP_STATUS_PANIC"] {
        assert!(header.contains(sym), "header lacks {sym}");
    }
    // `cargo test` does not emit the staticlib, so build it in a private
    // target dir to avoid contending for the outer build lock.
    let target = dir.join("../../target/ffi-smoke");
    let build = Command::new(env!("CARGO"))
        .args(["build", "--release", "-p", "gaplanes-ffi", "--manifest-path"])
        .arg(dir.join("Cargo.toml"))
        .env("CARGO_TARGET_DIR", &target)
        .output()
        .unwrap();
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));
    let lib = target.join("release/libgaplanes_ffi.a");
    let tmp = tempfile::tempdir().unwrap();
    let bin = tmp.path().join("smoke");
    let cc = Command::new("cc")
        .arg(dir.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(cc.status.success(), "{}", String::from_utf8_lossy(&cc.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).contains("ok rank=3"));
}
