// SPDX-License-Identifier: Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

fn gaplanes(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gaplanes")).args(args).output().unwrap()
}

const TINY_VIDEO: [&str; 10] =
    ["--set", "frames=9", "--set", "w=8", "--set", "train.steps=5", "--set", "train.batch_size=64", "--set", "roster=concat:convex,triplane_add:nonconvex"];

/// CSV rows without the trailing wall-clock column.
fn timeless_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
}

#[test]
fn video_run_writes_csv_and_manifest_and_is_seed_determined() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let mut args = vec!["video", "--seed", "3", "--out", d.path().to_str().unwrap()];
        args.extend(TINY_VIDEO);
        let out = gaplanes(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let (a, b) = (timeless_rows(&dirs[0].path().join("video.csv")), timeless_rows(&dirs[1].path().join("video.csv")));
    assert_eq!(a, b);
    assert_eq!(a[0], "task,model,mode,iou_test,iou_train,params,final_loss");
    assert_eq!(a.len(), 4);

    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dirs[0].path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["task"], "video");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config"]["frames"], 9);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(m["csv_schemas"][0][0], "video.csv");
    assert_eq!(m["param_counts"].as_array().unwrap().len(), 3);
}

#[test]
fn config_file_and_overrides_layer() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.cfg");
    std::fs::write(&cfg, "# tiny\nframes = 12\ntrain.steps = 7\n").unwrap();
    let out = gaplanes(&["video", "--config", cfg.to_str().unwrap(), "--set", "train.steps=9", "--show-config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("frames = 12\n") && text.contains("train.steps = 9\n"), "{text}");
}

#[test]
fn configuration_errors_exit_with_one() {
    for args in [
        vec!["video", "--set", "train.stepz=3"],
        vec!["video", "--set", "frames=many"],
        vec!["seg3d", "--supervision", "lidar"],
        vec!["fit-image", "--image", "/nonexistent.pgm"],
        vec!["assemble", "--expr", "mul(e1,"],
        vec!["nonsense"],
    ] {
        let out = gaplanes(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn assemble_reports_rank_within_bound() {
    let d = tempfile::tempdir().unwrap();
    let out = gaplanes(&["assemble", "--expr", "add(e1,e2)", "--decoder", "linear", "--k", "6", "--size", "24", "--out", d.path().to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("numeric rank 2") && text.contains("rank bound 2"), "{text}");
    assert!(d.path().join("assembled.f32").exists());
}

#[test]
fn gridcheck_passes() {
    let out = gaplanes(&["gridcheck"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(!text.contains("FAIL"));
}
