// SPDX-License-Identifier: Apache-2.0

//! C ABI over `gaplanes` models.
//!
//! Models are opaque handles released with `gp_model_free`. Every fallible
//! call returns a `GpStatus`; on failure the message is kept per thread and
//! read with `gp_last_error`. Panics are caught at the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};

use gaplanes::decoders::DecoderKind;
use gaplanes::grids::{Coord, Interp};
use gaplanes::model::{Mode, Model, ModelSpec};
use gaplanes::numerics::{numeric_rank, Tensor};
use gaplanes::training::{fit, PointDataset, TrainConfig};
use gaplanes::Error;

/// Opaque model handle.
pub struct GpModel {
    inner: Model,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Model = 4,
    Numerics = 5,
    Training = 6,
    Io = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GpInterp {
    Nearest = 0,
    Multilinear = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GpDecoder {
    Linear = 0,
    Mlp = 1,
    Gated = 2,
    Fused = 3,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GpMode {
    Nonconvex = 0,
    Semiconvex = 1,
    Convex = 2,
}

/// Training settings for `gp_model_fit_points`.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct GpTrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_grids: f64,
    pub lr_decoder: f64,
    pub seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> GpStatus {
    match e {
        Error::Shape(_) => GpStatus::Shape,
        Error::SvdNonConvergence { .. } => GpStatus::Numerics,
        Error::Expr(_) | Error::Config(_) => GpStatus::InvalidArgument,
        Error::Model(_) => GpStatus::Model,
        Error::NonFinite { .. } => GpStatus::Training,
        Error::Format { .. } | Error::Io(_) | Error::Json(_) => GpStatus::Io,
    }
}

struct Fail(GpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GpStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("panic inside gaplanes".into());
            GpStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(GpStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn model_ref<'a>(h: *const GpModel) -> Result<&'a GpModel, Fail> {
    non_null(h, "model")?;
    Ok(&*h)
}

unsafe fn c_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, Fail> {
    non_null(s, what)?;
    CStr::from_ptr(s).to_str().map_err(|_| Fail(GpStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn interp_of(i: GpInterp) -> Interp {
    match i {
        GpInterp::Nearest => Interp::Nearest,
        GpInterp::Multilinear => Interp::Multilinear,
    }
}

fn decoder_of(d: GpDecoder) -> DecoderKind {
    match d {
        GpDecoder::Linear => DecoderKind::Linear,
        GpDecoder::Mlp => DecoderKind::Mlp,
        GpDecoder::Gated => DecoderKind::Gated,
        GpDecoder::Fused => DecoderKind::Fused,
    }
}

fn mode_of(m: GpMode) -> Mode {
    match m {
        GpMode::Nonconvex => Mode::Nonconvex,
        GpMode::Semiconvex => Mode::Semiconvex,
        GpMode::Convex => Mode::Convex,
    }
}

fn coords(data: &[f64], dims: usize) -> Vec<Coord> {
    data.chunks_exact(dims).map(Coord::new).collect()
}

unsafe fn publish(model: Model, out: *mut *mut GpModel) {
    *out = Box::into_raw(Box::new(GpModel { inner: model }));
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`) and returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn gp_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Builds a 2D model with `k` features per grid, line resolution `r1` and
/// plane resolution `r2`.
///
/// # Safety
/// `expr` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gp_model_plane(
    expr: *const c_char,
    k: usize,
    r1: usize,
    r2: usize,
    interp: GpInterp,
    decoder: GpDecoder,
    hidden: usize,
    use_bias: bool,
    seed: u64,
    out: *mut *mut GpModel,
) -> GpStatus {
    guard(|| {
        non_null(out, "out")?;
        let expr = c_str(expr, "expr")?;
        let mut spec = ModelSpec::plane(expr, k, r1, r2, interp_of(interp), decoder_of(decoder), hidden);
        spec.use_bias = use_bias;
        if decoder == GpDecoder::Gated && !expr.contains("mul") {
            spec.mode = Mode::Semiconvex;
        }
        publish(Model::build(&spec, seed, seed ^ 0x9e37_79b9)?, out);
        Ok(())
    })
}

/// Builds a 3D model; `d` and `r` hold line, plane and volume feature dims
/// and resolutions.
///
/// # Safety
/// `expr` must be a NUL-terminated string, `d` and `r` must point to three
/// values each and `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gp_model_volume(
    expr: *const c_char,
    d: *const usize,
    r: *const usize,
    mode: GpMode,
    hidden: usize,
    seed: u64,
    out: *mut *mut GpModel,
) -> GpStatus {
    guard(|| {
        non_null(out, "out")?;
        non_null(d, "d")?;
        non_null(r, "r")?;
        let expr = c_str(expr, "expr")?;
        let (d, r) = (std::slice::from_raw_parts(d, 3), std::slice::from_raw_parts(r, 3));
        let spec = ModelSpec::volume(expr, [d[0], d[1], d[2]], [r[0], r[1], r[2]], mode_of(mode), hidden);
        publish(Model::build(&spec, seed, seed ^ 0x9e37_79b9)?, out);
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gp_model_free(model: *mut GpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input dimension (2 or 3).
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gp_model_dims(model: *const GpModel, out: *mut usize) -> GpStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = model_ref(model)?.inner.dims();
        Ok(())
    })
}

/// Parameter count; frozen gate copies are included when `include_frozen`.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gp_model_param_count(model: *const GpModel, include_frozen: bool, out: *mut usize) -> GpStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = model_ref(model)?.inner.param_count(include_frozen);
        Ok(())
    })
}

/// Predicts at `n` points stored row-major in `coords` (`n * dims` values in
/// `[0, 1]`), writing `n` values to `out`.
///
/// # Safety
/// `coords` must hold `n * dims` values and `out` room for `n`.
#[no_mangle]
pub unsafe extern "C" fn gp_model_predict(model: *const GpModel, coords_in: *const f64, n: usize, out: *mut f64) -> GpStatus {
    guard(|| {
        let m = &model_ref(model)?.inner;
        if n == 0 {
            return Ok(());
        }
        non_null(coords_in, "coords")?;
        non_null(out, "out")?;
        let q = coords(std::slice::from_raw_parts(coords_in, n * m.dims()), m.dims());
        let out = std::slice::from_raw_parts_mut(out, n);
        let mut ev = m.evaluator();
        for (o, q) in out.iter_mut().zip(&q) {
            *o = m.forward(q, &mut ev);
        }
        Ok(())
    })
}

/// Fits the model to `n` point samples with Adam and writes the final
/// full-data MSE to `final_loss` (may be null).
///
/// # Safety
/// `coords` must hold `n * dims` values, `targets` `n` values and `opts` must
/// be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gp_model_fit_points(
    model: *mut GpModel,
    coords_in: *const f64,
    targets: *const f64,
    n: usize,
    opts: *const GpTrainOptions,
    final_loss: *mut f64,
) -> GpStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(coords_in, "coords")?;
        non_null(targets, "targets")?;
        non_null(opts, "opts")?;
        let m = &mut (*model).inner;
        let o = *opts;
        let data = PointDataset::new(
            coords(std::slice::from_raw_parts(coords_in, n * m.dims()), m.dims()),
            std::slice::from_raw_parts(targets, n).to_vec(),
        )?;
        let cfg = TrainConfig {
            steps: o.steps,
            batch_size: o.batch_size,
            lr_grids: o.lr_grids,
            lr_decoder: o.lr_decoder,
            seed: o.seed,
            eval_every: o.steps.max(1),
            ..TrainConfig::default()
        };
        let log = fit(m, &data, &cfg)?;
        if !final_loss.is_null() {
            *final_loss = log.final_loss().unwrap_or(f64::NAN);
        }
        Ok(())
    })
}

/// Writes the `rows x cols` matrix a 2D model takes at grid nodes, row-major.
///
/// # Safety
/// `out` must have room for `rows * cols` values.
#[no_mangle]
pub unsafe extern "C" fn gp_model_assemble(model: *const GpModel, rows: usize, cols: usize, out: *mut f64) -> GpStatus {
    guard(|| {
        non_null(out, "out")?;
        let m = model_ref(model)?.inner.assemble_matrix(rows, cols)?;
        std::slice::from_raw_parts_mut(out, rows * cols).copy_from_slice(m.data());
        Ok(())
    })
}

/// Number of singular values above `rel_tol` times the largest.
///
/// # Safety
/// `data` must hold `rows * cols` row-major values and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn gp_numeric_rank(data: *const f64, rows: usize, cols: usize, rel_tol: f64, out: *mut usize) -> GpStatus {
    guard(|| {
        non_null(data, "data")?;
        non_null(out, "out")?;
        let m = Tensor::new(vec![rows, cols], std::slice::from_raw_parts(data, rows * cols).to_vec())?;
        *out = numeric_rank(&m, rel_tol)?;
        Ok(())
    })
}
