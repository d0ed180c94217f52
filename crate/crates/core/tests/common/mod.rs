// SPDX-License-Identifier: Apache-2.0

//! Oracles shared by the integration tests. Nothing here calls the
//! library's own gradient or SVD code.

#![allow(dead_code)]

use gaplanes::combiner::presets;
use gaplanes::decoders::DecoderKind;
use gaplanes::grids::{Coord, Interp};
use gaplanes::model::{Mode, Model, ModelSpec};
use gaplanes::numerics::{SeededRng, Tensor};

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-5;

pub fn rel_gap(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-12)
}

/// Central differences of `f` at `theta`, or `None` when steps `h` and
/// `h / 4` disagree (a ReLU or gate flipped inside the stencil).
pub fn central(theta: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Option<Vec<f64>> {
    let mut p = theta.to_vec();
    let mut out = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        let mut diff = |h: f64| {
            p[i] = theta[i] + h;
            let up = f(&p);
            p[i] = theta[i] - h;
            let down = f(&p);
            p[i] = theta[i];
            (up - down) / (2.0 * h)
        };
        let (a, b) = (diff(FD_STEP), diff(FD_STEP / 4.0));
        if (a - b).abs() > 1e-6 * a.abs().max(b.abs()).max(1.0) {
            return None;
        }
        out[i] = a;
    }
    Some(out)
}

/// Worst relative gradient error over `cases` kink-free draws of
/// parameters (N(0,1)) and query point; returns `(cases done, worst)`.
pub fn fd_worst(spec: &ModelSpec, seed: u64, cases: usize) -> (usize, f64) {
    let mut rng = SeededRng::new(seed);
    let (mut done, mut tries, mut worst) = (0, 0, 0.0f64);
    while done < cases && tries < 20 * cases {
        tries += 1;
        let s = rng.below(1 << 30) as u64;
        let mut model = Model::build(spec, s, s + 7).unwrap();
        let theta: Vec<f64> = (0..model.num_trainable()).map(|_| rng.normal(0.0, 1.0)).collect();
        model.set_trainable_vector(&theta).unwrap();
        let q = Coord::new(&(0..spec.dims).map(|_| rng.uniform(0.0, 1.0)).collect::<Vec<_>>());

        let mut ev = model.evaluator();
        model.forward(&q, &mut ev);
        let mut grad = vec![0.0; theta.len()];
        model.backward(&mut ev, 1.0, &mut grad);

        let mut probe = model.clone();
        let Some(mut fd) = central(&theta, |v| {
            probe.set_trainable_vector(v).unwrap();
            probe.predict(&q).unwrap()
        }) else {
            continue;
        };
        if !spec.use_bias {
            // A disabled bias keeps its slot but never moves.
            let last = fd.len() - 1;
            fd[last] = 0.0;
            grad[last] = 0.0;
        }
        worst = worst.max(rel_gap(&grad, &fd));
        done += 1;
    }
    (done, worst)
}

/// 2D `comb(e1, e2)` model with the mode each decoder requires.
pub fn plane_spec(comb: &str, dec: DecoderKind) -> ModelSpec {
    let mut s = ModelSpec::plane(&format!("{comb}(e1,e2)"), 3, 5, 2, Interp::Multilinear, dec, 4);
    s.mode = match dec {
        DecoderKind::Fused => Mode::Convex,
        DecoderKind::Gated if comb != "mul" => Mode::Semiconvex,
        _ => Mode::Nonconvex,
    };
    s
}

/// Every composition the gradient suite covers, by name.
pub fn gradient_compositions() -> Vec<(String, ModelSpec)> {
    let mut out = Vec::new();
    for comb in ["add", "concat", "mul"] {
        for dec in [DecoderKind::Linear, DecoderKind::Mlp, DecoderKind::Gated, DecoderKind::Fused] {
            // The fused decoder needs a product-free expression.
            if comb == "mul" && dec == DecoderKind::Fused {
                continue;
            }
            out.push((format!("{comb}+{dec}"), plane_spec(comb, dec)));
        }
    }
    let mut no_bias = plane_spec("mul", DecoderKind::Linear);
    no_bias.use_bias = false;
    out.push(("mul+linear no bias".into(), no_bias));
    for mode in Mode::ALL {
        out.push((format!("concat volume {mode}"), ModelSpec::volume(presets::CONCAT, [2, 2, 2], [4, 3, 3], mode, 4)));
    }
    out.push(("mult volume".into(), ModelSpec::volume(presets::MULT, [2, 2, 2], [4, 3, 3], Mode::Nonconvex, 4)));
    let mut multires = ModelSpec::volume(presets::CONCAT, [2, 2, 2], [3, 3, 3], Mode::Nonconvex, 4);
    multires.scales = vec![1, 2];
    out.push(("concat volume two scales".into(), multires));
    out
}

/// Singular values in decreasing order, computed by nalgebra.
pub fn singular_values(m: &Tensor) -> Vec<f64> {
    let a = nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
    let mut s: Vec<f64> = a.singular_values().iter().cloned().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// Count of singular values above `rel_tol` times the largest.
pub fn rank(m: &Tensor, rel_tol: f64) -> usize {
    let s = singular_values(m);
    match s.first() {
        Some(&top) if top > 0.0 => s.iter().filter(|&&x| x > rel_tol * top).count(),
        _ => 0,
    }
}

/// `sqrt(sum_{i > k} s_i^2)`.
pub fn tail(s: &[f64], k: usize) -> f64 {
    s.iter().skip(k).map(|x| x * x).sum::<f64>().sqrt()
}

pub fn frobenius_gap(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}
