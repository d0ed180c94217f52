// SPDX-License-Identifier: Apache-2.0

//! Fast invariant checks run by the `gridcheck` subcommand.

use crate::decoders::DecoderKind;
use crate::error::Result;
use crate::grids::{BasisLabel, FeatureGrid, Interp};
use crate::model::{Mode, Model, ModelSpec};
use crate::numerics::{numeric_rank, SeededRng, DEFAULT_RANK_TOL};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        CheckResult { name: name.into(), passed, detail: detail.into() }
    }
}

/// 2D line combiners covered by the rank table.
pub const COMBINERS: [&str; 3] = ["add", "concat", "mul"];
/// Decoders covered by the rank table.
pub const RANK_DECODERS: [DecoderKind; 3] = [DecoderKind::Linear, DecoderKind::Gated, DecoderKind::Mlp];

/// Largest rank a 2D line-feature model can reach on an `m x n` grid
/// without a bias term.
pub fn rank_bound(combiner: &str, decoder: DecoderKind, k: usize, r1: usize, m: usize, n: usize) -> usize {
    let cap = match (combiner, decoder) {
        ("mul", DecoderKind::Linear) => k,
        (_, DecoderKind::Linear) => 2,
        _ => r1,
    };
    cap.min(m).min(n)
}

/// Spec for one rank-table cell with nearest interpolation and no bias.
pub fn rank_spec(combiner: &str, decoder: DecoderKind, k: usize, r1: usize, hidden: usize) -> ModelSpec {
    let mut spec = ModelSpec::plane(&format!("{combiner}(e1,e2)"), k, r1, 2, Interp::Nearest, decoder, hidden);
    spec.use_bias = false;
    spec.init_scale = 1.0;
    if decoder == DecoderKind::Gated && combiner != "mul" {
        spec.mode = Mode::Semiconvex;
    }
    spec
}

/// Rank of the assembled matrix for every table cell over `seeds` seeds.
pub fn rank_checks(seeds: u64, m: usize, k: usize, r1: usize, hidden: usize) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for comb in COMBINERS {
        for dec in RANK_DECODERS {
            let bound = rank_bound(comb, dec, k, r1, m, m);
            let mut worst = 0;
            for seed in 0..seeds {
                let model = Model::build(&rank_spec(comb, dec, k, r1, hidden), seed, seed + 1000)?;
                worst = worst.max(numeric_rank(&model.assemble_matrix(m, m)?, DEFAULT_RANK_TOL)?);
            }
            out.push(CheckResult::new(format!("rank {comb}+{dec}"), worst <= bound, format!("max rank {worst}, bound {bound}")));
        }
    }
    Ok(out)
}

/// Multilinear grids reproduce affine functions; nearest lookups return
/// node values.
pub fn interpolation_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::new();
    for axes in [vec![1], vec![1, 2], vec![1, 2, 3]] {
        let label = BasisLabel::new(&axes)?;
        let res: Vec<usize> = axes.iter().map(|_| 3 + rng.below(6)).collect();
        let coef: Vec<f64> = (0..=axes.len()).map(|_| rng.normal(0.0, 1.0)).collect();
        let affine = |p: &[f64]| coef[0] + p.iter().zip(&coef[1..]).map(|(a, b)| a * b).sum::<f64>();
        let mut grid = FeatureGrid::zeros(label, res.clone(), 1, Interp::Multilinear)?;
        for node in 0..grid.num_nodes() {
            let mut rem = node;
            let mut p = vec![0.0; axes.len()];
            for a in (0..axes.len()).rev() {
                p[a] = (rem % res[a]) as f64 / (res[a] - 1) as f64;
                rem /= res[a];
            }
            grid.params[node] = affine(&p);
        }
        let mut err: f64 = 0.0;
        for _ in 0..200 {
            let p: Vec<f64> = axes.iter().map(|_| rng.uniform(0.0, 1.0)).collect();
            err = err.max((grid.interpolate(&p)[0] - affine(&p)).abs());
        }
        out.push(CheckResult::new(format!("multilinear affine {}D", axes.len()), err < 1e-12, format!("max error {err:.3e}")));

        let mut near = grid.clone();
        near.interp = Interp::Nearest;
        let mut err: f64 = 0.0;
        for node in 0..near.num_nodes() {
            let mut rem = node;
            let mut p = vec![0.0; axes.len()];
            for a in (0..axes.len()).rev() {
                p[a] = (rem % res[a]) as f64 / (res[a] - 1) as f64;
                rem /= res[a];
            }
            err = err.max((near.interpolate(&p)[0] - near.params[node]).abs());
        }
        out.push(CheckResult::new(format!("nearest at nodes {}D", axes.len()), err == 0.0, format!("max error {err:.3e}")));
    }
    Ok(out)
}

/// Relative gap between analytic and central-difference gradients of one
/// prediction, or `None` when a ReLU or gate flips inside the stencil.
pub fn fd_gap(model: &mut Model, q: &crate::grids::Coord, h: f64) -> Option<f64> {
    let mut ev = model.evaluator();
    model.forward(q, &mut ev);
    let mut grad = vec![0.0; model.num_trainable()];
    model.backward(&mut ev, 1.0, &mut grad);
    let theta = model.trainable_vector();
    let mut fd = vec![0.0; theta.len()];
    let eval = |m: &mut Model, v: &[f64]| {
        m.set_trainable_vector(v).expect("same length");
        m.predict(q).expect("dims")
    };
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        let mut central = |step: f64| {
            probe[i] = theta[i] + step;
            let up = eval(model, &probe);
            probe[i] = theta[i] - step;
            let down = eval(model, &probe);
            probe[i] = theta[i];
            (up - down) / (2.0 * step)
        };
        let (a, b) = (central(h), central(h / 4.0));
        if (a - b).abs() > 1e-6 * a.abs().max(b.abs()).max(1.0) {
            model.set_trainable_vector(&theta).expect("same length");
            return None;
        }
        fd[i] = a;
    }
    model.set_trainable_vector(&theta).expect("same length");
    if !model.spec.use_bias {
        let last = fd.len() - 1;
        fd[last] = 0.0;
    }
    let num: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let den = grad.iter().map(|a| a * a).sum::<f64>().sqrt().max(fd.iter().map(|a| a * a).sum::<f64>().sqrt()).max(1e-12);
    Some(num / den)
}

/// Finite-difference checks on small 2D and 3D models.
pub fn gradient_checks(cases: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut specs: Vec<(String, ModelSpec)> = Vec::new();
    for comb in COMBINERS {
        for dec in [DecoderKind::Linear, DecoderKind::Mlp, DecoderKind::Gated] {
            let mut s = ModelSpec::plane(&format!("{comb}(e1,e2)"), 3, 5, 2, Interp::Multilinear, dec, 4);
            if dec == DecoderKind::Gated && comb != "mul" {
                s.mode = Mode::Semiconvex;
            }
            specs.push((format!("2D {comb}+{dec}"), s));
        }
    }
    for (name, expr, mode) in [
        ("concat", crate::combiner::presets::CONCAT, Mode::Convex),
        ("concat", crate::combiner::presets::CONCAT, Mode::Semiconvex),
        ("concat", crate::combiner::presets::CONCAT, Mode::Nonconvex),
        ("mult", crate::combiner::presets::MULT, Mode::Nonconvex),
    ] {
        specs.push((format!("3D {name} {mode}"), ModelSpec::volume(expr, [2, 2, 2], [4, 3, 3], mode, 4)));
    }
    let mut out = Vec::new();
    let mut rng = SeededRng::new(seed);
    for (name, spec) in specs {
        let mut worst: f64 = 0.0;
        let mut done = 0;
        let mut tries = 0;
        while done < cases && tries < cases * 10 {
            tries += 1;
            let s = rng.below(1 << 30) as u64;
            let mut model = Model::build(&spec, s, s + 1)?;
            let mut pr = SeededRng::substream(s, 3);
            let blocks = model.trainable_blocks_mut();
            for b in blocks {
                for v in b.iter_mut() {
                    *v = pr.normal(0.0, 1.0);
                }
            }
            let q = crate::grids::Coord::new(&(0..spec.dims).map(|_| pr.uniform(0.0, 1.0)).collect::<Vec<_>>());
            if let Some(gap) = fd_gap(&mut model, &q, 1e-6) {
                worst = worst.max(gap);
                done += 1;
            }
        }
        out.push(CheckResult::new(
            format!("gradient {name}"),
            done == cases && worst < 1e-5,
            format!("{done} cases, max relative error {worst:.2e}"),
        ));
    }
    Ok(out)
}

/// Every check at the sizes used by `gridcheck`.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = interpolation_checks(seed)?;
    out.extend(gradient_checks(10, seed)?);
    out.extend(rank_checks(20, 24, 3, 8, 16)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_table() {
        assert_eq!(rank_bound("add", DecoderKind::Linear, 3, 8, 24, 24), 2);
        assert_eq!(rank_bound("concat", DecoderKind::Linear, 3, 8, 24, 24), 2);
        assert_eq!(rank_bound("mul", DecoderKind::Linear, 3, 8, 24, 24), 3);
        assert_eq!(rank_bound("mul", DecoderKind::Mlp, 3, 8, 24, 24), 8);
        assert_eq!(rank_bound("add", DecoderKind::Gated, 3, 30, 24, 20), 20);
    }

    #[test]
    fn quick_suite_passes() {
        for c in interpolation_checks(3).unwrap().into_iter().chain(gradient_checks(3, 3).unwrap()).chain(rank_checks(3, 24, 3, 8, 16).unwrap()) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
