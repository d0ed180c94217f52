// SPDX-License-Identifier: Apache-2.0

//! Closed-form matrix approximations used as comparators: rank-k
//! truncation, low-rank plus low-resolution, and low-rank plus sparse.
//!
//! The low-resolution operator works on cell centres: coarse cell `a` of `r`
//! covers fine rows `[a m / r, (a + 1) m / r)` and its value sits at fine
//! coordinate `(a + 0.5) m / r - 0.5`. Downsampling averages each cell with
//! fractional-area weights; upsampling interpolates linearly between cell
//! centres and extrapolates linearly past the outermost ones. Both steps
//! preserve affine images exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{lowrank_truncate, psnr_from_mse, svd, svd_warm, Svd, Tensor};

/// How sparse entries are charged against the budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparseCost {
    /// One parameter per kept value, indices free.
    Value,
    /// Value plus row and column index.
    ValueAndIndex,
}

impl SparseCost {
    pub fn per_entry(self) -> usize {
        match self {
            SparseCost::Value => 1,
            SparseCost::ValueAndIndex => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    LowRes { k: usize, r_low: usize },
    Sparse { k: usize, s: usize },
}

/// A parameter budget and how it is divided.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecompBudget {
    pub total_params: usize,
    pub split: Split,
}

impl DecompBudget {
    pub fn used(&self, m: usize, n: usize, cost: SparseCost) -> usize {
        match self.split {
            Split::LowRes { k, r_low } => k * (m + n) + r_low * r_low,
            Split::Sparse { k, s } => k * (m + n) + s * cost.per_entry(),
        }
    }

    pub fn fits(&self, m: usize, n: usize, cost: SparseCost) -> bool {
        self.used(m, n, cost) <= self.total_params
    }
}

fn check_matrix(m: &Tensor) -> Result<(usize, usize)> {
    if !m.is_matrix() {
        return Err(Error::Shape(format!("expected a matrix, got shape {:?}", m.shape())));
    }
    Ok((m.rows(), m.cols()))
}

/// Rank-k truncation; `k = 0` gives the zero matrix.
pub fn lowrank_k(m: &Tensor, k: usize) -> Result<Tensor> {
    let (r, c) = check_matrix(m)?;
    if k > r.min(c) {
        return Err(Error::Shape(format!("rank {k} exceeds min({r}, {c})")));
    }
    lowrank_truncate(m, k)
}

/// Overlap of fine index range `[i, i+1)` with coarse cell `a` when `n`
/// fine samples map onto `r` cells, in fine units.
fn overlap(i: usize, a: usize, n: usize, r: usize) -> f64 {
    let lo = (a * n) as f64 / r as f64;
    let hi = ((a + 1) * n) as f64 / r as f64;
    let (fi, fj) = (i as f64, (i + 1) as f64);
    (hi.min(fj) - lo.max(fi)).max(0.0)
}

/// Row-stochastic `r x n` averaging operator along one axis.
fn down_op(n: usize, r: usize) -> Vec<Vec<(usize, f64)>> {
    let width = n as f64 / r as f64;
    (0..r)
        .map(|a| {
            let first = (a * n) / r;
            let last = (((a + 1) * n).div_ceil(r)).min(n);
            (first..last).map(|i| (i, overlap(i, a, n, r) / width)).filter(|&(_, w)| w > 0.0).collect()
        })
        .collect()
}

/// Interpolation weights from `r` cell centres to each of `n` fine samples.
fn up_op(r: usize, n: usize) -> Vec<[(usize, f64); 2]> {
    (0..n)
        .map(|i| {
            if r == 1 {
                return [(0, 1.0), (0, 0.0)];
            }
            let t = (i as f64 + 0.5) * r as f64 / n as f64 - 0.5;
            let j = (t.floor().max(0.0) as usize).min(r - 2);
            let w = t - j as f64;
            [(j, 1.0 - w), (j + 1, w)]
        })
        .collect()
}

/// Area average onto an `r_low x r_low` grid.
pub fn downsample(m: &Tensor, r_low: usize) -> Result<Tensor> {
    downsample_to(m, r_low, r_low)
}

pub fn downsample_to(m: &Tensor, rr: usize, rc: usize) -> Result<Tensor> {
    let (rows, cols) = check_matrix(m)?;
    if rr == 0 || rc == 0 || rr > rows || rc > cols {
        return Err(Error::Shape(format!("cannot downsample {rows}x{cols} to {rr}x{rc}")));
    }
    let (dr, dc) = (down_op(rows, rr), down_op(cols, rc));
    let mut tmp = vec![0.0; rr * cols];
    for (a, taps) in dr.iter().enumerate() {
        for &(i, w) in taps {
            for j in 0..cols {
                tmp[a * cols + j] += w * m.at(i, j);
            }
        }
    }
    let mut out = vec![0.0; rr * rc];
    for a in 0..rr {
        for (b, taps) in dc.iter().enumerate() {
            out[a * rc + b] = taps.iter().map(|&(j, w)| w * tmp[a * cols + j]).sum();
        }
    }
    Tensor::new(vec![rr, rc], out)
}

/// Separable linear interpolation from cell centres to `rows x cols`.
pub fn upsample(l: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    let (rr, rc) = check_matrix(l)?;
    if rows < rr || cols < rc {
        return Err(Error::Shape(format!("cannot upsample {rr}x{rc} to {rows}x{cols}")));
    }
    let (ur, uc) = (up_op(rr, rows), up_op(rc, cols));
    let mut tmp = vec![0.0; rows * rc];
    for (i, taps) in ur.iter().enumerate() {
        for b in 0..rc {
            tmp[i * rc + b] = taps[0].1 * l.at(taps[0].0, b) + taps[1].1 * l.at(taps[1].0, b);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for (j, taps) in uc.iter().enumerate() {
            out[i * cols + j] = taps[0].1 * tmp[i * rc + taps[0].0] + taps[1].1 * tmp[i * rc + taps[1].0];
        }
    }
    Tensor::new(vec![rows, cols], out)
}

#[derive(Clone, Debug)]
pub struct LowRankLowRes {
    /// `m x k`, singular values folded in.
    pub u: Tensor,
    /// `n x k`.
    pub v: Tensor,
    pub low: Tensor,
    pub approx: Tensor,
}

fn factors(s: &Svd, k: usize, m: usize, n: usize) -> (Tensor, Tensor) {
    let u = Tensor::from_fn(m, k.max(1), |i, c| if c < k { s.u.at(i, c) * s.s[c] } else { 0.0 });
    let v = Tensor::from_fn(n, k.max(1), |j, c| if c < k { s.v.at(j, c) } else { 0.0 });
    (u, v)
}

/// Greedy: fit the coarse grid first, then the best rank-k approximation of
/// the residual. `r_low = 0` skips the coarse part.
pub fn lowrank_plus_lowres(m: &Tensor, k: usize, r_low: usize) -> Result<LowRankLowRes> {
    let (rows, cols) = check_matrix(m)?;
    if k > rows.min(cols) {
        return Err(Error::Shape(format!("rank {k} exceeds min({rows}, {cols})")));
    }
    let (low, smooth) = if r_low == 0 {
        (Tensor::zeros(&[1, 1]), Tensor::zeros(&[rows, cols]))
    } else {
        let low = downsample(m, r_low)?;
        let up = upsample(&low, rows, cols)?;
        (low, up)
    };
    let resid = m.sub(&smooth)?;
    let s = svd(&resid)?;
    let (u, v) = factors(&s, k, rows, cols);
    let approx = smooth.add(&s.truncate(k))?;
    Ok(LowRankLowRes { u, v, low, approx })
}

#[derive(Clone, Debug)]
pub struct LowRankSparse {
    pub u: Tensor,
    pub v: Tensor,
    /// `(row, col, value)` of each kept entry.
    pub sparse: Vec<(usize, usize, f64)>,
    pub approx: Tensor,
    /// Squared Frobenius error after each round.
    pub history: Vec<f64>,
}

/// Indices of the `s` largest-magnitude entries (ties by lower index).
fn top_s(r: &[f64], s: usize) -> Vec<usize> {
    if s == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..r.len()).collect();
    if s < r.len() {
        idx.select_nth_unstable_by(s - 1, |&a, &b| r[b].abs().total_cmp(&r[a].abs()).then(a.cmp(&b)));
        idx.truncate(s);
    }
    idx.sort_unstable();
    idx
}

/// Alternating minimisation: rank-k of `M - S`, then the top-s entries of
/// `M - L`. Stops after `iters` rounds or once a round gains < 0.01 dB.
pub fn lowrank_plus_sparse(m: &Tensor, k: usize, s: usize, iters: usize) -> Result<LowRankSparse> {
    let (rows, cols) = check_matrix(m)?;
    if k > rows.min(cols) || s > rows * cols || iters == 0 {
        return Err(Error::Shape(format!("invalid split k={k}, s={s}, iters={iters} for {rows}x{cols}")));
    }
    let mut sparse = vec![0.0; rows * cols];
    let mut kept: Vec<usize> = Vec::new();
    let mut history: Vec<f64> = Vec::new();
    let mut prev_v: Option<Tensor> = None;
    let mut best_db = f64::NEG_INFINITY;
    let mut last = None;
    for _ in 0..iters {
        let target = Tensor::new(vec![rows, cols], m.data().iter().zip(&sparse).map(|(a, b)| a - b).collect())?;
        let dec = match (&prev_v, rows >= cols) {
            (Some(v0), true) => svd_warm(&target, v0)?,
            _ => svd(&target)?,
        };
        let low = dec.truncate(k);
        let resid: Vec<f64> = m.data().iter().zip(low.data()).map(|(a, b)| a - b).collect();
        kept = top_s(&resid, s);
        sparse.fill(0.0);
        for &i in &kept {
            sparse[i] = resid[i];
        }
        let err2: f64 = resid.iter().zip(&sparse).map(|(r, s)| (r - s) * (r - s)).sum();
        history.push(err2);
        let db = psnr_from_mse(err2 / (rows * cols) as f64, 1.0);
        if rows >= cols && dec.v.cols() == cols {
            prev_v = Some(full_v(&dec, cols));
        }
        last = Some((dec, low));
        let gain = db - best_db;
        best_db = best_db.max(db);
        if gain < 0.01 {
            break;
        }
    }
    let (dec, low) = last.expect("at least one round");
    let (u, v) = factors(&dec, k, rows, cols);
    let approx = Tensor::new(vec![rows, cols], low.data().iter().zip(&sparse).map(|(a, b)| a + b).collect())?;
    let sparse = kept.iter().map(|&i| (i / cols, i % cols, sparse[i])).collect();
    Ok(LowRankSparse { u, v, sparse, approx, history })
}

fn full_v(dec: &Svd, n: usize) -> Tensor {
    Tensor::from_fn(n, n, |i, j| dec.v.at(i, j))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompRow {
    pub budget_frac: f64,
    pub method: &'static str,
    pub k: usize,
    pub r_low_or_s: usize,
    pub psnr: f64,
    pub params: usize,
}

/// Low-resolution sides tried by the sweep: 0 and multiples of 8 up to
/// `max_side`.
pub fn lowres_sides(max_side: usize) -> Vec<usize> {
    let mut v = vec![0];
    let mut r = 8;
    while r <= max_side {
        v.push(r);
        r += if r < 64 { 8 } else { 16 };
    }
    v
}

/// Best low-rank + low-res PSNR for each budget fraction. One SVD per
/// coarse side serves every rank, since the residual does not depend on k.
pub fn pareto_lowres(m: &Tensor, fracs: &[f64], sides: &[usize]) -> Result<Vec<DecompRow>> {
    let (rows, cols) = check_matrix(m)?;
    let total = (rows * cols) as f64;
    let mut best: Vec<Option<DecompRow>> = vec![None; fracs.len()];
    let max_budget = fracs.iter().cloned().fold(0.0, f64::max) * total;
    for &r in sides {
        if (r * r) as f64 > max_budget || r > rows.min(cols) {
            continue;
        }
        let smooth = if r == 0 { Tensor::zeros(&[rows, cols]) } else { upsample(&downsample(m, r)?, rows, cols)? };
        let resid = m.sub(&smooth)?;
        let dec = svd(&resid)?;
        for (bi, &frac) in fracs.iter().enumerate() {
            let budget = (frac * total).floor() as usize;
            if r * r > budget {
                continue;
            }
            let k = ((budget - r * r) / (rows + cols)).min(rows.min(cols));
            let err2 = dec.tail_energy(k);
            let psnr = psnr_from_mse(err2 / total, 1.0);
            let row = DecompRow { budget_frac: frac, method: "lowrank_lowres", k, r_low_or_s: r, psnr, params: k * (rows + cols) + r * r };
            if best[bi].is_none_or(|b| psnr > b.psnr) {
                best[bi] = Some(row);
            }
        }
    }
    Ok(best.into_iter().flatten().collect())
}

/// Best low-rank + sparse PSNR for each budget fraction over the given ranks.
pub fn pareto_sparse(m: &Tensor, fracs: &[f64], ranks: &[usize], cost: SparseCost, iters: usize) -> Result<Vec<DecompRow>> {
    let (rows, cols) = check_matrix(m)?;
    let total = (rows * cols) as f64;
    let mut out = Vec::new();
    for &frac in fracs {
        let budget = (frac * total).floor() as usize;
        let mut best: Option<DecompRow> = None;
        for &k in ranks {
            if k * (rows + cols) > budget || k > rows.min(cols) {
                continue;
            }
            let s = ((budget - k * (rows + cols)) / cost.per_entry()).min(rows * cols);
            let fit = lowrank_plus_sparse(m, k, s, iters)?;
            let err2 = *fit.history.iter().min_by(|a, b| a.total_cmp(b)).expect("nonempty");
            let psnr = psnr_from_mse(err2 / total, 1.0);
            let row = DecompRow {
                budget_frac: frac,
                method: "lowrank_sparse",
                k,
                r_low_or_s: s,
                psnr,
                params: k * (rows + cols) + s * cost.per_entry(),
            };
            if best.is_none_or(|b| psnr > b.psnr) {
                best = Some(row);
            }
        }
        out.extend(best);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{frobenius, SeededRng};

    fn rand_mat(m: usize, n: usize, seed: u64) -> Tensor {
        Tensor::new(vec![m, n], SeededRng::new(seed).normal_vec(m * n, 1.0)).unwrap()
    }

    #[test]
    fn lowrank_cases() {
        let m = rand_mat(9, 7, 1);
        assert!(lowrank_k(&m, 7).unwrap().sub(&m).unwrap().max_abs() < 1e-9);
        let r1 = Tensor::from_fn(6, 5, |i, j| (i as f64 + 1.0) * (j as f64 - 2.5));
        assert!(lowrank_k(&r1, 1).unwrap().sub(&r1).unwrap().max_abs() < 1e-9);
        let m = rand_mat(32, 32, 2);
        let s = svd(&m).unwrap();
        let err = frobenius(&lowrank_k(&m, 4).unwrap().sub(&m).unwrap());
        let tail: f64 = s.s[4..].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((err - tail).abs() <= 1e-9 * tail);
    }

    #[test]
    fn resampling_preserves_constants_and_ramps() {
        for (m, n, r) in [(16, 16, 4), (17, 13, 5), (64, 48, 7)] {
            let c = Tensor::filled(&[m, n], 0.37);
            let back = upsample(&downsample(&c, r).unwrap(), m, n).unwrap();
            assert!(back.sub(&c).unwrap().max_abs() < 1e-12);
        }
        // Affine images survive whenever the cells tile whole pixels.
        for (m, n, r) in [(16, 16, 4), (64, 48, 8), (30, 30, 10)] {
            let ramp = Tensor::from_fn(m, n, |i, j| i as f64 + 2.0 * j as f64 - 3.0);
            let back = upsample(&downsample(&ramp, r).unwrap(), m, n).unwrap();
            assert!(back.sub(&ramp).unwrap().max_abs() < 1e-9, "{m}x{n} r={r}");
        }
    }

    #[test]
    fn downsample_matches_loop_oracle() {
        let m = rand_mat(64, 64, 3);
        let r = 8;
        let d = downsample(&m, r).unwrap();
        for a in 0..r {
            for b in 0..r {
                let mut s = 0.0;
                for i in 8 * a..8 * (a + 1) {
                    for j in 8 * b..8 * (b + 1) {
                        s += m.at(i, j);
                    }
                }
                assert!((d.at(a, b) - s / 64.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn greedy_identity_resolution_and_pure_lowres() {
        let m = rand_mat(12, 12, 4);
        let fit = lowrank_plus_lowres(&m, 0, 12).unwrap();
        assert!(fit.approx.sub(&m).unwrap().max_abs() < 1e-12);
        let smooth = Tensor::from_fn(12, 12, |i, j| 0.2 + 0.05 * i as f64 - 0.01 * j as f64);
        let fit = lowrank_plus_lowres(&smooth, 0, 4).unwrap();
        assert!(fit.approx.sub(&smooth).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn sparse_recovers_spikes() {
        let rank1 = Tensor::from_fn(10, 8, |i, j| (0.3 + i as f64 * 0.1) * (1.0 + 0.2 * j as f64));
        let fit = lowrank_plus_sparse(&rank1, 1, 0, 3).unwrap();
        assert!(fit.sparse.is_empty());
        assert!(fit.approx.sub(&rank1).unwrap().max_abs() < 1e-9);

        let u: Vec<f64> = (0..20).map(|i| 1.0 + 0.05 * i as f64).collect();
        let v: Vec<f64> = (0..16).map(|j| 0.5 + 0.03 * j as f64).collect();
        let mut m = Tensor::from_fn(20, 16, |i, j| u[i] * v[j]);
        for (i, j, a) in [(1, 2, 9.0), (5, 11, -7.0), (9, 0, 8.0), (14, 7, -10.0), (19, 15, 6.5)] {
            m.set(i, j, m.at(i, j) + a);
        }
        let fit = lowrank_plus_sparse(&m, 1, 5, 200).unwrap();
        let err = frobenius(&fit.approx.sub(&m).unwrap());
        assert!(err < 1e-6, "residual {err}");
        for w in fit.history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn budget_accounting() {
        let b = DecompBudget { total_params: 1000, split: Split::Sparse { k: 2, s: 300 } };
        assert_eq!(b.used(100, 100, SparseCost::Value), 700);
        assert_eq!(b.used(100, 100, SparseCost::ValueAndIndex), 1300);
        assert!(!b.fits(100, 100, SparseCost::ValueAndIndex));
        let b = DecompBudget { total_params: 1000, split: Split::LowRes { k: 3, r_low: 20 } };
        assert_eq!(b.used(100, 100, SparseCost::Value), 1000);
    }
}
