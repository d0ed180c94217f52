// SPDX-License-Identifier: Apache-2.0

use super::Tensor;
use crate::error::{Error, Result};

/// Relative off-diagonal tolerance for Jacobi convergence.
pub const SVD_TOL: f64 = 1e-12;
/// Maximum number of full Jacobi sweeps.
pub const SVD_MAX_SWEEPS: usize = 60;
/// Default relative tolerance for [`numeric_rank`].
pub const DEFAULT_RANK_TOL: f64 = 1e-8;
/// PSNR reported for an exact reconstruction.
pub const PSNR_CAP_DB: f64 = 200.0;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !a.is_matrix() || !b.is_matrix() || a.cols() != b.rows() {
        return Err(Error::Shape(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn frobenius(a: &Tensor) -> f64 {
    a.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Thin singular value decomposition `M = U diag(S) V^T`.
#[derive(Clone, Debug)]
pub struct Svd {
    /// `m x r`, orthonormal columns.
    pub u: Tensor,
    /// Nonincreasing, nonnegative; length `r = min(m, n)`.
    pub s: Vec<f64>,
    /// `n x r`, orthonormal columns.
    pub v: Tensor,
}

impl Svd {
    /// Rank-`k` reconstruction `U_k diag(S_k) V_k^T`.
    pub fn truncate(&self, k: usize) -> Tensor {
        let (m, n) = (self.u.rows(), self.v.rows());
        let r = self.s.len();
        let k = k.min(r);
        let mut out = vec![0.0; m * n];
        let (ud, vd) = (self.u.data(), self.v.data());
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for c in 0..k {
                let w = ud[i * r + c] * self.s[c];
                if w == 0.0 {
                    continue;
                }
                for (j, o) in row.iter_mut().enumerate() {
                    *o += w * vd[j * r + c];
                }
            }
        }
        Tensor::new(vec![m, n], out).expect("finite factors")
    }

    /// Squared Frobenius error of the rank-`k` truncation (Eckart-Young).
    pub fn tail_energy(&self, k: usize) -> f64 {
        self.s.iter().skip(k).map(|s| s * s).sum()
    }
}

/// One-sided Jacobi SVD.
pub fn svd(m: &Tensor) -> Result<Svd> {
    check_svd_input(m)?;
    if m.rows() < m.cols() {
        let t = svd_tall(&m.transpose(), None)?;
        return Ok(Svd { u: t.v, s: t.s, v: t.u });
    }
    svd_tall(m, None)
}

/// Jacobi SVD started from an orthogonal `n x n` right basis `v0`, typically
/// the `V` of a nearby matrix. Falls back to a cold start when `m < n` or the
/// basis has the wrong shape. The result satisfies the same guarantees as
/// [`svd`]; only the number of sweeps changes.
pub fn svd_warm(m: &Tensor, v0: &Tensor) -> Result<Svd> {
    check_svd_input(m)?;
    let n = m.cols();
    if m.rows() < n || v0.shape() != [n, n] {
        return svd(m);
    }
    svd_tall(m, Some(v0))
}

fn check_svd_input(m: &Tensor) -> Result<()> {
    if !m.is_matrix() {
        return Err(Error::Shape(format!("svd needs a matrix, got {:?}", m.shape())));
    }
    if m.rows() > 1024 || m.cols() > 1024 {
        return Err(Error::Shape(format!("svd limited to 1024 x 1024, got {:?}", m.shape())));
    }
    Ok(())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (xi, yi) in x.iter_mut().zip(y.iter_mut()) {
        let (a, b) = (*xi, *yi);
        *xi = c * a - s * b;
        *yi = s * a + c * b;
    }
}

fn pair_mut(buf: &mut [f64], len: usize, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(p < q);
    let (lo, hi) = buf.split_at_mut(q * len);
    (&mut lo[p * len..(p + 1) * len], &mut hi[..len])
}

/// Jacobi on a matrix with `rows >= cols`. Columns are stored contiguously.
fn svd_tall(a: &Tensor, v0: Option<&Tensor>) -> Result<Svd> {
    let (m, n) = (a.rows(), a.cols());
    let mut cols = vec![0.0; n * m];
    let mut vcols = vec![0.0; n * n];
    match v0 {
        None => {
            for i in 0..m {
                for j in 0..n {
                    cols[j * m + i] = a.at(i, j);
                }
            }
            for j in 0..n {
                vcols[j * n + j] = 1.0;
            }
        }
        Some(v0) => {
            // cols = A * V0, column by column.
            for j in 0..n {
                for p in 0..n {
                    vcols[j * n + p] = v0.at(p, j);
                }
            }
            let ad = a.data();
            for i in 0..m {
                let arow = &ad[i * n..(i + 1) * n];
                for j in 0..n {
                    cols[j * m + i] = dot(arow, &vcols[j * n..(j + 1) * n]);
                }
            }
        }
    }

    let total: f64 = a.data().iter().map(|v| v * v).sum();
    let tiny = (f64::EPSILON * f64::EPSILON) * total.max(f64::MIN_POSITIVE);
    let mut norms: Vec<f64> = (0..n).map(|j| dot(&cols[j * m..(j + 1) * m], &cols[j * m..(j + 1) * m])).collect();

    let mut converged = n < 2;
    let mut residual = 0.0;
    let mut sweeps = 0;
    while !converged && sweeps < SVD_MAX_SWEEPS {
        sweeps += 1;
        let mut rotated = false;
        residual = 0.0f64;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (alpha, beta) = (norms[p], norms[q]);
                if alpha <= tiny || beta <= tiny {
                    continue;
                }
                let gamma = dot(&cols[p * m..(p + 1) * m], &cols[q * m..(q + 1) * m]);
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= SVD_TOL {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (cp, cq) = pair_mut(&mut cols, m, p, q);
                rotate(cp, cq, c, s);
                let (vp, vq) = pair_mut(&mut vcols, n, p, q);
                rotate(vp, vq, c, s);
                norms[p] = alpha - t * gamma;
                norms[q] = beta + t * gamma;
            }
        }
        // Refresh norms to stop drift from the incremental updates.
        for j in 0..n {
            let c = &cols[j * m..(j + 1) * m];
            norms[j] = dot(c, c);
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::SvdNonConvergence { sweeps, residual });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap().then(x.cmp(&y)));
    let s: Vec<f64> = order.iter().map(|&j| norms[j].max(0.0).sqrt()).collect();

    let smax = s.first().copied().unwrap_or(0.0);
    let cutoff = smax * f64::EPSILON * (m.max(n) as f64);
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (rank, &j) in order.iter().enumerate() {
        if s[rank] > cutoff && s[rank] > 0.0 {
            let inv = 1.0 / s[rank];
            ucols.push(cols[j * m..(j + 1) * m].iter().map(|v| v * inv).collect());
        } else {
            deficient.push(rank);
            ucols.push(vec![0.0; m]);
        }
    }
    complete_basis(&mut ucols, &deficient, m);

    let mut u = vec![0.0; m * n];
    let mut v = vec![0.0; n * n];
    for (c, &j) in order.iter().enumerate() {
        for i in 0..m {
            u[i * n + c] = ucols[c][i];
        }
        for i in 0..n {
            v[i * n + c] = vcols[j * n + i];
        }
    }
    Ok(Svd { u: Tensor::new(vec![m, n], u)?, s, v: Tensor::new(vec![n, n], v)? })
}

/// Fills the `deficient` columns with unit vectors orthogonal to all others.
fn complete_basis(cols: &mut [Vec<f64>], deficient: &[usize], m: usize) {
    let mut candidate = 0;
    for &d in deficient {
        loop {
            assert!(candidate < m, "cannot complete an orthonormal basis");
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (k, c) in cols.iter().enumerate() {
                    if k == d || (deficient.contains(&k) && c.iter().all(|&x| x == 0.0)) {
                        continue;
                    }
                    let proj = dot(&e, c);
                    for (ei, ci) in e.iter_mut().zip(c) {
                        *ei -= proj * ci;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 0.5 {
                cols[d] = e.iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

/// Number of singular values above `rel_tol * sigma_1`; zero for the zero matrix.
pub fn numeric_rank(m: &Tensor, rel_tol: f64) -> Result<usize> {
    let d = svd(m)?;
    let top = d.s.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return Ok(0);
    }
    Ok(d.s.iter().filter(|&&s| s > rel_tol * top).count())
}

/// Best rank-`k` approximation.
pub fn lowrank_truncate(m: &Tensor, k: usize) -> Result<Tensor> {
    Ok(svd(m)?.truncate(k))
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr(pred: &Tensor, target: &Tensor, peak: f64) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("psnr {:?} vs {:?}", pred.shape(), target.shape())));
    }
    let mse = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(psnr_from_mse(mse, peak))
}

/// PSNR in dB for a given MSE, capped like [`psnr`].
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
}
