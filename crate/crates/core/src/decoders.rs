// SPDX-License-Identifier: Apache-2.0

//! Decoders mapping a combined grid feature to a scalar.
//!
//! Every decoder keeps its trainable weights in one flat vector (bias last)
//! so the optimizer can treat grids and decoder uniformly. Frozen gate
//! weights live in a separate vector that no update ever touches.

use serde::{Deserialize, Serialize};

use crate::combiner::{GaExpr, GridSet, Program};
use crate::error::{Error, Result};
use crate::grids::Coord;
use crate::numerics::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Linear,
    Mlp,
    Gated,
    /// Gate pattern comes from frozen copies of the grids; the decoder itself
    /// only holds the bias.
    Fused,
}

impl std::str::FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(DecoderKind::Linear),
            "mlp" => Ok(DecoderKind::Mlp),
            "gated" => Ok(DecoderKind::Gated),
            "fused" | "convex" => Ok(DecoderKind::Fused),
            _ => Err(Error::Config(format!("unknown decoder {s:?} (linear|mlp|gated|fused)"))),
        }
    }
}

impl std::fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecoderKind::Linear => "linear",
            DecoderKind::Mlp => "mlp",
            DecoderKind::Gated => "gated",
            DecoderKind::Fused => "fused",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub kind: DecoderKind,
    pub input_dim: usize,
    pub hidden: usize,
    /// Linear: `[alpha; bias]`. Mlp: `[W (h x in); alpha (h); bias]`.
    /// Gated: `[W (h x in); bias]`. Fused: `[bias]`.
    pub params: Vec<f64>,
    /// Gated only: the frozen gate weights, `h x in`.
    pub frozen: Vec<f64>,
}

impl Decoder {
    pub fn zeros(kind: DecoderKind, input_dim: usize, hidden: usize) -> Result<Decoder> {
        if input_dim == 0 {
            return Err(Error::Model("decoder input_dim must be positive".into()));
        }
        let hidden = match kind {
            DecoderKind::Mlp | DecoderKind::Gated if hidden == 0 => {
                return Err(Error::Model(format!("{kind} decoder needs hidden >= 1")))
            }
            DecoderKind::Mlp | DecoderKind::Gated => hidden,
            _ => 0,
        };
        let n = match kind {
            DecoderKind::Linear => input_dim + 1,
            DecoderKind::Mlp => hidden * input_dim + hidden + 1,
            DecoderKind::Gated => hidden * input_dim + 1,
            DecoderKind::Fused => 1,
        };
        let frozen = if kind == DecoderKind::Gated { vec![0.0; hidden * input_dim] } else { Vec::new() };
        Ok(Decoder { kind, input_dim, hidden, params: vec![0.0; n], frozen })
    }

    /// Hidden weights ~ N(0, sqrt(2/in)), output weights ~ N(0, sqrt(1/h)),
    /// linear weights ~ N(0, sqrt(1/in)), bias 0. Gated decoders draw the
    /// frozen gates from the hidden-weight initializer on `gate_rng`.
    pub fn random(
        kind: DecoderKind,
        input_dim: usize,
        hidden: usize,
        rng: &mut SeededRng,
        gate_rng: &mut SeededRng,
    ) -> Result<Decoder> {
        let mut d = Decoder::zeros(kind, input_dim, hidden)?;
        let w_std = (2.0 / input_dim as f64).sqrt();
        let hw = d.hidden * input_dim;
        match kind {
            DecoderKind::Linear => {
                let a = rng.normal_vec(input_dim, (1.0 / input_dim as f64).sqrt());
                d.params[..input_dim].copy_from_slice(&a);
            }
            DecoderKind::Mlp => {
                d.params[..hw].copy_from_slice(&rng.normal_vec(hw, w_std));
                let a = rng.normal_vec(d.hidden, (1.0 / d.hidden as f64).sqrt());
                d.params[hw..hw + d.hidden].copy_from_slice(&a);
            }
            DecoderKind::Gated => {
                d.params[..hw].copy_from_slice(&rng.normal_vec(hw, w_std));
                d.frozen = gate_rng.normal_vec(hw, w_std);
            }
            DecoderKind::Fused => {}
        }
        Ok(d)
    }

    pub fn bias(&self) -> f64 {
        *self.params.last().expect("decoders always carry a bias")
    }

    pub fn set_bias(&mut self, b: f64) {
        *self.params.last_mut().expect("decoders always carry a bias") = b;
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Scratch length needed by [`Decoder::forward`].
    pub fn cache_len(&self) -> usize {
        match self.kind {
            DecoderKind::Mlp | DecoderKind::Gated => self.hidden,
            _ => 0,
        }
    }

    fn check(&self, f: &[f64], gate: Option<&[f64]>) -> Result<()> {
        if f.len() != self.input_dim {
            return Err(Error::Shape(format!("{} decoder expects {} features, got {}", self.kind, self.input_dim, f.len())));
        }
        if self.kind == DecoderKind::Fused && gate.map(<[f64]>::len) != Some(self.input_dim) {
            return Err(Error::Shape("fused decoder needs gate features of the same length".into()));
        }
        Ok(())
    }

    /// Checked single evaluation. `gate` is the frozen-grid feature for the
    /// fused decoder and ignored otherwise.
    pub fn decode(&self, f: &[f64], gate: Option<&[f64]>) -> Result<f64> {
        self.check(f, gate)?;
        let mut cache = vec![0.0; self.cache_len()];
        Ok(self.forward(f, gate.unwrap_or(&[]), &mut cache))
    }

    /// Unchecked evaluation for the training loop. `cache` must hold
    /// [`Decoder::cache_len`] entries and is read back by `backward`.
    pub fn forward(&self, f: &[f64], gate: &[f64], cache: &mut [f64]) -> f64 {
        let n = self.input_dim;
        let p = &self.params;
        match self.kind {
            DecoderKind::Linear => dot(&p[..n], f) + self.bias(),
            DecoderKind::Mlp => {
                let h = self.hidden;
                let alpha = &p[h * n..h * n + h];
                let mut out = self.bias();
                for i in 0..h {
                    let z = dot(&p[i * n..(i + 1) * n], f);
                    cache[i] = z;
                    if z > 0.0 {
                        out += alpha[i] * z;
                    }
                }
                out
            }
            DecoderKind::Gated => {
                let mut out = self.bias();
                for i in 0..self.hidden {
                    let open = dot(&self.frozen[i * n..(i + 1) * n], f) >= 0.0;
                    cache[i] = if open { 1.0 } else { 0.0 };
                    if open {
                        out += dot(&p[i * n..(i + 1) * n], f);
                    }
                }
                out
            }
            DecoderKind::Fused => {
                let mut out = self.bias();
                for (v, g) in f.iter().zip(gate) {
                    if *g >= 0.0 {
                        out += v;
                    }
                }
                out
            }
        }
    }

    /// Accumulates `upstream * d(out)/d(params)` into `dparams` and, when
    /// given, `upstream * d(out)/d(f)` into `dinput`. Uses the cache filled by
    /// the matching `forward` call.
    pub fn backward(
        &self,
        f: &[f64],
        gate: &[f64],
        cache: &[f64],
        upstream: f64,
        dparams: &mut [f64],
        dinput: Option<&mut [f64]>,
    ) {
        let n = self.input_dim;
        let p = &self.params;
        let last = dparams.len() - 1;
        dparams[last] += upstream;
        match self.kind {
            DecoderKind::Linear => {
                axpy(upstream, f, &mut dparams[..n]);
                if let Some(di) = dinput {
                    axpy(upstream, &p[..n], di);
                }
            }
            DecoderKind::Mlp => {
                let h = self.hidden;
                let mut di = dinput;
                for i in 0..h {
                    let z = cache[i];
                    if z > 0.0 {
                        dparams[h * n + i] += upstream * z;
                        let g = upstream * p[h * n + i];
                        axpy(g, f, &mut dparams[i * n..(i + 1) * n]);
                        if let Some(d) = di.as_deref_mut() {
                            axpy(g, &p[i * n..(i + 1) * n], d);
                        }
                    }
                }
            }
            DecoderKind::Gated => {
                let mut di = dinput;
                for i in 0..self.hidden {
                    if cache[i] != 0.0 {
                        axpy(upstream, f, &mut dparams[i * n..(i + 1) * n]);
                        if let Some(d) = di.as_deref_mut() {
                            axpy(upstream, &p[i * n..(i + 1) * n], d);
                        }
                    }
                }
            }
            DecoderKind::Fused => {
                if let Some(di) = dinput {
                    for (d, g) in di.iter_mut().zip(gate) {
                        if *g >= 0.0 {
                            *d += upstream;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(s: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

/// `alpha^T f + bias`.
pub fn decode_linear(alpha: &[f64], bias: f64, f: &[f64]) -> Result<f64> {
    if alpha.len() != f.len() {
        return Err(Error::Shape(format!("alpha has {} entries, feature {}", alpha.len(), f.len())));
    }
    Ok(dot(alpha, f) + bias)
}

/// `alpha^T relu(W f)` with `w` row-major `h x in`.
pub fn decode_mlp(w: &[f64], alpha: &[f64], f: &[f64]) -> Result<f64> {
    let h = alpha.len();
    if h == 0 || w.len() != h * f.len() {
        return Err(Error::Shape(format!("W has {} entries, expected {h} x {}", w.len(), f.len())));
    }
    Ok((0..h).map(|i| alpha[i] * dot(&w[i * f.len()..(i + 1) * f.len()], f).max(0.0)).sum())
}

/// `sum_i (W_i f) 1[Wbar_i f >= 0]`.
pub fn decode_gated(w: &[f64], w_frozen: &[f64], f: &[f64]) -> Result<f64> {
    let n = f.len();
    if n == 0 || w.len() != w_frozen.len() || w.len() % n != 0 {
        return Err(Error::Shape("gated weights must both be h x in".into()));
    }
    Ok((0..w.len() / n)
        .filter(|&i| dot(&w_frozen[i * n..(i + 1) * n], f) >= 0.0)
        .map(|i| dot(&w[i * n..(i + 1) * n], f))
        .sum())
}

/// `1^T (f(q; theta) o 1[f(q; theta_bar) >= 0])` for an expression without
/// products. For a concatenation this is the sum over basis elements of
/// each element's gated channel sum.
pub fn decode_convex_fused(expr: &GaExpr, trainable: &GridSet, gates: &GridSet, q: &Coord) -> Result<f64> {
    if expr.contains_mul() {
        return Err(Error::Model("the fused model cannot contain products".into()));
    }
    if !trainable.congruent(gates) {
        return Err(Error::Model("gate grids must match the trainable grids in shape".into()));
    }
    let prog = Program::compile(expr, trainable, q.dims(), false)?;
    let mut ws = prog.workspace(trainable);
    let f = prog.forward(trainable, q, &mut ws).to_vec();
    let g = prog.forward(gates, q, &mut ws);
    Ok(f.iter().zip(g).filter(|(_, g)| **g >= 0.0).map(|(v, _)| v).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_dec(kind: DecoderKind, n: usize, h: usize, seed: u64) -> Decoder {
        let mut r = SeededRng::new(seed);
        let mut g = SeededRng::substream(seed, 1);
        let mut d = Decoder::random(kind, n, h, &mut r, &mut g).unwrap();
        d.set_bias(r.normal(0.0, 1.0));
        d
    }

    #[test]
    fn linear_cases() {
        let f = [0.3, -1.2, 2.0];
        assert_eq!(decode_linear(&[0.0; 3], 0.0, &f).unwrap(), 0.0);
        assert_eq!(decode_linear(&[0.0, 1.0, 0.0], 0.0, &f).unwrap(), -1.2);
        assert!(decode_linear(&[1.0; 2], 0.0, &f).is_err());
        let d = rand_dec(DecoderKind::Linear, 3, 0, 1);
        let mut want = d.params[3];
        for i in 0..3 {
            want += d.params[i] * f[i];
        }
        assert!((d.decode(&f, None).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn mlp_cases() {
        let eye = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(decode_mlp(&eye, &[1.0, 1.0], &[0.5, 2.0]).unwrap(), 2.5);
        assert_eq!(decode_mlp(&eye, &[1.0, 1.0], &[-0.5, -2.0]).unwrap(), 0.0);
        let d = rand_dec(DecoderKind::Mlp, 5, 7, 2);
        let f = SeededRng::new(9).normal_vec(5, 1.0);
        let mut want = d.bias();
        for i in 0..7 {
            let mut z = 0.0;
            for j in 0..5 {
                z += d.params[i * 5 + j] * f[j];
            }
            if z > 0.0 {
                want += d.params[35 + i] * z;
            }
        }
        assert!((d.decode(&f, None).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn gated_cases() {
        let w = [1.0, 2.0, -1.0, 0.5];
        let f = [0.25, 1.0];
        let open = decode_gated(&w, &[1.0; 4], &f).unwrap();
        assert!((open - (2.25 + -0.25 + 0.5)).abs() < 1e-15);
        assert_eq!(decode_gated(&w, &[-1.0; 4], &f).unwrap(), 0.0);
        // A gate exactly on its boundary is open.
        assert_eq!(decode_gated(&[3.0], &[0.0], &[1.0]).unwrap(), 3.0);

        let d = rand_dec(DecoderKind::Gated, 6, 5, 3);
        let f = SeededRng::new(10).normal_vec(6, 1.0);
        let mut want = d.bias();
        for i in 0..5 {
            let g: f64 = (0..6).map(|j| d.frozen[i * 6 + j] * f[j]).sum();
            if g >= 0.0 {
                want += (0..6).map(|j| d.params[i * 6 + j] * f[j]).sum::<f64>();
            }
        }
        assert!((d.decode(&f, None).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn gated_with_shared_weights_is_relu_mlp() {
        let mut rng = SeededRng::new(4);
        let (n, h) = (4, 6);
        let w = rng.normal_vec(h * n, 1.0);
        let f = rng.normal_vec(n, 1.0);
        // With alpha = 1 the two-layer net is sum_i relu(W_i f).
        let mlp = decode_mlp(&w, &vec![1.0; h], &f).unwrap();
        let gated = decode_gated(&w, &w, &f).unwrap();
        assert!((mlp - gated).abs() < 1e-12);
    }

    #[test]
    fn gradients_follow_the_rules() {
        let f = [0.5, -1.0, 2.0];
        let lin = rand_dec(DecoderKind::Linear, 3, 0, 5);
        let mut dp = vec![0.0; 4];
        lin.backward(&f, &[], &[], 2.0, &mut dp, None);
        assert_eq!(dp, vec![1.0, -2.0, 4.0, 2.0]);

        let gated = rand_dec(DecoderKind::Gated, 3, 4, 6);
        let mut cache = vec![0.0; 4];
        gated.forward(&f, &[], &mut cache);
        let mut dp = vec![0.0; gated.num_params()];
        gated.backward(&f, &[], &cache, 1.5, &mut dp, None);
        for i in 0..4 {
            let open = (0..3).map(|j| gated.frozen[i * 3 + j] * f[j]).sum::<f64>() >= 0.0;
            for j in 0..3 {
                assert_eq!(dp[i * 3 + j], if open { 1.5 * f[j] } else { 0.0 });
            }
        }
    }

    fn fd_decoder(kind: DecoderKind, seed: u64) {
        let (n, h) = (5, 6);
        let mut d = rand_dec(kind, n, h, seed);
        let mut rng = SeededRng::new(seed + 100);
        let f = rng.normal_vec(n, 1.0);
        let gate = rng.normal_vec(n, 1.0);
        let up = rng.normal(0.0, 1.0);
        let mut cache = vec![0.0; d.cache_len()];
        d.forward(&f, &gate, &mut cache);
        if kind == DecoderKind::Mlp && cache.iter().any(|z| z.abs() < 1e-4) {
            return;
        }
        let mut dp = vec![0.0; d.num_params()];
        let mut di = vec![0.0; n];
        d.backward(&f, &gate, &cache, up, &mut dp, Some(&mut di));
        let h_ = 1e-6;
        let mut c2 = vec![0.0; d.cache_len()];
        for i in 0..d.num_params() {
            let o = d.params[i];
            d.params[i] = o + h_;
            let p = d.forward(&f, &gate, &mut c2);
            d.params[i] = o - h_;
            let m = d.forward(&f, &gate, &mut c2);
            d.params[i] = o;
            let fd = up * (p - m) / (2.0 * h_);
            assert!((fd - dp[i]).abs() <= 1e-5 * fd.abs().max(dp[i].abs()) + 1e-9, "{kind} param {i}");
        }
        for j in 0..n {
            let mut fp = f.clone();
            fp[j] += h_;
            let p = d.forward(&fp, &gate, &mut c2);
            fp[j] -= 2.0 * h_;
            let m = d.forward(&fp, &gate, &mut c2);
            let fd = up * (p - m) / (2.0 * h_);
            assert!((fd - di[j]).abs() <= 1e-5 * fd.abs().max(di[j].abs()) + 1e-9, "{kind} input {j}");
        }
    }

    #[test]
    fn decoder_gradients_match_fd() {
        for seed in 0..20 {
            for kind in [DecoderKind::Linear, DecoderKind::Mlp, DecoderKind::Gated, DecoderKind::Fused] {
                fd_decoder(kind, seed);
            }
        }
    }
}
