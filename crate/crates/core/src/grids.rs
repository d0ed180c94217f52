// SPDX-License-Identifier: Apache-2.0

//! Feature grids attached to geometric-algebra basis elements and the
//! interpolation that reads features at continuous coordinates.
//!
//! Coordinates are normalized to `[0, 1]` and mapped to index space as
//! `x * (r - 1)`, so node `j` sits exactly at `j / (r - 1)`. Queries outside
//! the unit range are clamped.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

/// Nonempty sorted subset of the axes `{1, 2, 3}`: `e1`, `e12`, `e123`, ...
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BasisLabel(u8);

impl BasisLabel {
    pub fn new(axes: &[usize]) -> Result<Self> {
        let mut mask = 0u8;
        for &a in axes {
            if !(1..=3).contains(&a) {
                return Err(Error::Expr(format!("axis {a} outside 1..=3")));
            }
            mask |= 1 << (a - 1);
        }
        if mask == 0 {
            return Err(Error::Expr("empty basis label".into()));
        }
        Ok(BasisLabel(mask))
    }

    pub fn from_mask(mask: u8) -> Option<Self> {
        (mask != 0 && mask < 8).then_some(BasisLabel(mask))
    }

    pub fn mask(self) -> u8 {
        self.0
    }

    /// Zero-based axis indices in ascending order.
    pub fn axes(self) -> impl Iterator<Item = usize> {
        (0..3).filter(move |a| self.0 & (1 << a) != 0)
    }

    pub fn arity(self) -> usize {
        self.0.count_ones() as usize
    }

    /// Largest (one-based) axis this label touches.
    pub fn max_axis(self) -> usize {
        8 - self.0.leading_zeros() as usize
    }

    /// All labels spanning exactly `arity` axes among the first `dims`.
    pub fn all_of_arity(dims: usize, arity: usize) -> Vec<BasisLabel> {
        (1u8..(1 << dims)).filter(|m| m.count_ones() as usize == arity).map(BasisLabel).collect()
    }
}

impl fmt::Display for BasisLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e")?;
        for a in self.axes() {
            write!(f, "{}", a + 1)?;
        }
        Ok(())
    }
}

impl FromStr for BasisLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let digits = s
            .strip_prefix('e')
            .ok_or_else(|| Error::Expr(format!("basis label must start with 'e': {s:?}")))?;
        if digits.is_empty() {
            return Err(Error::Expr(format!("empty basis label {s:?}")));
        }
        let mut axes = Vec::new();
        for ch in digits.chars() {
            let a = ch.to_digit(10).ok_or_else(|| Error::Expr(format!("bad basis label {s:?}")))? as usize;
            if axes.last().is_some_and(|&p| p >= a) {
                return Err(Error::Expr(format!("basis axes must be strictly increasing: {s:?}")));
            }
            axes.push(a);
        }
        BasisLabel::new(&axes)
    }
}

impl Serialize for BasisLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for BasisLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    Nearest,
    Multilinear,
}

impl FromStr for Interp {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Interp::Nearest),
            "multilinear" | "linear" | "bilinear" | "trilinear" => Ok(Interp::Multilinear),
            _ => Err(Error::Config(format!("unknown interpolation {s:?} (nearest|multilinear)"))),
        }
    }
}

/// Normalized query point in `[0,1]^D`, `D` in `{2, 3}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coord {
    q: [f64; 3],
    dims: usize,
}

impl Coord {
    /// Clamps each component into `[0, 1]`; the flag reports whether any was moved.
    pub fn clamped(values: &[f64]) -> (Coord, bool) {
        assert!((1..=3).contains(&values.len()), "coordinates have 1 to 3 components");
        let mut q = [0.0; 3];
        let mut moved = false;
        for (dst, &v) in q.iter_mut().zip(values) {
            let c = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            moved |= c != v;
            *dst = c;
        }
        (Coord { q, dims: values.len() }, moved)
    }

    pub fn new(values: &[f64]) -> Coord {
        Coord::clamped(values).0
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn get(&self, axis: usize) -> f64 {
        self.q[axis]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.q[..self.dims]
    }

    /// Components padded with zeros to three axes.
    pub fn q3(&self) -> [f64; 3] {
        self.q
    }
}

/// Selects the components of `q` named by `label`, in axis order.
pub fn project(q: &Coord, label: BasisLabel) -> Vec<f64> {
    label.axes().map(|a| q.get(a)).collect()
}

/// Up to `2^3` contributing nodes (flat node indices) with their weights.
#[derive(Clone, Copy, Debug, Default)]
pub struct Stencil {
    pub nodes: [usize; 8],
    pub weights: [f64; 8],
    pub len: usize,
}

/// Parameter grid for one basis element.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub label: BasisLabel,
    /// Extent per spanned axis, in axis order.
    pub resolution: Vec<usize>,
    pub feature_dim: usize,
    pub interp: Interp,
    /// Node-major, feature-minor: `params[node * feature_dim + c]`.
    pub params: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(label: BasisLabel, resolution: Vec<usize>, feature_dim: usize, interp: Interp) -> Result<Self> {
        if resolution.len() != label.arity() {
            return Err(Error::Model(format!(
                "{label} spans {} axes but got resolution {resolution:?}",
                label.arity()
            )));
        }
        if feature_dim == 0 || resolution.iter().any(|&r| r == 0) {
            return Err(Error::Model(format!("{label}: empty grid {resolution:?}x{feature_dim}")));
        }
        if interp == Interp::Multilinear && resolution.iter().any(|&r| r < 2) {
            return Err(Error::Model(format!("{label}: multilinear needs resolution >= 2")));
        }
        let nodes: usize = resolution.iter().product();
        Ok(FeatureGrid { label, resolution, feature_dim, interp, params: vec![0.0; nodes * feature_dim] })
    }

    /// Isotropic grid with entries drawn from `Uniform(-scale, scale)`.
    pub fn random(
        label: BasisLabel,
        res: usize,
        feature_dim: usize,
        interp: Interp,
        scale: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mut g = FeatureGrid::zeros(label, vec![res; label.arity()], feature_dim, interp)?;
        for p in g.params.iter_mut() {
            *p = rng.uniform(-scale, scale);
        }
        Ok(g)
    }

    pub fn num_nodes(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Largest per-axis resolution, used to order multiresolution copies.
    pub fn max_resolution(&self) -> usize {
        self.resolution.iter().copied().max().unwrap_or(0)
    }

    pub fn node_values(&self, node: usize) -> &[f64] {
        &self.params[node * self.feature_dim..(node + 1) * self.feature_dim]
    }

    /// Nodes and weights that interpolate at the (already projected) point `p`.
    pub fn stencil(&self, p: &[f64]) -> Stencil {
        debug_assert_eq!(p.len(), self.resolution.len());
        let mut st = Stencil { len: 1, ..Default::default() };
        st.weights[0] = 1.0;
        // Row-major strides: the first spanned axis is slowest.
        let mut stride = self.num_nodes();
        for (&x, &r) in p.iter().zip(&self.resolution) {
            stride /= r;
            let t = x.clamp(0.0, 1.0) * (r - 1) as f64;
            match self.interp {
                Interp::Nearest => {
                    // floor(t + 0.5): ties go to the larger index.
                    let i = ((t + 0.5).floor() as usize).min(r - 1);
                    for k in 0..st.len {
                        st.nodes[k] += i * stride;
                    }
                }
                Interp::Multilinear => {
                    let i0 = (t.floor() as usize).min(r - 2);
                    let f = t - i0 as f64;
                    let n = st.len;
                    for k in 0..n {
                        st.nodes[k + n] = st.nodes[k] + (i0 + 1) * stride;
                        st.weights[k + n] = st.weights[k] * f;
                        st.nodes[k] += i0 * stride;
                        st.weights[k] *= 1.0 - f;
                    }
                    st.len = 2 * n;
                }
            }
        }
        st
    }

    /// Feature vector at `p`, written into `out` (length `feature_dim`).
    pub fn interpolate_into(&self, p: &[f64], out: &mut [f64]) {
        let st = self.stencil(p);
        self.gather(&st, out);
    }

    pub fn interpolate(&self, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.feature_dim];
        self.interpolate_into(p, &mut out);
        out
    }

    #[inline]
    pub fn gather(&self, st: &Stencil, out: &mut [f64]) {
        let d = self.feature_dim;
        out.fill(0.0);
        for k in 0..st.len {
            let w = st.weights[k];
            if w == 0.0 {
                continue;
            }
            let node = &self.params[st.nodes[k] * d..(st.nodes[k] + 1) * d];
            for (o, &v) in out.iter_mut().zip(node) {
                *o += w * v;
            }
        }
    }

    /// Adjoint of interpolation: adds `weight * upstream` into the gradient
    /// of every contributing node. `grad` has the layout of `params`.
    #[inline]
    pub fn scatter(st: &Stencil, feature_dim: usize, upstream: &[f64], grad: &mut [f64]) {
        for k in 0..st.len {
            let w = st.weights[k];
            if w == 0.0 {
                continue;
            }
            let node = &mut grad[st.nodes[k] * feature_dim..(st.nodes[k] + 1) * feature_dim];
            for (g, &u) in node.iter_mut().zip(upstream) {
                *g += w * u;
            }
        }
    }

    /// Gradient of `<upstream, interpolate(p)>` with respect to `params`,
    /// accumulated into `grad`.
    pub fn interpolate_grad(&self, p: &[f64], upstream: &[f64], grad: &mut [f64]) {
        let st = self.stencil(p);
        FeatureGrid::scatter(&st, self.feature_dim, upstream, grad);
    }
}
