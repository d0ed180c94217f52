// SPDX-License-Identifier: Apache-2.0

//! The trainable object: grids, expression, decoder and convexity mode.

use serde::{Deserialize, Serialize};

use crate::combiner::{GaExpr, GridSet, Program, Workspace};
use crate::decoders::{Decoder, DecoderKind};
use crate::error::{Error, Result};
use crate::grids::{BasisLabel, Coord, FeatureGrid, Interp};
use crate::numerics::{SeededRng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Nonconvex,
    Semiconvex,
    Convex,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Convex, Mode::Semiconvex, Mode::Nonconvex];

    /// Decoder each mode uses for the 3D tasks.
    pub fn default_decoder(self) -> DecoderKind {
        match self {
            Mode::Nonconvex => DecoderKind::Mlp,
            Mode::Semiconvex => DecoderKind::Gated,
            Mode::Convex => DecoderKind::Fused,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nonconvex" => Ok(Mode::Nonconvex),
            "semiconvex" => Ok(Mode::Semiconvex),
            "convex" => Ok(Mode::Convex),
            _ => Err(Error::Config(format!("unknown mode {s:?} (convex|semiconvex|nonconvex)"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Nonconvex => "nonconvex",
            Mode::Semiconvex => "semiconvex",
            Mode::Convex => "convex",
        })
    }
}

/// Everything needed to build a model from seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub dims: usize,
    pub expr: String,
    /// Feature dims for lines, planes and the volume.
    pub d: [usize; 3],
    /// Base resolutions for lines, planes and the volume.
    pub r: [usize; 3],
    /// Multiresolution factors applied to line and plane grids.
    pub scales: Vec<usize>,
    pub interp: Interp,
    pub mode: Mode,
    pub decoder: DecoderKind,
    pub hidden: usize,
    pub use_bias: bool,
    /// Allows products whose operands share axes.
    pub relax_mul: bool,
    /// Half-width of the uniform grid initializer.
    pub init_scale: f64,
}

impl ModelSpec {
    /// 3D spec with the mode's default decoder.
    pub fn volume(expr: &str, d: [usize; 3], r: [usize; 3], mode: Mode, hidden: usize) -> ModelSpec {
        ModelSpec {
            dims: 3,
            expr: expr.to_string(),
            d,
            r,
            scales: vec![1],
            interp: Interp::Multilinear,
            mode,
            decoder: mode.default_decoder(),
            hidden,
            use_bias: true,
            relax_mul: false,
            init_scale: 0.1,
        }
    }

    /// 2D spec with line grids of resolution `r1` and plane grids of `r2`.
    pub fn plane(expr: &str, k: usize, r1: usize, r2: usize, interp: Interp, decoder: DecoderKind, hidden: usize) -> ModelSpec {
        ModelSpec {
            dims: 2,
            expr: expr.to_string(),
            d: [k, k, 0],
            r: [r1, r2, 0],
            scales: vec![1],
            interp,
            mode: Mode::Nonconvex,
            decoder,
            hidden,
            use_bias: true,
            relax_mul: false,
            init_scale: 0.1,
        }
    }
}

/// Per-evaluation scratch. One per thread.
#[derive(Clone, Debug)]
pub struct Evaluator {
    ws: Workspace,
    gate_ws: Workspace,
    feat: Vec<f64>,
    gate: Vec<f64>,
    dfeat: Vec<f64>,
    cache: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub expr: GaExpr,
    pub grids: GridSet,
    pub decoder: Decoder,
    /// Frozen copy of the grids that supplies the fused model's gates.
    pub gate_grids: Option<GridSet>,
    program: Program,
}

impl Model {
    /// Builds a model with trainable parameters drawn from `init_seed` and
    /// frozen gates drawn from `gate_seed`.
    pub fn build(spec: &ModelSpec, init_seed: u64, gate_seed: u64) -> Result<Model> {
        let expr: GaExpr = spec.expr.parse()?;
        let mut rng = SeededRng::substream(init_seed, 0);
        let mut gate_rng = SeededRng::substream(gate_seed, 1);
        let (grids, gate_grids) = build_grids(spec, &expr, &mut rng, &mut gate_rng)?;
        Model::assemble(spec.clone(), expr, grids, gate_grids, &mut rng, &mut gate_rng)
    }

    /// Builds with every grid parameter set to zero (decoder still random).
    pub fn build_zero_grids(spec: &ModelSpec, init_seed: u64, gate_seed: u64) -> Result<Model> {
        let mut m = Model::build(spec, init_seed, gate_seed)?;
        for g in &mut m.grids.grids {
            g.params.fill(0.0);
        }
        Ok(m)
    }

    /// Assembles a model from explicit parts; used by constructive tests and
    /// checkpoint loading.
    pub fn from_parts(spec: ModelSpec, grids: GridSet, decoder: Decoder, gate_grids: Option<GridSet>) -> Result<Model> {
        let expr: GaExpr = spec.expr.parse()?;
        let program = Program::compile(&expr, &grids, spec.dims, spec.relax_mul)?;
        let m = Model { spec, expr, grids, decoder, gate_grids, program };
        m.validate()?;
        Ok(m)
    }

    fn assemble(
        spec: ModelSpec,
        expr: GaExpr,
        grids: GridSet,
        gate_grids: Option<GridSet>,
        rng: &mut SeededRng,
        gate_rng: &mut SeededRng,
    ) -> Result<Model> {
        let program = Program::compile(&expr, &grids, spec.dims, spec.relax_mul)?;
        let decoder = Decoder::random(spec.decoder, program.output_dim(), spec.hidden, rng, gate_rng)?;
        let m = Model { spec, expr, grids, decoder, gate_grids, program };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let kind = self.decoder.kind;
        match self.spec.mode {
            Mode::Convex | Mode::Semiconvex if self.expr.contains_mul() => {
                return Err(Error::Model(format!(
                    "{} mode cannot use products; {} multiplies features",
                    self.spec.mode, self.expr
                )))
            }
            Mode::Convex if kind != DecoderKind::Fused => {
                return Err(Error::Model(format!("convex mode needs the fused decoder, got {kind}")))
            }
            Mode::Semiconvex if kind != DecoderKind::Gated => {
                return Err(Error::Model(format!("semiconvex mode needs the gated decoder, got {kind}")))
            }
            Mode::Nonconvex if kind == DecoderKind::Fused => {
                return Err(Error::Model("the fused decoder belongs to convex mode".into()))
            }
            _ => {}
        }
        if self.decoder.input_dim != self.program.output_dim() {
            return Err(Error::Model(format!(
                "decoder takes {} features, expression yields {}",
                self.decoder.input_dim,
                self.program.output_dim()
            )));
        }
        match (&self.gate_grids, kind) {
            (Some(g), DecoderKind::Fused) if g.congruent(&self.grids) => Ok(()),
            (None, DecoderKind::Fused) | (Some(_), DecoderKind::Fused) => {
                Err(Error::Model("fused decoder needs gate grids congruent with the trainable grids".into()))
            }
            (Some(_), _) => Err(Error::Model("gate grids only apply to the fused decoder".into())),
            (None, _) => Ok(()),
        }
    }

    pub fn mode(&self) -> Mode {
        self.spec.mode
    }

    pub fn dims(&self) -> usize {
        self.spec.dims
    }

    pub fn feature_dim(&self) -> usize {
        self.program.output_dim()
    }

    pub fn evaluator(&self) -> Evaluator {
        let n = self.program.output_dim();
        Evaluator {
            ws: self.program.workspace(&self.grids),
            gate_ws: self.gate_grids.as_ref().map(|g| self.program.workspace(g)).unwrap_or_default(),
            feat: vec![0.0; n],
            gate: vec![0.0; if self.gate_grids.is_some() { n } else { 0 }],
            dfeat: vec![0.0; n],
            cache: vec![0.0; self.decoder.cache_len()],
        }
    }

    /// Unchecked prediction that leaves state in `ev` for [`Model::backward`].
    pub fn forward(&self, q: &Coord, ev: &mut Evaluator) -> f64 {
        let f = self.program.forward(&self.grids, q, &mut ev.ws);
        ev.feat.copy_from_slice(f);
        if let Some(g) = &self.gate_grids {
            let gf = self.program.forward(g, q, &mut ev.gate_ws);
            ev.gate.copy_from_slice(gf);
        }
        self.decoder.forward(&ev.feat, &ev.gate, &mut ev.cache)
    }

    /// Adds `upstream * d(prediction)/d(params)` to `grad`, laid out as
    /// [`Model::param_layout`]. The bias gets no gradient when disabled.
    pub fn backward(&self, ev: &mut Evaluator, upstream: f64, grad: &mut [f64]) {
        let split = self.grids.total_params();
        let (ggrad, dgrad) = grad.split_at_mut(split);
        ev.dfeat.fill(0.0);
        let bias_before = dgrad[dgrad.len() - 1];
        self.decoder.backward(&ev.feat, &ev.gate, &ev.cache, upstream, dgrad, Some(&mut ev.dfeat));
        if !self.spec.use_bias {
            let last = dgrad.len() - 1;
            dgrad[last] = bias_before;
        }
        let offsets = self.grids.offsets();
        self.program.backward(&self.grids, &mut ev.ws, &ev.dfeat, ggrad, &offsets);
    }

    pub fn predict(&self, q: &Coord) -> Result<f64> {
        if q.dims() != self.dims() {
            return Err(Error::Shape(format!("{}D model queried at a {}D point", self.dims(), q.dims())));
        }
        let mut ev = self.evaluator();
        Ok(self.forward(q, &mut ev))
    }

    /// Total trainable length: grid parameters then decoder parameters.
    pub fn num_trainable(&self) -> usize {
        self.grids.total_params() + self.decoder.num_params()
    }

    /// `(offset, len, is_decoder)` for each trainable block.
    pub fn param_layout(&self) -> Vec<(usize, usize, bool)> {
        let mut out = Vec::new();
        let mut off = 0;
        for g in &self.grids.grids {
            out.push((off, g.num_params(), false));
            off += g.num_params();
        }
        out.push((off, self.decoder.num_params(), true));
        out
    }

    pub fn trainable_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.grids.grids.iter_mut().map(|g| g.params.as_mut_slice()).collect();
        out.push(self.decoder.params.as_mut_slice());
        out
    }

    pub fn trainable_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_trainable());
        for g in &self.grids.grids {
            v.extend_from_slice(&g.params);
        }
        v.extend_from_slice(&self.decoder.params);
        v
    }

    pub fn set_trainable_vector(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.num_trainable() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.num_trainable(), v.len())));
        }
        let mut off = 0;
        for b in self.trainable_blocks_mut() {
            let n = b.len();
            b.copy_from_slice(&v[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Trainable parameter count; frozen gates are added when
    /// `include_frozen` is set. A disabled bias is not counted.
    pub fn param_count(&self, include_frozen: bool) -> usize {
        let mut n = self.num_trainable();
        if !self.spec.use_bias {
            n -= 1;
        }
        if include_frozen {
            n += self.decoder.frozen.len();
            n += self.gate_grids.as_ref().map_or(0, GridSet::total_params);
        }
        n
    }

    /// Explicit matrix implied by a 2D model: entry (k, l) is the prediction
    /// at `(k / (rows - 1), l / (cols - 1))`.
    pub fn assemble_matrix(&self, rows: usize, cols: usize) -> Result<Tensor> {
        if self.dims() != 2 {
            return Err(Error::Model("assemble_matrix needs a 2D model".into()));
        }
        if rows == 0 || cols == 0 {
            return Err(Error::Shape("output shape must be positive".into()));
        }
        let mut ev = self.evaluator();
        let mut data = Vec::with_capacity(rows * cols);
        for k in 0..rows {
            for l in 0..cols {
                let q = Coord::new(&[node_coord(k, rows), node_coord(l, cols)]);
                data.push(self.forward(&q, &mut ev));
            }
        }
        Tensor::new(vec![rows, cols], data)
    }
}

/// Normalized coordinate of index `i` among `n` node-aligned samples.
pub fn node_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        i as f64 / (n - 1) as f64
    }
}

fn build_grids(
    spec: &ModelSpec,
    expr: &GaExpr,
    rng: &mut SeededRng,
    gate_rng: &mut SeededRng,
) -> Result<(GridSet, Option<GridSet>)> {
    if !(2..=3).contains(&spec.dims) {
        return Err(Error::Config(format!("dims must be 2 or 3, got {}", spec.dims)));
    }
    if spec.scales.is_empty() || spec.scales.contains(&0) {
        return Err(Error::Config("scales must be a nonempty list of positive factors".into()));
    }
    let mut labels = expr.labels();
    labels.sort();
    labels.sort_by_key(|l| l.arity());
    let mut grids = Vec::new();
    let mut scales = Vec::new();
    for label in labels {
        let a = label.arity();
        if label.max_axis() > spec.dims {
            return Err(Error::Expr(format!("{label} is outside a {}D model", spec.dims)));
        }
        let (d, r) = (spec.d[a - 1], spec.r[a - 1]);
        if d == 0 || r == 0 {
            return Err(Error::Config(format!("{label} needs a positive feature dim and resolution")));
        }
        // The volume keeps a single resolution.
        let factors: &[usize] = if a == 3 { &[1] } else { &spec.scales };
        for &s in factors {
            grids.push(FeatureGrid::random(label, r * s, d, spec.interp, spec.init_scale, rng)?);
            scales.push(s);
        }
    }
    let set = GridSet::with_scales(grids, scales)?;
    let gates = if spec.decoder == DecoderKind::Fused {
        let mut g = set.clone();
        for grid in &mut g.grids {
            *grid = FeatureGrid::random(grid.label, grid.resolution[0], grid.feature_dim, spec.interp, spec.init_scale, gate_rng)?;
        }
        Some(g)
    } else {
        None
    };
    Ok((set, gates))
}

/// Grid of given label holding `rows` as node values (for constructive
/// assemblies): `values` is `r x d` for lines or `r1 x r2 x d` for planes.
pub fn grid_from_values(label: BasisLabel, resolution: Vec<usize>, feature_dim: usize, interp: Interp, values: Vec<f64>) -> Result<FeatureGrid> {
    let mut g = FeatureGrid::zeros(label, resolution, feature_dim, interp)?;
    if values.len() != g.params.len() {
        return Err(Error::Shape(format!("expected {} values, got {}", g.params.len(), values.len())));
    }
    g.params = values;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combiner::presets;
    use crate::decoders::decode_convex_fused;
    use crate::numerics::{numeric_rank, svd, DEFAULT_RANK_TOL};

    #[test]
    fn mode_rules() {
        let mut s = ModelSpec::volume(presets::MULT, [4, 4, 4], [4, 4, 3], Mode::Convex, 8);
        assert!(Model::build(&s, 1, 2).is_err());
        s.mode = Mode::Semiconvex;
        s.decoder = DecoderKind::Gated;
        assert!(Model::build(&s, 1, 2).is_err());
        s.mode = Mode::Nonconvex;
        s.decoder = DecoderKind::Mlp;
        assert!(Model::build(&s, 1, 2).is_ok());
        let mut c = ModelSpec::volume(presets::CONCAT, [4, 3, 2], [4, 4, 3], Mode::Convex, 8);
        assert!(Model::build(&c, 1, 2).is_ok());
        c.decoder = DecoderKind::Mlp;
        assert!(Model::build(&c, 1, 2).is_err());
    }

    #[test]
    fn param_count_arithmetic() {
        let mut s = ModelSpec::plane("concat(e1)", 4, 10, 2, Interp::Multilinear, DecoderKind::Linear, 0);
        s.expr = "concat(e1)".into();
        let m = Model::build(&s, 0, 0).unwrap();
        assert_eq!(m.param_count(false), 45);
        s.use_bias = false;
        assert_eq!(Model::build(&s, 0, 0).unwrap().param_count(false), 44);

        let m = Model::build(&ModelSpec::volume(presets::CONCAT, [36, 24, 8], [128, 32, 24], Mode::Nonconvex, 64), 0, 0).unwrap();
        assert_eq!(m.grids.total_params(), 3 * 128 * 36 + 3 * 32 * 32 * 24 + 24 * 24 * 24 * 8);
        let fused = Model::build(&ModelSpec::volume(presets::CONCAT, [2, 2, 2], [4, 4, 4], Mode::Convex, 0), 0, 0).unwrap();
        let g = fused.grids.total_params();
        assert_eq!(fused.param_count(false), g + 1);
        assert_eq!(fused.param_count(true), 2 * g + 1);
    }

    #[test]
    fn svd_grids_reproduce_matrix() {
        let mut rng = SeededRng::new(11);
        let (m, n) = (7, 5);
        let target = Tensor::new(vec![m, n], rng.normal_vec(m * n, 1.0)).unwrap();
        let s = svd(&target).unwrap();
        let k = 5;
        let mut g1 = Vec::new();
        for i in 0..m {
            for c in 0..k {
                g1.push(s.u.at(i, c) * s.s[c]);
            }
        }
        let mut g2 = Vec::new();
        for j in 0..n {
            for c in 0..k {
                g2.push(s.v.at(j, c));
            }
        }
        let grids = GridSet::new(vec![
            grid_from_values("e1".parse().unwrap(), vec![m], k, Interp::Nearest, g1).unwrap(),
            grid_from_values("e2".parse().unwrap(), vec![n], k, Interp::Nearest, g2).unwrap(),
        ])
        .unwrap();
        let mut dec = Decoder::zeros(DecoderKind::Linear, k, 0).unwrap();
        dec.params[..k].fill(1.0);
        let spec = ModelSpec::plane("mul(e1,e2)", k, m, 2, Interp::Nearest, DecoderKind::Linear, 0);
        let model = Model::from_parts(spec, grids, dec, None).unwrap();
        let mh = model.assemble_matrix(m, n).unwrap();
        assert!(mh.sub(&target).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn additive_linear_rank_at_most_two() {
        for seed in 0..5 {
            let mut spec = ModelSpec::plane("add(e1,e2)", 3, 8, 2, Interp::Nearest, DecoderKind::Linear, 0);
            spec.init_scale = 1.0;
            let m = Model::build(&spec, seed, 0).unwrap();
            let mh = m.assemble_matrix(24, 24).unwrap();
            assert!(numeric_rank(&mh, DEFAULT_RANK_TOL).unwrap() <= 2);
        }
    }

    #[test]
    fn fused_prediction_matches_standalone() {
        let spec = ModelSpec::volume(presets::CONCAT, [3, 2, 2], [5, 4, 3], Mode::Convex, 0);
        let mut m = Model::build(&spec, 3, 4).unwrap();
        m.decoder.set_bias(0.0);
        let q = Coord::new(&[0.2, 0.55, 0.9]);
        let want = decode_convex_fused(&m.expr, &m.grids, m.gate_grids.as_ref().unwrap(), &q).unwrap();
        assert!((m.predict(&q).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn fused_model_is_linear_in_trainables() {
        let spec = ModelSpec::volume(presets::TRIPLANE_ADD, [3, 3, 2], [4, 5, 3], Mode::Convex, 0);
        let a = Model::build(&spec, 1, 9).unwrap();
        let b = Model::build(&spec, 2, 9).unwrap();
        let (va, vb) = (a.trainable_vector(), b.trainable_vector());
        let lam = 0.3;
        let mut c = a.clone();
        let vc: Vec<f64> = va.iter().zip(&vb).map(|(x, y)| lam * x + (1.0 - lam) * y).collect();
        c.set_trainable_vector(&vc).unwrap();
        let q = Coord::new(&[0.1, 0.7, 0.35]);
        let lhs = c.predict(&q).unwrap();
        let rhs = lam * a.predict(&q).unwrap() + (1.0 - lam) * b.predict(&q).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
