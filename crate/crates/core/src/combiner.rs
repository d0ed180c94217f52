// SPDX-License-Identifier: Apache-2.0

//! Expression trees that merge interpolated grid features by elementwise
//! product, sum and concatenation.
//!
//! Expressions use a prefix notation, for example
//! `concat(mul(e1,e2,e3),mul(e1,e23),mul(e2,e13),mul(e3,e12),e123)`.
//! A leaf names a basis element; when the grid set holds several
//! resolutions of that element, their features are concatenated in
//! ascending resolution order.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grids::{BasisLabel, Coord, FeatureGrid, Stencil};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GaExpr {
    Leaf(BasisLabel),
    Mul(Vec<GaExpr>),
    Add(Vec<GaExpr>),
    Concat(Vec<GaExpr>),
}

impl GaExpr {
    pub fn leaf(s: &str) -> GaExpr {
        GaExpr::Leaf(s.parse().expect("valid basis label"))
    }

    pub fn contains_mul(&self) -> bool {
        match self {
            GaExpr::Leaf(_) => false,
            GaExpr::Mul(_) => true,
            GaExpr::Add(c) | GaExpr::Concat(c) => c.iter().any(GaExpr::contains_mul),
        }
    }

    /// Union of the axes spanned by every leaf, as a bit mask.
    pub fn span(&self) -> u8 {
        match self {
            GaExpr::Leaf(l) => l.mask(),
            GaExpr::Mul(c) | GaExpr::Add(c) | GaExpr::Concat(c) => c.iter().fold(0, |m, e| m | e.span()),
        }
    }

    /// Distinct labels referenced, in first-appearance order.
    pub fn labels(&self) -> Vec<BasisLabel> {
        let mut out = Vec::new();
        self.collect_labels(&mut out);
        out
    }

    fn collect_labels(&self, out: &mut Vec<BasisLabel>) {
        match self {
            GaExpr::Leaf(l) => {
                if !out.contains(l) {
                    out.push(*l);
                }
            }
            GaExpr::Mul(c) | GaExpr::Add(c) | GaExpr::Concat(c) => c.iter().for_each(|e| e.collect_labels(out)),
        }
    }
}

impl fmt::Display for GaExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (name, children) = match self {
            GaExpr::Leaf(l) => return write!(f, "{l}"),
            GaExpr::Mul(c) => ("mul", c),
            GaExpr::Add(c) => ("add", c),
            GaExpr::Concat(c) => ("concat", c),
        };
        write!(f, "{name}(")?;
        for (i, c) in children.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

impl FromStr for GaExpr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let mut parser = Parser { src: compact.as_bytes(), pos: 0 };
        let e = parser.expr()?;
        if parser.pos != parser.src.len() {
            return Err(Error::Expr(format!("trailing input at byte {} in {s:?}", parser.pos)));
        }
        Ok(e)
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn ident(&mut self) -> String {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        String::from_utf8_lossy(&self.src[start..self.pos]).into_owned()
    }

    fn expr(&mut self) -> Result<GaExpr> {
        let name = self.ident();
        if name.is_empty() {
            return Err(Error::Expr(format!("expected a name at byte {}", self.pos)));
        }
        if self.src.get(self.pos) != Some(&b'(') {
            return Ok(GaExpr::Leaf(name.parse()?));
        }
        self.pos += 1;
        let mut children = vec![self.expr()?];
        loop {
            match self.src.get(self.pos) {
                Some(b',') => {
                    self.pos += 1;
                    children.push(self.expr()?);
                }
                Some(b')') => {
                    self.pos += 1;
                    break;
                }
                _ => return Err(Error::Expr(format!("expected ',' or ')' at byte {}", self.pos))),
            }
        }
        match name.as_str() {
            "mul" => Ok(GaExpr::Mul(children)),
            "add" => Ok(GaExpr::Add(children)),
            "concat" => Ok(GaExpr::Concat(children)),
            _ => Err(Error::Expr(format!("unknown operator {name:?} (mul|add|concat)"))),
        }
    }
}

/// Named expressions used by the experiments.
pub mod presets {
    /// Concatenation of every basis element.
    pub const CONCAT: &str = "concat(e1,e2,e3,e12,e13,e23,e123)";
    /// Products of disjoint elements up to the trivector, plus the volume.
    pub const MULT: &str = "concat(mul(e1,e2,e3),mul(e1,e23),mul(e2,e13),mul(e3,e12),e123)";
    pub const TRIPLANE_ADD: &str = "add(e12,e13,e23)";
    /// Shares axes across factors, so it needs the relaxed product rule.
    pub const TRIPLANE_MUL: &str = "mul(e12,e13,e23)";

    pub fn lookup(name: &str) -> Option<&'static str> {
        match name.to_ascii_lowercase().as_str() {
            "concat" | "gaplanes" | "gaplanes_concat" => Some(CONCAT),
            "mult" | "gaplanes_mult" => Some(MULT),
            "triplane_add" => Some(TRIPLANE_ADD),
            "triplane_mul" => Some(TRIPLANE_MUL),
            _ => None,
        }
    }
}

/// The feature grids of a model. Several grids may share a label when they
/// are multiresolution copies.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSet {
    pub grids: Vec<FeatureGrid>,
    /// Multiresolution factor for each grid (1 for single-resolution models).
    pub scales: Vec<usize>,
}

impl GridSet {
    pub fn new(grids: Vec<FeatureGrid>) -> Result<Self> {
        let scales = vec![1; grids.len()];
        GridSet::with_scales(grids, scales)
    }

    pub fn with_scales(grids: Vec<FeatureGrid>, scales: Vec<usize>) -> Result<Self> {
        if grids.len() != scales.len() {
            return Err(Error::Model("one scale per grid".into()));
        }
        for (i, a) in grids.iter().enumerate() {
            for b in &grids[i + 1..] {
                if a.label == b.label {
                    if a.feature_dim != b.feature_dim {
                        return Err(Error::Model(format!("copies of {} differ in feature_dim", a.label)));
                    }
                    if a.resolution == b.resolution {
                        return Err(Error::Model(format!("duplicate {} grid at {:?}", a.label, a.resolution)));
                    }
                }
            }
        }
        Ok(GridSet { grids, scales })
    }

    pub fn empty() -> Self {
        GridSet { grids: Vec::new(), scales: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    pub fn total_params(&self) -> usize {
        self.grids.iter().map(FeatureGrid::num_params).sum()
    }

    /// Grid ids carrying `label`, ascending by resolution.
    pub fn copies(&self, label: BasisLabel) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.grids.len()).filter(|&i| self.grids[i].label == label).collect();
        ids.sort_by_key(|&i| (self.grids[i].max_resolution(), i));
        ids
    }

    /// Start of each grid's block in a flat parameter vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.grids.len() + 1);
        let mut acc = 0;
        for g in &self.grids {
            off.push(acc);
            acc += g.num_params();
        }
        off.push(acc);
        off
    }

    /// Same shapes, parameters replaced.
    pub fn congruent(&self, other: &GridSet) -> bool {
        self.grids.len() == other.grids.len()
            && self.grids.iter().zip(&other.grids).all(|(a, b)| {
                a.label == b.label && a.resolution == b.resolution && a.feature_dim == b.feature_dim
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NodeKind {
    Leaf,
    Mul,
    Add,
    Concat,
}

#[derive(Clone, Debug)]
struct Node {
    kind: NodeKind,
    offset: usize,
    len: usize,
    children: Vec<usize>,
    /// Leaf only: grid ids whose features are concatenated.
    grids: Vec<usize>,
}

/// An expression checked against a grid set and flattened into post-order
/// for allocation-free evaluation.
#[derive(Clone, Debug)]
pub struct Program {
    expr: GaExpr,
    dims: usize,
    nodes: Vec<Node>,
    value_len: usize,
    /// Offset of each grid's interpolated features in the feature buffer.
    grid_feat_offset: Vec<usize>,
    grid_used: Vec<bool>,
    feat_len: usize,
}

/// Scratch buffers for [`Program`] evaluation.
#[derive(Clone, Debug, Default)]
pub struct Workspace {
    stencils: Vec<Stencil>,
    feats: Vec<f64>,
    dfeats: Vec<f64>,
    values: Vec<f64>,
    dvalues: Vec<f64>,
    scratch: Vec<f64>,
}

impl Program {
    pub fn compile(expr: &GaExpr, grids: &GridSet, dims: usize, relax_mul: bool) -> Result<Program> {
        if !(2..=3).contains(&dims) {
            return Err(Error::Model(format!("models are 2D or 3D, got {dims}")));
        }
        let mut prog = Program {
            expr: expr.clone(),
            dims,
            nodes: Vec::new(),
            value_len: 0,
            grid_feat_offset: vec![0; grids.len()],
            grid_used: vec![false; grids.len()],
            feat_len: 0,
        };
        prog.add_node(expr, grids, relax_mul, false)?;
        for (i, g) in grids.grids.iter().enumerate() {
            prog.grid_feat_offset[i] = prog.feat_len;
            if prog.grid_used[i] {
                prog.feat_len += g.feature_dim;
            }
        }
        Ok(prog)
    }

    fn add_node(&mut self, e: &GaExpr, grids: &GridSet, relax: bool, inside_mul: bool) -> Result<usize> {
        let (kind, children) = match e {
            GaExpr::Leaf(label) => {
                if label.max_axis() > self.dims {
                    return Err(Error::Expr(format!("{label} needs more than {} axes", self.dims)));
                }
                let ids = grids.copies(*label);
                if ids.is_empty() {
                    return Err(Error::Expr(format!("no grid for {label}")));
                }
                let len: usize = ids.iter().map(|&i| grids.grids[i].feature_dim).sum();
                for &i in &ids {
                    self.grid_used[i] = true;
                }
                return Ok(self.push(NodeKind::Leaf, len, Vec::new(), ids));
            }
            GaExpr::Mul(c) => (NodeKind::Mul, c),
            GaExpr::Add(c) => (NodeKind::Add, c),
            GaExpr::Concat(c) => (NodeKind::Concat, c),
        };
        if children.is_empty() {
            return Err(Error::Expr(format!("{e} has no operands")));
        }
        if kind == NodeKind::Mul && !relax {
            let mut seen = 0u8;
            for c in children {
                let s = c.span();
                if seen & s != 0 {
                    return Err(Error::Expr(format!(
                        "mul operands of {e} share axes; the product does not form a higher-grade element"
                    )));
                }
                seen |= s;
            }
            let full = (1u8 << self.dims) - 1;
            if !inside_mul && seen != full {
                return Err(Error::Expr(format!("{e} does not multiply up to the full {}-vector", self.dims)));
            }
        }
        let ids = children
            .iter()
            .map(|c| self.add_node(c, grids, relax, kind == NodeKind::Mul))
            .collect::<Result<Vec<_>>>()?;
        let lens: Vec<usize> = ids.iter().map(|&i| self.nodes[i].len).collect();
        let len = match kind {
            NodeKind::Concat => lens.iter().sum(),
            _ => {
                if lens.iter().any(|&l| l != lens[0]) {
                    return Err(Error::Expr(format!("operands of {e} have feature dims {lens:?}")));
                }
                lens[0]
            }
        };
        Ok(self.push(kind, len, ids, Vec::new()))
    }

    fn push(&mut self, kind: NodeKind, len: usize, children: Vec<usize>, grids: Vec<usize>) -> usize {
        self.nodes.push(Node { kind, offset: self.value_len, len, children, grids });
        self.value_len += len;
        self.nodes.len() - 1
    }

    pub fn expr(&self) -> &GaExpr {
        &self.expr
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn output_dim(&self) -> usize {
        self.nodes.last().map_or(0, |n| n.len)
    }

    pub fn workspace(&self, grids: &GridSet) -> Workspace {
        let max_d = grids.grids.iter().map(|g| g.feature_dim).max().unwrap_or(0);
        Workspace {
            stencils: vec![Stencil::default(); grids.len()],
            feats: vec![0.0; self.feat_len],
            dfeats: vec![0.0; self.feat_len],
            values: vec![0.0; self.value_len],
            dvalues: vec![0.0; self.value_len],
            scratch: vec![0.0; max_d.max(self.output_dim())],
        }
    }

    /// Evaluates the expression at `q`; the returned slice lives in `ws`.
    pub fn forward<'w>(&self, grids: &GridSet, q: &Coord, ws: &'w mut Workspace) -> &'w [f64] {
        debug_assert_eq!(q.dims(), self.dims);
        let mut p = [0.0; 3];
        for (i, g) in grids.grids.iter().enumerate() {
            if !self.grid_used[i] {
                continue;
            }
            let mut n = 0;
            for a in g.label.axes() {
                p[n] = q.get(a);
                n += 1;
            }
            let st = g.stencil(&p[..n]);
            let off = self.grid_feat_offset[i];
            g.gather(&st, &mut ws.feats[off..off + g.feature_dim]);
            ws.stencils[i] = st;
        }
        for node in &self.nodes {
            let (head, tail) = ws.values.split_at_mut(node.offset);
            let out = &mut tail[..node.len];
            match node.kind {
                NodeKind::Leaf => {
                    let mut pos = 0;
                    for &gid in &node.grids {
                        let d = grids.grids[gid].feature_dim;
                        let off = self.grid_feat_offset[gid];
                        out[pos..pos + d].copy_from_slice(&ws.feats[off..off + d]);
                        pos += d;
                    }
                }
                NodeKind::Mul => {
                    out.fill(1.0);
                    for &c in &node.children {
                        let cn = &self.nodes[c];
                        for (o, v) in out.iter_mut().zip(&head[cn.offset..cn.offset + cn.len]) {
                            *o *= v;
                        }
                    }
                }
                NodeKind::Add => {
                    out.fill(0.0);
                    for &c in &node.children {
                        let cn = &self.nodes[c];
                        for (o, v) in out.iter_mut().zip(&head[cn.offset..cn.offset + cn.len]) {
                            *o += v;
                        }
                    }
                }
                NodeKind::Concat => {
                    let mut pos = 0;
                    for &c in &node.children {
                        let cn = &self.nodes[c];
                        out[pos..pos + cn.len].copy_from_slice(&head[cn.offset..cn.offset + cn.len]);
                        pos += cn.len;
                    }
                }
            }
        }
        let root = self.nodes.last().expect("compiled program has a root");
        &ws.values[root.offset..root.offset + root.len]
    }

    /// Back-propagates `upstream` (gradient w.r.t. the output of the most
    /// recent [`Program::forward`] on `ws`) into `grad`, a flat vector laid
    /// out by `offsets` (see [`GridSet::offsets`]).
    pub fn backward(&self, grids: &GridSet, ws: &mut Workspace, upstream: &[f64], grad: &mut [f64], offsets: &[usize]) {
        let root = self.nodes.last().expect("compiled program has a root");
        ws.dvalues.fill(0.0);
        ws.dvalues[root.offset..root.offset + root.len].copy_from_slice(upstream);
        ws.dfeats.fill(0.0);
        for node in self.nodes.iter().rev() {
            let up = node.offset..node.offset + node.len;
            match node.kind {
                NodeKind::Leaf => {
                    let mut pos = node.offset;
                    for &gid in &node.grids {
                        let d = grids.grids[gid].feature_dim;
                        let off = self.grid_feat_offset[gid];
                        for (df, dv) in ws.dfeats[off..off + d].iter_mut().zip(&ws.dvalues[pos..pos + d]) {
                            *df += dv;
                        }
                        pos += d;
                    }
                }
                NodeKind::Add => {
                    for &c in &node.children {
                        let co = self.nodes[c].offset;
                        for k in 0..node.len {
                            ws.dvalues[co + k] += ws.dvalues[up.start + k];
                        }
                    }
                }
                NodeKind::Concat => {
                    let mut pos = up.start;
                    for &c in &node.children {
                        let cn = &self.nodes[c];
                        for k in 0..cn.len {
                            ws.dvalues[cn.offset + k] += ws.dvalues[pos + k];
                        }
                        pos += cn.len;
                    }
                }
                NodeKind::Mul => {
                    for (ci, &c) in node.children.iter().enumerate() {
                        let scratch = &mut ws.scratch[..node.len];
                        scratch.copy_from_slice(&ws.dvalues[up.clone()]);
                        for (cj, &other) in node.children.iter().enumerate() {
                            if cj == ci {
                                continue;
                            }
                            let oo = self.nodes[other].offset;
                            for (s, v) in scratch.iter_mut().zip(&ws.values[oo..oo + node.len]) {
                                *s *= v;
                            }
                        }
                        let co = self.nodes[c].offset;
                        for (dv, s) in ws.dvalues[co..co + node.len].iter_mut().zip(scratch.iter()) {
                            *dv += s;
                        }
                    }
                }
            }
        }
        for (i, g) in grids.grids.iter().enumerate() {
            if !self.grid_used[i] {
                continue;
            }
            let off = self.grid_feat_offset[i];
            let d = g.feature_dim;
            FeatureGrid::scatter(&ws.stencils[i], d, &ws.dfeats[off..off + d], &mut grad[offsets[i]..offsets[i + 1]]);
        }
    }
}

/// Feature vector of `expr` at `q` (2D or 3D according to `q`).
pub fn eval_expr(expr: &GaExpr, grids: &GridSet, q: &Coord) -> Result<Vec<f64>> {
    let prog = Program::compile(expr, grids, q.dims(), false)?;
    let mut ws = prog.workspace(grids);
    Ok(prog.forward(grids, q, &mut ws).to_vec())
}

/// Per-grid parameter gradients of `<upstream, eval_expr(expr, grids, q)>`.
pub fn eval_expr_grad(expr: &GaExpr, grids: &GridSet, q: &Coord, upstream: &[f64]) -> Result<Vec<Vec<f64>>> {
    let prog = Program::compile(expr, grids, q.dims(), false)?;
    if upstream.len() != prog.output_dim() {
        return Err(Error::Shape(format!("upstream has {} entries, output has {}", upstream.len(), prog.output_dim())));
    }
    let mut ws = prog.workspace(grids);
    prog.forward(grids, q, &mut ws);
    let offsets = grids.offsets();
    let mut flat = vec![0.0; grids.total_params()];
    prog.backward(grids, &mut ws, upstream, &mut flat, &offsets);
    Ok((0..grids.len()).map(|i| flat[offsets[i]..offsets[i + 1]].to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::Interp;
    use crate::numerics::SeededRng;

    fn full_3d(d: [usize; 3], r: [usize; 3], seed: u64) -> GridSet {
        let mut rng = SeededRng::new(seed);
        let mut grids = Vec::new();
        for (arity, (&dd, &rr)) in (1..=3).zip(d.iter().zip(&r)) {
            for l in BasisLabel::all_of_arity(3, arity) {
                grids.push(FeatureGrid::random(l, rr, dd, Interp::Multilinear, 1.0, &mut rng).unwrap());
            }
        }
        GridSet::new(grids).unwrap()
    }

    #[test]
    fn parse_round_trip() {
        for s in [presets::CONCAT, presets::MULT, presets::TRIPLANE_ADD, presets::TRIPLANE_MUL, "add(mul(e1,e2),e12)"] {
            let e: GaExpr = s.parse().unwrap();
            assert_eq!(e.to_string(), s);
        }
        assert!("mul(e1,".parse::<GaExpr>().is_err());
        assert!("pow(e1,e2)".parse::<GaExpr>().is_err());
        assert!("mul(e1,e2)x".parse::<GaExpr>().is_err());
        assert_eq!(" mul( e1 , e2 ) ".parse::<GaExpr>().unwrap().to_string(), "mul(e1,e2)");
    }

    #[test]
    fn ga_validity() {
        let g = full_3d([4, 4, 4], [3, 3, 3], 1);
        let ok = |s: &str, relax| Program::compile(&s.parse().unwrap(), &g, 3, relax).is_ok();
        assert!(ok(presets::MULT, false));
        assert!(!ok(presets::TRIPLANE_MUL, false));
        assert!(ok(presets::TRIPLANE_MUL, true));
        assert!(!ok("mul(e1,e2)", false), "product must reach the trivector");
        assert!(!ok("mul(e1,e12,e3)", false), "shared axis");
        // Dimension mismatch is never relaxed.
        let g2 = full_3d([4, 6, 4], [3, 3, 3], 1);
        assert!(Program::compile(&"mul(e1,e23)".parse().unwrap(), &g2, 3, true).is_err());
        assert!(Program::compile(&"add(e1,e23)".parse().unwrap(), &g2, 3, true).is_err());
        assert!(Program::compile(&"concat(e1,e23)".parse().unwrap(), &g2, 3, true).is_ok());
    }

    #[test]
    fn zero_grids_give_zero() {
        let mut g = full_3d([2, 2, 2], [3, 3, 3], 2);
        for grid in &mut g.grids {
            grid.params.fill(0.0);
        }
        let f = eval_expr(&presets::MULT.parse().unwrap(), &g, &Coord::new(&[0.3, 0.2, 0.9])).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn product_at_nodes_is_hadamard() {
        let mut rng = SeededRng::new(3);
        let g1 = FeatureGrid::random("e1".parse().unwrap(), 4, 3, Interp::Multilinear, 1.0, &mut rng).unwrap();
        let g2 = FeatureGrid::random("e2".parse().unwrap(), 5, 3, Interp::Multilinear, 1.0, &mut rng).unwrap();
        let set = GridSet::new(vec![g1.clone(), g2.clone()]).unwrap();
        let f = eval_expr(&"mul(e1,e2)".parse().unwrap(), &set, &Coord::new(&[2.0 / 3.0, 0.25])).unwrap();
        let (u, v) = (g1.node_values(2), g2.node_values(1));
        for c in 0..3 {
            assert_eq!(f[c], u[c] * v[c]);
        }
    }

    #[test]
    fn concat_model_matches_hand_composition() {
        let g = full_3d([3, 2, 2], [4, 3, 3], 4);
        let q = Coord::new(&[0.37, 0.81, 0.12]);
        let f = eval_expr(&presets::CONCAT.parse().unwrap(), &g, &q).unwrap();
        let mut want = Vec::new();
        for name in ["e1", "e2", "e3", "e12", "e13", "e23", "e123"] {
            let l: BasisLabel = name.parse().unwrap();
            let grid = g.grids.iter().find(|x| x.label == l).unwrap();
            want.extend(grid.interpolate(&crate::grids::project(&q, l)));
        }
        assert_eq!(f.len(), want.len());
        for (a, b) in f.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn multiresolution_copies_concatenate_ascending() {
        let mut rng = SeededRng::new(5);
        let l1: BasisLabel = "e1".parse().unwrap();
        let fine = FeatureGrid::random(l1, 8, 2, Interp::Multilinear, 1.0, &mut rng).unwrap();
        let coarse = FeatureGrid::random(l1, 4, 2, Interp::Multilinear, 1.0, &mut rng).unwrap();
        let g2 = FeatureGrid::random("e2".parse().unwrap(), 4, 4, Interp::Multilinear, 1.0, &mut rng).unwrap();
        let set = GridSet::with_scales(vec![fine.clone(), coarse.clone(), g2], vec![2, 1, 1]).unwrap();
        let q = Coord::new(&[0.4, 0.6]);
        let f = eval_expr(&"concat(e1)".parse().unwrap(), &set, &q).unwrap();
        let mut want = coarse.interpolate(&[0.4]);
        want.extend(fine.interpolate(&[0.4]));
        assert_eq!(f, want);
        assert!(eval_expr(&"mul(e1,e2)".parse().unwrap(), &set, &q).is_ok());
    }

    #[test]
    fn add_passes_identical_upstream() {
        let mut rng = SeededRng::new(6);
        let a = FeatureGrid::random("e1".parse().unwrap(), 3, 2, Interp::Multilinear, 1.0, &mut rng).unwrap();
        let b = FeatureGrid::random("e2".parse().unwrap(), 3, 2, Interp::Multilinear, 1.0, &mut rng).unwrap();
        let set = GridSet::new(vec![a, b]).unwrap();
        let q = Coord::new(&[0.0, 0.0]);
        let g = eval_expr_grad(&"add(e1,e2)".parse().unwrap(), &set, &q, &[1.5, -2.0]).unwrap();
        assert_eq!(&g[0][..2], &[1.5, -2.0]);
        assert_eq!(&g[1][..2], &[1.5, -2.0]);
    }

    #[test]
    fn mul_with_unit_sibling_passes_upstream() {
        let mut rng = SeededRng::new(7);
        let a = FeatureGrid::random("e1".parse().unwrap(), 3, 2, Interp::Multilinear, 1.0, &mut rng).unwrap();
        let mut b = FeatureGrid::zeros("e2".parse().unwrap(), vec![3], 2, Interp::Multilinear).unwrap();
        b.params.fill(1.0);
        let set = GridSet::new(vec![a, b]).unwrap();
        let q = Coord::new(&[0.5, 0.3]);
        let g = eval_expr_grad(&"mul(e1,e2)".parse().unwrap(), &set, &q, &[0.7, 0.2]).unwrap();
        assert_eq!(&g[0][2..4], &[0.7, 0.2]);
    }

    fn fd_check(expr: &str, g: &mut GridSet, seed: u64) {
        let e: GaExpr = expr.parse().unwrap();
        let mut rng = SeededRng::new(seed);
        let q = Coord::new(&[rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)]);
        let dim = eval_expr(&e, g, &q).unwrap().len();
        let w = rng.normal_vec(dim, 1.0);
        let loss = |g: &GridSet| -> f64 { eval_expr(&e, g, &q).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum() };
        let grads = eval_expr_grad(&e, g, &q, &w).unwrap();
        let h = 1e-6;
        for gi in 0..g.len() {
            for pi in 0..g.grids[gi].num_params() {
                let orig = g.grids[gi].params[pi];
                g.grids[gi].params[pi] = orig + h;
                let lp = loss(g);
                g.grids[gi].params[pi] = orig - h;
                let lm = loss(g);
                g.grids[gi].params[pi] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads[gi][pi];
                let scale = fd.abs().max(an.abs());
                assert!((fd - an).abs() <= 1e-5 * scale + 1e-9, "{expr} grid {gi} param {pi}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn product_expression_gradient_matches_fd() {
        let mut g = full_3d([2, 2, 2], [3, 3, 2], 8);
        fd_check(presets::MULT, &mut g, 1);
        let mut g = full_3d([2, 3, 2], [3, 3, 2], 9);
        fd_check(presets::CONCAT, &mut g, 2);
    }
}
