// SPDX-License-Identifier: Apache-2.0

//! Seeded first-order fitting against point-wise or ray-wise MSE.
//!
//! A minibatch is split into fixed-size chunks. Each chunk accumulates its
//! own gradient buffer and the buffers are merged by an ordered pairwise
//! tree, so the result does not depend on how many threads ran the chunks.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::Coord;
use crate::model::{Evaluator, Model};
use crate::numerics::SeededRng;

/// Items per gradient chunk.
pub const CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Optimizer::Adam),
            "sgd" => Ok(Optimizer::Sgd),
            _ => Err(Error::Config(format!("unknown optimizer {s:?} (adam|sgd)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    /// Items per step; at least the dataset size means full-batch descent.
    pub batch_size: usize,
    pub lr_grids: f64,
    pub lr_decoder: f64,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Log the full-data loss (and metric) every this many steps; the last
    /// step is always logged.
    pub eval_every: usize,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 1024,
            lr_grids: 1e-2,
            lr_decoder: 1e-3,
            optimizer: Optimizer::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            eval_every: 100,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 || self.threads == 0 {
            return Err(Error::Config("steps, batch_size, eval_every and threads must be positive".into()));
        }
        let lrs_ok = self.lr_grids > 0.0 && self.lr_decoder > 0.0 && self.lr_grids.is_finite() && self.lr_decoder.is_finite();
        if !lrs_ok {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("adam betas must lie in [0,1) and eps > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub metric: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricLog {
    pub rows: Vec<MetricRow>,
}

impl MetricLog {
    pub fn push(&mut self, row: MetricRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(Error::Model(format!("log step {} does not follow {}", row.step, last.step)));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    pub fn final_metric(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.metric)
    }

    /// Equality of everything except wall-clock time.
    pub fn same_trace(&self, other: &MetricLog) -> bool {
        self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| {
                a.step == b.step
                    && a.loss.to_bits() == b.loss.to_bits()
                    && a.metric.map(f64::to_bits) == b.metric.map(f64::to_bits)
            })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,loss,metric,wall_ms")?;
        for r in &self.rows {
            let metric = r.metric.map(|m| format!("{m:.17e}")).unwrap_or_default();
            writeln!(w, "{},{:.17e},{},{}", r.step, r.loss, metric, r.wall_ms)?;
        }
        Ok(())
    }
}

/// A mean-of-squared-errors objective over indexed items.
pub trait Objective: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Squared error of item `i`; when `grad` is given, adds
    /// `scale * d(error)/d(params)` to it.
    fn item(&self, model: &Model, i: usize, ev: &mut Evaluator, scale: f64, grad: Option<&mut [f64]>) -> f64;
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointDataset {
    pub coords: Vec<Coord>,
    pub targets: Vec<f64>,
}

impl PointDataset {
    pub fn new(coords: Vec<Coord>, targets: Vec<f64>) -> Result<Self> {
        if coords.len() != targets.len() {
            return Err(Error::Shape(format!("{} coords vs {} targets", coords.len(), targets.len())));
        }
        if let Some(t) = targets.iter().find(|t| !t.is_finite()) {
            return Err(Error::Shape(format!("non-finite target {t}")));
        }
        Ok(PointDataset { coords, targets })
    }

    /// Every entry of a matrix at its node-aligned coordinate.
    pub fn from_matrix(m: &crate::numerics::Tensor) -> Result<Self> {
        if !m.is_matrix() {
            return Err(Error::Shape("expected a matrix".into()));
        }
        let (rows, cols) = (m.rows(), m.cols());
        let mut coords = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                coords.push(Coord::new(&[crate::model::node_coord(i, rows), crate::model::node_coord(j, cols)]));
            }
        }
        PointDataset::new(coords, m.data().to_vec())
    }
}

impl Objective for PointDataset {
    fn len(&self) -> usize {
        self.coords.len()
    }

    fn item(&self, model: &Model, i: usize, ev: &mut Evaluator, scale: f64, grad: Option<&mut [f64]>) -> f64 {
        let r = model.forward(&self.coords[i], ev) - self.targets[i];
        if let Some(g) = grad {
            model.backward(ev, 2.0 * r * scale, g);
        }
        r * r
    }
}

/// Mean squared error over `items` (all items when `None`), with optional
/// gradient. Deterministic for any thread count.
pub fn objective_loss(
    model: &Model,
    obj: &dyn Objective,
    items: Option<&[usize]>,
    want_grad: bool,
    threads: usize,
) -> (f64, Option<Vec<f64>>) {
    let all: Vec<usize>;
    let items = match items {
        Some(s) => s,
        None => {
            all = (0..obj.len()).collect();
            &all
        }
    };
    let n = items.len().max(1);
    let scale = 1.0 / n as f64;
    let chunks: Vec<&[usize]> = items.chunks(CHUNK).collect();
    let p = if want_grad { model.num_trainable() } else { 0 };
    let run = |part: &[&[usize]]| -> Vec<(f64, Vec<f64>)> {
        let mut ev = model.evaluator();
        part.iter()
            .map(|c| {
                let mut g = vec![0.0; p];
                let mut loss = 0.0;
                for &i in c.iter() {
                    loss += obj.item(model, i, &mut ev, scale, want_grad.then_some(g.as_mut_slice()));
                }
                (loss, g)
            })
            .collect()
    };
    let mut results: Vec<(f64, Vec<f64>)> = if threads <= 1 || chunks.len() <= 1 {
        run(&chunks)
    } else {
        let per = chunks.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = chunks.chunks(per).map(|part| s.spawn(move || run(part))).collect();
            handles.into_iter().flat_map(|h| h.join().expect("gradient worker panicked")).collect()
        })
    };
    let mut stride = 1;
    while stride < results.len() {
        let mut i = 0;
        while i + stride < results.len() {
            let (left, right) = results.split_at_mut(i + stride);
            let (l, r) = (&mut left[i], &right[0]);
            l.0 += r.0;
            for (a, b) in l.1.iter_mut().zip(&r.1) {
                *a += b;
            }
            i += 2 * stride;
        }
        stride *= 2;
    }
    match results.into_iter().next() {
        Some((loss, g)) => (loss * scale, want_grad.then_some(g)),
        None => (0.0, want_grad.then(|| vec![0.0; p])),
    }
}

/// `mean (predict - target)^2` over a batch and its gradient.
pub fn mse_loss(model: &Model, batch: &PointDataset) -> Result<(f64, Vec<f64>)> {
    if batch.coords.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let (l, g) = objective_loss(model, batch, None, true, 1);
    Ok((l, g.expect("gradient requested")))
}

struct OptState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

fn apply_update(model: &mut Model, grad: &[f64], st: &mut OptState, cfg: &TrainConfig) {
    st.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(st.t);
    let bc2 = 1.0 - cfg.beta2.powi(st.t);
    let layout = model.param_layout();
    let blocks = model.trainable_blocks_mut();
    for ((off, len, is_dec), block) in layout.into_iter().zip(blocks) {
        let lr = if is_dec { cfg.lr_decoder } else { cfg.lr_grids };
        let g = &grad[off..off + len];
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (p, gi) in block.iter_mut().zip(g) {
                    *p -= lr * gi;
                }
            }
            Optimizer::Adam => {
                let m = &mut st.m[off..off + len];
                let v = &mut st.v[off..off + len];
                for i in 0..len {
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    block[i] -= lr * mh / (vh.sqrt() + cfg.eps);
                }
            }
        }
    }
}

/// Fits `model` in place. `metric` is evaluated at every logged step.
pub fn fit_objective(
    model: &mut Model,
    obj: &dyn Objective,
    cfg: &TrainConfig,
    mut metric: Option<&mut dyn FnMut(&Model) -> f64>,
) -> Result<MetricLog> {
    cfg.validate()?;
    if obj.is_empty() {
        return Err(Error::Shape("cannot fit an empty dataset".into()));
    }
    let n = obj.len();
    let bs = cfg.batch_size.min(n);
    let mut rng = SeededRng::substream(cfg.seed, 7);
    let mut order: Vec<usize> = rng.permutation(n);
    let mut cursor = 0;
    let p = model.num_trainable();
    let mut st = OptState { m: vec![0.0; p], v: vec![0.0; p], t: 0 };
    let mut log = MetricLog::default();
    let start = Instant::now();
    let mut batch = Vec::with_capacity(bs);
    for step in 1..=cfg.steps {
        batch.clear();
        if bs == n {
            batch.extend(0..n);
        } else {
            // Last partial batch of an epoch is kept as is.
            let end = (cursor + bs).min(n);
            batch.extend_from_slice(&order[cursor..end]);
            cursor = end;
            if cursor == n {
                order = rng.permutation(n);
                cursor = 0;
            }
        }
        let (loss, grad) = objective_loss(model, obj, Some(&batch), true, cfg.threads);
        if !loss.is_finite() {
            return Err(Error::NonFinite { step, loss });
        }
        let grad = grad.expect("gradient requested");
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { step, loss: f64::NAN });
        }
        apply_update(model, &grad, &mut st, cfg);
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let (full, _) = objective_loss(model, obj, None, false, cfg.threads);
            if !full.is_finite() {
                return Err(Error::NonFinite { step, loss: full });
            }
            let m = metric.as_mut().map(|f| f(model));
            log.push(MetricRow { step, loss: full, metric: m, wall_ms: start.elapsed().as_millis() as u64 })?;
        }
    }
    Ok(log)
}

pub fn fit(model: &mut Model, data: &PointDataset, cfg: &TrainConfig) -> Result<MetricLog> {
    fit_objective(model, data, cfg, None)
}

/// Largest Hessian eigenvalue of the full-data loss, by power iteration on
/// gradient differences. Exact for models whose prediction is linear in the
/// trainable parameters (the loss is then quadratic).
pub fn estimate_lipschitz(model: &Model, obj: &dyn Objective, iters: usize, seed: u64) -> f64 {
    let base = model.trainable_vector();
    let (_, g0) = objective_loss(model, obj, None, true, 1);
    let g0 = g0.expect("gradient requested");
    let mut rng = SeededRng::new(seed);
    let mut v = rng.normal_vec(base.len(), 1.0);
    if !model.spec.use_bias {
        *v.last_mut().expect("nonempty") = 0.0;
    }
    let mut probe = model.clone();
    let mut lambda = 0.0;
    for _ in 0..iters {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let shifted: Vec<f64> = base.iter().zip(&v).map(|(b, d)| b + d).collect();
        probe.set_trainable_vector(&shifted).expect("same layout");
        let (_, g1) = objective_loss(&probe, obj, None, true, 1);
        let hv: Vec<f64> = g1.expect("gradient requested").iter().zip(&g0).map(|(a, b)| a - b).collect();
        lambda = hv.iter().zip(&v).map(|(a, b)| a * b).sum();
        v = hv;
    }
    lambda
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combiner::presets;
    use crate::decoders::DecoderKind;
    use crate::grids::Interp;
    use crate::model::{Mode, ModelSpec};
    use crate::numerics::Tensor;

    fn scalar_model() -> Model {
        // A single two-node line with a one-channel linear decoder and zero
        // grids reduces to y = bias.
        let spec = ModelSpec::plane("add(e1,e2)", 1, 2, 2, Interp::Multilinear, DecoderKind::Linear, 0);
        Model::build_zero_grids(&spec, 0, 0).unwrap()
    }

    #[test]
    fn exact_predictions_give_zero_loss() {
        let m = scalar_model();
        let data = PointDataset::new(vec![Coord::new(&[0.3, 0.4]); 3], vec![0.0; 3]).unwrap();
        let (l, g) = mse_loss(&m, &data).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn scalar_model_analytic() {
        let mut m = scalar_model();
        m.decoder.set_bias(1.5);
        let data = PointDataset::new(vec![Coord::new(&[0.1, 0.9])], vec![0.25]).unwrap();
        let (l, g) = mse_loss(&m, &data).unwrap();
        assert!((l - 1.5625).abs() < 1e-15);
        assert!((g.last().unwrap() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn zero_targets_zero_model_stay_zero() {
        let mut spec = ModelSpec::plane("mul(e1,e2)", 2, 4, 2, Interp::Multilinear, DecoderKind::Linear, 0);
        spec.init_scale = 0.0;
        let mut m = Model::build(&spec, 0, 0).unwrap();
        let data = PointDataset::from_matrix(&Tensor::zeros(&[6, 6])).unwrap();
        let cfg = TrainConfig { steps: 20, batch_size: 8, eval_every: 5, ..Default::default() };
        let log = fit(&mut m, &data, &cfg).unwrap();
        assert!(log.rows.iter().all(|r| r.loss == 0.0));
    }

    #[test]
    fn chunked_reduction_is_thread_invariant() {
        let spec = ModelSpec::volume(presets::CONCAT, [3, 2, 2], [5, 4, 3], Mode::Nonconvex, 6);
        let m = Model::build(&spec, 5, 6).unwrap();
        let mut rng = SeededRng::new(1);
        let coords: Vec<Coord> = (0..1000)
            .map(|_| Coord::new(&[rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)]))
            .collect();
        let targets = rng.uniform_vec(1000, 0.0, 1.0);
        let data = PointDataset::new(coords, targets).unwrap();
        let (l1, g1) = objective_loss(&m, &data, None, true, 1);
        let (l3, g3) = objective_loss(&m, &data, None, true, 3);
        assert_eq!(l1.to_bits(), l3.to_bits());
        assert_eq!(g1, g3);
    }

    #[test]
    fn frozen_parameters_untouched() {
        let spec = ModelSpec::volume(presets::CONCAT, [2, 2, 2], [4, 4, 3], Mode::Semiconvex, 4);
        let mut m = Model::build(&spec, 1, 2).unwrap();
        let frozen = m.decoder.frozen.clone();
        let mut rng = SeededRng::new(2);
        let coords: Vec<Coord> = (0..64)
            .map(|_| Coord::new(&[rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)]))
            .collect();
        let data = PointDataset::new(coords, rng.uniform_vec(64, 0.0, 1.0)).unwrap();
        fit(&mut m, &data, &TrainConfig { steps: 30, batch_size: 16, ..Default::default() }).unwrap();
        assert_eq!(m.decoder.frozen, frozen);
    }
}
