// SPDX-License-Identifier: Apache-2.0

//! Task drivers: 2D image fitting, matrix decompositions, 3D segmentation
//! from silhouettes, video mask interpolation and the small-model stability
//! sweep.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{self, DecompRow, SparseCost};
use crate::combiner::presets;
use crate::decoders::DecoderKind;
use crate::error::{Error, Result};
use crate::geometry::{self, RayNorm, RaySet, SceneSpec, Video, VideoSpec, View, VoxelLabels};
use crate::grids::{Coord, Interp};
use crate::model::{Evaluator, Mode, Model, ModelSpec};
use crate::numerics::{psnr, svd, Tensor};
use crate::training::{fit_objective, objective_loss, MetricLog, Objective, PointDataset, TrainConfig};

/// Intersection over union of two binary masks (entries >= 0.5 are set).
/// Two empty masks score 1.
pub fn iou(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::Shape(format!("iou of {:?} and {:?}", pred.shape(), truth.shape())));
    }
    let (inter, union) = overlap_counts(pred.data(), truth.data());
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

fn overlap_counts(a: &[f64], b: &[f64]) -> (usize, usize) {
    let mut inter = 0;
    let mut union = 0;
    for (x, y) in a.iter().zip(b) {
        let (p, q) = (*x >= 0.5, *y >= 0.5);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    (inter, union)
}

/// 1 where `t >= thr`, else 0.
pub fn binarize(t: &Tensor, thr: f64) -> Tensor {
    t.map(|v| if v >= thr { 1.0 } else { 0.0 })
}

/// Hex SHA-256 of a JSON-serialisable value.
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    let bytes = serde_json::to_vec(cfg)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// A named model configuration in a task roster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub spec: ModelSpec,
}

/// Roster entry names: `concat`, `mult`, `triplane_add`, `triplane_mul`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RosterSizes {
    /// Feature dims and resolutions for the concatenated model.
    pub concat_d: [usize; 3],
    pub concat_r: [usize; 3],
    /// Same for the product model, whose line and plane dims must agree.
    pub mult_d: [usize; 3],
    pub mult_r: [usize; 3],
    /// Plane dim and resolution for the tri-plane models.
    pub triplane_d: usize,
    pub triplane_r: usize,
    pub hidden: usize,
}

impl RosterSizes {
    pub fn variant(&self, model: &str, mode: Mode) -> Result<Variant> {
        let (expr, d, r) = match model {
            "concat" => (presets::CONCAT, self.concat_d, self.concat_r),
            "mult" => (presets::MULT, self.mult_d, self.mult_r),
            "triplane_add" => (presets::TRIPLANE_ADD, [1, self.triplane_d, 1], [2, self.triplane_r, 2]),
            "triplane_mul" => (presets::TRIPLANE_MUL, [1, self.triplane_d, 1], [2, self.triplane_r, 2]),
            _ => return Err(Error::Config(format!("unknown model {model:?} (concat|mult|triplane_add|triplane_mul)"))),
        };
        let mut spec = ModelSpec::volume(expr, d, r, mode, self.hidden);
        spec.relax_mul = model == "triplane_mul";
        Ok(Variant { name: model.to_string(), spec })
    }
}

/// Parses `model:mode` roster entries.
pub fn parse_roster(entries: &[String]) -> Result<Vec<(String, Mode)>> {
    entries
        .iter()
        .map(|e| {
            let (m, mode) = e.split_once(':').ok_or_else(|| Error::Config(format!("roster entry {e:?} is not model:mode")))?;
            Ok((m.to_string(), mode.parse()?))
        })
        .collect()
}

/// Result row shared by the segmentation and video tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegRow {
    pub task: String,
    pub model: String,
    pub mode: Mode,
    pub iou_test: f64,
    pub iou_train: f64,
    pub params: usize,
    pub final_loss: f64,
    pub wall_ms: u64,
}

impl SegRow {
    pub const HEADER: [&'static str; 8] = ["task", "model", "mode", "iou_test", "iou_train", "params", "final_loss", "wall_ms"];

    pub fn fields(&self) -> Vec<String> {
        vec![
            self.task.clone(),
            self.model.clone(),
            self.mode.to_string(),
            format!("{:.6}", self.iou_test),
            format!("{:.6}", self.iou_train),
            self.params.to_string(),
            format!("{:.9e}", self.final_loss),
            self.wall_ms.to_string(),
        ]
    }
}

// ---------------------------------------------------------------- image fit

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageFitConfig {
    /// `add` and/or `mul` (line features only).
    pub combiners: Vec<String>,
    pub decoders: Vec<DecoderKind>,
    pub ks: Vec<usize>,
    /// Line resolution for linear decoders; 0 means the image size.
    pub r1_linear: usize,
    /// Line resolution for gated and MLP decoders.
    pub r1_mlp: usize,
    pub hidden: usize,
    pub interps: Vec<Interp>,
    pub svd_ranks: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for ImageFitConfig {
    fn default() -> Self {
        ImageFitConfig {
            combiners: vec!["add".into(), "mul".into()],
            decoders: vec![DecoderKind::Linear, DecoderKind::Gated, DecoderKind::Mlp],
            ks: vec![4, 8, 16, 32],
            r1_linear: 0,
            r1_mlp: 128,
            hidden: 64,
            interps: vec![Interp::Multilinear, Interp::Nearest],
            svd_ranks: vec![1, 2, 4, 8, 16, 32, 64],
            train: TrainConfig { steps: 3000, batch_size: 4096, ..TrainConfig::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageFitRow {
    pub method: String,
    pub interp: String,
    pub k: usize,
    pub r1: usize,
    pub hidden: usize,
    pub params: usize,
    pub psnr: f64,
}

impl ImageFitRow {
    pub const HEADER: [&'static str; 7] = ["method", "interp", "k", "r1", "hidden", "params", "psnr"];

    pub fn fields(&self) -> Vec<String> {
        vec![
            self.method.clone(),
            self.interp.clone(),
            self.k.to_string(),
            self.r1.to_string(),
            self.hidden.to_string(),
            self.params.to_string(),
            format!("{:.6}", self.psnr),
        ]
    }
}

/// 2D spec for `combiner(e1, e2)` with the given decoder.
pub fn image_spec(combiner: &str, decoder: DecoderKind, k: usize, r1: usize, interp: Interp, hidden: usize) -> Result<ModelSpec> {
    let expr = match combiner {
        "add" => "add(e1,e2)",
        "mul" => "mul(e1,e2)",
        "concat" => "concat(e1,e2)",
        _ => return Err(Error::Config(format!("unknown 2D combiner {combiner:?} (add|mul|concat)"))),
    };
    let mut spec = ModelSpec::plane(expr, k, r1, 2, interp, decoder, hidden);
    if decoder == DecoderKind::Gated && combiner != "mul" {
        spec.mode = Mode::Semiconvex;
    }
    Ok(spec)
}

/// Trains one 2D model on `img` and returns it with its PSNR.
pub fn fit_image(img: &Tensor, spec: &ModelSpec, train: &TrainConfig, seed: u64) -> Result<(Model, f64, MetricLog)> {
    let data = PointDataset::from_matrix(img)?;
    let mut model = Model::build(spec, seed, seed ^ 0x9e37_79b9)?;
    let log = fit_objective(&mut model, &data, train, None)?;
    let pred = model.assemble_matrix(img.rows(), img.cols())?;
    Ok((model, psnr(&pred, img, 1.0)?, log))
}

pub fn run_image_fit(img: &Tensor, cfg: &ImageFitConfig, seed: u64) -> Result<Vec<ImageFitRow>> {
    if !img.is_matrix() {
        return Err(Error::Shape("image must be a matrix".into()));
    }
    let (m, n) = (img.rows(), img.cols());
    let mut rows = Vec::new();
    let dec = svd(img)?;
    for &k in cfg.svd_ranks.iter().filter(|&&k| k <= m.min(n)) {
        let err2 = dec.tail_energy(k);
        rows.push(ImageFitRow {
            method: "svd".into(),
            interp: "-".into(),
            k,
            r1: 0,
            hidden: 0,
            params: k * (m + n),
            psnr: crate::numerics::psnr_from_mse(err2 / (m * n) as f64, 1.0),
        });
    }
    for comb in &cfg.combiners {
        for &decoder in &cfg.decoders {
            for &interp in &cfg.interps {
                for &k in &cfg.ks {
                    let r1 = match decoder {
                        DecoderKind::Linear if cfg.r1_linear == 0 => m.max(n),
                        DecoderKind::Linear => cfg.r1_linear,
                        _ => cfg.r1_mlp,
                    };
                    let spec = image_spec(comb, decoder, k, r1, interp, cfg.hidden)?;
                    let (model, p, _) = fit_image(img, &spec, &cfg.train, seed)?;
                    rows.push(ImageFitRow {
                        method: format!("{comb}+{decoder}"),
                        interp: format!("{interp:?}").to_lowercase(),
                        k,
                        r1,
                        hidden: model.decoder.hidden,
                        params: model.param_count(false),
                        psnr: p,
                    });
                }
            }
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------- decomp

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompConfig {
    pub fracs: Vec<f64>,
    pub sides: Vec<usize>,
    pub ranks: Vec<usize>,
    pub cost: SparseCost,
    pub iters: usize,
}

impl Default for DecompConfig {
    fn default() -> Self {
        DecompConfig {
            fracs: vec![0.1875],
            sides: baselines::lowres_sides(512),
            ranks: vec![0, 6, 12, 18, 24, 30, 36, 42, 48],
            cost: SparseCost::Value,
            iters: 30,
        }
    }
}

pub const DECOMP_HEADER: [&str; 6] = ["budget_frac", "method", "k", "r_low_or_s", "psnr", "params"];

pub fn decomp_fields(r: &DecompRow) -> Vec<String> {
    vec![format!("{}", r.budget_frac), r.method.to_string(), r.k.to_string(), r.r_low_or_s.to_string(), format!("{:.6}", r.psnr), r.params.to_string()]
}

pub fn run_decomp(img: &Tensor, cfg: &DecompConfig) -> Result<Vec<DecompRow>> {
    let mut rows = baselines::pareto_lowres(img, &cfg.fracs, &cfg.sides)?;
    rows.extend(baselines::pareto_sparse(img, &cfg.fracs, &cfg.ranks, cfg.cost, cfg.iters)?);
    Ok(rows)
}

// ---------------------------------------------------------------- seg3d

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    Tomo2d,
    Carved3d,
}

impl std::str::FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tomo2d" => Ok(Supervision::Tomo2d),
            "carved3d" => Ok(Supervision::Carved3d),
            _ => Err(Error::Config(format!("unknown supervision {s:?} (tomo2d|carved3d)"))),
        }
    }
}

impl std::fmt::Display for Supervision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Supervision::Tomo2d => "tomo2d",
            Supervision::Carved3d => "carved3d",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seg3dConfig {
    pub scene_seed: u64,
    pub w: usize,
    pub samples: usize,
    pub carve_res: usize,
    /// View ids held out for evaluation (ids index [`geometry::standard_views`]).
    pub test_views: Vec<usize>,
    pub roster: Vec<String>,
    pub sizes: RosterSizes,
    /// Batches count rays.
    pub train_tomo2d: TrainConfig,
    /// Batches count voxels.
    pub train_carved3d: TrainConfig,
    pub threshold: f64,
    /// Extra thresholds scored on held-out views for sensitivity reports.
    pub threshold_sweep: Vec<f64>,
    pub ray_norm: RayNorm,
}

impl Seg3dConfig {
    pub fn train(&self, sup: Supervision) -> &TrainConfig {
        match sup {
            Supervision::Tomo2d => &self.train_tomo2d,
            Supervision::Carved3d => &self.train_carved3d,
        }
    }
}

impl Default for Seg3dConfig {
    fn default() -> Self {
        Seg3dConfig {
            scene_seed: 0,
            w: 64,
            samples: 128,
            carve_res: 64,
            // Opposite orthographic views see mirrored silhouettes, so both
            // members of a pair are held out.
            test_views: vec![1, 5],
            roster: ["concat:convex", "concat:semiconvex", "concat:nonconvex", "mult:nonconvex", "triplane_add:convex", "triplane_add:semiconvex", "triplane_add:nonconvex", "triplane_mul:nonconvex"]
                .map(String::from)
                .to_vec(),
            sizes: RosterSizes {
                concat_d: [16, 8, 4],
                concat_r: [64, 32, 24],
                mult_d: [8, 8, 4],
                mult_r: [64, 32, 24],
                triplane_d: 8,
                triplane_r: 64,
                hidden: 16,
            },
            train_tomo2d: TrainConfig { steps: 2000, batch_size: 64, lr_grids: 3e-3, eval_every: 2000, ..TrainConfig::default() },
            train_carved3d: TrainConfig { steps: 2000, batch_size: 4096, lr_grids: 3e-3, eval_every: 2000, ..TrainConfig::default() },
            threshold: 0.5,
            threshold_sweep: vec![0.3, 0.4, 0.5, 0.6, 0.7],
            ray_norm: RayNorm::LineIntegral,
        }
    }
}

/// Mean-density MSE over the pixels of several views.
pub struct RayObjective<'a> {
    pub rays: Vec<&'a RaySet>,
    pub targets: Vec<&'a Tensor>,
    pub norm: RayNorm,
    index: Vec<(usize, usize)>,
}

impl<'a> RayObjective<'a> {
    pub fn new(rays: Vec<&'a RaySet>, targets: Vec<&'a Tensor>, norm: RayNorm) -> Result<Self> {
        if rays.len() != targets.len() {
            return Err(Error::Shape("one target image per ray set".into()));
        }
        let mut index = Vec::new();
        for (v, (r, t)) in rays.iter().zip(&targets).enumerate() {
            if t.len() != r.len() {
                return Err(Error::Shape(format!("view {v}: {} rays vs {} target pixels", r.len(), t.len())));
            }
            index.extend((0..r.len()).map(|i| (v, i)));
        }
        Ok(RayObjective { rays, targets, norm, index })
    }
}

impl Objective for RayObjective<'_> {
    fn len(&self) -> usize {
        self.index.len()
    }

    fn item(&self, model: &Model, i: usize, ev: &mut Evaluator, scale: f64, grad: Option<&mut [f64]>) -> f64 {
        let (v, r) = self.index[i];
        let rays = self.rays[v];
        let resid = geometry::ray_project(model, rays, r, self.norm, ev) - self.targets[v].data()[r];
        if let Some(g) = grad {
            let up = 2.0 * resid * scale * rays.sample_weight(r, self.norm);
            for k in 0..rays.samples {
                model.forward(&rays.sample(r, k), ev);
                model.backward(ev, up, g);
            }
        }
        resid * resid
    }
}

/// Rendered silhouette of a voxel occupancy grid.
pub fn render_voxels(vox: &VoxelLabels, rays: &RaySet) -> Tensor {
    let data = (0..rays.len())
        .map(|r| if (0..rays.samples).any(|k| vox.contains(rays.sample(r, k).q3())) { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![rays.w, rays.w], data).expect("w x w")
}

/// Everything the segmentation task derives from the scene.
pub struct SegScene {
    pub scene: SceneSpec,
    pub views: Vec<View>,
    pub rays: Vec<RaySet>,
    pub masks: Vec<Tensor>,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub hull: VoxelLabels,
}

impl SegScene {
    pub fn new(cfg: &Seg3dConfig) -> Result<SegScene> {
        let scene = SceneSpec::default_scene(cfg.scene_seed);
        SegScene::from_scene(scene, cfg)
    }

    pub fn from_scene(scene: SceneSpec, cfg: &Seg3dConfig) -> Result<SegScene> {
        let views = geometry::standard_views();
        if cfg.test_views.iter().any(|&v| v >= views.len()) {
            return Err(Error::Config(format!("test view ids must be below {}", views.len())));
        }
        let rays = views.iter().map(|v| RaySet::new(*v, cfg.w, cfg.samples)).collect::<Result<Vec<_>>>()?;
        let masks: Vec<Tensor> = rays.iter().map(|r| geometry::render_mask(&scene, r)).collect();
        let (test_ids, train_ids): (Vec<usize>, Vec<usize>) = (0..views.len()).partition(|v| cfg.test_views.contains(v));
        if train_ids.is_empty() {
            return Err(Error::Config("every view is held out".into()));
        }
        let train_masks: Vec<Tensor> = train_ids.iter().map(|&v| masks[v].clone()).collect();
        let train_views: Vec<View> = train_ids.iter().map(|&v| views[v]).collect();
        let hull = geometry::space_carve(&train_masks, &train_views, cfg.carve_res)?;
        Ok(SegScene { scene, views, rays, masks, train_ids, test_ids, hull })
    }

    pub fn hull_points(&self) -> Result<PointDataset> {
        let r = self.hull.resolution;
        let coords = (0..r * r * r).map(|i| Coord::new(&VoxelLabels::center(r, i))).collect();
        let targets = self.hull.occ.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        PointDataset::new(coords, targets)
    }

    /// Mean IOU of `render` over the given views.
    pub fn mean_iou(&self, ids: &[usize], mut render: impl FnMut(&RaySet) -> Result<Tensor>) -> Result<f64> {
        let mut total = 0.0;
        for &v in ids {
            total += iou(&render(&self.rays[v])?, &self.masks[v])?;
        }
        Ok(total / ids.len().max(1) as f64)
    }
}

/// One trained segmentation model with its scores.
#[derive(Clone, Debug)]
pub struct SegRun {
    pub row: SegRow,
    /// `(threshold, held-out IOU)` for each entry of the threshold sweep.
    pub sweep: Vec<(f64, f64)>,
    /// Thresholded predictions for the held-out views, in `test_ids` order.
    pub test_masks: Vec<Tensor>,
}

/// Threshold-sweep row: model, mode, threshold, held-out IOU.
pub const SWEEP_HEADER: [&str; 5] = ["task", "model", "mode", "threshold", "iou_test"];

/// Trains one segmentation model and scores it on held-out views.
pub fn seg3d_one(sc: &SegScene, variant: &Variant, sup: Supervision, cfg: &Seg3dConfig, seed: u64) -> Result<SegRun> {
    let start = std::time::Instant::now();
    let mut model = Model::build(&variant.spec, seed, seed.wrapping_add(1))?;
    let log = match sup {
        Supervision::Tomo2d => {
            let rays = sc.train_ids.iter().map(|&v| &sc.rays[v]).collect();
            let targets = sc.train_ids.iter().map(|&v| &sc.masks[v]).collect();
            let obj = RayObjective::new(rays, targets, cfg.ray_norm)?;
            fit_objective(&mut model, &obj, &cfg.train_tomo2d, None)?
        }
        Supervision::Carved3d => fit_objective(&mut model, &sc.hull_points()?, &cfg.train_carved3d, None)?,
    };
    let project = |r: &RaySet| match sup {
        Supervision::Tomo2d => geometry::project_density(&model, r, cfg.ray_norm),
        Supervision::Carved3d => geometry::project_max(&model, r),
    };
    let raw: Vec<Tensor> = sc.rays.iter().map(project).collect::<Result<_>>()?;
    let score = |ids: &[usize], thr: f64| -> Result<f64> {
        let mut total = 0.0;
        for &v in ids {
            total += iou(&binarize(&raw[v], thr), &sc.masks[v])?;
        }
        Ok(total / ids.len().max(1) as f64)
    };
    let sweep = cfg.threshold_sweep.iter().map(|&t| Ok((t, score(&sc.test_ids, t)?))).collect::<Result<_>>()?;
    let row = SegRow {
        task: format!("seg3d_{sup}"),
        model: variant.name.clone(),
        mode: variant.spec.mode,
        iou_test: score(&sc.test_ids, cfg.threshold)?,
        iou_train: score(&sc.train_ids, cfg.threshold)?,
        params: model.param_count(false),
        final_loss: log.final_loss().unwrap_or(f64::NAN),
        wall_ms: start.elapsed().as_millis() as u64,
    };
    let test_masks = sc.test_ids.iter().map(|&v| binarize(&raw[v], cfg.threshold)).collect();
    Ok(SegRun { row, sweep, test_masks })
}

/// Scores the carved hull itself as a model.
pub fn hull_row(sc: &SegScene) -> Result<SegRow> {
    Ok(SegRow {
        task: "seg3d_carved3d".into(),
        model: "hull".into(),
        mode: Mode::Convex,
        iou_test: sc.mean_iou(&sc.test_ids, |r| Ok(render_voxels(&sc.hull, r)))?,
        iou_train: sc.mean_iou(&sc.train_ids, |r| Ok(render_voxels(&sc.hull, r)))?,
        params: 0,
        final_loss: 0.0,
        wall_ms: 0,
    })
}

/// Trains the roster. For carved supervision the hull row comes first.
pub fn run_seg3d(cfg: &Seg3dConfig, sup: Supervision, seed: u64) -> Result<Vec<SegRun>> {
    let sc = SegScene::new(cfg)?;
    let mut runs = Vec::new();
    if sup == Supervision::Carved3d {
        runs.push(SegRun { row: hull_row(&sc)?, sweep: Vec::new(), test_masks: Vec::new() });
    }
    for (name, mode) in parse_roster(&cfg.roster)? {
        let v = cfg.sizes.variant(&name, mode)?;
        runs.push(seg3d_one(&sc, &v, sup, cfg, seed)?);
    }
    Ok(runs)
}

// ---------------------------------------------------------------- video

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoConfig {
    pub frames: usize,
    pub w: usize,
    pub video_seed: u64,
    pub roster: Vec<String>,
    pub sizes: RosterSizes,
    pub train: TrainConfig,
    pub threshold: f64,
}

impl Default for VideoConfig {
    fn default() -> Self {
        VideoConfig {
            frames: 90,
            w: 64,
            video_seed: 0,
            roster: ["concat:convex", "concat:semiconvex", "concat:nonconvex", "mult:nonconvex", "triplane_add:convex", "triplane_add:semiconvex", "triplane_add:nonconvex", "triplane_mul:nonconvex"]
                .map(String::from)
                .to_vec(),
            sizes: RosterSizes {
                concat_d: [16, 8, 4],
                concat_r: [32, 32, 16],
                mult_d: [8, 8, 4],
                mult_r: [32, 32, 16],
                triplane_d: 14,
                triplane_r: 32,
                hidden: 16,
            },
            train: TrainConfig { steps: 2000, batch_size: 2048, lr_grids: 1e-3, eval_every: 2000, ..TrainConfig::default() },
            threshold: 0.5,
        }
    }
}

/// Train points and test points of a video.
pub fn video_datasets(v: &Video) -> Result<(PointDataset, PointDataset)> {
    let (f, w) = (v.masks.shape()[0], v.masks.shape()[1]);
    let build = |frames: &[usize]| {
        let mut coords = Vec::with_capacity(frames.len() * w * w);
        let mut targets = Vec::with_capacity(frames.len() * w * w);
        for &t in frames {
            for i in 0..w {
                for j in 0..w {
                    coords.push(Video::coord(t, i, j, f, w));
                    targets.push(v.masks.data()[(t * w + i) * w + j]);
                }
            }
        }
        PointDataset::new(coords, targets)
    };
    Ok((build(&v.train)?, build(&v.test)?))
}

/// Pooled IOU of thresholded predictions over a point set.
pub fn points_iou(model: &Model, data: &PointDataset, thr: f64) -> f64 {
    let mut ev = model.evaluator();
    let pred: Vec<f64> = data.coords.iter().map(|q| if model.forward(q, &mut ev) >= thr { 1.0 } else { 0.0 }).collect();
    let (inter, union) = overlap_counts(&pred, &data.targets);
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Pooled IOU of predicting each test frame by the nearest earlier train
/// frame (the next one for frame 0).
pub fn nearest_frame_iou(v: &Video) -> f64 {
    let mut inter = 0;
    let mut union = 0;
    for &t in &v.test {
        let src = v.train.iter().rev().find(|&&s| s < t).or_else(|| v.train.first()).copied().unwrap_or(t);
        let (i, u) = overlap_counts(v.frame(src).data(), v.frame(t).data());
        inter += i;
        union += u;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn video_one(train: &PointDataset, test: &PointDataset, variant: &Variant, cfg: &TrainConfig, thr: f64, seed: u64, gate_seed: u64) -> Result<(SegRow, Model, MetricLog)> {
    let start = std::time::Instant::now();
    let mut model = Model::build(&variant.spec, seed, gate_seed)?;
    let log = fit_objective(&mut model, train, cfg, None)?;
    let row = SegRow {
        task: "video".into(),
        model: variant.name.clone(),
        mode: variant.spec.mode,
        iou_test: points_iou(&model, test, thr),
        iou_train: points_iou(&model, train, thr),
        params: model.param_count(false),
        final_loss: log.final_loss().unwrap_or(f64::NAN),
        wall_ms: start.elapsed().as_millis() as u64,
    };
    Ok((row, model, log))
}

pub fn run_video(cfg: &VideoConfig, seed: u64) -> Result<Vec<SegRow>> {
    let video = geometry::make_video(&VideoSpec::default_video(cfg.frames, cfg.w, cfg.video_seed))?;
    let (train, test) = video_datasets(&video)?;
    let mut rows = vec![SegRow {
        task: "video".into(),
        model: "nearest_frame".into(),
        mode: Mode::Convex,
        iou_test: nearest_frame_iou(&video),
        iou_train: 1.0,
        params: 0,
        final_loss: 0.0,
        wall_ms: 0,
    }];
    for (name, mode) in parse_roster(&cfg.roster)? {
        let v = cfg.sizes.variant(&name, mode)?;
        rows.push(video_one(&train, &test, &v, &cfg.train, cfg.threshold, seed, seed.wrapping_add(1))?.0);
    }
    Ok(rows)
}

// ---------------------------------------------------------------- stability

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityConfig {
    pub video: VideoConfig,
    pub seeds: Vec<u64>,
    pub modes: Vec<Mode>,
    pub d: [usize; 3],
    pub r: [usize; 3],
    pub hidden: usize,
    /// Seed of the frozen gates, shared by every run.
    pub gate_seed: u64,
    pub train: TrainConfig,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        StabilityConfig {
            video: VideoConfig::default(),
            seeds: vec![0, 1, 2],
            modes: Mode::ALL.to_vec(),
            d: [4, 4, 2],
            r: [32, 32, 16],
            hidden: 4,
            gate_seed: 1234,
            train: TrainConfig { steps: 4000, batch_size: 2048, lr_grids: 3e-3, eval_every: 100, ..TrainConfig::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityRun {
    pub mode: Mode,
    pub seed: u64,
    pub params: usize,
    pub log: MetricLog,
}

pub const STABILITY_HEADER: [&str; 6] = ["mode", "seed", "step", "loss", "test_iou", "wall_ms"];

pub fn stability_spec(cfg: &StabilityConfig, mode: Mode) -> ModelSpec {
    ModelSpec::volume(presets::CONCAT, cfg.d, cfg.r, mode, cfg.hidden)
}

pub fn run_stability(cfg: &StabilityConfig) -> Result<Vec<StabilityRun>> {
    let v = &cfg.video;
    let video = geometry::make_video(&VideoSpec::default_video(v.frames, v.w, v.video_seed))?;
    let (train, test) = video_datasets(&video)?;
    let mut runs = Vec::new();
    for &mode in &cfg.modes {
        for &seed in &cfg.seeds {
            let spec = stability_spec(cfg, mode);
            let mut model = Model::build(&spec, seed, cfg.gate_seed)?;
            let thr = v.threshold;
            let mut metric = |m: &Model| points_iou(m, &test, thr);
            let log = fit_objective(&mut model, &train, &TrainConfig { seed, ..cfg.train.clone() }, Some(&mut metric))?;
            runs.push(StabilityRun { mode, seed, params: model.param_count(false), log });
        }
    }
    Ok(runs)
}

/// Largest relative gap between final losses: `(max - min) / min`.
pub fn relative_spread(values: &[f64]) -> f64 {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo <= 0.0 {
        if hi <= 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (hi - lo) / lo
    }
}

// ---------------------------------------------------------------- manifest

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: u64,
    pub param_counts: Vec<(String, usize)>,
    pub git_describe: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub csv_schemas: Vec<(String, Vec<String>)>,
}

pub fn unix_ms() -> u128 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// `git describe --always --dirty`, or `unknown` outside a repository.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

pub fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(m)?)?;
    Ok(())
}

/// Full-data loss of a model on a point set.
pub fn dataset_loss(model: &Model, data: &PointDataset, threads: usize) -> f64 {
    objective_loss(model, data, None, false, threads).0
}
