// SPDX-License-Identifier: Apache-2.0

//! Synthetic scenes and videos, orthographic rays through the unit cube,
//! silhouette rendering and space carving.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::Coord;
use crate::model::{Evaluator, Model};
use crate::numerics::{SeededRng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    Sphere { center: [f64; 3], radius: f64 },
    Box { min: [f64; 3], max: [f64; 3] },
}

impl Primitive {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Primitive::Sphere { center, radius } => {
                let d2: f64 = (0..3).map(|i| (p[i] - center[i]).powi(2)).sum();
                d2 <= radius * radius
            }
            Primitive::Box { min, max } => (0..3).all(|i| p[i] >= min[i] && p[i] <= max[i]),
        }
    }

    fn inside_unit_cube(&self) -> bool {
        match self {
            Primitive::Sphere { center, radius } => *radius > 0.0 && (0..3).all(|i| center[i] - radius >= 0.0 && center[i] + radius <= 1.0),
            Primitive::Box { min, max } => (0..3).all(|i| min[i] >= 0.0 && max[i] <= 1.0 && min[i] <= max[i]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(primitives: Vec<Primitive>, seed: u64) -> Result<Self> {
        if let Some(p) = primitives.iter().find(|p| !p.inside_unit_cube()) {
            return Err(Error::Config(format!("primitive {p:?} leaves the unit cube")));
        }
        Ok(SceneSpec { primitives, seed })
    }

    pub fn empty() -> Self {
        SceneSpec { primitives: Vec::new(), seed: 0 }
    }

    /// Three spheres and one box placed from `seed`.
    pub fn default_scene(seed: u64) -> Self {
        let mut rng = SeededRng::substream(seed, 11);
        let mut prims = Vec::new();
        for _ in 0..3 {
            let radius = rng.uniform(0.12, 0.2);
            let center = [0; 3].map(|_| rng.uniform(0.25 + 0.05, 0.75 - 0.05));
            prims.push(Primitive::Sphere { center, radius });
        }
        let half = [0; 3].map(|_| rng.uniform(0.08, 0.16));
        let c = [0; 3].map(|_| rng.uniform(0.3, 0.7));
        prims.push(Primitive::Box { min: [0, 1, 2].map(|i| c[i] - half[i]), max: [0, 1, 2].map(|i| c[i] + half[i]) });
        SceneSpec::new(prims, seed).expect("generated inside the cube")
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.primitives.iter().any(|q| q.contains(p))
    }
}

/// An orthographic camera looking at the cube centre.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct View {
    pub id: usize,
    pub dir: [f64; 3],
    /// Image column axis.
    pub u: [f64; 3],
    /// Image row axis, pointing up (row 0 is the top).
    pub v: [f64; 3],
    pub half_u: f64,
    pub half_v: f64,
}

impl View {
    /// Horizontal view at azimuth `phi` (radians) around the third axis.
    pub fn azimuth(id: usize, phi: f64) -> View {
        let (s, c) = phi.sin_cos();
        View { id, dir: [c, s, 0.0], u: [-s, c, 0.0], v: [0.0, 0.0, 1.0], half_u: 0.5 * (s.abs() + c.abs()), half_v: 0.5 }
    }

    pub fn top(id: usize) -> View {
        View { id, dir: [0.0, 0.0, -1.0], u: [1.0, 0.0, 0.0], v: [0.0, 1.0, 0.0], half_u: 0.5, half_v: 0.5 }
    }

    /// Image-plane coordinates of the centre of pixel `(row, col)`.
    pub fn pixel_plane(&self, row: usize, col: usize, w: usize) -> (f64, f64) {
        let su = -self.half_u + (col as f64 + 0.5) * 2.0 * self.half_u / w as f64;
        let sv = self.half_v - (row as f64 + 0.5) * 2.0 * self.half_v / w as f64;
        (su, sv)
    }

    /// Projection of `p` in continuous pixel units `(row, col)`; pixel
    /// `(i, j)` spans `[i, i+1) x [j, j+1)`.
    pub fn project_continuous(&self, p: [f64; 3], w: usize) -> (f64, f64) {
        let d = [p[0] - 0.5, p[1] - 0.5, p[2] - 0.5];
        let su: f64 = (0..3).map(|i| d[i] * self.u[i]).sum();
        let sv: f64 = (0..3).map(|i| d[i] * self.v[i]).sum();
        let col = (su + self.half_u) * w as f64 / (2.0 * self.half_u);
        let row = (self.half_v - sv) * w as f64 / (2.0 * self.half_v);
        (row, col)
    }

    /// Pixel containing the projection of `p`, clamped to the image.
    pub fn project(&self, p: [f64; 3], w: usize) -> (usize, usize) {
        let (row, col) = self.project_continuous(p, w);
        let clamp = |x: f64| x.floor().max(0.0).min((w - 1) as f64) as usize;
        (clamp(row), clamp(col))
    }
}

/// Eight azimuthal views 45 degrees apart (ids 0..8) and a top view (id 8).
pub fn standard_views() -> Vec<View> {
    let mut v: Vec<View> = (0..8).map(|i| View::azimuth(i, i as f64 * std::f64::consts::FRAC_PI_4)).collect();
    v.push(View::top(8));
    v
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub t0: f64,
    pub t1: f64,
}

/// How a ray's samples are reduced to one pixel value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RayNorm {
    /// Plain mean of the samples on the ray's chord through the cube.
    #[default]
    ChordMean,
    /// Line integral with the cube side as unit length; equals the chord
    /// mean on axis-aligned views.
    LineIntegral,
}

/// One ray per pixel of a `w x w` image, each sampled at `samples` segment
/// midpoints between its entry into and exit from the unit cube.
#[derive(Clone, Debug)]
pub struct RaySet {
    pub view: View,
    pub w: usize,
    pub samples: usize,
    pub rays: Vec<Ray>,
}

impl RaySet {
    pub fn new(view: View, w: usize, samples: usize) -> Result<RaySet> {
        if w == 0 || samples < 2 {
            return Err(Error::Config("rays need w >= 1 and at least 2 samples".into()));
        }
        let mut rays = Vec::with_capacity(w * w);
        for row in 0..w {
            for col in 0..w {
                let (su, sv) = view.pixel_plane(row, col, w);
                let origin = [0, 1, 2].map(|i| 0.5 + su * view.u[i] + sv * view.v[i]);
                let (t0, t1) = slab(origin, view.dir).unwrap_or((0.0, 0.0));
                rays.push(Ray { origin, t0, t1 });
            }
        }
        Ok(RaySet { view, w, samples, rays })
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    /// Weight of each sample in the ray's projected value: `1/T` times the
    /// chord length relative to the cube side under [`RayNorm::LineIntegral`].
    pub fn sample_weight(&self, ray: usize, norm: RayNorm) -> f64 {
        match norm {
            RayNorm::ChordMean => 1.0 / self.samples as f64,
            RayNorm::LineIntegral => (self.rays[ray].t1 - self.rays[ray].t0) / self.samples as f64,
        }
    }

    pub fn sample(&self, ray: usize, k: usize) -> Coord {
        let r = &self.rays[ray];
        let t = r.t0 + (k as f64 + 0.5) / self.samples as f64 * (r.t1 - r.t0);
        let p = [0, 1, 2].map(|i| r.origin[i] + t * self.view.dir[i]);
        Coord::clamped(&p).0
    }
}

/// Entry and exit parameters of the line `o + t d` through `[0,1]^3`.
fn slab(o: [f64; 3], d: [f64; 3]) -> Option<(f64, f64)> {
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..3 {
        if d[i].abs() < 1e-15 {
            if o[i] < 0.0 || o[i] > 1.0 {
                return None;
            }
        } else {
            let (a, b) = ((0.0 - o[i]) / d[i], (1.0 - o[i]) / d[i]);
            lo = lo.max(a.min(b));
            hi = hi.min(a.max(b));
        }
    }
    (hi >= lo).then_some((lo, hi))
}

/// Pixel is 1 when any ray sample lies inside the scene.
pub fn render_mask(scene: &SceneSpec, rays: &RaySet) -> Tensor {
    let data = (0..rays.len())
        .map(|r| {
            let hit = (0..rays.samples).any(|k| scene.contains(rays.sample(r, k).q3()));
            if hit { 1.0 } else { 0.0 }
        })
        .collect();
    Tensor::new(vec![rays.w, rays.w], data).expect("w x w")
}

/// Mean predicted density along one ray.
pub fn ray_mean(model: &Model, rays: &RaySet, r: usize, ev: &mut Evaluator) -> f64 {
    ray_project(model, rays, r, RayNorm::ChordMean, ev)
}

/// Projected density of one ray under `norm`.
pub fn ray_project(model: &Model, rays: &RaySet, r: usize, norm: RayNorm, ev: &mut Evaluator) -> f64 {
    let sum: f64 = (0..rays.samples).map(|k| model.forward(&rays.sample(r, k), ev)).sum();
    sum * rays.sample_weight(r, norm)
}

/// Image of per-ray mean densities.
pub fn project_mean_density(model: &Model, rays: &RaySet) -> Result<Tensor> {
    project_density(model, rays, RayNorm::ChordMean)
}

/// Image of per-ray projected densities under `norm`.
pub fn project_density(model: &Model, rays: &RaySet, norm: RayNorm) -> Result<Tensor> {
    if model.dims() != 3 {
        return Err(Error::Model("projection needs a 3D model".into()));
    }
    let mut ev = model.evaluator();
    let data = (0..rays.len()).map(|r| ray_project(model, rays, r, norm, &mut ev)).collect();
    Tensor::new(vec![rays.w, rays.w], data)
}

/// Image of per-ray maximum predictions.
pub fn project_max(model: &Model, rays: &RaySet) -> Result<Tensor> {
    if model.dims() != 3 {
        return Err(Error::Model("projection needs a 3D model".into()));
    }
    let mut ev = model.evaluator();
    let data = (0..rays.len())
        .map(|r| (0..rays.samples).map(|k| model.forward(&rays.sample(r, k), &mut ev)).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Tensor::new(vec![rays.w, rays.w], data)
}

/// Binary occupancy on an `R^3` grid, first axis slowest.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelLabels {
    pub resolution: usize,
    pub occ: Vec<bool>,
}

impl VoxelLabels {
    pub fn center(r: usize, idx: usize) -> [f64; 3] {
        let (i, j, k) = (idx / (r * r), (idx / r) % r, idx % r);
        [i, j, k].map(|a| (a as f64 + 0.5) / r as f64)
    }

    /// Voxels whose centre lies inside the scene.
    pub fn from_scene(scene: &SceneSpec, r: usize) -> VoxelLabels {
        let occ = (0..r * r * r).map(|i| scene.contains(VoxelLabels::center(r, i))).collect();
        VoxelLabels { resolution: r, occ }
    }

    pub fn count(&self) -> usize {
        self.occ.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &VoxelLabels) -> bool {
        self.occ.len() == other.occ.len() && self.occ.iter().zip(&other.occ).all(|(a, b)| !a || *b)
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let r = self.resolution;
        let idx = p.map(|x| ((x * r as f64).floor().max(0.0) as usize).min(r - 1));
        self.occ[(idx[0] * r + idx[1]) * r + idx[2]]
    }
}

/// A voxel counts as covered by a mask when a set pixel's square lies within
/// this many pixel widths of the voxel centre's projection. Masks are sampled
/// at pixel centres, so a point just inside a silhouette edge can land in a
/// pixel whose centre ray misses the object.
pub const CARVE_TOLERANCE_PX: f64 = 0.25;

/// Visual hull: a voxel survives when its centre projects into the mask of
/// every view, up to [`CARVE_TOLERANCE_PX`].
pub fn space_carve(masks: &[Tensor], views: &[View], r: usize) -> Result<VoxelLabels> {
    space_carve_with(masks, views, r, CARVE_TOLERANCE_PX)
}

pub fn space_carve_with(masks: &[Tensor], views: &[View], r: usize, tol_px: f64) -> Result<VoxelLabels> {
    if masks.is_empty() || masks.len() != views.len() {
        return Err(Error::Shape(format!("{} masks for {} views", masks.len(), views.len())));
    }
    if r == 0 || !(tol_px >= 0.0) {
        return Err(Error::Config("carving needs a positive resolution and nonnegative tolerance".into()));
    }
    let w = masks[0].rows();
    if masks.iter().any(|m| m.shape() != [w, w]) {
        return Err(Error::Shape("masks must be square and equal-sized".into()));
    }
    let reach = tol_px.ceil() as isize;
    let covered = |m: &Tensor, y: f64, x: f64| {
        let (row, col) = (y.floor() as isize, x.floor() as isize);
        for i in row - reach..=row + reach {
            for j in col - reach..=col + reach {
                if i < 0 || j < 0 || i >= w as isize || j >= w as isize || m.at(i as usize, j as usize) < 0.5 {
                    continue;
                }
                let dy = (i as f64 - y).max(y - (i + 1) as f64).max(0.0);
                let dx = (j as f64 - x).max(x - (j + 1) as f64).max(0.0);
                if dx * dx + dy * dy <= tol_px * tol_px {
                    return true;
                }
            }
        }
        false
    };
    let occ = (0..r * r * r)
        .map(|idx| {
            let p = VoxelLabels::center(r, idx);
            views.iter().zip(masks).all(|(v, m)| {
                let (y, x) = v.project_continuous(p, w);
                covered(m, y, x)
            })
        })
        .collect();
    Ok(VoxelLabels { resolution: r, occ })
}

/// A moving 2D primitive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Mover {
    /// Disk on `center + amp * sin(2 pi (freq * tau) + phase)` per axis.
    Disk { radius: f64, center: [f64; 2], amp: [f64; 2], freq: [f64; 2], phase: [f64; 2] },
    /// Rectangle whose first-axis centre oscillates by `amp` and whose
    /// orientation swings by up to `swing` radians, both at `freq`.
    Bar { half: [f64; 2], center: [f64; 2], amp: f64, freq: f64, swing: f64 },
}

impl Mover {
    /// Normalised time `tau` in [0, 1).
    pub fn contains(&self, p: [f64; 2], tau: f64) -> bool {
        use std::f64::consts::TAU;
        match *self {
            Mover::Disk { radius, center, amp, freq, phase } => {
                let c = [0, 1].map(|i| center[i] + amp[i] * (TAU * freq[i] * tau + phase[i]).sin());
                (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) <= radius * radius
            }
            Mover::Bar { half, center, amp, freq, swing } => {
                let s = (TAU * freq * tau).sin();
                let (dx, dy) = (p[0] - center[0] - amp * s, p[1] - center[1]);
                let (sin, cos) = (swing * s).sin_cos();
                (cos * dx + sin * dy).abs() <= half[0] && (cos * dy - sin * dx).abs() <= half[1]
            }
        }
    }

    pub fn disk_center(&self, tau: f64) -> Option<[f64; 2]> {
        use std::f64::consts::TAU;
        match *self {
            Mover::Disk { center, amp, freq, phase, .. } => {
                Some([0, 1].map(|i| center[i] + amp[i] * (TAU * freq[i] * tau + phase[i]).sin()))
            }
            Mover::Bar { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoSpec {
    pub frames: usize,
    pub w: usize,
    pub movers: Vec<Mover>,
    pub seed: u64,
}

impl VideoSpec {
    /// Disk on a Lissajous path plus an oscillating bar; `seed` jitters the
    /// phases.
    pub fn default_video(frames: usize, w: usize, seed: u64) -> VideoSpec {
        let mut rng = SeededRng::substream(seed, 13);
        let phase = [rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)];
        VideoSpec {
            frames,
            w,
            movers: vec![
                Mover::Disk { radius: 0.14, center: [0.5, 0.5], amp: [0.28, 0.14], freq: [1.0, 2.0], phase },
                Mover::Bar { half: [0.06, 0.3], center: [0.5, 0.5], amp: 0.3, freq: 1.0, swing: 0.0 },
            ],
            seed,
        }
    }

    pub fn static_video(frames: usize, w: usize) -> VideoSpec {
        VideoSpec {
            frames,
            w,
            movers: vec![Mover::Disk { radius: 0.25, center: [0.45, 0.55], amp: [0.0, 0.0], freq: [0.0, 0.0], phase: [0.0, 0.0] }],
            seed: 0,
        }
    }
}

/// Binary video plus its split: frames with index divisible by 3 are test.
#[derive(Clone, Debug)]
pub struct Video {
    /// `frames x w x w`, pixel `(t, i, j)`.
    pub masks: Tensor,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Video {
    pub fn frame(&self, t: usize) -> Tensor {
        let w = self.masks.shape()[1];
        Tensor::new(vec![w, w], self.masks.data()[t * w * w..(t + 1) * w * w].to_vec()).expect("frame")
    }

    /// Model coordinate of pixel `(i, j)` in frame `t`.
    pub fn coord(t: usize, i: usize, j: usize, frames: usize, w: usize) -> Coord {
        let tau = crate::model::node_coord(t, frames);
        Coord::new(&[(i as f64 + 0.5) / w as f64, (j as f64 + 0.5) / w as f64, tau])
    }
}

pub fn make_video(spec: &VideoSpec) -> Result<Video> {
    if spec.frames < 3 || spec.w == 0 {
        return Err(Error::Config("videos need at least 3 frames and a positive width".into()));
    }
    let (f, w) = (spec.frames, spec.w);
    let mut data = Vec::with_capacity(f * w * w);
    for t in 0..f {
        let tau = t as f64 / f as f64;
        for i in 0..w {
            for j in 0..w {
                let p = [(i as f64 + 0.5) / w as f64, (j as f64 + 0.5) / w as f64];
                data.push(if spec.movers.iter().any(|m| m.contains(p, tau)) { 1.0 } else { 0.0 });
            }
        }
    }
    let (test, train): (Vec<usize>, Vec<usize>) = (0..f).partition(|t| t % 3 == 0);
    Ok(Video { masks: Tensor::new(vec![f, w, w], data)?, train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_full_scenes() {
        let rays = RaySet::new(View::azimuth(0, 0.0), 16, 32).unwrap();
        assert_eq!(render_mask(&SceneSpec::empty(), &rays).sum(), 0.0);
        let full = SceneSpec::new(vec![Primitive::Box { min: [0.0; 3], max: [1.0; 3] }], 0).unwrap();
        for v in standard_views() {
            let rays = RaySet::new(v, 16, 32).unwrap();
            assert_eq!(render_mask(&full, &rays).sum(), 256.0, "view {}", v.id);
        }
    }

    #[test]
    fn sphere_silhouette_is_a_disk() {
        let scene = SceneSpec::new(vec![Primitive::Sphere { center: [0.5; 3], radius: 0.3 }], 0).unwrap();
        let w = 64;
        let rays = RaySet::new(View::azimuth(0, 0.0), w, 128).unwrap();
        let mask = render_mask(&scene, &rays);
        let mut mismatched = 0;
        for i in 0..w {
            for j in 0..w {
                let (x, y) = ((j as f64 + 0.5) / w as f64 - 0.5, (i as f64 + 0.5) / w as f64 - 0.5);
                let d = (x * x + y * y).sqrt();
                let inside = d <= 0.3;
                if (mask.at(i, j) == 1.0) != inside {
                    // Only boundary pixels may disagree.
                    assert!((d - 0.3).abs() < 1.5 / w as f64, "pixel ({i},{j}) d={d}");
                    mismatched += 1;
                }
            }
        }
        assert!(mismatched < 2 * 64);
    }

    #[test]
    fn carve_extremes() {
        let views = standard_views();
        let full: Vec<Tensor> = views.iter().map(|_| Tensor::filled(&[8, 8], 1.0)).collect();
        assert_eq!(space_carve(&full, &views, 8).unwrap().count(), 512);
        let mut one_empty = full.clone();
        one_empty[3] = Tensor::zeros(&[8, 8]);
        assert_eq!(space_carve(&one_empty, &views, 8).unwrap().count(), 0);
    }

    #[test]
    fn video_split_and_static() {
        let v = make_video(&VideoSpec::static_video(9, 16)).unwrap();
        assert_eq!(v.test, vec![0, 3, 6]);
        assert_eq!(v.train, vec![1, 2, 4, 5, 7, 8]);
        let f0 = v.frame(0);
        for t in 1..9 {
            assert_eq!(v.frame(t), f0);
        }
    }
}
