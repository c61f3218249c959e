//! Procedural multi-view datasets with ray-cast ground truth, and the
//! GDGS-versus-3DGS benchmark run on them.

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldImage;
use crate::loss::psnr;
use crate::scene::{logit, Aabb, Camera, GaussianParticle, Scene};
use crate::splat::{active_pixel_set, SplatPass};
use crate::train::{train, Mode, Renderer, TrainConfig, TrainView};

/// Surface color as a function of 2D surface coordinates (world units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Albedo {
    Solid { color: [f64; 3] },
    Checker { cell: f64, a: [f64; 3], b: [f64; 3] },
    /// Square cells, each colored from the palette by a seeded hash.
    Cells { cell: f64, palette: Vec<[f64; 3]> },
    /// Smooth sinusoidal texture between two colors.
    Sine { period: f64, a: [f64; 3], b: [f64; 3] },
}

fn mix(a: &[f64; 3], b: &[f64; 3], w: f64) -> [f64; 3] {
    [0, 1, 2].map(|k| a[k] + (b[k] - a[k]) * w)
}

fn cell_hash(seed: u64, i: i64, j: i64) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [i as u64, j as u64] {
        h ^= v.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = h.rotate_left(27).wrapping_mul(0x94d0_49bb_1331_11eb);
    }
    h ^ (h >> 31)
}

impl Albedo {
    fn eval(&self, s: f64, t: f64, seed: u64) -> [f64; 3] {
        match self {
            Albedo::Solid { color } => *color,
            Albedo::Checker { cell, a, b } => {
                let parity = ((s / cell).floor() as i64 + (t / cell).floor() as i64).rem_euclid(2);
                if parity == 0 {
                    *a
                } else {
                    *b
                }
            }
            Albedo::Cells { cell, palette } => {
                let h = cell_hash(seed, (s / cell).floor() as i64, (t / cell).floor() as i64);
                palette[(h % palette.len() as u64) as usize]
            }
            Albedo::Sine { period, a, b } => {
                let w = 0.5 + 0.5 * (2.0 * PI * s / period).sin() * (2.0 * PI * t / period).sin();
                mix(a, b, w)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Albedo::Solid { .. } => true,
            Albedo::Checker { cell, .. } => *cell > 0.0,
            Albedo::Cells { cell, palette } => *cell > 0.0 && !palette.is_empty(),
            Albedo::Sine { period, .. } => *period > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid albedo {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Primitive {
    /// Rectangle centered at `center`, spanned by `u_axis` and `normal × u_axis`.
    Plane {
        center: [f64; 3],
        normal: [f64; 3],
        u_axis: [f64; 3],
        half_extent: [f64; 2],
        albedo: Albedo,
    },
    /// Surface coordinates are longitude and latitude arc lengths.
    Sphere { center: [f64; 3], radius: f64, albedo: Albedo },
}

struct Hit {
    t: f64,
    color: [f64; 3],
}

impl Primitive {
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>, seed: u64) -> Option<Hit> {
        const NEAR: f64 = 1e-9;
        match self {
            Primitive::Plane {
                center,
                normal,
                u_axis,
                half_extent,
                albedo,
            } => {
                let n = Vector3::from(*normal).normalize();
                let denom = d.dot(&n);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let c = Vector3::from(*center);
                let t = (c - o).dot(&n) / denom;
                if t <= NEAR {
                    return None;
                }
                let u = {
                    let u = Vector3::from(*u_axis);
                    (u - n * u.dot(&n)).normalize()
                };
                let v = n.cross(&u);
                let rel = o + d * t - c;
                let (s, r) = (rel.dot(&u), rel.dot(&v));
                if s.abs() > half_extent[0] || r.abs() > half_extent[1] {
                    return None;
                }
                Some(Hit {
                    t,
                    color: albedo.eval(s, r, seed),
                })
            }
            Primitive::Sphere { center, radius, albedo } => {
                let oc = o - Vector3::from(*center);
                let b = oc.dot(d);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = if -b - sq > NEAR { -b - sq } else { -b + sq };
                if t <= NEAR {
                    return None;
                }
                let p = (oc + d * t) / *radius;
                let lon = p.y.atan2(p.x);
                let lat = p.z.clamp(-1.0, 1.0).asin();
                Some(Hit {
                    t,
                    color: albedo.eval(lon * radius, lat * radius, seed),
                })
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Primitive::Plane {
                normal,
                u_axis,
                half_extent,
                albedo,
                ..
            } => {
                let n = Vector3::from(*normal);
                let u = Vector3::from(*u_axis);
                if n.norm() < 1e-12 || n.cross(&u).norm() < 1e-12 * n.norm() * u.norm().max(1e-300) {
                    return Err(Error::Config("plane normal and u_axis must be non-zero and not parallel".into()));
                }
                if !(half_extent[0] > 0.0 && half_extent[1] > 0.0) {
                    return Err(Error::Config("plane half_extent must be positive".into()));
                }
                albedo.validate()
            }
            Primitive::Sphere { radius, albedo, .. } => {
                if !(*radius > 0.0) {
                    return Err(Error::Config("sphere radius must be positive".into()));
                }
                albedo.validate()
            }
        }
    }

    fn bounds(&self) -> Aabb {
        match self {
            Primitive::Plane {
                center,
                normal,
                u_axis,
                half_extent,
                ..
            } => {
                let n = Vector3::from(*normal).normalize();
                let u = Vector3::from(*u_axis);
                let u = (u - n * u.dot(&n)).normalize();
                let v = n.cross(&u);
                let mut lo = [f64::INFINITY; 3];
                let mut hi = [f64::NEG_INFINITY; 3];
                for (a, b) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
                    let p = Vector3::from(*center) + u * (a * half_extent[0]) + v * (b * half_extent[1]);
                    for k in 0..3 {
                        lo[k] = lo[k].min(p[k]);
                        hi[k] = hi[k].max(p[k]);
                    }
                }
                Aabb::new(lo, hi)
            }
            Primitive::Sphere { center, radius, .. } => {
                Aabb::new(center.map(|c| c - radius), center.map(|c| c + radius))
            }
        }
    }
}

/// Cameras evenly spaced on a horizontal circle (world +z is up), all
/// looking at `target`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRing {
    pub count: usize,
    pub radius: f64,
    /// Height of the ring above `target`.
    pub height: f64,
    pub target: [f64; 3],
    /// Focal length in pixels.
    pub focal: f64,
    /// Angle of the first camera, radians.
    #[serde(default)]
    pub phase: f64,
    /// Angular span covered by the cameras, radians. A full circle spaces
    /// them evenly; a partial arc puts the first and last at its ends.
    #[serde(default = "full_circle")]
    pub arc: f64,
}

fn full_circle() -> f64 {
    2.0 * PI
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub primitives: Vec<Primitive>,
    /// Flat light: radiance is albedo times this factor.
    pub light: f64,
    pub background: [f64; 3],
    pub ring: CameraRing,
    pub width: usize,
    pub height: usize,
    /// Rays per pixel along each axis.
    pub supersample: usize,
    pub seed: u64,
    /// Region of interest used as the scene bounds; defaults to the box
    /// around every primitive.
    #[serde(default)]
    pub region: Option<Aabb>,
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ring.count < 2 {
            return Err(Error::Config(format!("need at least 2 cameras, got {}", self.ring.count)));
        }
        if self.width < 32 || self.height < 32 {
            return Err(Error::Config(format!(
                "image size must be at least 32x32, got {}x{}",
                self.width, self.height
            )));
        }
        if self.supersample == 0 {
            return Err(Error::Config("supersample must be positive".into()));
        }
        if !(self.light.is_finite() && self.light >= 0.0) || !(self.ring.focal > 0.0) {
            return Err(Error::Config("light must be >= 0 and focal > 0".into()));
        }
        for p in &self.primitives {
            p.validate()?;
        }
        Ok(())
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        let r = &self.ring;
        (0..r.count)
            .map(|i| {
                let frac = if r.arc >= 2.0 * PI - 1e-12 {
                    i as f64 / r.count as f64
                } else {
                    i as f64 / (r.count - 1) as f64
                };
                let phi = r.phase + r.arc * frac;
                let eye = [
                    r.target[0] + r.radius * phi.cos(),
                    r.target[1] + r.radius * phi.sin(),
                    r.target[2] + r.height,
                ];
                Camera::look_at(eye, r.target, [0.0, 0.0, 1.0], r.focal, self.width, self.height)
            })
            .collect()
    }

    /// The region of interest if set, else the axis-aligned box around every
    /// primitive (a unit box at `target` when there are none).
    pub fn bounds(&self) -> Aabb {
        if let Some(r) = self.region {
            return r;
        }
        let mut it = self.primitives.iter().map(Primitive::bounds);
        match it.next() {
            None => Aabb::new(self.ring.target.map(|c| c - 1.0), self.ring.target.map(|c| c + 1.0)),
            Some(first) => it.fold(first, |acc, b| {
                Aabb::new(
                    [0, 1, 2].map(|k| acc.min[k].min(b.min[k])),
                    [0, 1, 2].map(|k| acc.max[k].max(b.max[k])),
                )
            }),
        }
    }

    fn trace(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> [f64; 3] {
        let mut best: Option<Hit> = None;
        for p in &self.primitives {
            if let Some(h) = p.intersect(o, d, self.seed) {
                if best.as_ref().is_none_or(|b| h.t < b.t) {
                    best = Some(h);
                }
            }
        }
        match best {
            Some(h) => h.color.map(|c| (c * self.light).clamp(0.0, 1.0)),
            None => self.background,
        }
    }

    /// Surface points seen by the given cameras, with their radiance: rays
    /// through uniformly random pixel positions of uniformly chosen cameras,
    /// keeping only hits inside the scene bounds. Stands in for the sparse
    /// reconstruction a real capture pipeline would provide.
    pub fn seed_points(&self, cameras: &[Camera], count: usize, seed: u64) -> Vec<SeedPoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(count);
        if cameras.is_empty() || self.primitives.is_empty() {
            return out;
        }
        let bounds = self.bounds();
        let mut attempts = 0;
        while out.len() < count && attempts < count * 50 {
            attempts += 1;
            let cam = &cameras[rng.random_range(0..cameras.len())];
            let u = rng.random_range(-0.5..cam.width as f64 - 0.5);
            let v = rng.random_range(-0.5..cam.height as f64 - 0.5);
            let dir = (cam.rotation().transpose() * Vector3::new((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0))
                .normalize();
            let o = cam.position();
            let best = self
                .primitives
                .iter()
                .filter_map(|p| p.intersect(&o, &dir, self.seed))
                .min_by(|a, b| a.t.total_cmp(&b.t));
            if let Some(h) = best {
                let p = o + dir * h.t;
                if !bounds.contains_inflated(&[p.x, p.y, p.z], 0.0) {
                    continue;
                }
                out.push(SeedPoint {
                    position: [p.x, p.y, p.z],
                    color: h.color.map(|c| (c * self.light).clamp(0.0, 1.0)),
                    footprint: h.t / cam.fx,
                });
            }
        }
        out
    }

    /// Ray-cast one view. Each pixel averages a regular grid of
    /// `supersample²` rays.
    pub fn render_view(&self, cam: &Camera) -> FieldImage {
        let (w, h, ss) = (self.width, self.height, self.supersample);
        let rot_t = cam.rotation().transpose();
        let origin = cam.position();
        let rows: Vec<Vec<[f64; 3]>> = (0..h)
            .into_par_iter()
            .map(|y| {
                (0..w)
                    .map(|x| {
                        let mut acc = [0.0; 3];
                        for sy in 0..ss {
                            for sx in 0..ss {
                                let u = x as f64 + (sx as f64 + 0.5) / ss as f64 - 0.5;
                                let v = y as f64 + (sy as f64 + 0.5) / ss as f64 - 0.5;
                                let dc = Vector3::new((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0);
                                let d = (rot_t * dc).normalize();
                                let c = self.trace(&origin, &d);
                                for k in 0..3 {
                                    acc[k] += c[k];
                                }
                            }
                        }
                        acc.map(|a| a / (ss * ss) as f64)
                    })
                    .collect()
            })
            .collect();
        FieldImage::from_fn(w, h, 3, |x, y, c| rows[y][x][c])
    }

    /// Cameras and ground-truth images for every ring position.
    pub fn generate(&self) -> Result<(Vec<Camera>, Vec<FieldImage>)> {
        self.validate()?;
        let cameras = self.cameras()?;
        let images = cameras.iter().map(|c| self.render_view(c)).collect();
        Ok((cameras, images))
    }

    /// Ground plane with large flat-colored cells and a two-tone sphere
    /// resting on it. Every view is filled by the plane.
    pub fn piecewise_constant(size: usize) -> Self {
        Self {
            primitives: vec![
                Primitive::Plane {
                    center: [0.0, 0.0, 0.0],
                    normal: [0.0, 0.0, 1.0],
                    u_axis: [1.0, 0.0, 0.0],
                    half_extent: [8.0, 8.0],
                    albedo: Albedo::Cells {
                        cell: 2.0,
                        palette: vec![[0.55, 0.5, 0.45], [0.35, 0.45, 0.6], [0.65, 0.6, 0.4]],
                    },
                },
                Primitive::Sphere {
                    center: [0.0, 0.0, 0.5],
                    radius: 0.5,
                    albedo: Albedo::Checker {
                        cell: PI * 0.5,
                        a: [0.8, 0.35, 0.3],
                        b: [0.3, 0.6, 0.35],
                    },
                },
            ],
            light: 1.0,
            background: [0.0; 3],
            ring: CameraRing {
                count: 10,
                radius: 2.4,
                height: 2.4,
                target: [0.0, 0.0, 0.25],
                focal: size as f64 * 1.1,
                phase: 0.0,
                arc: 0.5 * PI,
            },
            width: size,
            height: size,
            supersample: 4,
            seed: 0,
            region: Some(Aabb::new([-2.0, -2.0, 0.0], [2.0, 2.0, 1.0])),
        }
    }

    /// Same layout with smoothly textured surfaces, where Laplacian
    /// sparsity is low.
    pub fn textured(size: usize) -> Self {
        let mut s = Self::piecewise_constant(size);
        if let Primitive::Plane { albedo, .. } = &mut s.primitives[0] {
            *albedo = Albedo::Sine {
                period: 0.7,
                a: [0.3, 0.35, 0.4],
                b: [0.7, 0.6, 0.5],
            };
        }
        if let Primitive::Sphere { albedo, .. } = &mut s.primitives[1] {
            *albedo = Albedo::Sine {
                period: 0.4,
                a: [0.7, 0.3, 0.3],
                b: [0.3, 0.6, 0.4],
            };
        }
        s
    }
}

/// A surface sample used to initialize training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedPoint {
    pub position: [f64; 3],
    pub color: [f64; 3],
    /// World-space size of one pixel at this point in the view that saw it.
    pub footprint: f64,
}

/// Initial scene with one isotropic particle per seed point, `pixels` pixel
/// footprints wide. Laplacian amplitudes start at zero, color amplitudes at
/// the observed color.
pub fn init_scene_at(points: &[SeedPoint], bounds: Aabb, mode: Mode, pixels: f64) -> Result<Scene> {
    if points.is_empty() {
        return Err(Error::Config("no seed points".into()));
    }
    let particles = points
        .iter()
        .map(|s| {
            let amp = match mode {
                Mode::Gdgs => vec![0.0; 3],
                Mode::Classic => s.color.to_vec(),
            };
            GaussianParticle::isotropic(s.position, s.footprint * pixels, amp, 0.5)
        })
        .collect();
    Ok(Scene {
        particles,
        bounds,
        dc_model: vec![0.0; 3],
        laplacian_density: None,
    })
}

/// Random initial scene: centers uniform in `bounds`, isotropic scales,
/// identity rotation. Laplacian amplitudes start at zero (the first render
/// is the DC plane); color amplitudes start at mid gray.
pub fn init_scene(bounds: Aabb, count: usize, channels: usize, mode: Mode, seed: u64) -> Result<Scene> {
    if count == 0 {
        return Err(Error::Config("initial particle count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent = bounds.extent();
    let sigma = 0.5 * extent / (count as f64).cbrt();
    let particles = (0..count)
        .map(|_| {
            let center = [0, 1, 2].map(|k| {
                if bounds.max[k] > bounds.min[k] {
                    rng.random_range(bounds.min[k]..bounds.max[k])
                } else {
                    bounds.min[k]
                }
            });
            let amp = match mode {
                Mode::Gdgs => 0.0,
                Mode::Classic => 0.5,
            };
            GaussianParticle {
                opacity_logit: logit(0.5),
                ..GaussianParticle::isotropic(center, sigma, vec![amp; channels], 0.5)
            }
        })
        .collect();
    Ok(Scene {
        particles,
        bounds,
        dc_model: vec![0.0; channels],
        laplacian_density: None,
    })
}

/// Published full-scale reference (banana scene): held-out PSNR of 3DGS and
/// GDGS in dB, and particle counts of 3DGS and GDGS.
pub const REFERENCE_BANANA_PSNR: (f64, f64) = (41.7, 42.8);
pub const REFERENCE_BANANA_PARTICLES: (usize, usize) = (357_000, 3_000);

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub gdgs: TrainConfig,
    pub classic: TrainConfig,
    pub initial_particles: usize,
    /// Initialize on surface points seen by the training cameras, with this
    /// many pixels of footprint; `None` samples centers uniformly in bounds.
    pub seed_footprint: Option<f64>,
    /// Ring indices never shown to training.
    pub held_out: Vec<usize>,
    /// Threshold for counting a pixel of the splatted field as active.
    pub active_eps: f64,
}

impl BenchConfig {
    /// Two held-out views spread evenly over the ring.
    pub fn default_held_out(count: usize) -> Vec<usize> {
        let mut v: Vec<usize> = (0..2).map(|k| ((2 * k + 1) * count) / 4).collect();
        v.dedup();
        v
    }

    pub fn new(count: usize, steps: usize) -> Self {
        let mut gdgs = TrainConfig::new(Mode::Gdgs);
        let mut classic = TrainConfig::new(Mode::Classic);
        gdgs.steps = steps;
        classic.steps = steps;
        Self {
            gdgs,
            classic,
            initial_particles: 500,
            seed_footprint: Some(2.0),
            held_out: Self::default_held_out(count),
            active_eps: 1e-4,
        }
    }
}

pub const BENCH_CSV_VERSION: u32 = 1;
pub const BENCH_HEADER: &str = "version,mode,steps,train_views,heldout_views,heldout_psnr,particles,active_fraction";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub mode: Mode,
    pub steps: usize,
    pub train_views: usize,
    pub heldout_views: usize,
    /// Mean over held-out views.
    pub heldout_psnr: f64,
    pub particles: usize,
    /// Mean fraction of active pixels in the splatted field (Laplacian or
    /// color) over held-out views.
    pub active_fraction: f64,
    /// Training wall time; not part of the CSV so reruns compare equal.
    pub seconds: f64,
}

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{BENCH_CSV_VERSION},{},{},{},{},{:.4},{},{:.6}",
            self.mode,
            self.steps,
            self.train_views,
            self.heldout_views,
            self.heldout_psnr,
            self.particles,
            self.active_fraction
        )
    }
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    pub scenes: Vec<(Mode, Scene)>,
}

/// Split ring views into training views and held-out cameras plus images.
pub fn split_views(
    cameras: &[Camera],
    images: &[FieldImage],
    held_out: &[usize],
) -> Result<(Vec<TrainView>, Vec<TrainView>)> {
    if let Some(i) = held_out.iter().find(|i| **i >= cameras.len()) {
        return Err(Error::Config(format!("held-out index {i} out of range")));
    }
    let (mut tr, mut te) = (Vec::new(), Vec::new());
    for (i, (c, im)) in cameras.iter().zip(images).enumerate() {
        let v = TrainView {
            camera: c.clone(),
            image: im.clone(),
        };
        if held_out.contains(&i) {
            te.push(v);
        } else {
            tr.push(v);
        }
    }
    Ok((tr, te))
}

/// Mean PSNR and mean active-pixel fraction of `scene` over `views`.
pub fn evaluate(scene: &Scene, cfg: &TrainConfig, views: &[TrainView], active_eps: f64) -> Result<(f64, f64)> {
    let first = views
        .first()
        .ok_or_else(|| Error::Config("evaluation needs at least one view".into()))?;
    let renderer = Renderer::new(cfg.mode, cfg.render, cfg.solver, first.camera.width, first.camera.height)?;
    let (mut p, mut a) = (0.0, 0.0);
    for v in views {
        let img = renderer.render(scene, &v.camera)?;
        p += psnr(&img, &v.image)?;
        let field = SplatPass::run(scene, &v.camera, &cfg.render)?.field;
        a += active_pixel_set(&field, active_eps).fraction;
    }
    let n = views.len() as f64;
    Ok((p / n, a / n))
}

/// Train both modes on the same training views and initial layout, then
/// evaluate on the held-out views.
pub fn benchmark(spec: &SyntheticSceneSpec, cfg: &BenchConfig) -> Result<BenchResult> {
    let (cameras, images) = spec.generate()?;
    benchmark_on(spec, cfg, &cameras, &images)
}

/// [`benchmark`] on views already generated from `spec`.
pub fn benchmark_on(
    spec: &SyntheticSceneSpec,
    cfg: &BenchConfig,
    cameras: &[Camera],
    images: &[FieldImage],
) -> Result<BenchResult> {
    if cfg.held_out.len() < 2 {
        return Err(Error::Config("benchmark needs at least 2 held-out views".into()));
    }
    let (train_views, test_views) = split_views(cameras, images, &cfg.held_out)?;
    if train_views.is_empty() {
        return Err(Error::Config("benchmark needs at least 1 training view".into()));
    }
    let mut rows = Vec::new();
    let mut scenes = Vec::new();
    for tc in [&cfg.gdgs, &cfg.classic] {
        let init = initial_scene(spec, cfg, &train_views, tc.mode)?;
        let start = Instant::now();
        let (scene, _) = train(init, &train_views, tc).map_err(|e| with_mode(e, tc.mode))?;
        let seconds = start.elapsed().as_secs_f64();
        let (heldout_psnr, active_fraction) =
            evaluate(&scene, tc, &test_views, cfg.active_eps).map_err(|e| with_mode(e, tc.mode))?;
        log::info!(
            "event=bench_mode mode={} steps={} heldout_psnr={heldout_psnr:.3} particles={} active_fraction={active_fraction:.4} seconds={seconds:.1}",
            tc.mode,
            tc.steps,
            scene.len()
        );
        rows.push(BenchRow {
            mode: tc.mode,
            steps: tc.steps,
            train_views: train_views.len(),
            heldout_views: test_views.len(),
            heldout_psnr,
            particles: scene.len(),
            active_fraction,
            seconds,
        });
        scenes.push((tc.mode, scene));
    }
    Ok(BenchResult { rows, scenes })
}

/// Initial scene for one benchmark mode; only training cameras are used.
pub fn initial_scene(spec: &SyntheticSceneSpec, cfg: &BenchConfig, train_views: &[TrainView], mode: Mode) -> Result<Scene> {
    match cfg.seed_footprint {
        Some(px) => {
            let cams: Vec<Camera> = train_views.iter().map(|v| v.camera.clone()).collect();
            let pts = spec.seed_points(&cams, cfg.initial_particles, spec.seed);
            init_scene_at(&pts, spec.bounds(), mode, px)
        }
        None => init_scene(spec.bounds(), cfg.initial_particles, 3, mode, spec.seed),
    }
}

fn with_mode(e: Error, mode: Mode) -> Error {
    match e {
        Error::Io { .. } | Error::Image { .. } | Error::Parse { .. } => e,
        Error::Config(m) => Error::Config(format!("{mode} training: {m}")),
        Error::NonFinite(m) => Error::NonFinite(format!("{mode} training: {m}")),
        Error::Degenerate(m) => Error::Degenerate(format!("{mode} training: {m}")),
        Error::Contract(m) => Error::Contract(format!("{mode} training: {m}")),
        other => other,
    }
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(BENCH_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_only() -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            primitives: vec![Primitive::Sphere {
                center: [0.0, 0.0, 0.0],
                radius: 0.5,
                albedo: Albedo::Solid { color: [1.0; 3] },
            }],
            light: 1.0,
            background: [0.0; 3],
            ring: CameraRing {
                count: 8,
                radius: 3.0,
                height: 1.0,
                target: [0.3, -0.2, 0.1],
                focal: 40.0,
                phase: 0.0,
                arc: 2.0 * PI,
            },
            width: 48,
            height: 40,
            supersample: 2,
            seed: 0,
            region: None,
        }
    }

    #[test]
    fn disk_centroid_tracks_sphere_center() {
        let spec = sphere_only();
        let (cams, imgs) = spec.generate().unwrap();
        assert_eq!(cams.len(), 8);
        for (cam, im) in cams.iter().zip(&imgs) {
            let (mut sx, mut sy, mut m) = (0.0, 0.0, 0.0);
            for y in 0..im.height() {
                for x in 0..im.width() {
                    let v = im.get(x, y, 0);
                    sx += v * x as f64;
                    sy += v * y as f64;
                    m += v;
                }
            }
            assert!(m > 10.0);
            let pc = cam.to_camera(&Vector3::zeros());
            let want = cam.project_camera_point(&pc);
            // perspective shifts the disk centroid slightly off the projected center
            assert!((sx / m - want[0]).abs() < 0.5, "{} {}", sx / m, want[0]);
            assert!((sy / m - want[1]).abs() < 0.5, "{} {}", sy / m, want[1]);
        }
    }

    #[test]
    fn empty_scene_is_black() {
        let mut spec = sphere_only();
        spec.primitives.clear();
        let (_, imgs) = spec.generate().unwrap();
        assert!(imgs.iter().all(|im| im.max_abs() == 0.0));
    }

    #[test]
    fn deterministic() {
        let spec = SyntheticSceneSpec::piecewise_constant(32);
        let (_, a) = spec.generate().unwrap();
        let (_, b) = spec.generate().unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|im| im.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn invalid_specs() {
        let mut spec = sphere_only();
        spec.ring.count = 1;
        assert!(spec.generate().is_err());
        let mut spec = sphere_only();
        spec.width = 16;
        assert!(spec.generate().is_err());
        let mut spec = sphere_only();
        spec.ring.radius = 0.0;
        spec.ring.height = 0.0;
        assert!(matches!(spec.generate(), Err(Error::InvalidCamera(_))));
    }

    #[test]
    fn held_out_split() {
        assert_eq!(BenchConfig::default_held_out(10), vec![2, 7]);
        assert_eq!(BenchConfig::default_held_out(2), vec![0, 1]);
        let spec = sphere_only();
        let (c, i) = spec.generate().unwrap();
        let (tr, te) = split_views(&c, &i, &[2, 7]).unwrap();
        assert_eq!((tr.len(), te.len()), (6, 2));
        assert!(split_views(&c, &i, &[8]).is_err());
    }

    #[test]
    fn init_zero_amplitudes_for_gdgs() {
        let b = Aabb::new([-1.0; 3], [1.0, 1.0, 0.0]);
        let s = init_scene(b, 50, 3, Mode::Gdgs, 1).unwrap();
        assert_eq!(s.len(), 50);
        assert!(s.particles.iter().all(|p| p.amplitude.iter().all(|a| *a == 0.0)));
        assert!(s.particles.iter().all(|p| b.contains_inflated(&p.center, 0.0)));
        s.validate().unwrap();
    }
}
