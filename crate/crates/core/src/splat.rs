//! Screen-space projection of particles and front-to-back compositing.
//!
//! The same compositor produces a classical color image (amplitudes are
//! colors) or a signed 2D Laplacian field (amplitudes are Laplacian values):
//!
//! ```text
//! out(u,v) = Σ_k a_k α_k G_k(u,v) Π_{j<k} (1 − α_j G_j(u,v))
//! ```
//!
//! with `G_k = exp(−dᵀ Σ2D⁻¹ d)` evaluated at integer pixel centers.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::FieldImage;
use crate::scene::{covariance_unchecked, quat_matrix_backward, Camera, GaussianParticle, Scene};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    /// Isotropic dilation added to every screen-space covariance (px²).
    pub lowpass: f64,
    /// Footprint radius in standard deviations.
    pub truncation_sigmas: f64,
    pub tile_size: usize,
    /// Compositing stops once the transmittance drops below this value.
    pub min_transmittance: f64,
    /// Particles at camera depth `<= near` are culled.
    pub near: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            lowpass: 0.3,
            truncation_sigmas: 3.0,
            tile_size: 16,
            min_transmittance: 1e-4,
            near: 0.01,
        }
    }
}

impl RenderConfig {
    /// Footprint wide enough that truncation and early termination are
    /// numerically invisible; used for gradient and oracle checks.
    pub fn exact() -> Self {
        Self {
            truncation_sigmas: 6.0,
            min_transmittance: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lowpass >= 0.0 && self.truncation_sigmas > 0.0 && self.tile_size > 0 && self.min_transmittance >= 0.0)
        {
            return Err(Error::Config(format!("invalid render config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplattedGaussian2D {
    pub mean2d: [f64; 2],
    /// Symmetric covariance `[xx, xy, yy]` in px².
    pub cov2d: [f64; 3],
    pub depth: f64,
    pub amplitude: Vec<f64>,
    pub opacity: f64,
    /// Index of the source particle.
    pub index: usize,
}

impl SplattedGaussian2D {
    /// Inverse covariance `[xx, xy, yy]`.
    pub fn conic(&self) -> [f64; 3] {
        let [a, b, c] = self.cov2d;
        let det = a * c - b * b;
        [c / det, -b / det, a / det]
    }

    pub fn radius(&self, sigmas: f64) -> f64 {
        let [a, b, c] = self.cov2d;
        let mid = 0.5 * (a + c);
        let lmax = mid + (0.25 * (a - c) * (a - c) + b * b).sqrt();
        sigmas * lmax.sqrt()
    }

    /// `G(x, y)` without truncation.
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let [qa, qb, qc] = self.conic();
        let dx = x - self.mean2d[0];
        let dy = y - self.mean2d[1];
        (-(qa * dx * dx + 2.0 * qb * dx * dy + qc * dy * dy)).exp()
    }
}

/// Local affine Jacobian of the pinhole map at camera-space point `t`.
pub(crate) fn pinhole_jacobian(cam: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * t.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * t.y * iz * iz,
    )
}

/// Project one particle; `None` when it is culled.
pub fn project(p: &GaussianParticle, cam: &Camera, cfg: &RenderConfig) -> Option<SplattedGaussian2D> {
    project_indexed(p, 0, cam, cfg, None)
}

/// Factor `(d z / f)²` applied to amplitudes at camera depth `z`.
pub fn depth_weight(density: Option<f64>, cam: &Camera, z: f64) -> f64 {
    match density {
        Some(d) => {
            let s = d * z / cam.fx;
            s * s
        }
        None => 1.0,
    }
}

fn project_indexed(
    p: &GaussianParticle,
    index: usize,
    cam: &Camera,
    cfg: &RenderConfig,
    density: Option<f64>,
) -> Option<SplattedGaussian2D> {
    let w_rot = cam.rotation();
    let t = w_rot * p.center_vec() + cam.translation();
    if !(t.z > cfg.near) {
        return None;
    }
    let j = pinhole_jacobian(cam, &t);
    let sigma_cam = w_rot * covariance_unchecked(p) * w_rot.transpose();
    let s2 = j * sigma_cam * j.transpose();
    let cov2d = [
        s2[(0, 0)] + cfg.lowpass,
        0.5 * (s2[(0, 1)] + s2[(1, 0)]),
        s2[(1, 1)] + cfg.lowpass,
    ];
    let det = cov2d[0] * cov2d[2] - cov2d[1] * cov2d[1];
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let splat = SplattedGaussian2D {
        mean2d: cam.project_camera_point(&t),
        cov2d,
        depth: t.z,
        amplitude: match density {
            None => p.amplitude.clone(),
            Some(_) => {
                let w = depth_weight(density, cam, t.z);
                p.amplitude.iter().map(|a| a * w).collect()
            }
        },
        opacity: p.opacity(),
        index,
    };
    let r = splat.radius(cfg.truncation_sigmas);
    let [mx, my] = splat.mean2d;
    let (w, h) = ((cam.width - 1) as f64, (cam.height - 1) as f64);
    if mx + r < 0.0 || mx - r > w || my + r < 0.0 || my - r > h {
        return None;
    }
    Some(splat)
}

/// Sort by depth, ties broken by particle index.
pub fn sort_splats(splats: &mut [SplattedGaussian2D]) {
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
}

/// Project every particle of `scene` and sort the survivors front to back.
pub fn project_scene(scene: &Scene, cam: &Camera, cfg: &RenderConfig) -> Vec<SplattedGaussian2D> {
    let mut splats: Vec<_> = scene
        .particles
        .iter()
        .enumerate()
        .filter_map(|(i, p)| project_indexed(p, i, cam, cfg, scene.laplacian_density))
        .collect();
    sort_splats(&mut splats);
    splats
}

/// Packed per-splat data for the inner loop.
#[derive(Debug, Clone, Copy)]
struct Packed {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
}

/// Splats binned into screen tiles, ready for compositing.
#[derive(Debug, Clone)]
pub struct TiledSplats {
    width: usize,
    height: usize,
    channels: usize,
    cfg: RenderConfig,
    packed: Vec<Packed>,
    amplitudes: Vec<f64>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
}

impl TiledSplats {
    pub fn new(
        splats: &[SplattedGaussian2D],
        width: usize,
        height: usize,
        channels: usize,
        cfg: &RenderConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if let Some(i) = splats
            .windows(2)
            .position(|w| w[0].depth.total_cmp(&w[1].depth).then(w[0].index.cmp(&w[1].index)).is_gt())
        {
            return Err(Error::Contract(format!("splats not sorted by depth at position {i}")));
        }
        let ts = cfg.tile_size;
        let tiles_x = width.div_ceil(ts);
        let tiles_y = height.div_ceil(ts);
        let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
        let mut packed = Vec::with_capacity(splats.len());
        let mut amplitudes = Vec::with_capacity(splats.len() * channels);
        for (k, s) in splats.iter().enumerate() {
            if s.amplitude.len() != channels {
                return Err(Error::ShapeMismatch {
                    expected: format!("{channels} amplitude channels"),
                    got: format!("{}", s.amplitude.len()),
                });
            }
            packed.push(Packed {
                mean: s.mean2d,
                conic: s.conic(),
                opacity: s.opacity,
            });
            amplitudes.extend_from_slice(&s.amplitude);
            let r = s.radius(cfg.truncation_sigmas);
            let [mx, my] = s.mean2d;
            let x0 = (mx - r).ceil().max(0.0);
            let x1 = (mx + r).floor().min((width - 1) as f64);
            let y0 = (my - r).ceil().max(0.0);
            let y1 = (my + r).floor().min((height - 1) as f64);
            if x0 > x1 || y0 > y1 {
                continue;
            }
            let (tx0, tx1) = (x0 as usize / ts, x1 as usize / ts);
            let (ty0, ty1) = (y0 as usize / ts, y1 as usize / ts);
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    tiles[ty * tiles_x + tx].push(k as u32);
                }
            }
        }
        Ok(Self {
            width,
            height,
            channels,
            cfg: *cfg,
            packed,
            amplitudes,
            tiles,
            tiles_x,
        })
    }

    pub fn len(&self) -> usize {
        self.packed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packed.is_empty()
    }

    fn tile_rect(&self, t: usize) -> (usize, usize, usize, usize) {
        let ts = self.cfg.tile_size;
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        let x0 = tx * ts;
        let y0 = ty * ts;
        (x0, y0, (x0 + ts).min(self.width), (y0 + ts).min(self.height))
    }

    /// Walk the splats covering pixel `(x, y)` front to back, calling
    /// `f(k, G, alpha·G, T_before)` for each one that contributes.
    #[inline]
    fn walk_pixel(&self, list: &[u32], x: usize, y: usize, mut f: impl FnMut(usize, f64, f64, f64)) -> f64 {
        let cutoff = self.cfg.truncation_sigmas * self.cfg.truncation_sigmas;
        let (px, py) = (x as f64, y as f64);
        let mut t = 1.0;
        for &k in list {
            let s = &self.packed[k as usize];
            let dx = px - s.mean[0];
            let dy = py - s.mean[1];
            let q = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
            if q > cutoff {
                continue;
            }
            let g = (-q).exp();
            let beta = s.opacity * g;
            f(k as usize, g, beta, t);
            t *= 1.0 - beta;
            if t < self.cfg.min_transmittance {
                break;
            }
        }
        t
    }

    /// Composite all tiles. Returns the field and the final per-pixel
    /// transmittance.
    pub fn composite(&self) -> (FieldImage, Vec<f64>) {
        let ch = self.channels;
        let per_tile: Vec<(Vec<f64>, Vec<f64>)> = (0..self.tiles.len())
            .into_par_iter()
            .map(|t| {
                let (x0, y0, x1, y1) = self.tile_rect(t);
                let n = (x1 - x0) * (y1 - y0);
                let mut color = vec![0.0; n * ch];
                let mut trans = vec![1.0; n];
                let list = &self.tiles[t];
                let mut i = 0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let px = &mut color[i * ch..(i + 1) * ch];
                        trans[i] = self.walk_pixel(list, x, y, |k, _g, beta, tb| {
                            let amp = &self.amplitudes[k * ch..(k + 1) * ch];
                            for c in 0..ch {
                                px[c] += amp[c] * beta * tb;
                            }
                        });
                        i += 1;
                    }
                }
                (color, trans)
            })
            .collect();
        let mut out = FieldImage::zeros(self.width, self.height, ch);
        let mut transmittance = vec![1.0; self.width * self.height];
        for (t, (color, trans)) in per_tile.into_iter().enumerate() {
            let (x0, y0, x1, y1) = self.tile_rect(t);
            let mut i = 0;
            for y in y0..y1 {
                for x in x0..x1 {
                    for c in 0..ch {
                        out.set(x, y, c, color[i * ch + c]);
                    }
                    transmittance[y * self.width + x] = trans[i];
                    i += 1;
                }
            }
        }
        (out, transmittance)
    }

    /// Gradients of `⟨grad_out, composite()⟩` w.r.t. each splat's screen-space
    /// parameters.
    pub fn backward(&self, grad_out: &FieldImage) -> Vec<SplatGrad> {
        let ch = self.channels;
        let n = self.packed.len();
        let per_tile: Vec<Vec<(u32, SplatGrad)>> = (0..self.tiles.len())
            .into_par_iter()
            .map(|t| {
                let list = &self.tiles[t];
                if list.is_empty() {
                    return Vec::new();
                }
                // local accumulators, indexed by position in `list`
                let mut local = vec![SplatGrad::zero(ch); list.len()];
                let mut slot = std::collections::HashMap::with_capacity(list.len());
                for (i, &k) in list.iter().enumerate() {
                    slot.insert(k as usize, i);
                }
                let mut stack: Vec<(usize, f64, f64, f64)> = Vec::new();
                let mut behind = vec![0.0; ch];
                let mut g = vec![0.0; ch];
                let (x0, y0, x1, y1) = self.tile_rect(t);
                for y in y0..y1 {
                    for x in x0..x1 {
                        for (c, gc) in g.iter_mut().enumerate() {
                            *gc = grad_out.get(x, y, c);
                        }
                        if g.iter().all(|v| *v == 0.0) {
                            continue;
                        }
                        stack.clear();
                        self.walk_pixel(list, x, y, |k, gk, beta, tb| stack.push((k, gk, beta, tb)));
                        behind.iter_mut().for_each(|b| *b = 0.0);
                        for &(k, gk, beta, tb) in stack.iter().rev() {
                            let amp = &self.amplitudes[k * ch..(k + 1) * ch];
                            let acc = &mut local[slot[&k]];
                            let mut d_beta = 0.0;
                            for c in 0..ch {
                                acc.amplitude[c] += g[c] * beta * tb;
                                d_beta += g[c] * (amp[c] - behind[c]);
                            }
                            d_beta *= tb;
                            for c in 0..ch {
                                behind[c] = beta * amp[c] + (1.0 - beta) * behind[c];
                            }
                            let s = &self.packed[k];
                            acc.opacity += d_beta * gk;
                            // d beta / d q = -alpha G
                            let d_q = -d_beta * s.opacity * gk;
                            let dx = x as f64 - s.mean[0];
                            let dy = y as f64 - s.mean[1];
                            acc.mean2d[0] += d_q * -2.0 * (s.conic[0] * dx + s.conic[1] * dy);
                            acc.mean2d[1] += d_q * -2.0 * (s.conic[1] * dx + s.conic[2] * dy);
                            acc.conic[0] += d_q * dx * dx;
                            acc.conic[1] += d_q * dx * dy;
                            acc.conic[2] += d_q * dy * dy;
                        }
                    }
                }
                list.iter().copied().zip(local).collect()
            })
            .collect();
        let mut grads = vec![SplatGrad::zero(ch); n];
        for tile in per_tile {
            for (k, g) in tile {
                grads[k as usize].add(&g);
            }
        }
        // convert conic gradients to covariance gradients
        for (g, s) in grads.iter_mut().zip(&self.packed) {
            g.finish_cov(&s.conic);
        }
        grads
    }
}

/// Gradient w.r.t. one splat's screen-space parameters. Matrix gradients are
/// stored as symmetric `[xx, xy, yy]` entries of `∂L/∂M`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatGrad {
    pub mean2d: [f64; 2],
    pub conic: [f64; 3],
    pub cov2d: [f64; 3],
    pub opacity: f64,
    pub amplitude: Vec<f64>,
}

impl SplatGrad {
    fn zero(ch: usize) -> Self {
        Self {
            mean2d: [0.0; 2],
            conic: [0.0; 3],
            cov2d: [0.0; 3],
            opacity: 0.0,
            amplitude: vec![0.0; ch],
        }
    }

    fn add(&mut self, o: &SplatGrad) {
        for i in 0..2 {
            self.mean2d[i] += o.mean2d[i];
        }
        for i in 0..3 {
            self.conic[i] += o.conic[i];
        }
        self.opacity += o.opacity;
        for (a, b) in self.amplitude.iter_mut().zip(&o.amplitude) {
            *a += b;
        }
    }

    /// `∂L/∂Σ = −Q (∂L/∂Q) Q` for `Q = Σ⁻¹`.
    fn finish_cov(&mut self, conic: &[f64; 3]) {
        let q = Matrix2::new(conic[0], conic[1], conic[1], conic[2]);
        let gq = Matrix2::new(self.conic[0], self.conic[1], self.conic[1], self.conic[2]);
        let gs = -(q * gq * q);
        self.cov2d = [gs[(0, 0)], 0.5 * (gs[(0, 1)] + gs[(1, 0)]), gs[(1, 1)]];
    }
}

/// Gradient w.r.t. one particle's stored parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleGrad {
    pub center: [f64; 3],
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub amplitude: Vec<f64>,
    pub opacity_logit: f64,
    /// `‖∂L/∂mean2d‖`, the screen-space positional gradient.
    pub mean2d_norm: f64,
}

impl ParticleGrad {
    pub fn zero(ch: usize) -> Self {
        Self {
            center: [0.0; 3],
            rotation: [0.0; 4],
            log_scale: [0.0; 3],
            amplitude: vec![0.0; ch],
            opacity_logit: 0.0,
            mean2d_norm: 0.0,
        }
    }

    pub fn add_scaled(&mut self, o: &ParticleGrad, s: f64) {
        for i in 0..3 {
            self.center[i] += s * o.center[i];
            self.log_scale[i] += s * o.log_scale[i];
        }
        for i in 0..4 {
            self.rotation[i] += s * o.rotation[i];
        }
        for (a, b) in self.amplitude.iter_mut().zip(&o.amplitude) {
            *a += s * b;
        }
        self.opacity_logit += s * o.opacity_logit;
        self.mean2d_norm += s * o.mean2d_norm;
    }

    pub fn is_finite(&self) -> bool {
        self.center.iter().chain(&self.rotation).chain(&self.log_scale).chain(&self.amplitude).all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
    }

    pub fn max_abs(&self) -> f64 {
        self.center
            .iter()
            .chain(&self.rotation)
            .chain(&self.log_scale)
            .chain(&self.amplitude)
            .chain(std::iter::once(&self.opacity_logit))
            .map(|v| v.abs())
            .fold(0.0, f64::max)
    }
}

/// Chain a splat gradient back through projection to particle parameters.
/// `density` must match the value used for projection.
pub fn project_backward(p: &GaussianParticle, cam: &Camera, g: &SplatGrad, density: Option<f64>) -> ParticleGrad {
    let w_rot = cam.rotation();
    let t = w_rot * p.center_vec() + cam.translation();
    let j = pinhole_jacobian(cam, &t);
    let rot = p.rotation_matrix();
    let scale2 = Vector3::new(
        (2.0 * p.log_scale[0]).exp(),
        (2.0 * p.log_scale[1]).exp(),
        (2.0 * p.log_scale[2]).exp(),
    );
    let sigma = covariance_unchecked(p);
    let sigma_cam = w_rot * sigma * w_rot.transpose();

    let g_s2 = Matrix2::new(g.cov2d[0], g.cov2d[1], g.cov2d[1], g.cov2d[2]);
    let g_sigma_cam = j.transpose() * g_s2 * j;
    let g_j: Matrix2x3<f64> = 2.0 * g_s2 * j * sigma_cam;
    let g_sigma = w_rot.transpose() * g_sigma_cam * w_rot;

    // Σ = R diag(s²) Rᵀ
    let m = rot.transpose() * g_sigma * rot;
    let log_scale = [
        2.0 * m[(0, 0)] * scale2.x,
        2.0 * m[(1, 1)] * scale2.y,
        2.0 * m[(2, 2)] * scale2.z,
    ];
    let g_rot: Matrix3<f64> = 2.0 * g_sigma * rot * Matrix3::from_diagonal(&scale2);
    let rotation = quat_matrix_backward(&p.rotation, &g_rot);

    // mean2d = (fx x/z + cx, fy y/z + cy): d mean / d t = J
    let gm = nalgebra::Vector2::new(g.mean2d[0], g.mean2d[1]);
    let mut g_t = j.transpose() * gm;
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    g_t.x += g_j[(0, 2)] * (-cam.fx * iz2);
    g_t.y += g_j[(1, 2)] * (-cam.fy * iz2);
    g_t.z += g_j[(0, 0)] * (-cam.fx * iz2)
        + g_j[(0, 2)] * (2.0 * cam.fx * t.x * iz3)
        + g_j[(1, 1)] * (-cam.fy * iz2)
        + g_j[(1, 2)] * (2.0 * cam.fy * t.y * iz3);
    let w = depth_weight(density, cam, t.z);
    if density.is_some() {
        // d(a w)/dz = a · 2w/z
        let ga: f64 = g.amplitude.iter().zip(&p.amplitude).map(|(g, a)| g * a).sum();
        g_t.z += ga * 2.0 * w / t.z;
    }
    let g_c = w_rot.transpose() * g_t;

    let alpha = p.opacity();
    ParticleGrad {
        center: [g_c.x, g_c.y, g_c.z],
        rotation,
        log_scale,
        amplitude: g.amplitude.iter().map(|v| v * w).collect(),
        opacity_logit: g.opacity * alpha * (1.0 - alpha),
        mean2d_norm: gm.norm(),
    }
}

/// Everything needed to composite a view and backpropagate through it.
#[derive(Debug, Clone)]
pub struct SplatPass {
    pub splats: Vec<SplattedGaussian2D>,
    pub tiles: TiledSplats,
    pub field: FieldImage,
    pub transmittance: Vec<f64>,
}

impl SplatPass {
    pub fn run(scene: &Scene, cam: &Camera, cfg: &RenderConfig) -> Result<Self> {
        let splats = project_scene(scene, cam, cfg);
        let tiles = TiledSplats::new(&splats, cam.width, cam.height, scene.channels(), cfg)?;
        let (field, transmittance) = tiles.composite();
        Ok(Self {
            splats,
            tiles,
            field,
            transmittance,
        })
    }

    /// Per-particle gradients of `⟨grad_field, field⟩`. Culled particles get zeros.
    pub fn backward(&self, scene: &Scene, cam: &Camera, grad_field: &FieldImage) -> Vec<ParticleGrad> {
        let ch = scene.channels();
        let splat_grads = self.tiles.backward(grad_field);
        let mut out = vec![ParticleGrad::zero(ch); scene.len()];
        for (s, g) in self.splats.iter().zip(&splat_grads) {
            out[s.index] = project_backward(&scene.particles[s.index], cam, g, scene.laplacian_density);
        }
        out
    }
}

fn composite_checked(splats: &[SplattedGaussian2D], cam: &Camera, channels: usize, cfg: &RenderConfig) -> Result<FieldImage> {
    Ok(TiledSplats::new(splats, cam.width, cam.height, channels, cfg)?.composite().0)
}

fn infer_channels(splats: &[SplattedGaussian2D], fallback: usize) -> usize {
    splats.first().map_or(fallback, |s| s.amplitude.len())
}

/// Alpha-blended color image from depth-sorted splats.
pub fn composite_color(splats: &[SplattedGaussian2D], cam: &Camera, cfg: &RenderConfig) -> Result<FieldImage> {
    composite_checked(splats, cam, infer_channels(splats, 3), cfg)
}

/// Signed 2D Laplacian field from depth-sorted splats; same blending as
/// [`composite_color`].
pub fn composite_laplacian(splats: &[SplattedGaussian2D], cam: &Camera, cfg: &RenderConfig) -> Result<FieldImage> {
    composite_checked(splats, cam, infer_channels(splats, 3), cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivePixels {
    /// Row-major pixel indices `y * width + x`.
    pub indices: Vec<usize>,
    pub fraction: f64,
}

/// Pixels where any channel exceeds `eps` in magnitude.
pub fn active_pixel_set(field: &FieldImage, eps: f64) -> ActivePixels {
    let n = field.pixel_count();
    let indices: Vec<usize> = (0..n)
        .filter(|&i| field.planes().any(|p| p[i].abs() > eps))
        .collect();
    let fraction = if n == 0 { 0.0 } else { indices.len() as f64 / n as f64 };
    ActivePixels { indices, fraction }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::logit;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn splat(mean: [f64; 2], cov: [f64; 3], depth: f64, amp: f64, opacity: f64, index: usize) -> SplattedGaussian2D {
        SplattedGaussian2D {
            mean2d: mean,
            cov2d: cov,
            depth,
            amplitude: vec![amp],
            opacity,
            index,
        }
    }

    #[test]
    fn on_axis_covariance() {
        let (f, z) = (50.0, 4.0);
        let cam = Camera::identity(f, 64, 64);
        let mut p = GaussianParticle::isotropic([0.0, 0.0, z], 1.0, vec![1.0], 0.5);
        p.opacity_logit = 0.0;
        let cfg = RenderConfig::default();
        // place the particle on the optical axis through the principal point
        let s = project(&p, &cam, &cfg).unwrap();
        let want = (f / z) * (f / z) + cfg.lowpass;
        assert!((s.cov2d[0] - want).abs() < 1e-12);
        assert!((s.cov2d[2] - want).abs() < 1e-12);
        assert!(s.cov2d[1].abs() < 1e-12);
        assert_eq!(s.depth, z);
    }

    #[test]
    fn density_weight_follows_pixel_footprint() {
        let z = 3.0;
        let p = GaussianParticle::isotropic([0.0, 0.0, z], 0.1, vec![0.8], 0.5);
        let cfg = RenderConfig::default();
        let mut scene = Scene {
            particles: vec![p],
            bounds: crate::scene::Aabb::new([-1.0; 3], [1.0, 1.0, 5.0]),
            dc_model: vec![0.0],
            laplacian_density: None,
        };
        let cam = Camera::identity(60.0, 32, 32);
        assert_eq!(project_scene(&scene, &cam, &cfg)[0].amplitude, vec![0.8]);
        // density equal to the pixel density at that depth leaves the amplitude alone
        scene.laplacian_density = Some(60.0 / z);
        assert!((project_scene(&scene, &cam, &cfg)[0].amplitude[0] - 0.8).abs() < 1e-12);
        // doubling the focal length spreads the same mass over four times the pixels
        let zoomed = Camera::identity(120.0, 32, 32);
        assert!((project_scene(&scene, &zoomed, &cfg)[0].amplitude[0] - 0.2).abs() < 1e-12);
        assert_eq!(depth_weight(None, &zoomed, z), 1.0);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = Camera::identity(10.0, 16, 16);
        let p = GaussianParticle::isotropic([0.0, 0.0, -1.0], 0.1, vec![1.0], 0.5);
        assert!(project(&p, &cam, &RenderConfig::default()).is_none());
    }

    #[test]
    fn off_screen_is_culled() {
        let cam = Camera::identity(10.0, 16, 16);
        let p = GaussianParticle::isotropic([50.0, 0.0, 1.0], 0.01, vec![1.0], 0.5);
        assert!(project(&p, &cam, &RenderConfig::default()).is_none());
    }

    #[test]
    fn pinhole_mean() {
        let mut cam = Camera::identity(1.0, 4, 4);
        cam.cx = 0.0;
        cam.cy = 0.0;
        let p = GaussianParticle::isotropic([0.0, 0.0, 1.0], 1.0, vec![1.0], 0.5);
        let s = project(&p, &cam, &RenderConfig::default()).unwrap();
        assert_eq!(s.mean2d, [0.0, 0.0]);
    }

    #[test]
    fn degenerates_to_2d_block() {
        // W = I, on-axis, fx = fy = 1, z = 1: cov2d = Σ[0..2, 0..2] + λ I
        let mut cam = Camera::identity(1.0, 8, 8);
        cam.cx = 0.0;
        cam.cy = 0.0;
        let p = GaussianParticle {
            center: [0.0, 0.0, 1.0],
            rotation: crate::scene::quat_from_axis_angle([0.3, -0.5, 0.8], 0.7),
            log_scale: [-0.3, 0.2, -1.0],
            amplitude: vec![1.0],
            opacity_logit: 0.0,
        };
        let cfg = RenderConfig::default();
        let sigma = covariance_unchecked(&p);
        let s = project(&p, &cam, &cfg).unwrap();
        assert!((s.cov2d[0] - sigma[(0, 0)] - cfg.lowpass).abs() < 1e-12);
        assert!((s.cov2d[1] - sigma[(0, 1)]).abs() < 1e-12);
        assert!((s.cov2d[2] - sigma[(1, 1)] - cfg.lowpass).abs() < 1e-12);
    }

    fn cam(w: usize, h: usize) -> Camera {
        Camera::identity(10.0, w, h)
    }

    #[test]
    fn single_opaque_splat_at_mean() {
        let s = vec![splat([4.0, 3.0], [2.0, 0.0, 2.0], 1.0, 0.7, 1.0, 0)];
        let img = composite_color(&s, &cam(10, 8), &RenderConfig::default()).unwrap();
        assert!((img.get(4, 3, 0) - 0.7).abs() < 1e-15);
        let s = vec![splat([4.0, 3.0], [2.0, 0.0, 2.0], 1.0, -0.5, 1.0, 0)];
        let img = composite_laplacian(&s, &cam(10, 8), &RenderConfig::default()).unwrap();
        assert!((img.get(4, 3, 0) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn transparent_and_empty_give_zero() {
        let s = vec![splat([4.0, 3.0], [2.0, 0.0, 2.0], 1.0, 0.7, 0.0, 0)];
        assert_eq!(composite_color(&s, &cam(10, 8), &RenderConfig::default()).unwrap().max_abs(), 0.0);
        assert_eq!(composite_laplacian(&[], &cam(10, 8), &RenderConfig::default()).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn opaque_front_hides_back() {
        let s = vec![
            splat([4.0, 3.0], [2.0, 0.0, 2.0], 1.0, 0.7, 1.0, 0),
            splat([5.0, 3.0], [2.0, 0.0, 2.0], 2.0, 0.9, 0.8, 1),
        ];
        let img = composite_color(&s, &cam(10, 8), &RenderConfig::default()).unwrap();
        // T after the first splat at its own mean is exactly 0
        assert_eq!(img.get(4, 3, 0), 0.7);
    }

    #[test]
    fn unsorted_input_rejected() {
        let s = vec![
            splat([4.0, 3.0], [2.0, 0.0, 2.0], 2.0, 0.7, 1.0, 0),
            splat([5.0, 3.0], [2.0, 0.0, 2.0], 1.0, 0.9, 0.8, 1),
        ];
        assert!(matches!(
            composite_color(&s, &cam(10, 8), &RenderConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    fn random_splats(n: usize, w: usize, h: usize, seed: u64) -> Vec<SplattedGaussian2D> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<_> = (0..n)
            .map(|i| {
                let a: f64 = rng.random_range(0.5..6.0);
                let c = rng.random_range(0.5..6.0);
                let b = rng.random_range(-0.4..0.4) * (a * c).sqrt();
                SplattedGaussian2D {
                    mean2d: [rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)],
                    cov2d: [a, b, c],
                    depth: rng.random_range(1.0..5.0),
                    amplitude: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                    opacity: rng.random_range(0.05..0.6),
                    index: i,
                }
            })
            .collect();
        sort_splats(&mut v);
        v
    }

    /// Direct per-pixel evaluation of the blending sum, no tiles or truncation.
    fn oracle_pixel(splats: &[SplattedGaussian2D], x: usize, y: usize, c: usize) -> f64 {
        let mut out = 0.0;
        for k in 0..splats.len() {
            let gk = splats[k].eval(x as f64, y as f64);
            let mut prod = 1.0;
            for j in 0..k {
                prod *= 1.0 - splats[j].opacity * splats[j].eval(x as f64, y as f64);
            }
            out += splats[k].amplitude[c] * splats[k].opacity * gk * prod;
        }
        out
    }

    #[test]
    fn three_splats_match_oracle() {
        let s = random_splats(3, 12, 9, 4);
        let img = TiledSplats::new(&s, 12, 9, 2, &RenderConfig::exact()).unwrap().composite().0;
        for y in 0..9 {
            for x in 0..12 {
                for c in 0..2 {
                    assert!((img.get(x, y, c) - oracle_pixel(&s, x, y, c)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn permutation_invariance_and_linearity() {
        let s = random_splats(40, 40, 30, 7);
        let cfg = RenderConfig::default();
        let base = TiledSplats::new(&s, 40, 30, 2, &cfg).unwrap().composite().0;
        let mut shuffled = s.clone();
        shuffled.reverse();
        sort_splats(&mut shuffled);
        let again = TiledSplats::new(&shuffled, 40, 30, 2, &cfg).unwrap().composite().0;
        assert_eq!(base, again);
        let scaled: Vec<_> = s
            .iter()
            .map(|sp| SplattedGaussian2D {
                amplitude: sp.amplitude.iter().map(|a| a * -2.5).collect(),
                ..sp.clone()
            })
            .collect();
        let img = TiledSplats::new(&scaled, 40, 30, 2, &cfg).unwrap().composite().0;
        for (a, b) in img.data().iter().zip(base.data()) {
            assert!((a - -2.5 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn transmittance_in_unit_interval() {
        let s = random_splats(60, 32, 32, 9);
        let (_, t) = TiledSplats::new(&s, 32, 32, 2, &RenderConfig::default()).unwrap().composite();
        assert!(t.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn active_pixels() {
        let z = FieldImage::zeros(10, 10, 1);
        let a = active_pixel_set(&z, 0.0);
        assert!(a.indices.is_empty());
        assert_eq!(a.fraction, 0.0);
        let mut one = z.clone();
        one.set(3, 4, 0, 1e-3);
        let a = active_pixel_set(&one, 0.0);
        assert_eq!(a.indices, vec![43]);
        assert!((a.fraction - 0.01).abs() < 1e-15);
    }

    #[test]
    fn footprint_bounds_active_fraction() {
        // isolated splats: the active set lies within the union of the
        // truncated elliptical footprints, counted independently
        let s = random_splats(6, 64, 64, 2);
        let cfg = RenderConfig::default();
        let field = TiledSplats::new(&s, 64, 64, 2, &cfg).unwrap().composite().0;
        let cutoff = cfg.truncation_sigmas * cfg.truncation_sigmas;
        let mut covered = 0;
        for y in 0..64 {
            for x in 0..64 {
                let inside = s.iter().any(|sp| {
                    let g = sp.eval(x as f64, y as f64);
                    -g.ln() <= cutoff
                });
                covered += inside as usize;
            }
        }
        let frac = active_pixel_set(&field, 0.0).fraction;
        assert!(frac <= covered as f64 / 4096.0 + 1e-12, "{frac} vs {covered}");
    }

    #[test]
    fn opacity_logit_chain() {
        let p = GaussianParticle {
            opacity_logit: logit(0.3),
            ..GaussianParticle::isotropic([0.0, 0.0, 3.0], 0.2, vec![1.0], 0.3)
        };
        assert!((p.opacity() - 0.3).abs() < 1e-12);
    }
}
