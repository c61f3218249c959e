//! Central finite-difference check of the analytic particle gradients.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Mode, Renderer};
use crate::error::Result;
use crate::field::FieldImage;
use crate::loss::{loss_gdgs, LossConfig};
use crate::poisson::SolverKind;
use crate::scene::{logit, quat_from_axis_angle, Aabb, Camera, GaussianParticle, Scene};
use crate::splat::{ParticleGrad, RenderConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Center,
    Rotation,
    LogScale,
    Amplitude,
    Opacity,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Center,
        ParamGroup::Rotation,
        ParamGroup::LogScale,
        ParamGroup::Amplitude,
        ParamGroup::Opacity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Center => "center",
            ParamGroup::Rotation => "rotation",
            ParamGroup::LogScale => "log_scale",
            ParamGroup::Amplitude => "amplitude",
            ParamGroup::Opacity => "opacity",
        }
    }

    fn len(self, channels: usize) -> usize {
        match self {
            ParamGroup::Center | ParamGroup::LogScale => 3,
            ParamGroup::Rotation => 4,
            ParamGroup::Amplitude => channels,
            ParamGroup::Opacity => 1,
        }
    }

    fn param(self, p: &mut GaussianParticle, k: usize) -> &mut f64 {
        match self {
            ParamGroup::Center => &mut p.center[k],
            ParamGroup::Rotation => &mut p.rotation[k],
            ParamGroup::LogScale => &mut p.log_scale[k],
            ParamGroup::Amplitude => &mut p.amplitude[k],
            ParamGroup::Opacity => &mut p.opacity_logit,
        }
    }

    fn grad(self, g: &ParticleGrad, k: usize) -> f64 {
        match self {
            ParamGroup::Center => g.center[k],
            ParamGroup::Rotation => g.rotation[k],
            ParamGroup::LogScale => g.log_scale[k],
            ParamGroup::Amplitude => g.amplitude[k],
            ParamGroup::Opacity => g.opacity_logit,
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub mode: Mode,
    pub lambda: f64,
    pub beta: f64,
    pub particles: usize,
    pub size: usize,
    pub channels: usize,
    /// Finite-difference step.
    pub step: f64,
    /// Components with smaller analytic magnitude are skipped.
    pub min_grad: f64,
    /// Set every amplitude to zero before checking.
    pub zero_amplitude: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::Gdgs,
            lambda: 0.2,
            beta: 0.2,
            particles: 3,
            size: 32,
            channels: 3,
            step: 1e-5,
            min_grad: 1e-6,
            zero_amplitude: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub group: ParamGroup,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub config: GradcheckConfig,
    pub groups: Vec<GroupError>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }

    /// One `key=value` line per group.
    pub fn lines(&self) -> Vec<String> {
        let c = &self.config;
        self.groups
            .iter()
            .map(|g| {
                format!(
                    "gradcheck mode={} seed={} lambda={} beta={} group={} max_rel_err={:.3e} checked={} skipped={}",
                    c.mode, c.seed, c.lambda, c.beta, g.group, g.max_rel_err, g.checked, g.skipped
                )
            })
            .collect()
    }
}

/// Randomized small scene, camera and target image for gradient checks.
///
/// The target is the scene's own render plus a signed offset of magnitude
/// 0.05 to 0.095. Both `c − im` and its forward differences then stay well
/// away from zero, where the L1 terms are not differentiable.
pub fn random_problem(cfg: &GradcheckConfig) -> Result<(Scene, Camera, FieldImage)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.size;
    let eye = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3)];
    let cam = Camera::look_at(eye, [0.0, 0.0, 3.0], [0.0, -1.0, 0.0], n as f64 * 1.2, n, n)?;
    let particles = (0..cfg.particles)
        .map(|_| {
            let z = rng.random_range(2.5..3.5);
            let axis = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            GaussianParticle {
                center: [rng.random_range(-0.4..0.4) * z / 1.2, rng.random_range(-0.4..0.4) * z / 1.2, z],
                rotation: quat_from_axis_angle(axis, rng.random_range(0.0..3.0)),
                log_scale: [
                    rng.random_range(0.1f64..0.3).ln(),
                    rng.random_range(0.1f64..0.3).ln(),
                    rng.random_range(0.1f64..0.3).ln(),
                ],
                amplitude: (0..cfg.channels)
                    .map(|_| match cfg.mode {
                        _ if cfg.zero_amplitude => 0.0,
                        Mode::Gdgs => rng.random_range(-0.15..0.15),
                        Mode::Classic => rng.random_range(0.1..1.0),
                    })
                    .collect(),
                opacity_logit: logit(rng.random_range(0.3..0.8)),
            }
        })
        .collect();
    let scene = Scene {
        particles,
        bounds: Aabb::new([-2.0, -2.0, 1.0], [2.0, 2.0, 5.0]),
        dc_model: vec![0.5; cfg.channels],
        laplacian_density: match cfg.mode {
            Mode::Gdgs => Some(n as f64 * rng.random_range(0.3..0.5)),
            Mode::Classic => None,
        },
    };
    let renderer = Renderer::new(cfg.mode, RenderConfig::exact(), SolverKind::Spectral, n, n)?;
    let base = renderer.render(&scene, &cam)?;
    // Signs follow an uneven 4-pixel block pattern so the L1 gradient does not
    // average out over a splat; magnitudes step by (x + 2y) mod 3 so that
    // neighboring offsets always differ.
    let target = FieldImage::from_fn(n, n, cfg.channels, |x, y, c| {
        let sign = if (x / 4 + y / 4) % 3 == 0 { -1.0 } else { 1.0 };
        let mag = 0.05 + 0.02 * ((x + 2 * y) % 3) as f64 + rng.random_range(0.0..0.005);
        base.get(x, y, c) + sign * mag
    });
    Ok((scene, cam, target))
}

/// Compare analytic gradients with central differences for every parameter
/// of every particle. Rendering uses a wide footprint, no early termination
/// and the exact solver so the loss is smooth in every parameter.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let (scene, cam, target) = random_problem(cfg)?;
    let loss_cfg = LossConfig::with_weights(cfg.lambda, cfg.beta);
    let renderer = Renderer::new(cfg.mode, RenderConfig::exact(), SolverKind::Spectral, cam.width, cam.height)?;
    let eval = renderer.backward(&scene, &cam, &target, &loss_cfg)?;
    let dc = target.channel_means();
    let loss_at = |s: &Scene| -> Result<f64> {
        let img = renderer.render_with_dc(s, &cam, &dc)?;
        loss_gdgs(&img, &target, &loss_cfg)
    };

    let mut groups = Vec::new();
    for group in ParamGroup::ALL {
        let mut err = GroupError {
            group,
            max_rel_err: 0.0,
            checked: 0,
            skipped: 0,
        };
        for i in 0..scene.len() {
            for k in 0..group.len(cfg.channels) {
                let analytic = group.grad(&eval.grads[i], k);
                if analytic.abs() <= cfg.min_grad {
                    err.skipped += 1;
                    continue;
                }
                let mut plus = scene.clone();
                *group.param(&mut plus.particles[i], k) += cfg.step;
                let mut minus = scene.clone();
                *group.param(&mut minus.particles[i], k) -= cfg.step;
                let numeric = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * cfg.step);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
                err.max_rel_err = err.max_rel_err.max(rel);
                err.checked += 1;
            }
        }
        groups.push(err);
    }
    Ok(GradcheckReport { config: *cfg, groups })
}
