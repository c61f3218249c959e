use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::Mode;
use crate::error::{Error, Result};
use crate::scene::Scene;
use crate::splat::ParticleGrad;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensifyConfig {
    /// Average screen-space positional gradient norm that triggers growth.
    pub grad_threshold: f64,
    pub amplitude_prune_eps: f64,
    pub opacity_prune_eps: f64,
    /// Largest scale, relative to the scene extent, below which a particle
    /// is cloned rather than split.
    pub split_scale_threshold: f64,
    /// Particles whose largest scale exceeds this fraction of the scene
    /// extent are pruned.
    pub max_scale_ratio: f64,
    /// Keep the summed Laplacian mass unchanged when growing: a clone halves
    /// the amplitude of both copies and split children scale theirs by
    /// `1.6² / 2`. Used for signed Laplacian amplitudes, not for colors.
    pub conserve_amplitude: bool,
    /// Zero disables densification.
    pub interval_steps: usize,
    pub start_step: usize,
    pub stop_step: usize,
    pub max_particles: usize,
}

impl DensifyConfig {
    pub fn for_mode(mode: Mode) -> Self {
        Self {
            grad_threshold: match mode {
                Mode::Gdgs => 5e-5,
                Mode::Classic => 2e-5,
            },
            amplitude_prune_eps: match mode {
                Mode::Gdgs => 1e-3,
                Mode::Classic => 0.0,
            },
            opacity_prune_eps: 5e-3,
            split_scale_threshold: 0.01,
            max_scale_ratio: 0.1,
            conserve_amplitude: mode == Mode::Gdgs,
            interval_steps: 100,
            start_step: 300,
            stop_step: 2500,
            max_particles: 20_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = [
            self.grad_threshold,
            self.amplitude_prune_eps,
            self.opacity_prune_eps,
            self.split_scale_threshold,
            self.max_scale_ratio,
        ];
        if t.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("densify thresholds must be finite and >= 0: {self:?}")));
        }
        if self.max_particles == 0 {
            return Err(Error::Config("max_particles must be positive".into()));
        }
        Ok(())
    }
}

/// Running average of the screen-space positional gradient per particle.
#[derive(Debug, Clone, PartialEq)]
pub struct GradAccumulator {
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl GradAccumulator {
    pub fn new(n: usize) -> Self {
        Self {
            sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    /// Record one view; particles with no screen-space gradient are treated
    /// as not visible.
    pub fn add(&mut self, grads: &[ParticleGrad]) {
        for (i, g) in grads.iter().enumerate() {
            if g.mean2d_norm > 0.0 {
                self.sum[i] += g.mean2d_norm;
                self.count[i] += 1;
            }
        }
    }

    pub fn average(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.sum[i] / self.count[i] as f64
        }
    }

    pub fn len(&self) -> usize {
        self.sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sum.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DensifyStats {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Grow particles with large positional gradients, then prune negligible
/// ones. Small particles are cloned one scale unit along their dominant axis;
/// large ones are replaced by two samples with scales divided by 1.6. The
/// accumulator is reset and the optimizer state (if given) is kept aligned.
pub fn densify_prune<R: Rng>(
    scene: &mut Scene,
    accum: &mut GradAccumulator,
    cfg: &DensifyConfig,
    extent: f64,
    allow_growth: bool,
    rng: &mut R,
    adam: Option<&mut Adam>,
) -> DensifyStats {
    let n = scene.len();
    let mut stats = DensifyStats::default();
    let mut keep = vec![true; n];
    let mut added = Vec::new();

    if allow_growth {
        let split_limit = cfg.split_scale_threshold * extent;
        for i in 0..n {
            if accum.average(i) < cfg.grad_threshold {
                continue;
            }
            if n - stats.split + added.len() >= cfg.max_particles {
                break;
            }
            if cfg.conserve_amplitude && scene.particles[i].max_scale() <= split_limit {
                for a in &mut scene.particles[i].amplitude {
                    *a *= 0.5;
                }
            }
            let p = &scene.particles[i];
            let scale = p.scale();
            let rot = p.rotation_matrix();
            if p.max_scale() <= split_limit {
                let axis = scale.imax();
                let offset = rot.column(axis) * scale[axis];
                let mut q = p.clone();
                for k in 0..3 {
                    q.center[k] += offset[k];
                }
                added.push(q);
                stats.cloned += 1;
            } else {
                for _ in 0..2 {
                    let z = Vector3::new(
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                        rng.sample::<f64, _>(StandardNormal),
                    );
                    let offset = rot * scale.component_mul(&z);
                    let mut q = p.clone();
                    for k in 0..3 {
                        q.center[k] += offset[k];
                        q.log_scale[k] -= 1.6f64.ln();
                    }
                    if cfg.conserve_amplitude {
                        for a in &mut q.amplitude {
                            *a *= 1.6 * 1.6 / 2.0;
                        }
                    }
                    added.push(q);
                }
                keep[i] = false;
                stats.split += 1;
            }
        }
    }

    // the same containment rule as scene validation, so a pruned scene
    // always reloads
    let bounds = scene.bounds;
    let negligible = |p: &crate::scene::GaussianParticle| {
        let amp = p.amplitude.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        let s = p.max_scale();
        amp < cfg.amplitude_prune_eps
            || p.opacity() < cfg.opacity_prune_eps
            || (cfg.max_scale_ratio > 0.0 && s > cfg.max_scale_ratio * extent)
            || !bounds.contains_inflated(&p.center, 3.0 * s)
    };
    for (i, p) in scene.particles.iter().enumerate() {
        if keep[i] && negligible(p) {
            keep[i] = false;
            stats.pruned += 1;
        }
    }
    let before = added.len();
    added.retain(|p| !negligible(p));
    stats.pruned += before - added.len();

    // a scene never becomes empty: keep the most significant particle
    if added.is_empty() && !keep.iter().any(|k| *k) && n > 0 {
        let best = (0..n)
            .max_by(|&a, &b| {
                let s = |i: usize| {
                    let p = &scene.particles[i];
                    p.opacity() * p.amplitude.iter().fold(0.0f64, |m, a| m.max(a.abs()))
                };
                s(a).total_cmp(&s(b))
            })
            .unwrap();
        keep[best] = true;
        stats.pruned -= 1;
    }

    let mut i = 0;
    scene.particles.retain(|_| {
        i += 1;
        keep[i - 1]
    });
    let fresh = added.len();
    scene.particles.extend(added);
    if let Some(a) = adam {
        a.retain(&keep);
        a.push_fresh(fresh);
    }
    *accum = GradAccumulator::new(scene.len());
    stats
}
