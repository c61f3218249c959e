use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Scene;
use crate::splat::ParticleGrad;

/// Per-group step sizes. The center rate is relative to the scene extent and
/// decays exponentially to `center * center_final_ratio` over the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub center: f64,
    pub center_final_ratio: f64,
    pub rotation: f64,
    pub log_scale: f64,
    pub amplitude: f64,
    pub opacity: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            center: 2e-4,
            center_final_ratio: 0.01,
            rotation: 1e-3,
            log_scale: 5e-3,
            amplitude: 2.5e-2,
            opacity: 5e-2,
        }
    }
}

impl LearningRates {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.center,
            self.center_final_ratio,
            self.rotation,
            self.log_scale,
            self.amplitude,
            self.opacity,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("learning rates must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-15;

/// Moment state for one particle. The step count is per particle so freshly
/// inserted particles get properly bias-corrected first steps.
#[derive(Debug, Clone, PartialEq)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Slot {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Adaptive moment estimation over every particle parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    lr: LearningRates,
    extent: f64,
    width: usize,
    slots: Vec<Slot>,
    steps: u64,
}

fn pack(g: &ParticleGrad, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(&g.center);
    out.extend_from_slice(&g.rotation);
    out.extend_from_slice(&g.log_scale);
    out.extend_from_slice(&g.amplitude);
    out.push(g.opacity_logit);
}

impl Adam {
    pub fn new(scene: &Scene, lr: LearningRates, extent: f64) -> Self {
        let width = 11 + scene.channels();
        Self {
            lr,
            extent,
            width,
            slots: (0..scene.len()).map(|_| Slot::new(width)).collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Keep only the particles whose flag is set.
    pub(crate) fn retain(&mut self, keep: &[bool]) {
        let mut i = 0;
        self.slots.retain(|_| {
            i += 1;
            keep[i - 1]
        });
    }

    pub(crate) fn push_fresh(&mut self, n: usize) {
        let w = self.width;
        self.slots.extend((0..n).map(|_| Slot::new(w)));
    }

    /// Apply one update. `progress` in `[0, 1]` drives the center decay.
    pub fn update(&mut self, scene: &mut Scene, grads: &[ParticleGrad], progress: f64) {
        debug_assert_eq!(grads.len(), scene.len());
        debug_assert_eq!(self.slots.len(), scene.len());
        self.steps += 1;
        let lr = &self.lr;
        let center_lr = lr.center * self.extent * lr.center_final_ratio.powf(progress.clamp(0.0, 1.0));
        let ch = scene.channels();
        let mut rates = Vec::with_capacity(self.width);
        rates.extend([center_lr; 3]);
        rates.extend([lr.rotation; 4]);
        rates.extend([lr.log_scale; 3]);
        rates.extend(std::iter::repeat_n(lr.amplitude, ch));
        rates.push(lr.opacity);

        let mut g = Vec::with_capacity(self.width);
        let mut delta = vec![0.0; self.width];
        for ((p, grad), slot) in scene.particles.iter_mut().zip(grads).zip(&mut self.slots) {
            pack(grad, &mut g);
            slot.t += 1;
            let bc1 = 1.0 - BETA1.powi(slot.t as i32);
            let bc2 = 1.0 - BETA2.powi(slot.t as i32);
            for i in 0..g.len() {
                slot.m[i] = BETA1 * slot.m[i] + (1.0 - BETA1) * g[i];
                slot.v[i] = BETA2 * slot.v[i] + (1.0 - BETA2) * g[i] * g[i];
                let mh = slot.m[i] / bc1;
                let vh = slot.v[i] / bc2;
                delta[i] = rates[i] * mh / (vh.sqrt() + EPS);
            }
            for k in 0..3 {
                p.center[k] -= delta[k];
                p.log_scale[k] -= delta[7 + k];
            }
            for k in 0..4 {
                p.rotation[k] -= delta[3 + k];
            }
            for k in 0..ch {
                p.amplitude[k] -= delta[10 + k];
            }
            p.opacity_logit -= delta[10 + ch];
            p.normalize_rotation();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{quat_norm, Aabb, GaussianParticle};

    fn scene() -> Scene {
        Scene {
            particles: vec![GaussianParticle::isotropic([0.0, 0.0, 1.0], 0.1, vec![0.5, 0.2], 0.5)],
            bounds: Aabb::new([-1.0; 3], [1.0; 3]),
            dc_model: vec![0.0, 0.0],
            laplacian_density: None,
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = scene();
        let mut adam = Adam::new(&s, LearningRates::default(), 2.0);
        let mut g = ParticleGrad::zero(2);
        g.amplitude = vec![3.0, -1e-9];
        g.center = [1.0, 0.0, 0.0];
        adam.update(&mut s, &[g], 0.0);
        let p = &s.particles[0];
        assert!((p.amplitude[0] - (0.5 - 2.5e-2)).abs() < 1e-12);
        assert!((p.amplitude[1] - (0.2 + 2.5e-2)).abs() < 1e-7);
        assert!((p.center[0] + 2e-4 * 2.0).abs() < 1e-12);
        assert_eq!(p.center[1], 0.0);
    }

    #[test]
    fn rotation_stays_normalized() {
        let mut s = scene();
        let mut adam = Adam::new(&s, LearningRates::default(), 1.0);
        for i in 0..50 {
            let mut g = ParticleGrad::zero(2);
            g.rotation = [0.3, -1.0, (i as f64).sin(), 2.0];
            adam.update(&mut s, &[g], i as f64 / 50.0);
            assert!((quat_norm(&s.particles[0].rotation) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn retain_and_push() {
        let mut s = scene();
        s.particles.push(s.particles[0].clone());
        let mut adam = Adam::new(&s, LearningRates::default(), 1.0);
        adam.retain(&[true, false]);
        assert_eq!(adam.len(), 1);
        adam.push_fresh(3);
        assert_eq!(adam.len(), 4);
    }
}
