//! Seeded inputs shared by the benchmarks.

use gdgs::{Aabb, Camera, FieldImage, GaussianParticle, Scene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sum of a few random low-frequency cosines, one channel.
pub fn smooth_image(n: usize, seed: u64) -> FieldImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let terms: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                rng.random_range(-1.0..1.0),
                rng.random_range(0.5..4.0),
                rng.random_range(0.5..4.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    FieldImage::from_fn(n, n, 1, |x, y, _| {
        let (u, v) = (x as f64 / n as f64, y as f64 / n as f64);
        terms
            .iter()
            .map(|(a, fx, fy, ph)| a * (std::f64::consts::TAU * (fx * u + fy * v) + ph).cos())
            .sum()
    })
}

/// `count` random particles in front of a camera looking down +z.
pub fn random_scene(count: usize, channels: usize, seed: u64) -> (Scene, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let particles = (0..count)
        .map(|_| {
            let center = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(2.5..3.5)];
            let amp = (0..channels).map(|_| rng.random_range(-0.5..0.5)).collect();
            GaussianParticle::isotropic(center, rng.random_range(0.01..0.06), amp, rng.random_range(0.2..0.9))
        })
        .collect();
    let scene = Scene {
        particles,
        bounds: Aabb::new([-1.5, -1.5, 2.0], [1.5, 1.5, 4.0]),
        dc_model: vec![0.5; channels],
        laplacian_density: None,
    };
    (scene, Camera::identity(128.0, 128, 128))
}
