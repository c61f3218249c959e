//! Differentiable rendering and scene optimization.
//!
//! Two render modes share the projection and compositing code:
//! [`Mode::Gdgs`] composites signed Laplacian amplitudes and recovers the image
//! with a Neumann Poisson solve, [`Mode::Classic`] composites colors directly.

mod adam;
mod densify;
pub mod gradcheck;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{Adam, LearningRates};
pub use densify::{densify_prune, DensifyConfig, DensifyStats, GradAccumulator};

use crate::error::{Error, Result};
use crate::field::FieldImage;
use crate::loss::{loss_gdgs_with_grad, psnr, LossConfig};
use crate::poisson::{PoissonProblem, PoissonSolver, SolverKind};
use crate::scene::{Camera, Scene};
use crate::splat::{ParticleGrad, RenderConfig, SplatPass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Laplacian splatting followed by a Poisson solve.
    Gdgs,
    /// Classical color splatting.
    #[serde(rename = "3dgs")]
    Classic,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Gdgs => "gdgs",
            Mode::Classic => "3dgs",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gdgs" => Ok(Mode::Gdgs),
            "3dgs" | "classic" => Ok(Mode::Classic),
            _ => Err(Error::Config(format!("unknown mode '{s}', expected gdgs or 3dgs"))),
        }
    }
}

/// Splat the scene's Laplacian amplitudes for `cam` (the pre-solve field).
pub fn render_laplacian(scene: &Scene, cam: &Camera, cfg: &RenderConfig) -> Result<FieldImage> {
    Ok(SplatPass::run(scene, cam, cfg)?.field)
}

/// Full GDGS forward pass with the scene's DC model pinning the mean.
pub fn render_gdgs(scene: &Scene, cam: &Camera, cfg: &RenderConfig, solver: &PoissonSolver) -> Result<FieldImage> {
    render_gdgs_with_dc(scene, cam, cfg, solver, &scene.dc_model)
}

pub fn render_gdgs_with_dc(
    scene: &Scene,
    cam: &Camera,
    cfg: &RenderConfig,
    solver: &PoissonSolver,
    dc: &[f64],
) -> Result<FieldImage> {
    let field = render_laplacian(scene, cam, cfg)?;
    Ok(solver.solve(&PoissonProblem::new(field, dc.to_vec())?)?.0)
}

/// Classical alpha-blended color image.
pub fn render_3dgs(scene: &Scene, cam: &Camera, cfg: &RenderConfig) -> Result<FieldImage> {
    Ok(SplatPass::run(scene, cam, cfg)?.field)
}

/// Renders views of one size in either mode, owning the solver.
#[derive(Debug, Clone)]
pub struct Renderer {
    pub mode: Mode,
    pub config: RenderConfig,
    solver: Option<PoissonSolver>,
}

impl Renderer {
    pub fn new(mode: Mode, config: RenderConfig, solver: SolverKind, width: usize, height: usize) -> Result<Self> {
        config.validate()?;
        let solver = match mode {
            Mode::Gdgs => Some(PoissonSolver::new(solver, width, height)?),
            Mode::Classic => None,
        };
        Ok(Self { mode, config, solver })
    }

    pub fn solver(&self) -> Option<&PoissonSolver> {
        self.solver.as_ref()
    }

    fn check_size(&self, cam: &Camera) -> Result<()> {
        if let Some(s) = &self.solver {
            if s.size() != (cam.width, cam.height) {
                return Err(Error::ShapeMismatch {
                    expected: format!("{}x{} view", s.size().0, s.size().1),
                    got: format!("{}x{}", cam.width, cam.height),
                });
            }
        }
        Ok(())
    }

    pub fn render(&self, scene: &Scene, cam: &Camera) -> Result<FieldImage> {
        self.render_with_dc(scene, cam, &scene.dc_model)
    }

    pub fn render_with_dc(&self, scene: &Scene, cam: &Camera, dc: &[f64]) -> Result<FieldImage> {
        self.check_size(cam)?;
        match &self.solver {
            Some(solver) => render_gdgs_with_dc(scene, cam, &self.config, solver, dc),
            None => render_3dgs(scene, cam, &self.config),
        }
    }

    /// Loss against `target` and its gradient for every particle.
    pub fn backward(&self, scene: &Scene, cam: &Camera, target: &FieldImage, loss: &LossConfig) -> Result<Evaluation> {
        self.check_size(cam)?;
        if (target.width(), target.height(), target.channels()) != (cam.width, cam.height, scene.channels()) {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}x{}", cam.width, cam.height, scene.channels()),
                got: target.shape_string(),
            });
        }
        let pass = SplatPass::run(scene, cam, &self.config)?;
        let (image, grad_field) = match &self.solver {
            Some(solver) => {
                let dc = target.channel_means();
                let (image, _) = solver.solve(&PoissonProblem::new(pass.field.clone(), dc)?)?;
                let (value, grad_image) = loss_gdgs_with_grad(&image, target, loss)?;
                // the pinned solve is symmetric on mean-free fields
                let grad_field = solver.solve(&PoissonProblem::zero_mean(grad_image)?)?.0;
                (image, (value, grad_field))
            }
            None => {
                let (value, grad_image) = loss_gdgs_with_grad(&pass.field, target, loss)?;
                (pass.field.clone(), (value, grad_image))
            }
        };
        let (value, grad_field) = grad_field;
        let grads = pass.backward(scene, cam, &grad_field);
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of particle {i} is not finite: {:?}",
                grads[i]
            )));
        }
        Ok(Evaluation {
            loss: value,
            image,
            field: pass.field,
            grads,
        })
    }
}

/// Result of one forward/backward pass.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub image: FieldImage,
    /// The composited field (Laplacian in GDGS mode, equal to `image` otherwise).
    pub field: FieldImage,
    pub grads: Vec<ParticleGrad>,
}

/// A posed training image.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub camera: Camera,
    pub image: FieldImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub steps: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub render: RenderConfig,
    pub solver: SolverKind,
    pub lr: LearningRates,
    pub densify: DensifyConfig,
    /// Training-view PSNR is logged every this many steps (and on the last).
    pub psnr_interval: usize,
}

impl TrainConfig {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            steps: 3000,
            seed: 0,
            loss: match mode {
                Mode::Gdgs => LossConfig::default(),
                Mode::Classic => LossConfig::with_weights(0.2, 0.0),
            },
            render: RenderConfig::default(),
            solver: SolverKind::default(),
            lr: LearningRates::default(),
            densify: DensifyConfig::for_mode(mode),
            psnr_interval: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.render.validate()?;
        self.lr.validate()?;
        self.densify.validate()?;
        if self.psnr_interval == 0 {
            return Err(Error::Config("psnr_interval must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub psnr: Option<f64>,
    pub particle_count: usize,
}

pub const METRICS_HEADER: &str = "step,loss,psnr,particle_count";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let psnr = r.psnr.map(|p| format!("{p:.6}")).unwrap_or_default();
        out.push_str(&format!("{},{:.10e},{},{}\n", r.step, r.loss, psnr, r.particle_count));
    }
    out
}

/// Median over `views` of the pixels per world unit at the center of the
/// scene bounds.
pub fn reference_density(scene: &Scene, views: &[TrainView]) -> f64 {
    let c = nalgebra::Vector3::from(scene.bounds.center());
    let mut d: Vec<f64> = views
        .iter()
        .map(|v| {
            let z = v.camera.to_camera(&c).z.abs().max(1e-9);
            v.camera.fx / z
        })
        .collect();
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

/// Stateful optimizer over one scene and a fixed set of training views.
pub struct Trainer<'a> {
    scene: Scene,
    views: &'a [TrainView],
    cfg: TrainConfig,
    renderer: Renderer,
    adam: Adam,
    accum: GradAccumulator,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
    log: Vec<MetricsRow>,
    densify_suspended: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(mut scene: Scene, views: &'a [TrainView], cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        scene.validate()?;
        let first = views
            .first()
            .ok_or_else(|| Error::Config("training needs at least one view".into()))?;
        let (w, h) = (first.camera.width, first.camera.height);
        for (i, v) in views.iter().enumerate() {
            v.camera.validate()?;
            if (v.camera.width, v.camera.height) != (w, h)
                || (v.image.width(), v.image.height(), v.image.channels()) != (w, h, scene.channels())
            {
                return Err(Error::ShapeMismatch {
                    expected: format!("{w}x{h}x{} for every view", scene.channels()),
                    got: format!("view {i}: {}", v.image.shape_string()),
                });
            }
        }
        if cfg.mode == Mode::Gdgs {
            let mut dc = vec![0.0; scene.channels()];
            for v in views {
                for (d, m) in dc.iter_mut().zip(v.image.channel_means()) {
                    *d += m / views.len() as f64;
                }
            }
            scene.dc_model = dc;
            if scene.laplacian_density.is_none() {
                scene.laplacian_density = Some(reference_density(&scene, views));
            }
        }
        let renderer = Renderer::new(cfg.mode, cfg.render, cfg.solver, w, h)?;
        let adam = Adam::new(&scene, cfg.lr, scene.bounds.extent());
        let accum = GradAccumulator::new(scene.len());
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            scene,
            views,
            cfg,
            renderer,
            adam,
            accum,
            order: Vec::new(),
            cursor: 0,
            step: 0,
            log: Vec::new(),
            densify_suspended: false,
        })
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn log(&self) -> &[MetricsRow] {
        &self.log
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn renderer(&self) -> &Renderer {
        &self.renderer
    }

    fn next_view(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order = (0..self.views.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    /// One forward/backward/update iteration.
    pub fn step(&mut self) -> Result<&MetricsRow> {
        let v = self.next_view();
        let view = &self.views[v];
        let eval = self
            .renderer
            .backward(&self.scene, &view.camera, &view.image, &self.cfg.loss)?;
        self.step += 1;
        self.accum.add(&eval.grads);
        let progress = self.step as f64 / self.cfg.steps.max(1) as f64;
        self.adam.update(&mut self.scene, &eval.grads, progress);

        let last = self.step == self.cfg.steps;
        let psnr_value = if self.step.is_multiple_of(self.cfg.psnr_interval) || last {
            Some(psnr(&eval.image, &view.image)?)
        } else {
            None
        };
        self.log.push(MetricsRow {
            step: self.step,
            loss: eval.loss,
            psnr: psnr_value,
            particle_count: self.scene.len(),
        });

        let d = &self.cfg.densify;
        if d.interval_steps > 0
            && self.step.is_multiple_of(d.interval_steps)
            && self.step >= d.start_step
            && self.step <= d.stop_step
        {
            self.densify();
        }
        Ok(self.log.last().unwrap())
    }

    fn densify(&mut self) {
        let d = self.cfg.densify;
        let allow_growth = self.scene.len() < d.max_particles;
        if !allow_growth && !self.densify_suspended {
            log::warn!(
                "event=densify_suspended step={} particles={} max_particles={}",
                self.step,
                self.scene.len(),
                d.max_particles
            );
        }
        self.densify_suspended = !allow_growth;
        let extent = self.scene.bounds.extent();
        let stats = densify_prune(
            &mut self.scene,
            &mut self.accum,
            &d,
            extent,
            allow_growth,
            &mut self.rng,
            Some(&mut self.adam),
        );
        log::debug!(
            "event=densify step={} cloned={} split={} pruned={} particles={}",
            self.step,
            stats.cloned,
            stats.split,
            stats.pruned,
            self.scene.len()
        );
    }

    /// Run until the configured step count.
    pub fn run(&mut self) -> Result<()> {
        while self.step < self.cfg.steps {
            self.step()?;
        }
        Ok(())
    }

    pub fn into_parts(self) -> (Scene, Vec<MetricsRow>) {
        (self.scene, self.log)
    }
}

/// Optimize `scene` against `views` for `cfg.steps` iterations.
pub fn train(scene: Scene, views: &[TrainView], cfg: &TrainConfig) -> Result<(Scene, Vec<MetricsRow>)> {
    let mut t = Trainer::new(scene, views, cfg.clone())?;
    t.run()?;
    Ok(t.into_parts())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poisson::discrete_laplacian;
    use crate::scene::{Aabb, GaussianParticle};

    fn cam(n: usize) -> Camera {
        Camera::identity(n as f64, n, n)
    }

    fn one_splat(amp: f64) -> Scene {
        Scene {
            particles: vec![GaussianParticle::isotropic([0.0, 0.0, 2.0], 0.1, vec![amp], 0.9)],
            bounds: Aabb::new([-1.0, -1.0, 1.0], [1.0, 1.0, 3.0]),
            dc_model: vec![0.4],
            laplacian_density: None,
        }
    }

    #[test]
    fn zero_amplitude_renders_dc() {
        let s = one_splat(0.0);
        let solver = PoissonSolver::new(SolverKind::default(), 32, 32).unwrap();
        let img = render_gdgs(&s, &cam(32), &RenderConfig::default(), &solver).unwrap();
        assert!(img.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn single_splat_is_harmonic_outside_footprint() {
        let s = one_splat(0.5);
        let cfg = RenderConfig::default();
        let c = cam(48);
        let solver = PoissonSolver::new(SolverKind::Multigrid { tol: 1e-10, max_cycles: 60 }, 48, 48).unwrap();
        let img = render_gdgs(&s, &c, &cfg, &solver).unwrap();
        let field = render_laplacian(&s, &c, &cfg).unwrap();
        let lap = discrete_laplacian(&img);
        let mean = field.channel_means()[0];
        let sp = crate::splat::project(&s.particles[0], &c, &cfg).unwrap();
        let r = sp.radius(cfg.truncation_sigmas);
        for y in 0..48 {
            for x in 0..48 {
                let (dx, dy) = (x as f64 - sp.mean2d[0], y as f64 - sp.mean2d[1]);
                if (dx * dx + dy * dy).sqrt() > r + 1.0 {
                    // only the compatibility shift remains away from the splat
                    assert!((lap.get(x, y, 0) + mean).abs() < 1e-7);
                }
            }
        }
        // a positive Laplacian bump is a local minimum of the image
        let (mut min, mut at) = (f64::INFINITY, (0, 0));
        for y in 0..48 {
            for x in 0..48 {
                if img.get(x, y, 0) < min {
                    min = img.get(x, y, 0);
                    at = (x, y);
                }
            }
        }
        assert!((at.0 as f64 - sp.mean2d[0]).abs() <= 1.0 && (at.1 as f64 - sp.mean2d[1]).abs() <= 1.0);
    }

    #[test]
    fn laplacian_of_known_image_recovers_it() {
        // a scene whose splatted field is exactly Δim: solve gives im back
        let n = 24;
        let im = FieldImage::from_fn(n, n, 1, |x, y, _| 0.5 + 0.3 * ((x as f64) * 0.3).sin() * ((y as f64) * 0.2).cos());
        let lap = discrete_laplacian(&im);
        let solver = PoissonSolver::new(SolverKind::default(), n, n).unwrap();
        let dc = im.channel_means();
        let (back, _) = solver.solve(&PoissonProblem::new(lap, dc).unwrap()).unwrap();
        assert!(back.max_abs_diff(&im) < 1e-7);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("gdgs".parse::<Mode>().unwrap(), Mode::Gdgs);
        assert_eq!("3dgs".parse::<Mode>().unwrap(), Mode::Classic);
        assert!("x".parse::<Mode>().is_err());
        assert_eq!(Mode::Classic.to_string(), "3dgs");
    }

    #[test]
    fn zero_steps_leave_scene_unchanged() {
        let s = one_splat(0.2);
        let c = cam(16);
        let views = vec![TrainView {
            camera: c.clone(),
            image: FieldImage::filled(16, 16, 1, 0.4),
        }];
        let mut cfg = TrainConfig::new(Mode::Gdgs);
        cfg.steps = 0;
        let (out, log) = train(s.clone(), &views, &cfg).unwrap();
        assert_eq!(out.particles, s.particles);
        assert!(log.is_empty());
    }

    #[test]
    fn metrics_csv_format() {
        let rows = vec![
            MetricsRow {
                step: 1,
                loss: 0.5,
                psnr: None,
                particle_count: 3,
            },
            MetricsRow {
                step: 2,
                loss: 0.25,
                psnr: Some(20.0),
                particle_count: 3,
            },
        ];
        let csv = metrics_csv(&rows);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines[1], "1,5.0000000000e-1,,3");
        assert_eq!(lines[2], "2,2.5000000000e-1,20.000000,3");
    }
}
