use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;

use gdgs::io::{self, PngMapping};
use gdgs::sparsity::{report_rows, REPORT_HEADER};
use gdgs::synthetic::{bench_csv, benchmark_on, BenchConfig, SyntheticSceneSpec};
use gdgs::train::gradcheck::{gradcheck as run_gradcheck, GradcheckConfig};
use gdgs::train::metrics_csv;
use gdgs::{
    analyze, render_3dgs, Aabb, Error, FieldImage, Mode, PoissonProblem, PoissonSolver, Renderer, Result, Scene,
    SolverKind, SplatPass, TrainConfig, TrainView, Trainer,
};

use crate::config::Resolver;
use crate::Outcome;

/// Called once all settings are resolved: prints them and stops when
/// `--print-config` is set, otherwise sets up logging and threads.
pub trait Setup: FnOnce(&Resolver) -> Result<Option<Outcome>> {}
impl<F: FnOnce(&Resolver) -> Result<Option<Outcome>>> Setup for F {}

fn parse_list(key: &str, s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Config(format!("{key}: cannot parse {t:?} as a number")))
        })
        .collect()
}

fn solver_kind(name: &str, tol: f64, max_cycles: usize) -> Result<SolverKind> {
    match name {
        "spectral" => Ok(SolverKind::Spectral),
        "multigrid" => {
            if !(tol > 0.0) || max_cycles == 0 {
                return Err(Error::Config(format!(
                    "multigrid needs tol > 0 and max_cycles > 0, got {tol} and {max_cycles}"
                )));
            }
            Ok(SolverKind::Multigrid { tol, max_cycles })
        }
        _ => Err(Error::Config(format!("unknown solver {name:?}, expected spectral or multigrid"))),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn save_text(path: &Path, text: &str) -> Result<()> {
    io::write_atomic(path, text.as_bytes())
}

/// `prefix.png` and `prefix.pfm`.
fn output_pair(prefix: &str) -> (PathBuf, PathBuf) {
    let base = prefix
        .strip_suffix(".png")
        .or_else(|| prefix.strip_suffix(".pfm"))
        .unwrap_or(prefix);
    (PathBuf::from(format!("{base}.png")), PathBuf::from(format!("{base}.pfm")))
}

#[derive(Args, Debug)]
pub struct InitArgs {
    /// Box to fill: "min_x,min_y,min_z,max_x,max_y,max_z".
    #[arg(long, allow_hyphen_values = true)]
    bounds: Option<String>,
    /// Number of particles. [default: 1000]
    #[arg(long)]
    count: Option<usize>,
    /// Color channels. [default: 3]
    #[arg(long)]
    channels: Option<usize>,
    /// gdgs (zero amplitudes) or 3dgs (gray colors). [default: gdgs]
    #[arg(long)]
    mode: Option<Mode>,
    /// Random seed for particle placement. [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Output scene file (JSON).
    #[arg(long)]
    out: Option<String>,
}

pub fn init(a: InitArgs, r: &mut Resolver, setup: impl Setup) -> Result<Outcome> {
    let bounds_text: String = r.require("bounds", a.bounds)?;
    let count = r.get("count", a.count, 1000usize)?;
    let channels = r.get("channels", a.channels, 3usize)?;
    let mode = r.get("mode", a.mode, Mode::Gdgs)?;
    let seed = r.get("seed", a.seed, 0u64)?;
    let out: String = r.require("out", a.out)?;
    let b = parse_list("bounds", &bounds_text)?;
    if b.len() != 6 || (0..3).any(|k| b[k] > b[k + 3]) {
        return Err(Error::Config(format!(
            "bounds must be six numbers min_x,min_y,min_z,max_x,max_y,max_z with min <= max, got {bounds_text:?}"
        )));
    }
    if channels == 0 {
        return Err(Error::Config("channels must be positive".into()));
    }
    if let Some(o) = setup(r)? {
        return Ok(o);
    }
    let bounds = Aabb::new([b[0], b[1], b[2]], [b[3], b[4], b[5]]);
    let scene = gdgs::synthetic::init_scene(bounds, count, channels, mode, seed)?;
    io::save_scene(&scene, Path::new(&out))?;
    log::info!("event=init particles={} out={out}", scene.len());
    Ok(Outcome::Done)
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Initial scene file.
    #[arg(long)]
    scene: Option<String>,
    /// Camera file, one camera per training image.
    #[arg(long)]
    cameras: Option<String>,
    /// Directory of PNG images; sorted by file name they pair with the cameras.
    #[arg(long)]
    images_dir: Option<String>,
    /// Optimization steps. [default: 3000]
    #[arg(long)]
    steps: Option<usize>,
    /// gdgs or 3dgs. [default: gdgs]
    #[arg(long)]
    mode: Option<Mode>,
    /// D-SSIM weight. [default: 0.2]
    #[arg(long)]
    lambda: Option<f64>,
    /// Image-gradient L1 weight. [default: 0.2 for gdgs, 0 for 3dgs]
    #[arg(long)]
    beta: Option<f64>,
    /// Seed for view order and densification. [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Poisson solver: spectral or multigrid. [default: spectral]
    #[arg(long)]
    solver: Option<String>,
    /// Multigrid relative residual tolerance. [default: 1e-8]
    #[arg(long)]
    tol: Option<f64>,
    /// Multigrid V-cycle limit. [default: 50]
    #[arg(long)]
    max_cycles: Option<usize>,
    /// Mean screen-space gradient (per pixel) that triggers densification.
    /// [default: depends on mode]
    #[arg(long)]
    densify_threshold: Option<f64>,
    /// Steps between densification passes; 0 disables them. [default: 100]
    #[arg(long)]
    densify_interval: Option<usize>,
    /// Particle budget for densification. [default: 20000]
    #[arg(long)]
    max_particles: Option<usize>,
    /// Write a checkpoint scene every this many steps; 0 disables. [default: 1000]
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
}

fn load_views(cameras: &str, images_dir: &str) -> Result<Vec<TrainView>> {
    let cams = io::load_cameras(Path::new(cameras))?;
    let dir = Path::new(images_dir);
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Io {
            path: dir.into(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.len() != cams.len() {
        return Err(Error::InvalidScene(format!(
            "{} cameras but {} PNG images in {images_dir}",
            cams.len(),
            files.len()
        )));
    }
    cams.into_iter()
        .zip(files)
        .map(|(camera, f)| {
            Ok(TrainView {
                camera,
                image: io::load_png(&f)?,
            })
        })
        .collect()
}

pub fn train(a: TrainArgs, r: &mut Resolver, setup: impl Setup) -> Result<Outcome> {
    let scene_path: String = r.require("scene", a.scene)?;
    let cameras: String = r.require("cameras", a.cameras)?;
    let images_dir: String = r.require("images_dir", a.images_dir)?;
    let out: String = r.require("out", a.out)?;
    let mode = r.get("mode", a.mode, Mode::Gdgs)?;
    let mut cfg = TrainConfig::new(mode);
    cfg.steps = r.get("steps", a.steps, cfg.steps)?;
    cfg.loss.lambda = r.get("lambda", a.lambda, cfg.loss.lambda)?;
    cfg.loss.beta = r.get("beta", a.beta, cfg.loss.beta)?;
    cfg.seed = r.get("seed", a.seed, cfg.seed)?;
    let solver = r.get("solver", a.solver, "spectral".to_string())?;
    let tol = r.get("tol", a.tol, 1e-8)?;
    let max_cycles = r.get("max_cycles", a.max_cycles, 50usize)?;
    cfg.solver = solver_kind(&solver, tol, max_cycles)?;
    cfg.densify.grad_threshold = r.get("densify_threshold", a.densify_threshold, cfg.densify.grad_threshold)?;
    cfg.densify.interval_steps = r.get("densify_interval", a.densify_interval, cfg.densify.interval_steps)?;
    cfg.densify.max_particles = r.get("max_particles", a.max_particles, cfg.densify.max_particles)?;
    let checkpoint_every = r.get("checkpoint_every", a.checkpoint_every, 1000usize)?;
    if mode == Mode::Classic && cfg.loss.beta != 0.0 {
        log::warn!("event=ignored_setting key=beta reason=3dgs_loss_has_no_gradient_term");
    }
    cfg.validate()?;
    if let Some(o) = setup(r)? {
        return Ok(o);
    }

    let scene = io::load_scene(Path::new(&scene_path))?;
    let views = load_views(&cameras, &images_dir)?;
    let mut trainer = Trainer::new(scene, &views, cfg.clone())?;
    let out = PathBuf::from(out);
    create_dir(&out)?;
    if checkpoint_every > 0 {
        create_dir(&out.join("checkpoints"))?;
    }
    let start = Instant::now();
    while trainer.steps_done() < cfg.steps {
        let row = trainer.step()?.clone();
        if let Some(p) = row.psnr {
            log::info!(
                "event=train_step step={} loss={:.6e} psnr={p:.3} particles={} seconds={:.1}",
                row.step,
                row.loss,
                row.particle_count,
                start.elapsed().as_secs_f64()
            );
        }
        if checkpoint_every > 0 && row.step % checkpoint_every == 0 {
            let path = out.join("checkpoints").join(format!("step_{:06}.json", row.step));
            io::save_scene(trainer.scene(), &path)?;
        }
    }
    let (scene, log_rows) = trainer.into_parts();
    save_text(&out.join("metrics.csv"), &metrics_csv(&log_rows))?;
    io::save_scene(&scene, &out.join("scene.json"))?;
    log::info!("event=train_done steps={} particles={} out={}", cfg.steps, scene.len(), out.display());
    Ok(Outcome::Done)
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// Scene file.
    #[arg(long)]
    scene: Option<String>,
    /// Camera file.
    #[arg(long)]
    cameras: Option<String>,
    /// Camera index. [default: 0]
    #[arg(long)]
    view: Option<usize>,
    /// gdgs, 3dgs, or laplacian (the splatted field before the solve). [default: gdgs]
    #[arg(long)]
    mode: Option<String>,
    /// Poisson solver: spectral or multigrid. [default: multigrid]
    #[arg(long)]
    solver: Option<String>,
    /// Multigrid relative residual tolerance. [default: 1e-8]
    #[arg(long)]
    tol: Option<f64>,
    /// Multigrid V-cycle limit. [default: 50]
    #[arg(long)]
    max_cycles: Option<usize>,
    /// Output path prefix; PREFIX.png and PREFIX.pfm are written.
    #[arg(long)]
    out: Option<String>,
}

pub fn render(a: RenderArgs, r: &mut Resolver, setup: impl Setup) -> Result<Outcome> {
    let scene_path: String = r.require("scene", a.scene)?;
    let cameras: String = r.require("cameras", a.cameras)?;
    let view = r.get("view", a.view, 0usize)?;
    let mode = r.get("mode", a.mode, "gdgs".to_string())?;
    let solver = r.get("solver", a.solver, "multigrid".to_string())?;
    let tol = r.get("tol", a.tol, 1e-8)?;
    let max_cycles = r.get("max_cycles", a.max_cycles, 50usize)?;
    let out: String = r.require("out", a.out)?;
    let kind = solver_kind(&solver, tol, max_cycles)?;
    if !matches!(mode.as_str(), "gdgs" | "3dgs" | "laplacian") {
        return Err(Error::Config(format!("unknown render mode {mode:?}, expected gdgs, 3dgs or laplacian")));
    }
    if let Some(o) = setup(r)? {
        return Ok(o);
    }

    let scene: Scene = io::load_scene(Path::new(&scene_path))?;
    let cams = io::load_cameras(Path::new(&cameras))?;
    let cam = cams
        .get(view)
        .ok_or_else(|| Error::Config(format!("view {view} out of range, {} cameras", cams.len())))?;
    let render_cfg = gdgs::RenderConfig::default();
    let (img, mapping) = match mode.as_str() {
        "laplacian" => {
            let field = SplatPass::run(&scene, cam, &render_cfg)?.field;
            let active = gdgs::active_pixel_set(&field, 1e-4);
            log::info!("event=laplacian_field active_fraction={:.6}", active.fraction);
            (field, PngMapping::SIGNED_PREVIEW)
        }
        "3dgs" => (render_3dgs(&scene, cam, &render_cfg)?, PngMapping::UNIT),
        _ => {
            let r = Renderer::new(Mode::Gdgs, render_cfg, kind, cam.width, cam.height)?;
            (r.render(&scene, cam)?, PngMapping::UNIT)
        }
    };
    let (png, pfm) = output_pair(&out);
    let png_bytes = io::encode_png(&img, mapping)?;
    let pfm_bytes = io::encode_pfm(&img)?;
    io::write_atomic(&png, &png_bytes)?;
    io::write_atomic(&pfm, &pfm_bytes)?;
    log::info!("event=render mode={mode} view={view} out={}", png.display());
    Ok(Outcome::Done)
}

#[derive(Args, Debug)]
pub struct SolveArgs {
    /// Laplacian field (PFM).
    #[arg(long)]
    input: Option<String>,
    /// spectral or multigrid. [default: multigrid]
    #[arg(long)]
    solver: Option<String>,
    /// Multigrid relative residual tolerance. [default: 1e-8]
    #[arg(long)]
    tol: Option<f64>,
    /// Mean of the solution: one value, or one per channel separated by commas. [default: 0]
    #[arg(long, allow_hyphen_values = true)]
    dc: Option<String>,
    /// Multigrid V-cycle limit. [default: 50]
    #[arg(long)]
    max_cycles: Option<usize>,
    /// Output path prefix; PREFIX.pfm and PREFIX.png are written.
    #[arg(long)]
    out: Option<String>,
}

pub fn solve(a: SolveArgs, r: &mut Resolver, setup: impl Setup) -> Result<Outcome> {
    let input: String = r.require("input", a.input)?;
    let solver = r.get("solver", a.solver, "multigrid".to_string())?;
    let tol = r.get("tol", a.tol, 1e-8)?;
    let dc_text = r.get("dc", a.dc, "0".to_string())?;
    let max_cycles = r.get("max_cycles", a.max_cycles, 50usize)?;
    let out: String = r.require("out", a.out)?;
    let kind = solver_kind(&solver, tol, max_cycles)?;
    let dc_values = parse_list("dc", &dc_text)?;
    if let Some(o) = setup(r)? {
        return Ok(o);
    }

    let rhs = io::load_pfm(Path::new(&input))?;
    let dc = match dc_values.len() {
        1 => vec![dc_values[0]; rhs.channels()],
        n if n == rhs.channels() => dc_values,
        n => {
            return Err(Error::Config(format!(
                "dc has {n} values but the field has {} channels",
                rhs.channels()
            )))
        }
    };
    let solver_impl = PoissonSolver::new(kind, rhs.width(), rhs.height())?;
    let (u, report) = solver_impl.solve(&PoissonProblem::new(rhs, dc)?)?;
    let (png, pfm) = output_pair(&out);
    let pfm_bytes = io::encode_pfm(&u)?;
    let png_bytes = io::encode_png(&u, PngMapping::UNIT)?;
    io::write_atomic(&pfm, &pfm_bytes)?;
    io::write_atomic(&png, &png_bytes)?;
    println!("{}", report.to_line(&solver));
    Ok(Outcome::Done)
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// An image, or a directory whose PNG files are all analyzed.
    #[arg(long)]
    input: Option<String>,
    /// Comma-separated thresholds on the Laplacian of the [0,1] image.
    /// [default: 0,0.5/255,...,4.5/255]
    #[arg(long)]
    thresholds: Option<String>,
    /// Output CSV report.
    #[arg(long)]
    out: Option<String>,
}

/// Ten evenly spaced thresholds from 0 to 4.5/255.
pub fn default_thresholds() -> String {
    (0..10)
        .map(|i| format!("{}", i as f64 * 0.5 / 255.0))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn analyze_sparsity(a: AnalyzeArgs, r: &mut Resolver, setup: impl Setup) -> Result<Outcome> {
    let input: String = r.require("input", a.input)?;
    let thresholds_text = r.get("thresholds", a.thresholds, default_thresholds())?;
    let out: String = r.require("out", a.out)?;
    let thresholds = parse_list("thresholds", &thresholds_text)?;
    if thresholds.iter().any(|t| *t < 0.0) {
        return Err(Error::Config("thresholds must be >= 0".into()));
    }
    if let Some(o) = setup(r)? {
        return Ok(o);
    }

    let path = Path::new(&input);
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut f: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::Io {
                path: path.into(),
                source: e,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        f.sort();
        if f.is_empty() {
            return Err(Error::Config(format!("no PNG images in {input}")));
        }
        f
    } else {
        vec![path.to_path_buf()]
    };
    let mut csv = String::from(REPORT_HEADER);
    csv.push('\n');
    for f in &files {
        let img: FieldImage = io::load_png(f)?;
        let report = analyze(&img, &thresholds)?;
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        for c in 0..img.channels() {
            log::info!(
                "event=sparsity file={name} channel={c} gamma_intensity={:.4} gamma_laplacian={:.4}",
                report.gamma_intensity[c],
                report.gamma_laplacian[c]
            );
        }
        for line in report_rows(&name, &report) {
            csv.push_str(&line);
            csv.push('\n');
        }
    }
    save_text(Path::new(&out), &csv)?;
    Ok(Outcome::Done)
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Seed for the random scene, camera and target. [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// gdgs or 3dgs. [default: gdgs]
    #[arg(long)]
    mode: Option<Mode>,
    /// Comma-separated D-SSIM weights to check. [default: 0,0.2]
    #[arg(long)]
    lambdas: Option<String>,
    /// Comma-separated gradient-term weights to check (gdgs only). [default: 0,0.2]
    #[arg(long)]
    betas: Option<String>,
    /// Relative error tolerance. [default: 0.001]
    #[arg(long)]
    tol: Option<f64>,
}

pub fn gradcheck(a: GradcheckArgs, r: &mut Resolver, setup: impl Setup) -> Result<Outcome> {
    let seed = r.get("seed", a.seed, 0u64)?;
    let mode = r.get("mode", a.mode, Mode::Gdgs)?;
    let lambdas = parse_list("lambdas", &r.get("lambdas", a.lambdas, "0,0.2".to_string())?)?;
    let mut betas = parse_list("betas", &r.get("betas", a.betas, "0,0.2".to_string())?)?;
    let tol = r.get("tol", a.tol, 1e-3)?;
    if mode == Mode::Classic {
        betas = vec![0.0];
    }
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tol must be positive, got {tol}")));
    }
    if let Some(o) = setup(r)? {
        return Ok(o);
    }
    let mut ok = true;
    for &lambda in &lambdas {
        for &beta in &betas {
            let cfg = GradcheckConfig {
                seed,
                mode,
                lambda,
                beta,
                ..GradcheckConfig::default()
            };
            let report = run_gradcheck(&cfg)?;
            for line in report.lines() {
                println!("{line}");
            }
            ok &= report.passed(tol);
        }
    }
    println!("gradcheck result={} tol={tol:e}", if ok { "pass" } else { "fail" });
    Ok(if ok { Outcome::Done } else { Outcome::CheckFailed })
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Synthetic scene description (JSON). Without it the preset is used.
    #[arg(long)]
    spec: Option<String>,
    /// Built-in scene when no spec file is given: piecewise-constant or textured.
    /// [default: piecewise-constant]
    #[arg(long)]
    preset: Option<String>,
    /// Image size of the preset scene. [default: 64]
    #[arg(long)]
    size: Option<usize>,
    /// Training steps per mode. [default: 3000]
    #[arg(long)]
    steps: Option<usize>,
    /// Training seed for both modes. [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
}

pub fn bench(a: BenchArgs, r: &mut Resolver, setup: impl Setup) -> Result<Outcome> {
    let spec_path: String = r.get("spec", a.spec, String::new())?;
    let preset = r.get("preset", a.preset, "piecewise-constant".to_string())?;
    let size = r.get("size", a.size, 64usize)?;
    let steps = r.get("steps", a.steps, 3000usize)?;
    let seed = r.get("seed", a.seed, 0u64)?;
    let out: String = r.require("out", a.out)?;
    let spec = if spec_path.is_empty() {
        match preset.as_str() {
            "piecewise-constant" => SyntheticSceneSpec::piecewise_constant(size),
            "textured" => SyntheticSceneSpec::textured(size),
            _ => return Err(Error::Config(format!("unknown preset {preset:?}"))),
        }
    } else {
        let p = Path::new(&spec_path);
        let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
            path: p.into(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: p.into(),
            message: e.to_string(),
        })?
    };
    spec.validate()?;
    let mut cfg = BenchConfig::new(spec.ring.count, steps);
    cfg.gdgs.seed = seed;
    cfg.classic.seed = seed;
    cfg.gdgs.validate()?;
    cfg.classic.validate()?;
    if let Some(o) = setup(r)? {
        return Ok(o);
    }

    let (cameras, images) = spec.generate()?;
    let result = benchmark_on(&spec, &cfg, &cameras, &images)?;
    let out = PathBuf::from(out);
    let img_dir = out.join("images");
    let render_dir = out.join("renders");
    create_dir(&img_dir)?;
    create_dir(&render_dir)?;
    io::save_cameras(&cameras, &out.join("cameras.json"))?;
    for (i, im) in images.iter().enumerate() {
        io::save_png(im, PngMapping::UNIT, &img_dir.join(format!("view_{i:03}.png")))?;
    }
    for (mode, scene) in &result.scenes {
        io::save_scene(scene, &out.join(format!("scene_{mode}.json")))?;
        let tc = if *mode == Mode::Gdgs { &cfg.gdgs } else { &cfg.classic };
        let renderer = Renderer::new(*mode, tc.render, tc.solver, spec.width, spec.height)?;
        for &i in &cfg.held_out {
            let img = renderer.render(scene, &cameras[i])?;
            io::save_png(&img, PngMapping::UNIT, &render_dir.join(format!("{mode}_view_{i:03}.png")))?;
        }
    }
    save_text(&out.join("results.csv"), &bench_csv(&result.rows))?;
    for row in &result.rows {
        log::info!(
            "event=bench_result mode={} heldout_psnr={:.3} particles={} active_fraction={:.4} seconds={:.1}",
            row.mode,
            row.heldout_psnr,
            row.particles,
            row.active_fraction,
            row.seconds
        );
    }
    Ok(Outcome::Done)
}
