use gdgs::io::{load_cameras, load_png, load_scene, save_cameras, save_png, save_scene, PngMapping};
use gdgs::synthetic::{bench_csv, benchmark, initial_scene, split_views, BenchConfig, SyntheticSceneSpec};
use gdgs::{psnr, train, Mode, Renderer, TrainConfig, TrainView};
use tempfile::TempDir;

fn small_spec() -> SyntheticSceneSpec {
    let mut spec = SyntheticSceneSpec::piecewise_constant(32);
    spec.ring.count = 4;
    spec.supersample = 2;
    spec
}

fn views(spec: &SyntheticSceneSpec) -> (Vec<TrainView>, Vec<TrainView>) {
    let (cams, images) = spec.generate().unwrap();
    split_views(&cams, &images, &[1]).unwrap()
}

fn mean_psnr(scene: &gdgs::Scene, cfg: &TrainConfig, views: &[TrainView]) -> f64 {
    let r = Renderer::new(cfg.mode, cfg.render, cfg.solver, 32, 32).unwrap();
    views
        .iter()
        .map(|v| psnr(&r.render(scene, &v.camera).unwrap(), &v.image).unwrap())
        .sum::<f64>()
        / views.len() as f64
}

#[test]
fn short_training_improves_both_modes() {
    let spec = small_spec();
    let (train_views, _) = views(&spec);
    for mode in [Mode::Gdgs, Mode::Classic] {
        let bench = BenchConfig::new(spec.ring.count, 0);
        let init = initial_scene(&spec, &bench, &train_views, mode).unwrap();
        let mut cfg = TrainConfig::new(mode);
        cfg.steps = 200;
        cfg.solver = gdgs::SolverKind::Spectral;
        let (trained, log) = train(init.clone(), &train_views, &cfg).unwrap();
        assert_eq!(log.len(), 200);
        let (before, after) = (mean_psnr(&init, &cfg, &train_views), mean_psnr(&trained, &cfg, &train_views));
        assert!(after > before + 3.0, "{mode}: {before:.2} -> {after:.2} dB");
        assert_eq!(trained.laplacian_density.is_some(), mode == Mode::Gdgs);
    }
}

#[test]
fn benchmark_is_reproducible() {
    let spec = small_spec();
    let mut cfg = BenchConfig::new(spec.ring.count, 40);
    cfg.held_out = vec![0, 2];
    let a = benchmark(&spec, &cfg).unwrap();
    let b = benchmark(&spec, &cfg).unwrap();
    assert_eq!(a.scenes, b.scenes);
    let csv = bench_csv(&a.rows);
    assert_eq!(csv, bench_csv(&b.rows));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "version,mode,steps,train_views,heldout_views,heldout_psnr,particles,active_fraction");
    assert!(lines[1].starts_with("1,gdgs,40,2,2,"));
    assert!(lines[2].starts_with("1,3dgs,40,2,2,"));
}

#[test]
fn files_round_trip() {
    let spec = small_spec();
    let (cams, images) = spec.generate().unwrap();
    let dir = TempDir::new().unwrap();
    save_cameras(&cams, &dir.path().join("cams.json")).unwrap();
    assert_eq!(load_cameras(&dir.path().join("cams.json")).unwrap(), cams);

    let png = dir.path().join("v.png");
    save_png(&images[0], PngMapping::UNIT, &png).unwrap();
    let back = load_png(&png).unwrap();
    assert!(back.max_abs_diff(&images[0]) <= 0.5 / 255.0 + 1e-12);

    let (train_views, _) = views(&spec);
    let scene = initial_scene(&spec, &BenchConfig::new(4, 0), &train_views, Mode::Gdgs).unwrap();
    save_scene(&scene, &dir.path().join("s.json")).unwrap();
    assert_eq!(load_scene(&dir.path().join("s.json")).unwrap(), scene);
}

#[test]
fn invalid_inputs_are_rejected() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("s.json"), r#"{"particles": 3}"#).unwrap();
    let err = load_scene(&dir.path().join("s.json")).unwrap_err();
    assert_eq!(err.category(), "parse");
    let err = load_scene(&dir.path().join("nope.json")).unwrap_err();
    assert_eq!(err.category(), "io");

    let spec = small_spec();
    let (cams, images) = spec.generate().unwrap();
    assert_eq!(split_views(&cams, &images, &[7]).unwrap_err().category(), "config");
}
