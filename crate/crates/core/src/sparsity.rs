//! Sparsity of intensity versus Laplacian domains.
//!
//! Sample distributions are summarized by a Cauchy law
//! `F(x) = arctan((x − x0)/γ)/π + ½`; a smaller scale `γ` means a sparser
//! signal. The threshold sweep measures how much of a Laplacian field can be
//! zeroed before the Poisson reconstruction degrades.

use crate::error::{Error, Result};
use crate::field::FieldImage;
use crate::poisson::{discrete_laplacian, solve_spectral, PoissonProblem};

pub const MIN_CAUCHY_SAMPLES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CauchyFit {
    pub x0: f64,
    pub gamma: f64,
    /// The interquartile range was zero and `gamma` is a floor value.
    pub degenerate: bool,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Location from the median, scale from half the interquartile range.
pub fn fit_cauchy_gamma(samples: &[f64]) -> Result<CauchyFit> {
    if samples.len() < MIN_CAUCHY_SAMPLES {
        return Err(Error::Contract(format!(
            "need at least {MIN_CAUCHY_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("sample {i} is {}", samples[i])));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let x0 = quantile(&sorted, 0.5);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    if iqr > 0.0 {
        return Ok(CauchyFit {
            x0,
            gamma: iqr / 2.0,
            degenerate: false,
        });
    }
    let magnitude = sorted[0].abs().max(sorted[sorted.len() - 1].abs()).max(1.0);
    log::warn!("event=cauchy_degenerate samples={} iqr=0", samples.len());
    Ok(CauchyFit {
        x0,
        gamma: f64::EPSILON * magnitude,
        degenerate: true,
    })
}

/// Hard threshold: keeps `x` where `|x| >= t`, zero elsewhere.
pub fn threshold(field: &FieldImage, t: f64) -> Result<FieldImage> {
    if !(t >= 0.0) {
        return Err(Error::Config(format!("threshold must be >= 0, got {t}")));
    }
    Ok(field.map(|x| if x.abs() >= t { x } else { 0.0 }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub channel: usize,
    pub t: f64,
    pub nonzero_fraction: f64,
    pub mse: f64,
}

/// For each threshold, zero small Laplacian values of `im`, reconstruct with
/// the exact solver (mean pinned to the image mean) and record the nonzero
/// fraction and reconstruction MSE per channel. Rows are grouped by channel,
/// thresholds in the given order.
pub fn sparsity_sweep(im: &FieldImage, thresholds: &[f64]) -> Result<Vec<SweepRow>> {
    im.check_finite("image")?;
    let lap = discrete_laplacian(im);
    let dc = im.channel_means();
    let n = im.pixel_count() as f64;
    let mut per_t = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let kept = threshold(&lap, t)?;
        let nonzero: Vec<f64> = kept
            .planes()
            .map(|p| p.iter().filter(|v| **v != 0.0).count() as f64 / n)
            .collect();
        let rec = solve_spectral(&PoissonProblem::new(kept, dc.clone())?)?;
        let mse: Vec<f64> = (0..im.channels()).map(|c| rec.channel(c).mse(&im.channel(c))).collect();
        per_t.push((t, nonzero, mse));
    }
    let mut rows = Vec::with_capacity(thresholds.len() * im.channels());
    for c in 0..im.channels() {
        for (t, nonzero, mse) in &per_t {
            rows.push(SweepRow {
                channel: c,
                t: *t,
                nonzero_fraction: nonzero[c],
                mse: mse[c],
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainGammas {
    pub intensity: Vec<CauchyFit>,
    pub laplacian: Vec<CauchyFit>,
}

impl DomainGammas {
    pub fn ratio(&self, c: usize) -> f64 {
        self.intensity[c].gamma / self.laplacian[c].gamma
    }
}

/// Cauchy scales of the intensity and Laplacian samples of each channel.
/// `im` is expected on the 0–255 scale.
pub fn compare_domains(im: &FieldImage) -> Result<DomainGammas> {
    let lap = discrete_laplacian(im);
    let mut out = DomainGammas {
        intensity: Vec::new(),
        laplacian: Vec::new(),
    };
    for c in 0..im.channels() {
        out.intensity.push(fit_cauchy_gamma(im.plane(c))?);
        out.laplacian.push(fit_cauchy_gamma(lap.plane(c))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityReport {
    pub gamma_intensity: Vec<f64>,
    pub gamma_laplacian: Vec<f64>,
    pub sweep: Vec<SweepRow>,
}

/// Full analysis of a `[0, 1]` image: gammas on the 0–255 scale, and the
/// threshold sweep on the normalized image.
pub fn analyze(im: &FieldImage, thresholds: &[f64]) -> Result<SparsityReport> {
    let g = compare_domains(&im.map(|v| v * 255.0))?;
    Ok(SparsityReport {
        gamma_intensity: g.intensity.iter().map(|f| f.gamma).collect(),
        gamma_laplacian: g.laplacian.iter().map(|f| f.gamma).collect(),
        sweep: sparsity_sweep(im, thresholds)?,
    })
}

pub const REPORT_HEADER: &str = "file,channel,gamma_intensity,gamma_laplacian,t,nonzero_fraction,mse";

/// CSV rows (without header) for one analyzed file.
pub fn report_rows(file: &str, report: &SparsityReport) -> Vec<String> {
    report
        .sweep
        .iter()
        .map(|r| {
            format!(
                "{file},{},{:.9e},{:.9e},{},{:.9e},{:.9e}",
                r.channel,
                report.gamma_intensity[r.channel],
                report.gamma_laplacian[r.channel],
                r.t,
                r.nonzero_fraction,
                r.mse
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Cauchy, Distribution};

    #[test]
    fn standard_cauchy_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let d = Cauchy::new(0.0, 1.0).unwrap();
        let s: Vec<f64> = (0..100_000).map(|_| d.sample(&mut rng)).collect();
        let f = fit_cauchy_gamma(&s).unwrap();
        assert!((0.98..=1.02).contains(&f.gamma), "{}", f.gamma);
        assert!(f.x0.abs() < 0.02);
    }

    #[test]
    fn equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s: Vec<f64> = (0..500).map(|_| rng.random_range(-3.0..3.0)).collect();
        let f = fit_cauchy_gamma(&s).unwrap();
        let shifted: Vec<f64> = s.iter().map(|v| v + 5.0).collect();
        let g = fit_cauchy_gamma(&shifted).unwrap();
        assert!((g.x0 - f.x0 - 5.0).abs() < 1e-12);
        assert!((g.gamma - f.gamma).abs() < 1e-12);
        let scaled: Vec<f64> = s.iter().map(|v| v * 3.0).collect();
        let h = fit_cauchy_gamma(&scaled).unwrap();
        assert!((h.gamma - 3.0 * f.gamma).abs() < 1e-12);
    }

    #[test]
    fn degenerate_and_too_few() {
        let f = fit_cauchy_gamma(&[2.0; 20]).unwrap();
        assert!(f.degenerate && f.gamma > 0.0);
        assert!(fit_cauchy_gamma(&[1.0; 15]).is_err());
    }

    #[test]
    fn threshold_examples() {
        let f = FieldImage::from_planar(2, 1, 1, vec![0.5, 0.2]).unwrap();
        let t = threshold(&f, 0.3).unwrap();
        assert_eq!(t.data(), &[0.5, 0.0]);
        assert_eq!(threshold(&f, 0.0).unwrap(), f);
        let edge = FieldImage::from_planar(1, 1, 1, vec![-0.3]).unwrap();
        assert_eq!(threshold(&edge, 0.3).unwrap().data(), &[-0.3]);
        assert!(threshold(&f, -1.0).is_err());
    }

    #[test]
    fn threshold_count_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = FieldImage::from_fn(20, 15, 2, |_, _, _| rng.random_range(-1.0..1.0));
        let t = threshold(&f, 0.37).unwrap();
        let want = f.data().iter().filter(|v| v.abs() >= 0.37).count();
        assert_eq!(t.data().iter().filter(|v| **v != 0.0).count(), want);
        assert_eq!(threshold(&t, 0.37).unwrap(), t);
    }

    fn smooth_image(seed: u64) -> FieldImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, c): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        FieldImage::from_fn(32, 24, 1, |x, y, _| {
            let (u, v) = (x as f64 / 32.0, y as f64 / 24.0);
            (0.5 + 0.3 * (6.0 * u + a).sin() * (4.0 * v + b).cos() + if u + c * v > 0.6 { 0.1 } else { 0.0 })
                .clamp(0.0, 1.0)
        })
    }

    #[test]
    fn sweep_endpoints() {
        let im = smooth_image(0);
        let lap = discrete_laplacian(&im);
        let big = lap.max_abs() + 1e-9;
        let rows = sparsity_sweep(&im, &[0.0, big]).unwrap();
        assert!(rows[0].mse <= 1e-10);
        let raw = lap.data().iter().filter(|v| **v != 0.0).count() as f64 / lap.len() as f64;
        assert!((rows[0].nonzero_fraction - raw).abs() < 1e-12);
        assert_eq!(rows[1].nonzero_fraction, 0.0);
        let mean = im.channel_means()[0];
        let var = im.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / im.len() as f64;
        assert!((rows[1].mse - var).abs() < 1e-12);
    }

    #[test]
    fn sweep_fraction_is_monotone() {
        for seed in 0..5 {
            let im = smooth_image(seed);
            let ts: Vec<f64> = (0..10).map(|i| i as f64 * 0.004).collect();
            let rows = sparsity_sweep(&im, &ts).unwrap();
            for w in rows.windows(2) {
                assert!(w[1].nonzero_fraction <= w[0].nonzero_fraction);
            }
        }
    }

    #[test]
    fn structure_makes_laplacian_sparser() {
        let im = smooth_image(2).map(|v| v * 255.0);
        let g = compare_domains(&im).unwrap();
        assert!(g.laplacian[0].gamma < g.intensity[0].gamma);
    }

    #[test]
    fn white_noise_has_no_advantage() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let im = FieldImage::from_fn(64, 64, 3, |_, _, _| rng.random_range(0.0..255.0));
        let g = compare_domains(&im).unwrap();
        for c in 0..3 {
            let r = g.ratio(c);
            assert!((0.1..=10.0).contains(&r), "{r}");
        }
    }

    #[test]
    fn constant_image_is_degenerate() {
        let im = FieldImage::filled(8, 8, 1, 100.0);
        let g = compare_domains(&im).unwrap();
        assert!(g.intensity[0].degenerate && g.laplacian[0].degenerate);
    }

    #[test]
    fn csv_rows() {
        let im = smooth_image(1);
        let r = analyze(&im, &[0.0, 0.01]).unwrap();
        let rows = report_rows("a.png", &r);
        assert_eq!(rows.len(), 2);
        assert!(rows[0].starts_with("a.png,0,"));
        assert_eq!(rows[0].split(',').count(), REPORT_HEADER.split(',').count());
    }
}
