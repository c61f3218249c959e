//! Image losses used for training, with analytic gradients.

use crate::error::{Error, Result};
use crate::field::FieldImage;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Weight of the D-SSIM term.
    pub lambda: f64,
    /// Weight of the image-gradient L1 term.
    pub beta: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            beta: 0.2,
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_c1: 0.01 * 0.01,
            ssim_c2: 0.03 * 0.03,
        }
    }
}

impl LossConfig {
    pub fn with_weights(lambda: f64, beta: f64) -> Self {
        Self {
            lambda,
            beta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must be in [0,1], got {}", self.lambda)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.ssim_window.is_multiple_of(2) {
            return Err(Error::Config(format!("ssim_window must be odd, got {}", self.ssim_window)));
        }
        if !(self.ssim_sigma > 0.0 && self.ssim_c1 > 0.0 && self.ssim_c2 > 0.0) {
            return Err(Error::Config("ssim sigma and stabilizers must be positive".into()));
        }
        Ok(())
    }
}

/// Normalized 1D Gaussian window.
fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "same" convolution with zero padding. The window is symmetric,
/// so this operator is self-adjoint.
fn blur(src: &[f64], w: usize, h: usize, k: &[f64], tmp: &mut [f64], out: &mut [f64]) {
    let r = (k.len() / 2) as isize;
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * row[xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
}

/// Mean SSIM over all pixels and channels, and optionally its gradient with
/// respect to `c`.
fn ssim_impl(c: &FieldImage, im: &FieldImage, cfg: &LossConfig, want_grad: bool) -> (f64, Option<FieldImage>) {
    let (w, h) = (c.width(), c.height());
    let n = w * h;
    let k = gaussian_window(cfg.ssim_window, cfg.ssim_sigma);
    let (c1, c2) = (cfg.ssim_c1, cfg.ssim_c2);
    let mut tmp = vec![0.0; n];
    let mut bufs: Vec<Vec<f64>> = (0..5).map(|_| vec![0.0; n]).collect();
    let mut grad = want_grad.then(|| FieldImage::zeros(w, h, c.channels()));
    let mut total = 0.0;
    let mut prod = vec![0.0; n];
    for ch in 0..c.channels() {
        let x = c.plane(ch);
        let y = im.plane(ch);
        let [mx, my, exx, eyy, exy] = &mut bufs[..] else { unreachable!() };
        blur(x, w, h, &k, &mut tmp, mx);
        blur(y, w, h, &k, &mut tmp, my);
        for i in 0..n {
            prod[i] = x[i] * x[i];
        }
        blur(&prod, w, h, &k, &mut tmp, exx);
        for i in 0..n {
            prod[i] = y[i] * y[i];
        }
        blur(&prod, w, h, &k, &mut tmp, eyy);
        for i in 0..n {
            prod[i] = x[i] * y[i];
        }
        blur(&prod, w, h, &k, &mut tmp, exy);

        // per-pixel partials w.r.t. (mx, exx, exy), overwritten in place
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let sxx = exx[i] - ux * ux;
            let syy = eyy[i] - uy * uy;
            let sxy = exy[i] - ux * uy;
            let a1 = 2.0 * ux * uy + c1;
            let a2 = 2.0 * sxy + c2;
            let b1 = ux * ux + uy * uy + c1;
            let b2 = sxx + syy + c2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                mx[i] = s * (2.0 * uy / a1 - 2.0 * uy / a2 - 2.0 * ux / b1 + 2.0 * ux / b2);
                exy[i] = s * 2.0 / a2;
                exx[i] = -s / b2;
            }
        }
        if let Some(g) = grad.as_mut() {
            let out = g.plane_mut(ch);
            blur(mx, w, h, &k, &mut tmp, my);
            out.copy_from_slice(my);
            blur(exy, w, h, &k, &mut tmp, eyy);
            for i in 0..n {
                out[i] += eyy[i] * y[i];
            }
            blur(exx, w, h, &k, &mut tmp, eyy);
            for i in 0..n {
                out[i] += eyy[i] * 2.0 * x[i];
            }
        }
    }
    let count = (n * c.channels()) as f64;
    if let Some(g) = grad.as_mut() {
        g.scale(1.0 / count);
    }
    (total / count, grad)
}

pub fn ssim(c: &FieldImage, im: &FieldImage, cfg: &LossConfig) -> Result<f64> {
    c.check_same_shape(im)?;
    Ok(ssim_impl(c, im, cfg, false).0)
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Forward difference along x or y, zero on the last column/row.
#[inline]
fn fwd(p: &[f64], w: usize, h: usize, x: usize, y: usize, along_x: bool) -> f64 {
    let i = y * w + x;
    if along_x {
        if x + 1 < w {
            p[i + 1] - p[i]
        } else {
            0.0
        }
    } else if y + 1 < h {
        p[i + w] - p[i]
    } else {
        0.0
    }
}

fn loss_impl(c: &FieldImage, im: &FieldImage, cfg: &LossConfig, want_grad: bool) -> Result<(f64, Option<FieldImage>)> {
    cfg.validate()?;
    c.check_same_shape(im)?;
    let (w, h) = (c.width(), c.height());
    let count = c.len() as f64;
    let mut grad = want_grad.then(|| FieldImage::zeros(w, h, c.channels()));

    let mut l1 = 0.0;
    for (a, b) in c.data().iter().zip(im.data()) {
        l1 += (a - b).abs();
    }
    l1 /= count;
    if let Some(g) = grad.as_mut() {
        let s = (1.0 - cfg.lambda) / count;
        for ((o, a), b) in g.data_mut().iter_mut().zip(c.data()).zip(im.data()) {
            *o = s * sign(a - b);
        }
    }

    let mut gl1 = 0.0;
    if cfg.beta > 0.0 {
        for ch in 0..c.channels() {
            let (x, y) = (c.plane(ch), im.plane(ch));
            let mut gp = grad.as_mut().map(|g| g.plane_mut(ch));
            for py in 0..h {
                for px in 0..w {
                    for along_x in [true, false] {
                        let d = fwd(x, w, h, px, py, along_x) - fwd(y, w, h, px, py, along_x);
                        gl1 += d.abs();
                        if let Some(g) = gp.as_mut() {
                            let s = cfg.beta * sign(d) / count;
                            let i = py * w + px;
                            let j = if along_x {
                                (px + 1 < w).then(|| i + 1)
                            } else {
                                (py + 1 < h).then(|| i + w)
                            };
                            if let Some(j) = j {
                                g[j] += s;
                                g[i] -= s;
                            }
                        }
                    }
                }
            }
        }
        gl1 /= count;
    }

    let mut dssim = 0.0;
    if cfg.lambda > 0.0 {
        let (s, sg) = ssim_impl(c, im, cfg, want_grad);
        dssim = (1.0 - s) / 2.0;
        if let (Some(g), Some(sg)) = (grad.as_mut(), sg) {
            g.add_scaled(&sg, -cfg.lambda / 2.0);
        }
    }

    let loss = (1.0 - cfg.lambda) * l1 + cfg.beta * gl1 + cfg.lambda * dssim;
    Ok((loss, grad))
}

/// `(1−λ)·L1 + β·(gradient L1) + λ·(1−SSIM)/2`.
pub fn loss_gdgs(c: &FieldImage, im: &FieldImage, cfg: &LossConfig) -> Result<f64> {
    Ok(loss_impl(c, im, cfg, false)?.0)
}

/// Loss value and its gradient with respect to `c`.
pub fn loss_gdgs_with_grad(c: &FieldImage, im: &FieldImage, cfg: &LossConfig) -> Result<(f64, FieldImage)> {
    let (l, g) = loss_impl(c, im, cfg, true)?;
    Ok((l, g.expect("gradient requested")))
}

/// `(1−λ)·L1 + λ·(1−SSIM)/2`.
pub fn loss_3dgs(c: &FieldImage, im: &FieldImage, lambda: f64) -> Result<f64> {
    loss_gdgs(c, im, &LossConfig::with_weights(lambda, 0.0))
}

pub const PSNR_CAP: f64 = 99.0;

/// Peak signal-to-noise ratio for images with peak 1, capped at 99 dB.
pub fn psnr(c: &FieldImage, im: &FieldImage) -> Result<f64> {
    c.check_same_shape(im)?;
    let mse = c.mse(im);
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(w: usize, h: usize, ch: usize, seed: u64) -> FieldImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FieldImage::from_fn(w, h, ch, |_, _, _| rng.random::<f64>())
    }

    /// Direct windowed SSIM: per pixel, sum the clipped Gaussian window.
    fn ssim_oracle(a: &FieldImage, b: &FieldImage) -> f64 {
        let (w, h) = (a.width() as isize, a.height() as isize);
        let mut g = [[0.0; 11]; 11];
        let mut s = 0.0;
        for i in 0..11 {
            for j in 0..11 {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                g[i][j] = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
                s += g[i][j];
            }
        }
        let mut total = 0.0;
        for c in 0..a.channels() {
            for y in 0..h {
                for x in 0..w {
                    let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11isize {
                        for j in 0..11isize {
                            let (yy, xx) = (y + i - 5, x + j - 5);
                            if yy < 0 || xx < 0 || yy >= h || xx >= w {
                                continue;
                            }
                            let wgt = g[i as usize][j as usize] / s;
                            let va = a.get(xx as usize, yy as usize, c);
                            let vb = b.get(xx as usize, yy as usize, c);
                            ma += wgt * va;
                            mb += wgt * vb;
                            aa += wgt * va * va;
                            bb += wgt * vb * vb;
                            ab += wgt * va * vb;
                        }
                    }
                    let (c1, c2) = (1e-4, 9e-4);
                    let va = aa - ma * ma;
                    let vb = bb - mb * mb;
                    let cov = ab - ma * mb;
                    total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                }
            }
        }
        total / a.len() as f64
    }

    fn loss_oracle(a: &FieldImage, b: &FieldImage, lambda: f64, beta: f64) -> f64 {
        let n = a.len() as f64;
        let (w, h) = (a.width(), a.height());
        let mut l1 = 0.0;
        let mut gl = 0.0;
        for c in 0..a.channels() {
            for y in 0..h {
                for x in 0..w {
                    l1 += (a.get(x, y, c) - b.get(x, y, c)).abs();
                    if x + 1 < w {
                        let da = a.get(x + 1, y, c) - a.get(x, y, c);
                        let db = b.get(x + 1, y, c) - b.get(x, y, c);
                        gl += (da - db).abs();
                    }
                    if y + 1 < h {
                        let da = a.get(x, y + 1, c) - a.get(x, y, c);
                        let db = b.get(x, y + 1, c) - b.get(x, y, c);
                        gl += (da - db).abs();
                    }
                }
            }
        }
        (1.0 - lambda) * l1 / n + beta * gl / n + lambda * (1.0 - ssim_oracle(a, b)) / 2.0
    }

    #[test]
    fn identical_images_have_zero_loss() {
        let a = random(16, 16, 3, 1);
        assert!(loss_gdgs(&a, &a, &LossConfig::default()).unwrap().abs() < 1e-15);
        assert!((ssim(&a, &a, &LossConfig::default()).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pure_l1() {
        let a = random(16, 16, 3, 1);
        let b = a.map(|v| v + 0.1);
        let l = loss_gdgs(&b, &a, &LossConfig::with_weights(0.0, 0.0)).unwrap();
        assert!((l - 0.1).abs() < 1e-12);
    }

    #[test]
    fn matches_oracle() {
        for seed in 0..3 {
            let a = random(16, 16, 3, seed);
            let b = random(16, 16, 3, seed + 100);
            for (lambda, beta) in [(0.2, 0.2), (0.0, 0.5), (1.0, 0.0)] {
                let got = loss_gdgs(&a, &b, &LossConfig::with_weights(lambda, beta)).unwrap();
                let want = loss_oracle(&a, &b, lambda, beta);
                assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn beta_zero_reduces_to_3dgs() {
        let a = random(12, 9, 3, 5);
        let b = random(12, 9, 3, 6);
        let x = loss_gdgs(&a, &b, &LossConfig::with_weights(0.2, 0.0)).unwrap();
        let y = loss_3dgs(&a, &b, 0.2).unwrap();
        assert!((x - y).abs() <= 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let a = random(13, 10, 2, 8);
        let b = random(13, 10, 2, 9);
        for (lambda, beta) in [(0.2, 0.2), (1.0, 0.0), (0.0, 1.0)] {
            let cfg = LossConfig::with_weights(lambda, beta);
            let (_, g) = loss_gdgs_with_grad(&a, &b, &cfg).unwrap();
            let h = 1e-6;
            for i in (0..a.len()).step_by(7) {
                let mut p = a.clone();
                p.data_mut()[i] += h;
                let mut m = a.clone();
                m.data_mut()[i] -= h;
                let fd = (loss_gdgs(&p, &b, &cfg).unwrap() - loss_gdgs(&m, &b, &cfg).unwrap()) / (2.0 * h);
                let an = g.data()[i];
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "{i}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn psnr_values() {
        let a = random(8, 8, 1, 3);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = random(8, 8, 1, 4);
        let mse: f64 = a.data().iter().zip(c.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 64.0;
        assert!((psnr(&a, &c).unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_config_and_shapes() {
        let a = random(8, 8, 1, 3);
        let b = random(8, 9, 1, 3);
        assert!(loss_gdgs(&a, &b, &LossConfig::default()).is_err());
        assert!(loss_gdgs(&a, &a, &LossConfig::with_weights(1.5, 0.0)).is_err());
        assert!(loss_gdgs(&a, &a, &LossConfig::with_weights(0.5, -1.0)).is_err());
    }
}
