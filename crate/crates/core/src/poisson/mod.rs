//! Neumann Poisson problems on the pixel grid.
//!
//! The discrete operator is the 5-point Laplacian with mirrored boundary
//! samples (`f(-1) = f(0)`, `f(n) = f(n-1)`). It is symmetric and negative
//! semi-definite with the constants as its kernel, so a right-hand side is
//! solvable only when its mean is zero. Solvers subtract the per-channel
//! mean of the right-hand side first and pin the solution mean to the
//! requested DC value.

mod multigrid;
mod spectral;

pub use multigrid::MultigridPlan;
pub use spectral::SpectralPlan;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::FieldImage;

/// Right-hand side plus the constant that fixes the solution mean.
#[derive(Debug, Clone)]
pub struct PoissonProblem {
    pub rhs: FieldImage,
    pub dc_value: Vec<f64>,
}

impl PoissonProblem {
    pub fn new(rhs: FieldImage, dc_value: Vec<f64>) -> Result<Self> {
        if dc_value.len() != rhs.channels() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} dc values", rhs.channels()),
                got: format!("{}", dc_value.len()),
            });
        }
        rhs.check_finite("poisson rhs")?;
        if !dc_value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("dc value".into()));
        }
        Ok(Self { rhs, dc_value })
    }

    /// Problem with a zero DC value in every channel.
    pub fn zero_mean(rhs: FieldImage) -> Result<Self> {
        let c = rhs.channels();
        Self::new(rhs, vec![0.0; c])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolverKind {
    Spectral,
    Multigrid { tol: f64, max_cycles: usize },
}

impl Default for SolverKind {
    fn default() -> Self {
        SolverKind::Multigrid {
            tol: 1e-8,
            max_cycles: 50,
        }
    }
}

/// Diagnostics from one solve.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveReport {
    /// Per-channel mean removed from the right-hand side.
    pub rhs_mean: Vec<f64>,
    /// V-cycles used per channel (0 for the spectral solver).
    pub cycles: Vec<usize>,
    /// Per-channel relative residual after each V-cycle.
    pub history: Vec<Vec<f64>>,
    /// Largest relative residual over channels.
    pub relative_residual: f64,
    /// `‖Δc − rhs‖∞` against the mean-free right-hand side.
    pub residual_inf: f64,
}

impl SolveReport {
    /// One `key=value` line.
    pub fn to_line(&self, solver: &str) -> String {
        let rhs_mean = self
            .rhs_mean
            .iter()
            .map(|m| format!("{m:.6e}"))
            .collect::<Vec<_>>()
            .join(",");
        let cycles = self
            .cycles
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "solver={solver} cycles={cycles} relative_residual={:.6e} residual_inf={:.6e} rhs_mean={rhs_mean}",
            self.relative_residual, self.residual_inf
        )
    }
}

/// A solver prepared for one grid size.
#[derive(Debug, Clone)]
pub enum PoissonSolver {
    Spectral(SpectralPlan),
    Multigrid {
        plan: MultigridPlan,
        tol: f64,
        max_cycles: usize,
    },
}

impl PoissonSolver {
    pub fn new(kind: SolverKind, width: usize, height: usize) -> Result<Self> {
        Ok(match kind {
            SolverKind::Spectral => PoissonSolver::Spectral(SpectralPlan::new(width, height)),
            SolverKind::Multigrid { tol, max_cycles } => {
                if !(tol > 0.0) || max_cycles == 0 {
                    return Err(Error::Config(format!(
                        "multigrid needs tol > 0 and max_cycles > 0 (got {tol}, {max_cycles})"
                    )));
                }
                PoissonSolver::Multigrid {
                    plan: MultigridPlan::new(width, height)?,
                    tol,
                    max_cycles,
                }
            }
        })
    }

    pub fn size(&self) -> (usize, usize) {
        match self {
            PoissonSolver::Spectral(p) => p.size(),
            PoissonSolver::Multigrid { plan, .. } => plan.size(),
        }
    }

    pub fn solve(&self, problem: &PoissonProblem) -> Result<(FieldImage, SolveReport)> {
        let rhs = &problem.rhs;
        if (rhs.width(), rhs.height()) != self.size() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.size().0, self.size().1),
                got: format!("{}x{}", rhs.width(), rhs.height()),
            });
        }
        let (w, h) = self.size();
        let (projected, rhs_mean) = compatible_rhs(rhs);

        let mut out = FieldImage::zeros(w, h, rhs.channels());
        let per_channel: Vec<Result<(usize, Vec<f64>)>> = out
            .planes_mut()
            .zip(projected.planes())
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|(x, b)| match self {
                PoissonSolver::Spectral(plan) => {
                    plan.solve_plane(b, x);
                    Ok((0, Vec::new()))
                }
                PoissonSolver::Multigrid { plan, tol, max_cycles } => plan.solve_plane(b, x, *tol, *max_cycles),
            })
            .collect();

        let mut report = SolveReport {
            rhs_mean,
            ..Default::default()
        };
        for r in per_channel {
            let (cycles, history) = r?;
            report.cycles.push(cycles);
            report.history.push(history);
        }

        // residual against the projected rhs, then pin the mean
        let lap = discrete_laplacian(&out);
        for (l, b) in lap.planes().zip(projected.planes()) {
            let (mut r2, mut b2) = (0.0, 0.0);
            for (x, y) in l.iter().zip(b) {
                let d = x - y;
                r2 += d * d;
                b2 += y * y;
                report.residual_inf = report.residual_inf.max(d.abs());
            }
            if b2 > 0.0 {
                report.relative_residual = report.relative_residual.max((r2 / b2).sqrt());
            }
        }
        for (plane, &dc) in out.planes_mut().zip(&problem.dc_value) {
            let mean = plane.iter().sum::<f64>() / plane.len() as f64;
            plane.iter_mut().for_each(|v| *v += dc - mean);
        }
        Ok((out, report))
    }
}

/// Subtract the per-channel mean; returns the projected field and the means.
pub fn compatible_rhs(rhs: &FieldImage) -> (FieldImage, Vec<f64>) {
    let means = rhs.channel_means();
    let mut out = rhs.clone();
    for (plane, m) in out.planes_mut().zip(&means) {
        plane.iter_mut().for_each(|v| *v -= m);
    }
    (out, means)
}

/// Exact solve via the cosine diagonalization of the Neumann Laplacian.
pub fn solve_spectral(problem: &PoissonProblem) -> Result<FieldImage> {
    let rhs = &problem.rhs;
    Ok(PoissonSolver::new(SolverKind::Spectral, rhs.width(), rhs.height())?
        .solve(problem)?
        .0)
}

/// V-cycle multigrid solve to relative residual `tol`.
pub fn solve_multigrid(problem: &PoissonProblem, tol: f64, max_cycles: usize) -> Result<FieldImage> {
    let rhs = &problem.rhs;
    Ok(
        PoissonSolver::new(SolverKind::Multigrid { tol, max_cycles }, rhs.width(), rhs.height())?
            .solve(problem)?
            .0,
    )
}

/// 5-point Laplacian of one plane with mirrored boundary samples.
pub(crate) fn laplacian_plane(src: &[f64], dst: &mut [f64], w: usize, h: usize) {
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let c = src[i];
            let mut acc = 0.0;
            if x > 0 {
                acc += src[i - 1] - c;
            }
            if x + 1 < w {
                acc += src[i + 1] - c;
            }
            if y > 0 {
                acc += src[i - w] - c;
            }
            if y + 1 < h {
                acc += src[i + w] - c;
            }
            dst[i] = acc;
        }
    }
}

pub fn discrete_laplacian(img: &FieldImage) -> FieldImage {
    let (w, h) = (img.width(), img.height());
    let mut out = FieldImage::zeros(w, h, img.channels());
    for (dst, src) in out.planes_mut().zip(img.planes()) {
        laplacian_plane(src, dst, w, h);
    }
    out
}

/// `½‖Δc − rhs‖²` summed over pixels and channels.
pub fn loss_laplacian_domain(c: &FieldImage, rhs: &FieldImage) -> Result<f64> {
    c.check_same_shape(rhs)?;
    let lap = discrete_laplacian(c);
    Ok(0.5
        * lap
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>())
}

/// `Σ ½|∇c|² + c·rhs` with forward differences (zero across the boundary).
/// Its stationary points satisfy `Δc = rhs`.
pub fn loss_variational(c: &FieldImage, rhs: &FieldImage) -> Result<f64> {
    c.check_same_shape(rhs)?;
    let (w, h) = (c.width(), c.height());
    let mut total = 0.0;
    for (p, r) in c.planes().zip(rhs.planes()) {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let gx = if x + 1 < w { p[i + 1] - p[i] } else { 0.0 };
                let gy = if y + 1 < h { p[i + w] - p[i] } else { 0.0 };
                total += 0.5 * (gx * gx + gy * gy) + p[i] * r[i];
            }
        }
    }
    Ok(total)
}

/// `θ·L_p + (1−θ)·L_e`.
pub fn loss_hybrid(c: &FieldImage, rhs: &FieldImage, theta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::Config(format!("theta must lie in [0, 1], got {theta}")));
    }
    if theta == 1.0 {
        return loss_laplacian_domain(c, rhs);
    }
    if theta == 0.0 {
        return loss_variational(c, rhs);
    }
    Ok(theta * loss_laplacian_domain(c, rhs)? + (1.0 - theta) * loss_variational(c, rhs)?)
}
