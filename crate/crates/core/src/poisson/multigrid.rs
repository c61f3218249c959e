//! Cell-centered geometric multigrid for the mirrored-boundary Laplacian.
//!
//! V(2,2) cycles with red-black Gauss–Seidel smoothing, full-weighting
//! restriction and bilinear prolongation. A dimension is halved while it is
//! larger than 8; the coarsest grid (at most 8×8) is solved with a dense
//! Cholesky factorization of the Laplacian regularized on its constant mode.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

const PRE_SMOOTH: usize = 2;
const POST_SMOOTH: usize = 2;
const COARSEST: usize = 8;

#[derive(Debug, Clone)]
struct Level {
    w: usize,
    h: usize,
    /// Coupling weights `1/hx²`, `1/hy²` relative to the finest grid.
    wx: f64,
    wy: f64,
}

/// Interpolation stencil of one fine index: up to two coarse indices.
type Stencil = [(usize, f64); 2];

#[derive(Debug, Clone)]
struct Transfer {
    /// Per fine column / row, the coarse neighbors and weights.
    xs: Vec<Stencil>,
    ys: Vec<Stencil>,
    /// `1/2` per coarsened axis so that restriction preserves constants.
    restrict_scale: f64,
}

#[derive(Debug, Clone)]
pub struct MultigridPlan {
    levels: Vec<Level>,
    transfers: Vec<Transfer>,
    coarse: Cholesky<f64, Dyn>,
}

fn axis_stencils(n: usize, coarsen: bool) -> (usize, Vec<Stencil>) {
    if !coarsen {
        return (n, (0..n).map(|i| [(i, 1.0), (i, 0.0)]).collect());
    }
    let nc = n.div_ceil(2);
    let stencils = (0..n)
        .map(|i| {
            let j = i / 2;
            let other = if i % 2 == 0 {
                j.saturating_sub(1)
            } else {
                (j + 1).min(nc - 1)
            };
            [(j, 0.75), (other, 0.25)]
        })
        .collect();
    (nc, stencils)
}

impl MultigridPlan {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width < 4 || height < 4 {
            return Err(Error::Contract(format!(
                "multigrid needs a grid of at least 4x4, got {width}x{height}"
            )));
        }
        let mut levels = vec![Level {
            w: width,
            h: height,
            wx: 1.0,
            wy: 1.0,
        }];
        let mut transfers = Vec::new();
        loop {
            let last = levels.last().unwrap();
            let (cx, cy) = (last.w > COARSEST, last.h > COARSEST);
            if !cx && !cy {
                break;
            }
            let (wc, xs) = axis_stencils(last.w, cx);
            let (hc, ys) = axis_stencils(last.h, cy);
            let mut restrict_scale = 1.0;
            if cx {
                restrict_scale *= 0.5;
            }
            if cy {
                restrict_scale *= 0.5;
            }
            let next = Level {
                w: wc,
                h: hc,
                wx: if cx { last.wx / 4.0 } else { last.wx },
                wy: if cy { last.wy / 4.0 } else { last.wy },
            };
            transfers.push(Transfer { xs, ys, restrict_scale });
            levels.push(next);
        }
        let coarse = coarse_factor(levels.last().unwrap())?;
        Ok(Self {
            levels,
            transfers,
            coarse,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.levels[0].w, self.levels[0].h)
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    /// Solve one mean-free plane to relative residual `tol`.
    /// Returns the cycle count and the residual history.
    pub fn solve_plane(&self, rhs: &[f64], out: &mut [f64], tol: f64, max_cycles: usize) -> Result<(usize, Vec<f64>)> {
        let bnorm = norm(rhs);
        out.fill(0.0);
        if bnorm == 0.0 {
            return Ok((0, Vec::new()));
        }
        let mut xs: Vec<Vec<f64>> = self.levels.iter().map(|l| vec![0.0; l.w * l.h]).collect();
        let mut bs: Vec<Vec<f64>> = xs.clone();
        let mut rs: Vec<Vec<f64>> = xs.clone();
        bs[0].copy_from_slice(rhs);

        let mut history = Vec::new();
        for cycle in 1..=max_cycles {
            self.vcycle(0, &mut xs, &mut bs, &mut rs);
            residual(&self.levels[0], &xs[0], &bs[0], &mut rs[0]);
            let rel = norm(&rs[0]) / bnorm;
            history.push(rel);
            if rel <= tol {
                out.copy_from_slice(&xs[0]);
                let mean = out.iter().sum::<f64>() / out.len() as f64;
                out.iter_mut().for_each(|v| *v -= mean);
                return Ok((cycle, history));
            }
        }
        Err(Error::NoConvergence {
            cycles: max_cycles,
            last: *history.last().unwrap(),
            history,
        })
    }

    fn vcycle(&self, l: usize, xs: &mut [Vec<f64>], bs: &mut [Vec<f64>], rs: &mut [Vec<f64>]) {
        let level = &self.levels[l];
        if l + 1 == self.levels.len() {
            let b = &bs[l];
            let mean = b.iter().sum::<f64>() / b.len() as f64;
            let rhs = DVector::from_iterator(b.len(), b.iter().map(|v| -(v - mean)));
            let sol = self.coarse.solve(&rhs);
            xs[l].copy_from_slice(sol.as_slice());
            return;
        }
        smooth(level, &mut xs[l], &bs[l], PRE_SMOOTH);
        residual(level, &xs[l], &bs[l], &mut rs[l]);

        self.restrict(l, &rs[l], &mut bs[l + 1]);
        let coarse_b = &mut bs[l + 1];
        let mean = coarse_b.iter().sum::<f64>() / coarse_b.len() as f64;
        coarse_b.iter_mut().for_each(|v| *v -= mean);

        xs[l + 1].fill(0.0);
        self.vcycle(l + 1, xs, bs, rs);

        let (fine, coarse) = xs.split_at_mut(l + 1);
        self.prolong_add(l, &coarse[0], &mut fine[l]);
        smooth(level, &mut xs[l], &bs[l], POST_SMOOTH);
    }

    fn restrict(&self, l: usize, fine: &[f64], coarse: &mut [f64]) {
        let t = &self.transfers[l];
        let (wf, wc) = (self.levels[l].w, self.levels[l + 1].w);
        coarse.fill(0.0);
        for (y, sy) in t.ys.iter().enumerate() {
            for (x, sx) in t.xs.iter().enumerate() {
                let v = fine[y * wf + x] * t.restrict_scale;
                for &(jy, wy) in sy {
                    for &(jx, wx) in sx {
                        coarse[jy * wc + jx] += v * wy * wx;
                    }
                }
            }
        }
    }

    fn prolong_add(&self, l: usize, coarse: &[f64], fine: &mut [f64]) {
        let t = &self.transfers[l];
        let (wf, wc) = (self.levels[l].w, self.levels[l + 1].w);
        for (y, sy) in t.ys.iter().enumerate() {
            for (x, sx) in t.xs.iter().enumerate() {
                let mut acc = 0.0;
                for &(jy, wy) in sy {
                    for &(jx, wx) in sx {
                        acc += coarse[jy * wc + jx] * wy * wx;
                    }
                }
                fine[y * wf + x] += acc;
            }
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[inline]
fn neighbor_sum(l: &Level, x: &[f64], i: usize, px: usize, py: usize) -> (f64, f64) {
    let (mut s, mut d) = (0.0, 0.0);
    if px > 0 {
        s += l.wx * x[i - 1];
        d += l.wx;
    }
    if px + 1 < l.w {
        s += l.wx * x[i + 1];
        d += l.wx;
    }
    if py > 0 {
        s += l.wy * x[i - l.w];
        d += l.wy;
    }
    if py + 1 < l.h {
        s += l.wy * x[i + l.w];
        d += l.wy;
    }
    (s, d)
}

fn smooth(l: &Level, x: &mut [f64], b: &[f64], sweeps: usize) {
    for _ in 0..sweeps {
        for color in 0..2 {
            for py in 0..l.h {
                let start = (py + color) % 2;
                for px in (start..l.w).step_by(2) {
                    let i = py * l.w + px;
                    let (s, d) = neighbor_sum(l, x, i, px, py);
                    x[i] = (s - b[i]) / d;
                }
            }
        }
    }
}

fn residual(l: &Level, x: &[f64], b: &[f64], r: &mut [f64]) {
    for py in 0..l.h {
        for px in 0..l.w {
            let i = py * l.w + px;
            let (s, d) = neighbor_sum(l, x, i, px, py);
            r[i] = b[i] - (s - d * x[i]);
        }
    }
}

fn coarse_factor(l: &Level) -> Result<Cholesky<f64, Dyn>> {
    let n = l.w * l.h;
    let mut m = DMatrix::<f64>::zeros(n, n);
    for py in 0..l.h {
        for px in 0..l.w {
            let i = py * l.w + px;
            let mut link = |j: usize, w: f64| {
                m[(i, j)] -= w;
                m[(i, i)] += w;
            };
            if px > 0 {
                link(i - 1, l.wx);
            }
            if px + 1 < l.w {
                link(i + 1, l.wx);
            }
            if py > 0 {
                link(i - l.w, l.wy);
            }
            if py + 1 < l.h {
                link(i + l.w, l.wy);
            }
        }
    }
    let shift = (l.wx + l.wy) / n as f64;
    m.iter_mut().for_each(|v| *v += shift);
    Cholesky::new(m).ok_or_else(|| Error::Degenerate("coarse-grid matrix not positive definite".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_sizes() {
        let p = MultigridPlan::new(512, 100).unwrap();
        let sizes: Vec<_> = p.levels.iter().map(|l| (l.w, l.h)).collect();
        assert_eq!(sizes.last().unwrap(), &(8, 7));
        assert_eq!(sizes[1], (256, 50));
        assert!(MultigridPlan::new(3, 10).is_err());
    }

    #[test]
    fn restriction_preserves_constants() {
        let p = MultigridPlan::new(17, 12).unwrap();
        let fine = vec![1.0; 17 * 12];
        let mut coarse = vec![0.0; p.levels[1].w * p.levels[1].h];
        p.restrict(0, &fine, &mut coarse);
        // interior coarse cells see a full stencil
        let wc = p.levels[1].w;
        assert!((coarse[wc + 1] - 1.0).abs() < 1e-15);
        let mut back = vec![0.0; 17 * 12];
        p.prolong_add(0, &vec![2.0; coarse.len()], &mut back);
        assert!(back.iter().all(|v| (v - 2.0).abs() < 1e-15));
    }

    #[test]
    fn contraction_on_smooth_rhs() {
        let n = 128;
        let mut b: Vec<f64> = (0..n * n)
            .map(|i| {
                let (x, y) = ((i % n) as f64 / n as f64, (i / n) as f64 / n as f64);
                (3.0 * x).sin() * (2.0 * y).cos() + x * y
            })
            .collect();
        let mean = b.iter().sum::<f64>() / b.len() as f64;
        b.iter_mut().for_each(|v| *v -= mean);
        let plan = MultigridPlan::new(n, n).unwrap();
        let mut out = vec![0.0; n * n];
        let (_, hist) = plan.solve_plane(&b, &mut out, 1e-12, 50).unwrap();
        let mut prev = 1.0;
        for r in hist {
            assert!(r <= prev / 2.0, "{r} vs {prev}");
            prev = r;
        }
    }
}
