use std::fmt;
use std::sync::Arc;

use rustdct::{DctPlanner, TransformType2And3};

/// DCT-II diagonalization of the mirrored-boundary 5-point Laplacian.
///
/// Eigenvectors are `cos(πk(n+½)/N)` with eigenvalues `2cos(πk/N) − 2` per
/// axis, so a solve is: forward DCT-II, divide, inverse DCT (DCT-III).
#[derive(Clone)]
pub struct SpectralPlan {
    width: usize,
    height: usize,
    row: Arc<dyn TransformType2And3<f64>>,
    col: Arc<dyn TransformType2And3<f64>>,
    inv_eigen: Vec<f64>,
}

impl fmt::Debug for SpectralPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpectralPlan")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish()
    }
}

fn axis_eigen(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| 2.0 * (std::f64::consts::PI * k as f64 / n as f64).cos() - 2.0)
        .collect()
}

impl SpectralPlan {
    pub fn new(width: usize, height: usize) -> Self {
        let mut planner = DctPlanner::new();
        let row = planner.plan_dct2(width);
        let col = planner.plan_dct2(height);
        let ex = axis_eigen(width);
        let ey = axis_eigen(height);
        // inverse transform scale: DCT3(DCT2(x)) = (N/2) x per axis
        let norm = 4.0 / (width * height) as f64;
        let mut inv_eigen = Vec::with_capacity(width * height);
        for ly in &ey {
            for lx in &ex {
                let lambda = lx + ly;
                inv_eigen.push(if lambda == 0.0 { 0.0 } else { norm / lambda });
            }
        }
        Self {
            width,
            height,
            row,
            col,
            inv_eigen,
        }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Solve one plane; `rhs` must already be mean-free. Output has zero mean.
    pub fn solve_plane(&self, rhs: &[f64], out: &mut [f64]) {
        let (w, h) = (self.width, self.height);
        out.copy_from_slice(rhs);
        for row in out.chunks_exact_mut(w) {
            self.row.process_dct2(row);
        }
        let mut column = vec![0.0; h];
        self.map_columns(out, &mut column, |c| self.col.process_dct2(c));
        for (v, s) in out.iter_mut().zip(&self.inv_eigen) {
            *v *= s;
        }
        self.map_columns(out, &mut column, |c| self.col.process_dct3(c));
        for row in out.chunks_exact_mut(w) {
            self.row.process_dct3(row);
        }
    }

    fn map_columns(&self, data: &mut [f64], buf: &mut [f64], f: impl Fn(&mut [f64])) {
        let w = self.width;
        for x in 0..w {
            for (y, b) in buf.iter_mut().enumerate() {
                *b = data[y * w + x];
            }
            f(buf);
            for (y, b) in buf.iter().enumerate() {
                data[y * w + x] = *b;
            }
        }
    }
}
