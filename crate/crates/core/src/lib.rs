//! Gradient-domain Gaussian splatting.
//!
//! Scenes are sparse sets of anisotropic 3D Gaussians whose signed
//! amplitudes model the Laplacian of the radiance signal. A view is
//! rendered by splatting those amplitudes into a 2D Laplacian field and
//! solving a Neumann Poisson problem on the pixel grid. The same splatting
//! machinery also renders classical color splats for comparison.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod field;
pub mod io;
pub mod loss;
pub mod poisson;
pub mod scene;
pub mod sparsity;
pub mod splat;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
pub use field::FieldImage;
pub use poisson::{
    discrete_laplacian, loss_hybrid, loss_laplacian_domain, loss_variational, solve_multigrid, solve_spectral,
    PoissonProblem, PoissonSolver, SolveReport, SolverKind,
};
pub use loss::{loss_3dgs, loss_gdgs, psnr, LossConfig};
pub use sparsity::{analyze, compare_domains, fit_cauchy_gamma, sparsity_sweep, threshold, CauchyFit, SparsityReport};
pub use splat::{active_pixel_set, composite_color, composite_laplacian, project, RenderConfig, SplatPass, SplattedGaussian2D};
pub use scene::{covariance, eval_gaussian, Aabb, Camera, GaussianParticle, Scene};
pub use train::{render_3dgs, render_gdgs, train, Mode, Renderer, TrainConfig, TrainView, Trainer};
