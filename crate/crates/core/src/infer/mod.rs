//! Inference for a single (sub-)model: Laplace approximation at fixed θ, grid
//! exploration of the hyperparameter posterior and posterior summaries.

pub mod family;
pub mod fit;
pub mod grid;
pub mod latent;

pub use family::lgcp_lattice_loglik;
pub use fit::{fit_block, fit_model, with_fixed_priors, BlockFitResult, FitOptions, Marginal, NodeMarginal};
pub use grid::{explore_hyper_grid, GridExploration, GridPlan, HyperGridPosterior, HyperPriorSource, PointSummary};
pub use latent::{gaussian_approx_latent, log_marginal_likelihood, LaplaceFit, LatentBlock, LatentKind, LatentModel};
