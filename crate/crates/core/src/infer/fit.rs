//! Fitting one (sub-)model: grid over θ, then posterior summaries.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::gmrf::{GaussianDensity, GaussianMarginal};
use crate::model::{Dataset, FixedPrior, ModelSpec};

use super::grid::{explore_hyper_grid, mode_natural, GridPlan, HyperGridPosterior, HyperPriorSource, NEGLIGIBLE};
use super::latent::{LatentKind, LatentModel};

pub type Marginal = GaussianMarginal<f64>;

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Replaces the spec's prior of the named fixed effects.
    pub fixed_priors: BTreeMap<String, Marginal>,
    pub hyper_prior: HyperPriorSource,
    pub plan: GridPlan,
    pub points_per_dim: Option<usize>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { fixed_priors: BTreeMap::new(), hyper_prior: HyperPriorSource::Parametric, plan: GridPlan::Explore, points_per_dim: None }
    }
}

pub type NodeMarginal = crate::gmrf::NodeMarginal<f64>;

#[derive(Debug, Clone)]
pub struct BlockFitResult {
    pub fixed_marginals: BTreeMap<String, Marginal>,
    pub hyper_posterior: HyperGridPosterior,
    /// Gaussian approximation of each effect at the θ mode, other latent nodes integrated out.
    pub effect_densities: BTreeMap<String, GaussianDensity<f64>>,
    pub effect_marginals: BTreeMap<String, Vec<NodeMarginal>>,
    /// Natural-scale hyperparameters (free and fixed) at the θ mode.
    pub theta_mode: BTreeMap<String, f64>,
    pub log_marginal_likelihood: f64,
    pub wall_time: f64,
    pub evaluations: usize,
}

/// Applies fixed-effect prior overrides to a spec.
pub fn with_fixed_priors(spec: &ModelSpec, priors: &BTreeMap<String, Marginal>) -> Result<ModelSpec> {
    let mut spec = spec.clone();
    for (name, m) in priors {
        let Some(f) = spec.fixed.get_mut(name) else {
            return Err(Error::InvalidEffect(format!("no fixed effect named `{name}`")));
        };
        GaussianMarginal::new(m.mean, m.precision)?;
        *f = FixedPrior { mean: m.mean, precision: m.precision };
    }
    Ok(spec)
}

/// Fits `spec` to `data`.
pub fn fit_block(spec: &ModelSpec, data: &Dataset, options: &FitOptions) -> Result<BlockFitResult> {
    let start = Instant::now();
    let spec = with_fixed_priors(spec, &options.fixed_priors)?;
    let model = LatentModel::new(&spec, data)?;
    let mut out = fit_model(&model, options)?;
    out.wall_time = start.elapsed().as_secs_f64();
    Ok(out)
}

/// Fits an already bound model; `options.fixed_priors` is ignored here.
pub fn fit_model(model: &LatentModel, options: &FitOptions) -> Result<BlockFitResult> {
    let start = Instant::now();
    let grid = explore_hyper_grid(model, &options.hyper_prior, &options.plan, options.points_per_dim)?;
    let post = &grid.posterior;

    // fixed effects: moment-matched mixture over the grid
    let masses = post.masses();
    let top = masses.iter().cloned().fold(0.0, f64::max);
    let fixed: Vec<&str> = model.blocks.iter().filter(|b| matches!(b.kind, LatentKind::Fixed(_))).map(|b| b.name.as_str()).collect();
    let mut fixed_marginals = BTreeMap::new();
    for (j, name) in fixed.iter().enumerate() {
        let (mut w, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for (s, &mass) in grid.summaries.iter().zip(&masses) {
            let Some(s) = s else { continue };
            if mass < NEGLIGIBLE * top {
                continue;
            }
            let (mu, var) = s.fixed[j];
            w += mass;
            m1 += mass * mu;
            m2 += mass * (var + mu * mu);
        }
        let mean = m1 / w;
        let var = (m2 / w - mean * mean).max(f64::MIN_POSITIVE);
        fixed_marginals.insert(name.to_string(), GaussianMarginal::from_variance(mean, var)?);
    }

    // effects: Gaussian approximation at the θ mode
    let theta_mode = mode_natural(model, post);
    let fit = model.laplace(&theta_mode)?;
    let variances = fit.posterior.marginal_variances();
    let joint = fit.posterior.density();
    let mut effect_densities = BTreeMap::new();
    let mut effect_marginals = BTreeMap::new();
    for b in &model.blocks {
        if !matches!(b.kind, LatentKind::Effect(_)) {
            continue;
        }
        let idx: Vec<usize> = (b.offset..b.offset + b.dim).collect();
        let dens = joint.marginalize(&idx)?;
        let diag = dens.precision.diagonal();
        let marg = idx
            .iter()
            .zip(&diag)
            .map(|(&i, &q)| NodeMarginal { mean: joint.mean[i], precision_diag: q, precision_exact: 1.0 / variances[i] })
            .collect();
        effect_marginals.insert(b.name.clone(), marg);
        effect_densities.insert(b.name.clone(), dens);
    }
    let mut theta_full = model.space.fixed.clone();
    theta_full.extend(theta_mode);
    Ok(BlockFitResult {
        fixed_marginals,
        hyper_posterior: grid.posterior,
        effect_densities,
        effect_marginals,
        theta_mode: theta_full,
        log_marginal_likelihood: grid.log_marginal_likelihood,
        wall_time: start.elapsed().as_secs_f64(),
        evaluations: grid.evaluations,
    })
}
