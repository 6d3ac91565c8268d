//! Sequential fitting of a partitioned model followed by consensus of the random effects.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consensus::{
    combine_marginal_fields, combine_multivariate, marginals_from_multivariate, pool_alpha, rescale_effect, AlphaEstimate, ExpertWeights,
};
use crate::error::{Error, Result};
use crate::gmrf::{build_effect_precision, GaussianDensity, GaussianMarginal};
use crate::infer::{fit_block, BlockFitResult, FitOptions, GridPlan, HyperGridPosterior, HyperPriorSource, Marginal, NodeMarginal};
use crate::model::{partition_dataset, Dataset, EffectRole, HyperSpace, ModelSpec, Partition, PartitionPlan, PartitionedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Marginal,
    #[default]
    Multivariate,
}

/// Which α estimate rescales the copies of a shared effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMethod {
    #[default]
    Median,
    Gaussian,
}

#[derive(Debug, Clone, Default)]
pub struct SequentialOptions {
    pub pooling: Pooling,
    /// Count the latent prior once in the multivariate product.
    pub correct_prior: bool,
    pub alpha_method: AlphaMethod,
    pub points_per_dim: Option<usize>,
    /// Expert weights per effect for marginal pooling, one per contributing step.
    pub expert_weights: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    First,
    Second,
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub pass: Pass,
    /// 1-based partition label.
    pub step: usize,
    pub wall_time: f64,
    pub log_marginal_likelihood: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EffectOrigin {
    /// Pooled over the listed steps.
    Pooled { steps: Vec<usize> },
    /// Present in one step only.
    Single { step: usize },
    /// Nodes split across steps, each reported from the step that owns it.
    Assembled { steps: Vec<usize> },
}

#[derive(Debug, Clone)]
pub struct EffectConsensus {
    pub origin: EffectOrigin,
    /// Node marginals under the selected pooling method.
    pub marginals: Vec<NodeMarginal>,
    /// Marginal weighted averages (pooled effects only).
    pub averaged: Option<Vec<Marginal>>,
    /// Product of the multivariate densities, or the single density of an unpooled effect.
    pub product: Option<GaussianDensity<f64>>,
    pub product_marginals: Option<Vec<NodeMarginal>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlphaResult {
    pub source: String,
    pub estimate: AlphaEstimate<f64>,
    /// Value the copies were divided by.
    pub used: f64,
}

/// Fits and consensus of one pass over the partitions.
#[derive(Debug, Clone)]
pub struct PassReport {
    pub fits: Vec<BlockFitResult>,
    pub effects: BTreeMap<String, EffectConsensus>,
    pub alpha: BTreeMap<String, AlphaResult>,
    pub fit_time: f64,
    pub consensus_time: f64,
}

#[derive(Debug, Clone)]
pub struct ConsensusReport {
    pub first: PassReport,
    pub second: Option<PassReport>,
    pub fixed_marginals: BTreeMap<String, Marginal>,
    pub fixed_history: Vec<BTreeMap<String, Marginal>>,
    /// Hyperparameters updated along the sequence; block-exclusive ones stay in the per-step fits.
    pub hyper_posterior: Option<HyperGridPosterior>,
    pub log: Vec<StepRecord>,
    pub shared: BTreeSet<String>,
    pub wall_time: f64,
}

impl ConsensusReport {
    /// Effects of the last pass.
    pub fn effects(&self) -> &BTreeMap<String, EffectConsensus> {
        &self.second.as_ref().unwrap_or(&self.first).effects
    }

    pub fn alpha(&self) -> &BTreeMap<String, AlphaResult> {
        &self.second.as_ref().unwrap_or(&self.first).alpha
    }
}

/// The posterior of a fixed effect after one step is the prior of the next.
pub fn update_fixed_prior(posterior: Marginal) -> Marginal {
    posterior
}

/// Prior for block `i` in the second pass, `π(β | y₋ᵢ) ∝ π(β | y₁..ᵢ₋₁) π(β | y) / π(β | y₁..ᵢ)`.
pub fn second_pass_prior(prev: Marginal, last: Marginal, current: Marginal) -> Result<Marginal> {
    let tau = prev.precision + last.precision - current.precision;
    if !(tau > 0.0) {
        return Err(Error::InvalidGaussian(format!("second-pass prior precision {tau} is not positive; the sequence history is inconsistent")));
    }
    let mean = (prev.precision * prev.mean + last.precision * last.mean - current.precision * current.mean) / tau;
    GaussianMarginal::new(mean, tau)
}

/// State of the first pass after `step` partitions.
#[derive(Debug, Clone, Default)]
pub struct SequenceState {
    pub step: usize,
    pub fixed_priors: BTreeMap<String, Marginal>,
    pub hyper_prior: Option<HyperGridPosterior>,
    pub stored_fits: Vec<BlockFitResult>,
    pub fixed_history: Vec<BTreeMap<String, Marginal>>,
}

impl SequenceState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fits the next partition with the current priors and passes its posteriors on.
    /// Only hyperparameters in `chain` are carried forward.
    pub fn advance(&mut self, part: &Partition, chain: &BTreeSet<String>, points_per_dim: Option<usize>) -> Result<&BlockFitResult> {
        let step = self.step + 1;
        let fixed_priors = self.fixed_priors.iter().filter(|(k, _)| part.spec.fixed.contains_key(*k)).map(|(k, v)| (k.clone(), *v)).collect();
        let hyper_prior = match &self.hyper_prior {
            Some(g) => HyperPriorSource::Sequential(g.clone()),
            None => HyperPriorSource::Parametric,
        };
        let options = FitOptions { fixed_priors, hyper_prior, plan: GridPlan::Explore, points_per_dim };
        let fit = fit_block(&part.spec, &part.data, &options).map_err(|e| Error::Step { step, source: Box::new(e) })?;
        for (name, m) in &fit.fixed_marginals {
            self.fixed_priors.insert(name.clone(), update_fixed_prior(*m));
        }
        self.hyper_prior = chain_update(self.hyper_prior.as_ref(), &fit.hyper_posterior, chain)
            .map_err(|e| Error::Step { step, source: Box::new(e) })?;
        self.fixed_history.push(self.fixed_priors.clone());
        self.stored_fits.push(fit);
        self.step = step;
        Ok(self.stored_fits.last().unwrap())
    }
}

/// Chain grid after a step: the step posterior on the chained names it has, times the previous
/// chain marginal on the chained names it lacks.
fn chain_update(prev: Option<&HyperGridPosterior>, post: &HyperGridPosterior, chain: &BTreeSet<String>) -> Result<Option<HyperGridPosterior>> {
    let present: Vec<String> = post.names.iter().filter(|n| chain.contains(*n)).cloned().collect();
    let absent: Vec<String> = prev.map(|g| g.names.iter().filter(|n| !present.contains(n)).cloned().collect()).unwrap_or_default();
    let a = (!present.is_empty()).then(|| post.marginalize(&present)).transpose()?;
    let b = (!absent.is_empty()).then(|| prev.unwrap().marginalize(&absent)).transpose()?;
    Ok(match (a, b) {
        (Some(a), Some(b)) => Some(a.product(&b)?),
        (a, b) => a.or(b),
    })
}

/// Free hyperparameters appearing in at least two partitions.
fn chain_names(pm: &PartitionedModel) -> Result<BTreeSet<String>> {
    let mut count: BTreeMap<String, usize> = BTreeMap::new();
    for part in &pm.parts {
        for n in HyperSpace::from_spec(&part.spec)?.names {
            *count.entry(n).or_default() += 1;
        }
    }
    Ok(count.into_iter().filter(|(_, c)| *c >= 2).map(|(n, _)| n).collect())
}

fn record(pass: Pass, step: usize, fit: &BlockFitResult) -> StepRecord {
    StepRecord { pass, step, wall_time: fit.wall_time, log_marginal_likelihood: fit.log_marginal_likelihood, evaluations: fit.evaluations }
}

/// Single pass: sequential prior updating, then consensus of the stored random effects.
pub fn run_sc(spec: &ModelSpec, data: &Dataset, plan: &PartitionPlan, options: &SequentialOptions) -> Result<ConsensusReport> {
    let start = Instant::now();
    let pm = partition_dataset(spec, data, plan)?;
    let chain = chain_names(&pm)?;
    let mut state = SequenceState::new();
    let mut log = Vec::new();
    for part in &pm.parts {
        let fit = state.advance(part, &chain, options.points_per_dim)?;
        log.push(record(Pass::First, part.label, fit));
    }
    let fit_time = start.elapsed().as_secs_f64();
    let t = Instant::now();
    let (effects, alpha) = consensus(spec, &pm, &state.stored_fits, options)?;
    let first = PassReport { fits: state.stored_fits, effects, alpha, fit_time, consensus_time: t.elapsed().as_secs_f64() };
    Ok(ConsensusReport {
        first,
        second: None,
        fixed_marginals: state.fixed_priors,
        fixed_history: state.fixed_history,
        hyper_posterior: state.hyper_prior,
        log,
        shared: pm.shared,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Two passes: [`run_sc`], then every block is refitted on the final hyperparameter support with
/// a fixed-effect prior that leaves its own data out, and the random effects are pooled again.
pub fn run_scp(spec: &ModelSpec, data: &Dataset, plan: &PartitionPlan, options: &SequentialOptions) -> Result<ConsensusReport> {
    let start = Instant::now();
    let mut report = run_sc(spec, data, plan, options)?;
    let pm = partition_dataset(spec, data, plan)?;
    let fits = &report.first.fits;
    let last = &fits[fits.len() - 1].hyper_posterior;
    let chain = report.hyper_posterior.as_ref();
    let final_fixed = &report.fixed_marginals;
    let t = Instant::now();
    let second: Vec<BlockFitResult> = pm
        .parts
        .par_iter()
        .enumerate()
        .map(|(i, part)| {
            let wrap = |e: Error| Error::Step { step: part.label, source: Box::new(e) };
            let mut fixed_priors = BTreeMap::new();
            for (name, base) in &part.spec.fixed {
                let prev = if i == 0 { None } else { report.fixed_history[i - 1].get(name).copied() };
                let prev = match prev {
                    Some(p) => p,
                    None => GaussianMarginal::new(base.mean, base.precision).map_err(wrap)?,
                };
                let prior = second_pass_prior(prev, final_fixed[name], report.fixed_history[i][name]).map_err(wrap)?;
                fixed_priors.insert(name.clone(), prior);
            }
            let grid = frozen_grid(&fits[i].hyper_posterior, last, chain).map_err(wrap)?;
            let options = FitOptions { fixed_priors, hyper_prior: HyperPriorSource::Parametric, plan: GridPlan::Frozen(grid), points_per_dim: None };
            fit_block(&part.spec, &part.data, &options).map_err(wrap)
        })
        .collect::<Result<_>>()?;
    let fit_time = t.elapsed().as_secs_f64();
    for (part, fit) in pm.parts.iter().zip(&second) {
        report.log.push(record(Pass::Second, part.label, fit));
    }
    let t = Instant::now();
    let (effects, alpha) = consensus(spec, &pm, &second, options)?;
    report.second = Some(PassReport { fits: second, effects, alpha, fit_time, consensus_time: t.elapsed().as_secs_f64() });
    report.wall_time += start.elapsed().as_secs_f64();
    Ok(report)
}

/// Hyperparameter support for a block in the second pass: the last step's posterior on the names it
/// shares with the block, the chain on other chained names, and the block's own first-pass posterior
/// on the rest.
fn frozen_grid(own: &HyperGridPosterior, last: &HyperGridPosterior, chain: Option<&HyperGridPosterior>) -> Result<HyperGridPosterior> {
    let names = &own.names;
    if names.is_empty() {
        return Ok(own.clone());
    }
    let a: Vec<String> = names.iter().filter(|n| last.index_of(n).is_some()).cloned().collect();
    if a == *names && last.names == *names {
        return Ok(last.clone());
    }
    let b: Vec<String> = names.iter().filter(|n| !a.contains(n) && chain.is_some_and(|c| c.index_of(n).is_some())).cloned().collect();
    let c: Vec<String> = names.iter().filter(|n| !a.contains(n) && !b.contains(n)).cloned().collect();
    let mut parts = Vec::new();
    if !a.is_empty() {
        parts.push(last.marginalize(&a)?);
    }
    if !b.is_empty() {
        parts.push(chain.unwrap().marginalize(&b)?);
    }
    if !c.is_empty() {
        parts.push(own.marginalize(&c)?);
    }
    let mut g = parts.remove(0);
    for p in &parts {
        g = g.product(p)?;
    }
    Ok(g)
}

struct Contribution {
    step: usize,
    density: GaussianDensity<f64>,
    marginals: Vec<NodeMarginal>,
}

fn relabel(d: &GaussianDensity<f64>, name: &str) -> Result<GaussianDensity<f64>> {
    let out = GaussianDensity::with_indexed_labels(d.mean.clone(), d.precision.clone(), name)?;
    out.with_constraints(d.constraints.clone())
}

/// α estimation, rescaling of copies, and pooling of every effect of the full model.
fn consensus(
    spec: &ModelSpec,
    pm: &PartitionedModel,
    fits: &[BlockFitResult],
    options: &SequentialOptions,
) -> Result<(BTreeMap<String, EffectConsensus>, BTreeMap<String, AlphaResult>)> {
    let mut full: BTreeMap<String, Vec<Contribution>> = BTreeMap::new();
    let mut local: BTreeMap<String, Vec<(usize, Vec<usize>, Vec<NodeMarginal>)>> = BTreeMap::new();
    let mut copies: BTreeMap<String, Vec<(String, Contribution)>> = BTreeMap::new();
    for (part, fit) in pm.parts.iter().zip(fits) {
        for (name, role) in &part.effects {
            let density = fit.effect_densities[name].clone();
            let marginals = fit.effect_marginals[name].clone();
            let c = Contribution { step: part.label, density, marginals };
            match role {
                EffectRole::Shared => full.entry(name.clone()).or_default().push(c),
                EffectRole::Local { node_map } if node_map.len() == spec.effects[name].dim() && node_map.iter().enumerate().all(|(i, &g)| i == g) => {
                    full.entry(name.clone()).or_default().push(c)
                }
                EffectRole::Local { node_map } => local.entry(name.clone()).or_default().push((part.label, node_map.clone(), c.marginals)),
                EffectRole::Copy { source, alpha_name } => copies.entry(alpha_name.clone()).or_default().push((source.clone(), c)),
            }
        }
    }

    let mut alpha = BTreeMap::new();
    for (alpha_name, group) in copies {
        let source = group[0].0.clone();
        let Some(reference) = full.get(&source) else {
            return Err(Error::InvalidEffect(format!("no partition estimates `{source}` to compare its scaled copy `{alpha_name}` with")));
        };
        let fields: Vec<Vec<Marginal>> = reference.iter().map(|c| c.marginals.iter().map(|m| m.exact()).collect()).collect();
        let pooled = combine_marginal_fields(&fields, None)?;
        let mut nodes = Vec::new();
        for (_, c) in &group {
            if c.marginals.len() != pooled.len() {
                return Err(Error::Dimension(format!("copy of `{source}` has {} nodes, the effect has {}", c.marginals.len(), pooled.len())));
            }
            nodes.extend(c.marginals.iter().zip(&pooled).map(|(num, den)| (num.exact(), *den, 0.0)));
        }
        let estimate = pool_alpha(&nodes)?;
        let used = match options.alpha_method {
            AlphaMethod::Median => estimate.point,
            AlphaMethod::Gaussian => estimate.gaussian.mean,
        };
        for (src, c) in group {
            let density = relabel(&rescale_effect(&c.density, used)?, &src)?;
            let a2 = used * used;
            let marginals = c
                .marginals
                .iter()
                .map(|m| NodeMarginal { mean: m.mean / used, precision_diag: m.precision_diag * a2, precision_exact: m.precision_exact * a2 })
                .collect();
            full.entry(src).or_default().push(Contribution { step: c.step, density, marginals });
        }
        alpha.insert(alpha_name, AlphaResult { source, estimate, used });
    }

    let mut effects = BTreeMap::new();
    for (name, mut contribs) in full {
        if local.contains_key(&name) {
            return Err(Error::InvalidEffect(format!("effect `{name}` is both whole and sliced across partitions")));
        }
        contribs.sort_by_key(|c| c.step);
        if contribs.len() == 1 {
            let c = contribs.pop().unwrap();
            let out = EffectConsensus {
                origin: EffectOrigin::Single { step: c.step },
                marginals: c.marginals.clone(),
                averaged: None,
                product: Some(c.density),
                product_marginals: Some(c.marginals),
            };
            effects.insert(name, out);
            continue;
        }
        let steps: Vec<usize> = contribs.iter().map(|c| c.step).collect();
        let fields: Vec<Vec<Marginal>> = contribs.iter().map(|c| c.marginals.iter().map(|m| m.exact()).collect()).collect();
        let expert = options.expert_weights.get(&name).map(|w| ExpertWeights::new(w.clone())).transpose()?;
        let averaged = combine_marginal_fields(&fields, expert.as_ref())?;
        let densities: Vec<GaussianDensity<f64>> = contribs.into_iter().map(|c| c.density).collect();
        let prior = if options.correct_prior {
            let theta = &fits[steps[steps.len() - 1] - 1].theta_mode;
            let q = build_effect_precision(&spec.effects[&name], theta)?;
            Some(GaussianDensity::with_indexed_labels(vec![0.0; q.dim()], q, &name)?)
        } else {
            None
        };
        let product = combine_multivariate(&densities, prior.as_ref(), options.correct_prior)?;
        let product_marginals = marginals_from_multivariate(&product)?;
        let marginals = match options.pooling {
            Pooling::Multivariate => product_marginals.clone(),
            Pooling::Marginal => averaged.iter().map(|m| NodeMarginal { mean: m.mean, precision_diag: m.precision, precision_exact: m.precision }).collect(),
        };
        effects.insert(
            name,
            EffectConsensus { origin: EffectOrigin::Pooled { steps }, marginals, averaged: Some(averaged), product: Some(product), product_marginals: Some(product_marginals) },
        );
    }
    for (name, slices) in local {
        let dim = spec.effects[&name].dim();
        let mut nodes: Vec<Option<NodeMarginal>> = vec![None; dim];
        for (_, map, marg) in &slices {
            for (&g, m) in map.iter().zip(marg) {
                if nodes[g].replace(*m).is_some() {
                    return Err(Error::InvalidEffect(format!("node {g} of `{name}` is estimated in two partitions")));
                }
            }
        }
        let marginals = nodes
            .into_iter()
            .enumerate()
            .map(|(g, m)| m.ok_or_else(|| Error::InvalidEffect(format!("node {g} of `{name}` is not estimated by any partition"))))
            .collect::<Result<_>>()?;
        let steps = slices.iter().map(|s| s.0).collect();
        effects.insert(name, EffectConsensus { origin: EffectOrigin::Assembled { steps }, marginals, averaged: None, product: None, product_marginals: None });
    }
    Ok((effects, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(mean: f64, precision: f64) -> Marginal {
        GaussianMarginal::new(mean, precision).unwrap()
    }

    #[test]
    fn hand_off_is_identity() {
        assert_eq!(update_fixed_prior(m(1.5, 10.0)), m(1.5, 10.0));
    }

    #[test]
    fn second_pass_prior_matches_density_ratio() {
        let r = second_pass_prior(m(0.0, 1.0), m(2.0, 5.0), m(1.0, 3.0)).unwrap();
        assert!((r.precision - 3.0).abs() < 1e-15);
        assert!((r.mean - 7.0 / 3.0).abs() < 1e-15);
        // log π(β|y₋ᵢ) − [log π(β|y₁..ᵢ₋₁) + log π(β|y) − log π(β|y₁..ᵢ)] is constant in β
        let lp = |g: Marginal, b: f64| -0.5 * g.precision * (b - g.mean).powi(2);
        let diff = |b: f64| lp(r, b) - (lp(m(0.0, 1.0), b) + lp(m(2.0, 5.0), b) - lp(m(1.0, 3.0), b));
        for b in [-2.0, 0.3, 4.0] {
            assert!((diff(b) - diff(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn second_pass_prior_special_cases() {
        let last = second_pass_prior(m(0.4, 2.0), m(1.0, 7.0), m(1.0, 7.0)).unwrap();
        assert!((last.mean - 0.4).abs() < 1e-14 && (last.precision - 2.0).abs() < 1e-14);
        let same = second_pass_prior(m(0.4, 2.0), m(0.4, 2.0), m(0.4, 2.0)).unwrap();
        assert!((same.mean - 0.4).abs() < 1e-15 && (same.precision - 2.0).abs() < 1e-15);
        assert!(second_pass_prior(m(0.0, 1.0), m(0.0, 1.0), m(0.0, 3.0)).is_err());
    }
}
