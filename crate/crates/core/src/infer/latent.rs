//! Latent layout, observation matrix and the Laplace approximation at fixed θ.
//!
//! The latent vector holds every effect (in name order) followed by every fixed
//! effect (in name order). Each observation row contributes
//! `η = Σ coef·scale·x[col] + offset`, where `scale` is 1 or a share α.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::gmrf::{build_effect_prior, Cholesky, Constraints, EffectSpec, FactoredDensity, GaussianDensity, SparsePrecision, Symbolic};
use crate::model::{Dataset, Family, FixedPrior, HyperSpace, ModelSpec, Term};

use super::family::{check_response, point_loglik, response_constant};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const MAX_NEWTON: usize = 50;
const NEWTON_TOL: f64 = 1e-8;
const MAX_HALVINGS: usize = 30;
/// Relative diagonal jitter on intrinsic blocks of the posterior precision.
const JITTER: f64 = 1e-8;

#[derive(Debug, Clone)]
pub enum LatentKind {
    Effect(EffectSpec),
    Fixed(FixedPrior),
}

/// A named contiguous range of the latent vector.
#[derive(Debug, Clone)]
pub struct LatentBlock {
    pub name: String,
    pub offset: usize,
    pub dim: usize,
    pub kind: LatentKind,
}

#[derive(Debug, Clone)]
struct ObsBlock {
    family: Family,
    hyper: Option<String>,
}

#[derive(Debug, Clone, Default)]
struct Observations {
    blocks: Vec<ObsBlock>,
    block_of: Vec<usize>,
    y: Vec<f64>,
    offset: Vec<f64>,
    ptr: Vec<usize>,
    col: Vec<usize>,
    coef: Vec<f64>,
    /// Index into the model's α names, when the term is scaled by an estimated α.
    scale: Vec<Option<usize>>,
    pair_ptr: Vec<usize>,
    pair_pos: Vec<usize>,
}

impl Observations {
    fn nrows(&self) -> usize {
        self.y.len()
    }

    fn terms(&self, r: usize) -> std::ops::Range<usize> {
        self.ptr[r]..self.ptr[r + 1]
    }
}

/// Prior of the latent vector at one θ, on the posterior pattern.
struct PriorAt {
    /// Prior precision values (jittered on intrinsic blocks) on the posterior pattern.
    q: SparsePrecision<f64>,
    mean: Vec<f64>,
    log_norm: LogNorm,
}

enum LogNorm {
    /// Per block: (offset, precision, constant), density `constant − ½ xᵀQx` on the constraint subspace;
    /// proper constrained blocks carry a factored density instead.
    Blocks(Vec<BlockNorm>),
    Override(Box<FactoredDensity<f64>>),
}

enum BlockNorm {
    Quadratic { offset: usize, q: SparsePrecision<f64>, constant: f64 },
    Conditioned { offset: usize, density: Box<FactoredDensity<f64>> },
    Fixed { index: usize, mean: f64, precision: f64 },
}

/// Gaussian approximation of the latent field at one θ.
pub struct LaplaceFit {
    pub theta: BTreeMap<String, f64>,
    pub posterior: FactoredDensity<f64>,
    pub log_marginal_likelihood: f64,
    pub loglik: f64,
    pub iterations: usize,
}

impl LaplaceFit {
    pub fn mode(&self) -> &[f64] {
        &self.posterior.density().mean
    }
}

/// A model bound to its data, ready for repeated evaluation at different θ.
pub struct LatentModel {
    pub spec: ModelSpec,
    pub space: HyperSpace,
    pub blocks: Vec<LatentBlock>,
    labels: Vec<String>,
    n: usize,
    alpha_names: Vec<String>,
    obs: Observations,
    pattern: SparsePrecision<f64>,
    symbolic: Arc<Symbolic>,
    constraints: Option<Constraints<f64>>,
    prior_override: Option<GaussianDensity<f64>>,
    all_gaussian: bool,
}

fn index_value(v: f64, dim: usize, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && (v as usize) < dim {
        Ok(v as usize)
    } else {
        Err(Error::Data(format!("index {v} of {what} is not an integer in [0, {dim})")))
    }
}

impl LatentModel {
    pub fn new(spec: &ModelSpec, data: &Dataset) -> Result<Self> {
        spec.validate()?;
        let space = HyperSpace::from_spec(spec)?;
        let mut blocks = Vec::new();
        let mut labels = Vec::new();
        let mut n = 0;
        for (name, e) in &spec.effects {
            let dim = e.dim();
            labels.extend((0..dim).map(|i| format!("{name}[{i}]")));
            blocks.push(LatentBlock { name: name.clone(), offset: n, dim, kind: LatentKind::Effect(e.clone()) });
            n += dim;
        }
        for (name, f) in &spec.fixed {
            labels.push(name.clone());
            blocks.push(LatentBlock { name: name.clone(), offset: n, dim: 1, kind: LatentKind::Fixed(*f) });
            n += 1;
        }
        let offset_of: BTreeMap<&str, usize> = blocks.iter().map(|b| (b.name.as_str(), b.offset)).collect();
        let alpha_names: Vec<String> = spec.shares.iter().filter(|s| s.fixed_alpha.is_none()).map(|s| s.alpha_name.clone()).collect();

        let mut obs = Observations { ptr: vec![0], ..Default::default() };
        for (b, block) in spec.blocks.iter().enumerate() {
            obs.blocks.push(ObsBlock { family: block.family, hyper: block.hyper.clone() });
            let table = data.get(&block.data).ok_or_else(|| Error::Data(format!("no data table named `{}`", block.data)))?;
            let y = table.column(&block.response)?;
            let offset = match &block.offset {
                Some(c) => table.finite_column(c)?.to_vec(),
                None => vec![0.0; table.nrows()],
            };
            for (r, &v) in y.iter().enumerate() {
                check_response(block.family, v).map_err(|m| Error::Domain(format!("block `{}` row {r}: {m}", block.name)))?;
            }
            // resolve each term to column data once
            enum Src<'a> {
                Const(usize),
                Cov(usize, &'a [f64]),
                Node { off: usize, cols: Vec<&'a [f64]>, dims: Vec<usize>, scale: (f64, Option<usize>), what: String },
            }
            let mut srcs = Vec::new();
            for term in &block.predictor {
                srcs.push(match term {
                    Term::Intercept { intercept } => Src::Const(offset_of[intercept.as_str()]),
                    Term::Covariate { covariate, beta } => Src::Cov(offset_of[beta.as_str()], table.finite_column(covariate)?),
                    Term::Effect { effect: name, index } | Term::Share { share: name, index } => {
                        let e = &spec.effects[name];
                        let dims = if index.len() == 2 { vec![e.a.as_ref().unwrap().dim(), e.b.as_ref().unwrap().dim()] } else { vec![e.dim()] };
                        let cols = index.iter().map(|c| table.column(c)).collect::<Result<Vec<_>>>()?;
                        let scale = match term {
                            Term::Share { .. } => {
                                let link = spec.share_for(b, name).expect("validated share link");
                                match link.fixed_alpha {
                                    Some(a) => (a, None),
                                    None => (1.0, alpha_names.iter().position(|a| *a == link.alpha_name)),
                                }
                            }
                            _ => (1.0, None),
                        };
                        Src::Node { off: offset_of[name.as_str()], cols, dims, scale, what: format!("effect `{name}` in block `{}`", block.name) }
                    }
                });
            }
            for r in 0..table.nrows() {
                obs.block_of.push(b);
                obs.y.push(y[r]);
                obs.offset.push(offset[r]);
                for s in &srcs {
                    let (col, coef, scale) = match s {
                        Src::Const(c) => (*c, 1.0, None),
                        Src::Cov(c, v) => (*c, v[r], None),
                        Src::Node { off, cols, dims, scale, what } => {
                            let mut node = 0;
                            for (c, d) in cols.iter().zip(dims) {
                                node = node * d + index_value(c[r], *d, what)?;
                            }
                            (off + node, scale.0, scale.1)
                        }
                    };
                    obs.col.push(col);
                    obs.coef.push(coef);
                    obs.scale.push(scale);
                }
                obs.ptr.push(obs.col.len());
            }
        }
        let all_gaussian = obs.blocks.iter().all(|b| b.family == Family::Gaussian);

        // posterior pattern: prior blocks plus AᵀA
        let init = space.natural(&space.initial());
        let mut trip: Vec<(usize, usize, f64)> = Vec::new();
        let mut cons = Vec::new();
        for b in &blocks {
            match &b.kind {
                LatentKind::Effect(e) => {
                    let p = build_effect_prior(e, &init)?;
                    for i in 0..b.dim {
                        for (j, _) in p.precision.row(i) {
                            trip.push((b.offset + i, b.offset + j, 0.0));
                        }
                        trip.push((b.offset + i, b.offset + i, 0.0));
                    }
                    if let Some(c) = p.constraints {
                        cons.push((b.offset, c));
                    }
                }
                LatentKind::Fixed(_) => trip.push((b.offset, b.offset, 0.0)),
            }
        }
        for r in 0..obs.nrows() {
            for k in obs.terms(r) {
                for l in obs.terms(r) {
                    trip.push((obs.col[k], obs.col[l], 0.0));
                }
            }
        }
        let pattern = SparsePrecision::from_triplets(n, &trip)?;
        obs.pair_ptr.push(0);
        for r in 0..obs.nrows() {
            for k in obs.terms(r) {
                for l in obs.terms(r) {
                    obs.pair_pos.push(pattern.position(obs.col[k], obs.col[l]).expect("pattern holds AᵀA"));
                }
            }
            obs.pair_ptr.push(obs.pair_pos.len());
        }
        let constraints = Constraints::stack(n, &cons.iter().map(|(o, c)| (*o, c)).collect::<Vec<_>>());
        let symbolic = Arc::new(Symbolic::analyze(&pattern));
        Ok(LatentModel {
            spec: spec.clone(),
            space,
            blocks,
            labels,
            n,
            alpha_names,
            obs,
            pattern,
            symbolic,
            constraints,
            prior_override: None,
            all_gaussian,
        })
    }

    /// Replaces the prior built from the spec by an explicit latent prior.
    pub fn with_latent_prior(mut self, prior: GaussianDensity<f64>) -> Result<Self> {
        if prior.dim() != self.n {
            return Err(Error::Dimension(format!("latent prior has dimension {}, model has {}", prior.dim(), self.n)));
        }
        let mut trip: Vec<(usize, usize, f64)> = Vec::new();
        for i in 0..self.n {
            trip.extend(self.pattern.row(i).map(|(j, _)| (i, j, 0.0)));
            trip.extend(prior.precision.row(i).map(|(j, _)| (i, j, 0.0)));
        }
        self.pattern = SparsePrecision::from_triplets(self.n, &trip)?;
        self.obs.pair_pos.clear();
        for r in 0..self.obs.nrows() {
            for k in self.obs.terms(r) {
                for l in self.obs.terms(r) {
                    self.obs.pair_pos.push(self.pattern.position(self.obs.col[k], self.obs.col[l]).expect("pattern holds AᵀA"));
                }
            }
        }
        self.symbolic = Arc::new(Symbolic::analyze(&self.pattern));
        self.constraints = prior.constraints.clone();
        self.prior_override = Some(prior);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn block(&self, name: &str) -> Option<&LatentBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn nobs(&self) -> usize {
        self.obs.nrows()
    }

    pub fn constraints(&self) -> Option<&Constraints<f64>> {
        self.constraints.as_ref()
    }

    fn hyper(theta: &BTreeMap<String, f64>, name: &str) -> Result<f64> {
        theta.get(name).copied().ok_or_else(|| Error::InvalidHyper(format!("no value for hyperparameter `{name}`")))
    }

    fn prior_at(&self, theta: &BTreeMap<String, f64>) -> Result<PriorAt> {
        let mut q = self.pattern.clone();
        q.values_mut().iter_mut().for_each(|v| *v = 0.0);
        let add = |q: &mut SparsePrecision<f64>, off: usize, m: &SparsePrecision<f64>| {
            for i in 0..m.dim() {
                for (j, v) in m.row(i) {
                    let p = q.position(off + i, off + j).expect("pattern holds the prior");
                    q.values_mut()[p] += v;
                }
            }
        };
        if let Some(p) = &self.prior_override {
            add(&mut q, 0, &p.precision);
            let fd = p.factor()?;
            return Ok(PriorAt { q, mean: p.mean.clone(), log_norm: LogNorm::Override(Box::new(fd)) });
        }
        let mut mean = vec![0.0; self.n];
        let mut norms = Vec::new();
        for b in &self.blocks {
            match &b.kind {
                LatentKind::Effect(e) => {
                    let p = build_effect_prior(e, theta)?;
                    add(&mut q, b.offset, &p.precision);
                    let def = b.dim - p.rank;
                    if def > 0 {
                        let diag = p.precision.diagonal();
                        let eps = JITTER * diag.iter().sum::<f64>() / diag.len() as f64;
                        for i in 0..b.dim {
                            let pos = q.position(b.offset + i, b.offset + i).unwrap();
                            q.values_mut()[pos] += eps;
                        }
                    }
                    if def == 0 && p.constraints.is_some() {
                        let d = GaussianDensity::with_indexed_labels(vec![0.0; b.dim], p.precision, &b.name)?
                            .with_constraints(p.constraints)?
                            .into_factored()?;
                        norms.push(BlockNorm::Conditioned { offset: b.offset, density: Box::new(d) });
                    } else {
                        let constant = 0.5 * p.log_det - 0.5 * p.rank as f64 * LN_2PI;
                        norms.push(BlockNorm::Quadratic { offset: b.offset, q: p.precision, constant });
                    }
                }
                LatentKind::Fixed(f) => {
                    let pos = q.position(b.offset, b.offset).unwrap();
                    q.values_mut()[pos] += f.precision;
                    mean[b.offset] = f.mean;
                    norms.push(BlockNorm::Fixed { index: b.offset, mean: f.mean, precision: f.precision });
                }
            }
        }
        Ok(PriorAt { q, mean, log_norm: LogNorm::Blocks(norms) })
    }

    fn log_prior(&self, prior: &PriorAt, x: &[f64]) -> f64 {
        match &prior.log_norm {
            LogNorm::Override(d) => d.log_density(x),
            LogNorm::Blocks(blocks) => blocks
                .iter()
                .map(|b| match b {
                    BlockNorm::Quadratic { offset, q, constant } => constant - 0.5 * q.quad_form(&x[*offset..*offset + q.dim()]),
                    BlockNorm::Conditioned { offset, density } => density.log_density(&x[*offset..*offset + density.density().dim()]),
                    BlockNorm::Fixed { index, mean, precision } => {
                        let r = x[*index] - mean;
                        0.5 * (precision.ln() - LN_2PI) - 0.5 * precision * r * r
                    }
                })
                .sum(),
        }
    }

    fn alphas(&self, theta: &BTreeMap<String, f64>) -> Result<Vec<f64>> {
        self.alpha_names.iter().map(|a| Self::hyper(theta, a)).collect()
    }

    fn family_hypers(&self, theta: &BTreeMap<String, f64>) -> Result<Vec<f64>> {
        self.obs.blocks.iter().map(|b| b.hyper.as_ref().map_or(Ok(1.0), |h| Self::hyper(theta, h))).collect()
    }

    fn coef(&self, k: usize, alphas: &[f64]) -> f64 {
        self.obs.coef[k] * self.obs.scale[k].map_or(1.0, |a| alphas[a])
    }

    /// Linear predictor (offsets included) for every observation row.
    pub fn linear_predictor(&self, x: &[f64], theta: &BTreeMap<String, f64>) -> Result<Vec<f64>> {
        let alphas = self.alphas(theta)?;
        Ok((0..self.obs.nrows()).map(|r| self.obs.offset[r] + self.obs.terms(r).map(|k| self.coef(k, &alphas) * x[self.obs.col[k]]).sum::<f64>()).collect())
    }

    /// Observation log-likelihood `log π(y | x, θ)`.
    pub fn loglik(&self, x: &[f64], theta: &BTreeMap<String, f64>) -> Result<f64> {
        let hyp = self.family_hypers(theta)?;
        let eta = self.linear_predictor(x, theta)?;
        Ok(self.loglik_eta(&eta, &hyp))
    }

    fn loglik_eta(&self, eta: &[f64], hyp: &[f64]) -> f64 {
        let mut total = 0.0;
        for (r, &e) in eta.iter().enumerate() {
            let b = self.obs.block_of[r];
            let fam = self.obs.blocks[b].family;
            total += response_constant(fam, self.obs.y[r], hyp[b]) + point_loglik(fam, self.obs.y[r], e, hyp[b]).value;
        }
        total
    }

    /// Posterior precision values at `x` and the likelihood gradient `Aᵀ∂ℓ/∂η`.
    fn curvature(&self, prior: &PriorAt, eta: &[f64], hyp: &[f64], alphas: &[f64]) -> (SparsePrecision<f64>, Vec<f64>) {
        let mut h = prior.q.clone();
        let mut grad = vec![0.0; self.n];
        for (r, &e) in eta.iter().enumerate() {
            let b = self.obs.block_of[r];
            let p = point_loglik(self.obs.blocks[b].family, self.obs.y[r], e, hyp[b]);
            let terms = self.obs.terms(r);
            let mut pp = self.obs.pair_ptr[r];
            for k in terms.clone() {
                let ak = self.coef(k, alphas);
                grad[self.obs.col[k]] += p.grad * ak;
                for l in terms.clone() {
                    let al = self.coef(l, alphas);
                    h.values_mut()[self.obs.pair_pos[pp]] += p.curvature * ak * al;
                    pp += 1;
                }
            }
        }
        (h, grad)
    }

    fn objective(&self, prior: &PriorAt, x: &[f64], theta: &BTreeMap<String, f64>, hyp: &[f64]) -> Result<f64> {
        let eta = self.linear_predictor(x, theta)?;
        let r: Vec<f64> = x.iter().zip(&prior.mean).map(|(a, b)| a - b).collect();
        Ok(self.loglik_eta(&eta, hyp) - 0.5 * prior.q.quad_form(&r))
    }

    fn factor(&self, h: &SparsePrecision<f64>) -> Result<Cholesky<f64>> {
        self.symbolic.factor(h)
    }

    fn density(&self, mean: Vec<f64>, h: SparsePrecision<f64>) -> Result<GaussianDensity<f64>> {
        GaussianDensity::new(mean, h, self.labels.clone())?.with_constraints(self.constraints.clone())
    }

    /// Newton iterations to the mode of `π(x | y, θ)` and the Laplace estimate of `log π(y | θ)`.
    /// `theta` holds natural-scale values of at least the free hyperparameters.
    pub fn laplace(&self, theta: &BTreeMap<String, f64>) -> Result<LaplaceFit> {
        let mut full = self.space.fixed.clone();
        full.extend(theta.iter().map(|(k, v)| (k.clone(), *v)));
        let theta = &full;
        let prior = self.prior_at(theta)?;
        let hyp = self.family_hypers(theta)?;
        let alphas = self.alphas(theta)?;
        for (v, b) in hyp.iter().zip(&self.obs.blocks) {
            if !(*v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidHyper(format!("{} hyperparameter must be positive, got {v}", b.family.name())));
            }
        }

        let mut x = prior.mean.clone();
        if let Some(c) = &self.constraints {
            if c.apply(&x).iter().any(|v| v.abs() > 1e-12) {
                return Err(Error::InvalidGaussian("prior mean violates the latent constraints".into()));
            }
        }
        let mut f_old = self.objective(&prior, &x, theta, &hyp)?;
        let mut iterations = 0;
        let mut last: Option<(SparsePrecision<f64>, Cholesky<f64>)> = None;
        while iterations < MAX_NEWTON {
            iterations += 1;
            let eta = self.linear_predictor(&x, theta)?;
            let (h, lgrad) = self.curvature(&prior, &eta, &hyp, &alphas);
            let chol = self.factor(&h)?;
            let qr = prior.q.mul_vec(&x.iter().zip(&prior.mean).map(|(a, b)| a - b).collect::<Vec<_>>());
            let g: Vec<f64> = lgrad.iter().zip(&qr).map(|(a, b)| a - b).collect();
            let step = chol.solve(&g);
            let mut target: Vec<f64> = x.iter().zip(&step).map(|(a, b)| a + b).collect();
            if self.constraints.is_some() {
                let fd = FactoredDensity::from_factor(self.density(target.clone(), h.clone())?, chol.clone())?;
                target = fd.constrained_mean();
            }
            let mut t = 1.0;
            let mut halvings = 0;
            let (x_new, f_new) = loop {
                let cand: Vec<f64> = x.iter().zip(&target).map(|(a, b)| a + t * (b - a)).collect();
                let f = self.objective(&prior, &cand, theta, &hyp)?;
                if f.is_finite() && f >= f_old - 1e-12 * (1.0 + f_old.abs()) {
                    break (cand, f);
                }
                halvings += 1;
                if halvings > MAX_HALVINGS {
                    return Err(Error::Divergence(format!("step halving exhausted after {MAX_HALVINGS} halvings")));
                }
                t *= 0.5;
            };
            let delta = x.iter().zip(&x_new).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            x = x_new;
            f_old = f_new;
            if self.all_gaussian && halvings == 0 {
                // curvature does not depend on x: the first full step is exact
                last = Some((h, chol));
                break;
            }
            if delta < NEWTON_TOL {
                break;
            }
        }
        let (h, chol) = match last {
            Some(hc) => hc,
            None => {
                let eta = self.linear_predictor(&x, theta)?;
                let (h, _) = self.curvature(&prior, &eta, &hyp, &alphas);
                let chol = self.factor(&h)?;
                (h, chol)
            }
        };
        let posterior = FactoredDensity::from_factor(self.density(x.clone(), h)?, chol)?;
        let loglik = self.loglik(&x, theta)?;
        let log_ml = loglik + self.log_prior(&prior, &x) - posterior.log_density(&x);
        if !log_ml.is_finite() {
            return Err(Error::Divergence("Laplace approximation gave a non-finite marginal likelihood".into()));
        }
        Ok(LaplaceFit { theta: theta.clone(), posterior, log_marginal_likelihood: log_ml, loglik, iterations })
    }
}

/// Gaussian approximation of `π(x | y, θ)`: mean at the mode, precision prior plus
/// the negative log-likelihood Hessian there. `latent_prior` replaces the spec's prior.
pub fn gaussian_approx_latent(
    spec: &ModelSpec,
    data: &Dataset,
    theta: &BTreeMap<String, f64>,
    latent_prior: Option<&GaussianDensity<f64>>,
) -> Result<GaussianDensity<f64>> {
    Ok(bind(spec, data, latent_prior)?.laplace(theta)?.posterior.into_density())
}

/// Laplace estimate of `log π(y | θ)`.
pub fn log_marginal_likelihood(
    spec: &ModelSpec,
    data: &Dataset,
    theta: &BTreeMap<String, f64>,
    latent_prior: Option<&GaussianDensity<f64>>,
) -> Result<f64> {
    Ok(bind(spec, data, latent_prior)?.laplace(theta)?.log_marginal_likelihood)
}

fn bind(spec: &ModelSpec, data: &Dataset, latent_prior: Option<&GaussianDensity<f64>>) -> Result<LatentModel> {
    let m = LatentModel::new(spec, data)?;
    match latent_prior {
        Some(p) => m.with_latent_prior(p.clone()),
        None => Ok(m),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{parse_model_config, DataTable};
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(tables: Vec<DataTable>) -> Dataset {
        tables.into_iter().map(|t| (t.name.clone(), t)).collect()
    }

    fn theta(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn dense(q: &SparsePrecision<f64>) -> DMatrix<f64> {
        let d = q.to_dense();
        DMatrix::from_fn(q.dim(), q.dim(), |i, j| d[i][j])
    }

    const POISSON_ONE: &str = r#"
[fixed.b0]
precision = 1.0

[[blocks]]
name = "obs"
family = "poisson"
link = "log"
data = "d"
response = "y"
predictor = [{ intercept = "b0" }]
"#;

    #[test]
    fn poisson_single_count_at_prior_mean() {
        let spec = parse_model_config(POISSON_ONE).unwrap();
        let data = dataset(vec![DataTable::new("d", vec![("y".into(), vec![1.0])]).unwrap()]);
        let g = gaussian_approx_latent(&spec, &data, &BTreeMap::new(), None).unwrap();
        assert!(g.mean[0].abs() < 1e-12);
        assert!((g.precision.get(0, 0) - 2.0).abs() < 1e-12);
        let prior = GaussianDensity::new(vec![0.0], SparsePrecision::identity(1), vec!["b0".into()]).unwrap();
        let g2 = gaussian_approx_latent(&spec, &data, &BTreeMap::new(), Some(&prior)).unwrap();
        assert_eq!(g.mean, g2.mean);
    }

    fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
        let r = (5f64.sqrt() - 1.0) / 2.0;
        while b - a > 1e-12 {
            let (c, d) = (b - r * (b - a), a + r * (b - a));
            if f(c) > f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn bernoulli_mode_matches_golden_section() {
        let text = POISSON_ONE.replace("poisson", "bernoulli").replace("\"log\"", "\"logit\"");
        let spec = parse_model_config(&text).unwrap();
        for ys in [vec![0.0, 1.0], vec![1.0, 1.0, 0.0]] {
            let data = dataset(vec![DataTable::new("d", vec![("y".into(), ys.clone())]).unwrap()]);
            let g = gaussian_approx_latent(&spec, &data, &BTreeMap::new(), None).unwrap();
            // the squared score vanishes at the mode and is not flat there in absolute terms
            let score = |b: f64| ys.iter().map(|y| y - 1.0 / (1.0 + (-b).exp())).sum::<f64>() - b;
            let oracle = golden_max(|b| -score(b).powi(2), -5.0, 5.0);
            assert!((g.mean[0] - oracle).abs() < 1e-8, "{} vs {oracle}", g.mean[0]);
        }
    }

    const LINEAR: &str = r#"
[effects.u]
kind = "iid"
n = 5
hyper = ["tau_u"]

[fixed.b0]
mean = 0.5
precision = 0.1

[fixed.b1]
precision = 0.5

[hyper_priors.tau_u]
dist = "loggamma"
shape = 1.0
rate = 0.1

[hyper_priors.tau_y]
dist = "loggamma"
shape = 1.0
rate = 0.1

[[blocks]]
name = "obs"
family = "gaussian"
link = "identity"
data = "d"
response = "y"
offset = "off"
hyper = "tau_y"
predictor = [{ intercept = "b0" }, { covariate = "x", beta = "b1" }, { effect = "u", index = ["i"] }]
"#;

    fn linear_data(rows: usize, seed: u64) -> DataTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let i: Vec<f64> = (0..rows).map(|r| (r % 5) as f64).collect();
        let x: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        let off: Vec<f64> = (0..rows).map(|_| rng.random_range(-0.2..0.2)).collect();
        let y: Vec<f64> = (0..rows).map(|r| 1.0 + 0.7 * x[r] + rng.random_range(-1.0..1.0)).collect();
        DataTable::new("d", vec![("y".into(), y), ("x".into(), x), ("i".into(), i), ("off".into(), off)]).unwrap()
    }

    /// Dense design matrix, prior precision and prior mean of the linear model (latent order u[0..5], b0, b1).
    fn linear_oracle(t: &DataTable, tau_u: f64) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let n = t.nrows();
        let mut a = DMatrix::zeros(n, 7);
        for r in 0..n {
            a[(r, t.column("i").unwrap()[r] as usize)] = 1.0;
            a[(r, 5)] = 1.0;
            a[(r, 6)] = t.column("x").unwrap()[r];
        }
        let mut q0 = DMatrix::zeros(7, 7);
        for i in 0..5 {
            q0[(i, i)] = tau_u;
        }
        q0[(5, 5)] = 0.1;
        q0[(6, 6)] = 0.5;
        let mu0 = DVector::from_vec(vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0]);
        (a, q0, mu0)
    }

    fn gaussian_log_pdf(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        let chol = cov.clone().cholesky().unwrap();
        let r = y - mean;
        let sol = chol.solve(&r);
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * (y.len() as f64 * LN_2PI + logdet + r.dot(&sol))
    }

    #[test]
    fn gaussian_family_is_conjugate() {
        let spec = parse_model_config(LINEAR).unwrap();
        let t = linear_data(12, 1);
        let (tau_u, tau_y) = (2.0, 3.0);
        let data = dataset(vec![t.clone()]);
        let th = theta(&[("tau_u", tau_u), ("tau_y", tau_y)]);
        let model = LatentModel::new(&spec, &data).unwrap();
        let fit = model.laplace(&th).unwrap();

        let (a, q0, mu0) = linear_oracle(&t, tau_u);
        let y = DVector::from_column_slice(t.column("y").unwrap());
        let off = DVector::from_column_slice(t.column("off").unwrap());
        let qp = &q0 + a.transpose() * &a * tau_y;
        let b = &q0 * &mu0 + a.transpose() * (&y - &off) * tau_y;
        let mean = qp.clone().cholesky().unwrap().solve(&b);
        for i in 0..7 {
            assert!((fit.mode()[i] - mean[i]).abs() < 1e-10);
        }
        let got = dense(&fit.posterior.density().precision);
        assert!((got - &qp).abs().max() < 1e-10);

        let cov = &a * q0.clone().try_inverse().unwrap() * a.transpose() + DMatrix::identity(12, 12) / tau_y;
        let oracle = gaussian_log_pdf(&y, &(&a * &mu0 + &off), &cov);
        assert!((fit.log_marginal_likelihood - oracle).abs() < 1e-8, "{} vs {oracle}", fit.log_marginal_likelihood);
    }

    #[test]
    fn duplicated_row_adds_its_predictive_density() {
        let spec = parse_model_config(LINEAR).unwrap();
        let t = linear_data(9, 2);
        let th = theta(&[("tau_u", 1.5), ("tau_y", 2.0)]);
        let base = LatentModel::new(&spec, &dataset(vec![t.clone()])).unwrap().laplace(&th).unwrap();
        let mut rows: Vec<usize> = (0..9).collect();
        rows.push(4);
        let dup = LatentModel::new(&spec, &dataset(vec![t.select_rows(&rows)])).unwrap().laplace(&th).unwrap();
        // predictive of row 4 given the original data
        let mut a = vec![0.0; 7];
        a[t.column("i").unwrap()[4] as usize] = 1.0;
        a[5] = 1.0;
        a[6] = t.column("x").unwrap()[4];
        let fd = &base.posterior;
        let m: f64 = a.iter().zip(fd.density().mean.iter()).map(|(x, y)| x * y).sum::<f64>() + t.column("off").unwrap()[4];
        let s = fd.constrained_solve(&a);
        let v: f64 = a.iter().zip(&s).map(|(x, y)| x * y).sum::<f64>() + 0.5;
        let y = t.column("y").unwrap()[4];
        let pred = -0.5 * (LN_2PI + v.ln() + (y - m) * (y - m) / v);
        let diff = dup.log_marginal_likelihood - base.log_marginal_likelihood;
        assert!((diff - pred).abs() < 1e-6, "{diff} vs {pred}");
    }

    const RW2: &str = r#"
[effects.f]
kind = "rw2"
n = 8
hyper = ["tau_f"]

[fixed.b0]

[hyper_priors.tau_f]
dist = "loggamma"
shape = 1.0
rate = 0.1

[hyper_priors.tau_y]
dist = "fixed"
value = 4.0

[[blocks]]
name = "obs"
family = "gaussian"
link = "identity"
data = "d"
response = "y"
hyper = "tau_y"
predictor = [{ intercept = "b0" }, { effect = "f", index = ["k"] }]
"#;

    #[test]
    fn constrained_intrinsic_model_matches_subspace_oracle() {
        let spec = parse_model_config(RW2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows = 20;
        let k: Vec<f64> = (0..rows).map(|r| (r % 8) as f64).collect();
        let y: Vec<f64> = k.iter().map(|v| (v * 0.8).sin() + 2.0 + rng.random_range(-0.3..0.3)).collect();
        let t = DataTable::new("d", vec![("y".into(), y.clone()), ("k".into(), k.clone())]).unwrap();
        let tau_f = 3.0;
        let fit = LatentModel::new(&spec, &dataset(vec![t])).unwrap().laplace(&theta(&[("tau_f", tau_f)])).unwrap();

        // prior on the subspace orthogonal to the RW2 null space, plus the intercept
        let n = 9;
        let mut r = DMatrix::zeros(n, n);
        let gram = crate::gmrf::precision::difference_gram::<f64>(8, 2);
        for i in 0..8 {
            for (j, v) in gram.row(i) {
                r[(i, j)] = tau_f * v;
            }
        }
        r[(8, 8)] = 0.001;
        let mut c = DMatrix::zeros(2, n);
        for i in 0..8 {
            c[(0, i)] = 1.0;
            c[(1, i)] = i as f64;
        }
        let svd = c.clone().svd(false, true);
        let vt = svd.v_t.unwrap();
        // rows 2.. of the full right singular basis span null(C)
        let full = c.transpose().insert_columns(2, n - 2, 0.0);
        let basis = {
            let qr = full.clone().qr();
            let q = qr.q();
            q.columns(2, n - 2).into_owned()
        };
        assert!((c.clone() * &basis).abs().max() < 1e-10, "{}", vt.nrows());
        let mut a = DMatrix::zeros(rows, n);
        for (i, kv) in k.iter().enumerate() {
            a[(i, *kv as usize)] = 1.0;
            a[(i, 8)] = 1.0;
        }
        let yv = DVector::from_vec(y);
        let qz = basis.transpose() * (&r + a.transpose() * &a * 4.0) * &basis;
        let bz = basis.transpose() * a.transpose() * &yv * 4.0;
        let z = qz.clone().cholesky().unwrap().solve(&bz);
        let mean = &basis * z;
        let cov = &basis * qz.try_inverse().unwrap() * basis.transpose();
        let var = fit.posterior.marginal_variances();
        for i in 0..n {
            assert!((fit.mode()[i] - mean[i]).abs() < 1e-6, "mean {i}: {} vs {}", fit.mode()[i], mean[i]);
            assert!((var[i] - cov[(i, i)]).abs() < 1e-6 * cov[(i, i)].max(1.0), "var {i}");
        }
        let prior_cov = &basis * (basis.transpose() * &r * &basis).try_inverse().unwrap() * basis.transpose();
        let ycov = &a * prior_cov * a.transpose() + DMatrix::identity(rows, rows) / 4.0;
        let oracle = gaussian_log_pdf(&yv, &DVector::zeros(rows), &ycov);
        assert!((fit.log_marginal_likelihood - oracle).abs() < 1e-5, "{} vs {oracle}", fit.log_marginal_likelihood);
    }

    #[test]
    fn empty_block_contributes_nothing() {
        let spec = parse_model_config(RW2).unwrap();
        let t = DataTable::new("d", vec![("y".into(), vec![]), ("k".into(), vec![])]).unwrap();
        let fit = LatentModel::new(&spec, &dataset(vec![t])).unwrap().laplace(&theta(&[("tau_f", 2.0)])).unwrap();
        assert!(fit.log_marginal_likelihood.abs() < 1e-6, "{}", fit.log_marginal_likelihood);
        let spec = parse_model_config(LINEAR).unwrap();
        let t = linear_data(0, 1);
        let fit = LatentModel::new(&spec, &dataset(vec![t])).unwrap().laplace(&theta(&[("tau_u", 2.0), ("tau_y", 1.0)])).unwrap();
        assert!(fit.log_marginal_likelihood.abs() < 1e-10);
    }

    const POISSON_5: &str = r#"
[effects.u]
kind = "iid"
n = 3
hyper = ["tau_u"]

[fixed.b0]
precision = 0.2

[fixed.b1]
precision = 0.2

[hyper_priors.tau_u]
dist = "loggamma"
shape = 1.0
rate = 0.1

[[blocks]]
name = "obs"
family = "poisson"
link = "log"
data = "d"
response = "y"
predictor = [{ intercept = "b0" }, { covariate = "x", beta = "b1" }, { effect = "u", index = ["i"] }]
"#;

    #[test]
    fn newton_mode_and_curvature() {
        let spec = parse_model_config(POISSON_5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows = 30;
        let x: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        let i: Vec<f64> = (0..rows).map(|r| (r % 3) as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| ((1.0 + v) * 2.0).round()).collect();
        let t = DataTable::new("d", vec![("y".into(), y), ("x".into(), x), ("i".into(), i)]).unwrap();
        let th = theta(&[("tau_u", 2.0)]);
        let model = LatentModel::new(&spec, &dataset(vec![t])).unwrap();
        let fit = model.laplace(&th).unwrap();
        let prior = model.prior_at(&th).unwrap();
        let hyp = model.family_hypers(&th).unwrap();
        let obj = |x: &[f64]| model.objective(&prior, x, &th, &hyp).unwrap();
        let m = fit.mode().to_vec();
        let h = 1e-4;
        let mut grad_max: f64 = 0.0;
        let hess = dense(&fit.posterior.density().precision);
        for a in 0..5 {
            let mut p = m.clone();
            p[a] += h;
            let mut q = m.clone();
            q[a] -= h;
            grad_max = grad_max.max(((obj(&p) - obj(&q)) / (2.0 * h)).abs());
            for b in 0..5 {
                let e = |da: f64, db: f64| {
                    let mut v = m.clone();
                    v[a] += da;
                    v[b] += db;
                    obj(&v)
                };
                let fd = -(e(h, h) - e(h, -h) - e(-h, h) + e(-h, -h)) / (4.0 * h * h);
                let scale = hess[(a, a)].max(hess[(b, b)]);
                assert!((fd - hess[(a, b)]).abs() < 1e-4 * scale, "({a},{b}): {fd} vs {}", hess[(a, b)]);
            }
        }
        assert!(grad_max < 1e-6, "{grad_max}");
    }

    #[test]
    fn likelihood_is_additive_over_rows() {
        let spec = parse_model_config(LINEAR).unwrap();
        let t = linear_data(10, 7);
        let th = theta(&[("tau_u", 1.0), ("tau_y", 2.0)]);
        let x: Vec<f64> = (0..7).map(|i| 0.1 * i as f64 - 0.2).collect();
        let whole = LatentModel::new(&spec, &dataset(vec![t.clone()])).unwrap().loglik(&x, &th).unwrap();
        let a: Vec<usize> = (0..4).collect();
        let b: Vec<usize> = (4..10).collect();
        let la = LatentModel::new(&spec, &dataset(vec![t.select_rows(&a)])).unwrap().loglik(&x, &th).unwrap();
        let lb = LatentModel::new(&spec, &dataset(vec![t.select_rows(&b)])).unwrap().loglik(&x, &th).unwrap();
        assert!((whole - la - lb).abs() < 1e-12);
    }

    #[test]
    fn gamma_zero_response_is_rejected() {
        let text = POISSON_ONE.replace("\"poisson\"", "\"gamma\"").replace("link = \"log\"", "link = \"log\"\nhyper = \"shape\"")
            + "\n[hyper_priors.shape]\ndist = \"fixed\"\nvalue = 2.0\n";
        let spec = parse_model_config(&text).unwrap();
        let data = dataset(vec![DataTable::new("d", vec![("y".into(), vec![1.0, 0.0])]).unwrap()]);
        assert!(matches!(LatentModel::new(&spec, &data), Err(Error::Domain(_))));
    }
}
