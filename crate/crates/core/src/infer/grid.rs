//! Hyperparameter posterior on a tensor grid.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::latent::{LaplaceFit, LatentModel, LatentKind};

pub const MAX_HYPER_DIM: usize = 5;
const SEARCH_PATIENCE: usize = 200;
const SEARCH_MAX_EVALS: usize = 3000;
const SEARCH_BOUND: f64 = 25.0;
const HESSIAN_STEP: f64 = 0.05;

/// Log-density of θ (internal scale) on an axis-aligned tensor grid.
///
/// `points` enumerates the axes in row-major order, the last name varying fastest.
/// `Σ weights·exp(log_density) = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperGridPosterior {
    pub names: Vec<String>,
    pub axes: Vec<Vec<f64>>,
    pub points: Vec<Vec<f64>>,
    pub log_density: Vec<f64>,
    pub weights: Vec<f64>,
    pub mode: Vec<f64>,
    /// Approximate posterior sd per axis, used for tails outside the grid.
    pub sd: Vec<f64>,
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn spacing(axis: &[f64]) -> f64 {
    if axis.len() < 2 {
        1.0
    } else {
        (axis[axis.len() - 1] - axis[0]) / (axis.len() - 1) as f64
    }
}

/// Interpolation weights along one axis, with their first and second derivatives.
struct Stencil {
    dim: usize,
    first: usize,
    w: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
}

impl Stencil {
    fn at(axis: &[f64], t: f64) -> Self {
        let m = axis.len();
        let h = spacing(axis);
        let u = if m == 1 { 0.0 } else { (t - axis[0]) / h };
        match m {
            1 => Stencil { dim: 0, first: 0, w: vec![1.0], d1: vec![0.0], d2: vec![0.0] },
            2 => Stencil { dim: 0, first: 0, w: vec![1.0 - u, u], d1: vec![-1.0 / h, 1.0 / h], d2: vec![0.0, 0.0] },
            _ => {
                let first = (u.round() as isize - 1).clamp(0, m as isize - 3) as usize;
                let x = u - first as f64;
                // Lagrange basis on three consecutive nodes
                Stencil {
                    dim: 0,
                    first,
                    w: vec![0.5 * (x - 1.0) * (x - 2.0), -x * (x - 2.0), 0.5 * x * (x - 1.0)],
                    d1: vec![(x - 1.5) / h, (2.0 - 2.0 * x) / h, (x - 0.5) / h],
                    d2: vec![1.0 / (h * h), -2.0 / (h * h), 1.0 / (h * h)],
                }
            }
        }
    }
}

fn tensor_points(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut pts = vec![vec![]];
    for axis in axes {
        pts = pts.into_iter().flat_map(|p| axis.iter().map(move |v| [p.clone(), vec![*v]].concat())).collect();
    }
    pts
}

impl HyperGridPosterior {
    /// Builds a grid from unnormalized log values at the tensor points of `axes`.
    pub fn from_tensor(names: Vec<String>, axes: Vec<Vec<f64>>, unnormalized: Vec<f64>, mode: Vec<f64>, sd: Vec<f64>) -> Result<Self> {
        let points = tensor_points(&axes);
        if points.len() != unnormalized.len() {
            return Err(Error::Dimension(format!("{} grid values for {} points", unnormalized.len(), points.len())));
        }
        let w: f64 = axes.iter().map(|a| spacing(a)).product();
        let weights = vec![w; points.len()];
        let mut g = HyperGridPosterior { names, axes, points, log_density: unnormalized, weights, mode, sd };
        g.normalize()?;
        Ok(g)
    }

    /// The grid for a model without free hyperparameters.
    pub fn point_mass() -> Self {
        HyperGridPosterior {
            names: vec![],
            axes: vec![],
            points: vec![vec![]],
            log_density: vec![0.0],
            weights: vec![1.0],
            mode: vec![],
            sd: vec![],
        }
    }

    fn normalize(&mut self) -> Result<()> {
        let z = log_sum_exp(self.log_density.iter().zip(&self.weights).map(|(l, w)| l + w.ln()));
        if !z.is_finite() {
            return Err(Error::HyperSearch("grid log-density cannot be normalized".into()));
        }
        self.log_density.iter_mut().for_each(|l| *l -= z);
        if self.log_density.iter().any(|l| !l.is_finite()) {
            return Err(Error::HyperSearch("grid log-density is not finite at every point".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Probability mass of each point.
    pub fn masses(&self) -> Vec<f64> {
        self.log_density.iter().zip(&self.weights).map(|(l, w)| w * l.exp()).collect()
    }

    /// `Σ weights·exp(log_density)`.
    pub fn total_mass(&self) -> f64 {
        self.masses().iter().sum()
    }

    /// Posterior mean of `f(θ)`.
    pub fn expectation(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.masses().iter().zip(&self.points).map(|(m, p)| m * f(p)).sum()
    }

    /// Index of the point with the largest log-density.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, l) in self.log_density.iter().enumerate() {
            if *l > self.log_density[best] {
                best = k;
            }
        }
        best
    }

    fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.dim()];
        for d in (0..self.dim().saturating_sub(1)).rev() {
            s[d] = s[d + 1] * self.axes[d + 1].len();
        }
        s
    }

    /// Marginal on `keep` (a subset of the names, in the given order).
    pub fn marginalize(&self, keep: &[String]) -> Result<Self> {
        let idx: Vec<usize> = keep
            .iter()
            .map(|n| self.index_of(n).ok_or_else(|| Error::InvalidHyper(format!("grid has no axis `{n}`"))))
            .collect::<Result<_>>()?;
        let axes: Vec<Vec<f64>> = idx.iter().map(|&d| self.axes[d].clone()).collect();
        let sizes: Vec<usize> = axes.iter().map(|a| a.len()).collect();
        let total: usize = sizes.iter().product();
        let mut mass = vec![0.0; total];
        let strides = self.strides();
        for (k, m) in self.masses().into_iter().enumerate() {
            let mut flat = 0;
            for (&d, &size) in idx.iter().zip(&sizes) {
                flat = flat * size + (k / strides[d]) % self.axes[d].len();
            }
            mass[flat] += m;
        }
        let w: f64 = axes.iter().map(|a| spacing(a)).product();
        // points whose mass underflowed keep a tiny finite density
        let log: Vec<f64> = mass.iter().map(|m| (m / w).max(f64::MIN_POSITIVE).ln()).collect();
        let mode = idx.iter().map(|&d| self.mode[d]).collect();
        let sd = idx.iter().map(|&d| self.sd[d]).collect();
        Self::from_tensor(keep.to_vec(), axes, log, mode, sd)
    }

    /// Independent product of two grids over disjoint names.
    pub fn product(&self, other: &Self) -> Result<Self> {
        if let Some(n) = other.names.iter().find(|n| self.index_of(n).is_some()) {
            return Err(Error::InvalidHyper(format!("axis `{n}` appears in both grids")));
        }
        let mut log = Vec::with_capacity(self.len() * other.len());
        for a in &self.log_density {
            for b in &other.log_density {
                log.push(a + b);
            }
        }
        Self::from_tensor(
            [self.names.clone(), other.names.clone()].concat(),
            [self.axes.clone(), other.axes.clone()].concat(),
            log,
            [self.mode.clone(), other.mode.clone()].concat(),
            [self.sd.clone(), other.sd.clone()].concat(),
        )
    }

    /// Log-density at `theta` (ordered as `names`) by piecewise-quadratic tensor interpolation.
    /// Outside the grid the edge quadratic is continued with a slope that never rises away
    /// from the grid; a non-concave edge falls back to curvature `-1/sd²`.
    pub fn log_density_at(&self, theta: &[f64]) -> f64 {
        let d = self.dim();
        if d == 0 {
            return self.log_density[0];
        }
        let mut stencils: Vec<Stencil> = Vec::with_capacity(d);
        let mut outside = Vec::new();
        for k in 0..d {
            let axis = &self.axes[k];
            let m = axis.len();
            let (lo, hi) = (axis[0], axis[m - 1]);
            let t = theta[k].clamp(lo, hi);
            if theta[k] != t {
                outside.push((k, theta[k] - t));
            }
            stencils.push(Stencil { dim: k, ..Stencil::at(axis, t) });
        }
        let base = self.tensor_sum(&stencils, |s| &s.w);
        let mut extra = 0.0;
        for (k, e) in outside {
            let d1 = self.tensor_sum(&stencils, |s| if s.dim == k { &s.d1 } else { &s.w });
            let d2 = self.tensor_sum(&stencils, |s| if s.dim == k { &s.d2 } else { &s.w });
            let slope = (d1 * e).min(0.0);
            let curv = if d2 < 0.0 { d2 } else { -1.0 / (self.sd[k] * self.sd[k]) };
            extra += slope + 0.5 * curv * e * e;
        }
        base + extra
    }

    fn tensor_sum<'a>(&self, stencils: &'a [Stencil], pick: impl Fn(&'a Stencil) -> &'a Vec<f64>) -> f64 {
        let d = stencils.len();
        let strides = self.strides();
        let weights: Vec<&Vec<f64>> = stencils.iter().map(|s| pick(s)).collect();
        let mut total = 0.0;
        let mut counter = vec![0usize; d];
        loop {
            let mut w = 1.0;
            let mut flat = 0;
            for k in 0..d {
                w *= weights[k][counter[k]];
                flat += (stencils[k].first + counter[k]) * strides[k];
            }
            total += w * self.log_density[flat];
            let mut k = d;
            loop {
                if k == 0 {
                    return total;
                }
                k -= 1;
                counter[k] += 1;
                if counter[k] < weights[k].len() {
                    break;
                }
                counter[k] = 0;
            }
        }
    }

    /// Marginal density of one axis as `(value, density)` pairs.
    pub fn marginal(&self, name: &str) -> Result<Vec<(f64, f64)>> {
        let m = self.marginalize(&[name.to_string()])?;
        Ok(m.axes[0].iter().zip(&m.log_density).map(|(v, l)| (*v, l.exp())).collect())
    }
}

/// Prior for the hyperparameters of a model.
#[derive(Debug, Clone, PartialEq)]
pub enum HyperPriorSource {
    /// The priors declared in the spec.
    Parametric,
    /// A previous posterior; names it lacks use the spec's priors, names the model lacks are integrated out.
    Sequential(HyperGridPosterior),
}

/// How the grid is obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum GridPlan {
    /// Search for the mode and lay a new grid around it.
    Explore,
    /// Reuse the points of a grid and re-derive the log-density from the current data and prior.
    FixedSupport(HyperGridPosterior),
    /// Reuse points and log-density unchanged.
    Frozen(HyperGridPosterior),
}

/// Laplace summaries kept from one grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSummary {
    pub log_marginal_likelihood: f64,
    /// `(mean, variance)` of each fixed effect, in the model's fixed-effect order.
    pub fixed: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct GridExploration {
    pub posterior: HyperGridPosterior,
    /// Per grid point; `None` for points skipped as negligible.
    pub summaries: Vec<Option<PointSummary>>,
    /// `log ∫ π(y|θ)π(θ)dθ` by the grid rule.
    pub log_marginal_likelihood: f64,
    pub evaluations: usize,
}

/// Log prior of θ assembled from a previous grid and the spec's priors.
struct PriorEval<'a> {
    model: &'a LatentModel,
    grid: Option<(HyperGridPosterior, Vec<usize>)>,
    parametric: Vec<usize>,
}

impl<'a> PriorEval<'a> {
    fn new(model: &'a LatentModel, source: &HyperPriorSource) -> Result<Self> {
        let space = &model.space;
        match source {
            HyperPriorSource::Parametric => Ok(PriorEval { model, grid: None, parametric: (0..space.dim()).collect() }),
            HyperPriorSource::Sequential(g) => {
                let common: Vec<String> = g.names.iter().filter(|n| space.index_of(n).is_some()).cloned().collect();
                let parametric = (0..space.dim()).filter(|&d| !common.contains(&space.names[d])).collect();
                if common.is_empty() {
                    return Ok(PriorEval { model, grid: None, parametric });
                }
                let sub = if common.len() == g.dim() { g.clone() } else { g.marginalize(&common)? };
                let map = sub.names.iter().map(|n| space.index_of(n).unwrap()).collect();
                Ok(PriorEval { model, grid: Some((sub, map)), parametric })
            }
        }
    }

    fn log_prior(&self, theta: &[f64]) -> f64 {
        let space = &self.model.space;
        let mut lp: f64 = self.parametric.iter().map(|&d| space.priors[d].log_density(theta[d])).sum();
        if let Some((g, map)) = &self.grid {
            let sub: Vec<f64> = map.iter().map(|&d| theta[d]).collect();
            lp += g.log_density_at(&sub);
        }
        lp
    }

    fn start(&self) -> Vec<f64> {
        let mut t = self.model.space.initial();
        if let Some((g, map)) = &self.grid {
            for (k, &d) in map.iter().enumerate() {
                t[d] = g.mode[k];
            }
        }
        t
    }
}

fn fixed_indices(model: &LatentModel) -> Vec<usize> {
    model.blocks.iter().filter(|b| matches!(b.kind, LatentKind::Fixed(_))).map(|b| b.offset).collect()
}

pub(crate) fn summarize(fit: &LaplaceFit, fixed: &[usize]) -> PointSummary {
    PointSummary {
        log_marginal_likelihood: fit.log_marginal_likelihood,
        fixed: fixed.iter().map(|&i| (fit.mode()[i], fit.posterior.variance_of(i))).collect(),
    }
}

/// Default number of grid points per axis.
pub fn default_points(dim: usize) -> usize {
    if dim <= 3 {
        7
    } else {
        5
    }
}

struct Search<'a> {
    model: &'a LatentModel,
    prior: &'a PriorEval<'a>,
    evaluations: usize,
}

impl Search<'_> {
    fn eval(&mut self, theta: &[f64]) -> f64 {
        self.evaluations += 1;
        if theta.iter().any(|v| v.abs() > SEARCH_BOUND) {
            return f64::NEG_INFINITY;
        }
        let nat = self.model.space.natural(theta);
        match self.model.laplace(&nat) {
            Ok(fit) => fit.log_marginal_likelihood + self.prior.log_prior(theta),
            Err(_) => f64::NEG_INFINITY,
        }
    }

    /// Coordinate search with parabolic steps.
    fn mode(&mut self, start: Vec<f64>) -> Result<(Vec<f64>, f64)> {
        let d = start.len();
        let mut theta = start;
        let mut best = self.eval(&theta);
        if !best.is_finite() {
            return Err(Error::HyperSearch("posterior is not finite at the starting point".into()));
        }
        let mut step = vec![0.5; d];
        let mut since_improvement = 0;
        loop {
            let cycle_start = best;
            for k in 0..d {
                let h = step[k];
                let probe = |s: f64, this: &mut Self| {
                    let mut t = theta.clone();
                    t[k] += s;
                    (this.eval(&t), s)
                };
                let (fp, _) = probe(h, self);
                let (fm, _) = probe(-h, self);
                let mut cands = vec![(fp, h), (fm, -h)];
                let curv = fp - 2.0 * best + fm;
                if curv < 0.0 && fp.is_finite() && fm.is_finite() {
                    let s = (h * (fm - fp) / (2.0 * curv)).clamp(-4.0 * h, 4.0 * h);
                    if s.abs() > 1e-12 && (s - h).abs() > 1e-12 && (s + h).abs() > 1e-12 {
                        cands.push(probe(s, self));
                    }
                }
                let (fbest, sbest) = cands.into_iter().fold((f64::NEG_INFINITY, 0.0), |a, c| if c.0 > a.0 { c } else { a });
                if fbest > best + 1e-10 {
                    theta[k] += sbest;
                    best = fbest;
                    since_improvement = 0;
                    step[k] = if sbest.abs() >= h { (2.0 * h).min(2.0) } else { sbest.abs().max(0.5 * h) };
                } else {
                    since_improvement += 3;
                    step[k] = 0.5 * h;
                }
                if since_improvement >= SEARCH_PATIENCE {
                    return Err(Error::HyperSearch(format!("mode search did not improve for {SEARCH_PATIENCE} evaluations")));
                }
                if self.evaluations > SEARCH_MAX_EVALS {
                    return Err(Error::HyperSearch(format!("mode search exceeded {SEARCH_MAX_EVALS} evaluations")));
                }
            }
            if best - cycle_start < 1e-6 && step.iter().all(|s| *s < 0.02) {
                return Ok((theta, best));
            }
        }
    }

    /// Marginal sds from a finite-difference Hessian at the mode.
    fn sds(&mut self, mode: &[f64], fmode: f64) -> Vec<f64> {
        let d = mode.len();
        let h = HESSIAN_STEP;
        let mut offsets: Vec<Vec<f64>> = Vec::new();
        for a in 0..d {
            for s in [h, -h] {
                let mut t = vec![0.0; d];
                t[a] = s;
                offsets.push(t);
            }
            for b in 0..a {
                for (sa, sb) in [(h, h), (h, -h), (-h, h), (-h, -h)] {
                    let mut t = vec![0.0; d];
                    t[a] = sa;
                    t[b] = sb;
                    offsets.push(t);
                }
            }
        }
        let model = self.model;
        let prior = self.prior;
        let vals: Vec<f64> = offsets
            .par_iter()
            .map(|o| {
                let t: Vec<f64> = mode.iter().zip(o).map(|(a, b)| a + b).collect();
                let nat = model.space.natural(&t);
                model.laplace(&nat).map_or(f64::NEG_INFINITY, |f| f.log_marginal_likelihood + prior.log_prior(&t))
            })
            .collect();
        self.evaluations += vals.len();
        let mut hess = vec![vec![0.0; d]; d];
        let mut it = vals.into_iter();
        for a in 0..d {
            let (fp, fm) = (it.next().unwrap(), it.next().unwrap());
            hess[a][a] = (fp - 2.0 * fmode + fm) / (h * h);
            for b in 0..a {
                let v: Vec<f64> = (0..4).map(|_| it.next().unwrap()).collect();
                let x = (v[0] - v[1] - v[2] + v[3]) / (4.0 * h * h);
                hess[a][b] = x;
                hess[b][a] = x;
            }
        }
        let neg: Vec<Vec<f64>> = hess.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
        let finite = neg.iter().flatten().all(|v| v.is_finite());
        let cov = if finite { crate::gmrf::dense::DenseCholesky::new(&neg).ok().map(|c| c.inverse()) } else { None };
        (0..d)
            .map(|a| {
                let var = match &cov {
                    Some(c) => c[a][a],
                    None if neg[a][a].is_finite() && neg[a][a] > 0.0 => 1.0 / neg[a][a],
                    None => 1.0,
                };
                var.sqrt().clamp(1e-3, 5.0)
            })
            .collect()
    }
}

/// Evaluates the Laplace approximation at every point; the values are `log π(y|θ)` and summaries.
fn evaluate_points(model: &LatentModel, points: &[Vec<f64>], active: &[bool]) -> Result<Vec<Option<PointSummary>>> {
    let fixed = fixed_indices(model);
    points
        .par_iter()
        .zip(active)
        .map(|(p, &on)| {
            if !on {
                return Ok(None);
            }
            let fit = model.laplace(&model.space.natural(p))?;
            Ok(Some(summarize(&fit, &fixed)))
        })
        .collect()
}

/// Aligns a supplied grid to the model's hyperparameter order.
fn align(model: &LatentModel, g: &HyperGridPosterior) -> Result<HyperGridPosterior> {
    let names = &model.space.names;
    if g.dim() != names.len() || names.iter().any(|n| g.index_of(n).is_none()) {
        return Err(Error::InvalidHyper(format!("grid axes {:?} do not match the model's hyperparameters {:?}", g.names, names)));
    }
    if g.names == *names {
        return Ok(g.clone());
    }
    g.marginalize(names)
}

/// Explores `π(θ | y)` on a grid following `plan`.
pub fn explore_hyper_grid(
    model: &LatentModel,
    hyper_prior: &HyperPriorSource,
    plan: &GridPlan,
    points_per_dim: Option<usize>,
) -> Result<GridExploration> {
    let d = model.space.dim();
    if d > MAX_HYPER_DIM {
        return Err(Error::InvalidHyper(format!("{d} free hyperparameters; at most {MAX_HYPER_DIM} are supported")));
    }
    let prior = PriorEval::new(model, hyper_prior)?;
    match plan {
        GridPlan::Explore => {
            if d == 0 {
                let s = evaluate_points(model, &[vec![]], &[true])?;
                let lml = s[0].as_ref().unwrap().log_marginal_likelihood;
                return Ok(GridExploration { posterior: HyperGridPosterior::point_mass(), summaries: s, log_marginal_likelihood: lml, evaluations: 1 });
            }
            let m = points_per_dim.unwrap_or_else(|| default_points(d));
            if !(3..=9).contains(&m) {
                return Err(Error::InvalidHyper(format!("grid needs 3 to 9 points per axis, got {m}")));
            }
            let mut search = Search { model, prior: &prior, evaluations: 0 };
            let (mode, fmode) = search.mode(prior.start())?;
            let sd = search.sds(&mode, fmode);
            let axes: Vec<Vec<f64>> = (0..d)
                .map(|k| (0..m).map(|i| mode[k] + sd[k] * (-3.0 + 6.0 * i as f64 / (m - 1) as f64)).collect())
                .collect();
            let points = tensor_points(&axes);
            let summaries = evaluate_points(model, &points, &vec![true; points.len()])?;
            let log: Vec<f64> = summaries.iter().zip(&points).map(|(s, p)| s.as_ref().unwrap().log_marginal_likelihood + prior.log_prior(p)).collect();
            let posterior = HyperGridPosterior::from_tensor(model.space.names.clone(), axes, log.clone(), mode, sd)?;
            let lml = log_sum_exp(log.iter().zip(&posterior.weights).map(|(l, w)| l + w.ln()));
            Ok(GridExploration { posterior, summaries, log_marginal_likelihood: lml, evaluations: search.evaluations + points.len() })
        }
        GridPlan::FixedSupport(g) => {
            let g = align(model, g)?;
            let summaries = evaluate_points(model, &g.points, &vec![true; g.len()])?;
            let log: Vec<f64> = summaries.iter().zip(&g.points).map(|(s, p)| s.as_ref().unwrap().log_marginal_likelihood + prior.log_prior(p)).collect();
            let lml = log_sum_exp(log.iter().zip(&g.weights).map(|(l, w)| l + w.ln()));
            let mut posterior = HyperGridPosterior { log_density: log, ..g.clone() };
            posterior.normalize()?;
            let best = posterior.argmax();
            posterior.mode = posterior.points[best].clone();
            Ok(GridExploration { posterior, summaries, log_marginal_likelihood: lml, evaluations: g.len() })
        }
        GridPlan::Frozen(g) => {
            let g = align(model, g)?;
            let masses = g.masses();
            let top = masses.iter().cloned().fold(0.0, f64::max);
            let active: Vec<bool> = masses.iter().map(|m| *m >= NEGLIGIBLE * top).collect();
            let summaries = evaluate_points(model, &g.points, &active)?;
            let lml = log_sum_exp(
                summaries.iter().zip(&masses).filter_map(|(s, m)| s.as_ref().map(|s| s.log_marginal_likelihood + m.ln())),
            );
            let evaluations = active.iter().filter(|a| **a).count();
            Ok(GridExploration { posterior: g, summaries, log_marginal_likelihood: lml, evaluations })
        }
    }
}

/// Points whose mass is below this fraction of the largest are left out of mixtures.
pub const NEGLIGIBLE: f64 = 1e-6;

/// Natural-scale value of each free hyperparameter at the grid mode.
pub fn mode_natural(model: &LatentModel, g: &HyperGridPosterior) -> BTreeMap<String, f64> {
    let mut theta = vec![0.0; model.space.dim()];
    for (k, n) in g.names.iter().enumerate() {
        if let Some(d) = model.space.index_of(n) {
            theta[d] = g.mode[k];
        }
    }
    model.space.natural(&theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{parse_model_config, DataTable, Dataset};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    const KNOWN_MEAN: &str = r#"
[fixed.b0]
mean = 0.0
precision = 1e8

[hyper_priors.tau_y]
dist = "PRIOR"

[[blocks]]
name = "obs"
family = "gaussian"
link = "identity"
data = "d"
response = "y"
hyper = "tau_y"
predictor = [{ intercept = "b0" }]
"#;

    fn model(prior: &str, y: Vec<f64>) -> LatentModel {
        let spec = parse_model_config(&KNOWN_MEAN.replace("dist = \"PRIOR\"", prior)).unwrap();
        let data: Dataset = [("d".to_string(), DataTable::new("d", vec![("y".into(), y)]).unwrap())].into();
        LatentModel::new(&spec, &data).unwrap()
    }

    fn draws(n: usize, sd: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, sd).unwrap();
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    #[test]
    fn precision_posterior_mean_matches_quadrature() {
        let y = draws(100, 0.5, 1);
        let (a, b) = (1.0, 0.01);
        let m = model(&format!("dist = \"loggamma\"\nshape = {a}\nrate = {b}"), y.clone());
        let g = explore_hyper_grid(&m, &HyperPriorSource::Parametric, &GridPlan::Explore, None).unwrap();
        assert!((g.posterior.total_mass() - 1.0).abs() < 1e-6);
        let est = g.posterior.expectation(|t| t[0].exp());
        // log posterior of θ = log τ with the mean known to be zero
        let ss: f64 = y.iter().map(|v| v * v).sum();
        let n = y.len() as f64;
        let logp = |t: f64| (a + 0.5 * n) * t - (b + 0.5 * ss) * t.exp();
        let (lo, hi, k) = (-5.0, 5.0, 200_000);
        let h = (hi - lo) / k as f64;
        let grid: Vec<f64> = (0..=k).map(|i| lo + i as f64 * h).collect();
        let mx = grid.iter().map(|t| logp(*t)).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = grid.iter().map(|t| (logp(*t) - mx).exp()).sum();
        let oracle: f64 = grid.iter().map(|t| (logp(*t) - mx).exp() * t.exp()).sum::<f64>() / z;
        assert!((est / oracle - 1.0).abs() < 0.02, "{est} vs {oracle}");
    }

    #[test]
    fn sequential_halves_match_full_data() {
        let y = draws(120, 0.8, 2);
        let flat = "dist = \"flat\"";
        let first = model(flat, y[..60].to_vec());
        let second = model(flat, y[60..].to_vec());
        let full = model(flat, y.clone());
        let g1 = explore_hyper_grid(&first, &HyperPriorSource::Parametric, &GridPlan::Explore, None).unwrap();
        let g2 = explore_hyper_grid(&second, &HyperPriorSource::Sequential(g1.posterior), &GridPlan::Explore, None).unwrap();
        let gf = explore_hyper_grid(&full, &HyperPriorSource::Parametric, &GridPlan::FixedSupport(g2.posterior.clone()), None).unwrap();
        let (m2, mf) = (g2.posterior.masses(), gf.posterior.masses());
        let tv: f64 = 0.5 * m2.iter().zip(&mf).map(|(a, b)| (a - b).abs()).sum::<f64>();
        assert!(tv < 0.01, "{tv}");
        for i in 0..m2.len() {
            if mf[i] > 0.01 {
                let d = g2.posterior.log_density[i] - gf.posterior.log_density[i];
                assert!(d.abs() < 0.03, "{i}: {d}");
            }
        }
    }

    #[test]
    fn fixed_support_on_same_data_is_idempotent() {
        let m = model("dist = \"loggamma\"\nshape = 1.0\nrate = 0.1", draws(40, 1.3, 3));
        let g = explore_hyper_grid(&m, &HyperPriorSource::Parametric, &GridPlan::Explore, None).unwrap();
        let again = explore_hyper_grid(&m, &HyperPriorSource::Parametric, &GridPlan::FixedSupport(g.posterior.clone()), None).unwrap();
        assert_eq!(g.posterior, again.posterior);
        let frozen = explore_hyper_grid(&m, &HyperPriorSource::Parametric, &GridPlan::Frozen(g.posterior.clone()), None).unwrap();
        assert_eq!(g.posterior, frozen.posterior);
    }

    fn quadratic_grid() -> HyperGridPosterior {
        let axes = vec![vec![-1.0, 0.0, 1.0, 2.0, 3.0], vec![0.0, 0.5, 1.0, 1.5]];
        let f = |t: &[f64]| -0.5 * (t[0] - 1.0).powi(2) - 0.3 * (t[0] - 1.0) * (t[1] - 0.7) - 0.8 * (t[1] - 0.7).powi(2);
        let vals = tensor_points(&axes).iter().map(|p| f(p)).collect();
        HyperGridPosterior::from_tensor(vec!["a".into(), "b".into()], axes, vals, vec![1.0, 0.7], vec![1.0, 0.5]).unwrap()
    }

    #[test]
    fn interpolation_reproduces_quadratics() {
        let g = quadratic_grid();
        let shift = g.log_density[0] - (-0.5 * 4.0 - 0.3 * (-2.0) * (-0.7) - 0.8 * 0.49);
        for t in [[0.3f64, 0.2], [2.7, 1.41], [1.0, 0.7], [-0.9, 0.05]] {
            let exact = -0.5 * (t[0] - 1.0).powi(2) - 0.3 * (t[0] - 1.0) * (t[1] - 0.7) - 0.8 * (t[1] - 0.7).powi(2) + shift;
            assert!((g.log_density_at(&t) - exact).abs() < 1e-12);
        }
        // outside the grid a concave quadratic is continued exactly
        let exact = |t: [f64; 2]| -0.5 * (t[0] - 1.0).powi(2) - 0.3 * (t[0] - 1.0) * (t[1] - 0.7) - 0.8 * (t[1] - 0.7).powi(2) + shift;
        for t in [[3.8, 0.5], [-2.0, 1.0], [1.0, 2.2]] {
            assert!((g.log_density_at(&t) - exact(t)).abs() < 1e-10, "{t:?}");
        }
    }

    #[test]
    fn marginalize_and_product_preserve_mass() {
        let g = quadratic_grid();
        let a = g.marginalize(&["a".to_string()]).unwrap();
        let b = g.marginalize(&["b".to_string()]).unwrap();
        assert!((a.total_mass() - 1.0).abs() < 1e-12);
        let p = a.product(&b).unwrap();
        assert!((p.total_mass() - 1.0).abs() < 1e-12);
        assert_eq!(p.names, vec!["a", "b"]);
        assert!(a.product(&a).is_err());
        let swapped = g.marginalize(&["b".to_string(), "a".to_string()]).unwrap();
        assert!((swapped.log_density_at(&[0.9, 1.2]) - g.log_density_at(&[1.2, 0.9])).abs() < 1e-12);
    }

    #[test]
    fn too_many_hyperparameters() {
        let mut text = String::from("[fixed.b0]\n[hyper_priors.tau_y]\ndist = \"flat\"\n");
        let mut terms = vec!["{ intercept = \"b0\" }".to_string()];
        for k in 0..5 {
            text += &format!("[effects.e{k}]\nkind = \"iid\"\nn = 2\nhyper = [\"t{k}\"]\n[hyper_priors.t{k}]\ndist = \"flat\"\n");
            terms.push(format!("{{ effect = \"e{k}\", index = [\"i\"] }}"));
        }
        text += &format!(
            "[[blocks]]\nname = \"obs\"\nfamily = \"gaussian\"\nlink = \"identity\"\ndata = \"d\"\nresponse = \"y\"\nhyper = \"tau_y\"\npredictor = [{}]\n",
            terms.join(", ")
        );
        let spec = parse_model_config(&text).unwrap();
        let data: Dataset = [("d".to_string(), DataTable::new("d", vec![("y".into(), vec![1.0, 2.0]), ("i".into(), vec![0.0, 1.0])]).unwrap())].into();
        let m = LatentModel::new(&spec, &data).unwrap();
        assert!(matches!(explore_hyper_grid(&m, &HyperPriorSource::Parametric, &GridPlan::Explore, None), Err(Error::InvalidHyper(_))));
    }
}
