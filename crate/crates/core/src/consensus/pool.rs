//! Pooling Gaussian posteriors of the same latent nodes fitted on different data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmrf::{Cholesky, GaussianDensity, GaussianMarginal, NodeMarginal, SparsePrecision};
use crate::scalar::Real;

/// Expert weights of the pooled models, one per model in input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertWeights<T: Real> {
    weights: Vec<T>,
}

impl<T: Real> ExpertWeights<T> {
    pub fn new(weights: Vec<T>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidGaussian("expert weights are empty".into()));
        }
        if weights.iter().any(|w| !(*w > T::zero()) || !w.is_finite()) {
            return Err(Error::InvalidGaussian("expert weights must be positive".into()));
        }
        let sum: T = weights.iter().copied().sum();
        let tol = T::of(1e-12).max(T::of(4.0 * weights.len() as f64) * T::epsilon());
        if (sum - T::one()).abs() > tol {
            return Err(Error::InvalidGaussian(format!("expert weights sum to {sum}, not 1")));
        }
        Ok(ExpertWeights { weights })
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }
}

/// Weighted average of independent Gaussian estimates of one node.
///
/// Without expert weights the weights are `τ_j/Στ` and the result is the product of the densities.
/// With expert weights `w_e`, each weight becomes `w_e·τ_j/Στ` renormalized, and the precision
/// is that of the weighted sum, `(Σ w_j²/τ_j)⁻¹`.
pub fn combine_marginals<T: Real>(marginals: &[GaussianMarginal<T>], expert: Option<&ExpertWeights<T>>) -> Result<GaussianMarginal<T>> {
    if marginals.is_empty() {
        return Err(Error::InvalidGaussian("no marginals to combine".into()));
    }
    for m in marginals {
        GaussianMarginal::new(m.mean, m.precision)?;
    }
    let total: T = marginals.iter().map(|m| m.precision).sum();
    match expert {
        None => {
            let mean = marginals.iter().map(|m| m.precision * m.mean).sum::<T>() / total;
            Ok(GaussianMarginal { mean, precision: total })
        }
        Some(e) => {
            if e.weights.len() != marginals.len() {
                return Err(Error::Dimension(format!("{} expert weights for {} marginals", e.weights.len(), marginals.len())));
            }
            let raw: Vec<T> = marginals.iter().zip(&e.weights).map(|(m, &w)| w * m.precision / total).collect();
            let norm: T = raw.iter().copied().sum();
            let mut mean = T::zero();
            let mut var = T::zero();
            for (m, r) in marginals.iter().zip(&raw) {
                let w = *r / norm;
                mean = mean + w * m.mean;
                var = var + w * w / m.precision;
            }
            Ok(GaussianMarginal { mean, precision: var.recip() })
        }
    }
}

/// Node-by-node [`combine_marginals`] over fields given as one vector per model.
pub fn combine_marginal_fields<T: Real>(fields: &[Vec<GaussianMarginal<T>>], expert: Option<&ExpertWeights<T>>) -> Result<Vec<GaussianMarginal<T>>> {
    let Some(first) = fields.first() else {
        return Err(Error::InvalidGaussian("no fields to combine".into()));
    };
    if fields.iter().any(|f| f.len() != first.len()) {
        return Err(Error::Dimension("fields have different numbers of nodes".into()));
    }
    (0..first.len())
        .map(|i| {
            let node: Vec<GaussianMarginal<T>> = fields.iter().map(|f| f[i]).collect();
            combine_marginals(&node, expert)
        })
        .collect()
}

/// Product of Gaussian densities over the same nodes: `Q = Σ Q_j`, `μ = Q⁻¹ Σ Q_j μ_j`.
///
/// With `correct_prior`, the latent prior `N(μ₀, Q₀)` that entered each of the `n` fits is
/// counted once instead of `n` times: `(n−1)Q₀` and `(n−1)Q₀μ₀` are subtracted.
pub fn combine_multivariate<T: Real>(
    densities: &[GaussianDensity<T>],
    prior: Option<&GaussianDensity<T>>,
    correct_prior: bool,
) -> Result<GaussianDensity<T>> {
    let Some(first) = densities.first() else {
        return Err(Error::InvalidGaussian("no densities to combine".into()));
    };
    let n = first.dim();
    for d in densities {
        if d.dim() != n {
            return Err(Error::Dimension(format!("densities of dimension {} and {}", n, d.dim())));
        }
        if d.node_labels != first.node_labels {
            return Err(Error::Dimension("densities are labelled differently".into()));
        }
    }
    let mut q = first.precision.clone();
    let mut b = first.precision.mul_vec(&first.mean);
    for d in &densities[1..] {
        q = q.add(&d.precision)?;
        for (bi, v) in b.iter_mut().zip(d.precision.mul_vec(&d.mean)) {
            *bi = *bi + v;
        }
    }
    let corrected = correct_prior && densities.len() > 1;
    if corrected {
        let p = prior.ok_or_else(|| Error::InvalidGaussian("prior correction requested without a prior".into()))?;
        if p.dim() != n {
            return Err(Error::Dimension(format!("prior of dimension {} for densities of dimension {n}", p.dim())));
        }
        let k = T::of((densities.len() - 1) as f64);
        q = q.add(&p.precision.scaled(-k))?;
        for (bi, v) in b.iter_mut().zip(p.precision.mul_vec(&p.mean)) {
            *bi = *bi - k * v;
        }
    }
    let chol = match Cholesky::new(&q) {
        Ok(c) => c,
        Err(Error::NotPositiveDefinite { .. }) if corrected => {
            return Err(Error::PriorDominance { min_eigenvalue: smallest_eigenvalue(&q).to_f64_lossy() });
        }
        Err(e) => return Err(e),
    };
    let mean = chol.solve(&b);
    let out = GaussianDensity::new(mean, q, first.node_labels.clone())?;
    let shared = densities.iter().all(|d| d.constraints == first.constraints);
    out.with_constraints(if shared { first.constraints.clone() } else { None })
}

/// Estimate of the smallest eigenvalue of a symmetric matrix by power iteration on `σI − Q`,
/// with `σ` a Gershgorin bound on the spectrum.
fn smallest_eigenvalue<T: Real>(q: &SparsePrecision<T>) -> T {
    let n = q.dim();
    let sigma = (0..n).map(|i| q.row(i).map(|(_, v)| v.abs()).sum::<T>()).fold(T::zero(), T::max);
    let mut v: Vec<T> = (0..n).map(|i| T::one() + T::of(((i * 7919) % 97) as f64 / 97.0)).collect();
    let mut lambda = T::zero();
    for _ in 0..2000 {
        let qv = q.mul_vec(&v);
        let w: Vec<T> = v.iter().zip(&qv).map(|(a, b)| sigma * *a - *b).collect();
        let norm = w.iter().map(|x| *x * *x).sum::<T>().sqrt();
        if norm == T::zero() {
            break;
        }
        let next: Vec<T> = w.iter().map(|x| *x / norm).collect();
        let rayleigh = next.iter().zip(q.mul_vec(&next)).map(|(a, b)| *a * b).sum::<T>();
        let done = (rayleigh - lambda).abs() <= T::of(1e-10) * sigma.max(T::one());
        lambda = rayleigh;
        v = next;
        if done {
            break;
        }
    }
    lambda
}

/// Per-node marginals of a density: mean, `Q_ii`, and `1/(Q⁻¹)_ii`.
pub fn marginals_from_multivariate<T: Real>(density: &GaussianDensity<T>) -> Result<Vec<NodeMarginal<T>>> {
    let f = density.factor()?;
    let mean = f.constrained_mean();
    let var = f.marginal_variances();
    let diag = density.precision.diagonal();
    Ok((0..density.dim())
        .map(|i| NodeMarginal { mean: mean[i], precision_diag: diag[i], precision_exact: var[i].recip() })
        .collect())
}
