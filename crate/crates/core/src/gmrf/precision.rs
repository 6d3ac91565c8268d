//! Structured precision matrices for the supported latent effects.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::cholesky::Cholesky;
use super::density::Constraints;
use super::sparse::SparsePrecision;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Diagonal jitter added to intrinsic precisions before factorization.
pub const INTRINSIC_JITTER: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectKind {
    Iid,
    Rw1,
    Rw2,
    Ar1,
    LatticeMatern,
    Kronecker,
}

impl EffectKind {
    pub fn name(self) -> &'static str {
        match self {
            EffectKind::Iid => "iid",
            EffectKind::Rw1 => "rw1",
            EffectKind::Rw2 => "rw2",
            EffectKind::Ar1 => "ar1",
            EffectKind::LatticeMatern => "lattice_matern",
            EffectKind::Kronecker => "kronecker",
        }
    }

    /// Roles of the hyperparameters, in the order they are listed.
    pub fn hyper_roles(self) -> &'static [HyperRole] {
        match self {
            EffectKind::Iid | EffectKind::Rw1 | EffectKind::Rw2 => &[HyperRole::Precision],
            EffectKind::Ar1 => &[HyperRole::Precision, HyperRole::Correlation],
            EffectKind::LatticeMatern => &[HyperRole::LogRange, HyperRole::LogSd],
            EffectKind::Kronecker => &[],
        }
    }

    pub fn is_intrinsic(self) -> bool {
        matches!(self, EffectKind::Rw1 | EffectKind::Rw2)
    }
}

/// How a hyperparameter maps from its internal (unconstrained) value to the natural scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperRole {
    /// τ = exp(θ).
    Precision,
    /// ρ = tanh(θ / 2).
    Correlation,
    LogRange,
    LogSd,
    /// Scaling of a shared component.
    Scale,
}

impl HyperRole {
    pub fn to_natural(self, internal: f64) -> f64 {
        match self {
            HyperRole::Precision => internal.exp(),
            HyperRole::Correlation => (internal / 2.0).tanh(),
            HyperRole::LogRange | HyperRole::LogSd | HyperRole::Scale => internal,
        }
    }

    pub fn to_internal(self, natural: f64) -> f64 {
        match self {
            HyperRole::Precision => natural.ln(),
            HyperRole::Correlation => 2.0 * natural.atanh(),
            HyperRole::LogRange | HyperRole::LogSd | HyperRole::Scale => natural,
        }
    }
}

/// Declarative description of one structured effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectSpec {
    pub kind: EffectKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nx: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ny: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub hyper: Vec<String>,
    /// Sum-to-zero constraint. Intrinsic kinds are always constrained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constr: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Box<EffectSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Box<EffectSpec>>,
}

impl EffectSpec {
    fn bare(kind: EffectKind) -> Self {
        EffectSpec { kind, n: None, nx: None, ny: None, spacing: None, hyper: vec![], constr: None, a: None, b: None }
    }

    pub fn iid(n: usize, prec: &str) -> Self {
        EffectSpec { n: Some(n), hyper: vec![prec.into()], ..Self::bare(EffectKind::Iid) }
    }

    pub fn rw1(n: usize, prec: &str) -> Self {
        EffectSpec { n: Some(n), hyper: vec![prec.into()], ..Self::bare(EffectKind::Rw1) }
    }

    pub fn rw2(n: usize, prec: &str) -> Self {
        EffectSpec { n: Some(n), hyper: vec![prec.into()], ..Self::bare(EffectKind::Rw2) }
    }

    pub fn ar1(n: usize, prec: &str, rho: &str) -> Self {
        EffectSpec { n: Some(n), hyper: vec![prec.into(), rho.into()], ..Self::bare(EffectKind::Ar1) }
    }

    pub fn lattice_matern(nx: usize, ny: usize, spacing: f64, log_range: &str, log_sd: &str) -> Self {
        EffectSpec {
            nx: Some(nx),
            ny: Some(ny),
            spacing: Some(spacing),
            hyper: vec![log_range.into(), log_sd.into()],
            ..Self::bare(EffectKind::LatticeMatern)
        }
    }

    pub fn kronecker(a: EffectSpec, b: EffectSpec) -> Self {
        EffectSpec { a: Some(Box::new(a)), b: Some(Box::new(b)), ..Self::bare(EffectKind::Kronecker) }
    }

    /// Checks sizes, hyper counts and child structure.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidEffect(m));
        let kind = self.kind.name();
        if self.kind != EffectKind::Kronecker && (self.a.is_some() || self.b.is_some()) {
            return bad(format!("{kind} effect cannot have child effects"));
        }
        let roles = self.kind.hyper_roles();
        if self.hyper.len() != roles.len() {
            return bad(format!("{kind} effect needs {} hyperparameter name(s), got {}", roles.len(), self.hyper.len()));
        }
        match self.kind {
            EffectKind::Iid => match self.n {
                Some(n) if n >= 1 => {}
                _ => return bad("iid effect needs n >= 1".into()),
            },
            EffectKind::Rw1 | EffectKind::Rw2 | EffectKind::Ar1 => {
                let min = if self.kind == EffectKind::Rw2 { 3 } else { 2 };
                match self.n {
                    Some(n) if n >= min => {}
                    _ => return bad(format!("{kind} effect needs n >= {min}")),
                }
                if self.kind.is_intrinsic() && self.constr == Some(false) {
                    return bad(format!("{kind} effect is intrinsic and must keep its constraints"));
                }
            }
            EffectKind::LatticeMatern => {
                match (self.nx, self.ny) {
                    (Some(x), Some(y)) if x >= 2 && y >= 2 => {}
                    _ => return bad("lattice_matern grid dimension must be at least 2 in each direction".into()),
                }
                if !matches!(self.spacing, Some(h) if h > 0.0 && h.is_finite()) {
                    return bad("lattice_matern needs a positive spacing".into());
                }
            }
            EffectKind::Kronecker => {
                let (Some(a), Some(b)) = (&self.a, &self.b) else {
                    return bad("kronecker effect needs exactly two children `a` and `b`".into());
                };
                if a.kind == EffectKind::Kronecker || b.kind == EffectKind::Kronecker {
                    return bad("nested kronecker effects are not supported".into());
                }
                if a.kind.is_intrinsic() && b.kind.is_intrinsic() {
                    return bad("kronecker of two intrinsic effects is not supported".into());
                }
                a.validate()?;
                b.validate()?;
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            EffectKind::LatticeMatern => self.nx.unwrap_or(0) * self.ny.unwrap_or(0),
            EffectKind::Kronecker => {
                self.a.as_ref().map_or(0, |a| a.dim()) * self.b.as_ref().map_or(0, |b| b.dim())
            }
            _ => self.n.unwrap_or(0),
        }
    }

    /// All hyperparameter names with their roles, children included.
    pub fn hyper_bindings(&self) -> Vec<(String, HyperRole)> {
        match self.kind {
            EffectKind::Kronecker => {
                let mut out = self.a.as_ref().map(|a| a.hyper_bindings()).unwrap_or_default();
                out.extend(self.b.as_ref().map(|b| b.hyper_bindings()).unwrap_or_default());
                out
            }
            k => self.hyper.iter().cloned().zip(k.hyper_roles().iter().copied()).collect(),
        }
    }

    /// Number of index columns that address a node of this effect.
    pub fn index_arity(&self) -> usize {
        if self.kind == EffectKind::Kronecker { 2 } else { 1 }
    }

    /// Dimension of the null space of the structure matrix.
    pub fn rank_deficiency(&self) -> usize {
        match self.kind {
            EffectKind::Rw1 => 1,
            EffectKind::Rw2 => 2,
            EffectKind::Kronecker => {
                let (a, b) = (self.a.as_ref().unwrap(), self.b.as_ref().unwrap());
                a.rank_deficiency() * b.dim() + b.rank_deficiency() * a.dim()
            }
            _ => 0,
        }
    }
}

fn hyper_value<T: Real>(theta: &BTreeMap<String, T>, name: &str) -> Result<T> {
    theta.get(name).copied().ok_or_else(|| Error::InvalidHyper(format!("no value supplied for `{name}`")))
}

fn check_precision<T: Real>(name: &str, tau: T) -> Result<T> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(Error::InvalidHyper(format!("precision `{name}` must be positive, got {tau}")));
    }
    Ok(tau)
}

/// `τ·R(θ)` for the effect. Values in `theta` are on the natural scale:
/// precisions and correlations as is, lattice hypers as log-range and log-sd.
pub fn build_effect_precision<T: Real>(spec: &EffectSpec, theta: &BTreeMap<String, T>) -> Result<SparsePrecision<T>> {
    spec.validate()?;
    let q = match spec.kind {
        EffectKind::Iid => {
            let tau = check_precision(&spec.hyper[0], hyper_value(theta, &spec.hyper[0])?)?;
            SparsePrecision::from_diagonal(&vec![tau; spec.n.unwrap()])
        }
        EffectKind::Rw1 | EffectKind::Rw2 => {
            let tau = check_precision(&spec.hyper[0], hyper_value(theta, &spec.hyper[0])?)?;
            let order = if spec.kind == EffectKind::Rw1 { 1 } else { 2 };
            difference_gram::<T>(spec.n.unwrap(), order).scaled(tau)
        }
        EffectKind::Ar1 => {
            let tau = check_precision(&spec.hyper[0], hyper_value(theta, &spec.hyper[0])?)?;
            let rho = hyper_value(theta, &spec.hyper[1])?;
            ar1_structure(spec.n.unwrap(), rho)?.scaled(tau)
        }
        EffectKind::LatticeMatern => {
            let lr = hyper_value(theta, &spec.hyper[0])?;
            let ls = hyper_value(theta, &spec.hyper[1])?;
            lattice_matern(spec.nx.unwrap(), spec.ny.unwrap(), spec.spacing.unwrap(), lr, ls)?
        }
        EffectKind::Kronecker => {
            let a = build_effect_precision(spec.a.as_ref().unwrap(), theta)?;
            let b = build_effect_precision(spec.b.as_ref().unwrap(), theta)?;
            a.kron(&b)
        }
    };
    Ok(q.with_rank_deficiency(spec.rank_deficiency()))
}

/// `DᵀD` for the order-`k` difference operator `D` of shape `(n-k) × n`.
pub fn difference_gram<T: Real>(n: usize, order: usize) -> SparsePrecision<T> {
    let stencil: &[f64] = if order == 1 { &[-1.0, 1.0] } else { &[1.0, -2.0, 1.0] };
    let mut t = Vec::new();
    for r in 0..n.saturating_sub(order) {
        for (a, &da) in stencil.iter().enumerate() {
            for (b, &db) in stencil.iter().enumerate() {
                t.push((r + a, r + b, T::of(da * db)));
            }
        }
    }
    SparsePrecision::from_triplets(n, &t).expect("indices in range")
}

/// Unit-marginal-variance AR1 structure matrix.
pub fn ar1_structure<T: Real>(n: usize, rho: T) -> Result<SparsePrecision<T>> {
    if !(rho.abs() < T::one()) {
        return Err(Error::InvalidHyper(format!("AR1 correlation must lie in (-1, 1), got {rho}")));
    }
    let s = T::one() / (T::one() - rho * rho);
    let mut t = Vec::with_capacity(3 * n);
    for i in 0..n {
        let d = if i == 0 || i + 1 == n { T::one() } else { T::one() + rho * rho };
        t.push((i, i, d * s));
        if i + 1 < n {
            t.push((i, i + 1, -rho * s));
            t.push((i + 1, i, -rho * s));
        }
    }
    SparsePrecision::from_triplets(n, &t)
}

/// Five-point graph Laplacian with free (Neumann) boundaries; node index `ix * ny + iy`.
pub fn lattice_laplacian<T: Real>(nx: usize, ny: usize) -> SparsePrecision<T> {
    let id = |ix: usize, iy: usize| ix * ny + iy;
    let mut t = Vec::new();
    for ix in 0..nx {
        for iy in 0..ny {
            let mut nb = Vec::new();
            if ix > 0 {
                nb.push(id(ix - 1, iy));
            }
            if ix + 1 < nx {
                nb.push(id(ix + 1, iy));
            }
            if iy > 0 {
                nb.push(id(ix, iy - 1));
            }
            if iy + 1 < ny {
                nb.push(id(ix, iy + 1));
            }
            t.push((id(ix, iy), id(ix, iy), T::of(nb.len() as f64)));
            for j in nb {
                t.push((id(ix, iy), j, -T::one()));
            }
        }
    }
    SparsePrecision::from_triplets(nx * ny, &t).expect("indices in range")
}

/// Stationary variance of `(aI + K)⁻¹ w` on the infinite lattice, `w` white noise:
/// `(2π)⁻² ∬ (a + 4 − 2cos ω₁ − 2cos ω₂)⁻² dω`.
///
/// The inner integral is `2π B / (B² − 4)^{3/2}` with `B = a + 4 − 2cos ω₁`; the
/// outer one is done with Simpson's rule after `ω = √a sinh t`, which spreads the
/// peak at the origin.
pub fn lattice_unit_variance(a: f64) -> f64 {
    let sa = a.sqrt();
    let tmax = (PI / sa).asinh();
    let m = 2000;
    let h = tmax / m as f64;
    let f = |t: f64| {
        let w = sa * t.sinh();
        let b = a + 4.0 - 2.0 * w.cos();
        let inner = 2.0 * PI * b / (b * b - 4.0).powf(1.5);
        inner * sa * t.cosh()
    };
    let mut s = f(0.0) + f(tmax);
    for k in 1..m {
        s += f(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    // symmetric in ω₁, so twice the half-line integral
    2.0 * s * h / 3.0 / (4.0 * PI * PI)
}

/// Lattice Matérn (smoothness 1) precision `(v(a)/σ²)(aI + K)²` with `a = 8h²/range²`,
/// normalized so that nodes far from the boundary have marginal variance σ².
pub fn lattice_matern<T: Real>(nx: usize, ny: usize, spacing: f64, log_range: T, log_sd: T) -> Result<SparsePrecision<T>> {
    let (lr, ls) = (log_range.to_f64_lossy(), log_sd.to_f64_lossy());
    if !lr.is_finite() || !ls.is_finite() {
        return Err(Error::InvalidHyper(format!("lattice hyperparameters must be finite, got ({lr}, {ls})")));
    }
    let range = lr.exp();
    let a = 8.0 * spacing * spacing / (range * range);
    if !(a > 1e-12) || !a.is_finite() {
        return Err(Error::InvalidHyper(format!("lattice range {range} is degenerate for spacing {spacing}")));
    }
    let scale = lattice_unit_variance(a) / (2.0 * ls).exp();
    let k = lattice_laplacian::<f64>(nx, ny).add_diagonal(a);
    let k2 = square(&k);
    Ok(k2.scaled(scale).cast())
}

fn square(m: &SparsePrecision<f64>) -> SparsePrecision<f64> {
    let n = m.dim();
    let mut t = Vec::new();
    for i in 0..n {
        for (k, v) in m.row(i) {
            for (j, w) in m.row(k) {
                t.push((i, j, v * w));
            }
        }
    }
    SparsePrecision::from_triplets(n, &t).expect("indices in range")
}

/// Prior for one effect: precision, constraints and `log|Q|*` (generalized determinant).
#[derive(Debug, Clone)]
pub struct EffectPrior<T: Real> {
    pub precision: SparsePrecision<T>,
    pub constraints: Option<Constraints<T>>,
    pub log_det: T,
    /// Rank of the precision, i.e. dimension minus rank deficiency.
    pub rank: usize,
}

/// Builds the prior for an effect including constraints and the generalized log-determinant.
pub fn build_effect_prior<T: Real>(spec: &EffectSpec, theta: &BTreeMap<String, T>) -> Result<EffectPrior<T>> {
    let q = build_effect_precision(spec, theta)?;
    let n = spec.dim();
    let def = spec.rank_deficiency();
    let log_det = generalized_log_det(spec, theta)?;
    let mut rows = null_basis::<T>(spec);
    if spec.constr == Some(true) && def == 0 {
        rows.push(vec![T::one(); n]);
    }
    let constraints = (!rows.is_empty()).then(|| Constraints::new(n, rows)).transpose()?;
    Ok(EffectPrior { precision: q, constraints, log_det, rank: n - def })
}

/// Rows spanning the null space of the structure matrix.
pub fn null_basis<T: Real>(spec: &EffectSpec) -> Vec<Vec<T>> {
    match spec.kind {
        EffectKind::Rw1 => vec![vec![T::one(); spec.dim()]],
        EffectKind::Rw2 => {
            let n = spec.dim();
            vec![vec![T::one(); n], (0..n).map(|i| T::of(i as f64)).collect()]
        }
        EffectKind::Kronecker => {
            let (a, b) = (spec.a.as_ref().unwrap(), spec.b.as_ref().unwrap());
            let (na, nb) = (a.dim(), b.dim());
            let mut out = Vec::new();
            for vb in null_basis::<T>(b) {
                for ia in 0..na {
                    let mut row = vec![T::zero(); na * nb];
                    row[ia * nb..(ia + 1) * nb].copy_from_slice(&vb);
                    out.push(row);
                }
            }
            for va in null_basis::<T>(a) {
                for ib in 0..nb {
                    let mut row = vec![T::zero(); na * nb];
                    for ia in 0..na {
                        row[ia * nb + ib] = va[ia];
                    }
                    out.push(row);
                }
            }
            out
        }
        _ => vec![],
    }
}

/// `log|Q|*`: the log of the product of the non-zero eigenvalues.
pub fn generalized_log_det<T: Real>(spec: &EffectSpec, theta: &BTreeMap<String, T>) -> Result<T> {
    let n = spec.dim() as f64;
    let v = match spec.kind {
        EffectKind::Iid => n * hyper_value(theta, &spec.hyper[0])?.to_f64_lossy().ln(),
        EffectKind::Ar1 => {
            let tau = hyper_value(theta, &spec.hyper[0])?.to_f64_lossy();
            let rho = hyper_value(theta, &spec.hyper[1])?.to_f64_lossy();
            n * tau.ln() - (n - 1.0) * (1.0 - rho * rho).ln()
        }
        EffectKind::Rw1 | EffectKind::Rw2 => {
            let tau = hyper_value(theta, &spec.hyper[0])?.to_f64_lossy();
            let k = spec.rank_deficiency();
            (n - k as f64) * tau.ln() + difference_log_det(spec.dim(), k)?
        }
        EffectKind::LatticeMatern => {
            let q = build_effect_precision::<f64>(spec, &cast_theta(theta))?;
            Cholesky::new(&q)?.log_det()
        }
        EffectKind::Kronecker => {
            let (a, b) = (spec.a.as_ref().unwrap(), spec.b.as_ref().unwrap());
            let ra = (a.dim() - a.rank_deficiency()) as f64;
            let rb = (b.dim() - b.rank_deficiency()) as f64;
            rb * generalized_log_det(a, theta)?.to_f64_lossy() + ra * generalized_log_det(b, theta)?.to_f64_lossy()
        }
    };
    Ok(T::of(v))
}

fn cast_theta<T: Real>(theta: &BTreeMap<String, T>) -> BTreeMap<String, f64> {
    theta.iter().map(|(k, v)| (k.clone(), v.to_f64_lossy())).collect()
}

/// `log det(D Dᵀ)` for the order-`k` difference operator, which equals `log|DᵀD|*`.
fn difference_log_det(n: usize, order: usize) -> Result<f64> {
    let stencil: &[f64] = if order == 1 { &[-1.0, 1.0] } else { &[1.0, -2.0, 1.0] };
    let m = n - order;
    let mut t = Vec::new();
    for r in 0..m {
        for s in r.saturating_sub(order)..(r + order + 1).min(m) {
            // (D Dᵀ)_{rs} = Σ_c D_{rc} D_{sc}, both rows are shifted copies of the stencil
            let shift = s as isize - r as isize;
            let mut v = 0.0;
            for (a, &da) in stencil.iter().enumerate() {
                let b = a as isize - shift;
                if b >= 0 && (b as usize) < stencil.len() {
                    v += da * stencil[b as usize];
                }
            }
            t.push((r, s, v));
        }
    }
    Ok(Cholesky::new(&SparsePrecision::from_triplets(m, &t)?)?.log_det())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn th(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn dense(q: &SparsePrecision<f64>) -> DMatrix<f64> {
        let d = q.to_dense();
        DMatrix::from_fn(q.dim(), q.dim(), |i, j| d[i][j])
    }

    #[test]
    fn iid_is_scaled_identity() {
        let q = build_effect_precision(&EffectSpec::iid(3, "t"), &th(&[("t", 2.0)])).unwrap();
        assert_eq!(q.to_dense(), vec![vec![2.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 2.0]]);
    }

    #[test]
    fn ar1_zero_correlation_is_identity() {
        let q = build_effect_precision(&EffectSpec::ar1(3, "t", "r"), &th(&[("t", 1.0), ("r", 0.0)])).unwrap();
        assert_eq!(q.to_dense(), SparsePrecision::<f64>::identity(3).to_dense());
    }

    #[test]
    fn rw2_equals_explicit_second_difference_gram() {
        let q = build_effect_precision(&EffectSpec::rw2(5, "t"), &th(&[("t", 1.0)])).unwrap();
        let mut d = DMatrix::<f64>::zeros(3, 5);
        for r in 0..3 {
            d[(r, r)] = 1.0;
            d[(r, r + 1)] = -2.0;
            d[(r, r + 2)] = 1.0;
        }
        let oracle = d.transpose() * d;
        assert_eq!(dense(&q), oracle);
        assert_eq!(q.rank_deficiency(), 2);
    }

    #[test]
    fn intrinsic_null_spaces() {
        for n in [3usize, 7, 20] {
            let ones = vec![1.0; n];
            let lin: Vec<f64> = (1..=n).map(|i| i as f64).collect();
            let q1 = build_effect_precision(&EffectSpec::rw1(n, "t"), &th(&[("t", 3.0)])).unwrap();
            assert!(q1.mul_vec(&ones).iter().all(|v| v.abs() < 1e-10));
            let q2 = build_effect_precision(&EffectSpec::rw2(n, "t"), &th(&[("t", 3.0)])).unwrap();
            assert!(q2.mul_vec(&ones).iter().all(|v| v.abs() < 1e-10));
            assert!(q2.mul_vec(&lin).iter().all(|v| v.abs() < 1e-10));
        }
    }

    #[test]
    fn ar1_has_unit_marginal_variance() {
        for rho in [-0.9, -0.3, 0.5, 0.95] {
            let q = ar1_structure::<f64>(12, rho).unwrap();
            let inv = dense(&q).try_inverse().unwrap();
            for i in 0..12 {
                assert!((inv[(i, i)] - 1.0).abs() < 1e-8);
            }
        }
        assert!(ar1_structure::<f64>(3, 1.0).is_err());
    }

    #[test]
    fn errors_for_bad_inputs() {
        assert!(build_effect_precision(&EffectSpec::iid(3, "t"), &th(&[("t", 0.0)])).is_err());
        assert!(build_effect_precision(&EffectSpec::ar1(3, "t", "r"), &th(&[("t", 1.0), ("r", -1.2)])).is_err());
        assert!(build_effect_precision(&EffectSpec::lattice_matern(1, 4, 1.0, "r", "s"), &th(&[("r", 0.0), ("s", 0.0)]))
            .is_err());
        assert!(build_effect_precision(&EffectSpec::iid(3, "t"), &th(&[])).is_err());
    }

    #[test]
    fn generalized_log_dets_match_eigenvalues() {
        let theta = th(&[("t", 2.5), ("r", 0.4), ("lr", 1.0), ("ls", 0.3)]);
        let specs = [
            EffectSpec::iid(4, "t"),
            EffectSpec::rw1(6, "t"),
            EffectSpec::rw2(8, "t"),
            EffectSpec::ar1(5, "t", "r"),
            EffectSpec::lattice_matern(3, 4, 1.0, "lr", "ls"),
            EffectSpec::kronecker(EffectSpec::lattice_matern(3, 3, 1.0, "lr", "ls"), EffectSpec::rw1(4, "t")),
            EffectSpec::kronecker(EffectSpec::ar1(3, "t", "r"), EffectSpec::iid(2, "t")),
        ];
        for spec in specs {
            let q = build_effect_precision(&spec, &theta).unwrap();
            let eig = dense(&q).symmetric_eigen().eigenvalues;
            let mut ev: Vec<f64> = eig.iter().copied().collect();
            ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let k = spec.rank_deficiency();
            assert!(ev[..k].iter().all(|v| v.abs() < 1e-8), "{:?}", spec.kind);
            let oracle: f64 = ev[k..].iter().map(|v| v.ln()).sum();
            let ld = generalized_log_det(&spec, &theta).unwrap();
            assert!((ld - oracle).abs() < 1e-7 * oracle.abs().max(1.0), "{:?}: {ld} vs {oracle}", spec.kind);
        }
    }

    #[test]
    fn lattice_variance_integral_matches_brute_force() {
        for a in [0.05, 0.5, 2.0] {
            let m = 1200;
            let h = 2.0 * PI / m as f64;
            let mut s = 0.0;
            for i in 0..m {
                let w1 = -PI + (i as f64 + 0.5) * h;
                for j in 0..m {
                    let w2 = -PI + (j as f64 + 0.5) * h;
                    let d = a + 4.0 - 2.0 * w1.cos() - 2.0 * w2.cos();
                    s += 1.0 / (d * d);
                }
            }
            let brute = s * h * h / (4.0 * PI * PI);
            let v = lattice_unit_variance(a);
            assert!(((v - brute) / brute).abs() < 1e-6, "a={a}: {v} vs {brute}");
        }
    }

    #[test]
    fn lattice_interior_variance_is_sd_squared() {
        let (nx, ny) = (41, 41);
        let sd: f64 = 1.7;
        let q = lattice_matern::<f64>(nx, ny, 1.0, 3f64.ln(), sd.ln()).unwrap();
        let v = crate::gmrf::cholesky::marginal_variances(&q).unwrap();
        let centre = v[20 * ny + 20];
        assert!((centre / (sd * sd) - 1.0).abs() < 1e-3, "{centre}");
        assert!(v[0] > centre);
    }

    #[test]
    fn kronecker_action_matches_dense_oracle() {
        let theta = th(&[("t", 1.3), ("r", 0.2), ("u", 0.7)]);
        let a = EffectSpec::ar1(3, "t", "r");
        let b = EffectSpec::iid(4, "u");
        let k = build_effect_precision(&EffectSpec::kronecker(a.clone(), b.clone()), &theta).unwrap();
        assert_eq!(k.dim(), 12);
        let qa = dense(&build_effect_precision(&a, &theta).unwrap());
        let qb = dense(&build_effect_precision(&b, &theta).unwrap());
        let oracle = qa.kronecker(&qb);
        assert!((dense(&k) - &oracle).abs().max() < 1e-14);
        // (A ⊗ B) vec_r(X) = vec_r(A X Bᵀ) with row-major vectorization, X of shape 3×4
        let x = DMatrix::from_fn(3, 4, |i, j| (i as f64 + 1.0) * 0.3 - j as f64 * 0.7);
        let v: Vec<f64> = (0..12).map(|p| x[(p / 4, p % 4)]).collect();
        let lhs = k.mul_vec(&v);
        let rhs = &qa * &x * qb.transpose();
        for p in 0..12 {
            assert!((lhs[p] - rhs[(p / 4, p % 4)]).abs() < 1e-12);
        }
    }

    #[test]
    fn hyper_role_round_trip() {
        for role in [HyperRole::Precision, HyperRole::Correlation, HyperRole::LogRange, HyperRole::Scale] {
            for v in [-1.5, 0.2, 0.9] {
                let nat = role.to_natural(v);
                assert!((role.to_internal(nat) - v).abs() < 1e-12);
            }
        }
    }
}
