//! Multivariate Gaussian densities in precision form, optionally conditioned on `Cx = 0`.

use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::cholesky::Cholesky;
use super::dense::DenseCholesky;
use super::sparse::SparsePrecision;
use crate::error::{Error, Result};
use crate::scalar::Real;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Dense linear constraint rows `C` (k × n); the density is conditioned on `Cx = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraints<T: Real> {
    n: usize,
    rows: Vec<Vec<T>>,
}

impl<T: Real> Constraints<T> {
    pub fn new(n: usize, rows: Vec<Vec<T>>) -> Result<Self> {
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension(format!("constraint rows must have length {n}")));
        }
        Ok(Constraints { n, rows })
    }

    pub fn k(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn rows(&self) -> &[Vec<T>] {
        &self.rows
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        self.rows.iter().map(|r| r.iter().zip(x).map(|(a, b)| *a * *b).sum()).collect()
    }

    /// `C Cᵀ`.
    pub fn gram(&self) -> Vec<Vec<T>> {
        self.rows.iter().map(|a| self.rows.iter().map(|b| a.iter().zip(b).map(|(x, y)| *x * *y).sum()).collect()).collect()
    }

    /// Block-diagonal stacking of per-block constraints placed at `offset` in a vector of length `n`.
    pub fn stack(n: usize, parts: &[(usize, &Constraints<T>)]) -> Option<Self> {
        let mut rows = Vec::new();
        for (off, c) in parts {
            for r in &c.rows {
                let mut row = vec![T::zero(); n];
                row[*off..*off + c.n].copy_from_slice(r);
                rows.push(row);
            }
        }
        (!rows.is_empty()).then_some(Constraints { n, rows })
    }

    /// Columns `idx` of the rows that touch only `idx`; `None` when no such row exists.
    /// Fails if a row mixes `idx` and other coordinates.
    fn split(&self, keep: &[usize], rest: &[usize]) -> Result<(Option<Self>, Option<Self>)> {
        let touches = |r: &Vec<T>, idx: &[usize]| idx.iter().any(|&i| r[i] != T::zero());
        let (mut ke, mut kr) = (Vec::new(), Vec::new());
        for r in &self.rows {
            match (touches(r, keep), touches(r, rest)) {
                (true, true) => {
                    return Err(Error::InvalidGaussian("a constraint couples the kept block with the remainder".into()))
                }
                (true, false) => ke.push(keep.iter().map(|&i| r[i]).collect()),
                (false, true) => kr.push(rest.iter().map(|&i| r[i]).collect()),
                (false, false) => {}
            }
        }
        let mk = |rows: Vec<Vec<T>>, n| (!rows.is_empty()).then_some(Constraints { n, rows });
        Ok((mk(ke, keep.len()), mk(kr, rest.len())))
    }

    pub fn cast<U: Real>(&self) -> Constraints<U> {
        Constraints { n: self.n, rows: self.rows.iter().map(|r| r.iter().map(|v| U::of(v.to_f64_lossy())).collect()).collect() }
    }
}

/// `x ~ N(mean, precision⁻¹)`, conditioned on `Cx = 0` when constraints are present.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDensity<T: Real> {
    pub mean: Vec<T>,
    pub precision: SparsePrecision<T>,
    pub node_labels: Vec<String>,
    pub constraints: Option<Constraints<T>>,
}

impl<T: Real> GaussianDensity<T> {
    pub fn new(mean: Vec<T>, precision: SparsePrecision<T>, node_labels: Vec<String>) -> Result<Self> {
        if mean.len() != precision.dim() || node_labels.len() != mean.len() {
            return Err(Error::Dimension(format!(
                "mean {} / precision {} / labels {} lengths disagree",
                mean.len(),
                precision.dim(),
                node_labels.len()
            )));
        }
        Ok(GaussianDensity { mean, precision, node_labels, constraints: None })
    }

    /// Labels `prefix[0]`, `prefix[1]`, ...
    pub fn with_indexed_labels(mean: Vec<T>, precision: SparsePrecision<T>, prefix: &str) -> Result<Self> {
        let labels = (0..mean.len()).map(|i| format!("{prefix}[{i}]")).collect();
        Self::new(mean, precision, labels)
    }

    pub fn with_constraints(mut self, c: Option<Constraints<T>>) -> Result<Self> {
        if let Some(c) = &c {
            if c.dim() != self.dim() {
                return Err(Error::Dimension("constraint width differs from density dimension".into()));
            }
        }
        self.constraints = c;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn factor(&self) -> Result<FactoredDensity<T>> {
        FactoredDensity::new(self.clone())
    }

    pub fn into_factored(self) -> Result<FactoredDensity<T>> {
        FactoredDensity::new(self)
    }

    /// Exact marginal over the coordinates `keep`: Schur complement of the precision,
    /// accounting for constraints on the remaining coordinates.
    pub fn marginalize(&self, keep: &[usize]) -> Result<GaussianDensity<T>> {
        let n = self.dim();
        let mut in_keep = vec![usize::MAX; n];
        for (p, &i) in keep.iter().enumerate() {
            if i >= n || in_keep[i] != usize::MAX {
                return Err(Error::Dimension(format!("invalid or repeated index {i}")));
            }
            in_keep[i] = p;
        }
        let rest: Vec<usize> = (0..n).filter(|&i| in_keep[i] == usize::MAX).collect();
        let mean_full = match &self.constraints {
            Some(_) => self.factor()?.constrained_mean(),
            None => self.mean.clone(),
        };
        let (ce, cr) = match &self.constraints {
            Some(c) => c.split(keep, &rest)?,
            None => (None, None),
        };
        let ne = keep.len();
        let mut s: Vec<Vec<T>> = vec![vec![T::zero(); ne]; ne];
        for (p, &i) in keep.iter().enumerate() {
            for (j, v) in self.precision.row(i) {
                if in_keep[j] != usize::MAX {
                    s[p][in_keep[j]] = v;
                }
            }
        }
        if !rest.is_empty() {
            let mut rest_pos = vec![usize::MAX; n];
            for (p, &i) in rest.iter().enumerate() {
                rest_pos[i] = p;
            }
            // coupling rows: for each kept node, its entries into the rest
            let coupling: Vec<Vec<(usize, T)>> = keep
                .iter()
                .map(|&i| {
                    self.precision.row(i).filter(|(j, _)| rest_pos[*j] != usize::MAX).map(|(j, v)| (rest_pos[j], v)).collect()
                })
                .collect();
            let coupled: Vec<usize> = (0..ne).filter(|&p| !coupling[p].is_empty()).collect();
            if !coupled.is_empty() {
                let qrr = self.precision.submatrix(&rest);
                let sub = GaussianDensity {
                    mean: vec![T::zero(); rest.len()],
                    precision: qrr,
                    node_labels: vec![String::new(); rest.len()],
                    constraints: cr,
                };
                let f = sub.factor()?;
                for &pj in &coupled {
                    let mut b = vec![T::zero(); rest.len()];
                    for &(r, v) in &coupling[pj] {
                        b[r] = v;
                    }
                    let z = f.constrained_solve(&b);
                    for &pi in &coupled {
                        let d: T = coupling[pi].iter().map(|&(r, v)| v * z[r]).sum();
                        s[pi][pj] = s[pi][pj] - d;
                    }
                }
                let half = T::of(0.5);
                for i in 0..ne {
                    for j in 0..i {
                        let v = (s[i][j] + s[j][i]) * half;
                        s[i][j] = v;
                        s[j][i] = v;
                    }
                }
            }
        }
        let precision = csr_from_dense(&s)?;
        GaussianDensity::new(
            keep.iter().map(|&i| mean_full[i]).collect(),
            precision,
            keep.iter().map(|&i| self.node_labels[i].clone()).collect(),
        )?
        .with_constraints(ce)
    }

    pub fn cast<U: Real>(&self) -> GaussianDensity<U> {
        GaussianDensity {
            mean: self.mean.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
            precision: self.precision.cast(),
            node_labels: self.node_labels.clone(),
            constraints: self.constraints.as_ref().map(|c| c.cast()),
        }
    }
}

pub(crate) fn csr_from_dense<T: Real>(s: &[Vec<T>]) -> Result<SparsePrecision<T>> {
    let n = s.len();
    let mut indptr = Vec::with_capacity(n + 1);
    let mut indices = Vec::new();
    let mut values = Vec::new();
    indptr.push(0);
    for row in s {
        for (j, &v) in row.iter().enumerate() {
            if v != T::zero() {
                indices.push(j);
                values.push(v);
            }
        }
        indptr.push(indices.len());
    }
    SparsePrecision::from_csr(n, indptr, indices, values)
}

struct Kriging<T: Real> {
    c: Constraints<T>,
    /// `Q⁻¹ cₐ` for each constraint row.
    w: Vec<Vec<T>>,
    /// `C Q⁻¹ Cᵀ`.
    m: DenseCholesky<T>,
}

/// A density together with the factor of its precision and the kriging terms for its constraints.
pub struct FactoredDensity<T: Real> {
    density: GaussianDensity<T>,
    chol: Cholesky<T>,
    kriging: Option<Kriging<T>>,
}

impl<T: Real> FactoredDensity<T> {
    fn new(density: GaussianDensity<T>) -> Result<Self> {
        let chol = Cholesky::new(&density.precision)?;
        Self::from_factor(density, chol)
    }

    /// Uses an existing factor of `density.precision`.
    pub fn from_factor(density: GaussianDensity<T>, chol: Cholesky<T>) -> Result<Self> {
        if chol.dim() != density.dim() {
            return Err(Error::Dimension("factor dimension differs from density".into()));
        }
        let kriging = density.constraints.as_ref().map(|c| kriging(&chol, c)).transpose()?;
        Ok(FactoredDensity { density, chol, kriging })
    }

    pub fn density(&self) -> &GaussianDensity<T> {
        &self.density
    }

    pub fn into_density(self) -> GaussianDensity<T> {
        self.density
    }

    pub fn cholesky(&self) -> &Cholesky<T> {
        &self.chol
    }

    /// `log det(C Q⁻¹ Cᵀ)`, zero without constraints.
    pub fn constraint_log_det(&self) -> T {
        self.kriging.as_ref().map_or(T::zero(), |k| k.m.log_det())
    }

    /// Marginal variance of one coordinate of the conditioned density, by a single solve.
    pub fn variance_of(&self, i: usize) -> T {
        let mut e = vec![T::zero(); self.density.dim()];
        e[i] = T::one();
        self.constrained_solve(&e)[i]
    }

    /// `(Q⁻¹ − W M⁻¹ Wᵀ) b`: the solve restricted to the constraint subspace.
    pub fn constrained_solve(&self, b: &[T]) -> Vec<T> {
        let mut z = self.chol.solve(b);
        if let Some(k) = &self.kriging {
            project(k, &mut z);
        }
        z
    }

    /// Mean of the conditioned density.
    pub fn constrained_mean(&self) -> Vec<T> {
        let mut m = self.density.mean.clone();
        if let Some(k) = &self.kriging {
            project(k, &mut m);
        }
        m
    }

    /// Marginal variances of the conditioned density.
    pub fn marginal_variances(&self) -> Vec<T> {
        let mut v = self.chol.selected_inverse().diagonal();
        if let Some(k) = &self.kriging {
            let minv = k.m.inverse();
            for (i, vi) in v.iter_mut().enumerate() {
                let mut corr = T::zero();
                for (a, wa) in k.w.iter().enumerate() {
                    for (b, wb) in k.w.iter().enumerate() {
                        corr = corr + wa[i] * minv[a][b] * wb[i];
                    }
                }
                *vi = *vi - corr;
            }
        }
        v
    }

    /// Draw from the conditioned density.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        let v = self.chol.sample_zero_mean(rng);
        let mut x: Vec<T> = self.density.mean.iter().zip(&v).map(|(a, b)| *a + *b).collect();
        if let Some(k) = &self.kriging {
            project(k, &mut x);
        }
        x
    }

    pub fn log_det(&self) -> T {
        self.chol.log_det()
    }

    /// Log density w.r.t. Lebesgue measure on the constraint subspace (or on Rⁿ without constraints).
    pub fn log_density(&self, x: &[T]) -> T {
        let d = &self.density;
        let n = d.dim() as f64;
        let r: Vec<T> = x.iter().zip(&d.mean).map(|(a, b)| *a - *b).collect();
        let half = T::of(0.5);
        let mut lp = T::of(-0.5 * n * LN_2PI) + half * self.chol.log_det() - half * d.precision.quad_form(&r);
        if let Some(k) = &self.kriging {
            let cm = k.c.apply(&d.mean);
            let sol = k.m.solve(&cm);
            let quad: T = cm.iter().zip(&sol).map(|(a, b)| *a * *b).sum();
            let log_pc0 = T::of(-0.5 * k.c.k() as f64 * LN_2PI) - half * k.m.log_det() - half * quad;
            let gram = DenseCholesky::new(&k.c.gram()).map(|g| g.log_det()).unwrap_or(T::zero());
            lp = lp - log_pc0 - half * gram;
        }
        lp
    }
}

fn kriging<T: Real>(chol: &Cholesky<T>, c: &Constraints<T>) -> Result<Kriging<T>> {
    let w: Vec<Vec<T>> = c.rows().iter().map(|r| chol.solve(r)).collect();
    let m: Vec<Vec<T>> = c.rows().iter().map(|a| w.iter().map(|wb| a.iter().zip(wb).map(|(x, y)| *x * *y).sum()).collect()).collect();
    let m = DenseCholesky::new(&m)?;
    Ok(Kriging { c: c.clone(), w, m })
}

/// `x ← x − W M⁻¹ C x`.
fn project<T: Real>(k: &Kriging<T>, x: &mut [T]) {
    let cx = k.c.apply(x);
    let lam = k.m.solve(&cx);
    for (wa, la) in k.w.iter().zip(&lam) {
        for (xi, wi) in x.iter_mut().zip(wa) {
            *xi = *xi - *wi * *la;
        }
    }
}

/// Deterministic draw for a given seed.
pub fn sample_gmrf<T: Real>(density: &GaussianDensity<T>, seed: u64) -> Result<Vec<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(density.factor()?.sample(&mut rng))
}
