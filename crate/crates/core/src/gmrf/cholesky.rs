//! Envelope (skyline) Cholesky factorization.
//!
//! The ordering is reverse Cuthill-McKee on the sparse part of the graph, with
//! high-degree nodes (fixed effects, short intrinsic effects coupled to every
//! observation) moved to the end so they only cost one dense row each.
//! Row `i` of `L` is stored contiguously from column `first[i]` to `i`.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::sparse::SparsePrecision;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Ordering and storage layout for one sparsity pattern.
#[derive(Debug, Clone)]
pub struct Symbolic {
    n: usize,
    perm: Vec<usize>,
    iperm: Vec<usize>,
    first: Vec<usize>,
    start: Vec<usize>,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    scatter: Vec<usize>,
}

impl Symbolic {
    pub fn analyze<T: Real>(q: &SparsePrecision<T>) -> Self {
        let n = q.dim();
        let adj: Vec<Vec<usize>> = (0..n).map(|i| q.row(i).map(|(j, _)| j).filter(|&j| j != i).collect()).collect();
        let dense_cut = 2.0 * (n as f64).sqrt() + 16.0;
        let is_dense: Vec<bool> = adj.iter().map(|a| a.len() as f64 > dense_cut).collect();

        let mut perm = rcm(&adj, &is_dense);
        let mut dense: Vec<usize> = (0..n).filter(|&i| is_dense[i]).collect();
        dense.sort_by_key(|&i| (adj[i].len(), i));
        perm.extend(dense);

        let identity: Vec<usize> = (0..n).collect();
        if profile(&adj, &identity) <= profile(&adj, &perm) {
            perm = identity;
        }
        Self::with_ordering(q, perm)
    }

    /// Layout for an explicit ordering (`perm[new] = old`).
    pub fn with_ordering<T: Real>(q: &SparsePrecision<T>, perm: Vec<usize>) -> Self {
        let n = q.dim();
        let mut iperm = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for old in 0..n {
            let i = iperm[old];
            for (j, _) in q.row(old) {
                let jn = iperm[j];
                if jn < first[i] {
                    first[i] = jn;
                }
            }
        }
        let mut start = Vec::with_capacity(n + 1);
        start.push(0);
        for i in 0..n {
            start.push(start[i] + i - first[i] + 1);
        }
        let mut scatter = Vec::with_capacity(q.nnz());
        for old in 0..n {
            let i = iperm[old];
            for (j, _) in q.row(old) {
                let jn = iperm[j];
                scatter.push(if jn <= i { start[i] + jn - first[i] } else { usize::MAX });
            }
        }
        Symbolic {
            n,
            perm,
            iperm,
            first,
            start,
            indptr: q.indptr().to_vec(),
            indices: q.indices().to_vec(),
            scatter,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored entries of the factor.
    pub fn envelope_size(&self) -> usize {
        self.start[self.n]
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    fn matches<T: Real>(&self, q: &SparsePrecision<T>) -> bool {
        q.dim() == self.n && q.indptr() == self.indptr.as_slice() && q.indices() == self.indices.as_slice()
    }

    /// Numeric factorization of a matrix with exactly the analyzed pattern.
    pub fn factor<T: Real>(self: &Arc<Self>, q: &SparsePrecision<T>) -> Result<Cholesky<T>> {
        if !self.matches(q) {
            return Err(Error::InvalidMatrix("sparsity pattern differs from the analyzed pattern".into()));
        }
        let mut env = vec![T::zero(); self.envelope_size()];
        for (p, &v) in q.values().iter().enumerate() {
            let t = self.scatter[p];
            if t != usize::MAX {
                env[t] = v;
            }
        }
        for i in 0..self.n {
            let (fi, si) = (self.first[i], self.start[i]);
            let (done, rest) = env.split_at_mut(si);
            let row_i = &mut rest[..i - fi + 1];
            for j in fi..i {
                let (fj, sj) = (self.first[j], self.start[j]);
                let k0 = fi.max(fj);
                let a = &row_i[k0 - fi..j - fi];
                let b = &done[sj + k0 - fj..sj + j - fj];
                let s = row_i[j - fi] - dot(a, b);
                row_i[j - fi] = s / done[sj + j - fj];
            }
            let a = &row_i[..i - fi];
            let d = row_i[i - fi] - dot(a, a);
            if !(d > T::zero()) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: i, index: self.perm[i], value: d.to_f64_lossy() });
            }
            row_i[i - fi] = d.sqrt();
        }
        Ok(Cholesky { sym: Arc::clone(self), env })
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (x, y)| s + *x * *y)
}

fn profile(adj: &[Vec<usize>], perm: &[usize]) -> usize {
    let mut iperm = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        iperm[old] = new;
    }
    perm.iter()
        .enumerate()
        .map(|(i, &old)| i - adj[old].iter().map(|&j| iperm[j]).filter(|&j| j < i).min().unwrap_or(i))
        .sum()
}

/// Reverse Cuthill-McKee over the nodes not flagged dense; dense nodes are skipped.
fn rcm(adj: &[Vec<usize>], skip: &[bool]) -> Vec<usize> {
    let n = adj.len();
    let deg: Vec<usize> = (0..n).map(|i| adj[i].iter().filter(|&&j| !skip[j]).count()).collect();
    let mut visited = skip.to_vec();
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).filter(|&i| !skip[i]).collect();
    by_degree.sort_by_key(|&i| (deg[i], i));
    for &seed in &by_degree {
        if visited[seed] {
            continue;
        }
        let root = peripheral(adj, skip, &deg, seed);
        let mut queue = VecDeque::from([root]);
        visited[root] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nb: Vec<usize> = adj[v].iter().copied().filter(|&j| !visited[j]).collect();
            nb.sort_by_key(|&j| (deg[j], j));
            for j in nb {
                visited[j] = true;
                queue.push_back(j);
            }
        }
    }
    order.reverse();
    order
}

/// Pseudo-peripheral node of the component containing `seed`.
fn peripheral(adj: &[Vec<usize>], skip: &[bool], deg: &[usize], seed: usize) -> usize {
    let mut root = seed;
    let mut ecc = 0;
    for _ in 0..8 {
        let (levels, last) = bfs_levels(adj, skip, root);
        let far = last.into_iter().min_by_key(|&j| (deg[j], j)).unwrap_or(root);
        if levels <= ecc {
            break;
        }
        ecc = levels;
        root = far;
    }
    root
}

fn bfs_levels(adj: &[Vec<usize>], skip: &[bool], root: usize) -> (usize, Vec<usize>) {
    let mut level = vec![usize::MAX; adj.len()];
    level[root] = 0;
    let mut frontier = vec![root];
    let mut depth = 0;
    loop {
        let mut next = Vec::new();
        for &v in &frontier {
            for &j in &adj[v] {
                if !skip[j] && level[j] == usize::MAX {
                    level[j] = depth + 1;
                    next.push(j);
                }
            }
        }
        if next.is_empty() {
            return (depth, frontier);
        }
        depth += 1;
        frontier = next;
    }
}

/// Numeric Cholesky factor `P Q Pᵀ = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky<T: Real> {
    sym: Arc<Symbolic>,
    env: Vec<T>,
}

impl<T: Real> Cholesky<T> {
    /// Analyzes and factors in one call.
    pub fn new(q: &SparsePrecision<T>) -> Result<Self> {
        Arc::new(Symbolic::analyze(q)).factor(q)
    }

    pub fn dim(&self) -> usize {
        self.sym.n
    }

    pub fn symbolic(&self) -> &Arc<Symbolic> {
        &self.sym
    }

    #[inline]
    fn l(&self, i: usize, j: usize) -> T {
        self.env[self.sym.start[i] + j - self.sym.first[i]]
    }

    pub fn log_det(&self) -> T {
        let two = T::one() + T::one();
        two * (0..self.sym.n).map(|i| self.l(i, i).ln()).sum::<T>()
    }

    fn forward(&self, y: &mut [T]) {
        let s = &self.sym;
        for i in 0..s.n {
            let fi = s.first[i];
            let row = &self.env[s.start[i]..s.start[i + 1]];
            let acc = dot(&row[..i - fi], &y[fi..i]);
            y[i] = (y[i] - acc) / row[i - fi];
        }
    }

    fn backward(&self, x: &mut [T]) {
        let s = &self.sym;
        for i in (0..s.n).rev() {
            let fi = s.first[i];
            let row = &self.env[s.start[i]..s.start[i + 1]];
            x[i] = x[i] / row[i - fi];
            let xi = x[i];
            for (xj, &l) in x[fi..i].iter_mut().zip(&row[..i - fi]) {
                *xj = *xj - l * xi;
            }
        }
    }

    /// Solves `Q x = b`.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let s = &self.sym;
        assert_eq!(b.len(), s.n, "right-hand side length");
        let mut y: Vec<T> = s.perm.iter().map(|&old| b[old]).collect();
        self.forward(&mut y);
        self.backward(&mut y);
        let mut out = vec![T::zero(); s.n];
        for (i, &old) in s.perm.iter().enumerate() {
            out[old] = y[i];
        }
        out
    }

    /// Returns `v` with `Q⁻¹ = Cov(v)` given standard normal `z`, i.e. `Pᵀ L⁻ᵀ z`.
    pub fn whiten_inverse(&self, z: &[T]) -> Vec<T> {
        let s = &self.sym;
        let mut v = z.to_vec();
        self.backward(&mut v);
        let mut out = vec![T::zero(); s.n];
        for (i, &old) in s.perm.iter().enumerate() {
            out[old] = v[i];
        }
        out
    }

    /// Zero-mean draw with precision `Q`.
    pub fn sample_zero_mean<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        let z: Vec<T> = (0..self.sym.n).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect();
        self.whiten_inverse(&z)
    }

    /// Takahashi recursion for `Q⁻¹` on the envelope of `L`.
    pub fn selected_inverse(&self) -> SelectedInverse<T> {
        let s = &self.sym;
        let n = s.n;
        let mut cols: Vec<Vec<usize>> = vec![Vec::new(); n];
        for k in 0..n {
            for c in cols.iter_mut().take(k).skip(s.first[k]) {
                c.push(k);
            }
        }
        let mut sig = vec![T::zero(); s.envelope_size()];
        let at = |a: usize, b: usize| -> usize {
            let (r, c) = if a >= b { (a, b) } else { (b, a) };
            s.start[r] + c - s.first[r]
        };
        let mut lk = Vec::new();
        for i in (0..n).rev() {
            let lii = self.l(i, i);
            let ks = &cols[i];
            lk.clear();
            lk.extend(ks.iter().map(|&k| self.l(k, i)));
            for &j in ks {
                let acc = ks.iter().zip(&lk).fold(T::zero(), |a, (&k, &l)| a + l * sig[at(k, j)]);
                sig[at(j, i)] = -acc / lii;
            }
            let acc = ks.iter().zip(&lk).fold(T::zero(), |a, (&k, &l)| a + l * sig[at(k, i)]);
            sig[at(i, i)] = T::one() / (lii * lii) - acc / lii;
        }
        SelectedInverse { sym: Arc::clone(&self.sym), env: sig }
    }
}

/// Entries of `Q⁻¹` on the envelope of the factor.
#[derive(Debug, Clone)]
pub struct SelectedInverse<T: Real> {
    sym: Arc<Symbolic>,
    env: Vec<T>,
}

impl<T: Real> SelectedInverse<T> {
    /// `(Q⁻¹)_{ij}` in original indexing, if inside the computed envelope.
    pub fn get(&self, i: usize, j: usize) -> Option<T> {
        let s = &self.sym;
        let (a, b) = (s.iperm[i], s.iperm[j]);
        let (r, c) = if a >= b { (a, b) } else { (b, a) };
        (c >= s.first[r]).then(|| self.env[s.start[r] + c - s.first[r]])
    }

    pub fn diagonal(&self) -> Vec<T> {
        let s = &self.sym;
        (0..s.n).map(|old| {
            let i = s.iperm[old];
            self.env[s.start[i] + i - s.first[i]]
        })
        .collect()
    }
}

/// Diagonal of `Q⁻¹` by selected inversion.
pub fn marginal_variances<T: Real>(q: &SparsePrecision<T>) -> Result<Vec<T>> {
    Ok(Cholesky::new(q)?.selected_inverse().diagonal())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn to_na(q: &SparsePrecision<f64>) -> DMatrix<f64> {
        let d = q.to_dense();
        DMatrix::from_fn(q.dim(), q.dim(), |i, j| d[i][j])
    }

    fn random_spd(n: usize, density: f64, seed: u64) -> SparsePrecision<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Vec::new();
        let mut diag = vec![0.0; n];
        for i in 0..n {
            for j in 0..i {
                if rng.random::<f64>() < density {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    t.push((i, j, v));
                    t.push((j, i, v));
                    diag[i] += v.abs();
                    diag[j] += v.abs();
                }
            }
        }
        for (i, d) in diag.iter().enumerate() {
            t.push((i, i, d + 0.5 + rng.random::<f64>()));
        }
        SparsePrecision::from_triplets(n, &t).unwrap()
    }

    #[test]
    fn identity_log_det_zero() {
        let c = Cholesky::new(&SparsePrecision::<f64>::identity(4)).unwrap();
        assert_eq!(c.log_det(), 0.0);
    }

    #[test]
    fn diagonal_log_det() {
        let c = Cholesky::new(&SparsePrecision::from_diagonal(&[2.0f64, 2.0])).unwrap();
        assert!((c.log_det() - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!((c.log_det() - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn random_spd_log_det_against_dense_lu() {
        let q = random_spd(50, 0.1, 3);
        let lu = to_na(&q).lu().determinant().ln();
        let ld = Cholesky::new(&q).unwrap().log_det();
        assert!(((ld - lu) / lu).abs() < 1e-8, "{ld} vs {lu}");
    }

    #[test]
    fn solve_and_inverse_match_dense() {
        for seed in 0..5 {
            let q = random_spd(80, 0.05, seed);
            let c = Cholesky::new(&q).unwrap();
            let inv = to_na(&q).try_inverse().unwrap();
            let b: Vec<f64> = (0..80).map(|i| (i as f64).sin()).collect();
            let x = c.solve(&b);
            let xo = &inv * nalgebra::DVector::from_vec(b.clone());
            for i in 0..80 {
                assert!((x[i] - xo[i]).abs() < 1e-10);
            }
            let si = c.selected_inverse();
            for (i, v) in si.diagonal().iter().enumerate() {
                assert!(((v - inv[(i, i)]) / inv[(i, i)]).abs() < 1e-8);
            }
            for i in 0..80 {
                for (j, _) in q.row(i) {
                    let v = si.get(i, j).expect("pattern inside envelope");
                    assert!((v - inv[(i, j)]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn dense_rows_are_postponed() {
        // arrow matrix: node 0 couples to everything
        let n = 200;
        let mut t = vec![(0, 0, n as f64 + 1.0)];
        for i in 1..n {
            t.push((i, i, 3.0));
            t.push((0, i, 1.0));
            t.push((i, 0, 1.0));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        let q = SparsePrecision::from_triplets(n, &t).unwrap();
        let sym = Symbolic::analyze(&q);
        assert_eq!(*sym.perm().last().unwrap(), 0);
        assert!(sym.envelope_size() < 4 * n);
        let c = Arc::new(sym).factor(&q).unwrap();
        let lu = to_na(&q).lu().determinant().ln();
        assert!((c.log_det() - lu).abs() < 1e-8 * lu.abs());
    }

    #[test]
    fn failing_pivot_reports_original_index() {
        let q = SparsePrecision::from_dense(&[vec![1.0f64, 0.0, 0.0], vec![0.0, 1.0, 2.0], vec![0.0, 2.0, 1.0]]).unwrap();
        match Cholesky::new(&q) {
            Err(Error::NotPositiveDefinite { index, .. }) => assert!(index == 1 || index == 2),
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn refactor_with_same_pattern() {
        let q = random_spd(30, 0.2, 9);
        let sym = Arc::new(Symbolic::analyze(&q));
        let q2 = q.scaled(3.0);
        let c = sym.factor(&q2).unwrap();
        let direct = Cholesky::new(&q).unwrap();
        assert!((c.log_det() - direct.log_det() - 30.0 * 3f64.ln()).abs() < 1e-10);
        let other = random_spd(30, 0.2, 10);
        assert!(sym.factor(&other).is_err());
    }

    #[test]
    fn f32_factorization() {
        let q = random_spd(20, 0.2, 1).cast::<f32>();
        let c = Cholesky::new(&q).unwrap();
        let qd = random_spd(20, 0.2, 1);
        let cd = Cholesky::new(&qd).unwrap();
        assert!((c.log_det() as f64 - cd.log_det()).abs() < 1e-3);
    }
}
