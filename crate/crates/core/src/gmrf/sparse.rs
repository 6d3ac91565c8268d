//! Compressed sparse row storage for symmetric precision matrices.
//!
//! Both triangles are stored so row access doubles as column access.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct SparsePrecision<T: Real> {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<T>,
    rank_deficiency: usize,
}

impl<T: Real> SparsePrecision<T> {
    /// Builds from raw CSR arrays. Column indices within a row must be strictly increasing.
    pub fn from_csr(n: usize, indptr: Vec<usize>, indices: Vec<usize>, values: Vec<T>) -> Result<Self> {
        if indptr.len() != n + 1 || indices.len() != values.len() || indptr[n] != indices.len() {
            return Err(Error::InvalidMatrix("inconsistent CSR arrays".into()));
        }
        for i in 0..n {
            let row = &indices[indptr[i]..indptr[i + 1]];
            if row.windows(2).any(|w| w[0] >= w[1]) || row.iter().any(|&c| c >= n) {
                return Err(Error::InvalidMatrix(format!("row {i} has unsorted or out-of-range columns")));
            }
        }
        Ok(SparsePrecision { n, indptr, indices, values, rank_deficiency: 0 })
    }

    /// Sums duplicate entries. Entries are taken literally: supply both triangles.
    pub fn from_triplets(n: usize, entries: &[(usize, usize, T)]) -> Result<Self> {
        let mut rows: Vec<BTreeMap<usize, T>> = vec![BTreeMap::new(); n];
        for &(i, j, v) in entries {
            if i >= n || j >= n {
                return Err(Error::Dimension(format!("entry ({i}, {j}) outside {n}x{n}")));
            }
            let e = rows[i].entry(j).or_insert_with(T::zero);
            *e = *e + v;
        }
        Ok(Self::from_row_maps(n, rows))
    }

    fn from_row_maps(n: usize, rows: Vec<BTreeMap<usize, T>>) -> Self {
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in rows {
            for (j, v) in row {
                indices.push(j);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        SparsePrecision { n, indptr, indices, values, rank_deficiency: 0 }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diagonal(&vec![T::one(); n])
    }

    pub fn from_diagonal(d: &[T]) -> Self {
        let n = d.len();
        SparsePrecision {
            n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: d.to_vec(),
            rank_deficiency: 0,
        }
    }

    /// Keeps every entry that is not exactly zero.
    pub fn from_dense(a: &[Vec<T>]) -> Result<Self> {
        let n = a.len();
        let mut rows = vec![BTreeMap::new(); n];
        for (i, row) in a.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Dimension(format!("row {i} has length {} in a {n}x{n} matrix", row.len())));
            }
            for (j, &v) in row.iter().enumerate() {
                if v != T::zero() {
                    rows[i].insert(j, v);
                }
            }
        }
        Ok(Self::from_row_maps(n, rows))
    }

    pub fn to_dense(&self) -> Vec<Vec<T>> {
        let mut out = vec![vec![T::zero(); self.n]; self.n];
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                out[i][j] = v;
            }
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn rank_deficiency(&self) -> usize {
        self.rank_deficiency
    }

    pub fn with_rank_deficiency(mut self, k: usize) -> Self {
        self.rank_deficiency = k;
        self
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let r = self.indptr[i]..self.indptr[i + 1];
        self.indices[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    /// Position of `(i, j)` in the value array, if stored.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let lo = self.indptr[i];
        self.indices[lo..self.indptr[i + 1]].binary_search(&j).ok().map(|p| lo + p)
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.position(i, j).map_or(T::zero(), |p| self.values[p])
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.n, "vector length");
        (0..self.n).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()).collect()
    }

    pub fn quad_form(&self, x: &[T]) -> T {
        self.mul_vec(x).iter().zip(x).map(|(a, b)| *a * *b).sum()
    }

    pub fn scaled(&self, s: T) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v = *v * s);
        out
    }

    /// Entrywise sum; the pattern is the union of both patterns.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.n != other.n {
            return Err(Error::Dimension(format!("cannot add {}x{} and {}x{}", self.n, self.n, other.n, other.n)));
        }
        let mut rows = vec![BTreeMap::new(); self.n];
        for (i, row) in rows.iter_mut().enumerate() {
            for (j, v) in self.row(i).chain(other.row(i)) {
                let e = row.entry(j).or_insert_with(T::zero);
                *e = *e + v;
            }
        }
        Ok(Self::from_row_maps(self.n, rows).with_rank_deficiency(0))
    }

    pub fn add_diagonal(&self, d: T) -> Self {
        let mut rows: Vec<BTreeMap<usize, T>> = (0..self.n).map(|i| self.row(i).collect()).collect();
        for (i, row) in rows.iter_mut().enumerate() {
            let e = row.entry(i).or_insert_with(T::zero);
            *e = *e + d;
        }
        Self::from_row_maps(self.n, rows)
    }

    /// Kronecker product with index `a * other.dim() + b`.
    pub fn kron(&self, other: &Self) -> Self {
        let nb = other.n;
        let n = self.n * nb;
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for ia in 0..self.n {
            for ib in 0..nb {
                for (ja, va) in self.row(ia) {
                    for (jb, vb) in other.row(ib) {
                        indices.push(ja * nb + jb);
                        values.push(va * vb);
                    }
                }
                indptr.push(indices.len());
            }
        }
        SparsePrecision { n, indptr, indices, values, rank_deficiency: 0 }
    }

    /// Principal submatrix on `idx` (in the given order).
    pub fn submatrix(&self, idx: &[usize]) -> Self {
        let mut map = vec![usize::MAX; self.n];
        for (new, &old) in idx.iter().enumerate() {
            map[old] = new;
        }
        let rows = idx
            .iter()
            .map(|&old| {
                self.row(old)
                    .filter(|(j, _)| map[*j] != usize::MAX)
                    .map(|(j, v)| (map[j], v))
                    .collect::<BTreeMap<_, _>>()
            })
            .collect();
        Self::from_row_maps(idx.len(), rows)
    }

    /// Symmetry within a relative tolerance and strictly positive diagonal.
    pub fn validate(&self) -> Result<()> {
        let scale = self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        let tol = T::sym_tol() * scale.max(T::one());
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                if (v - self.get(j, i)).abs() > tol {
                    return Err(Error::InvalidMatrix(format!("asymmetric at ({i}, {j})")));
                }
            }
            if !(self.get(i, i) > T::zero()) {
                return Err(Error::InvalidMatrix(format!("diagonal entry {i} is not positive")));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> SparsePrecision<U> {
        SparsePrecision {
            n: self.n,
            indptr: self.indptr.clone(),
            indices: self.indices.clone(),
            values: self.values.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
            rank_deficiency: self.rank_deficiency,
        }
    }
}
