//! Small dense Cholesky used for constraint systems (k × k with k rarely above a few dozen).

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone)]
pub struct DenseCholesky<T: Real> {
    n: usize,
    l: Vec<T>,
}

impl<T: Real> DenseCholesky<T> {
    pub fn new(a: &[Vec<T>]) -> Result<Self> {
        let n = a.len();
        let mut l = vec![T::zero(); n * n];
        for i in 0..n {
            if a[i].len() != n {
                return Err(Error::Dimension("dense matrix is not square".into()));
            }
            for j in 0..=i {
                let mut s = a[i][j];
                for k in 0..j {
                    s = s - l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if !(s > T::zero()) || !s.is_finite() {
                        return Err(Error::NotPositiveDefinite { pivot: i, index: i, value: s.to_f64_lossy() });
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Ok(DenseCholesky { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn log_det(&self) -> T {
        let two = T::one() + T::one();
        two * (0..self.n).map(|i| self.l[i * self.n + i].ln()).sum::<T>()
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s = s - self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s = s - self.l[k * n + i] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        y
    }

    pub fn inverse(&self) -> Vec<Vec<T>> {
        let n = self.n;
        let mut out = vec![vec![T::zero(); n]; n];
        for j in 0..n {
            let mut e = vec![T::zero(); n];
            e[j] = T::one();
            for (i, v) in self.solve(&e).into_iter().enumerate() {
                out[i][j] = v;
            }
        }
        out
    }
}
