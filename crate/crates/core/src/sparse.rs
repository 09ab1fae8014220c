//! Compressed sparse row matrices for graph operators.

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

/// Square or rectangular CSR matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix<T> {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> CsrMatrix<T> {
    /// Builds from `(row, col, value)` triplets. Duplicates are summed and
    /// exact zeros dropped; column order within a row is ascending.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, T)]) -> Result<Self> {
        let mut sorted: Vec<(usize, usize, T)> = Vec::with_capacity(triplets.len());
        for &(r, c, v) in triplets {
            if r >= rows || c >= cols {
                return Err(dim_err!("triplet ({r}, {c}) outside {rows}x{cols} matrix"));
            }
            sorted.push((r, c, v));
        }
        sorted.sort_by_key(|a| (a.0, a.1));

        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<T> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            last = Some((r, c));
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        let mut m = CsrMatrix {
            rows,
            cols,
            indptr,
            indices,
            values,
        };
        m.prune_zeros();
        Ok(m)
    }

    pub fn from_dense(rows: usize, cols: usize, dense: &[T]) -> Result<Self> {
        if dense.len() != rows * cols {
            return Err(dim_err!(
                "dense buffer of {} elements is not {rows}x{cols}",
                dense.len()
            ));
        }
        let triplets: Vec<_> = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r, c)))
            .filter_map(|(r, c)| {
                let v = dense[r * cols + c];
                (v != T::zero()).then_some((r, c, v))
            })
            .collect();
        Self::from_triplets(rows, cols, &triplets)
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![T::one(); n],
        }
    }

    fn prune_zeros(&mut self) {
        let mut indptr = vec![0usize; self.rows + 1];
        let mut indices = Vec::with_capacity(self.indices.len());
        let mut values = Vec::with_capacity(self.values.len());
        for r in 0..self.rows {
            for p in self.indptr[r]..self.indptr[r + 1] {
                if self.values[p] != T::zero() {
                    indices.push(self.indices[p]);
                    values.push(self.values[p]);
                }
            }
            indptr[r + 1] = indices.len();
        }
        self.indptr = indptr;
        self.indices = indices;
        self.values = values;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates `(col, value)` over the stored entries of `row`.
    pub fn row(&self, row: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.indptr[row]..self.indptr[row + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        let span = self.indptr[row]..self.indptr[row + 1];
        match self.indices[span.clone()].binary_search(&col) {
            Ok(p) => self.values[span.start + p],
            Err(_) => T::zero(),
        }
    }

    pub fn to_dense(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows * self.cols];
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out[r * self.cols + c] = v;
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let triplets: Vec<_> = (0..self.rows)
            .flat_map(|r| self.row(r).map(move |(c, v)| (c, r, v)))
            .collect();
        Self::from_triplets(self.cols, self.rows, &triplets).expect("transpose indices in range")
    }

    /// Converts the stored values to another scalar type.
    pub fn cast<U: Scalar>(&self) -> CsrMatrix<U> {
        let mut out = CsrMatrix {
            rows: self.rows,
            cols: self.cols,
            indptr: self.indptr.clone(),
            indices: self.indices.clone(),
            values: self.values.iter().map(|v| U::of(v.as_f64())).collect(),
        };
        out.prune_zeros();
        out
    }

    /// Maps every stored value, keeping the sparsity pattern.
    pub fn map_values(&self, f: impl Fn(usize, usize, T) -> T) -> Self {
        let mut out = self.clone();
        for r in 0..self.rows {
            for p in self.indptr[r]..self.indptr[r + 1] {
                out.values[p] = f(r, self.indices[p], self.values[p]);
            }
        }
        out.prune_zeros();
        out
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|r| self.row(r).all(|(c, v)| (v - self.get(c, r)).abs() <= tol))
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.cols {
            return Err(dim_err!(
                "matvec of {}x{} matrix with vector of length {}",
                self.rows,
                self.cols,
                x.len()
            ));
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).fold(T::zero(), |acc, (c, v)| acc + v * x[c]))
            .collect())
    }

    /// `out[r, :] += Σ_c A[r, c] · x[c, :]` for row-major `x` with `width` columns.
    pub(crate) fn accumulate_rows(&self, x: &[T], out: &mut [T], width: usize) {
        debug_assert_eq!(x.len(), self.cols * width);
        debug_assert_eq!(out.len(), self.rows * width);
        for r in 0..self.rows {
            let dst = &mut out[r * width..(r + 1) * width];
            for (c, v) in self.row(r) {
                let src = &x[c * width..(c + 1) * width];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
    }
}
