//! Compressed sparse row matrices.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// CSR matrix. Column indices are strictly increasing within each row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix<T> {
    rows: usize,
    cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> SparseMatrix<T> {
    pub fn new(
        rows: usize,
        cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        values: Vec<T>,
    ) -> Result<Self> {
        if row_offsets.len() != rows + 1 || row_offsets.first() != Some(&0) {
            return Err(Error::Data(format!(
                "row_offsets must have {} entries starting at 0",
                rows + 1
            )));
        }
        if row_offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Data("row_offsets must be nondecreasing".into()));
        }
        if *row_offsets.last().unwrap() != values.len() || col_indices.len() != values.len() {
            return Err(Error::Data("row_offsets, col_indices and values disagree in length".into()));
        }
        for r in 0..rows {
            let cols_in_row = &col_indices[row_offsets[r]..row_offsets[r + 1]];
            if cols_in_row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Data(format!("row {r}: column indices not strictly increasing")));
            }
            if cols_in_row.iter().any(|&c| c >= cols) {
                return Err(Error::Data(format!("row {r}: column index out of range")));
            }
        }
        Ok(Self { rows, cols, row_offsets, col_indices, values })
    }

    /// Build from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, T)>) -> Result<Self> {
        if let Some(&(r, c, _)) = triplets.iter().find(|&&(r, c, _)| r >= rows || c >= cols) {
            return Err(Error::Data(format!("entry ({r},{c}) outside {rows}x{cols}")));
        }
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_offsets = vec![0; rows + 1];
        let mut col_indices: Vec<usize> = Vec::with_capacity(triplets.len());
        let mut values: Vec<T> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            row_offsets[r + 1] += 1;
            col_indices.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for r in 0..rows {
            row_offsets[r + 1] += row_offsets[r];
        }
        Self::new(rows, cols, row_offsets, col_indices, values)
    }

    /// Block-diagonal stacking of square blocks.
    pub fn block_diagonal(blocks: &[&SparseMatrix<T>]) -> Self {
        let rows: usize = blocks.iter().map(|b| b.rows).sum();
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let nnz: usize = blocks.iter().map(|b| b.nnz()).sum();
        let mut row_offsets = Vec::with_capacity(rows + 1);
        let mut col_indices = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        row_offsets.push(0);
        let mut col_base = 0;
        for b in blocks {
            let base = values.len();
            row_offsets.extend(b.row_offsets[1..].iter().map(|o| o + base));
            col_indices.extend(b.col_indices.iter().map(|c| c + col_base));
            values.extend_from_slice(&b.values);
            col_base += b.cols;
        }
        Self { rows, cols, row_offsets, col_indices, values }
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

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Iterate `(col, value)` over the stored entries of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.row_offsets[r]..self.row_offsets[r + 1];
        self.col_indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        let span = self.row_offsets[r]..self.row_offsets[r + 1];
        match self.col_indices[span.clone()].binary_search(&c) {
            Ok(pos) => self.values[span.start + pos],
            Err(_) => T::zero(),
        }
    }

    pub fn to_dense(&self) -> Tensor<T> {
        let mut out = Tensor::zeros(&[self.rows, self.cols]);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out.set(r, c, v);
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> SparseMatrix<U> {
        SparseMatrix {
            rows: self.rows,
            cols: self.cols,
            row_offsets: self.row_offsets.clone(),
            col_indices: self.col_indices.clone(),
            values: self.values.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// `out = self * x` for a dense row-major `x` with `width` columns.
    pub(crate) fn spmm_into(&self, x: &[T], width: usize, out: &mut [T]) {
        debug_assert_eq!(x.len(), self.cols * width);
        debug_assert_eq!(out.len(), self.rows * width);
        for r in 0..self.rows {
            let dst = &mut out[r * width..(r + 1) * width];
            dst.iter_mut().for_each(|v| *v = T::zero());
            for (c, a) in self.row(r) {
                let src = &x[c * width..(c + 1) * width];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
    }

    /// `out += self^T * g` without materializing the transpose.
    pub(crate) fn spmm_t_acc(&self, g: &[T], width: usize, out: &mut [T]) {
        for r in 0..self.rows {
            let src = &g[r * width..(r + 1) * width];
            for (c, a) in self.row(r) {
                let dst = &mut out[c * width..(c + 1) * width];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
    }

    /// Untracked sparse-dense product.
    pub fn matmul_dense(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rows() != self.cols {
            return Err(Error::shape("spmm", &[self.rows, self.cols], x.shape()));
        }
        let width = x.cols();
        let mut out = vec![T::zero(); self.rows * width];
        self.spmm_into(x.data(), width, &mut out);
        Tensor::new(&[self.rows, width], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates_and_sort() {
        let m = SparseMatrix::<f64>::from_triplets(2, 3, vec![(1, 2, 1.0), (0, 1, 2.0), (1, 2, 0.5), (1, 0, 3.0)])
            .unwrap();
        assert_eq!(m.row_offsets(), &[0, 1, 3]);
        assert_eq!(m.col_indices(), &[1, 0, 2]);
        assert_eq!(m.values(), &[2.0, 3.0, 1.5]);
    }

    #[test]
    fn rejects_unsorted_columns() {
        assert!(SparseMatrix::<f64>::new(1, 3, vec![0, 2], vec![2, 1], vec![1.0, 1.0]).is_err());
        assert!(SparseMatrix::<f64>::new(1, 3, vec![0, 2], vec![1, 1], vec![1.0, 1.0]).is_err());
        assert!(SparseMatrix::<f64>::new(1, 3, vec![0, 3], vec![1], vec![1.0]).is_err());
    }

    #[test]
    fn block_diagonal_offsets() {
        let a = SparseMatrix::<f64>::from_triplets(2, 2, vec![(0, 0, 1.0), (1, 0, 2.0), (1, 1, 3.0)]).unwrap();
        let b = SparseMatrix::<f64>::from_triplets(1, 1, vec![(0, 0, 4.0)]).unwrap();
        let m = SparseMatrix::block_diagonal(&[&a, &b]);
        assert_eq!(m.rows(), 3);
        assert_eq!(m.get(2, 2), 4.0);
        assert_eq!(m.get(1, 0), 2.0);
        assert_eq!(m.get(2, 0), 0.0);
        assert_eq!(m.row_offsets(), &[0, 1, 3, 4]);
    }

    #[test]
    fn transpose_product_matches_dense() {
        let m = SparseMatrix::<f64>::from_triplets(2, 3, vec![(0, 1, 2.0), (1, 0, -1.0), (1, 2, 0.5)]).unwrap();
        let g = [1.0, 2.0, 3.0, 4.0];
        let mut out = vec![0.0; 6];
        m.spmm_t_acc(&g, 2, &mut out);
        let dense_t = m.to_dense().transpose();
        let expect = dense_t.matmul(&Tensor::new(&[2, 2], g.to_vec()).unwrap()).unwrap();
        assert_eq!(out, expect.data());
    }
}
