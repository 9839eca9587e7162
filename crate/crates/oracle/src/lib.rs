//! Brute-force reference implementations.
//!
//! Everything in this crate is deliberately naive: plain `f64` scalar loops over
//! a row-major [`DenseMatrix`]. Nothing here is shared with the optimized code
//! in `mnagt`, so agreement between the two is meaningful evidence.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("function value is not finite at parameter {index} (value {value})")]
    NonFinite { index: usize, value: f64 },
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// Row-major dense matrix in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows * cols != values.len() {
            return Err(OracleError::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, values: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(OracleError::Shape("ragged rows".into()));
            }
            values.extend_from_slice(row);
        }
        Self::new(r, c, values)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(OracleError::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = 0.0;
                for p in 0..self.cols {
                    acc += self.get(i, p) * other.get(p, j);
                }
                out.set(i, j, acc);
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// Columns `[start, start + width)` as a new matrix.
    pub fn columns(&self, start: usize, width: usize) -> Result<DenseMatrix> {
        if start + width > self.cols {
            return Err(OracleError::Shape(format!(
                "column range {start}..{} of {} columns",
                start + width,
                self.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, width);
        for i in 0..self.rows {
            for j in 0..width {
                out.set(i, j, self.get(i, start + j));
            }
        }
        Ok(out)
    }

    pub fn hcat(parts: &[DenseMatrix]) -> Result<DenseMatrix> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(OracleError::Shape("hcat row mismatch".into()));
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut out = DenseMatrix::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            for i in 0..rows {
                for j in 0..p.cols {
                    out.set(i, offset + j, p.get(i, j));
                }
            }
            offset += p.cols;
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(OracleError::Shape(format!(
                "compare {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Dense `D^{-1/2} (A + I) D^{-1/2}` (or `D^{-1} (A + I)` when `random_walk`)
/// from an undirected edge list.
pub fn dense_normalized_adjacency(
    n: usize,
    edges: &[(usize, usize)],
    random_walk: bool,
) -> Result<DenseMatrix> {
    let mut a = DenseMatrix::identity(n);
    for &(i, j) in edges {
        if i >= n || j >= n {
            return Err(OracleError::Shape(format!("edge ({i},{j}) outside {n} nodes")));
        }
        if i != j {
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
    }
    let deg: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a.get(i, j)).sum()).collect();
    let mut out = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let v = a.get(i, j);
            let scaled = if random_walk {
                v / deg[i]
            } else {
                v / (deg[i].sqrt() * deg[j].sqrt())
            };
            out.set(i, j, scaled);
        }
    }
    Ok(out)
}

/// `A^k H` by literal repeated dense multiplication.
pub fn dense_power_propagate(a: &DenseMatrix, h: &DenseMatrix, k: usize) -> Result<DenseMatrix> {
    if a.rows != a.cols || a.cols != h.rows {
        return Err(OracleError::Shape(format!(
            "propagate {}x{} over {}x{}",
            a.rows, a.cols, h.rows, h.cols
        )));
    }
    let mut power = DenseMatrix::identity(a.rows);
    for _ in 0..k {
        power = power.matmul(a)?;
    }
    power.matmul(h)
}

/// `softmax(q k^T / sqrt(d)) v` with an explicit double loop over node pairs.
///
/// `blocks` lists half-open node ranges; attention never crosses a range
/// boundary. Pass a single range covering all rows for an unmasked call.
pub fn naive_attention(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    blocks: &[(usize, usize)],
) -> Result<DenseMatrix> {
    if q.rows != k.rows || q.rows != v.rows || q.cols != k.cols {
        return Err(OracleError::Shape(format!(
            "attention q {}x{}, k {}x{}, v {}x{}",
            q.rows, q.cols, k.rows, k.cols, v.rows, v.cols
        )));
    }
    let scale = 1.0 / (q.cols as f64).sqrt();
    let mut out = DenseMatrix::zeros(q.rows, v.cols);
    for &(start, end) in blocks {
        if end > q.rows || start > end {
            return Err(OracleError::Shape(format!("block {start}..{end} of {} rows", q.rows)));
        }
        for i in start..end {
            let mut logits = Vec::with_capacity(end - start);
            for j in start..end {
                let mut dot = 0.0;
                for c in 0..q.cols {
                    dot += q.get(i, c) * k.get(j, c);
                }
                logits.push(dot * scale);
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for l in &logits {
                denom += (l - max).exp();
            }
            for (jj, j) in (start..end).enumerate() {
                let w = (logits[jj] - max).exp() / denom;
                for c in 0..v.cols {
                    let cur = out.get(i, c);
                    out.set(i, c, cur + w * v.get(j, c));
                }
            }
        }
    }
    Ok(out)
}

/// Weights of one head: query, key and value projections.
#[derive(Debug, Clone)]
pub struct HeadWeights {
    pub w_q: DenseMatrix,
    pub w_k: DenseMatrix,
    pub w_v: DenseMatrix,
}

/// Multi-head attention over a `(A^qk H, A^qk H, A^v H)` kernel, head by head.
pub fn naive_kernel_mha(
    h: &DenseMatrix,
    a: &DenseMatrix,
    qk_hops: usize,
    value_hops: usize,
    heads: &[HeadWeights],
    w_o: &DenseMatrix,
    blocks: &[(usize, usize)],
) -> Result<DenseMatrix> {
    let src_qk = dense_power_propagate(a, h, qk_hops)?;
    let src_v = dense_power_propagate(a, h, value_hops)?;
    let mut outs = Vec::with_capacity(heads.len());
    for head in heads {
        let q = src_qk.matmul(&head.w_q)?;
        let k = src_qk.matmul(&head.w_k)?;
        let v = src_v.matmul(&head.w_v)?;
        outs.push(naive_attention(&q, &k, &v, blocks)?);
    }
    DenseMatrix::hcat(&outs)?.matmul(w_o)
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn numerical_gradient<F>(mut f: F, params: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = params.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x);
        x[i] = orig - step;
        let minus = f(&x);
        x[i] = orig;
        for value in [plus, minus] {
            if !value.is_finite() {
                return Err(OracleError::NonFinite { index: i, value });
            }
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// `|a - b| / max(|a|, |b|)`, falling back to the absolute difference when both
/// magnitudes are below `floor`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < floor {
        (a - b).abs()
    } else {
        (a - b).abs() / denom
    }
}

/// Norm-wise relative error `||a - b|| / max(||a||, ||b||, floor)`.
pub fn relative_error_norm(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_zero_is_identity() {
        let a = DenseMatrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let h = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(dense_power_propagate(&a, &h, 0).unwrap(), h);
    }

    #[test]
    fn power_one_hand_product() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        let h = DenseMatrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let out = dense_power_propagate(&a, &h, 1).unwrap();
        assert_eq!(out.values, vec![3.0, 1.0]);
    }

    #[test]
    fn propagate_rejects_bad_shapes() {
        let a = DenseMatrix::zeros(2, 3);
        let h = DenseMatrix::zeros(3, 1);
        assert!(dense_power_propagate(&a, &h, 1).is_err());
    }

    #[test]
    fn attention_single_node_returns_value() {
        let q = DenseMatrix::from_rows(&[vec![0.3, -1.2]]).unwrap();
        let k = DenseMatrix::from_rows(&[vec![2.0, 0.1]]).unwrap();
        let v = DenseMatrix::from_rows(&[vec![7.0, -3.0, 0.5]]).unwrap();
        let out = naive_attention(&q, &k, &v, &[(0, 1)]).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn attention_uniform_logits_give_row_mean() {
        let q = DenseMatrix::zeros(3, 2);
        let k = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let v = DenseMatrix::from_rows(&[vec![1.0], vec![2.0], vec![6.0]]).unwrap();
        let out = naive_attention(&q, &k, &v, &[(0, 3)]).unwrap();
        for i in 0..3 {
            assert!((out.get(i, 0) - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_respects_blocks() {
        let q = DenseMatrix::zeros(3, 1);
        let k = DenseMatrix::zeros(3, 1);
        let v = DenseMatrix::from_rows(&[vec![1.0], vec![3.0], vec![10.0]]).unwrap();
        let out = naive_attention(&q, &k, &v, &[(0, 2), (2, 3)]).unwrap();
        assert_eq!(out.values, vec![2.0, 2.0, 10.0]);
    }

    #[test]
    fn numerical_gradient_of_square() {
        let g = numerical_gradient(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-7);
    }

    #[test]
    fn numerical_gradient_of_constant() {
        let g = numerical_gradient(|_| 4.2, &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn numerical_gradient_rejects_non_finite() {
        let err = numerical_gradient(|x| (x[0] - 1e-5).ln(), &[0.0], 1e-5).unwrap_err();
        assert!(matches!(err, OracleError::NonFinite { index: 0, .. }));
    }

    #[test]
    fn normalized_adjacency_path() {
        let a = dense_normalized_adjacency(3, &[(0, 1), (1, 2)], false).unwrap();
        assert!((a.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((a.get(0, 1) - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        assert!((a.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(a.get(0, 2), 0.0);
    }
}
