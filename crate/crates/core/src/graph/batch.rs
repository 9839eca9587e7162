use std::sync::Arc;

use super::{normalized_adjacency, Graph, NormalizationKind};
use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;
use crate::tensor::{Scalar, Tensor};

/// Several graphs stacked block-diagonally.
///
/// Rows `offsets[b]..offsets[b + 1]` of `features` and of `a_hat` belong to
/// graph `b`; no operation mixes rows across blocks.
#[derive(Debug, Clone)]
pub struct GraphBatch<T> {
    pub features: Tensor<T>,
    pub offsets: Arc<[usize]>,
    pub a_hat: Arc<SparseMatrix<T>>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> GraphBatch<T> {
    pub fn num_graphs(&self) -> usize {
        self.labels.len()
    }

    pub fn num_nodes(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }
}

pub fn make_batch<T: Scalar>(graphs: &[&Graph], norm: NormalizationKind) -> Result<GraphBatch<T>> {
    let Some(first) = graphs.first() else {
        return Err(Error::Data("cannot batch an empty list of graphs".into()));
    };
    let d = first.feature_dim();
    let total: usize = graphs.iter().map(|g| g.num_nodes()).sum();
    let mut features = Vec::with_capacity(total * d);
    let mut offsets = Vec::with_capacity(graphs.len() + 1);
    let mut blocks = Vec::with_capacity(graphs.len());
    offsets.push(0);
    for g in graphs {
        if g.feature_dim() != d {
            return Err(Error::Data(format!(
                "feature dimension mismatch in batch: {} vs {}",
                g.feature_dim(),
                d
            )));
        }
        if g.num_nodes() == 0 {
            return Err(Error::Data("cannot batch a graph with no nodes".into()));
        }
        features.extend(g.features().data().iter().map(|&v| T::from_f64(v)));
        offsets.push(offsets.last().unwrap() + g.num_nodes());
        blocks.push(normalized_adjacency(g, norm));
    }
    let refs: Vec<&SparseMatrix<f64>> = blocks.iter().collect();
    let a_hat = SparseMatrix::block_diagonal(&refs).cast::<T>();
    Ok(GraphBatch {
        features: Tensor::new(&[total, d], features)?,
        offsets: offsets.into(),
        a_hat: Arc::new(a_hat),
        labels: graphs.iter().map(|g| g.label()).collect(),
    })
}
