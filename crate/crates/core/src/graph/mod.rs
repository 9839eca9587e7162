//! Graph data model and adjacency normalization.

mod batch;
pub mod dataset;

use serde::{Deserialize, Serialize};

pub use batch::{make_batch, GraphBatch};
pub use dataset::{
    load_tudataset, split_dataset, write_tudataset, DatasetSplit, DatasetStats, DegreeFeature, FeatureOptions,
    SplitRatios,
};

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;
use crate::tensor::Tensor;

/// How `A + I` is normalized by the degree matrix `D` of `A + I`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizationKind {
    /// `D^{-1/2} (A + I) D^{-1/2}`
    #[default]
    #[serde(alias = "sym")]
    Symmetric,
    /// `D^{-1} (A + I)`
    #[serde(alias = "rw")]
    RandomWalk,
}

impl std::str::FromStr for NormalizationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sym" | "symmetric" => Ok(Self::Symmetric),
            "rw" | "randomwalk" | "random-walk" => Ok(Self::RandomWalk),
            other => Err(Error::Config(format!("unknown normalization `{other}` (expected sym or rw)"))),
        }
    }
}

/// Undirected, unweighted graph with node features and a class label.
///
/// Edges are stored once each as `(min, max)` pairs, sorted, without self loops.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    features: Tensor<f64>,
    label: usize,
    node_labels: Option<Vec<usize>>,
}

impl Graph {
    pub fn new(n: usize, edges: &[(usize, usize)], features: Tensor<f64>, label: usize) -> Result<Self> {
        if features.rows() != n || (features.shape().len() != 2 && n > 0) {
            return Err(Error::Data(format!(
                "feature matrix {:?} does not have {n} rows",
                features.shape()
            )));
        }
        let mut canon = Vec::with_capacity(edges.len());
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::Data(format!("edge ({i},{j}) outside a graph of {n} nodes")));
            }
            if i != j {
                canon.push((i.min(j), i.max(j)));
            }
        }
        canon.sort_unstable();
        canon.dedup();
        Ok(Self { n, edges: canon, features, label, node_labels: None })
    }

    pub fn with_node_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.n {
            return Err(Error::Data(format!("{} node labels for {} nodes", labels.len(), self.n)));
        }
        self.node_labels = Some(labels);
        Ok(self)
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Tensor<f64> {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn node_labels(&self) -> Option<&[usize]> {
        self.node_labels.as_deref()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    /// Relabel nodes so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.n];
        if perm.len() != self.n || perm.iter().any(|&p| p >= self.n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Data("not a permutation".into()));
        }
        let d = self.feature_dim();
        let mut feats = Tensor::zeros(&[self.n, d]);
        for (old, &new) in perm.iter().enumerate() {
            for c in 0..d {
                feats.set(new, c, self.features.get(old, c));
            }
        }
        let edges: Vec<_> = self.edges.iter().map(|&(i, j)| (perm[i], perm[j])).collect();
        let mut g = Graph::new(self.n, &edges, feats, self.label)?;
        if let Some(labels) = &self.node_labels {
            let mut new_labels = vec![0; self.n];
            for (old, &new) in perm.iter().enumerate() {
                new_labels[new] = labels[old];
            }
            g.node_labels = Some(new_labels);
        }
        Ok(g)
    }
}

/// Normalized adjacency with self loops, as a CSR matrix.
pub fn normalized_adjacency(g: &Graph, kind: NormalizationKind) -> SparseMatrix<f64> {
    let deg: Vec<f64> = g.degrees().iter().map(|&d| (d + 1) as f64).collect();
    let mut trip = Vec::with_capacity(g.n + 2 * g.edges.len());
    let weight = |i: usize, j: usize| match kind {
        NormalizationKind::Symmetric => 1.0 / (deg[i].sqrt() * deg[j].sqrt()),
        NormalizationKind::RandomWalk => 1.0 / deg[i],
    };
    for i in 0..g.n {
        trip.push((i, i, weight(i, i)));
    }
    for &(i, j) in &g.edges {
        trip.push((i, j, weight(i, j)));
        trip.push((j, i, weight(j, i)));
    }
    SparseMatrix::from_triplets(g.n, g.n, trip).expect("edges validated at construction")
}
