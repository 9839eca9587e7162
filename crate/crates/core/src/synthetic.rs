//! Small generated datasets for tests and smoke runs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::Graph;
use crate::tensor::Tensor;

/// Erdős–Rényi graph with standard-normal node features.
pub fn random_graph<R: Rng + ?Sized>(n: usize, edge_prob: f64, feature_dim: usize, label: usize, rng: &mut R) -> Graph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen::<f64>() < edge_prob {
                edges.push((i, j));
            }
        }
    }
    Graph::new(n, &edges, Tensor::randn(&[n, feature_dim], rng), label).expect("edges in range")
}

/// `count` graphs, half triangles (label 0) and half 3-node paths (label 1),
/// in shuffled order. Every node carries the constant feature 1, so only
/// structure separates the classes.
pub fn triangles_vs_paths(count: usize, seed: u64) -> Vec<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graphs: Vec<Graph> = (0..count)
        .map(|i| {
            let (edges, label): (&[(usize, usize)], usize) =
                if i % 2 == 0 { (&[(0, 1), (1, 2), (0, 2)], 0) } else { (&[(0, 1), (1, 2)], 1) };
            Graph::new(3, edges, Tensor::ones(&[3, 1]), label).expect("fixed shapes")
        })
        .collect();
    graphs.shuffle(&mut rng);
    graphs
}

/// `count` random graphs labelled by whether their edge count exceeds the
/// expected count, with Gaussian node features.
pub fn random_dataset(count: usize, max_nodes: usize, feature_dim: usize, seed: u64) -> Vec<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.gen_range(2..=max_nodes.max(2));
            let g = random_graph(n, 0.4, feature_dim, 0, &mut rng);
            let expected = 0.4 * (n * (n - 1) / 2) as f64;
            let label = usize::from(g.edges().len() as f64 > expected);
            Graph::new(n, g.edges(), g.features().clone(), label).expect("same graph")
        })
        .collect()
}
