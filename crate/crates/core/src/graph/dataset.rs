//! TUDataset text-format reader and writer, dataset statistics and splitting.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Featurization used when a dataset ships without node labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum DegreeFeature {
    /// One column holding the node degree.
    #[default]
    Scalar,
    /// One-hot degree with degrees above `cap` sharing the last column.
    OneHot { cap: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureOptions {
    pub degree: DegreeFeature,
}

/// Locate `NAME_A.txt` either directly in `dir` or in `dir/NAME/`.
fn resolve_dir(dir: &Path, name: &str) -> PathBuf {
    let nested = dir.join(name);
    if !dir.join(format!("{name}_A.txt")).exists() && nested.join(format!("{name}_A.txt")).exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_int(path: &Path, line: usize, token: &str) -> Result<i64> {
    token.trim().parse::<i64>().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("expected an integer, found `{}`", token.trim()),
    })
}

/// One integer per non-empty line.
fn parse_column(path: &Path) -> Result<Vec<(usize, i64)>> {
    let text = read_file(path)?;
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        // Some distributions append extra comma-separated columns; the first is the label.
        let token = raw.split(',').next().unwrap_or("");
        out.push((idx + 1, parse_int(path, idx + 1, token)?));
    }
    Ok(out)
}

/// Contiguous `[0, C)` codes for the distinct values, in ascending value order.
fn remap(values: &[i64]) -> (Vec<usize>, usize) {
    let mut distinct: BTreeMap<i64, usize> = values.iter().map(|&v| (v, 0)).collect();
    for (i, code) in distinct.values_mut().enumerate() {
        *code = i;
    }
    (values.iter().map(|v| distinct[v]).collect(), distinct.len())
}

pub fn load_tudataset(dir: &Path, name: &str, opts: &FeatureOptions) -> Result<Vec<Graph>> {
    let dir = resolve_dir(dir, name);
    let file = |suffix: &str| dir.join(format!("{name}_{suffix}.txt"));
    let indicator_path = file("graph_indicator");
    let labels_path = file("graph_labels");
    let edges_path = file("A");
    let node_labels_path = file("node_labels");

    let indicator = parse_column(&indicator_path)?;
    let graph_labels: Vec<i64> = parse_column(&labels_path)?.into_iter().map(|(_, v)| v).collect();
    let num_graphs = graph_labels.len();
    let num_nodes = indicator.len();

    // Global node id -> (graph, local index).
    let mut owner = Vec::with_capacity(num_nodes);
    let mut sizes = vec![0usize; num_graphs];
    for &(line, gid) in &indicator {
        if gid < 1 || gid as usize > num_graphs {
            return Err(Error::Parse {
                path: indicator_path.clone(),
                line,
                message: format!("graph id {gid} outside 1..={num_graphs}"),
            });
        }
        let g = gid as usize - 1;
        owner.push((g, sizes[g]));
        sizes[g] += 1;
    }
    if let Some(empty) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Data(format!("graph {} has no nodes", empty + 1)));
    }

    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_graphs];
    let text = read_file(&edges_path)?;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut parts = raw.split(',');
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Parse {
                path: edges_path.clone(),
                line,
                message: "expected `i, j`".into(),
            });
        };
        let mut ends = [0usize; 2];
        for (slot, token) in ends.iter_mut().zip([a, b]) {
            let v = parse_int(&edges_path, line, token)?;
            if v < 1 || v as usize > num_nodes {
                return Err(Error::Data(format!(
                    "{}:{line}: node index {v} outside 1..={num_nodes}",
                    edges_path.display()
                )));
            }
            *slot = v as usize - 1;
        }
        let (ga, la) = owner[ends[0]];
        let (gb, lb) = owner[ends[1]];
        if ga != gb {
            return Err(Error::Data(format!(
                "{}:{line}: edge joins graphs {} and {}",
                edges_path.display(),
                ga + 1,
                gb + 1
            )));
        }
        edges[ga].push((la, lb));
    }

    let node_codes = if node_labels_path.exists() {
        let raw = parse_column(&node_labels_path)?;
        if raw.len() != num_nodes {
            return Err(Error::Data(format!(
                "{} has {} entries for {num_nodes} nodes",
                node_labels_path.display(),
                raw.len()
            )));
        }
        let values: Vec<i64> = raw.into_iter().map(|(_, v)| v).collect();
        Some(remap(&values))
    } else {
        None
    };

    let (labels, _) = remap(&graph_labels);
    let mut per_graph_nodes: Vec<Vec<usize>> = sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
    if let Some((codes, _)) = &node_codes {
        for (node, &(g, _)) in owner.iter().enumerate() {
            per_graph_nodes[g].push(codes[node]);
        }
    }

    let mut graphs = Vec::with_capacity(num_graphs);
    for g in 0..num_graphs {
        let n = sizes[g];
        let features = match &node_codes {
            Some((_, width)) => one_hot(&per_graph_nodes[g], *width),
            None => {
                let probe = Graph::new(n, &edges[g], Tensor::zeros(&[n, 1]), 0)?;
                degree_features(&probe.degrees(), opts.degree)
            }
        };
        let mut graph = Graph::new(n, &edges[g], features, labels[g])?;
        if node_codes.is_some() {
            graph = graph.with_node_labels(std::mem::take(&mut per_graph_nodes[g]))?;
        }
        graphs.push(graph);
    }
    Ok(graphs)
}

fn one_hot(codes: &[usize], width: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(&[codes.len(), width]);
    for (i, &c) in codes.iter().enumerate() {
        t.set(i, c, 1.0);
    }
    t
}

fn degree_features(degrees: &[usize], kind: DegreeFeature) -> Tensor<f64> {
    match kind {
        DegreeFeature::Scalar => {
            Tensor::new(&[degrees.len(), 1], degrees.iter().map(|&d| d as f64).collect()).expect("n x 1")
        }
        DegreeFeature::OneHot { cap } => {
            let codes: Vec<usize> = degrees.iter().map(|&d| d.min(cap)).collect();
            one_hot(&codes, cap + 1)
        }
    }
}

/// Write graphs in TUDataset layout. Graph labels are written as their
/// contiguous codes; node labels are written when every graph carries them.
pub fn write_tudataset(dir: &Path, name: &str, graphs: &[Graph]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let open = |suffix: &str| -> Result<(PathBuf, fs::File)> {
        let path = dir.join(format!("{name}_{suffix}.txt"));
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok((path, f))
    };
    let with_labels = !graphs.is_empty() && graphs.iter().all(|g| g.node_labels().is_some());

    let mut a = String::new();
    let mut indicator = String::new();
    let mut glabels = String::new();
    let mut nlabels = String::new();
    let mut base = 1;
    for (gi, g) in graphs.iter().enumerate() {
        for &(i, j) in g.edges() {
            a.push_str(&format!("{}, {}\n{}, {}\n", base + i, base + j, base + j, base + i));
        }
        for _ in 0..g.num_nodes() {
            indicator.push_str(&format!("{}\n", gi + 1));
        }
        glabels.push_str(&format!("{}\n", g.label()));
        if with_labels {
            for l in g.node_labels().unwrap_or(&[]) {
                nlabels.push_str(&format!("{l}\n"));
            }
        }
        base += g.num_nodes();
    }
    let mut files = vec![("A", a), ("graph_indicator", indicator), ("graph_labels", glabels)];
    if with_labels {
        files.push(("node_labels", nlabels));
    }
    for (suffix, body) in files {
        let (path, mut f) = open(suffix)?;
        f.write_all(body.as_bytes()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetStats {
    pub graphs: usize,
    pub classes: usize,
    pub feature_dim: usize,
    pub mean_nodes: f64,
    pub mean_edges: f64,
    pub max_nodes: usize,
    pub class_counts: Vec<usize>,
}

impl DatasetStats {
    pub fn compute(graphs: &[Graph]) -> Self {
        let count = graphs.len().max(1) as f64;
        let classes = graphs.iter().map(|g| g.label() + 1).max().unwrap_or(0);
        let mut class_counts = vec![0; classes];
        for g in graphs {
            class_counts[g.label()] += 1;
        }
        Self {
            graphs: graphs.len(),
            classes,
            feature_dim: graphs.first().map_or(0, Graph::feature_dim),
            mean_nodes: graphs.iter().map(|g| g.num_nodes() as f64).sum::<f64>() / count,
            mean_edges: graphs.iter().map(|g| g.edges().len() as f64).sum::<f64>() / count,
            max_nodes: graphs.iter().map(Graph::num_nodes).max().unwrap_or(0),
            class_counts,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1, test: 0.1 }
    }
}

/// Indices into the dataset for each part.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Shuffle `0..len` under `seed`, then take `floor(val * len)` for
/// validation, `floor(test * len)` for test, and the rest for training.
pub fn split_dataset(len: usize, ratios: SplitRatios, seed: u64) -> Result<DatasetSplit> {
    if len == 0 {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    let SplitRatios { train, val, test } = ratios;
    if [train, val, test].iter().any(|r| !(0.0..=1.0).contains(r)) || (train + val + test - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("split ratios {train}/{val}/{test} must be in [0,1] and sum to 1")));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (val * len as f64 + 1e-9).floor() as usize;
    let n_test = (test * len as f64 + 1e-9).floor() as usize;
    let n_train = len - n_val - n_test;
    let test_part = order.split_off(n_train + n_val);
    let val_part = order.split_off(n_train);
    Ok(DatasetSplit { train: order, val: val_part, test: test_part })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, suffix: &str, body: &str) {
        fs::write(dir.join(format!("{name}_{suffix}.txt")), body).unwrap();
    }

    fn fixture(dir: &Path, node_labels: bool) {
        // Triangle (nodes 1-3) and one edge (nodes 4-5).
        write(dir, "TOY", "A", "1, 2\n2, 1\n2,3\n3 ,2\n1, 3\n3, 1\n4, 5\n5, 4\n");
        write(dir, "TOY", "graph_indicator", "1\n1\n1\n2\n2\n");
        write(dir, "TOY", "graph_labels", "-1\n1\n");
        if node_labels {
            write(dir, "TOY", "node_labels", "3\n0\n3\n0\n7\n");
        }
    }

    #[test]
    fn loads_two_graph_fixture() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), true);
        let graphs = load_tudataset(dir.path(), "TOY", &FeatureOptions::default()).unwrap();
        assert_eq!(graphs.len(), 2);
        assert_eq!(graphs[0].num_nodes(), 3);
        assert_eq!(graphs[1].num_nodes(), 2);
        assert_eq!(graphs[0].edges(), &[(0, 1), (0, 2), (1, 2)]);
        assert_eq!(graphs[1].edges(), &[(0, 1)]);
        assert_eq!((graphs[0].label(), graphs[1].label()), (0, 1));
        // Node labels {0, 3, 7} become one-hot columns 0..3.
        assert_eq!(graphs[0].feature_dim(), 3);
        assert_eq!(graphs[0].features().row(0), &[0.0, 1.0, 0.0]);
        assert_eq!(graphs[1].features().row(1), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn missing_node_labels_falls_back_to_degree() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), false);
        let graphs = load_tudataset(dir.path(), "TOY", &FeatureOptions::default()).unwrap();
        assert_eq!(graphs[0].feature_dim(), 1);
        assert_eq!(graphs[0].features().data(), &[2.0, 2.0, 2.0]);
        let opts = FeatureOptions { degree: DegreeFeature::OneHot { cap: 1 } };
        let graphs = load_tudataset(dir.path(), "TOY", &opts).unwrap();
        assert_eq!(graphs[0].feature_dim(), 2);
        assert_eq!(graphs[0].features().row(0), &[0.0, 1.0]);
    }

    #[test]
    fn nested_directory_layout() {
        let dir = tempfile::tempdir().unwrap();
        let nested = dir.path().join("TOY");
        fs::create_dir(&nested).unwrap();
        fixture(&nested, true);
        assert_eq!(load_tudataset(dir.path(), "TOY", &FeatureOptions::default()).unwrap().len(), 2);
    }

    #[test]
    fn errors_name_the_problem() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), false);
        fs::remove_file(dir.path().join("TOY_graph_labels.txt")).unwrap();
        assert!(matches!(
            load_tudataset(dir.path(), "TOY", &FeatureOptions::default()),
            Err(Error::Io { .. })
        ));

        fixture(dir.path(), false);
        write(dir.path(), "TOY", "A", "1, 2\n2, x\n");
        match load_tudataset(dir.path(), "TOY", &FeatureOptions::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }

        write(dir.path(), "TOY", "A", "1, 9\n");
        assert!(matches!(
            load_tudataset(dir.path(), "TOY", &FeatureOptions::default()),
            Err(Error::Data(_))
        ));

        write(dir.path(), "TOY", "A", "1, 4\n");
        assert!(matches!(
            load_tudataset(dir.path(), "TOY", &FeatureOptions::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn write_then_load_round_trips_counts() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), true);
        let graphs = load_tudataset(dir.path(), "TOY", &FeatureOptions::default()).unwrap();
        let out = tempfile::tempdir().unwrap();
        write_tudataset(out.path(), "TOY", &graphs).unwrap();
        let again = load_tudataset(out.path(), "TOY", &FeatureOptions::default()).unwrap();
        assert_eq!(graphs, again);
    }

    #[test]
    fn split_sizes() {
        assert_eq!(split_dataset(10, SplitRatios::default(), 0).unwrap().sizes(), (8, 1, 1));
        assert_eq!(split_dataset(4110, SplitRatios::default(), 0).unwrap().sizes(), (3288, 411, 411));
        assert!(split_dataset(0, SplitRatios::default(), 0).is_err());
        let bad = SplitRatios { train: 0.5, val: 0.1, test: 0.1 };
        assert!(split_dataset(10, bad, 0).is_err());
    }

    #[test]
    fn split_is_deterministic_disjoint_and_exhaustive() {
        let a = split_dataset(97, SplitRatios::default(), 5).unwrap();
        assert_eq!(a, split_dataset(97, SplitRatios::default(), 5).unwrap());
        assert_ne!(a, split_dataset(97, SplitRatios::default(), 6).unwrap());
        let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..97).collect::<Vec<_>>());
    }

    #[test]
    fn stats_count_classes() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), true);
        let graphs = load_tudataset(dir.path(), "TOY", &FeatureOptions::default()).unwrap();
        let s = DatasetStats::compute(&graphs);
        assert_eq!((s.graphs, s.classes, s.max_nodes), (2, 2, 3));
        assert!((s.mean_nodes - 2.5).abs() < 1e-12);
        assert_eq!(s.class_counts, vec![1, 1]);
    }
}
