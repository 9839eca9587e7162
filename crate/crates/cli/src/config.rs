//! Run configuration: TOML file, then command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use mnagt::attention::Aggregator;
use mnagt::graph::{FeatureOptions, NormalizationKind};
use mnagt::model::{ModelConfig, Pooling};
use mnagt::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const DATA_DIR_ENV: &str = "MNAGT_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: String,
    pub dir: Option<PathBuf>,
    pub features: FeatureOptions,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { dataset: "NCI1".into(), dir: None, features: FeatureOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Data directory: flag, then config file, then `MNAGT_DATA_DIR`, then `data`.
    pub fn data_dir(&self) -> PathBuf {
        self.data
            .dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.data.dataset.is_empty() {
            return Err(CliError::Config("data.dataset: empty dataset name".into()));
        }
        self.model.validate().map_err(|e| CliError::Config(format!("model: {e}")))?;
        self.train.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        Ok(())
    }
}

/// Flags shared by every command that builds a model. Each one, when given,
/// replaces the value from the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML config file with [data], [model], [train] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<String>,
    /// Directory holding the TU-format files (defaults to $MNAGT_DATA_DIR).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Adjacency normalization: sym or rw.
    #[arg(long)]
    pub norm: Option<NormalizationKind>,
    /// Largest neighborhood hop c.
    #[arg(long)]
    pub c: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub head_dim: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// adaptive, sum, average or concat.
    #[arg(long)]
    pub aggregator: Option<Aggregator>,
    /// mean or sum.
    #[arg(long)]
    pub pooling: Option<Pooling>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    /// Comma-separated root seeds, e.g. 0,1,2.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub seeds: Option<Vec<u64>>,
    /// Output directory for metrics, summary and checkpoints.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl RunArgs {
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig { out: PathBuf::from("runs"), ..RunConfig::default() },
        };
        if cfg.out.as_os_str().is_empty() {
            cfg.out = PathBuf::from("runs");
        }
        macro_rules! set {
            ($flag:expr, $field:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        set!(self.dataset, cfg.data.dataset);
        if let Some(dir) = &self.data_dir {
            cfg.data.dir = Some(dir.clone());
        }
        set!(self.norm, cfg.model.norm);
        set!(self.c, cfg.model.mna.max_hop);
        set!(self.heads, cfg.model.mna.heads);
        set!(self.head_dim, cfg.model.mna.head_dim);
        set!(self.dim, cfg.model.mna.dim);
        set!(self.ffn_dim, cfg.model.ffn_dim);
        set!(self.layers, cfg.model.layers);
        set!(self.aggregator, cfg.model.mna.aggregator);
        set!(self.pooling, cfg.model.pooling);
        set!(self.dropout, cfg.model.mna.dropout);
        set!(self.lr, cfg.train.lr);
        set!(self.weight_decay, cfg.train.optimizer.weight_decay);
        set!(self.epochs, cfg.train.epochs);
        set!(self.batch_size, cfg.train.batch_size);
        if let Some(w) = self.warmup_steps {
            cfg.train.warmup_steps = Some(w);
        }
        set!(self.seeds, cfg.train.seeds);
        set!(self.out, cfg.out);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "out = \"elsewhere\"\n[model]\nlayers = 2\n[model.mna]\nmax_hop = 1\n[train]\nlr = 0.01\nseeds = [4]\n").unwrap();
        let args = RunArgs { config: Some(path), lr: Some(0.5), c: Some(2), ..RunArgs::default() };
        let cfg = args.resolve().unwrap();
        assert_eq!(cfg.model.layers, 2);
        assert_eq!(cfg.model.mna.max_hop, 2);
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.train.seeds, vec![4]);
        assert_eq!(cfg.out, PathBuf::from("elsewhere"));
        assert_eq!(cfg.model.mna.heads, 3);
    }

    #[test]
    fn bad_values_are_config_errors() {
        let args = RunArgs { dropout: Some(1.5), ..RunArgs::default() };
        assert_eq!(args.resolve().unwrap_err().exit_code(), 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[model]\nlayerz = 2\n").unwrap();
        let err = RunArgs { config: Some(path), ..RunArgs::default() }.resolve().unwrap_err();
        assert!(err.to_string().contains("layerz"), "{err}");
    }
}
