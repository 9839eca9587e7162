//! Training loop, evaluation and the multi-seed protocol.

mod optim;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{adamw_step, clip_grad_norm, lr_at, AdamWConfig, AdamWState, ScheduleKind};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::graph::{make_batch, split_dataset, Graph, SplitRatios};
use crate::model::{model_forward, predict, ModelConfig, ModelParams};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` means 10% of all optimizer steps.
    pub warmup_steps: Option<usize>,
    pub schedule: ScheduleKind,
    pub optimizer: AdamWConfig,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seeds: Vec<u64>,
    pub split: SplitRatios,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            epochs: 100,
            batch_size: 256,
            warmup_steps: None,
            schedule: ScheduleKind::Constant,
            optimizer: AdamWConfig::default(),
            clip_norm: Some(1.0),
            seeds: vec![0, 1, 2],
            split: SplitRatios::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.optimizer.weight_decay.is_nan() || self.optimizer.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self, train_len: usize) -> usize {
        self.epochs * train_len.div_ceil(self.batch_size)
    }

    pub fn warmup_for(&self, total_steps: usize) -> usize {
        self.warmup_steps.unwrap_or_else(|| (total_steps as f64 * 0.1).ceil() as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seed: u64,
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

/// Independent random streams derived from one root seed.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Split = 0,
    Init = 1,
    Shuffle = 2,
    Dropout = 3,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

fn check_nonempty(indices: &[usize], what: &str) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::Data(format!("{what} split is empty")));
    }
    Ok(())
}

/// Mean cross-entropy and accuracy in eval mode. Parameters are not touched.
pub fn evaluate(
    store: &ParamStore<f32>,
    params: &ModelParams,
    cfg: &ModelConfig,
    graphs: &[Graph],
    indices: &[usize],
    batch_size: usize,
) -> Result<EpochStats> {
    check_nonempty(indices, "evaluation")?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let refs: Vec<&Graph> = chunk.iter().map(|&i| &graphs[i]).collect();
        let batch = make_batch::<f32>(&refs, cfg.norm)?;
        let logits = predict(store, params, cfg, &batch)?;
        for (r, &label) in batch.labels.iter().enumerate() {
            let row = logits.row(r);
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max as f64 + row.iter().map(|&v| ((v - max) as f64).exp()).sum::<f64>().ln();
            loss += lse - row[label] as f64;
            // Ties resolve to the lowest class index.
            let pred = row.iter().enumerate().fold(0, |best, (c, &v)| if v > row[best] { c } else { best });
            correct += usize::from(pred == label);
        }
    }
    let n = indices.len() as f64;
    Ok(EpochStats { loss: loss / n, accuracy: correct as f64 / n })
}

/// Parameters, optimizer state and random streams of one training run.
pub struct Trainer {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub params: ModelParams,
    pub store: ParamStore<f32>,
    state: AdamWState<f32>,
    step: usize,
    total_steps: usize,
    warmup: usize,
    shuffle_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, train_cfg: TrainConfig, seed: u64, train_len: usize) -> Result<Self> {
        model_cfg.validate()?;
        train_cfg.validate()?;
        let (params, store) = ModelParams::init::<f32, _>(&model_cfg, &mut stream_rng(seed, Stream::Init))?;
        let total_steps = train_cfg.total_steps(train_len);
        let warmup = train_cfg.warmup_for(total_steps);
        Ok(Self {
            state: AdamWState::new(store.tensors()),
            params,
            store,
            step: 0,
            total_steps,
            warmup,
            shuffle_rng: stream_rng(seed, Stream::Shuffle),
            dropout_rng: stream_rng(seed, Stream::Dropout),
            model_cfg,
            train_cfg,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        lr_at(self.step.max(1), self.train_cfg.lr, self.warmup, self.total_steps, self.train_cfg.schedule)
    }

    /// One pass over `indices` in a freshly shuffled order.
    pub fn train_epoch(&mut self, graphs: &[Graph], indices: &[usize]) -> Result<EpochStats> {
        check_nonempty(indices, "training")?;
        let mut order = indices.to_vec();
        order.shuffle(&mut self.shuffle_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(self.train_cfg.batch_size) {
            let refs: Vec<&Graph> = chunk.iter().map(|&i| &graphs[i]).collect();
            let batch = make_batch::<f32>(&refs, self.model_cfg.norm)?;
            let mut tape = Tape::new();
            let bound = self.store.bind(&mut tape, true);
            let out = model_forward(&mut tape, &bound, &batch, &self.model_cfg, &self.params, Some(&mut self.dropout_rng))?;
            let loss = tape.cross_entropy(out.logits, &batch.labels)?;
            let loss_value = tape.value(loss).item() as f64;
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss at step {}", self.step + 1)));
            }
            let logits = tape.value(out.logits);
            for (r, &label) in batch.labels.iter().enumerate() {
                let row = logits.row(r);
                let pred = row.iter().enumerate().fold(0, |best, (c, &v)| if v > row[best] { c } else { best });
                correct += usize::from(pred == label);
            }
            loss_sum += loss_value * chunk.len() as f64;

            let mut grads = tape.backward(loss)?;
            let mut grads = self.store.collect_grads(&bound, &mut grads);
            if let Some(max) = self.train_cfg.clip_norm {
                clip_grad_norm(&mut grads, max);
            }
            self.step += 1;
            let lr = self.current_lr();
            adamw_step(self.store.tensors_mut(), &grads, &mut self.state, &self.train_cfg.optimizer, lr, self.step as u64)?;
        }
        let n = indices.len() as f64;
        Ok(EpochStats { loss: loss_sum / n, accuracy: correct as f64 / n })
    }

    pub fn evaluate(&self, graphs: &[Graph], indices: &[usize]) -> Result<EpochStats> {
        evaluate(&self.store, &self.params, &self.model_cfg, graphs, indices, self.train_cfg.batch_size)
    }
}

/// Outcome of one seed, with the parameters of its best validation epoch.
#[derive(Debug, Clone, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub best_epoch: usize,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub test_loss: f64,
    #[serde(skip)]
    pub best_store: ParamStore<f32>,
}

/// Train one seed on its own split, keeping the best validation epoch
/// (earliest on ties), and report test metrics of that epoch's parameters.
pub fn run_seed(
    graphs: &[Graph],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<SeedResult> {
    let split = split_dataset(graphs.len(), train_cfg.split, stream_split_seed(seed))?;
    check_nonempty(&split.train, "training")?;
    check_nonempty(&split.val, "validation")?;
    check_nonempty(&split.test, "test")?;
    let mut trainer = Trainer::new(model_cfg.clone(), train_cfg.clone(), seed, split.train.len())?;
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    for epoch in 1..=train_cfg.epochs {
        let start = Instant::now();
        let train = trainer.train_epoch(graphs, &split.train)?;
        let lr = trainer.current_lr();
        sink(&MetricsRecord {
            seed,
            epoch,
            split: Split::Train,
            loss: train.loss,
            accuracy: train.accuracy,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        })?;
        let start = Instant::now();
        let val = trainer.evaluate(graphs, &split.val)?;
        sink(&MetricsRecord {
            seed,
            epoch,
            split: Split::Val,
            loss: val.loss,
            accuracy: val.accuracy,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        })?;
        if best.as_ref().is_none_or(|(_, acc, _)| val.accuracy > *acc) {
            best = Some((epoch, val.accuracy, trainer.store.clone()));
        }
    }
    let (best_epoch, val_accuracy, best_store) = best.expect("at least one epoch");
    let start = Instant::now();
    let test = evaluate(&best_store, &trainer.params, model_cfg, graphs, &split.test, train_cfg.batch_size)?;
    sink(&MetricsRecord {
        seed,
        epoch: best_epoch,
        split: Split::Test,
        loss: test.loss,
        accuracy: test.accuracy,
        lr: trainer.current_lr(),
        seconds: start.elapsed().as_secs_f64(),
    })?;
    Ok(SeedResult {
        seed,
        best_epoch,
        val_accuracy,
        test_accuracy: test.accuracy,
        test_loss: test.loss,
        best_store,
    })
}

fn stream_split_seed(seed: u64) -> u64 {
    use rand::RngCore;
    stream_rng(seed, Stream::Split).next_u64()
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub parameter_count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    /// Mean test accuracy over seeds.
    pub mean: f64,
    /// Population standard deviation of test accuracy over seeds.
    pub std: f64,
    pub per_seed: Vec<SeedResult>,
    pub config: ExperimentConfig,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Every seed of `train_cfg.seeds` in turn, summarized as mean ± std of
/// test accuracy.
pub fn run_experiment(
    graphs: &[Graph],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<ExperimentSummary> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let mut per_seed = Vec::with_capacity(train_cfg.seeds.len());
    for &seed in &train_cfg.seeds {
        per_seed.push(run_seed(graphs, model_cfg, train_cfg, seed, sink)?);
    }
    let accs: Vec<f64> = per_seed.iter().map(|r| r.test_accuracy).collect();
    let (mean, std) = mean_std(&accs);
    let parameter_count = per_seed[0].best_store.scalar_count();
    Ok(ExperimentSummary {
        mean,
        std,
        per_seed,
        config: ExperimentConfig { model: model_cfg.clone(), train: train_cfg.clone(), parameter_count },
    })
}

#[cfg(test)]
mod tests;
