use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mnagt::attention::Aggregator;
use mnagt::autodiff::inject_backward_fault;
use mnagt::checkpoint::save_checkpoint;
use mnagt::graph::{load_tudataset, DatasetStats, Graph};
use mnagt::model::{parameter_count, ModelConfig, ModelParams};
use mnagt::train::{run_experiment, stream_rng, ExperimentSummary, MetricsRecord, Split, Stream};
use mnagt::verify::{self, Check, OP_NAMES};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

fn io_err(path: &Path, source: std::io::Error) -> mnagt::Error {
    mnagt::Error::Io { path: path.to_path_buf(), source }
}

pub fn load_dataset(cfg: &RunConfig) -> CliResult<(Vec<Graph>, DatasetStats)> {
    let dir = cfg.data_dir();
    if !dir.is_dir() {
        return Err(CliError::Data(format!("data directory {} does not exist", dir.display())));
    }
    let graphs = load_tudataset(&dir, &cfg.data.dataset, &cfg.data.features)?;
    if graphs.is_empty() {
        return Err(CliError::Data(format!("{} in {} contains no graphs", cfg.data.dataset, dir.display())));
    }
    let stats = DatasetStats::compute(&graphs);
    Ok((graphs, stats))
}

/// The configured model with input width and class count taken from the data.
fn fitted_model(cfg: &RunConfig, stats: &DatasetStats) -> CliResult<ModelConfig> {
    if stats.classes < 2 {
        return Err(CliError::Data(format!("{} has a single class; nothing to classify", cfg.data.dataset)));
    }
    let model = ModelConfig { in_dim: stats.feature_dim, num_classes: stats.classes, ..cfg.model.clone() };
    model.validate()?;
    Ok(model)
}

struct MetricsFile {
    path: PathBuf,
    writer: BufWriter<File>,
}

impl MetricsFile {
    fn create(path: PathBuf) -> CliResult<Self> {
        let file = File::create(&path).map_err(|e| io_err(&path, e))?;
        Ok(Self { path, writer: BufWriter::new(file) })
    }

    fn write(&mut self, record: &MetricsRecord) -> mnagt::Result<()> {
        let line = serde_json::to_string(record).map_err(|e| mnagt::Error::Numeric(e.to_string()))?;
        writeln!(self.writer, "{line}").map_err(|e| io_err(&self.path, e))
    }

    fn finish(mut self) -> CliResult<()> {
        self.writer.flush().map_err(|e| io_err(&self.path, e).into())
    }
}

fn log_progress(record: &MetricsRecord) {
    match record.split {
        Split::Train => eprint!(
            "seed {} epoch {:>3}  lr {:.2e}  train loss {:.4} acc {:.4}",
            record.seed, record.epoch, record.lr, record.loss, record.accuracy
        ),
        Split::Val => eprintln!("  val loss {:.4} acc {:.4}", record.loss, record.accuracy),
        Split::Test => eprintln!("seed {} test loss {:.4} acc {:.4}", record.seed, record.loss, record.accuracy),
    }
}

/// Train every seed, writing metrics as they arrive to `dir/metrics.jsonl`.
fn run_into(dir: &Path, graphs: &[Graph], model: &ModelConfig, cfg: &RunConfig) -> CliResult<ExperimentSummary> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut metrics = MetricsFile::create(dir.join("metrics.jsonl"))?;
    let summary = run_experiment(graphs, model, &cfg.train, &mut |r| {
        log_progress(r);
        metrics.write(r)
    })?;
    metrics.finish()?;
    for result in &summary.per_seed {
        save_checkpoint(&dir.join(format!("seed{}.checkpoint.json", result.seed)), model, &result.best_store)?;
    }
    Ok(summary)
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    run: RunConfig,
    dataset: &'a DatasetStats,
    mean: f64,
    std: f64,
    parameter_count: usize,
    per_seed: &'a [mnagt::train::SeedResult],
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e).into())
}

/// Config echo with everything the run actually used filled in.
fn effective(cfg: &RunConfig, model: &ModelConfig) -> RunConfig {
    let mut run = cfg.clone();
    run.model = model.clone();
    run.data.dir = Some(cfg.data_dir());
    run
}

pub fn train(cfg: &RunConfig) -> CliResult<()> {
    let (graphs, stats) = load_dataset(cfg)?;
    let model = fitted_model(cfg, &stats)?;
    let summary = run_into(&cfg.out, &graphs, &model, cfg)?;
    let file = SummaryFile {
        run: effective(cfg, &model),
        dataset: &stats,
        mean: summary.mean,
        std: summary.std,
        parameter_count: summary.config.parameter_count,
        per_seed: &summary.per_seed,
    };
    write_json(&cfg.out.join("summary.json"), &file)?;
    println!(
        "{}: test accuracy {:.4} ± {:.4} over {} seed(s), {} parameters",
        cfg.data.dataset,
        summary.mean,
        summary.std,
        summary.per_seed.len(),
        summary.config.parameter_count
    );
    println!("wrote {}", cfg.out.display());
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    aggregator: &'static str,
    mean: f64,
    std: f64,
    parameter_count: usize,
    per_seed: Vec<f64>,
}

#[derive(Serialize)]
struct AblationFile {
    run: RunConfig,
    seeds: Vec<u64>,
    rows: Vec<AblationRow>,
}

pub fn ablate(cfg: &RunConfig) -> CliResult<()> {
    let (graphs, stats) = load_dataset(cfg)?;
    let base = fitted_model(cfg, &stats)?;
    let seeds = cfg.train.seeds.clone();
    let seed_list = seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
    eprintln!("ablating aggregators on {} with seeds {seed_list}", cfg.data.dataset);
    let mut rows = Vec::new();
    for aggregator in Aggregator::ALL {
        let mut model = base.clone();
        model.mna.aggregator = aggregator;
        let summary = run_into(&cfg.out.join(aggregator.name()), &graphs, &model, cfg)?;
        rows.push(AblationRow {
            aggregator: aggregator.name(),
            mean: summary.mean,
            std: summary.std,
            parameter_count: summary.config.parameter_count,
            per_seed: summary.per_seed.iter().map(|r| r.test_accuracy).collect(),
        });
    }
    println!("seeds: {seed_list}");
    println!("{:<12} {:>8} {:>8} {:>10}", "aggregator", "mean", "std", "params");
    for row in &rows {
        println!("{:<12} {:>8.4} {:>8.4} {:>10}", row.aggregator, row.mean, row.std, row.parameter_count);
    }
    write_json(&cfg.out.join("ablation.json"), &AblationFile { run: effective(cfg, &base), seeds, rows })?;
    Ok(())
}

pub fn inspect(cfg: &RunConfig, params: bool) -> CliResult<()> {
    let (_, stats) = load_dataset(cfg)?;
    println!("dataset       {}", cfg.data.dataset);
    println!("graphs        {}", stats.graphs);
    println!("classes       {}", stats.classes);
    for (class, count) in stats.class_counts.iter().enumerate() {
        println!("  class {class:<5} {count}");
    }
    println!("avg nodes     {:.2}", stats.mean_nodes);
    println!("avg edges     {:.2}", stats.mean_edges);
    println!("max nodes     {}", stats.max_nodes);
    println!("feature dim   {}", stats.feature_dim);
    if params {
        let model = fitted_model(cfg, &stats)?;
        let (_, store) = ModelParams::init::<f32, _>(&model, &mut stream_rng(0, Stream::Init))?;
        println!("parameters    {}", parameter_count(&store));
    }
    Ok(())
}

fn print_checks(checks: &[Check]) {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
    println!("{:<10} {:<width$} {:>10} {:>10} {:>10}  status", "suite", "check", "max error", "tolerance", "elementwise");
    for c in checks {
        let elem = c.elementwise.map_or_else(|| "-".to_string(), |e| format!("{e:.2e}"));
        let status = if c.passed { "ok" } else { "FAIL" };
        println!("{:<10} {:<width$} {:>10.2e} {:>10.2e} {:>10}  {status}", c.suite, c.name, c.max_error, c.tolerance, elem);
    }
}

fn with_fault<T>(fault: Option<&str>, f: impl FnOnce() -> mnagt::Result<T>) -> CliResult<T> {
    let op = match fault {
        None => None,
        Some(name) => Some(
            *OP_NAMES
                .iter()
                .find(|&&op| op == name)
                .ok_or_else(|| CliError::Config(format!("--inject-fault: unknown op `{name}`")))?,
        ),
    };
    inject_backward_fault(op);
    let out = f();
    inject_backward_fault(None);
    Ok(out?)
}

fn finish_report(checks: &[Check], json: Option<&Path>) -> CliResult<()> {
    print_checks(checks);
    if let Some(path) = json {
        write_json(path, &checks)?;
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", checks.len());
        Ok(())
    } else {
        Err(CliError::Verify(format!("{} check(s) failed: {}", failed.len(), failed.join(", "))))
    }
}

pub fn gradcheck(fault: Option<&str>, json: Option<&Path>) -> CliResult<()> {
    let checks = with_fault(fault, verify::gradient_suite)?;
    finish_report(&checks, json)
}

pub fn verify(trials: usize, seed: u64, fault: Option<&str>, json: Option<&Path>) -> CliResult<()> {
    if trials == 0 {
        return Err(CliError::Config("--trials must be positive".into()));
    }
    let report = with_fault(fault, || verify::run_all(trials, seed))?;
    finish_report(&report.checks, json)
}
