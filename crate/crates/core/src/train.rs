//! Config-driven training runs and their metrics.
//!
//! A run writes into its output directory:
//!
//! * `metrics.jsonl`: one [`MetricsRecord`] per epoch. Deterministic for a
//!   given config and seed.
//! * `timing.jsonl`: wall-clock step times per epoch ([`TimingRecord`]).
//! * `params.json`: final flattened parameters.
//! * optional `trajectory.csv`, `fim_stats.csv`, `mae.csv`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{DataSource, Dataset};
use crate::diagnostics::{fim_hist_stats, write_fim_stats_csv, FimStatsRow, TrajectoryLog};
use crate::distributed::{AggregateEmaMode, DistributedTrainer};
use crate::error::{bail, Result};
use crate::fisher::{exact_fisher_diag, kf_product_diag, layer_mae, write_mae_csv, MaeRecord};
use crate::kfactor::BlockKind;
use crate::nn::{LayerSpec, Loss, Mode, Model, Targets};
use crate::optim::{Optimizer, OptimizerConfig, Schedule};
use crate::rng::Rng;

/// Environment variable naming the root for relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "ADAFISHER_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Keep only the first `limit` samples before splitting.
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Seed of the train/eval shuffle; the run seed when absent.
    #[serde(default)]
    pub split_seed: Option<u64>,
    /// Per-sample shape to reinterpret inputs as, e.g. `[1, 8, 8]`.
    #[serde(default)]
    pub shape: Option<Vec<usize>>,
}

fn default_train_fraction() -> f64 {
    0.8
}

fn one() -> usize {
    1
}

/// Everything a run needs. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Vec<LayerSpec>,
    /// Cross entropy for labelled data, MSE for real targets when absent.
    #[serde(default)]
    pub loss: Option<Loss>,
    pub data: DataConfig,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default)]
    pub aggregate_ema_mode: AggregateEmaMode,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Record the first two weights of the first layer and the loss per epoch.
    #[serde(default)]
    pub trajectory: bool,
    /// Summarize the preconditioner diagonal per layer each epoch.
    #[serde(default)]
    pub fim_stats: bool,
    /// Compare raw Kronecker products against the exact Fisher on this many
    /// eval samples each epoch.
    #[serde(default)]
    pub fisher_mae_samples: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg = Self::from_json(&fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Checks every invariant that does not need the data.
    pub fn validate(&self) -> Result<()> {
        if self.model.is_empty() {
            bail!(Config, "model has no layers");
        }
        if self.epochs == 0 {
            bail!(Config, "epochs must be at least 1");
        }
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be at least 1");
        }
        if self.workers == 0 {
            bail!(Config, "workers must be at least 1");
        }
        if self.workers > self.batch_size {
            bail!(Config, "{} workers for batches of {}", self.workers, self.batch_size);
        }
        if self.fisher_mae_samples == Some(0) {
            bail!(Config, "fisher_mae_samples must be positive");
        }
        self.optimizer.validate()?;
        self.schedule.validate()?;
        for p in self.data.source.paths() {
            if !p.is_file() {
                bail!(Config, "data file {} does not exist", p.display());
            }
        }
        Ok(())
    }

    /// Output directory: explicit, under [`OUTPUT_ROOT_ENV`], or `runs/`.
    pub fn resolve_output_dir(&self) -> PathBuf {
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
        let default_name = || PathBuf::from(format!("{}-seed{}", self.optimizer.name.as_str(), self.seed));
        match (&self.output_dir, root) {
            (Some(d), _) if d.is_absolute() => d.clone(),
            (Some(d), Some(r)) => r.join(d),
            (Some(d), None) => d.clone(),
            (None, Some(r)) => r.join(default_name()),
            (None, None) => PathBuf::from("runs").join(default_name()),
        }
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    /// 1-based epoch.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub train_loss: f64,
    pub eval_loss: f64,
    /// Eval accuracy, `null` for regression.
    pub accuracy: Option<f64>,
    pub lr: f64,
    pub optimizer: String,
    pub seed: u64,
    pub workers: usize,
}

/// One line of `timing.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub epoch: usize,
    pub step: u64,
    pub mean_step_ms: f64,
    pub elapsed_ms: f64,
}

/// Appends `record` as a single newline-terminated JSON line. Non-finite
/// losses are refused.
pub fn emit_metrics<W: Write>(w: &mut W, record: &MetricsRecord) -> Result<()> {
    for (name, v) in [("train_loss", record.train_loss), ("eval_loss", record.eval_loss)] {
        if !v.is_finite() {
            bail!(Numeric, "{name} is {v} at epoch {}", record.epoch);
        }
    }
    let mut line = serde_json::to_vec(record)?;
    line.push(b'\n');
    w.write_all(&line)?;
    w.flush()?;
    Ok(())
}

fn emit_timing<W: Write>(w: &mut W, t: &TimingRecord) -> Result<()> {
    let mut line = serde_json::to_vec(t)?;
    line.push(b'\n');
    w.write_all(&line)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub history: Vec<MetricsRecord>,
    pub final_params: Vec<f64>,
    /// Mean wall time per optimizer step over the whole run.
    pub mean_step_ms: f64,
    pub trajectory: Option<TrajectoryLog>,
}

impl RunReport {
    pub fn last(&self) -> &MetricsRecord {
        self.history.last().expect("at least one epoch")
    }
}

/// Data split into train and eval parts, shaped as configured.
pub fn prepare_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let mut data = cfg.data.source.load(cfg.seed)?;
    if let Some(n) = cfg.data.limit {
        data = data.limit(n)?;
    }
    if let Some(shape) = &cfg.data.shape {
        data = data.reshape_samples(shape)?;
    }
    data.split(cfg.data.train_fraction, cfg.data.split_seed.unwrap_or(cfg.seed))
}

/// The model a config describes, initialized from the run seed.
pub fn build_model(cfg: &RunConfig, data: &Dataset) -> Result<Model> {
    let loss = cfg.loss.unwrap_or(match data.targets {
        Targets::Labels(_) => Loss::CrossEntropy,
        Targets::Values(_) => Loss::Mse,
    });
    Model::from_specs(data.sample_shape(), &cfg.model, loss, &mut Rng::new(cfg.seed).fork(1))
}

fn fim_rows(opt: &Optimizer, model: &Model, step: u64) -> Result<Vec<FimStatsRow>> {
    let slots = model.param_slots();
    let mut rows = Vec::new();
    match opt {
        Optimizer::AdaFisher(af) => {
            let Some(efim) = af.last_efim() else {
                return Ok(rows);
            };
            for b in &efim.blocks {
                for d in b.implied_diagonal(efim.lambda)? {
                    if b.kind == BlockKind::Kronecker || rows.last().map(|r: &FimStatsRow| r.layer) != Some(b.layer) {
                        rows.push(FimStatsRow {
                            step,
                            layer: b.layer,
                            source: "adafisher".into(),
                            stats: fim_hist_stats(&d)?,
                        });
                    }
                }
            }
        }
        Optimizer::Adam(a) => {
            for (slot, v) in slots.iter().zip(a.second_moment()) {
                if rows.last().map(|r: &FimStatsRow| r.layer) != Some(slot.layer) {
                    rows.push(FimStatsRow {
                        step,
                        layer: slot.layer,
                        source: "adam".into(),
                        stats: fim_hist_stats(&v)?,
                    });
                }
            }
        }
        Optimizer::Sgd(_) => {}
    }
    Ok(rows)
}

/// Runs the configured experiment end to end and returns where its metrics
/// went. Config problems surface before any computation.
pub fn run_training(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let (train, eval) = prepare_data(cfg)?;
    let mut model = build_model(cfg, &train)?;
    let mut opt = Optimizer::new(&model, cfg.optimizer)?;
    let batches = train.len() / cfg.batch_size;
    if batches == 0 {
        bail!(Config, "batch size {} exceeds the {} training samples", cfg.batch_size, train.len());
    }
    if train.len() % cfg.batch_size != 0 {
        log::info!("dropping the last {} samples of each epoch", train.len() % cfg.batch_size);
    }
    let mut dist = (cfg.workers > 1)
        .then(|| DistributedTrainer::new(cfg.workers, cfg.aggregate_ema_mode))
        .transpose()?;

    let out_dir = cfg.resolve_output_dir();
    fs::create_dir_all(&out_dir)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    let mut timing = BufWriter::new(File::create(out_dir.join("timing.jsonl"))?);

    let mut shuffler = Rng::new(cfg.seed).fork(2);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut trajectory = cfg.trajectory.then(TrajectoryLog::default);
    let mut fim = Vec::new();
    let mut mae = Vec::new();
    let mut step: u64 = 0;
    let mut total_ms = 0.0;
    let run_start = Instant::now();

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(cfg.optimizer.lr, epoch, cfg.epochs);
        opt.set_lr(lr);
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffler.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut epoch_ms = 0.0;
        for b in 0..batches {
            let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let x = train.inputs.select_rows(idx)?;
            let t = train.targets.select(idx)?;
            let started = Instant::now();
            let loss = match dist.as_mut() {
                Some(d) => d.step(&mut model, &x, &t, &mut opt)?.loss,
                None => {
                    let out = model.step(&x, &t, Mode::Train)?;
                    if out.loss.is_finite() {
                        opt.step(&mut model, &out.grads, &out.captures)?;
                    }
                    out.loss
                }
            };
            epoch_ms += started.elapsed().as_secs_f64() * 1e3;
            if !loss.is_finite() {
                bail!(Numeric, "loss became {loss} at epoch {} step {}", epoch + 1, step + 1);
            }
            loss_sum += loss;
            step += 1;
        }
        total_ms += epoch_ms;

        let (eval_loss, accuracy) = model.evaluate(&eval.inputs, &eval.targets, 256)?;
        let rec = MetricsRecord {
            epoch: epoch + 1,
            step,
            train_loss: loss_sum / batches as f64,
            eval_loss,
            accuracy,
            lr,
            optimizer: cfg.optimizer.name.as_str().into(),
            seed: cfg.seed,
            workers: cfg.workers,
        };
        emit_metrics(&mut metrics, &rec)?;
        emit_timing(
            &mut timing,
            &TimingRecord {
                epoch: epoch + 1,
                step,
                mean_step_ms: epoch_ms / batches as f64,
                elapsed_ms: run_start.elapsed().as_secs_f64() * 1e3,
            },
        )?;
        if let Some(log) = trajectory.as_mut() {
            let first = model.params()[0].data();
            if first.len() < 2 {
                bail!(Config, "trajectory needs at least two weights in the first layer");
            }
            log.record(epoch + 1, &first[..2], rec.train_loss)?;
        }
        if cfg.fim_stats {
            fim.extend(fim_rows(&opt, &model, step)?);
        }
        if let Some(n) = cfg.fisher_mae_samples {
            let probe = eval.inputs.select_rows(&(0..n.min(eval.len())).collect::<Vec<_>>())?;
            let exact = exact_fisher_diag(&model, &probe)?;
            let approx = kf_product_diag(&model, &probe, None)?;
            for (layer, v) in layer_mae(&exact, &approx)? {
                mae.push(MaeRecord {
                    epoch: epoch + 1,
                    layer,
                    mae: v,
                });
            }
        }
        log::info!(
            "epoch {} train {:.6} eval {:.6} acc {:?}",
            rec.epoch,
            rec.train_loss,
            rec.eval_loss,
            rec.accuracy
        );
        history.push(rec);
    }

    let final_params = model.flat_params();
    fs::write(out_dir.join("params.json"), serde_json::to_vec(&final_params)?)?;
    if let Some(log) = &trajectory {
        log.write_csv(File::create(out_dir.join("trajectory.csv"))?)?;
    }
    if cfg.fim_stats {
        write_fim_stats_csv(File::create(out_dir.join("fim_stats.csv"))?, &fim)?;
    }
    if cfg.fisher_mae_samples.is_some() {
        write_mae_csv(File::create(out_dir.join("mae.csv"))?, &mae)?;
    }
    Ok(RunReport {
        output_dir: out_dir,
        metrics_path,
        history,
        final_params,
        mean_step_ms: total_ms / step as f64,
        trajectory,
    })
}

/// Parses a `metrics.jsonl` file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    fs::read_to_string(path)?
        .lines()
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
