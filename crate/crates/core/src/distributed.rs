//! In-process data-parallel simulation: a batch is split across `K` virtual
//! workers, their Kronecker factors and gradients are averaged in worker
//! order, and one shared update is applied.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::kfactor::{KFState, LayerFactors};
use crate::nn::{Layer, Mode, Model, Targets};
use crate::optim::Optimizer;
use crate::tensor::Tensor;

/// Where the factor moving average lives.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateEmaMode {
    /// Average fresh factors across workers, then one shared moving average.
    #[default]
    AfterAggregation,
    /// Each worker smooths its own factors; the smoothed states are averaged.
    PerWorker,
}

/// One worker's contribution to a step.
#[derive(Debug, Clone)]
pub struct WorkerShard {
    /// Worker id, 1-based.
    pub id: usize,
    pub start: usize,
    pub len: usize,
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub factors: Vec<LayerFactors>,
    running: Vec<(Vec<f64>, Vec<f64>)>,
}

fn mean_in_order(vs: &[&[f64]]) -> Vec<f64> {
    let mut out = vec![0.0; vs[0].len()];
    for v in vs {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += x;
        }
    }
    let k = vs.len() as f64;
    out.iter_mut().for_each(|o| *o /= k);
    out
}

fn mean_factors(sets: &[&[LayerFactors]]) -> Vec<LayerFactors> {
    (0..sets[0].len())
        .map(|l| {
            let first = &sets[0][l];
            let hs: Vec<&[f64]> = sets.iter().map(|s| s[l].h.as_slice()).collect();
            let ss: Vec<&[f64]> = sets.iter().map(|s| s[l].s.as_slice()).collect();
            LayerFactors {
                layer: first.layer,
                kind: first.kind,
                h: mean_in_order(&hs),
                s: mean_in_order(&ss),
            }
        })
        .collect()
}

/// Coordinatewise mean of the factor diagonals of several states, summed in
/// slice order. Hyperparameters and step count come from the first state.
pub fn aggregate_kfs(shards: &[KFState]) -> Result<KFState> {
    let Some(first) = shards.first() else {
        bail!(Config, "need at least one worker state");
    };
    for s in &shards[1..] {
        first.check_layout(&s.layers)?;
    }
    let sets: Vec<&[LayerFactors]> = shards.iter().map(|s| s.layers.as_slice()).collect();
    Ok(KFState {
        layers: mean_factors(&sets),
        gamma: first.gamma,
        lambda: first.lambda,
        step: first.step,
    })
}

/// Mean of per-worker mean gradients, summed in slice order.
pub fn aggregate_grads(shards: &[Vec<Tensor>]) -> Result<Vec<Tensor>> {
    let Some(first) = shards.first() else {
        bail!(Config, "need at least one worker gradient set");
    };
    for s in &shards[1..] {
        if s.len() != first.len() || s.iter().zip(first).any(|(a, b)| a.shape() != b.shape()) {
            bail!(Dimension, "worker gradient layouts differ");
        }
    }
    (0..first.len())
        .map(|i| {
            let parts: Vec<&[f64]> = shards.iter().map(|s| s[i].data()).collect();
            Tensor::from_parts(first[i].shape().to_vec(), mean_in_order(&parts))
        })
        .collect()
}

fn batch_norm_stats(model: &Model) -> Vec<(Vec<f64>, Vec<f64>)> {
    model
        .layers()
        .iter()
        .filter_map(|l| match l {
            Layer::BatchNorm(b) => Some((b.running_mean.clone(), b.running_var.clone())),
            _ => None,
        })
        .collect()
}

/// Result of one synchronized step.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributedStep {
    /// Mean of the worker losses.
    pub loss: f64,
    /// Samples used (`K · shard`).
    pub used: usize,
    pub dropped: usize,
}

/// Multi-worker trainer state. Holds per-worker factor states when the
/// moving average runs per worker.
#[derive(Debug, Clone)]
pub struct DistributedTrainer {
    pub workers: usize,
    pub ema_mode: AggregateEmaMode,
    /// Run workers on scoped threads; the result does not depend on it.
    pub parallel: bool,
    worker_kf: Vec<KFState>,
}

impl DistributedTrainer {
    pub fn new(workers: usize, ema_mode: AggregateEmaMode) -> Result<Self> {
        if workers == 0 {
            bail!(Config, "worker count must be at least 1");
        }
        Ok(Self {
            workers,
            ema_mode,
            parallel: true,
            worker_kf: Vec::new(),
        })
    }

    /// Runs every worker on its shard and returns the shards in id order.
    pub fn run_workers(&self, model: &Model, batch: &Tensor, targets: &Targets, identity_norm: bool) -> Result<Vec<WorkerShard>> {
        let m = batch.shape()[0];
        if targets.len() != m {
            bail!(Dimension, "{m} inputs but {} targets", targets.len());
        }
        let k = self.workers;
        if k > m {
            bail!(Config, "{k} workers for a batch of {m}");
        }
        let shard = m / k;
        let work = |id: usize| -> Result<WorkerShard> {
            let start = id * shard;
            let idx: Vec<usize> = (start..start + shard).collect();
            let mut local = model.clone();
            let out = local.step(&batch.select_rows(&idx)?, &targets.select(&idx)?, Mode::Train)?;
            Ok(WorkerShard {
                id: id + 1,
                start,
                len: shard,
                loss: out.loss,
                factors: crate::kfactor::fresh_factors(&out.captures, identity_norm)?,
                grads: out.grads,
                running: batch_norm_stats(&local),
            })
        };
        if self.parallel && k > 1 {
            std::thread::scope(|s| {
                let handles: Vec<_> = (0..k).map(|id| s.spawn(move || work(id))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| bail!(State, "worker thread panicked")))
                    .collect()
            })
        } else {
            (0..k).map(work).collect()
        }
    }

    /// Shard → per-worker forward/backward/factors → aggregate → one update.
    pub fn step(&mut self, model: &mut Model, batch: &Tensor, targets: &Targets, opt: &mut Optimizer) -> Result<DistributedStep> {
        let m = batch.shape()[0];
        let identity_norm = opt.config().ablation.identity_norm;
        let shards = self.run_workers(model, batch, targets, identity_norm)?;
        let used = shards.len() * shards[0].len;
        if used < m {
            log::warn!("dropping {} of {m} samples so {} workers get equal shards", m - used, self.workers);
        }

        let grads = aggregate_grads(&shards.iter().map(|s| s.grads.clone()).collect::<Vec<_>>())?;
        let loss = shards.iter().map(|s| s.loss).sum::<f64>() / shards.len() as f64;

        // Batch-norm running statistics: worker average.
        let stats: Vec<_> = shards.iter().map(|s| &s.running).collect();
        let mut bn = 0;
        for l in model.layers_mut() {
            if let Layer::BatchNorm(b) = l {
                let means: Vec<&[f64]> = stats.iter().map(|s| s[bn].0.as_slice()).collect();
                let vars: Vec<&[f64]> = stats.iter().map(|s| s[bn].1.as_slice()).collect();
                b.running_mean = mean_in_order(&means);
                b.running_var = mean_in_order(&vars);
                bn += 1;
            }
        }

        match opt {
            Optimizer::AdaFisher(af) => {
                match self.ema_mode {
                    AggregateEmaMode::AfterAggregation => {
                        let sets: Vec<&[LayerFactors]> = shards.iter().map(|s| s.factors.as_slice()).collect();
                        af.observe(&mean_factors(&sets))?;
                    }
                    AggregateEmaMode::PerWorker => {
                        if self.worker_kf.len() != shards.len() {
                            self.worker_kf = vec![af.kf.clone(); shards.len()];
                        }
                        for (st, sh) in self.worker_kf.iter_mut().zip(&shards) {
                            if af.cfg.ablation.no_ema {
                                st.replace(&sh.factors)?;
                            } else {
                                st.ema_update(&sh.factors)?;
                            }
                        }
                        let agg = aggregate_kfs(&self.worker_kf)?;
                        af.kf.replace(&agg.layers)?;
                    }
                }
                let efim = af.efim()?;
                af.apply(&mut model.params_mut(), &grads, efim)?;
            }
            other => other.step(model, &grads, &[])?,
        }
        Ok(DistributedStep {
            loss,
            used,
            dropped: m - used,
        })
    }
}

/// One synchronized step with a fresh trainer (moving average after
/// aggregation). Use [`DistributedTrainer`] to keep per-worker state.
pub fn distributed_step(
    model: &mut Model,
    batch: &Tensor,
    targets: &Targets,
    workers: usize,
    opt: &mut Optimizer,
) -> Result<DistributedStep> {
    DistributedTrainer::new(workers, AggregateEmaMode::AfterAggregation)?.step(model, batch, targets, opt)
}
