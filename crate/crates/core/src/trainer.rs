//! Sequential-task training: RCL, the GPM baseline and plain SGD, plus evaluation and
//! ACC/BWT metrics.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{RclError, Result};
use crate::gpm::{project_gradient, projection_residual, update_gpm, ProjectionMemory};
use crate::harness::{RunRecord, TaskData, TaskStream, SCHEMA_VERSION};
use crate::losses::{cross_entropy, one_hot, LossParams};
use crate::model::{Network, ParamTensors};
use crate::perturbation::{
    joint_perturbations, mixup_batch, robust_gradient, robust_pretrain_phi, sample_gamma, worst_case_weight, Batch,
    PerturbConfig,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Naive,
    Gpm,
    #[default]
    Rcl,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Naive => "naive",
            Method::Gpm => "gpm",
            Method::Rcl => "rcl",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = RclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Method::Naive),
            "gpm" => Ok(Method::Gpm),
            "rcl" => Ok(Method::Rcl),
            _ => Err(RclError::config("method", format!("unknown method {s:?} (naive, gpm, rcl)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    /// Drop the uniformity/alignment loss everywhere.
    pub disable_ua: bool,
    /// Skip φ-pretraining.
    pub disable_phi: bool,
    /// Keep the uniformity/alignment loss in the robust gradient only, not in the perturbations.
    pub ua_in_gradient_only: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss: LossParams,
    pub perturb: PerturbConfig,
    pub eps_th: f64,
    pub seed: u64,
    pub ablations: Ablations,
    /// Use the sampled mixing coefficient without the worst-case shift.
    pub disable_data_perturbation: bool,
    /// Training samples per task used to update the projection memory.
    pub rep_samples: usize,
    /// Repeat φ-pretraining before every task instead of only the first.
    pub phi_every_task: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Rcl,
            epochs: 10,
            batch_size: 32,
            lr: 0.01,
            loss: LossParams::default(),
            perturb: PerturbConfig::default(),
            eps_th: 0.97,
            seed: 0,
            ablations: Ablations::default(),
            disable_data_perturbation: false,
            rep_samples: 64,
            phi_every_task: false,
        }
    }
}

/// Loss weights actually used once ablations are applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EffectiveParams {
    pub lambda: f64,
    /// κ inside the worst-case perturbation objectives.
    pub kappa_perturb: f64,
    /// κ inside the robust gradient.
    pub kappa_grad: f64,
    pub phi: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(RclError::config("train.batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(RclError::config("train.lr", format!("must be positive, got {}", self.lr)));
        }
        if !(self.eps_th > 0.0 && self.eps_th <= 1.0) {
            return Err(RclError::config("train.eps_th", format!("must lie in (0, 1], got {}", self.eps_th)));
        }
        if self.rep_samples == 0 {
            return Err(RclError::config("train.rep_samples", "must be positive"));
        }
        self.loss.validate()?;
        self.perturb.validate()
    }

    pub fn effective(&self) -> EffectiveParams {
        let a = self.ablations;
        if self.method != Method::Rcl {
            return EffectiveParams { lambda: 0.0, kappa_perturb: 0.0, kappa_grad: 0.0, phi: false };
        }
        let kappa = if a.disable_ua { 0.0 } else { self.loss.kappa };
        EffectiveParams {
            lambda: self.loss.lambda,
            kappa_perturb: if a.ua_in_gradient_only { 0.0 } else { kappa },
            kappa_grad: kappa,
            phi: !a.disable_phi,
        }
    }
}

/// Per-step information passed to an observer.
pub struct StepInfo<'a> {
    pub task: usize,
    pub epoch: usize,
    pub step: usize,
    pub net: &'a Network,
    /// `‖Mᵀĝ‖∞ / ‖g‖` for this update; zero while the memory is empty.
    pub audit: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskLog {
    pub task: usize,
    /// Mean training objective per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    /// Largest orthogonality audit ratio over all updates.
    pub max_audit: f64,
    pub degenerate_gamma: usize,
    pub degenerate_weight: usize,
}

fn derive_seed(seed: u64, purpose: u64, task: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ purpose.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ task as u64
}

const SHUFFLE: u64 = 1;
const MIX: u64 = 2;
const PHI: u64 = 3;
const REPS: u64 = 4;

fn local_batch(data: &TaskData) -> Result<&Batch> {
    if data.train.is_empty() {
        return Err(RclError::contract("train_task", format!("task {} has no training data", data.task)));
    }
    Ok(&data.train)
}

/// Cross-entropy gradient over the trainable parameters of `task`.
pub fn ce_gradient(net: &Network, task: usize, batch: &Batch) -> Result<(f64, ParamTensors)> {
    let classes = net.head_classes(task).ok_or_else(|| RclError::Lookup(format!("no head {task}")))?;
    let mut g = Graph::new();
    let bound = net.bind(&mut g, task, true)?;
    let x = g.constant(batch.x.clone());
    let out = net.forward_graph(&mut g, &bound, x, task, false, None)?;
    let y = g.constant(one_hot(&batch.labels, classes)?);
    let loss = cross_entropy(&mut g, out.logits, y)?;
    g.backward(loss)?;
    Ok((g.scalar_value(loss), bound.grads(&g)))
}

/// One task of training with the configured method. `memory` is required for gpm/rcl.
pub fn train_task(
    net: &mut Network,
    memory: Option<&ProjectionMemory>,
    data: &TaskData,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&StepInfo),
) -> Result<TaskLog> {
    let train = local_batch(data)?;
    let task = data.task;
    let classes = net.head_classes(task).ok_or_else(|| RclError::Lookup(format!("no head {task}")))?;
    if cfg.method != Method::Naive && memory.is_none() {
        return Err(RclError::contract("train_task", "projection methods need a memory"));
    }
    let eff = cfg.effective();
    let perturb_params = LossParams { lambda: eff.lambda, kappa: eff.kappa_perturb, ..cfg.loss };
    let grad_params = LossParams { lambda: eff.lambda, kappa: eff.kappa_grad, ..cfg.loss };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHUFFLE, task));
    let mut mix_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, MIX, task));
    let mut log = TaskLog { task, ..TaskLog::default() };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.select(chunk)?;
            let (loss, grads) = match cfg.method {
                Method::Naive | Method::Gpm => ce_gradient(net, task, &batch)?,
                Method::Rcl => {
                    let gamma = sample_gamma(cfg.perturb.mixup_alpha, &mut mix_rng)?;
                    let mut perm: Vec<usize> = (0..batch.len()).collect();
                    perm.shuffle(&mut mix_rng);
                    let pair = mixup_batch(&batch, &perm, classes, gamma)?;
                    let (gamma_hat, wp) = if cfg.disable_data_perturbation {
                        (gamma, worst_case_weight(net, task, &pair, &perturb_params, cfg.perturb.rho_weight)?)
                    } else {
                        let (gp, wp) = joint_perturbations(
                            net,
                            task,
                            &pair,
                            &perturb_params,
                            cfg.perturb.rho_data,
                            cfg.perturb.rho_weight,
                        )?;
                        log.degenerate_gamma += usize::from(gp.degenerate);
                        (gp.gamma_hat, wp)
                    };
                    log.degenerate_weight += usize::from(wp.degenerate);
                    let pair_hat = pair.with_gamma(gamma_hat)?;
                    robust_gradient(net, task, &wp.upsilon, &pair_hat, &grad_params)?
                }
            };
            let (update, audit) = match memory {
                Some(mem) if cfg.method != Method::Naive && !mem.is_empty() => {
                    let projected = project_gradient(&grads, mem, net)?;
                    let norm = grads.norm();
                    let residual = projection_residual(&projected, mem, net)?;
                    (projected, if norm > 0.0 { residual / norm } else { residual })
                }
                _ => (grads, 0.0),
            };
            if !update.is_finite() {
                return Err(RclError::contract("train_task", format!("non-finite gradient at task {task} epoch {epoch}")));
            }
            net.apply_update(&update, cfg.lr)?;
            log.max_audit = log.max_audit.max(audit);
            observer(&StepInfo { task, epoch, step: log.steps, net, audit });
            log.steps += 1;
            total += loss;
            batches += 1;
        }
        log.epoch_losses.push(total / f64::from(batches.max(1)));
    }
    Ok(log)
}

pub fn train_task_rcl(net: &mut Network, memory: &ProjectionMemory, data: &TaskData, cfg: &TrainConfig) -> Result<TaskLog> {
    let cfg = TrainConfig { method: Method::Rcl, ..cfg.clone() };
    train_task(net, Some(memory), data, &cfg, &mut |_| {})
}

pub fn train_task_gpm(net: &mut Network, memory: &ProjectionMemory, data: &TaskData, cfg: &TrainConfig) -> Result<TaskLog> {
    let cfg = TrainConfig { method: Method::Gpm, ..cfg.clone() };
    train_task(net, Some(memory), data, &cfg, &mut |_| {})
}

pub fn train_task_naive(net: &mut Network, data: &TaskData, cfg: &TrainConfig) -> Result<TaskLog> {
    let cfg = TrainConfig { method: Method::Naive, ..cfg.clone() };
    train_task(net, None, data, &cfg, &mut |_| {})
}

/// Percentage of rows whose argmax logit equals the label.
pub fn accuracy(net: &Network, task: usize, batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(RclError::contract("evaluate", format!("task {task} has an empty split")));
    }
    let logits = net.logits(&batch.x, task)?;
    Ok(accuracy_from_logits(&logits, &batch.labels))
}

pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> f64 {
    let correct = labels
        .iter()
        .enumerate()
        .filter(|(r, &y)| {
            let row = logits.row(*r);
            let best = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            best == y
        })
        .count();
    100.0 * correct as f64 / labels.len() as f64
}

/// Test accuracy on every task in `tasks`, task id given.
pub fn evaluate(net: &Network, tasks: &[TaskData]) -> Result<Vec<f64>> {
    tasks.iter().map(|d| accuracy(net, d.task, &d.test)).collect()
}

/// Lower-triangular accuracy table: `rows[t][i]` is the accuracy on task `i` after task `t`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = AccuracyMatrix { rows };
        m.check()?;
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    fn check(&self) -> Result<()> {
        for (t, row) in self.rows.iter().enumerate() {
            if row.len() != t + 1 {
                return Err(RclError::contract(
                    "accuracy_matrix",
                    format!("row {t} has {} entries, expected {}", row.len(), t + 1),
                ));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=100.0).contains(*v)) {
                return Err(RclError::contract("accuracy_matrix", format!("row {t} has accuracy {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    /// Undefined for a single task.
    pub bwt: Option<f64>,
}

pub fn compute_metrics(a: &AccuracyMatrix) -> Result<Metrics> {
    a.check()?;
    let t = a.tasks();
    if t == 0 {
        return Err(RclError::contract("compute_metrics", "empty accuracy matrix"));
    }
    let last = &a.rows[t - 1];
    let acc = last.iter().sum::<f64>() / t as f64;
    let bwt = (t > 1).then(|| (0..t - 1).map(|i| last[i] - a.rows[i][i]).sum::<f64>() / (t - 1) as f64);
    Ok(Metrics { acc, bwt })
}

/// Final state of a run alongside its record.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub net: Network,
    pub memory: ProjectionMemory,
}

fn rep_sample(data: &TaskData, count: usize, seed: u64) -> Result<Tensor> {
    let train = local_batch(data)?;
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, REPS, data.task)));
    idx.truncate(count);
    Ok(train.select(&idx)?.x)
}

/// Trains every task in order, evaluating after each and updating the memory for
/// projection methods. A failure mid-run is recorded in `record.error` with the results so far.
pub fn run_sequence(cfg: &TrainConfig, net: Network, stream: &TaskStream) -> Result<RunOutcome> {
    run_sequence_observed(cfg, net, stream, &mut |_| {})
}

pub fn run_sequence_observed(
    cfg: &TrainConfig,
    mut net: Network,
    stream: &TaskStream,
    observer: &mut dyn FnMut(&StepInfo),
) -> Result<RunOutcome> {
    cfg.validate()?;
    if stream.tasks.is_empty() {
        return Err(RclError::contract("run_sequence", "empty task stream"));
    }
    if net.num_heads() < stream.tasks.len() {
        return Err(RclError::config("tasks", format!("{} tasks but {} heads", stream.tasks.len(), net.num_heads())));
    }
    let mut memory = ProjectionMemory::new(cfg.eps_th)?;
    let mut record = RunRecord {
        schema_version: SCHEMA_VERSION,
        method: cfg.method,
        seed: cfg.seed,
        config: serde_json::to_value(cfg)?,
        effective: cfg.effective(),
        ..RunRecord::default()
    };
    let mut rows = Vec::new();
    for (t, data) in stream.tasks.iter().enumerate() {
        let started = Instant::now();
        let result = (|| -> Result<()> {
            let eff = cfg.effective();
            if cfg.method == Method::Rcl && eff.phi && (t == 0 || cfg.phi_every_task) {
                let pre = robust_pretrain_phi(&net, &cfg.perturb, cfg.loss.tau, cfg.lr, derive_seed(cfg.seed, PHI, t))?;
                net = pre.net;
            }
            let log = train_task(&mut net, Some(&memory), data, cfg, observer)?;
            record.audit_max.push(log.max_audit);
            record.epoch_losses.push(log.epoch_losses);
            rows.push(evaluate(&net, &stream.tasks[..=t])?);
            if cfg.method != Method::Naive {
                let samples = rep_sample(data, cfg.rep_samples, cfg.seed)?;
                let added = update_gpm(&mut memory, &net, &samples, data.task)?;
                record.gpm_ranks.push(added);
            } else {
                record.gpm_ranks.push(BTreeMap::new());
            }
            Ok(())
        })();
        record.wall_clock_secs.push(started.elapsed().as_secs_f64());
        if let Err(e) = result {
            record.error = Some(format!("task {t}: {e}"));
            break;
        }
    }
    record.memory_widths = memory.widths();
    record.acc_matrix = AccuracyMatrix { rows };
    if record.error.is_none() {
        let m = compute_metrics(&record.acc_matrix)?;
        record.acc = Some(m.acc);
        record.bwt = m.bwt;
    }
    Ok(RunOutcome { record, net, memory })
}
