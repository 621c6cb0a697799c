//! Read-only robustness diagnostics: FGSM, robust loss, flatness probes, the
//! abnormal-gradient probe, and 2-D hypersphere feature exports.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{RclError, Result};
use crate::losses::{cross_entropy, cross_entropy_labels, one_hot};
use crate::harness::TaskData;
use crate::model::{Network, ParamGroup, ParamKey, ParamTensors};
use crate::perturbation::Batch;
use crate::tensor::Tensor;
use crate::trainer::ce_gradient;

/// `sign` with `sign(0) = 0`.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Cross-entropy gradient with respect to the inputs.
pub fn input_gradient(net: &Network, x: &Tensor, labels: &[usize], task: usize) -> Result<Tensor> {
    let classes = net.head_classes(task).ok_or_else(|| RclError::Lookup(format!("no head {task}")))?;
    let mut g = Graph::new();
    let bound = net.bind(&mut g, task, false)?;
    let xv = g.param(x.clone());
    let out = net.forward_graph(&mut g, &bound, xv, task, false, None)?;
    let y = g.constant(one_hot(labels, classes)?);
    let loss = cross_entropy(&mut g, out.logits, y)?;
    g.backward(loss)?;
    Ok(g.grad(xv))
}

/// `X + μ·sign(∇_X L)`, optionally clipped to `[lo, hi]`.
pub fn fgsm(net: &Network, x: &Tensor, labels: &[usize], mu: f64, task: usize, clip: Option<(f64, f64)>) -> Result<Tensor> {
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(RclError::Parameter(format!("mu must be non-negative, got {mu}")));
    }
    if mu == 0.0 {
        return Ok(x.clone());
    }
    let grad = input_gradient(net, x, labels, task)?;
    let mut adv = x.clone();
    for (a, d) in adv.data_mut().iter_mut().zip(grad.data()) {
        *a += mu * sign(*d);
        if let Some((lo, hi)) = clip {
            *a = a.clamp(lo, hi);
        }
    }
    Ok(adv)
}

/// Mean cross-entropy on FGSM examples of `batch`.
pub fn robust_loss(net: &Network, task: usize, batch: &Batch, mu: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(RclError::contract("robust_loss", "empty split"));
    }
    let adv = fgsm(net, &batch.x, &batch.labels, mu, task, None)?;
    cross_entropy_labels(&net.logits(&adv, task)?, &batch.labels)
}

/// Accuracy (percent) on FGSM examples of `batch`.
pub fn fgsm_accuracy(net: &Network, task: usize, batch: &Batch, mu: f64) -> Result<f64> {
    let adv = fgsm(net, &batch.x, &batch.labels, mu, task, None)?;
    let b = Batch { x: adv, labels: batch.labels.clone() };
    crate::trainer::accuracy(net, task, &b)
}

/// FGSM accuracy averaged over tasks, each through its own head, on the test splits.
pub fn mean_fgsm_accuracy(net: &Network, tasks: &[TaskData], mu: f64) -> Result<f64> {
    if tasks.is_empty() {
        return Err(RclError::contract("mean_fgsm_accuracy", "no tasks"));
    }
    let mut total = 0.0;
    for t in tasks {
        total += fgsm_accuracy(net, t.task, &t.test, mu)?;
    }
    Ok(total / tasks.len() as f64)
}

/// The budget from `grid` whose accuracy drop on `net` falls inside `window` and lies
/// closest to its midpoint, with that drop. `None` when no budget lands in the window.
pub fn scaled_mu(net: &Network, tasks: &[TaskData], grid: &[f64], window: (f64, f64)) -> Result<Option<(f64, f64)>> {
    let clean = mean_fgsm_accuracy(net, tasks, 0.0)?;
    let mid = 0.5 * (window.0 + window.1);
    let mut best: Option<(f64, f64)> = None;
    for &mu in grid {
        let drop = clean - mean_fgsm_accuracy(net, tasks, mu)?;
        if drop >= window.0 && drop <= window.1 && best.is_none_or(|(_, d)| (drop - mid).abs() < (d - mid).abs()) {
            best = Some((mu, drop));
        }
    }
    Ok(best)
}

/// Rescales each layer of `direction` to the norm of the same layer in `weights`
/// (weight and bias together). Layers whose weights are all zero are left as they are
/// and reported.
pub fn layer_normalize(direction: &ParamTensors, weights: &ParamTensors) -> (ParamTensors, Vec<ParamGroup>) {
    let mut norms: BTreeMap<ParamGroup, (f64, f64)> = BTreeMap::new();
    for (k, d) in direction.iter() {
        let e = norms.entry(k.group).or_default();
        e.0 += d.frobenius_sq();
        e.1 += weights.get(k).map_or(0.0, Tensor::frobenius_sq);
    }
    let mut skipped = Vec::new();
    let mut out = direction.clone();
    for (group, (d2, w2)) in &norms {
        if *w2 == 0.0 || *d2 == 0.0 {
            if *w2 == 0.0 {
                skipped.push(*group);
            }
            continue;
        }
        let c = w2.sqrt() / d2.sqrt();
        for (k, t) in out.iter_mut() {
            if k.group == *group {
                *t = t.scale(c);
            }
        }
    }
    (out, skipped)
}

/// `L(θ + ξ·u) − L(θ)` for an arbitrary loss over parameter tensors.
pub fn flatness_along<F>(loss: F, theta: &ParamTensors, direction: &ParamTensors, xi: f64) -> Result<f64>
where
    F: Fn(&ParamTensors) -> Result<f64>,
{
    let moved = theta.add_scaled(direction, xi)?;
    Ok(loss(&moved)? - loss(theta)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Flatness {
    pub value: f64,
    /// The loss gradient vanished, so there is no ascent direction.
    pub degenerate: bool,
    /// Layers whose normalization was skipped because their weights are zero.
    pub skipped: Vec<ParamGroup>,
}

fn with_params(net: &Network, params: &ParamTensors) -> Result<Network> {
    let mut out = net.clone();
    let base = net.params_for(&params.keys().copied().collect::<Vec<ParamKey>>());
    out.perturb(&params.add_scaled(&base, -1.0)?)?;
    Ok(out)
}

/// Loss increase along the layer-normalized gradient-ascent direction scaled by `ξ`.
pub fn worst_case_flatness(net: &Network, task: usize, batch: &Batch, xi: f64) -> Result<Flatness> {
    if !(xi > 0.0 && xi.is_finite()) {
        return Err(RclError::Parameter(format!("xi must be positive, got {xi}")));
    }
    let (_, grads) = ce_gradient(net, task, batch)?;
    if grads.norm() < 1e-12 {
        return Ok(Flatness { value: 0.0, degenerate: true, skipped: Vec::new() });
    }
    let theta = net.params_for(&net.trainable_keys(task));
    let (direction, skipped) = layer_normalize(&grads, &theta);
    let loss = |p: &ParamTensors| -> Result<f64> {
        let moved = with_params(net, p)?;
        cross_entropy_labels(&moved.logits(&batch.x, task)?, &batch.labels)
    };
    let value = flatness_along(loss, &theta, &direction, xi)?;
    Ok(Flatness { value, degenerate: false, skipped })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    WorstCase,
    RandomSlice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatnessProbe {
    pub xi: f64,
    pub mode: ProbeMode,
    pub directions: usize,
    pub spans: Vec<f64>,
}

impl Default for FlatnessProbe {
    fn default() -> Self {
        FlatnessProbe {
            xi: 0.05,
            mode: ProbeMode::RandomSlice,
            directions: 10,
            spans: (-10..=10).map(|i| f64::from(i) * 0.1).collect(),
        }
    }
}

impl FlatnessProbe {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(RclError::config("probe.xi", "must be positive"));
        }
        if !self.spans.contains(&0.0) || self.spans.iter().any(|s| !s.is_finite()) {
            return Err(RclError::config("probe.spans", "must be finite and include 0"));
        }
        Ok(())
    }
}

/// `table[d][s]` is the loss at `W + spans[s]·direction_d` for seeded random
/// layer-normalized directions.
pub fn landscape_slice(net: &Network, task: usize, batch: &Batch, probe: &FlatnessProbe, seed: u64) -> Result<Vec<Vec<f64>>> {
    probe.validate()?;
    let theta = net.params_for(&net.trainable_keys(task));
    let base = cross_entropy_labels(&net.logits(&batch.x, task)?, &batch.labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = Vec::with_capacity(probe.directions);
    for _ in 0..probe.directions {
        let raw = theta.gaussian_like(rng.random());
        let (dir, _) = layer_normalize(&raw, &theta);
        let mut row = Vec::with_capacity(probe.spans.len());
        for &s in &probe.spans {
            if s == 0.0 {
                row.push(base);
                continue;
            }
            let moved = with_params(net, &theta.add_scaled(&dir, s)?)?;
            row.push(cross_entropy_labels(&moved.logits(&batch.x, task)?, &batch.labels)?);
        }
        table.push(row);
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientProbe {
    pub grad_norm_clean: f64,
    pub grad_norm_perturbed: f64,
    /// Mean change of the true-class logit on the current head.
    pub current_logit_delta: f64,
    /// Mean change of the largest logit on each earlier head; `None` for the first task.
    pub past_logit_deltas: Option<Vec<f64>>,
}

/// Gradient norms and logit shifts under an FGSM-direction input perturbation of size `eps_scale`.
pub fn abnormal_gradient_probe(net: &Network, x: &Tensor, labels: &[usize], eps_scale: f64, task: usize) -> Result<GradientProbe> {
    if !(eps_scale >= 0.0 && eps_scale.is_finite()) {
        return Err(RclError::Parameter(format!("eps_scale must be non-negative, got {eps_scale}")));
    }
    let batch = Batch::new(x.clone(), labels.to_vec())?;
    let moved = fgsm(net, x, labels, eps_scale, task, None)?;
    let moved_batch = Batch::new(moved.clone(), labels.to_vec())?;
    let (_, g0) = ce_gradient(net, task, &batch)?;
    let (_, g1) = ce_gradient(net, task, &moved_batch)?;
    let n = labels.len() as f64;
    let (l0, l1) = (net.logits(x, task)?, net.logits(&moved, task)?);
    let current = labels.iter().enumerate().map(|(r, &y)| l1.at(r, y) - l0.at(r, y)).sum::<f64>() / n;
    let past = (task > 0)
        .then(|| {
            (0..task)
                .map(|p| {
                    let (a, b) = (net.logits(x, p)?, net.logits(&moved, p)?);
                    let row_max = |t: &Tensor, r: usize| t.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    Ok((0..labels.len()).map(|r| row_max(&b, r) - row_max(&a, r)).sum::<f64>() / n)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .transpose()?;
    Ok(GradientProbe {
        grad_norm_clean: g0.norm(),
        grad_norm_perturbed: g1.norm(),
        current_logit_delta: current,
        past_logit_deltas: past,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub x: f64,
    pub y: f64,
    pub angle: f64,
    pub label: usize,
    pub task: usize,
    /// The feature or its projection had zero norm; coordinates are zero.
    pub degenerate: bool,
}

/// A fixed seeded Gaussian `feature_dim × 2` projection.
pub fn random_projection(feature_dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..feature_dim * 2).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![feature_dim, 2], data).expect("projection shape")
}

/// Unit-norm 2-D features `normalize(normalize(h(x))·P)` with their angles in `(−π, π]`.
pub fn export_features(net: &Network, x: &Tensor, labels: &[usize], task: usize, projection: &Tensor) -> Result<Vec<FeatureRow>> {
    if projection.shape() != [net.feature_dim(), 2] {
        return Err(RclError::dim("export_features", format!("projection {:?}", projection.shape())));
    }
    let hidden = net.hidden(x, task)?;
    let mut rows = Vec::with_capacity(labels.len());
    for (r, &label) in labels.iter().enumerate() {
        let h = hidden.row(r);
        let hn = h.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (mut px, mut py) = (0.0, 0.0);
        if hn > 1e-12 {
            for (i, v) in h.iter().enumerate() {
                px += v / hn * projection.at(i, 0);
                py += v / hn * projection.at(i, 1);
            }
        }
        let pn = (px * px + py * py).sqrt();
        if hn <= 1e-12 || pn <= 1e-12 {
            rows.push(FeatureRow { x: 0.0, y: 0.0, angle: 0.0, label, task, degenerate: true });
            continue;
        }
        let (fx, fy) = (px / pn, py / pn);
        let mut angle = fy.atan2(fx);
        if angle <= -std::f64::consts::PI {
            angle = std::f64::consts::PI;
        }
        rows.push(FeatureRow { x: fx, y: fy, angle, label, task, degenerate: false });
    }
    Ok(rows)
}

/// `count` seeded random rows of `batch` (all rows when it has fewer).
pub fn sample_rows(batch: &Batch, count: usize, seed: u64) -> Result<Batch> {
    let n = batch.len();
    if count >= n {
        return Ok(batch.clone());
    }
    let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), n, count).into_vec();
    idx.sort_unstable();
    batch.select(&idx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvRow {
    pub mu: f64,
    pub method: String,
    pub accuracy: f64,
    /// Accuracy drop relative to `mu = 0`.
    pub delta: f64,
}

pub fn write_adv_eval(path: &Path, rows: &[AdvRow]) -> Result<()> {
    write_rows(path, &["mu", "method", "accuracy", "delta"], rows.iter().map(|r| {
        vec![r.mu.to_string(), r.method.clone(), r.accuracy.to_string(), r.delta.to_string()]
    }))
}

pub fn write_landscape(path: &Path, spans: &[f64], table: &[Vec<f64>]) -> Result<()> {
    let rows = table.iter().enumerate().flat_map(|(d, row)| {
        spans.iter().zip(row).map(move |(s, l)| vec![d.to_string(), s.to_string(), l.to_string()])
    });
    write_rows(path, &["direction_id", "span", "loss"], rows)
}

pub fn write_features(path: &Path, rows: &[FeatureRow]) -> Result<()> {
    write_rows(path, &["x", "y", "angle", "label", "task"], rows.iter().filter(|r| !r.degenerate).map(|r| {
        vec![r.x.to_string(), r.y.to_string(), r.angle.to_string(), r.label.to_string(), r.task.to_string()]
    }))
}

fn write_rows(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => RclError::io(path, io),
        kind => RclError::contract("csv", format!("{kind:?}")),
    })?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| RclError::io(path, e))
}
