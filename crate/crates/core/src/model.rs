//! Multi-head networks: shared dense/conv trunk, one dense head per task.
//!
//! Parameter order (used by [`Network::flatten_params`]): shared layers in
//! order, weight before bias, followed by heads in task order, weight before bias.
//! Dense weights are stored `fan_in × fan_out` so a layer computes `x·W + b`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{RclError, Result};
use crate::tensor::{ConvGeometry, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        capture: bool,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        capture: bool,
    },
    Relu,
    Dropout {
        rate: f64,
    },
}

impl LayerSpec {
    pub fn dense(fan_in: usize, fan_out: usize) -> Self {
        LayerSpec::Dense { fan_in, fan_out, bias: true, capture: true }
    }

    fn has_bias(&self) -> bool {
        matches!(self, LayerSpec::Dense { bias: true, .. } | LayerSpec::Conv { bias: true, .. })
    }

    fn captures(&self) -> bool {
        matches!(self, LayerSpec::Dense { capture: true, .. } | LayerSpec::Conv { capture: true, .. })
    }

    fn geometry(&self) -> Option<ConvGeometry> {
        match *self {
            LayerSpec::Conv { in_channels, height, width, kernel, stride, pad, .. } => {
                ConvGeometry::new(in_channels, height, width, kernel, stride, pad).ok()
            }
            _ => None,
        }
    }

    fn in_len(&self) -> Option<usize> {
        match *self {
            LayerSpec::Dense { fan_in, .. } => Some(fan_in),
            LayerSpec::Conv { in_channels, height, width, .. } => Some(in_channels * height * width),
            _ => None,
        }
    }

    fn out_len(&self) -> Option<usize> {
        match *self {
            LayerSpec::Dense { fan_out, .. } => Some(fan_out),
            LayerSpec::Conv { out_channels, .. } => self.geometry().map(|g| out_channels * g.positions()),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Shared(usize),
    Head(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamRole {
    Weight,
    Bias,
}

/// Address of one parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamKey {
    pub group: ParamGroup,
    pub role: ParamRole,
}

impl ParamKey {
    pub fn shared(layer: usize, role: ParamRole) -> Self {
        ParamKey { group: ParamGroup::Shared(layer), role }
    }

    pub fn head(task: usize, role: ParamRole) -> Self {
        ParamKey { group: ParamGroup::Head(task), role }
    }

    pub fn is_head(&self) -> bool {
        matches!(self.group, ParamGroup::Head(_))
    }
}

impl std::fmt::Display for ParamKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let role = match self.role {
            ParamRole::Weight => "w",
            ParamRole::Bias => "b",
        };
        match self.group {
            ParamGroup::Shared(l) => write!(f, "layer{l}.{role}"),
            ParamGroup::Head(t) => write!(f, "head{t}.{role}"),
        }
    }
}

/// A keyed set of tensors shaped like (a subset of) a network's parameters:
/// gradients, perturbations, and φ scales all use this.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamTensors {
    entries: BTreeMap<ParamKey, Tensor>,
}

impl ParamTensors {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: ParamKey, t: Tensor) {
        self.entries.insert(key, t);
    }

    pub fn get(&self, key: &ParamKey) -> Option<&Tensor> {
        self.entries.get(key)
    }

    pub fn get_mut(&mut self, key: &ParamKey) -> Option<&mut Tensor> {
        self.entries.get_mut(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&ParamKey, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// L2 norm over the concatenation of every entry.
    pub fn norm(&self) -> f64 {
        self.entries.values().map(Tensor::frobenius_sq).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &ParamTensors) -> f64 {
        self.entries
            .iter()
            .filter_map(|(k, t)| other.get(k).map(|o| t.dot(o)))
            .sum()
    }

    pub fn scale(&self, c: f64) -> ParamTensors {
        ParamTensors { entries: self.entries.iter().map(|(k, t)| (*k, t.scale(c))).collect() }
    }

    pub fn zeros_like(&self) -> ParamTensors {
        ParamTensors { entries: self.entries.iter().map(|(k, t)| (*k, Tensor::zeros(t.shape()))).collect() }
    }

    /// `self + c·other` over matching keys.
    pub fn add_scaled(&self, other: &ParamTensors, c: f64) -> Result<ParamTensors> {
        let mut out = self.clone();
        for (k, o) in &other.entries {
            let t = out
                .entries
                .get_mut(k)
                .ok_or_else(|| RclError::contract("add_scaled", format!("missing key {k}")))?;
            if t.shape() != o.shape() {
                return Err(RclError::dim("add_scaled", format!("{k}: {:?} vs {:?}", t.shape(), o.shape())));
            }
            t.data_mut().iter_mut().zip(o.data()).for_each(|(a, b)| *a += c * b);
        }
        Ok(out)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.values().fold(0.0, |m, t| m.max(t.max_abs()))
    }

    /// Standard-normal draws of the same shapes, from `seed`.
    pub fn gaussian_like(&self, seed: u64) -> ParamTensors {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.zeros_like();
        for t in out.entries.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LayerParams {
    weight: Option<Tensor>,
    bias: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Head {
    weight: Tensor,
    bias: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    input_len: usize,
    layers: Vec<LayerSpec>,
    params: Vec<LayerParams>,
    heads: Vec<Head>,
    rng_seed: u64,
}

/// Plain-value forward results.
#[derive(Clone, Debug)]
pub struct ForwardCapture {
    /// Pre-softmax head outputs `n × classes`.
    pub logits: Tensor,
    /// L2-normalized penultimate activations `n × feature_dim`.
    pub features: Tensor,
    /// Captured layer inputs, one column per sample (per patch for conv layers).
    pub reps: BTreeMap<usize, Tensor>,
}

/// Parameter leaves of a network placed on a graph.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<ParamKey, Var>,
}

impl BoundParams {
    pub fn var(&self, key: &ParamKey) -> Option<Var> {
        self.vars.get(key).copied()
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.vars.keys()
    }

    /// Reads the accumulated gradient of every bound parameter.
    pub fn grads(&self, g: &Graph) -> ParamTensors {
        let mut out = ParamTensors::new();
        for (k, v) in &self.vars {
            out.insert(*k, g.grad(*v));
        }
        out
    }
}

/// Graph-level forward results.
#[derive(Clone, Debug)]
pub struct GraphForward {
    pub logits: Var,
    /// Penultimate activations before normalization.
    pub hidden: Var,
    pub reps: BTreeMap<usize, Tensor>,
}

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

impl Network {
    /// Builds a network. `head_classes[t]` is the output width of task `t`'s head.
    pub fn new(input_len: usize, layers: Vec<LayerSpec>, head_classes: &[usize], seed: u64) -> Result<Self> {
        if input_len == 0 {
            return Err(RclError::config("input_len", "must be positive"));
        }
        if head_classes.is_empty() || head_classes.contains(&0) {
            return Err(RclError::config("heads", "need at least one head with positive width"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut width = input_len;
        let mut params = Vec::with_capacity(layers.len());
        for (i, spec) in layers.iter().enumerate() {
            if let Some(need) = spec.in_len() {
                if need != width {
                    return Err(RclError::dim("network", format!("layer {i} expects {need} inputs, gets {width}")));
                }
            }
            let p = match *spec {
                LayerSpec::Dense { fan_in, fan_out, bias, .. } => {
                    if fan_out == 0 {
                        return Err(RclError::config(format!("layers[{i}].fan_out"), "must be positive"));
                    }
                    LayerParams {
                        weight: Some(glorot(&mut rng, &[fan_in, fan_out], fan_in, fan_out)),
                        bias: bias.then(|| Tensor::zeros(&[fan_out])),
                    }
                }
                LayerSpec::Conv { in_channels, out_channels, height, width: w, kernel, stride, pad, bias, .. } => {
                    ConvGeometry::new(in_channels, height, w, kernel, stride, pad)?;
                    let kk = kernel * kernel;
                    LayerParams {
                        weight: Some(glorot(
                            &mut rng,
                            &[out_channels, in_channels, kernel, kernel],
                            in_channels * kk,
                            out_channels * kk,
                        )),
                        bias: bias.then(|| Tensor::zeros(&[out_channels])),
                    }
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(RclError::config(format!("layers[{i}].rate"), "must lie in [0, 1)"));
                    }
                    LayerParams { weight: None, bias: None }
                }
                LayerSpec::Relu => LayerParams { weight: None, bias: None },
            };
            if let Some(out) = spec.out_len() {
                width = out;
            }
            params.push(p);
        }
        let heads = head_classes
            .iter()
            .map(|&c| Head { weight: glorot(&mut rng, &[width, c], width, c), bias: Tensor::zeros(&[c]) })
            .collect();
        Ok(Network { input_len, layers, params, heads, rng_seed: seed })
    }

    /// `input → [dense(h) → relu]* → heads`.
    pub fn mlp(input_len: usize, hidden: &[usize], head_classes: &[usize], seed: u64) -> Result<Self> {
        let mut layers = Vec::new();
        let mut width = input_len;
        for &h in hidden {
            layers.push(LayerSpec::dense(width, h));
            layers.push(LayerSpec::Relu);
            width = h;
        }
        Network::new(input_len, layers, head_classes, seed)
    }

    /// Two 3×3 conv+relu blocks followed by a dense+relu layer.
    pub fn small_cnn(
        channels: usize,
        height: usize,
        width: usize,
        filters: usize,
        dense: usize,
        head_classes: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let c1 = LayerSpec::Conv {
            in_channels: channels,
            out_channels: filters,
            height,
            width,
            kernel: 3,
            stride: 1,
            pad: 1,
            bias: true,
            capture: true,
        };
        let c2 = LayerSpec::Conv {
            in_channels: filters,
            out_channels: filters,
            height,
            width,
            kernel: 3,
            stride: 2,
            pad: 1,
            bias: true,
            capture: true,
        };
        let flat = c2.out_len().ok_or_else(|| RclError::config("cnn", "invalid conv geometry"))?;
        let layers = vec![c1, LayerSpec::Relu, c2, LayerSpec::Relu, LayerSpec::dense(flat, dense), LayerSpec::Relu];
        Network::new(channels * height * width, layers, head_classes, seed)
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn head_classes(&self, task: usize) -> Option<usize> {
        self.heads.get(task).map(|h| h.bias.numel())
    }

    pub fn seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn feature_dim(&self) -> usize {
        self.heads[0].weight.rows()
    }

    fn check_task(&self, task: usize) -> Result<()> {
        if task >= self.heads.len() {
            return Err(RclError::Lookup(format!("no head for task {task} ({} heads)", self.heads.len())));
        }
        Ok(())
    }

    /// Every parameter key in canonical order.
    pub fn param_keys(&self) -> Vec<ParamKey> {
        let mut keys = self.shared_keys();
        for t in 0..self.heads.len() {
            keys.push(ParamKey::head(t, ParamRole::Weight));
            keys.push(ParamKey::head(t, ParamRole::Bias));
        }
        keys
    }

    pub fn shared_keys(&self) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        for (l, p) in self.params.iter().enumerate() {
            if p.weight.is_some() {
                keys.push(ParamKey::shared(l, ParamRole::Weight));
            }
            if p.bias.is_some() {
                keys.push(ParamKey::shared(l, ParamRole::Bias));
            }
        }
        keys
    }

    /// Shared parameters plus the head of `task`.
    pub fn trainable_keys(&self, task: usize) -> Vec<ParamKey> {
        let mut keys = self.shared_keys();
        keys.push(ParamKey::head(task, ParamRole::Weight));
        keys.push(ParamKey::head(task, ParamRole::Bias));
        keys
    }

    pub fn param(&self, key: &ParamKey) -> Option<&Tensor> {
        match (key.group, key.role) {
            (ParamGroup::Shared(l), ParamRole::Weight) => self.params.get(l)?.weight.as_ref(),
            (ParamGroup::Shared(l), ParamRole::Bias) => self.params.get(l)?.bias.as_ref(),
            (ParamGroup::Head(t), ParamRole::Weight) => self.heads.get(t).map(|h| &h.weight),
            (ParamGroup::Head(t), ParamRole::Bias) => self.heads.get(t).map(|h| &h.bias),
        }
    }

    fn param_mut(&mut self, key: &ParamKey) -> Option<&mut Tensor> {
        match (key.group, key.role) {
            (ParamGroup::Shared(l), ParamRole::Weight) => self.params.get_mut(l)?.weight.as_mut(),
            (ParamGroup::Shared(l), ParamRole::Bias) => self.params.get_mut(l)?.bias.as_mut(),
            (ParamGroup::Head(t), ParamRole::Weight) => self.heads.get_mut(t).map(|h| &mut h.weight),
            (ParamGroup::Head(t), ParamRole::Bias) => self.heads.get_mut(t).map(|h| &mut h.bias),
        }
    }

    /// Copies of the selected parameters.
    pub fn params_for(&self, keys: &[ParamKey]) -> ParamTensors {
        let mut out = ParamTensors::new();
        for k in keys {
            if let Some(t) = self.param(k) {
                out.insert(*k, t.clone());
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_keys().iter().map(|k| self.param(k).map_or(0, Tensor::numel)).sum()
    }

    /// Places the shared parameters and head `task` on the graph as leaves.
    pub fn bind(&self, g: &mut Graph, task: usize, trainable: bool) -> Result<BoundParams> {
        self.check_task(task)?;
        let mut vars = BTreeMap::new();
        for k in self.trainable_keys(task) {
            let t = self.param(&k).expect("trainable key").clone();
            let v = if trainable { g.param(t) } else { g.constant(t) };
            vars.insert(k, v);
        }
        Ok(BoundParams { vars })
    }

    /// Forward pass on a graph. `input` must be `n × input_len`. Dropout is active only
    /// when an RNG is supplied.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        input: Var,
        task: usize,
        capture: bool,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<GraphForward> {
        self.check_task(task)?;
        let n = g.value(input).rows();
        if g.value(input).cols() != self.input_len {
            return Err(RclError::dim(
                "forward",
                format!("batch has {} features, network expects {}", g.value(input).cols(), self.input_len),
            ));
        }
        let mut x = input;
        let mut reps = BTreeMap::new();
        let missing = || RclError::contract("forward", "parameter not bound");
        for (l, spec) in self.layers.iter().enumerate() {
            x = match spec {
                LayerSpec::Dense { .. } => {
                    if capture && spec.captures() {
                        reps.insert(l, with_ones_row(g.value(x).transpose(), spec.has_bias()));
                    }
                    let w = bound.var(&ParamKey::shared(l, ParamRole::Weight)).ok_or_else(missing)?;
                    let y = g.matmul(x, w)?;
                    match bound.var(&ParamKey::shared(l, ParamRole::Bias)) {
                        Some(b) => g.add_row_bias(y, b)?,
                        None => y,
                    }
                }
                LayerSpec::Conv { out_channels, .. } => {
                    let geo = spec.geometry().expect("validated at construction");
                    let patches = g.im2col(x, geo)?;
                    if capture && spec.captures() {
                        reps.insert(l, with_ones_row(g.value(patches).clone(), spec.has_bias()));
                    }
                    let w = bound.var(&ParamKey::shared(l, ParamRole::Weight)).ok_or_else(missing)?;
                    let wmat = g.reshape(w, &[*out_channels, geo.patch_len()])?;
                    let y = g.matmul(wmat, patches)?;
                    let y = match bound.var(&ParamKey::shared(l, ParamRole::Bias)) {
                        Some(b) => g.add_col_bias(y, b)?,
                        None => y,
                    };
                    g.channels_to_batch(y, n)?
                }
                LayerSpec::Relu => g.relu(x),
                LayerSpec::Dropout { rate } => match dropout_rng.as_deref_mut() {
                    Some(rng) if *rate > 0.0 => {
                        let keep = 1.0 - rate;
                        let mask = (0..g.value(x).numel())
                            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect();
                        g.mask(x, mask)?
                    }
                    _ => x,
                },
            };
        }
        let hw = bound.var(&ParamKey::head(task, ParamRole::Weight)).ok_or_else(missing)?;
        let hb = bound.var(&ParamKey::head(task, ParamRole::Bias)).ok_or_else(missing)?;
        let z = g.matmul(x, hw)?;
        let logits = g.add_row_bias(z, hb)?;
        Ok(GraphForward { logits, hidden: x, reps })
    }

    fn check_batch(&self, batch: &Tensor) -> Result<Tensor> {
        if batch.cols() != self.input_len {
            return Err(RclError::dim(
                "forward",
                format!("batch shape {:?} does not match input length {}", batch.shape(), self.input_len),
            ));
        }
        batch.reshape(&[batch.rows(), self.input_len])
    }

    /// Evaluation-mode forward returning plain values.
    pub fn forward(&self, batch: &Tensor, task: usize, want_capture: bool) -> Result<ForwardCapture> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, task, false)?;
        let x = g.constant(self.check_batch(batch)?);
        let out = self.forward_graph(&mut g, &bound, x, task, want_capture, None)?;
        let f = g.l2_normalize_rows(out.hidden)?;
        Ok(ForwardCapture { logits: g.value(out.logits).clone(), features: g.value(f).clone(), reps: out.reps })
    }

    /// Captured layer inputs without normalizing the features, so samples with all-zero
    /// penultimate activations are still usable.
    pub fn representations(&self, batch: &Tensor, task: usize) -> Result<BTreeMap<usize, Tensor>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, task, false)?;
        let x = g.constant(self.check_batch(batch)?);
        Ok(self.forward_graph(&mut g, &bound, x, task, true, None)?.reps)
    }

    /// Evaluation-mode logits only.
    pub fn logits(&self, batch: &Tensor, task: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, task, false)?;
        let x = g.constant(self.check_batch(batch)?);
        let out = self.forward_graph(&mut g, &bound, x, task, false, None)?;
        Ok(g.value(out.logits).clone())
    }

    /// Unnormalized penultimate activations.
    pub fn hidden(&self, batch: &Tensor, task: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, task, false)?;
        let x = g.constant(self.check_batch(batch)?);
        let out = self.forward_graph(&mut g, &bound, x, task, false, None)?;
        Ok(g.value(out.hidden).clone())
    }

    fn check_keys(&self, grads: &ParamTensors) -> Result<()> {
        let mut expected: Vec<ParamKey> = self.shared_keys();
        let mut heads: Vec<usize> = grads
            .keys()
            .filter_map(|k| match k.group {
                ParamGroup::Head(t) => Some(t),
                _ => None,
            })
            .collect();
        heads.dedup();
        for t in heads {
            expected.push(ParamKey::head(t, ParamRole::Weight));
            expected.push(ParamKey::head(t, ParamRole::Bias));
        }
        expected.sort();
        let got: Vec<ParamKey> = grads.keys().copied().collect();
        if got != expected {
            return Err(RclError::contract(
                "apply_update",
                format!(
                    "gradient keys [{}] do not match parameters [{}]",
                    got.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "),
                    expected.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
                ),
            ));
        }
        for (k, t) in grads.iter() {
            let p = self.param(k).ok_or_else(|| RclError::Lookup(format!("unknown parameter {k}")))?;
            if p.shape() != t.shape() {
                return Err(RclError::dim("apply_update", format!("{k}: {:?} vs {:?}", p.shape(), t.shape())));
            }
        }
        Ok(())
    }

    /// SGD step `θ ← θ − lr·grad`. `grads` must cover every shared parameter and whole heads.
    pub fn apply_update(&mut self, grads: &ParamTensors, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(RclError::Parameter(format!("learning rate must be non-negative, got {lr}")));
        }
        self.check_keys(grads)?;
        for (k, g) in grads.iter() {
            let p = self.param_mut(k).expect("checked");
            p.data_mut().iter_mut().zip(g.data()).for_each(|(w, d)| *w -= lr * d);
        }
        Ok(())
    }

    /// Adds `delta` to the matching parameters in place.
    pub fn perturb(&mut self, delta: &ParamTensors) -> Result<()> {
        for (k, d) in delta.iter() {
            let p = self.param_mut(k).ok_or_else(|| RclError::Lookup(format!("unknown parameter {k}")))?;
            if p.shape() != d.shape() {
                return Err(RclError::dim("perturb", format!("{k}: {:?} vs {:?}", p.shape(), d.shape())));
            }
            p.data_mut().iter_mut().zip(d.data()).for_each(|(w, v)| *w += v);
        }
        Ok(())
    }

    /// Copy with `θ̃ = θ + ε·φ`, `ε ~ N(0,1)` per scalar drawn from `seed`.
    pub fn reparameterize(&self, phi: &ParamTensors, seed: u64) -> Result<Network> {
        let eps = phi.gaussian_like(seed);
        let delta = eps_times_phi(&eps, phi)?;
        let mut out = self.clone();
        out.perturb(&delta)?;
        Ok(out)
    }

    pub fn flatten_params(&self) -> Tensor {
        let data: Vec<f64> = self
            .param_keys()
            .iter()
            .flat_map(|k| self.param(k).expect("key").data().to_vec())
            .collect();
        Tensor::vector(data)
    }

    pub fn unflatten_params(&mut self, flat: &Tensor) -> Result<()> {
        let total = self.param_count();
        if flat.numel() != total {
            return Err(RclError::dim("unflatten_params", format!("expected {total} values, got {}", flat.numel())));
        }
        let mut offset = 0;
        for k in self.param_keys() {
            let p = self.param_mut(&k).expect("key");
            let n = p.numel();
            p.data_mut().copy_from_slice(&flat.data()[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Indices of dense/conv layers whose inputs feed the projection memory.
    pub fn capture_layers(&self) -> Vec<usize> {
        self.layers.iter().enumerate().filter(|(_, s)| s.captures()).map(|(i, _)| i).collect()
    }

    /// Row dimension of the projection view of `layer`: inputs per output unit, plus one for a bias.
    pub fn rep_dim(&self, layer: usize) -> Option<usize> {
        let spec = self.layers.get(layer)?;
        let base = match spec {
            LayerSpec::Dense { fan_in, .. } => *fan_in,
            LayerSpec::Conv { .. } => spec.geometry()?.patch_len(),
            _ => return None,
        };
        Some(base + usize::from(spec.has_bias()))
    }

    /// Gradient of `layer` as a `rep_dim × outputs` matrix: the dense weight (or the conv
    /// kernel reshaped to `(C_I·k·k) × C_O`) with the bias stacked as a final row.
    pub fn projection_view(&self, layer: usize, grads: &ParamTensors) -> Result<Tensor> {
        let spec = self.layers.get(layer).ok_or_else(|| RclError::Lookup(format!("layer {layer}")))?;
        let w = grads
            .get(&ParamKey::shared(layer, ParamRole::Weight))
            .ok_or_else(|| RclError::contract("projection_view", format!("no weight gradient for layer {layer}")))?;
        let base = match spec {
            LayerSpec::Dense { .. } => w.clone(),
            LayerSpec::Conv { out_channels, .. } => w.reshape(&[*out_channels, w.numel() / out_channels])?.transpose(),
            _ => return Err(RclError::contract("projection_view", format!("layer {layer} has no parameters"))),
        };
        if !spec.has_bias() {
            return Ok(base);
        }
        let b = grads
            .get(&ParamKey::shared(layer, ParamRole::Bias))
            .ok_or_else(|| RclError::contract("projection_view", format!("no bias gradient for layer {layer}")))?;
        let mut data = base.into_data();
        data.extend_from_slice(b.data());
        Tensor::new(vec![self.rep_dim(layer).expect("layer"), b.numel()], data)
    }

    /// Inverse of [`Network::projection_view`].
    pub fn write_projection_view(&self, layer: usize, view: &Tensor, grads: &mut ParamTensors) -> Result<()> {
        let spec = &self.layers[layer];
        let outputs = view.cols();
        let base_rows = view.rows() - usize::from(spec.has_bias());
        let base = Tensor::new(vec![base_rows, outputs], view.data()[..base_rows * outputs].to_vec())?;
        let wkey = ParamKey::shared(layer, ParamRole::Weight);
        let shape = self.param(&wkey).expect("weight").shape().to_vec();
        let w = match spec {
            LayerSpec::Conv { .. } => Tensor::new(shape, base.transpose().into_data())?,
            _ => Tensor::new(shape, base.into_data())?,
        };
        grads.insert(wkey, w);
        if spec.has_bias() {
            grads.insert(
                ParamKey::shared(layer, ParamRole::Bias),
                Tensor::vector(view.data()[base_rows * outputs..].to_vec()),
            );
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, metadata: serde_json::Value) -> Result<()> {
        let doc = Checkpoint { version: CHECKPOINT_VERSION, network: self.clone(), metadata };
        let text = serde_json::to_string(&doc)?;
        std::fs::write(path, text).map_err(|e| RclError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Network, serde_json::Value)> {
        let text = std::fs::read_to_string(path).map_err(|e| RclError::io(path, e))?;
        let doc: Checkpoint = serde_json::from_str(&text)?;
        if doc.version != CHECKPOINT_VERSION {
            return Err(RclError::Format { offset: 0, detail: format!("unsupported checkpoint version {}", doc.version) });
        }
        Ok((doc.network, doc.metadata))
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    network: Network,
    #[serde(default)]
    metadata: serde_json::Value,
}

fn with_ones_row(m: Tensor, bias: bool) -> Tensor {
    if !bias {
        return m;
    }
    let (r, c) = (m.rows(), m.cols());
    let mut data = m.into_data();
    data.extend(std::iter::repeat_n(1.0, c));
    Tensor::new(vec![r + 1, c], data).expect("rep shape")
}

/// Elementwise `ε·φ` over matching keys.
pub(crate) fn eps_times_phi(eps: &ParamTensors, phi: &ParamTensors) -> Result<ParamTensors> {
    let mut out = ParamTensors::new();
    for (k, p) in phi.iter() {
        let e = eps.get(k).ok_or_else(|| RclError::contract("reparameterize", format!("no draw for {k}")))?;
        out.insert(*k, e.mul(p)?);
    }
    Ok(out)
}
