//! Scalar objectives built on the autodiff graph.
//!
//! Each loss has a graph form (`&mut Graph` in, scalar [`Var`] out) used during training,
//! and a `*_value` form on plain tensors for evaluation and tests.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{RclError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossParams {
    /// Gaussian-potential temperature of the uniformity term.
    pub tau: f64,
    /// Exponent on positive-pair distances in the alignment term.
    pub align_exponent: f64,
    /// Weight of the loss on mixed samples.
    pub lambda: f64,
    /// Weight of the uniformity/alignment loss.
    pub kappa: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams { tau: 2.0, align_exponent: 2.0, lambda: 0.1, kappa: 1.0 }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, detail: &str| Err(RclError::config(format!("loss.{field}"), detail));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau", "must be positive");
        }
        if !(self.align_exponent > 0.0 && self.align_exponent.is_finite()) {
            return bad("align_exponent", "must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be non-negative");
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return bad("kappa", "must be non-negative");
        }
        Ok(())
    }
}

/// One-hot rows for class indices.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    if labels.is_empty() {
        return Err(RclError::contract("one_hot", "empty label list"));
    }
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(RclError::contract("one_hot", format!("label {y} out of {classes} classes")));
        }
        t.set(i, y, 1.0);
    }
    Ok(t)
}

/// Mean over rows of `−Σ_c target_c · log softmax(logits)_c`. `targets` may be soft.
pub fn cross_entropy(g: &mut Graph, logits: Var, targets: Var) -> Result<Var> {
    let n = g.value(logits).rows();
    if g.value(logits).shape() != g.value(targets).shape() {
        return Err(RclError::dim(
            "cross_entropy",
            format!("logits {:?} vs targets {:?}", g.value(logits).shape(), g.value(targets).shape()),
        ));
    }
    if n == 0 {
        return Err(RclError::contract("cross_entropy", "empty batch"));
    }
    let lp = g.log_softmax_rows(logits);
    let prod = g.mul(lp, targets)?;
    let total = g.sum(prod);
    Ok(g.scale(total, -1.0 / n as f64))
}

/// `log` of the mean Gaussian potential over ordered pairs `i ≠ j` within one batch.
pub fn uniformity(g: &mut Graph, features: Var, tau: f64) -> Result<Var> {
    if g.value(features).rows() < 2 {
        return Err(RclError::contract("uniformity", "need at least two samples"));
    }
    let d = g.pairwise_sq_dist(features, features)?;
    let off = g.off_diagonal(d)?;
    let z = g.scale(off, -tau);
    Ok(g.log_mean_exp(z))
}

/// `log` of the mean Gaussian potential over the row-aligned pairs `(a_k, b_k)`.
pub fn paired_uniformity(g: &mut Graph, a: Var, b: Var, tau: f64) -> Result<Var> {
    let d = g.row_sq_dist(a, b)?;
    let z = g.scale(d, -tau);
    Ok(g.log_mean_exp(z))
}

/// Mean over rows of `‖a_k − b_k‖^α`, a non-negative quantity to be minimized.
pub fn alignment(g: &mut Graph, a: Var, b: Var, align_exponent: f64) -> Result<Var> {
    let d = g.row_sq_dist(a, b)?;
    let p = if align_exponent == 2.0 { d } else { g.powf(d, align_exponent / 2.0)? };
    Ok(g.mean(p))
}

/// Uniformity across the `(x_i, x_j)` pairs plus the mean alignment of each side with the mixed sample.
pub fn l_ua(g: &mut Graph, f_xi: Var, f_xj: Var, f_mix: Var, params: &LossParams) -> Result<Var> {
    let (si, sj, sm) = (g.value(f_xi).shape(), g.value(f_xj).shape(), g.value(f_mix).shape());
    if si != sj || si != sm {
        return Err(RclError::dim("l_ua", format!("{si:?}, {sj:?}, {sm:?}")));
    }
    let u = paired_uniformity(g, f_xi, f_xj, params.tau)?;
    let ai = alignment(g, f_xi, f_mix, params.align_exponent)?;
    let aj = alignment(g, f_xj, f_mix, params.align_exponent)?;
    let a = g.add(ai, aj)?;
    let half = g.scale(a, 0.5);
    g.add(u, half)
}

/// `log mean_i exp(−τ·(θ_i − θ̃_i)²)` over the scalar coordinates of one layer.
pub fn parameter_uniformity(g: &mut Graph, theta: Var, theta_tilde: Var, tau: f64) -> Result<Var> {
    let diff = g.sub(theta, theta_tilde)?;
    let sq = g.square(diff);
    let z = g.scale(sq, -tau);
    Ok(g.log_mean_exp(z))
}

pub fn cross_entropy_value(logits: &Tensor, targets: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let (l, t) = (g.constant(logits.clone()), g.constant(targets.clone()));
    let v = cross_entropy(&mut g, l, t)?;
    Ok(g.scalar_value(v))
}

pub fn cross_entropy_labels(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    cross_entropy_value(logits, &one_hot(labels, logits.cols())?)
}

pub fn uniformity_value(features: &Tensor, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let v = uniformity(&mut g, f, tau)?;
    Ok(g.scalar_value(v))
}

pub fn alignment_value(a: &Tensor, b: &Tensor, align_exponent: f64) -> Result<f64> {
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let v = alignment(&mut g, av, bv, align_exponent)?;
    Ok(g.scalar_value(v))
}

pub fn l_ua_value(f_xi: &Tensor, f_xj: &Tensor, f_mix: &Tensor, params: &LossParams) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b, c) = (g.constant(f_xi.clone()), g.constant(f_xj.clone()), g.constant(f_mix.clone()));
    let v = l_ua(&mut g, a, b, c, params)?;
    Ok(g.scalar_value(v))
}

pub fn parameter_uniformity_value(theta: &Tensor, theta_tilde: &Tensor, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(theta.clone()), g.constant(theta_tilde.clone()));
    let v = parameter_uniformity(&mut g, a, b, tau)?;
    Ok(g.scalar_value(v))
}
