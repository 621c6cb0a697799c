//! Mixup, worst-case perturbations of the mixing coefficient and of the weights,
//! φ-pretraining of the initialization, and the robust gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{RclError, Result};
use crate::losses::{cross_entropy, l_ua, one_hot, parameter_uniformity, LossParams};
use crate::model::{BoundParams, Network, ParamTensors};
use crate::tensor::Tensor;

/// Gradients below this norm are treated as zero.
const DEGENERATE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    /// Radius for the mixing-coefficient perturbation.
    pub rho_data: f64,
    /// Radius for the weight perturbation.
    pub rho_weight: f64,
    /// Beta(α, α) parameter for mixup.
    pub mixup_alpha: f64,
    /// Clip bound for φ.
    pub phi_range: f64,
    pub phi_epochs: usize,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig { rho_data: 0.05, rho_weight: 0.05, mixup_alpha: 20.0, phi_range: 1e-4, phi_epochs: 5 }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("rho_data", self.rho_data),
            ("rho_weight", self.rho_weight),
            ("mixup_alpha", self.mixup_alpha),
            ("phi_range", self.phi_range),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(RclError::config(format!("perturb.{field}"), format!("must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// A labelled batch: `x` is `n × input_len`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(x: Tensor, labels: Vec<usize>) -> Result<Self> {
        if x.rows() != labels.len() || labels.is_empty() {
            return Err(RclError::contract(
                "batch",
                format!("{} rows vs {} labels", x.rows(), labels.len()),
            ));
        }
        Ok(Batch { x, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, index: &[usize]) -> Result<Batch> {
        let cols = self.x.cols();
        let mut data = Vec::with_capacity(index.len() * cols);
        let mut labels = Vec::with_capacity(index.len());
        for &i in index {
            if i >= self.len() {
                return Err(RclError::contract("batch.select", format!("row {i} of {}", self.len())));
            }
            data.extend_from_slice(&self.x.data()[i * cols..(i + 1) * cols]);
            labels.push(self.labels[i]);
        }
        Batch::new(Tensor::new(vec![index.len(), cols], data)?, labels)
    }
}

/// Row-aligned mixup of two batches with one coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct MixupPair {
    pub x_i: Tensor,
    pub y_i: Tensor,
    pub x_j: Tensor,
    pub y_j: Tensor,
    pub gamma: f64,
    pub x_mix: Tensor,
    pub y_mix: Tensor,
}

impl MixupPair {
    /// The same pair remixed with another coefficient.
    pub fn with_gamma(&self, gamma: f64) -> Result<MixupPair> {
        mixup(&self.x_i, &self.y_i, &self.x_j, &self.y_j, gamma)
    }

    /// Hard labels of the `x_i` side.
    pub fn labels_i(&self) -> Vec<usize> {
        argmax_rows(&self.y_i)
    }
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
        })
        .collect()
}

pub fn sample_gamma(mixup_alpha: f64, rng: &mut impl Rng) -> Result<f64> {
    let beta = Beta::new(mixup_alpha, mixup_alpha)
        .map_err(|e| RclError::Parameter(format!("mixup_alpha = {mixup_alpha}: {e}")))?;
    Ok(beta.sample(rng))
}

pub fn mixup(x_i: &Tensor, y_i: &Tensor, x_j: &Tensor, y_j: &Tensor, gamma: f64) -> Result<MixupPair> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(RclError::contract("mixup", format!("gamma = {gamma} outside [0, 1]")));
    }
    if x_i.shape() != x_j.shape() || y_i.shape() != y_j.shape() || x_i.rows() != y_i.rows() {
        return Err(RclError::dim(
            "mixup",
            format!("x {:?}/{:?}, y {:?}/{:?}", x_i.shape(), x_j.shape(), y_i.shape(), y_j.shape()),
        ));
    }
    let blend = |a: &Tensor, b: &Tensor| {
        let data = a.data().iter().zip(b.data()).map(|(p, q)| gamma * p + (1.0 - gamma) * q).collect();
        Tensor::new(a.shape().to_vec(), data)
    };
    Ok(MixupPair {
        x_mix: blend(x_i, x_j)?,
        y_mix: blend(y_i, y_j)?,
        x_i: x_i.clone(),
        y_i: y_i.clone(),
        x_j: x_j.clone(),
        y_j: y_j.clone(),
        gamma,
    })
}

/// Mixes `batch` with its rows reordered by `perm`.
pub fn mixup_batch(batch: &Batch, perm: &[usize], classes: usize, gamma: f64) -> Result<MixupPair> {
    if perm.len() != batch.len() {
        return Err(RclError::contract("mixup_batch", format!("{} rows vs permutation of {}", batch.len(), perm.len())));
    }
    let other = batch.select(perm)?;
    mixup(
        &batch.x,
        &one_hot(&batch.labels, classes)?,
        &other.x,
        &one_hot(&other.labels, classes)?,
        gamma,
    )
}

/// Which loss terms an objective needs.
#[derive(Clone, Copy, Debug)]
struct Terms {
    clean: bool,
    mixed: bool,
    ua: bool,
}

struct Built {
    clean: Option<Var>,
    mixed: Option<Var>,
    ua: Option<Var>,
}

/// Places the clean, mixed and uniformity/alignment losses on `g`; the mixed sample
/// is rebuilt from `gamma` so the graph differentiates through the mixing.
fn build_terms(
    g: &mut Graph,
    net: &Network,
    bound: &BoundParams,
    task: usize,
    pair: &MixupPair,
    gamma: Var,
    terms: Terms,
    params: &LossParams,
) -> Result<Built> {
    let xi = g.constant(pair.x_i.clone());
    let clean_fwd = if terms.clean || terms.ua { Some(net.forward_graph(g, bound, xi, task, false, None)?) } else { None };
    let clean = match (&clean_fwd, terms.clean) {
        (Some(f), true) => {
            let y = g.constant(pair.y_i.clone());
            Some(cross_entropy(g, f.logits, y)?)
        }
        _ => None,
    };
    let (mixed, ua) = if terms.mixed || terms.ua {
        let one = g.constant(Tensor::scalar(1.0));
        let rest = g.sub(one, gamma)?;
        let xj = g.constant(pair.x_j.clone());
        let a = g.scale_by(xi, gamma)?;
        let b = g.scale_by(xj, rest)?;
        let xm = g.add(a, b)?;
        let mix_fwd = net.forward_graph(g, bound, xm, task, false, None)?;
        let mixed = if terms.mixed {
            let yi = g.constant(pair.y_i.clone());
            let yj = g.constant(pair.y_j.clone());
            let ya = g.scale_by(yi, gamma)?;
            let yb = g.scale_by(yj, rest)?;
            let ym = g.add(ya, yb)?;
            Some(cross_entropy(g, mix_fwd.logits, ym)?)
        } else {
            None
        };
        let ua = if terms.ua {
            let xj_fwd = net.forward_graph(g, bound, xj, task, false, None)?;
            let fi = g.l2_normalize_rows(clean_fwd.as_ref().expect("clean forward").hidden)?;
            let fj = g.l2_normalize_rows(xj_fwd.hidden)?;
            let fm = g.l2_normalize_rows(mix_fwd.hidden)?;
            Some(l_ua(g, fi, fj, fm, params)?)
        } else {
            None
        };
        (mixed, ua)
    } else {
        (None, None)
    };
    Ok(Built { clean, mixed, ua })
}

/// `Σ w·term` over the present terms; zero when none has weight.
fn weighted(g: &mut Graph, parts: &[(Option<Var>, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in parts {
        if let (Some(v), true) = (v, w != 0.0) {
            let s = if w == 1.0 { v } else { g.scale(v, w) };
            acc = Some(match acc {
                None => s,
                Some(a) => g.add(a, s)?,
            });
        }
    }
    Ok(acc.unwrap_or_else(|| g.constant(Tensor::scalar(0.0))))
}

fn terms_for(clean: f64, mixed: f64, ua: f64) -> Terms {
    Terms { clean: clean != 0.0, mixed: mixed != 0.0, ua: ua != 0.0 }
}

/// Scales `v` to norm `rho`; `None` when `‖v‖ < 1e-12`.
pub fn normalize_to_radius(v: &[f64], rho: f64) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < DEGENERATE || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|x| rho * x / norm).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaPerturbation {
    /// `∂/∂γ` of the mixed-sample objective.
    pub derivative: f64,
    pub epsilon: f64,
    pub gamma_hat: f64,
    pub degenerate: bool,
}

fn gamma_from_derivative(gamma: f64, d: f64, rho_data: f64) -> GammaPerturbation {
    // For a one-dimensional γ, ρ·d/|d| is exactly ρ·sign(d).
    let (epsilon, degenerate) = match normalize_to_radius(&[d], rho_data) {
        Some(_) => (rho_data * d.signum(), false),
        None => (0.0, true),
    };
    GammaPerturbation { derivative: d, epsilon, gamma_hat: (gamma + epsilon).clamp(0.0, 1.0), degenerate }
}

/// `ε̂ = ρ·d/|d|` with `d = ∇_γ[L(W, x̃) + κ·L_ua]`, and `γ̂ = clamp(γ + ε̂, 0, 1)`.
pub fn worst_case_gamma(
    net: &Network,
    task: usize,
    pair: &MixupPair,
    params: &LossParams,
    rho_data: f64,
) -> Result<GammaPerturbation> {
    check_gamma(pair.gamma)?;
    let mut g = Graph::new();
    let bound = net.bind(&mut g, task, false)?;
    let gamma = g.param(Tensor::scalar(pair.gamma));
    let built = build_terms(&mut g, net, &bound, task, pair, gamma, terms_for(0.0, 1.0, params.kappa), params)?;
    let obj = weighted(&mut g, &[(built.mixed, 1.0), (built.ua, params.kappa)])?;
    g.backward(obj)?;
    Ok(gamma_from_derivative(pair.gamma, g.grad(gamma).item(), rho_data))
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(RclError::contract("worst_case_gamma", format!("gamma = {gamma} outside [0, 1]")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightPerturbation {
    pub upsilon: ParamTensors,
    /// Global norm of the objective gradient.
    pub grad_norm: f64,
    pub degenerate: bool,
}

fn weight_from_grads(grads: &ParamTensors, rho_weight: f64) -> WeightPerturbation {
    let norm = grads.norm();
    if norm < DEGENERATE || !norm.is_finite() {
        return WeightPerturbation { upsilon: grads.zeros_like(), grad_norm: norm, degenerate: true };
    }
    WeightPerturbation { upsilon: grads.scale(rho_weight / norm), grad_norm: norm, degenerate: false }
}

/// Gradient over the trainable parameters of `task` of `L(x) + λ·L(x̃) + κ·L_ua`.
pub fn objective_gradient(net: &Network, task: usize, pair: &MixupPair, params: &LossParams) -> Result<(f64, ParamTensors)> {
    let mut g = Graph::new();
    let bound = net.bind(&mut g, task, true)?;
    let gamma = g.constant(Tensor::scalar(pair.gamma));
    let built = build_terms(&mut g, net, &bound, task, pair, gamma, terms_for(1.0, params.lambda, params.kappa), params)?;
    let obj = weighted(&mut g, &[(built.clean, 1.0), (built.mixed, params.lambda), (built.ua, params.kappa)])?;
    g.backward(obj)?;
    Ok((g.scalar_value(obj), bound.grads(&g)))
}

/// Value of `L(x) + λ·L(x̃) + κ·L_ua` without gradients.
pub fn objective_value(net: &Network, task: usize, pair: &MixupPair, params: &LossParams) -> Result<f64> {
    let mut g = Graph::new();
    let bound = net.bind(&mut g, task, false)?;
    let gamma = g.constant(Tensor::scalar(pair.gamma));
    let built = build_terms(&mut g, net, &bound, task, pair, gamma, terms_for(1.0, params.lambda, params.kappa), params)?;
    let obj = weighted(&mut g, &[(built.clean, 1.0), (built.mixed, params.lambda), (built.ua, params.kappa)])?;
    Ok(g.scalar_value(obj))
}

/// `υ̂ = ρ·g/‖g‖₂` for the gradient `g` of the combined objective, norm over all trainable parameters.
pub fn worst_case_weight(
    net: &Network,
    task: usize,
    pair: &MixupPair,
    params: &LossParams,
    rho_weight: f64,
) -> Result<WeightPerturbation> {
    let (_, grads) = objective_gradient(net, task, pair, params)?;
    Ok(weight_from_grads(&grads, rho_weight))
}

/// Both perturbations from a single forward pass with two reverse sweeps.
pub fn joint_perturbations(
    net: &Network,
    task: usize,
    pair: &MixupPair,
    params: &LossParams,
    rho_data: f64,
    rho_weight: f64,
) -> Result<(GammaPerturbation, WeightPerturbation)> {
    check_gamma(pair.gamma)?;
    let mut g = Graph::new();
    let bound = net.bind(&mut g, task, true)?;
    let gamma = g.param(Tensor::scalar(pair.gamma));
    let terms = Terms { clean: true, mixed: true, ua: params.kappa != 0.0 };
    let built = build_terms(&mut g, net, &bound, task, pair, gamma, terms, params)?;
    let obj_gamma = weighted(&mut g, &[(built.mixed, 1.0), (built.ua, params.kappa)])?;
    let obj_weight = weighted(&mut g, &[(built.clean, 1.0), (built.mixed, params.lambda), (built.ua, params.kappa)])?;
    g.backward(obj_gamma)?;
    let d = g.grad(gamma).item();
    g.zero_grad();
    g.backward(obj_weight)?;
    Ok((gamma_from_derivative(pair.gamma, d, rho_data), weight_from_grads(&bound.grads(&g), rho_weight)))
}

/// Value and gradient of the combined objective evaluated at `W + υ̂`; `net` is not modified.
pub fn robust_gradient(
    net: &Network,
    task: usize,
    upsilon: &ParamTensors,
    pair: &MixupPair,
    params: &LossParams,
) -> Result<(f64, ParamTensors)> {
    let mut shifted = net.clone();
    shifted.perturb(upsilon)?;
    objective_gradient(&shifted, task, pair, params)
}

#[derive(Clone, Debug)]
pub struct PhiPretrain {
    pub net: Network,
    pub phi: ParamTensors,
    pub eps: ParamTensors,
    /// Largest `|θ̃ − θ| − |ε|·phi_range` seen at any step (≤ 0 when the bound holds).
    pub max_bound_excess: f64,
}

/// Learns a per-coordinate perturbation scale `φ` for the shared layers and head 0 by
/// descending the parameter uniformity of `θ̃ = θ + ε·φ`, clipping `φ` after every step,
/// and returns the network with `θ̃` as its new initialization.
pub fn robust_pretrain_phi(net: &Network, cfg: &PerturbConfig, tau: f64, lr: f64, seed: u64) -> Result<PhiPretrain> {
    if !(cfg.phi_range > 0.0 && cfg.phi_range.is_finite()) {
        return Err(RclError::Parameter(format!("phi_range must be positive, got {}", cfg.phi_range)));
    }
    if !(tau > 0.0) {
        return Err(RclError::Parameter(format!("tau must be positive, got {tau}")));
    }
    let theta = net.params_for(&net.trainable_keys(0));
    if cfg.phi_epochs == 0 {
        let zero = theta.zeros_like();
        return Ok(PhiPretrain { net: net.clone(), phi: zero.clone(), eps: zero, max_bound_excess: 0.0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phi = theta.zeros_like();
    for (_, t) in phi.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-cfg.phi_range..=cfg.phi_range));
    }
    let eps = theta.gaussian_like(rng.random());
    let mut excess = f64::NEG_INFINITY;
    for _ in 0..cfg.phi_epochs {
        for (key, th) in theta.iter() {
            let mut g = Graph::new();
            let t = g.constant(th.clone());
            let e = g.constant(eps.get(key).expect("same keys").clone());
            let p = g.param(phi.get(key).expect("same keys").clone());
            let ep = g.mul(e, p)?;
            let tilde = g.add(t, ep)?;
            let loss = parameter_uniformity(&mut g, t, tilde, tau)?;
            g.backward(loss)?;
            let grad = g.grad(p);
            let slot = phi.get_mut(key).expect("same keys");
            slot.data_mut()
                .iter_mut()
                .zip(grad.data())
                .for_each(|(v, d)| *v = (*v - lr * d).clamp(-cfg.phi_range, cfg.phi_range));
            let e = eps.get(key).expect("same keys");
            for (pv, ev) in slot.data().iter().zip(e.data()) {
                excess = excess.max((ev * pv).abs() - ev.abs() * cfg.phi_range);
            }
        }
    }
    let mut out = net.clone();
    let delta = crate::model::eps_times_phi(&eps, &phi)?;
    out.perturb(&delta)?;
    Ok(PhiPretrain { net: out, phi, eps, max_bound_excess: excess })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(gamma: f64) -> (Network, MixupPair) {
        let net = Network::mlp(2, &[6], &[2], 3).unwrap();
        let batch = Batch::new(
            Tensor::from_rows(&[&[0.5, 1.0], &[-1.0, 0.2], &[0.3, -0.7], &[1.2, 0.4]]),
            vec![0, 1, 1, 0],
        )
        .unwrap();
        let p = mixup_batch(&batch, &[2, 3, 0, 1], 2, gamma).unwrap();
        (net, p)
    }

    #[test]
    fn mixup_endpoints_and_midpoint() {
        let xi = Tensor::from_rows(&[&[0.0, 2.0]]);
        let xj = Tensor::from_rows(&[&[2.0, 0.0]]);
        let (yi, yj) = (one_hot(&[0], 2).unwrap(), one_hot(&[1], 2).unwrap());
        let m = mixup(&xi, &yi, &xj, &yj, 0.5).unwrap();
        assert_eq!(m.x_mix.data(), &[1.0, 1.0]);
        assert_eq!(m.y_mix.data(), &[0.5, 0.5]);
        let one = mixup(&xi, &yi, &xj, &yj, 1.0).unwrap();
        assert_eq!((one.x_mix, one.y_mix), (xi.clone(), yi.clone()));
        let zero = mixup(&xi, &yi, &xj, &yj, 0.0).unwrap();
        assert_eq!((zero.x_mix, zero.y_mix), (xj.clone(), yj.clone()));
        assert!(mixup(&xi, &yi, &xj, &yj, 1.01).is_err());
    }

    #[test]
    fn gamma_sampling_is_seeded() {
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let x = sample_gamma(2.0, &mut a).unwrap();
            assert_eq!(x, sample_gamma(2.0, &mut b).unwrap());
            assert!((0.0..=1.0).contains(&x));
        }
        assert!(sample_gamma(0.0, &mut a).is_err());
    }

    #[test]
    fn epsilon_follows_derivative_sign_and_clamps() {
        let p = gamma_from_derivative(0.99, 3.0, 0.05);
        assert_eq!(p.epsilon, 0.05);
        assert_eq!(p.gamma_hat, 1.0);
        let n = gamma_from_derivative(0.5, -1e-3, 0.05);
        assert_eq!(n.epsilon, -0.05);
        let z = gamma_from_derivative(0.5, 1e-14, 0.05);
        assert!(z.degenerate && z.epsilon == 0.0 && z.gamma_hat == 0.5);
    }

    #[test]
    fn upsilon_has_radius_norm() {
        let (net, p) = pair(0.6);
        let w = worst_case_weight(&net, 0, &p, &LossParams::default(), 0.05).unwrap();
        assert!(!w.degenerate);
        assert!((w.upsilon.norm() - 0.05).abs() <= 1e-9);
        let twice = worst_case_weight(&net, 0, &p, &LossParams::default(), 0.1).unwrap();
        assert_eq!(twice.upsilon, w.upsilon.scale(2.0));
    }

    #[test]
    fn joint_path_matches_separate_passes() {
        let (net, p) = pair(0.4);
        let params = LossParams { lambda: 0.3, kappa: 0.7, ..LossParams::default() };
        let (gj, wj) = joint_perturbations(&net, 0, &p, &params, 0.05, 0.05).unwrap();
        let gs = worst_case_gamma(&net, 0, &p, &params, 0.05).unwrap();
        let ws = worst_case_weight(&net, 0, &p, &params, 0.05).unwrap();
        assert!((gj.derivative - gs.derivative).abs() <= 1e-12);
        assert_eq!(gj.epsilon, gs.epsilon);
        assert!(wj.upsilon.add_scaled(&ws.upsilon, -1.0).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn robust_gradient_is_pure_and_reduces_to_cross_entropy() {
        let (net, p) = pair(0.5);
        let before = net.clone();
        let zero = net.params_for(&net.trainable_keys(0)).zeros_like();
        let params = LossParams { lambda: 0.0, kappa: 0.0, ..LossParams::default() };
        let (_, g) = robust_gradient(&net, 0, &zero, &p, &params).unwrap();
        assert_eq!(net, before);
        let mut graph = Graph::new();
        let bound = net.bind(&mut graph, 0, true).unwrap();
        let x = graph.constant(p.x_i.clone());
        let out = net.forward_graph(&mut graph, &bound, x, 0, false, None).unwrap();
        let y = graph.constant(p.y_i.clone());
        let ce = cross_entropy(&mut graph, out.logits, y).unwrap();
        graph.backward(ce).unwrap();
        assert!(g.add_scaled(&bound.grads(&graph), -1.0).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn phi_pretraining_contracts() {
        let net = Network::mlp(3, &[4], &[2, 2], 5).unwrap();
        let cfg = PerturbConfig { phi_epochs: 0, ..PerturbConfig::default() };
        assert_eq!(robust_pretrain_phi(&net, &cfg, 2.0, 0.01, 1).unwrap().net, net);
        let cfg = PerturbConfig { phi_epochs: 3, ..PerturbConfig::default() };
        let out = robust_pretrain_phi(&net, &cfg, 2.0, 0.5, 1).unwrap();
        assert!(out.phi.max_abs() <= cfg.phi_range);
        assert!(out.max_bound_excess <= 0.0);
        let head1 = crate::model::ParamKey::head(1, crate::model::ParamRole::Weight);
        assert_eq!(out.net.param(&head1), net.param(&head1));
        let bad = PerturbConfig { phi_range: 0.0, ..cfg };
        assert!(matches!(robust_pretrain_phi(&net, &bad, 2.0, 0.5, 1), Err(RclError::Parameter(_))));
    }
}
