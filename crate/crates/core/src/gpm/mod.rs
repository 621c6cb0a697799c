//! Gradient projection memory.
//!
//! After each task the inputs of every captured layer are collected into a representation
//! matrix `R` (one column per sample, or per patch for conv layers). The part of `R` not yet
//! explained by the stored basis `M` is decomposed by SVD, and just enough leading left
//! singular vectors are appended to `M` to reach the energy threshold `eps_th`. Gradients of
//! later tasks are projected onto the orthogonal complement of `M`.

mod svd;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{RclError, Result};
use crate::model::{Network, ParamTensors};
use crate::tensor::Tensor;

pub use svd::{svd, Svd};

/// Singular values below this fraction of `‖R‖_F` are treated as zero when choosing `k`.
const RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionMemory {
    /// Per-layer `d_l × m_l` bases with orthonormal columns.
    bases: BTreeMap<usize, Tensor>,
    eps_th: f64,
    /// Ranks appended per layer, one entry per completed update.
    history: Vec<BTreeMap<usize, usize>>,
}

impl ProjectionMemory {
    pub fn new(eps_th: f64) -> Result<Self> {
        check_threshold(eps_th)?;
        Ok(ProjectionMemory { bases: BTreeMap::new(), eps_th, history: Vec::new() })
    }

    pub fn eps_th(&self) -> f64 {
        self.eps_th
    }

    pub fn set_eps_th(&mut self, eps_th: f64) -> Result<()> {
        check_threshold(eps_th)?;
        self.eps_th = eps_th;
        Ok(())
    }

    pub fn basis(&self, layer: usize) -> Option<&Tensor> {
        self.bases.get(&layer)
    }

    pub fn bases(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.bases.iter().map(|(l, m)| (*l, m))
    }

    pub fn width(&self, layer: usize) -> usize {
        self.bases.get(&layer).map_or(0, Tensor::cols)
    }

    pub fn widths(&self) -> BTreeMap<usize, usize> {
        self.bases.iter().map(|(l, m)| (*l, m.cols())).collect()
    }

    pub fn history(&self) -> &[BTreeMap<usize, usize>] {
        &self.history
    }

    pub fn is_empty(&self) -> bool {
        self.bases.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| RclError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RclError::io(path, e))?;
        let mem: ProjectionMemory = serde_json::from_str(&text)?;
        check_threshold(mem.eps_th)?;
        Ok(mem)
    }
}

fn check_threshold(eps_th: f64) -> Result<()> {
    if !(eps_th > 0.0 && eps_th <= 1.0) {
        return Err(RclError::Parameter(format!("eps_th must lie in (0, 1], got {eps_th}")));
    }
    Ok(())
}

/// Forward `samples` through the network and return each captured layer's input matrix.
pub fn collect_representations(net: &Network, samples: &Tensor, task: usize) -> Result<BTreeMap<usize, Tensor>> {
    if net.capture_layers().is_empty() {
        return Err(RclError::config("layers", "no layer captures representations for the projection memory"));
    }
    if samples.numel() == 0 {
        return Err(RclError::contract("collect_representations", "no samples"));
    }
    net.representations(samples, task)
}

/// `R − M·Mᵀ·R`, or `R` itself when there is no basis yet.
pub fn residual(r: &Tensor, m: Option<&Tensor>) -> Result<Tensor> {
    match m {
        None => Ok(r.clone()),
        Some(m) => r.sub(&project_onto(r, m)?),
    }
}

/// `M·Mᵀ·X`.
fn project_onto(x: &Tensor, m: &Tensor) -> Result<Tensor> {
    if m.rows() != x.rows() {
        return Err(RclError::dim("projection", format!("basis {:?} vs matrix {:?}", m.shape(), x.shape())));
    }
    m.matmul(&m.transpose().matmul(x)?)
}

/// Smallest `k` such that `‖M·Mᵀ·R‖² + Σ_{i≤k} σ_i(R̂)² ≥ eps_th·‖R‖²`.
pub fn select_k(r_hat: &Tensor, r: &Tensor, m: Option<&Tensor>, eps_th: f64) -> Result<usize> {
    check_threshold(eps_th)?;
    let sigma = svd(r_hat)?.sigma;
    let base = match m {
        Some(m) => project_onto(r, m)?.frobenius_sq(),
        None => 0.0,
    };
    Ok(select_k_from_spectrum(&sigma, base, r.frobenius_sq(), eps_th))
}

pub(crate) fn select_k_from_spectrum(sigma: &[f64], base: f64, total: f64, eps_th: f64) -> usize {
    let target = eps_th * total;
    if total == 0.0 || base >= target {
        return 0;
    }
    let floor = RANK_TOL * total.sqrt();
    let rank = sigma.iter().filter(|&&s| s > floor).count();
    let mut acc = base;
    for (i, s) in sigma.iter().enumerate() {
        acc += s * s;
        if acc >= target {
            return (i + 1).min(rank);
        }
    }
    rank
}

/// Appends the first `k` columns of `u` to the basis of `layer`. New columns are
/// re-orthogonalized against the stored ones; columns already in the span are dropped.
pub fn update_memory(memory: &mut ProjectionMemory, layer: usize, u: &Tensor, k: usize) -> Result<()> {
    if k == 0 {
        return Ok(());
    }
    if k > u.cols() {
        return Err(RclError::dim("update_memory", format!("k = {k} exceeds {} singular vectors", u.cols())));
    }
    let d = u.rows();
    let existing = memory.bases.get(&layer);
    if let Some(m) = existing {
        if m.rows() != d {
            return Err(RclError::dim("update_memory", format!("basis rows {} vs vectors {d}", m.rows())));
        }
    }
    let current = existing.map_or(0, Tensor::cols);
    if current + k > d {
        return Err(RclError::dim(
            "update_memory",
            format!("layer {layer}: {current} + {k} basis vectors exceed dimension {d}"),
        ));
    }
    let fresh = u.columns(0..k);
    let merged = match existing {
        None => fresh,
        Some(m) => {
            let mut cols: Vec<Vec<f64>> = (0..m.cols()).map(|j| column(m, j)).collect();
            let keep = cols.len();
            for j in 0..k {
                let mut v = column(&fresh, j);
                for _ in 0..2 {
                    for c in &cols {
                        let dot: f64 = c.iter().zip(&v).map(|(a, b)| a * b).sum();
                        v.iter_mut().zip(c).for_each(|(x, y)| *x -= dot * y);
                    }
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-8 {
                    cols.push(v.into_iter().map(|x| x / norm).collect());
                }
            }
            let mut out = m.clone();
            for c in &cols[keep..] {
                out = out.hcat(&Tensor::new(vec![d, 1], c.clone())?)?;
            }
            out
        }
    };
    memory.bases.insert(layer, merged);
    Ok(())
}

fn column(m: &Tensor, j: usize) -> Vec<f64> {
    (0..m.rows()).map(|i| m.at(i, j)).collect()
}

/// Runs one memory update from the representations of `samples`; returns the rank added per layer.
pub fn update_gpm(
    memory: &mut ProjectionMemory,
    net: &Network,
    samples: &Tensor,
    task: usize,
) -> Result<BTreeMap<usize, usize>> {
    let reps = collect_representations(net, samples, task)?;
    let mut added = BTreeMap::new();
    for (layer, r) in reps {
        let m = memory.bases.get(&layer).cloned();
        let r_hat = residual(&r, m.as_ref())?;
        let dec = svd(&r_hat)?;
        let base = match &m {
            Some(m) => project_onto(&r, m)?.frobenius_sq(),
            None => 0.0,
        };
        let room = r.rows() - m.as_ref().map_or(0, Tensor::cols);
        let k = select_k_from_spectrum(&dec.sigma, base, r.frobenius_sq(), memory.eps_th).min(room);
        let before = memory.width(layer);
        update_memory(memory, layer, &dec.u, k)?;
        added.insert(layer, memory.width(layer) - before);
    }
    memory.history.push(added.clone());
    Ok(added)
}

/// `ĝ_l = g_l − M_l·M_lᵀ·g_l` on the projection view of each layer with a basis.
pub fn project_gradient(grads: &ParamTensors, memory: &ProjectionMemory, net: &Network) -> Result<ParamTensors> {
    let mut out = grads.clone();
    for (&layer, m) in &memory.bases {
        let view = net.projection_view(layer, grads)?;
        if view.rows() != m.rows() {
            return Err(RclError::dim(
                "project_gradient",
                format!("layer {layer}: gradient view {:?} vs basis {:?}", view.shape(), m.shape()),
            ));
        }
        let projected = view.sub(&project_onto(&view, m)?)?;
        net.write_projection_view(layer, &projected, &mut out)?;
    }
    Ok(out)
}

/// `max_l ‖M_lᵀ·ĝ_l‖_∞`, the quantity the orthogonality audit bounds.
pub fn projection_residual(grads: &ParamTensors, memory: &ProjectionMemory, net: &Network) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (&layer, m) in &memory.bases {
        let view = net.projection_view(layer, grads)?;
        worst = worst.max(m.transpose().matmul(&view)?.max_abs());
    }
    Ok(worst)
}
