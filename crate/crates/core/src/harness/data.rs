//! Synthetic split-task generators and IDX-backed task splits.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{RclError, Result};
use crate::perturbation::Batch;
use crate::tensor::Tensor;

use super::idx::load_idx;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    SplitBlobs,
    SplitRings,
    IdxSplit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub tasks: usize,
    pub classes_per_task: usize,
    pub input_dim: usize,
    /// `[channels, height, width]` for image inputs.
    pub image_shape: Option<[usize; 3]>,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Cluster standard deviation (blobs) or radial standard deviation (rings).
    pub noise: f64,
    /// Minimum distance between blob means, in units of `noise`.
    pub min_separation: f64,
    /// Radius step between consecutive rings.
    pub ring_gap: f64,
    /// Isotropic noise added to ring samples in every input dimension.
    pub ambient_noise: f64,
    /// Ring planes are drawn inside the span of the first `plane_dims` coordinates
    /// (0 means all of them); smaller values make tasks overlap.
    pub plane_dims: usize,
    /// Standard deviation of each task's ring centre.
    pub center_spread: f64,
    pub idx: Option<IdxPaths>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::SplitRings,
            tasks: 3,
            classes_per_task: 2,
            input_dim: 16,
            image_shape: None,
            train_per_class: 100,
            val_per_class: 20,
            test_per_class: 100,
            noise: 0.1,
            min_separation: 6.0,
            ring_gap: 1.0,
            ambient_noise: 0.05,
            plane_dims: 0,
            center_spread: 0.0,
            idx: None,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, d: String| Err(RclError::config(format!("dataset.{f}"), d));
        if self.tasks == 0 {
            return bad("tasks", "must be at least 1".into());
        }
        if self.classes_per_task < 2 {
            return bad("classes_per_task", format!("must be at least 2, got {}", self.classes_per_task));
        }
        if self.kind != DatasetKind::IdxSplit {
            if self.input_dim == 0 || (self.kind == DatasetKind::SplitRings && self.input_dim < 2) {
                return bad("input_dim", format!("too small: {}", self.input_dim));
            }
            if self.train_per_class == 0 {
                return bad("train_per_class", "must be positive".into());
            }
            if self.val_per_class == 0 {
                return bad("val_per_class", "must be positive".into());
            }
            if self.test_per_class == 0 {
                return bad("test_per_class", "must be positive".into());
            }
            if !(self.noise > 0.0 && self.noise.is_finite()) {
                return bad("noise", format!("must be positive, got {}", self.noise));
            }
        }
        if self.kind == DatasetKind::SplitBlobs && !(self.min_separation >= 4.0 && self.min_separation.is_finite()) {
            return bad("min_separation", format!("must be at least 4, got {}", self.min_separation));
        }
        if self.kind == DatasetKind::SplitRings {
            if !(self.ring_gap > 0.0 && self.ring_gap.is_finite()) {
                return bad("ring_gap", format!("must be positive, got {}", self.ring_gap));
            }
            if !(self.ambient_noise >= 0.0 && self.ambient_noise.is_finite()) {
                return bad("ambient_noise", format!("must be non-negative, got {}", self.ambient_noise));
            }
            if self.plane_dims == 1 || self.plane_dims > self.input_dim {
                return bad("plane_dims", format!("must be 0 or in 2..={}, got {}", self.input_dim, self.plane_dims));
            }
            if !(self.center_spread >= 0.0 && self.center_spread.is_finite()) {
                return bad("center_spread", format!("must be non-negative, got {}", self.center_spread));
            }
        }
        if self.kind == DatasetKind::IdxSplit && self.idx.is_none() {
            return bad("idx", "idx_split needs file paths".into());
        }
        if let Some(s) = self.image_shape {
            if s.contains(&0) {
                return bad("image_shape", format!("zero extent in {s:?}"));
            }
            if self.kind != DatasetKind::IdxSplit && s.iter().product::<usize>() != self.input_dim {
                return bad("image_shape", format!("{s:?} does not match input_dim {}", self.input_dim));
            }
        }
        Ok(())
    }
}

/// One task's splits. Labels are local to the task's head, in `0..classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub task: usize,
    pub classes: usize,
    /// Global id of local class 0.
    pub class_offset: usize,
    pub train: Batch,
    pub val: Batch,
    pub test: Batch,
}

impl TaskData {
    pub fn global_labels(&self, split: &Batch) -> Vec<usize> {
        split.labels.iter().map(|y| y + self.class_offset).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub input_len: usize,
    pub image_shape: Option<[usize; 3]>,
    pub tasks: Vec<TaskData>,
}

impl TaskStream {
    pub fn head_classes(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.classes).collect()
    }
}

pub fn generate(cfg: &DatasetConfig, seed: u64) -> Result<TaskStream> {
    match cfg.kind {
        DatasetKind::SplitBlobs => gen_split_blobs(cfg, seed),
        DatasetKind::SplitRings => gen_split_rings(cfg, seed),
        DatasetKind::IdxSplit => load_idx_split(cfg),
    }
}

fn task_rng(seed: u64, task: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (task as u64 + 1).wrapping_mul(0x2545_F491_4F6C_DD1D))
}

/// Draws `per_class[split]` samples per class from `sample(class, rng)`, train split shuffled.
fn assemble(
    cfg: &DatasetConfig,
    task: usize,
    rng: &mut ChaCha8Rng,
    mut sample: impl FnMut(usize, &mut ChaCha8Rng) -> Vec<f64>,
) -> Result<TaskData> {
    let c = cfg.classes_per_task;
    let mut split = |count: usize, shuffle: bool, rng: &mut ChaCha8Rng| -> Result<Batch> {
        let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(count * c);
        for class in 0..c {
            for _ in 0..count {
                rows.push((sample(class, rng), class));
            }
        }
        if shuffle {
            rows.shuffle(rng);
        }
        let n = rows.len();
        let labels = rows.iter().map(|r| r.1).collect();
        let data = rows.into_iter().flat_map(|r| r.0).collect();
        Batch::new(Tensor::new(vec![n, cfg.input_dim], data)?, labels)
    };
    let train = split(cfg.train_per_class, true, rng)?;
    let val = split(cfg.val_per_class, false, rng)?;
    let test = split(cfg.test_per_class, false, rng)?;
    Ok(TaskData { task, classes: c, class_offset: task * c, train, val, test })
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Gaussian clusters with seeded means at least `min_separation·noise` apart inside a box.
pub fn gen_split_blobs(cfg: &DatasetConfig, seed: u64) -> Result<TaskStream> {
    cfg.validate()?;
    let d = cfg.input_dim;
    let sep = cfg.min_separation * cfg.noise;
    let half = 2.0 * sep;
    let mut tasks = Vec::with_capacity(cfg.tasks);
    for t in 0..cfg.tasks {
        let mut rng = task_rng(seed, t);
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(cfg.classes_per_task);
        while means.len() < cfg.classes_per_task {
            let placed = (0..10_000).find_map(|_| {
                let m: Vec<f64> = (0..d).map(|_| rng.random_range(-half..=half)).collect();
                let far = means
                    .iter()
                    .all(|o| o.iter().zip(&m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= sep);
                far.then_some(m)
            });
            match placed {
                Some(m) => means.push(m),
                None => {
                    return Err(RclError::config(
                        "dataset.min_separation",
                        format!(
                            "cannot place {} means {sep} apart in {d} dimensions",
                            cfg.classes_per_task
                        ),
                    ))
                }
            }
        }
        let noise = cfg.noise;
        tasks.push(assemble(cfg, t, &mut rng, |class, rng| {
            means[class].iter().map(|m| m + noise * gaussian(rng)).collect()
        })?);
    }
    Ok(TaskStream { input_len: d, image_shape: cfg.image_shape, tasks })
}

/// Concentric annuli, one per class, in a random 2-plane per task.
pub fn gen_split_rings(cfg: &DatasetConfig, seed: u64) -> Result<TaskStream> {
    cfg.validate()?;
    let d = cfg.input_dim;
    let mut tasks = Vec::with_capacity(cfg.tasks);
    for t in 0..cfg.tasks {
        let mut rng = task_rng(seed, t);
        let k = if cfg.plane_dims == 0 { d } else { cfg.plane_dims };
        let (mut u, mut v) = random_plane(k, &mut rng);
        u.resize(d, 0.0);
        v.resize(d, 0.0);
        let mut center: Vec<f64> = (0..k).map(|_| cfg.center_spread * gaussian(&mut rng)).collect();
        center.resize(d, 0.0);
        let (gap, noise, ambient) = (cfg.ring_gap, cfg.noise, cfg.ambient_noise);
        tasks.push(assemble(cfg, t, &mut rng, |class, rng| {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let r = (class + 1) as f64 * gap + noise * gaussian(rng);
            let (c, s) = (r * angle.cos(), r * angle.sin());
            (0..d).map(|i| center[i] + c * u[i] + s * v[i] + ambient * gaussian(rng)).collect()
        })?);
    }
    Ok(TaskStream { input_len: d, image_shape: cfg.image_shape, tasks })
}

fn random_plane(d: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let unit = |v: Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let u = unit((0..d).map(|_| gaussian(rng)).collect());
    loop {
        let w: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        let dot: f64 = w.iter().zip(&u).map(|(a, b)| a * b).sum();
        let w: Vec<f64> = w.iter().zip(&u).map(|(a, b)| a - dot * b).collect();
        if w.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
            return (u, unit(w));
        }
    }
}

/// Splits an IDX dataset into tasks of consecutive class ids; the last tenth of each
/// task's training rows becomes its validation split.
fn load_idx_split(cfg: &DatasetConfig) -> Result<TaskStream> {
    cfg.validate()?;
    let paths = cfg.idx.as_ref().expect("validated");
    let (train_x, train_y) = load_idx(&paths.train_images, &paths.train_labels)?;
    let (test_x, test_y) = load_idx(&paths.test_images, &paths.test_labels)?;
    let input_len = train_x.cols();
    if test_x.cols() != input_len {
        return Err(RclError::config("dataset.idx", "train and test images differ in size"));
    }
    if let Some(s) = cfg.image_shape {
        if s.iter().product::<usize>() != input_len {
            return Err(RclError::config("dataset.image_shape", format!("{s:?} vs {input_len} pixels")));
        }
    }
    let c = cfg.classes_per_task;
    let pick = |x: &Tensor, y: &[usize], t: usize| -> Result<Batch> {
        let rows: Vec<usize> = (0..y.len()).filter(|&i| y[i] / c == t).collect();
        if rows.is_empty() {
            return Err(RclError::config("dataset.tasks", format!("no samples for task {t}")));
        }
        let all = Batch { x: x.clone(), labels: y.iter().map(|v| v % c).collect() };
        all.select(&rows)
    };
    let mut tasks = Vec::with_capacity(cfg.tasks);
    for t in 0..cfg.tasks {
        let full = pick(&train_x, &train_y, t)?;
        let n_val = (full.len() / 10).max(1).min(full.len() - 1);
        let idx: Vec<usize> = (0..full.len()).collect();
        let (tr, va) = idx.split_at(full.len() - n_val);
        let train = if tr.is_empty() { full.clone() } else { full.select(tr)? };
        let val = full.select(va)?;
        tasks.push(TaskData { task: t, classes: c, class_offset: t * c, train, val, test: pick(&test_x, &test_y, t)? });
    }
    Ok(TaskStream { input_len, image_shape: cfg.image_shape, tasks })
}
