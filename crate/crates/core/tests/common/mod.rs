//! Independent reference implementations used by the integration and acceptance tests.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rcl::harness::{generate, DatasetConfig, DatasetKind, TaskStream};
use rcl::model::{Network, ParamKey, ParamTensors};
use rcl::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-12)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

pub fn central_diff(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.numel())
        .map(|i| {
            let v = probe.data()[i];
            probe.data_mut()[i] = v + h;
            let up = f(&probe);
            probe.data_mut()[i] = v - h;
            let down = f(&probe);
            probe.data_mut()[i] = v;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central differences of `f` with respect to every scalar in `keys`.
pub fn fd_params(net: &Network, keys: &[ParamKey], f: impl Fn(&Network) -> f64, h: f64) -> ParamTensors {
    let mut out = net.params_for(keys).zeros_like();
    for key in keys {
        let n = net.param(key).unwrap().numel();
        let shape = net.param(key).unwrap().shape().to_vec();
        for i in 0..n {
            let mut delta = Tensor::zeros(&shape);
            delta.data_mut()[i] = h;
            let mut d = ParamTensors::new();
            d.insert(*key, delta.clone());
            let mut up = net.clone();
            up.perturb(&d).unwrap();
            delta.data_mut()[i] = -h;
            let mut d = ParamTensors::new();
            d.insert(*key, delta);
            let mut down = net.clone();
            down.perturb(&d).unwrap();
            out.get_mut(key).unwrap().data_mut()[i] = (f(&up) - f(&down)) / (2.0 * h);
        }
    }
    out
}

/// Plain nested-loop cross-correlation of `[C, H, W]` with `[O, C, k, k]`, zero padding.
pub fn conv_nested(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (o, k) = (kernel.shape()[0], kernel.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let x = |ci: usize, r: isize, q: isize| -> f64 {
        if r < 0 || q < 0 || r >= h as isize || q >= w as isize {
            0.0
        } else {
            input.data()[ci * h * w + r as usize * w + q as usize]
        }
    };
    let kv = |oi: usize, ci: usize, a: usize, b: usize| kernel.data()[((oi * c + ci) * k + a) * k + b];
    let mut out = vec![0.0; o * oh * ow];
    for oi in 0..o {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for ci in 0..c {
                    for a in 0..k {
                        for b in 0..k {
                            let r = (i * stride + a) as isize - pad as isize;
                            let q = (j * stride + b) as isize - pad as isize;
                            acc += kv(oi, ci, a, b) * x(ci, r, q);
                        }
                    }
                }
                out[(oi * oh + i) * ow + j] = acc;
            }
        }
    }
    Tensor::new(vec![o, oh, ow], out).unwrap()
}

pub fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

/// Singular values from the eigenvalues of `AᵀA`, largest first.
pub fn singular_values_via_eigen(a: &Tensor) -> Vec<f64> {
    let m = to_matrix(a);
    let gram = m.transpose() * &m;
    let mut ev: Vec<f64> = gram.symmetric_eigen().eigenvalues.iter().map(|v| v.max(0.0).sqrt()).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev.truncate(a.rows().min(a.cols()));
    ev
}

/// Orthonormal columns spanning `cols` via Householder QR.
fn orthonormal(cols: &DMatrix<f64>) -> DMatrix<f64> {
    if cols.ncols() == 0 {
        return cols.clone();
    }
    cols.clone().qr().q().columns(0, cols.ncols()).into_owned()
}

/// Smallest `k` for which projecting `R` onto `[M, U_k]` keeps at least `eps_th` of its
/// energy, trying every `k` and measuring the projection directly. `U` comes from an
/// SVD of `R − M·Mᵀ·R` computed by nalgebra; `k` never exceeds that residual's rank.
pub fn select_k_oracle(r: &Tensor, m: Option<&Tensor>, eps_th: f64) -> usize {
    let rm = to_matrix(r);
    let total = rm.norm_squared();
    let mm = m.map(to_matrix).unwrap_or_else(|| DMatrix::zeros(r.rows(), 0));
    let resid = &rm - &mm * (mm.transpose() * &rm);
    let svd = resid.clone().svd(true, false);
    let u = svd.u.unwrap();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let rank = svd.singular_values.iter().filter(|&&s| s > 1e-10 * total.sqrt()).count();
    for k in 0..=rank {
        let mut cols = mm.clone();
        for &i in &order[..k] {
            let last = cols.ncols();
            cols = cols.insert_column(last, 0.0);
            cols.set_column(last, &u.column(i));
        }
        let q = orthonormal(&cols);
        let kept = (&q * (q.transpose() * &rm)).norm_squared();
        if total == 0.0 || kept >= eps_th * total {
            return k;
        }
    }
    rank
}

/// Random matrix with orthonormal columns.
pub fn random_orthonormal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let raw = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
    let q = orthonormal(&raw);
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            data.push(q[(i, j)]);
        }
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Mean of the final row.
pub fn acc_oracle(rows: &[Vec<f64>]) -> f64 {
    let t = rows.len();
    let mut s = 0.0;
    for i in 0..t {
        s += rows[t - 1][i];
    }
    s / t as f64
}

/// Mean over earlier tasks of final accuracy minus accuracy right after learning.
pub fn bwt_oracle(rows: &[Vec<f64>]) -> Option<f64> {
    let t = rows.len();
    if t < 2 {
        return None;
    }
    let mut s = 0.0;
    for i in 0..t - 1 {
        s += rows[t - 1][i] - rows[i][i];
    }
    Some(s / (t - 1) as f64)
}

pub fn random_acc_matrix(rng: &mut ChaCha8Rng, t: usize) -> Vec<Vec<f64>> {
    (0..t).map(|i| (0..=i).map(|_| rng.random_range(0.0..=100.0)).collect()).collect()
}

pub fn blobs(seed: u64, tasks: usize, per_class: usize) -> TaskStream {
    let cfg = DatasetConfig {
        kind: DatasetKind::SplitBlobs,
        tasks,
        input_dim: 6,
        train_per_class: per_class,
        val_per_class: 4,
        test_per_class: per_class,
        ..DatasetConfig::default()
    };
    generate(&cfg, seed).unwrap()
}

/// A 6-8-8 MLP with one two-class head per task; well under 1k parameters.
pub fn tiny_mlp(stream: &TaskStream, seed: u64) -> Network {
    Network::mlp(stream.input_len, &[8, 8], &stream.head_classes(), seed).unwrap()
}
