//! Reverse-mode differentiation over a Wengert tape.
//!
//! A [`Graph`] is the tape: every primitive appends one node whose inputs already exist,
//! so node order is a topological order and [`Graph::backward`] is a single reverse sweep.
//! Leaf gradients accumulate across backward calls until [`Graph::zero_grad`].

use crate::error::{RclError, Result};
use crate::tensor::{col2im, im2col, matmul_nt, matmul_raw, matmul_tn, ConvGeometry, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleByScalar(Var, Var),
    AddRowBias(Var, Var),
    AddColBias(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Pow(Var, f64),
    Sum(Var),
    Mean(Var),
    LogMeanExp(Var),
    LogSoftmaxRows(Var),
    L2NormalizeRows(Var, Vec<f64>),
    PairwiseSqDist(Var, Var),
    RowSqDist(Var, Var),
    OffDiagonal(Var),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Transpose(Var),
    Im2col(Var, ConvGeometry),
    ChannelsToBatch(Var, usize),
    Mask(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The gradient tape. Values live on the nodes; leaves may carry `requires_grad`.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> RclError {
    RclError::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape()))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Adds a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(true), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Accumulated gradient of a leaf, zero-filled when backward never reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let t = &self.nodes[v.0].value;
        match t.grad() {
            Some(g) => Tensor::new(t.shape().to_vec(), g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(t.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let ng = self.needs(x);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let ng = self.needs(a) || self.needs(b);
        self.push(value, op, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(a, b, value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.binary(a, b, value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).scale(c);
        self.unary(x, value, Op::Scale(x, c))
    }

    /// Multiplies every entry of `x` by the scalar node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(RclError::dim("scale_by", format!("factor has shape {:?}", self.value(s).shape())));
        }
        let c = self.scalar_value(s);
        let value = self.value(x).scale(c);
        Ok(self.binary(x, s, value, Op::ScaleByScalar(x, s)))
    }

    /// `x[n×d] + b[d]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let d = xv.cols();
        if bv.numel() != d {
            return Err(shape_err("add_row_bias", xv, bv));
        }
        let mut value = xv.clone();
        for row in value.data_mut().chunks_mut(d) {
            row.iter_mut().zip(bv.data()).for_each(|(v, b)| *v += b);
        }
        Ok(self.binary(x, b, value, Op::AddRowBias(x, b)))
    }

    /// `x[c×m] + b[c]` broadcast over columns.
    pub fn add_col_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let (c, m) = (xv.rows(), xv.cols());
        if bv.numel() != c {
            return Err(shape_err("add_col_bias", xv, bv));
        }
        let mut value = xv.clone();
        for (i, row) in value.data_mut().chunks_mut(m).enumerate() {
            let bi = bv.data()[i];
            row.iter_mut().for_each(|v| *v += bi);
        }
        Ok(self.binary(x, b, value, Op::AddColBias(x, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.unary(x, value, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.unary(x, value, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(RclError::contract("log", "argument must be positive"));
        }
        let value = self.value(x).map(f64::ln);
        Ok(self.unary(x, value, Op::Log(x)))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.unary(x, value, Op::Square(x))
    }

    /// Elementwise `x^p` for `x ≥ 0`.
    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < 0.0) {
            return Err(RclError::contract("powf", "base must be non-negative"));
        }
        let value = self.value(x).map(|v| v.powf(p));
        Ok(self.unary(x, value, Op::Pow(x, p)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.unary(x, value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        self.unary(x, value, Op::Mean(x))
    }

    /// `log(mean(exp(x)))`, computed with the max shift. Terms are summed in sorted order,
    /// so the value does not depend on how the entries are arranged.
    pub fn log_mean_exp(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut terms: Vec<f64> = t.data().iter().map(|v| (v - m).exp()).collect();
        terms.sort_by(f64::total_cmp);
        let s: f64 = terms.iter().sum();
        let value = Tensor::scalar(m + (s / t.numel() as f64).ln());
        self.unary(x, value, Op::LogMeanExp(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut value = t.clone();
        for row in value.data_mut().chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.unary(x, value, Op::LogSoftmaxRows(x))
    }

    /// Projects every row onto the unit sphere. Rows with norm ≤ 1e-12 are rejected.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.cols();
        let mut norms = Vec::with_capacity(t.rows());
        let mut value = t.clone();
        for (i, row) in value.data_mut().chunks_mut(d).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= 1e-12 || !norm.is_finite() {
                return Err(RclError::DegenerateFeature { row: i, norm });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        Ok(self.unary(x, value, Op::L2NormalizeRows(x, norms)))
    }

    /// `D[a][b] = ‖A_a − B_b‖²` for `A[n×d]`, `B[m×d]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(shape_err("pairwise_sq_dist", av, bv));
        }
        let (n, m) = (av.rows(), bv.rows());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = av.row(i).iter().zip(bv.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.binary(a, b, value, Op::PairwiseSqDist(a, b)))
    }

    /// `d[k] = ‖A_k − B_k‖²` for equally shaped `A`, `B`.
    pub fn row_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("row_sq_dist", av, bv));
        }
        let out = (0..av.rows())
            .map(|k| av.row(k).iter().zip(bv.row(k)).map(|(x, y)| (x - y) * (x - y)).sum())
            .collect();
        let value = Tensor::vector(out);
        Ok(self.binary(a, b, value, Op::RowSqDist(a, b)))
    }

    /// Off-diagonal entries of a square matrix, row-major.
    pub fn off_diagonal(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.rows();
        if t.shape().len() != 2 || t.cols() != n || n < 2 {
            return Err(RclError::dim("off_diagonal", format!("need square n≥2, got {:?}", t.shape())));
        }
        let out = (0..n * n).filter(|k| k / n != k % n).map(|k| t.data()[k]).collect();
        let value = Tensor::vector(out);
        Ok(self.unary(x, value, Op::OffDiagonal(x)))
    }

    /// Row gather: `out[k] = x[index[k]]`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= t.rows()) {
            return Err(RclError::dim("gather_rows", format!("row {bad} out of {}", t.rows())));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = index.len();
        let data = index.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.unary(x, value, Op::GatherRows(x, index.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.unary(x, value, Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.unary(x, value, Op::Transpose(x))
    }

    /// Batch `[N, C, H, W]` to patch matrix `(C·k·k) × (N·h_O·w_O)`.
    pub fn im2col(&mut self, x: Var, geo: ConvGeometry) -> Result<Var> {
        let t = self.value(x);
        if t.cols() != geo.image_len() {
            return Err(RclError::dim("im2col", format!("input {:?} vs geometry {geo:?}", t.shape())));
        }
        let n = t.rows();
        let data = im2col(t.data(), n, &geo);
        let value = Tensor::new(vec![geo.patch_len(), n * geo.positions()], data)?;
        Ok(self.unary(x, value, Op::Im2col(x, geo)))
    }

    /// `[C_O, N·P]` to `[N, C_O·P]`.
    pub fn channels_to_batch(&mut self, x: Var, batch: usize) -> Result<Var> {
        let t = self.value(x);
        let (c, m) = (t.rows(), t.cols());
        if m % batch != 0 {
            return Err(RclError::dim("channels_to_batch", format!("{m} columns for batch {batch}")));
        }
        let p = m / batch;
        let mut out = vec![0.0; c * m];
        for ch in 0..c {
            for s in 0..batch {
                out[s * c * p + ch * p..s * c * p + (ch + 1) * p]
                    .copy_from_slice(&t.data()[ch * m + s * p..ch * m + (s + 1) * p]);
            }
        }
        let value = Tensor::new(vec![batch, c * p], out)?;
        Ok(self.unary(x, value, Op::ChannelsToBatch(x, batch)))
    }

    /// Elementwise multiplication by a fixed mask (dropout).
    pub fn mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.numel() {
            return Err(RclError::dim("mask", format!("{} vs {}", mask.len(), t.numel())));
        }
        let mut value = t.clone();
        value.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
        Ok(self.unary(x, value, Op::Mask(x, mask)))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every reachable
    /// leaf with `requires_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_seeded(loss, 1.0)
    }

    /// Reverse sweep with upstream seed `seed` at `loss`.
    pub fn backward_seeded(&mut self, loss: Var, seed: f64) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(RclError::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![seed]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&dy);
                continue;
            }
            for (input, g) in self.local_grads(i, &dy) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` with upstream `dy`, one per input.
    fn local_grads(&self, i: usize, dy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let mut out = Vec::with_capacity(2);
                if self.needs(*a) {
                    out.push((*a, matmul_nt(dy, bv.data(), m, n, k)));
                }
                if self.needs(*b) {
                    out.push((*b, matmul_tn(av.data(), dy, m, k, n)));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, dy.to_vec()), (*b, dy.to_vec())],
            Op::Sub(a, b) => vec![(*a, dy.to_vec()), (*b, dy.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                vec![
                    (*a, dy.iter().zip(bv).map(|(g, b)| g * b).collect()),
                    (*b, dy.iter().zip(av).map(|(g, a)| g * a).collect()),
                ]
            }
            Op::Scale(x, c) => vec![(*x, dy.iter().map(|g| g * c).collect())],
            Op::ScaleByScalar(x, s) => {
                let c = val(*s).item();
                let xv = val(*x).data();
                let ds = dy.iter().zip(xv).map(|(g, x)| g * x).sum();
                vec![(*x, dy.iter().map(|g| g * c).collect()), (*s, vec![ds])]
            }
            Op::AddRowBias(x, b) => {
                let d = val(*b).numel();
                let mut db = vec![0.0; d];
                for row in dy.chunks(d) {
                    db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                }
                vec![(*x, dy.to_vec()), (*b, db)]
            }
            Op::AddColBias(x, b) => {
                let c = val(*b).numel();
                let m = dy.len() / c;
                let db = dy.chunks(m).map(|r| r.iter().sum()).collect();
                vec![(*x, dy.to_vec()), (*b, db)]
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                vec![(*x, dy.iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect())]
            }
            Op::Exp(x) => vec![(*x, dy.iter().zip(y).map(|(g, e)| g * e).collect())],
            Op::Log(x) => vec![(*x, dy.iter().zip(val(*x).data()).map(|(g, x)| g / x).collect())],
            Op::Square(x) => vec![(*x, dy.iter().zip(val(*x).data()).map(|(g, x)| 2.0 * g * x).collect())],
            Op::Pow(x, p) => {
                let p = *p;
                let g = dy
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, &x)| {
                        if x == 0.0 {
                            // one-sided subgradient at the origin
                            if p == 1.0 { *g } else { 0.0 }
                        } else {
                            g * p * x.powf(p - 1.0)
                        }
                    })
                    .collect();
                vec![(*x, g)]
            }
            Op::Sum(x) => vec![(*x, vec![dy[0]; val(*x).numel()])],
            Op::Mean(x) => {
                let n = val(*x).numel();
                vec![(*x, vec![dy[0] / n as f64; n])]
            }
            Op::LogMeanExp(x) => {
                let xv = val(*x).data();
                let m = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = xv.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = w.iter().sum();
                vec![(*x, w.iter().map(|wi| dy[0] * wi / s).collect())]
            }
            Op::LogSoftmaxRows(x) => {
                let c = val(*x).cols();
                let mut g = vec![0.0; dy.len()];
                for ((grow, dyrow), yrow) in g.chunks_mut(c).zip(dy.chunks(c)).zip(y.chunks(c)) {
                    let s: f64 = dyrow.iter().sum();
                    for ((gv, d), lp) in grow.iter_mut().zip(dyrow).zip(yrow) {
                        *gv = d - lp.exp() * s;
                    }
                }
                vec![(*x, g)]
            }
            Op::L2NormalizeRows(x, norms) => {
                let d = val(*x).cols();
                let mut g = vec![0.0; dy.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let (yr, dr) = (&y[r * d..(r + 1) * d], &dy[r * d..(r + 1) * d]);
                    let proj: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for k in 0..d {
                        g[r * d + k] = (dr[k] - yr[k] * proj) / norm;
                    }
                }
                vec![(*x, g)]
            }
            Op::PairwiseSqDist(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, m, d) = (av.rows(), bv.rows(), av.cols());
                let mut ga = vec![0.0; n * d];
                let mut gb = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let w = 2.0 * dy[i * m + j];
                        if w == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = av.data()[i * d + k] - bv.data()[j * d + k];
                            ga[i * d + k] += w * diff;
                            gb[j * d + k] -= w * diff;
                        }
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::RowSqDist(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let d = av.cols();
                let mut ga = vec![0.0; av.numel()];
                for (k, g) in ga.iter_mut().enumerate() {
                    *g = 2.0 * dy[k / d] * (av.data()[k] - bv.data()[k]);
                }
                let gb = ga.iter().map(|v| -v).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::OffDiagonal(x) => {
                let n = val(*x).rows();
                let mut g = vec![0.0; n * n];
                let mut it = dy.iter();
                for (k, gv) in g.iter_mut().enumerate() {
                    if k / n != k % n {
                        *gv = *it.next().expect("off-diagonal length");
                    }
                }
                vec![(*x, g)]
            }
            Op::GatherRows(x, index) => {
                let xv = val(*x);
                let c = xv.cols();
                let mut g = vec![0.0; xv.numel()];
                for (k, &src) in index.iter().enumerate() {
                    for j in 0..c {
                        g[src * c + j] += dy[k * c + j];
                    }
                }
                vec![(*x, g)]
            }
            Op::Reshape(x) => vec![(*x, dy.to_vec())],
            Op::Transpose(x) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                let t = Tensor::new(vec![r, c], dy.to_vec()).expect("transpose grad").transpose();
                vec![(*x, t.into_data())]
            }
            Op::Im2col(x, geo) => vec![(*x, col2im(dy, val(*x).rows(), geo))],
            Op::ChannelsToBatch(x, batch) => {
                let xv = val(*x);
                let (c, m) = (xv.rows(), xv.cols());
                let p = m / batch;
                let mut g = vec![0.0; c * m];
                for ch in 0..c {
                    for s in 0..*batch {
                        g[ch * m + s * p..ch * m + (s + 1) * p]
                            .copy_from_slice(&dy[s * c * p + ch * p..s * c * p + (ch + 1) * p]);
                    }
                }
                vec![(*x, g)]
            }
            Op::Mask(x, mask) => vec![(*x, dy.iter().zip(mask).map(|(g, m)| g * m).collect())],
        }
    }
}

/// Direct convolution of a single image `[C_I, h, w]` with `[C_O, C_I, k, k]` through the
/// patch-matrix lowering: `Ŵ·x̂` with `Ŵ` of shape `C_O × (C_I·k·k)`.
pub fn conv2d_via_im2col(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (is, ks) = (input.shape(), kernel.shape());
    if is.len() != 3 || ks.len() != 4 || ks[1] != is[0] || ks[2] != ks[3] {
        return Err(RclError::dim("conv2d", format!("input {is:?} vs kernel {ks:?}")));
    }
    let geo = ConvGeometry::new(is[0], is[1], is[2], ks[2], stride, pad)?;
    let patches = im2col(input.data(), 1, &geo);
    let out = matmul_raw(kernel.data(), &patches, ks[0], geo.patch_len(), geo.positions());
    Tensor::new(vec![ks[0], geo.out_height(), geo.out_width()], out)
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    out
}
