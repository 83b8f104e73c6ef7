//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation eagerly: each call computes its value
//! immediately and appends a node. [`Graph::backward`] walks the tape in
//! reverse and accumulates vector-Jacobian products. Nodes are only ever
//! appended, so the tape is acyclic by construction.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::tensor::softmax_in_place;
use super::Tensor;
use crate::error::{contract, shape_check, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Per-row pair rotation applied by [`Graph::rotate_pairs`]: row `r`, pair `j`
/// rotates `(x[2j], x[2j+1])` by the angle whose cosine and sine are stored at
/// `r * pairs + j`. The same rotation is applied to every head of width `2 * pairs`.
#[derive(Clone, Debug)]
pub struct PairRotation {
    pub pairs: usize,
    pub cos: Arc<[f32]>,
    pub sin: Arc<[f32]>,
}

impl PairRotation {
    pub fn rows(&self) -> usize {
        self.cos.len().checked_div(self.pairs).unwrap_or(0)
    }

    /// Rotates `x` in place, forward (`inverse = false`) or backward.
    pub fn apply(&self, x: &mut [f32], cols: usize, inverse: bool) {
        let head = 2 * self.pairs;
        let sign = if inverse { -1.0 } else { 1.0 };
        for (r, row) in x.chunks_mut(cols).enumerate() {
            let cos = &self.cos[r * self.pairs..(r + 1) * self.pairs];
            let sin = &self.sin[r * self.pairs..(r + 1) * self.pairs];
            for h in row.chunks_mut(head) {
                for j in 0..self.pairs {
                    let (a, b) = (h[2 * j], h[2 * j + 1]);
                    let (c, s) = (cos[j], sign * sin[j]);
                    h[2 * j] = a * c - b * s;
                    h[2 * j + 1] = a * s + b * c;
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Silu(Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<f32>,
    },
    RepeatRows {
        x: Var,
        times: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    RotatePairs {
        x: Var,
        rot: PairRotation,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
        probs: Vec<f32>,
    },
    Sum(Var),
    Mean(Var),
    Mse {
        pred: Var,
        target: Var,
        weights: Option<Vec<f32>>,
        denom: f32,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation plus the set of trainable leaves.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|&v| self.get(v))
    }

    /// Gradient of every registered parameter, zero-filled when the loss does
    /// not depend on it.
    pub fn into_named(mut self, graph: &Graph) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, v) in &graph.params {
            let g = self.by_node[v.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(graph.value(*v).shape()));
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Borrowed strided matrix.
#[derive(Clone, Copy)]
struct Mat<'a> {
    d: &'a [f32],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> Mat<'a> {
    fn dense(d: &'a [f32], rows: usize, cols: usize) -> Self {
        Self {
            d,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    fn strided(d: &'a [f32], rows: usize, cols: usize, rs: usize) -> Self {
        Self {
            d,
            rows,
            cols,
            rs,
            cs: 1,
        }
    }

    fn t(self) -> Self {
        Self {
            d: self.d,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn maybe_t(self, t: bool) -> Self {
        if t {
            self.t()
        } else {
            self
        }
    }
}

/// `c = alpha * a * b + beta * c` with `c` addressed by row stride `rsc`.
fn gemm(alpha: f32, a: Mat, b: Mat, beta: f32, c: &mut [f32], rsc: usize) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimension");
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= (m - 1) * rsc + n, "gemm output extent");
    if k == 0 {
        for r in 0..m {
            for v in &mut c[r * rsc..r * rsc + n] {
                *v *= beta;
            }
        }
        return;
    }
    assert!(
        a.d.len() > (m - 1) * a.rs + (k - 1) * a.cs,
        "gemm lhs extent"
    );
    assert!(
        b.d.len() > (k - 1) * b.rs + (n - 1) * b.cs,
        "gemm rhs extent"
    );
    // SAFETY: the assertions above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.d.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.d.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf, reported by name in [`Gradients`].
    pub fn param(&mut self, name: impl Into<String>, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.params.push((name.into(), v));
        v
    }

    /// `op(a) * op(b)` where `op` optionally transposes a matrix operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = as_matrix(self.value(a));
        let (br, bc) = as_matrix(self.value(b));
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        shape_check!(
            k == k2,
            "matmul inner dimensions differ: {}x{} by {}x{}",
            m,
            k,
            k2,
            n
        );
        let mut out = vec![0.0; m * n];
        {
            let av = Mat::dense(self.value(a).data(), ar, ac).maybe_t(ta);
            let bv = Mat::dense(self.value(b).data(), br, bc).maybe_t(tb);
            gemm(1.0, av, bv, 0.0, &mut out, n);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, ta, tb },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `x * w + b` with `x: [m, k]`, `w: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = as_matrix(self.value(x));
        let wt = self.value(w);
        shape_check!(
            wt.shape().len() == 2 && wt.shape()[0] == k,
            "linear weight {:?} does not accept input width {}",
            wt.shape(),
            k
        );
        let n = wt.shape()[1];
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bias = self.value(b);
            shape_check!(
                bias.numel() == n,
                "bias length {} for output width {}",
                bias.numel(),
                n
            );
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bias.data());
            }
        }
        gemm(
            1.0,
            Mat::dense(self.value(x).data(), m, k),
            Mat::dense(self.value(w).data(), k, n),
            if b.is_some() { 1.0 } else { 0.0 },
            &mut out,
            n,
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let v = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(v, Op::Silu(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    /// Per-row normalisation to zero mean and unit variance (no affine terms).
    pub fn layer_norm(&mut self, x: Var, eps: f32) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.clone();
        let mut rstd = Vec::with_capacity(xv.rows());
        for row in out.data_mut().chunks_mut(c) {
            let mean = row.iter().sum::<f32>() / c as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
            let r = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::LayerNorm { x, rstd }, rg)
    }

    /// Repeats each row of `x` `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = Vec::with_capacity(xv.numel() * times);
        for r in 0..xv.rows() {
            for _ in 0..times {
                data.extend_from_slice(xv.row(r));
            }
        }
        let rows = xv.rows() * times;
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(vec![rows, c], data).expect("repeat shape"),
            Op::RepeatRows { x, times },
            rg,
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x).gather_rows(idx)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            v,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let v = {
            let ts: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
            Tensor::concat_cols(&ts)?
        };
        let rg = self.rg(parts);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let v = {
            let ts: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
            Tensor::concat_rows(&ts)?
        };
        let rg = self.rg(parts);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        shape_check!(
            start + len <= c,
            "column slice {}..{} of width {}",
            start,
            start + len,
            c
        );
        let mut data = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let rows = xv.rows();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![rows, len], data)?,
            Op::SliceCols { x, start },
            rg,
        ))
    }

    /// Applies a per-row pair rotation (the RoPE primitive) to every head.
    pub fn rotate_pairs(&mut self, x: Var, rot: &PairRotation) -> Result<Var> {
        let xv = self.value(x);
        let head = 2 * rot.pairs;
        shape_check!(
            head > 0 && xv.cols().is_multiple_of(head),
            "row width {} is not a multiple of the rotated head width {}",
            xv.cols(),
            head
        );
        shape_check!(
            rot.rows() == xv.rows(),
            "rotation table has {} rows for {} tokens",
            rot.rows(),
            xv.rows()
        );
        let mut out = xv.clone();
        let c = out.cols();
        rot.apply(out.data_mut(), c, false);
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::RotatePairs {
                x,
                rot: rot.clone(),
            },
            rg,
        ))
    }

    /// Multi-head softmax attention over groups of `seq` consecutive rows.
    ///
    /// `q`, `k`, `v` are `[batch * seq, heads * head_dim]`; every sample
    /// attends only within its own group of rows, with no masking.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq: usize) -> Result<Var> {
        let (rows, width) = as_matrix(self.value(q));
        for t in [k, v] {
            shape_check!(
                as_matrix(self.value(t)) == (rows, width),
                "attention operands disagree: {:?} vs {:?}",
                self.value(q).shape(),
                self.value(t).shape()
            );
        }
        shape_check!(
            heads > 0 && width % heads == 0,
            "width {} not divisible by {} heads",
            width,
            heads
        );
        shape_check!(
            seq > 0 && rows % seq == 0,
            "{} rows are not whole sequences of {}",
            rows,
            seq
        );
        let dh = width / heads;
        let batch = rows / seq;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut out = vec![0.0; rows * width];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        {
            let (qd, kd, vd) = (
                self.value(q).data(),
                self.value(k).data(),
                self.value(v).data(),
            );
            for b in 0..batch {
                for h in 0..heads {
                    let off = b * seq * width + h * dh;
                    let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                    gemm(
                        scale,
                        Mat::strided(&qd[off..], seq, dh, width),
                        Mat::strided(&kd[off..], seq, dh, width).t(),
                        0.0,
                        p,
                        seq,
                    );
                    for row in p.chunks_mut(seq) {
                        softmax_in_place(row);
                    }
                    gemm(
                        1.0,
                        Mat::dense(p, seq, seq),
                        Mat::strided(&vd[off..], seq, dh, width),
                        0.0,
                        &mut out[off..],
                        width,
                    );
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::new(vec![rows, width], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq,
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.sum() / xv.numel().max(1) as f32;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Weighted mean squared error: `sum_r w_r * |p_r - t_r|^2 / (sum_r w_r * cols)`.
    pub fn mse(&mut self, pred: Var, target: Var, row_weights: Option<Vec<f32>>) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        shape_check!(
            p.shape() == t.shape(),
            "mse on {:?} vs {:?}",
            p.shape(),
            t.shape()
        );
        let c = p.cols();
        if let Some(w) = &row_weights {
            shape_check!(
                w.len() == p.rows(),
                "{} row weights for {} rows",
                w.len(),
                p.rows()
            );
        }
        let wsum: f32 = row_weights
            .as_ref()
            .map(|w| w.iter().sum())
            .unwrap_or(p.rows() as f32);
        contract!(wsum > 0.0, "mse weights sum to zero");
        let denom = wsum * c as f32;
        let mut total = 0.0;
        for r in 0..p.rows() {
            let w = row_weights.as_ref().map(|w| w[r]).unwrap_or(1.0);
            let se: f32 = p
                .row(r)
                .iter()
                .zip(t.row(r))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += w * se;
        }
        let rg = self.rg(&[pred, target]);
        Ok(self.push(
            Tensor::scalar(total / denom),
            Op::Mse {
                pred,
                target,
                weights: row_weights,
                denom,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, c) = as_matrix(lv);
        shape_check!(
            labels.len() == rows,
            "{} labels for {} rows",
            labels.len(),
            rows
        );
        let probs = lv.softmax_rows().into_data();
        let mut nll = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            contract!(l < c, "label {} out of {} classes", l, c);
            nll -= probs[r * c + l].max(1e-30).ln();
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(nll / rows as f32),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        let mut norms = Vec::with_capacity(out.rows());
        for row in out.data_mut().chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::L2Normalize { x, norms }, rg)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        contract!(
            self.value(loss).numel() == 1,
            "backward needs a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let params = self.params.iter().map(|(n, v)| (n.clone(), *v)).collect();
        Ok(Gradients {
            by_node: grads,
            params,
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ar, ac) = as_matrix(av);
                let (br, bc) = as_matrix(bv);
                let (m, n) = as_matrix(g);
                let gm = Mat::dense(g.data(), m, n);
                let am = Mat::dense(av.data(), ar, ac);
                let bm = Mat::dense(bv.data(), br, bc);
                if wants(a) {
                    let mut d = vec![0.0; ar * ac];
                    if *ta {
                        gemm(1.0, bm.maybe_t(*tb), gm.t(), 0.0, &mut d, ac);
                    } else {
                        gemm(1.0, gm, bm.maybe_t(*tb).t(), 0.0, &mut d, ac);
                    }
                    accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d)?)?;
                }
                if wants(b) {
                    let mut d = vec![0.0; br * bc];
                    if *tb {
                        gemm(1.0, gm.t(), am.maybe_t(*ta), 0.0, &mut d, bc);
                    } else {
                        gemm(1.0, am.maybe_t(*ta).t(), gm, 0.0, &mut d, bc);
                    }
                    accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d)?)?;
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k) = as_matrix(xv);
                let n = wv.shape()[1];
                let gm = Mat::dense(g.data(), m, n);
                if wants(x) {
                    let mut d = vec![0.0; m * k];
                    gemm(1.0, gm, Mat::dense(wv.data(), k, n).t(), 0.0, &mut d, k);
                    accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?)?;
                }
                if wants(w) {
                    let mut d = vec![0.0; k * n];
                    gemm(1.0, Mat::dense(xv.data(), m, k).t(), gm, 0.0, &mut d, n);
                    accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), d)?)?;
                }
                if let Some(b) = b.filter(|b| wants(b)) {
                    let mut d = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (acc, v) in d.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, b, Tensor::new(self.value(b).shape().to_vec(), d)?)?;
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if wants(b) {
                    accumulate(grads, *b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if wants(b) {
                    accumulate(grads, *b, g.scale(-1.0))?;
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    accumulate(grads, *a, g.mul(self.value(*b))?)?;
                }
                if wants(b) {
                    accumulate(grads, *b, g.mul(self.value(*a))?)?;
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s))?,
            Op::AddScalar(a) => accumulate(grads, *a, g.clone())?,
            Op::Silu(a) => {
                let d = pointwise(g, self.value(*a), |x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                accumulate(grads, *a, d)?;
            }
            Op::Gelu(a) => accumulate(grads, *a, pointwise(g, self.value(*a), gelu_grad))?,
            Op::Relu(a) => accumulate(
                grads,
                *a,
                pointwise(g, self.value(*a), |x| if x > 0.0 { 1.0 } else { 0.0 }),
            )?,
            Op::LayerNorm { x, rstd } => {
                let y = &node.value;
                let c = y.cols();
                let mut d = vec![0.0; y.numel()];
                for r in 0..y.rows() {
                    let (gy, yy) = (g.row(r), y.row(r));
                    let mg = gy.iter().sum::<f32>() / c as f32;
                    let mgy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f32>() / c as f32;
                    for j in 0..c {
                        d[r * c + j] = rstd[r] * (gy[j] - mg - yy[j] * mgy);
                    }
                }
                accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), d)?)?;
            }
            Op::RepeatRows { x, times } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut d = vec![0.0; xv.numel()];
                for r in 0..xv.rows() {
                    for t in 0..*times {
                        for (acc, v) in d[r * c..(r + 1) * c].iter_mut().zip(g.row(r * times + t)) {
                            *acc += v;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?)?;
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut d = vec![0.0; xv.numel()];
                for (r, &src) in idx.iter().enumerate() {
                    for (acc, v) in d[src * c..(src + 1) * c].iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?)?;
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let w = pv.cols();
                    if wants(p) {
                        let mut d = Vec::with_capacity(pv.numel());
                        for r in 0..g.rows() {
                            d.extend_from_slice(&g.row(r)[start..start + w]);
                        }
                        accumulate(grads, *p, Tensor::new(pv.shape().to_vec(), d)?)?;
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let n = pv.numel();
                    if wants(p) {
                        let d = g.data()[start..start + n].to_vec();
                        accumulate(grads, *p, Tensor::new(pv.shape().to_vec(), d)?)?;
                    }
                    start += n;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (c, len) = (xv.cols(), g.cols());
                let mut d = vec![0.0; xv.numel()];
                for r in 0..g.rows() {
                    d[r * c + start..r * c + start + len].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?)?;
            }
            Op::RotatePairs { x, rot } => {
                let mut d = g.clone();
                let c = d.cols();
                rot.apply(d.data_mut(), c, true);
                accumulate(grads, *x, d)?;
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq,
                probs,
            } => {
                let (rows, width) = as_matrix(g);
                let (heads, seq) = (*heads, *seq);
                let dh = width / heads;
                let batch = rows / seq;
                let scale = 1.0 / (dh as f32).sqrt();
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let mut dq = vec![0.0; rows * width];
                let mut dk = vec![0.0; rows * width];
                let mut dv = vec![0.0; rows * width];
                let mut dp = vec![0.0; seq * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = b * seq * width + h * dh;
                        let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                        let go = Mat::strided(&g.data()[off..], seq, dh, width);
                        gemm(
                            1.0,
                            Mat::dense(p, seq, seq).t(),
                            go,
                            0.0,
                            &mut dv[off..],
                            width,
                        );
                        gemm(
                            1.0,
                            go,
                            Mat::strided(&vd[off..], seq, dh, width).t(),
                            0.0,
                            &mut dp,
                            seq,
                        );
                        for (prow, dprow) in p.chunks(seq).zip(dp.chunks_mut(seq)) {
                            let dot: f32 = prow.iter().zip(dprow.iter()).map(|(a, b)| a * b).sum();
                            for (pv, dv) in prow.iter().zip(dprow.iter_mut()) {
                                *dv = pv * (*dv - dot) * scale;
                            }
                        }
                        gemm(
                            1.0,
                            Mat::dense(&dp, seq, seq),
                            Mat::strided(&kd[off..], seq, dh, width),
                            0.0,
                            &mut dq[off..],
                            width,
                        );
                        gemm(
                            1.0,
                            Mat::dense(&dp, seq, seq).t(),
                            Mat::strided(&qd[off..], seq, dh, width),
                            0.0,
                            &mut dk[off..],
                            width,
                        );
                    }
                }
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if wants(&var) {
                        accumulate(grads, var, Tensor::new(vec![rows, width], d)?)?;
                    }
                }
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                accumulate(grads, *x, Tensor::full(self.value(*x).shape(), s))?;
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let s = g.data()[0] / xv.numel().max(1) as f32;
                accumulate(grads, *x, Tensor::full(xv.shape(), s))?;
            }
            Op::Mse {
                pred,
                target,
                weights,
                denom,
            } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let c = p.cols();
                let s = 2.0 * g.data()[0] / denom;
                let mut d = vec![0.0; p.numel()];
                for r in 0..p.rows() {
                    let w = weights.as_ref().map(|w| w[r]).unwrap_or(1.0) * s;
                    for j in 0..c {
                        d[r * c + j] = w * (p.data()[r * c + j] - t.data()[r * c + j]);
                    }
                }
                let d = Tensor::new(p.shape().to_vec(), d)?;
                if wants(target) {
                    accumulate(grads, *target, d.scale(-1.0))?;
                }
                if wants(pred) {
                    accumulate(grads, *pred, d)?;
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let lv = self.value(*logits);
                let c = lv.cols();
                let s = g.data()[0] / labels.len() as f32;
                let mut d: Vec<f32> = probs.iter().map(|p| p * s).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * c + l] -= s;
                }
                accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), d)?)?;
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let c = y.cols();
                let mut d = vec![0.0; y.numel()];
                for r in 0..y.rows() {
                    let (gy, yy) = (g.row(r), y.row(r));
                    let dot: f32 = gy.iter().zip(yy).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[r * c + j] = (gy[j] - yy[j] * dot) / norms[r];
                    }
                }
                accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d)?)?;
            }
        }
        Ok(())
    }
}

fn pointwise(g: &Tensor, x: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &x)| g * f(x))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("pointwise shape")
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, d: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => {
            shape_check!(existing.shape() == d.shape(), "gradient shape drift");
            for (a, b) in existing.data_mut().iter_mut().zip(d.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(d),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::rng::RandomStream;

    type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

    /// Central-difference oracle: perturbs every input entry by `h` and
    /// re-evaluates the scalar `sum(out * r)` for a fixed random `r`.
    /// Returns the largest error relative to the gradient's max magnitude.
    fn gradcheck(build: &Build, inputs: &[Tensor], h: f32) -> f32 {
        let mut rs = RandomStream::new(99, 0);
        let eval = |ins: &[Tensor], r: Option<&Tensor>| -> (Graph, Var, Vec<Var>, Tensor) {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins
                .iter()
                .enumerate()
                .map(|(i, t)| g.param(format!("in{i}"), t.clone()))
                .collect();
            let out = build(&mut g, &vars).unwrap();
            let shape = g.value(out).shape().to_vec();
            let r = r.cloned().unwrap_or_else(|| Tensor::zeros(&shape));
            let rv = g.constant(r.clone());
            let prod = g.mul(out, rv).unwrap();
            let loss = g.sum(prod);
            (g, loss, vars, r)
        };
        let (g0, _, _, _) = eval(inputs, None);
        let out_shape = {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let o = build(&mut g, &vars).unwrap();
            g.value(o).shape().to_vec()
        };
        drop(g0);
        let r = rs.gaussian_tensor(&out_shape, 1.0);
        let (g, loss, vars, _) = eval(inputs, Some(&r));
        let grads = g.backward(loss).unwrap();
        let f = |ins: &[Tensor]| -> f64 {
            let (g, loss, _, _) = eval(ins, Some(&r));
            g.value(loss).data()[0] as f64
        };
        let mut worst: f32 = 0.0;
        for (i, v) in vars.iter().enumerate() {
            let analytic = grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
            let mut numeric = vec![0.0f32; inputs[i].numel()];
            for (j, out) in numeric.iter_mut().enumerate() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= h;
                *out = ((f(&plus) - f(&minus)) / (2.0 * h as f64)) as f32;
            }
            let scale = numeric.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-6);
            for (a, n) in analytic.data().iter().zip(&numeric) {
                worst = worst.max((a - n).abs() / scale);
            }
        }
        worst
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        RandomStream::new(seed, 1).gaussian_tensor(shape, 1.0)
    }

    const TOL: f32 = 1e-3;

    macro_rules! gradcheck_case {
        ($name:ident, $build:expr, [$($shape:expr),+]) => {
            #[test]
            fn $name() {
                let inputs: Vec<Tensor> = vec![$($shape),+]
                    .into_iter()
                    .enumerate()
                    .map(|(i, s): (usize, Vec<usize>)| rand(&s, i as u64 + 1))
                    .collect();
                let e = gradcheck(&$build, &inputs, 1e-3);
                assert!(e <= TOL, "relative error {e:e}");
            }
        };
    }

    gradcheck_case!(
        grad_matmul,
        |g: &mut Graph, v: &[Var]| g.matmul(v[0], v[1]),
        [vec![3, 4], vec![4, 2]]
    );
    gradcheck_case!(
        grad_matmul_transposed,
        |g: &mut Graph, v: &[Var]| g.matmul_t(v[0], v[1], true, true),
        [vec![4, 3], vec![2, 4]]
    );
    gradcheck_case!(
        grad_matmul_ta,
        |g: &mut Graph, v: &[Var]| g.matmul_t(v[0], v[1], true, false),
        [vec![4, 3], vec![4, 2]]
    );
    gradcheck_case!(
        grad_linear,
        |g: &mut Graph, v: &[Var]| g.linear(v[0], v[1], Some(v[2])),
        [vec![3, 4], vec![4, 5], vec![5]]
    );
    gradcheck_case!(
        grad_add_sub_mul,
        |g: &mut Graph, v: &[Var]| {
            let a = g.add(v[0], v[1])?;
            let b = g.mul(a, v[1])?;
            let c = g.sub(b, v[0])?;
            let c = g.scale(c, 0.7);
            Ok(g.add_scalar(c, 0.3))
        },
        [vec![3, 4], vec![3, 4]]
    );
    gradcheck_case!(
        grad_silu,
        |g: &mut Graph, v: &[Var]| Ok(g.silu(v[0])),
        [vec![3, 4]]
    );
    gradcheck_case!(
        grad_gelu,
        |g: &mut Graph, v: &[Var]| Ok(g.gelu(v[0])),
        [vec![3, 4]]
    );
    gradcheck_case!(
        grad_layer_norm,
        |g: &mut Graph, v: &[Var]| Ok(g.layer_norm(v[0], 1e-5)),
        [vec![3, 6]]
    );
    gradcheck_case!(
        grad_repeat_gather_slice,
        |g: &mut Graph, v: &[Var]| {
            let r = g.repeat_rows(v[0], 3);
            let s = g.slice_cols(r, 1, 2)?;
            g.gather_rows(s, &[0, 5, 5, 2])
        },
        [vec![2, 4]]
    );
    gradcheck_case!(
        grad_concat,
        |g: &mut Graph, v: &[Var]| {
            let c = g.concat_cols(&[v[0], v[1]])?;
            g.concat_rows(&[c, c])
        },
        [vec![3, 2], vec![3, 1]]
    );
    gradcheck_case!(
        grad_attention,
        |g: &mut Graph, v: &[Var]| g.attention(v[0], v[1], v[2], 2, 3),
        [vec![6, 4], vec![6, 4], vec![6, 4]]
    );
    gradcheck_case!(
        grad_l2_normalize,
        |g: &mut Graph, v: &[Var]| Ok(g.l2_normalize_rows(v[0])),
        [vec![3, 4]]
    );
    gradcheck_case!(
        grad_rotate_pairs,
        |g: &mut Graph, v: &[Var]| {
            let rot = PairRotation {
                pairs: 2,
                cos: (0..6).map(|i| (i as f32 * 0.7).cos()).collect(),
                sin: (0..6).map(|i| (i as f32 * 0.7).sin()).collect(),
            };
            g.rotate_pairs(v[0], &rot)
        },
        [vec![3, 8]]
    );
    gradcheck_case!(
        grad_mse,
        |g: &mut Graph, v: &[Var]| g.mse(v[0], v[1], Some(vec![1.0, 2.0, 0.5])),
        [vec![3, 2], vec![3, 2]]
    );
    gradcheck_case!(
        grad_cross_entropy,
        |g: &mut Graph, v: &[Var]| g.cross_entropy(v[0], &[2, 0, 1]),
        [vec![3, 4]]
    );
    gradcheck_case!(
        grad_mean,
        |g: &mut Graph, v: &[Var]| Ok(g.mean(v[0])),
        [vec![3, 4]]
    );

    #[test]
    fn sum_and_square_closed_forms() {
        let p = rand(&[4, 3], 5);
        let mut g = Graph::new();
        let v = g.param("p", p.clone());
        let l = g.sum(v);
        assert_eq!(
            g.backward(l).unwrap().by_name("p").unwrap(),
            &Tensor::ones(&[4, 3])
        );

        let mut g = Graph::new();
        let v = g.param("p", p.clone());
        let sq = g.mul(v, v).unwrap();
        let l = g.sum(sq);
        let grad = g.backward(l).unwrap();
        assert_eq!(grad.by_name("p").unwrap(), &p.scale(2.0));
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        let build = |g: &mut Graph, v: &[Var]| -> Result<Var> {
            let h = g.linear(v[0], v[1], Some(v[2]))?;
            let h = g.gelu(h);
            g.linear(h, v[3], Some(v[4]))
        };
        let inputs = vec![
            rand(&[5, 6], 11),
            rand(&[6, 8], 12),
            rand(&[8], 13),
            rand(&[8, 3], 14),
            rand(&[3], 15),
        ];
        let e = gradcheck(&build, &inputs, 1e-3);
        assert!(e <= TOL, "relative error {e:e}");
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let v = g.param("p", Tensor::ones(&[2, 2]));
        assert!(matches!(g.backward(v), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn unreachable_params_get_zero_gradients() {
        let mut g = Graph::new();
        let a = g.param("a", Tensor::ones(&[2]));
        let _b = g.param("b", Tensor::ones(&[3]));
        let l = g.sum(a);
        let named = g.backward(l).unwrap().into_named(&g);
        assert_eq!(named["b"], Tensor::zeros(&[3]));
    }
}
