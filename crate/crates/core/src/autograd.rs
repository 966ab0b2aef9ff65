//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Each operation appends a [`GradNode`] to the [`Tape`]; creation order is a
//! topological order, so [`Tape::backward`] walks the node list in reverse.
//! A training step builds a fresh tape, registers its parameters with
//! [`Tape::param`] (gradients tracked) or [`Tape::constant`] (gradients stay
//! exactly zero), runs the forward computation, calls `backward`, and reads
//! gradients back with [`Tape::grad`].

use crate::error::{RecastError, Result};
use crate::tensor::{
    conv2d_grad_input, conv2d_grad_weight, matmul_nt_kernel, matmul_tn_kernel,
    Conv2dGeometry, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a pointwise loss collapses to a scalar.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    fn factor(self, n: usize) -> f64 {
        match self {
            Reduction::Mean => 1.0 / n as f64,
            Reduction::Sum => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Gelu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    AddBias { x: Var, bias: Var },
    AddChannelBias { x: Var, bias: Var },
    Conv2d { x: Var, w: Var, geom: Conv2dGeometry },
    Combine { coeffs: Var, templates: Vec<Var>, sets: usize },
    Sum(Var),
    SmoothL1 { a: Var, b: Var, beta: f64, reduction: Reduction },
    Mse { a: Var, b: Var, reduction: Reduction },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Matmul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::SliceCols { .. } => "slice_cols",
            Op::AddBias { .. } => "add_bias",
            Op::AddChannelBias { .. } => "add_channel_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::Combine { .. } => "combine",
            Op::Sum(_) => "sum",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::Mse { .. } => "mse",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Relu(a) | Op::Gelu(a) | Op::Transpose(a) | Op::Reshape(a) | Op::Sum(a) => {
                vec![*a]
            }
            Op::SliceCols { x, .. } => vec![*x],
            Op::AddBias { x, bias } | Op::AddChannelBias { x, bias } => vec![*x, *bias],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Combine { coeffs, templates, .. } => {
                let mut v = vec![*coeffs];
                v.extend(templates);
                v
            }
            Op::SmoothL1 { a, b, .. } | Op::Mse { a, b, .. } => vec![*a, *b],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// A recorded value with its accumulated gradient and provenance.
#[derive(Debug)]
pub struct GradNode {
    value: Tensor,
    grad: Tensor,
    op: Op,
    requires_grad: bool,
}

impl GradNode {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    /// Name of the producing operation (`"leaf"` for inputs).
    pub fn op_name(&self) -> &'static str {
        self.op.name()
    }

    pub fn inputs(&self) -> Vec<Var> {
        self.op.inputs()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<GradNode>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn smooth_l1_term(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        0.5 * x * x / beta
    } else {
        x.abs() - 0.5 * beta
    }
}

fn smooth_l1_slope(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &GradNode {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].grad
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a leaf whose gradient is never tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad.data_mut().fill(0.0);
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(GradNode {
            value,
            grad,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    pub fn elementwise(&mut self, op: Elementwise, args: &[Var], scale: f64) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(RecastError::InvalidArgument(format!(
                "{op:?} takes {arity} operand(s), got {}",
                args.len()
            )));
        }
        match op {
            Elementwise::Add => self.add(args[0], args[1]),
            Elementwise::Sub => self.sub(args[0], args[1]),
            Elementwise::Mul => self.mul(args[0], args[1]),
            Elementwise::Scale => Ok(self.scale(args[0], scale)),
            Elementwise::Relu => Ok(self.relu(args[0])),
            Elementwise::Gelu => Ok(self.gelu(args[0])),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.record(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.record(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.record(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.record(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(relu);
        self.record(v, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.record(v, Op::Gelu(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.record(v, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.record(v, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.record(v, Op::Reshape(a)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x).slice_cols(start, end)?;
        Ok(self.record(v, Op::SliceCols { x, start }))
    }

    /// `x + b` with `x: B×N` and `b: N` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let (_, n) = xv.dims2()?;
        if bv.shape() != [n] {
            return Err(RecastError::shape("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.record(out, Op::AddBias { x, bias }))
    }

    /// `x + b` with `x: B×C×H×W` and `b: C` broadcast per channel.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let &[_, c, h, w] = xv.shape() else {
            return Err(RecastError::shape("add_channel_bias", xv.shape(), bv.shape()));
        };
        if bv.shape() != [c] {
            return Err(RecastError::shape("add_channel_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for (i, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
            let b = bv.data()[i % c];
            plane.iter_mut().for_each(|o| *o += b);
        }
        Ok(self.record(out, Op::AddChannelBias { x, bias }))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = Conv2dGeometry::new(self.value(x).shape(), self.value(w).shape(), stride, padding)?;
        let v = crate::tensor::conv2d(self.value(x), self.value(w), stride, padding)?;
        Ok(self.record(v, Op::Conv2d { x, w, geom }))
    }

    /// Template combination `(1/K)·Σ_k Σ_i C[k,i]·T_i` for a `K×n`
    /// coefficient matrix and `n` equally shaped templates.
    pub fn combine(&mut self, coeffs: Var, templates: &[Var]) -> Result<Var> {
        let (sets, n) = self.value(coeffs).dims2()?;
        if n != templates.len() || n == 0 {
            return Err(RecastError::InvalidArgument(format!(
                "coefficient matrix has {n} columns but {} templates were given",
                templates.len()
            )));
        }
        let shape = self.value(templates[0]).shape().to_vec();
        for t in templates {
            if self.value(*t).shape() != shape.as_slice() {
                return Err(RecastError::shape("combine", &shape, self.value(*t).shape()));
            }
        }
        let data: Vec<&[f64]> = templates.iter().map(|t| self.value(*t).data()).collect();
        let out = combine_sets(self.value(coeffs).data(), n, &data);
        let v = Tensor::from_raw(shape, out);
        Ok(self.record(
            v,
            Op::Combine {
                coeffs,
                templates: templates.to_vec(),
                sets,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.record(v, Op::Sum(a))
    }

    pub fn smooth_l1(&mut self, a: Var, b: Var, beta: f64, reduction: Reduction) -> Result<Var> {
        if !(beta > 0.0) {
            return Err(RecastError::InvalidArgument(format!("smooth L1 beta must be > 0, got {beta}")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(RecastError::shape("smooth_l1", av.shape(), bv.shape()));
        }
        let total: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| smooth_l1_term(x - y, beta))
            .sum();
        let v = Tensor::scalar(total * reduction.factor(av.numel()));
        Ok(self.record(v, Op::SmoothL1 { a, b, beta, reduction }))
    }

    pub fn mse(&mut self, a: Var, b: Var, reduction: Reduction) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(RecastError::shape("mse", av.shape(), bv.shape()));
        }
        let total: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let v = Tensor::scalar(total * reduction.factor(av.numel()));
        Ok(self.record(v, Op::Mse { a, b, reduction }))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (batch, classes) = lv.dims2()?;
        if labels.len() != batch {
            return Err(RecastError::InvalidArgument(format!(
                "{} labels for a batch of {batch}",
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(RecastError::LabelOutOfRange { label, classes });
        }
        let mut probs = vec![0.0; batch * classes];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|z| (z - max).exp()).sum();
            let log_z = max + sum_exp.ln();
            loss += log_z - row[label];
            for (p, z) in probs[i * classes..(i + 1) * classes].iter_mut().zip(row) {
                *p = (z - log_z).exp();
            }
        }
        let v = Tensor::scalar(loss / batch as f64);
        Ok(self.record(
            v,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Propagates `∂loss/∂node` to every ancestor of `loss` and adds the
    /// result to each node's stored gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(RecastError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(dy) = pending[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            for (input, contribution) in self.local_gradients(idx, &dy) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut pending[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
            let stored = self.nodes[idx].grad.data_mut();
            stored.iter_mut().zip(&dy).for_each(|(g, d)| *g += d);
        }
        Ok(())
    }

    fn local_gradients(&self, idx: usize, dy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let shape = |v: Var| self.nodes[v.0].value.shape();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, dy.to_vec()), (*b, dy.to_vec())],
            Op::Sub(a, b) => vec![(*a, dy.to_vec()), (*b, dy.iter().map(|d| -d).collect())],
            Op::Mul(a, b) => vec![
                (*a, dy.iter().zip(val(*b)).map(|(d, y)| d * y).collect()),
                (*b, dy.iter().zip(val(*a)).map(|(d, x)| d * x).collect()),
            ],
            Op::Scale(a, s) => vec![(*a, dy.iter().map(|d| d * s).collect())],
            Op::Relu(a) => vec![(
                *a,
                dy.iter().zip(val(*a)).map(|(d, &x)| if x > 0.0 { *d } else { 0.0 }).collect(),
            )],
            Op::Gelu(a) => vec![(
                *a,
                dy.iter().zip(val(*a)).map(|(d, &x)| d * gelu_derivative(x)).collect(),
            )],
            Op::Matmul(a, b) => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let n = shape(*b)[1];
                let mut out = Vec::with_capacity(2);
                if wants(*a) {
                    out.push((*a, matmul_nt_kernel(dy, val(*b), m, n, k)));
                }
                if wants(*b) {
                    out.push((*b, matmul_tn_kernel(val(*a), dy, m, k, n)));
                }
                out
            }
            Op::Transpose(a) => {
                let (r, c) = (shape(*a)[0], shape(*a)[1]);
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] = dy[j * r + i];
                    }
                }
                vec![(*a, g)]
            }
            Op::Reshape(a) => vec![(*a, dy.to_vec())],
            Op::SliceCols { x, start } => {
                let (r, c) = (shape(*x)[0], shape(*x)[1]);
                let w = dy.len() / r;
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    g[i * c + start..i * c + start + w].copy_from_slice(&dy[i * w..(i + 1) * w]);
                }
                vec![(*x, g)]
            }
            Op::AddBias { x, bias } => {
                let n = shape(*bias)[0];
                let mut db = vec![0.0; n];
                for row in dy.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(b, d)| *b += d);
                }
                vec![(*x, dy.to_vec()), (*bias, db)]
            }
            Op::AddChannelBias { x, bias } => {
                let s = shape(*x);
                let (c, plane) = (s[1], s[2] * s[3]);
                let mut db = vec![0.0; c];
                for (i, chunk) in dy.chunks(plane).enumerate() {
                    db[i % c] += chunk.iter().sum::<f64>();
                }
                vec![(*x, dy.to_vec()), (*bias, db)]
            }
            Op::Conv2d { x, w, geom } => {
                let mut out = Vec::with_capacity(2);
                if wants(*x) {
                    out.push((*x, conv2d_grad_input(geom, val(*w), dy)));
                }
                if wants(*w) {
                    out.push((*w, conv2d_grad_weight(geom, val(*x), dy)));
                }
                out
            }
            Op::Combine { coeffs, templates, sets } => {
                let k = *sets;
                let n = templates.len();
                let inv_k = 1.0 / k as f64;
                let mut out = Vec::with_capacity(n + 1);
                if wants(*coeffs) {
                    let inner: Vec<f64> = templates
                        .iter()
                        .map(|t| val(*t).iter().zip(dy).map(|(a, b)| a * b).sum::<f64>() * inv_k)
                        .collect();
                    let mut dc = vec![0.0; k * n];
                    for row in dc.chunks_mut(n) {
                        row.copy_from_slice(&inner);
                    }
                    out.push((*coeffs, dc));
                }
                let weights = column_means(val(*coeffs), k, n);
                for (t, a) in templates.iter().zip(weights) {
                    if wants(*t) {
                        out.push((*t, dy.iter().map(|d| d * a).collect()));
                    }
                }
                out
            }
            Op::Sum(a) => vec![(*a, vec![dy[0]; val(*a).len()])],
            Op::SmoothL1 { a, b, beta, reduction } => {
                let f = dy[0] * reduction.factor(val(*a).len());
                let ga: Vec<f64> = val(*a)
                    .iter()
                    .zip(val(*b))
                    .map(|(x, y)| f * smooth_l1_slope(x - y, *beta))
                    .collect();
                let gb = ga.iter().map(|g| -g).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Mse { a, b, reduction } => {
                let f = 2.0 * dy[0] * reduction.factor(val(*a).len());
                let ga: Vec<f64> = val(*a).iter().zip(val(*b)).map(|(x, y)| f * (x - y)).collect();
                let gb = ga.iter().map(|g| -g).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let batch = labels.len();
                let classes = probs.len() / batch;
                let f = dy[0] / batch as f64;
                let mut g: Vec<f64> = probs.iter().map(|p| p * f).collect();
                for (i, &label) in labels.iter().enumerate() {
                    g[i * classes + label] -= f;
                }
                vec![(*logits, g)]
            }
        }
    }
}

/// Column means of a row-major `k×n` matrix.
/// `(1/K)·Σ_k Σ_i C[k,i]·T_i`, one coefficient set at a time. Both the
/// pure generator and the tape use this so their values agree bit for bit.
pub(crate) fn combine_sets(coeffs: &[f64], n: usize, templates: &[&[f64]]) -> Vec<f64> {
    let numel = templates[0].len();
    let k = coeffs.len() / n;
    let mut acc = vec![0.0; numel];
    let mut per_set = vec![0.0; numel];
    for row in coeffs.chunks(n) {
        per_set.iter_mut().for_each(|w| *w = 0.0);
        for (t, &c) in templates.iter().zip(row) {
            for (w, tv) in per_set.iter_mut().zip(t.iter()) {
                *w += c * tv;
            }
        }
        acc.iter_mut().zip(&per_set).for_each(|(a, w)| *a += w);
    }
    let inv_k = 1.0 / k as f64;
    acc.iter_mut().for_each(|a| *a *= inv_k);
    acc
}

pub(crate) fn column_means(c: &[f64], k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for row in c.chunks(n) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    let inv = 1.0 / k as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    out
}
