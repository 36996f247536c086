//! Dynamic reverse-mode tape. Rebuilt for every forward pass; single-threaded
//! tape structure, with deterministic element-wise parallelism inside the
//! heavy kernels (each output element is produced by exactly one fixed
//! sequential reduction, so results are bitwise identical at any thread count).

use rayon::prelude::*;

use crate::error::{GfError, Result};
use crate::numcore::tensor::Tensor;

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tid(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Tid, Tid),
    Sub(Tid, Tid),
    Mul(Tid, Tid),
    MinElem(Tid, Tid),
    AddScalar(Tid),
    Scale(Tid, f32),
    Clamp(Tid, f32, f32),
    Relu(Tid),
    Sigmoid(Tid),
    Tanh(Tid),
    Exp(Tid),
    MatMul(Tid, Tid),
    AddBias(Tid, Tid),
    Conv2d {
        x: Tid,
        w: Tid,
        stride: usize,
        pad: usize,
    },
    AddBiasChannel(Tid, Tid),
    GlobalAvgPool(Tid),
    Concat1(Vec<Tid>),
    Slice1 {
        x: Tid,
        start: usize,
        len: usize,
    },
    FlattenRows(Tid),
    MulBcast(Tid, Tid),
    AddBcast(Tid, Tid),
    SumAll(Tid),
    MeanAll(Tid),
    SoftmaxXent {
        logits: Tid,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
    /// Cached forward byproducts (softmax probabilities).
    aux: Option<Vec<f32>>,
    /// f64 copy of a scalar value, kept for precise loss readout.
    scalar_f64: Option<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Batch chunk size for deterministic partial-gradient reduction.
const CHUNK: usize = 8;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Tid {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
            aux: None,
            scalar_f64: None,
        });
        Tid(self.nodes.len() - 1)
    }

    fn rg(&self, id: Tid) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Tid {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Tid {
        self.leaf(value, false)
    }

    pub fn value(&self, id: Tid) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: Tid) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Gradient of a leaf, zeros if the loss never reached it.
    pub fn grad_or_zeros(&self, id: Tid) -> Vec<f32> {
        match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[id.0].value.numel()],
        }
    }

    /// Scalar value with f64 precision where the op recorded one.
    pub fn scalar_f64(&self, id: Tid) -> f64 {
        self.nodes[id.0]
            .scalar_f64
            .unwrap_or_else(|| self.nodes[id.0].value.item() as f64)
    }

    /// Cached softmax probabilities of a `softmax_xent` node.
    pub fn probs(&self, id: Tid) -> &[f32] {
        self.nodes[id.0]
            .aux
            .as_deref()
            .expect("node has no cached probabilities")
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn same_shape(&self, a: Tid, b: Tid, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(GfError::shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Tid, b: Tid) -> Result<Tid> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, self.rg(a) || self.rg(b), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Tid, b: Tid) -> Result<Tid> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, self.rg(a) || self.rg(b), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Tid, b: Tid) -> Result<Tid> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, self.rg(a) || self.rg(b), Op::Mul(a, b)))
    }

    /// Elementwise minimum; ties route the gradient to the left operand.
    pub fn min_elem(&mut self, a: Tid, b: Tid) -> Result<Tid> {
        self.same_shape(a, b, "min")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), f32::min);
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, self.rg(a) || self.rg(b), Op::MinElem(a, b)))
    }

    pub fn add_scalar(&mut self, a: Tid, c: f32) -> Tid {
        let data = self.value(a).data().iter().map(|v| v + c).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push(t, self.rg(a), Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Tid, c: f32) -> Tid {
        let data = self.value(a).data().iter().map(|v| v * c).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push(t, self.rg(a), Op::Scale(a, c))
    }

    /// 1 - x, elementwise.
    pub fn one_minus(&mut self, a: Tid) -> Tid {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn clamp(&mut self, a: Tid, lo: f32, hi: f32) -> Tid {
        let data = self.value(a).data().iter().map(|v| v.clamp(lo, hi)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push(t, self.rg(a), Op::Clamp(a, lo, hi))
    }

    pub fn relu(&mut self, a: Tid) -> Tid {
        let data = self.value(a).data().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push(t, self.rg(a), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Tid) -> Tid {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&v| (1.0 / (1.0 + (-v as f64).exp())) as f32)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push(t, self.rg(a), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Tid) -> Tid {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&v| (v as f64).tanh() as f32)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push(t, self.rg(a), Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Tid) -> Tid {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&v| (v as f64).exp() as f32)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push(t, self.rg(a), Op::Exp(a))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// [N,K] x [K,M] -> [N,M]; inner products accumulate in f64.
    pub fn matmul(&mut self, a: Tid, b: Tid) -> Result<Tid> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(GfError::shape(format!("matmul: {:?} x {:?}", sa, sb)));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        let t = Tensor::new(vec![n, m], data)?;
        Ok(self.push(t, self.rg(a) || self.rg(b), Op::MatMul(a, b)))
    }

    /// [N,D] + [D] row broadcast.
    pub fn add_bias(&mut self, x: Tid, b: Tid) -> Result<Tid> {
        let (sx, sb) = (self.value(x).shape(), self.value(b).shape());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(GfError::shape(format!("add_bias: {:?} + {:?}", sx, sb)));
        }
        let d = sx[1];
        let bias = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[i % d])
            .collect();
        let t = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push(t, self.rg(x) || self.rg(b), Op::AddBias(x, b)))
    }

    /// Affine layer: x·w + b.
    pub fn linear(&mut self, x: Tid, w: Tid, b: Tid) -> Result<Tid> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    // ── convolution and pooling ─────────────────────────────────────────

    /// Cross-correlation of [N,C,H,W] with [F,C,kh,kw], zero padding.
    pub fn conv2d(&mut self, x: Tid, w: Tid, stride: usize, pad: usize) -> Result<Tid> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(GfError::shape(format!("conv2d: {:?} * {:?}", sx, sw)));
        }
        if sx[1] != sw[1] {
            return Err(GfError::config(format!(
                "conv2d channel mismatch: input has {}, kernel expects {}",
                sx[1], sw[1]
            )));
        }
        if stride == 0 {
            return Err(GfError::config("conv2d stride must be >= 1".to_string()));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(GfError::config(format!(
                "conv2d kernel {}x{} larger than padded input {}x{}",
                kh,
                kw,
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;

        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = vec![0.0f32; n * f * oh * ow];
        out.par_chunks_mut(f * oh * ow)
            .enumerate()
            .for_each(|(ni, plane)| {
                conv2d_forward_one(
                    &xs[ni * c * h * wd..(ni + 1) * c * h * wd],
                    ws,
                    plane,
                    c,
                    h,
                    wd,
                    f,
                    kh,
                    kw,
                    oh,
                    ow,
                    stride,
                    pad,
                );
            });
        let t = Tensor::new(vec![n, f, oh, ow], out)?;
        Ok(self.push(t, self.rg(x) || self.rg(w), Op::Conv2d { x, w, stride, pad }))
    }

    /// [N,F,H,W] + [F] channel broadcast.
    pub fn add_bias_channel(&mut self, x: Tid, b: Tid) -> Result<Tid> {
        let (sx, sb) = (self.value(x).shape(), self.value(b).shape());
        if sx.len() != 4 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(GfError::shape(format!(
                "add_bias_channel: {:?} + {:?}",
                sx, sb
            )));
        }
        let (f, hw) = (sx[1], sx[2] * sx[3]);
        let bias = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[(i / hw) % f])
            .collect();
        let t = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push(t, self.rg(x) || self.rg(b), Op::AddBiasChannel(x, b)))
    }

    /// [N,C,H,W] -> [N,C] arithmetic mean over the spatial plane.
    pub fn global_avg_pool(&mut self, x: Tid) -> Result<Tid> {
        let sx = self.value(x).shape();
        if sx.len() != 4 {
            return Err(GfError::shape(format!("global_avg_pool: {:?}", sx)));
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let xs = self.value(x).data();
        let mut out = vec![0.0f32; n * c];
        for (i, o) in out.iter_mut().enumerate() {
            let base = i * hw;
            let mut acc = 0.0f64;
            for v in &xs[base..base + hw] {
                acc += *v as f64;
            }
            *o = (acc / hw as f64) as f32;
        }
        let t = Tensor::new(vec![n, c], out)?;
        Ok(self.push(t, self.rg(x), Op::GlobalAvgPool(x)))
    }

    // ── shape ops ───────────────────────────────────────────────────────

    /// Concatenate [N,D_i] tensors along dim 1.
    pub fn concat1(&mut self, parts: &[Tid]) -> Result<Tid> {
        if parts.is_empty() {
            return Err(GfError::input("concat1 of zero tensors".to_string()));
        }
        let n = self.value(parts[0]).shape()[0];
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != n {
                return Err(GfError::shape(format!("concat1 part shape {:?}", s)));
            }
            total += s[1];
        }
        let mut data = vec![0.0f32; n * total];
        let mut col = 0;
        for &p in parts {
            let d = self.value(p).shape()[1];
            let src = self.value(p).data();
            for row in 0..n {
                data[row * total + col..row * total + col + d]
                    .copy_from_slice(&src[row * d..(row + 1) * d]);
            }
            col += d;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let t = Tensor::new(vec![n, total], data)?;
        Ok(self.push(t, rg, Op::Concat1(parts.to_vec())))
    }

    /// Columns [start, start+len) of an [N,D] tensor.
    pub fn slice1(&mut self, x: Tid, start: usize, len: usize) -> Result<Tid> {
        let s = self.value(x).shape();
        if s.len() != 2 || start + len > s[1] {
            return Err(GfError::shape(format!(
                "slice1 [{start}, {}) of {:?}",
                start + len,
                s
            )));
        }
        let (n, d) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut data = vec![0.0f32; n * len];
        for row in 0..n {
            data[row * len..(row + 1) * len]
                .copy_from_slice(&src[row * d + start..row * d + start + len]);
        }
        let t = Tensor::new(vec![n, len], data)?;
        Ok(self.push(t, self.rg(x), Op::Slice1 { x, start, len }))
    }

    /// Reinterpret [N, ...] as [N, prod(rest)]; data is already row-major.
    pub fn flatten_rows(&mut self, x: Tid) -> Result<Tid> {
        let s = self.value(x).shape();
        if s.is_empty() {
            return Err(GfError::shape("flatten_rows on rank-0".to_string()));
        }
        let n = s[0];
        let rest: usize = s[1..].iter().product();
        let t = Tensor::new(vec![n, rest], self.value(x).data().to_vec())?;
        Ok(self.push(t, self.rg(x), Op::FlattenRows(x)))
    }

    /// Multiply every element of `x` by the single element of `s`.
    pub fn mul_bcast(&mut self, x: Tid, s: Tid) -> Result<Tid> {
        if self.value(s).numel() != 1 {
            return Err(GfError::shape("mul_bcast scalar must have 1 element".to_string()));
        }
        let sv = self.value(s).data()[0];
        let data = self.value(x).data().iter().map(|v| v * sv).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(t, self.rg(x) || self.rg(s), Op::MulBcast(x, s)))
    }

    /// Add the single element of `s` to every element of `x`.
    pub fn add_bcast(&mut self, x: Tid, s: Tid) -> Result<Tid> {
        if self.value(s).numel() != 1 {
            return Err(GfError::shape("add_bcast scalar must have 1 element".to_string()));
        }
        let sv = self.value(s).data()[0];
        let data = self.value(x).data().iter().map(|v| v + sv).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(t, self.rg(x) || self.rg(s), Op::AddBcast(x, s)))
    }

    // ── reductions and loss ─────────────────────────────────────────────

    pub fn sum_all(&mut self, x: Tid) -> Tid {
        let acc: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let id = self.push(Tensor::scalar(acc as f32), self.rg(x), Op::SumAll(x));
        self.nodes[id.0].scalar_f64 = Some(acc);
        id
    }

    pub fn mean_all(&mut self, x: Tid) -> Tid {
        let numel = self.value(x).numel();
        let acc: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let mean = acc / numel as f64;
        let id = self.push(Tensor::scalar(mean as f32), self.rg(x), Op::MeanAll(x));
        self.nodes[id.0].scalar_f64 = Some(mean);
        id
    }

    /// Mean softmax cross-entropy over the batch. Caches the probability
    /// rows; read them back with [`Tape::probs`]. Loss kept in f64 on the side.
    pub fn softmax_xent(&mut self, logits: Tid, labels: &[usize]) -> Result<Tid> {
        let s = self.value(logits).shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(GfError::shape(format!(
                "softmax_xent: logits {:?} vs {} labels",
                s,
                labels.len()
            )));
        }
        let (n, c) = (s[0], s[1]);
        if c < 2 {
            return Err(GfError::config(
                "softmax_xent needs at least 2 classes".to_string(),
            ));
        }
        for (i, &l) in labels.iter().enumerate() {
            if l >= c {
                return Err(GfError::input(format!(
                    "label {} out of range for {} classes (row {})",
                    l, c, i
                )));
            }
        }
        let xs = self.value(logits).data();
        let mut probs = vec![0.0f32; n * c];
        let mut loss = 0.0f64;
        for row in 0..n {
            let lrow = &xs[row * c..(row + 1) * c];
            let max = lrow.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut denom = 0.0f64;
            for &v in lrow {
                denom += (v as f64 - max).exp();
            }
            let log_denom = denom.ln();
            for (j, &v) in lrow.iter().enumerate() {
                probs[row * c + j] = ((v as f64 - max).exp() / denom) as f32;
            }
            loss += -((xs[row * c + labels[row]] as f64 - max) - log_denom);
        }
        loss /= n as f64;
        let rg = self.rg(logits);
        let id = self.push(
            Tensor::scalar(loss as f32),
            rg,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
            },
        );
        self.nodes[id.0].aux = Some(probs);
        self.nodes[id.0].scalar_f64 = Some(loss);
        Ok(id)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse-mode accumulation from a scalar loss into every
    /// `requires_grad` node reachable from it.
    pub fn backward(&mut self, loss: Tid) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(GfError::input(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.rg(loss) {
            return Err(GfError::input(
                "backward on a detached tensor: no upstream node requires gradients"
                    .to_string(),
            ));
        }
        self.value(loss).assert_finite("loss before backward")?;

        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = self.nodes[i].grad.clone().unwrap();
            let op = self.nodes[i].op.clone();
            self.backprop_node(i, &g, &op);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: Tid, delta: &[f32]) {
        if !self.rg(id) {
            return;
        }
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta.iter()) {
                    *gi += di;
                }
            }
            None => node.grad = Some(delta.to_vec()),
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[f32], op: &Op) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g);
                let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul(a, b) => {
                let da = zip_map(g, self.value(*b).data(), |gi, bi| gi * bi);
                let db = zip_map(g, self.value(*a).data(), |gi, ai| gi * ai);
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::MinElem(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let mut da = vec![0.0f32; g.len()];
                let mut db = vec![0.0f32; g.len()];
                for k in 0..g.len() {
                    if av[k] <= bv[k] {
                        da[k] = g[k];
                    } else {
                        db[k] = g[k];
                    }
                }
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::AddScalar(a) => self.accumulate(*a, g),
            Op::Scale(a, c) => {
                let da: Vec<f32> = g.iter().map(|v| v * c).collect();
                self.accumulate(*a, &da);
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a).data();
                let da: Vec<f32> = g
                    .iter()
                    .zip(av.iter())
                    .map(|(gi, &x)| if x >= *lo && x <= *hi { *gi } else { 0.0 })
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                let da = zip_map(g, av, |gi, x| if x > 0.0 { gi } else { 0.0 });
                self.accumulate(*a, &da);
            }
            Op::Sigmoid(a) => {
                let yv = self.nodes[i].value.data();
                let da: Vec<f32> = g
                    .iter()
                    .zip(yv.iter())
                    .map(|(gi, &y)| gi * y * (1.0 - y))
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::Tanh(a) => {
                let yv = self.nodes[i].value.data();
                let da: Vec<f32> = g
                    .iter()
                    .zip(yv.iter())
                    .map(|(gi, &y)| gi * (1.0 - y * y))
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::Exp(a) => {
                let yv = self.nodes[i].value.data();
                let da: Vec<f32> = g.iter().zip(yv.iter()).map(|(gi, &y)| gi * y).collect();
                self.accumulate(*a, &da);
            }
            Op::MatMul(a, b) => {
                let (n, k) = {
                    let s = self.value(*a).shape();
                    (s[0], s[1])
                };
                let m = self.value(*b).shape()[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                // da = g [N,M] x b^T [M,K]
                let mut da = vec![0.0f32; n * k];
                for r in 0..n {
                    for c in 0..k {
                        let mut acc = 0.0f64;
                        for j in 0..m {
                            acc += g[r * m + j] as f64 * bv[c * m + j] as f64;
                        }
                        da[r * k + c] = acc as f32;
                    }
                }
                // db = a^T [K,N] x g [N,M]
                let mut db = vec![0.0f32; k * m];
                for r in 0..k {
                    for c in 0..m {
                        let mut acc = 0.0f64;
                        for j in 0..n {
                            acc += av[j * k + r] as f64 * g[j * m + c] as f64;
                        }
                        db[r * m + c] = acc as f32;
                    }
                }
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::AddBias(x, b) => {
                self.accumulate(*x, g);
                let d = self.value(*b).numel();
                let mut db = vec![0.0f64; d];
                for (idx, gi) in g.iter().enumerate() {
                    db[idx % d] += *gi as f64;
                }
                let db32: Vec<f32> = db.iter().map(|&v| v as f32).collect();
                self.accumulate(*b, &db32);
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (dx, dw) = self.conv2d_backward(*x, *w, i, g, *stride, *pad);
                self.accumulate(*x, &dx);
                self.accumulate(*w, &dw);
            }
            Op::AddBiasChannel(x, b) => {
                self.accumulate(*x, g);
                let s = self.nodes[i].value.shape().to_vec();
                let (f, hw) = (s[1], s[2] * s[3]);
                let mut db = vec![0.0f64; f];
                for (idx, gi) in g.iter().enumerate() {
                    db[(idx / hw) % f] += *gi as f64;
                }
                let db32: Vec<f32> = db.iter().map(|&v| v as f32).collect();
                self.accumulate(*b, &db32);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape().to_vec();
                let hw = s[2] * s[3];
                let inv = 1.0 / hw as f32;
                let mut dx = vec![0.0f32; s.iter().product()];
                for (nc, gi) in g.iter().enumerate() {
                    let v = gi * inv;
                    for slot in &mut dx[nc * hw..(nc + 1) * hw] {
                        *slot = v;
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::Concat1(parts) => {
                let n = self.value(parts[0]).shape()[0];
                let total: usize = parts.iter().map(|&p| self.value(p).shape()[1]).sum();
                let mut col = 0;
                for &p in parts {
                    let d = self.value(p).shape()[1];
                    let mut dp = vec![0.0f32; n * d];
                    for row in 0..n {
                        dp[row * d..(row + 1) * d]
                            .copy_from_slice(&g[row * total + col..row * total + col + d]);
                    }
                    self.accumulate(p, &dp);
                    col += d;
                }
            }
            Op::Slice1 { x, start, len } => {
                let s = self.value(*x).shape().to_vec();
                let (n, d) = (s[0], s[1]);
                let mut dx = vec![0.0f32; n * d];
                for row in 0..n {
                    dx[row * d + start..row * d + start + len]
                        .copy_from_slice(&g[row * len..(row + 1) * len]);
                }
                self.accumulate(*x, &dx);
            }
            Op::FlattenRows(x) => {
                self.accumulate(*x, g);
            }
            Op::MulBcast(x, s) => {
                let sv = self.value(*s).data()[0];
                let dx: Vec<f32> = g.iter().map(|v| v * sv).collect();
                self.accumulate(*x, &dx);
                let xv = self.value(*x).data();
                let mut ds = 0.0f64;
                for (gi, xi) in g.iter().zip(xv.iter()) {
                    ds += *gi as f64 * *xi as f64;
                }
                self.accumulate(*s, &[ds as f32]);
            }
            Op::AddBcast(x, s) => {
                self.accumulate(*x, g);
                let ds: f64 = g.iter().map(|&v| v as f64).sum();
                self.accumulate(*s, &[ds as f32]);
            }
            Op::SumAll(x) => {
                let dx = vec![g[0]; self.value(*x).numel()];
                self.accumulate(*x, &dx);
            }
            Op::MeanAll(x) => {
                let numel = self.value(*x).numel();
                let dx = vec![g[0] / numel as f32; numel];
                self.accumulate(*x, &dx);
            }
            Op::SoftmaxXent { logits, labels } => {
                let probs = self.nodes[i].aux.as_ref().unwrap().clone();
                let (n, c) = {
                    let s = self.value(*logits).shape();
                    (s[0], s[1])
                };
                let scale = g[0] / n as f32;
                let mut dl = vec![0.0f32; n * c];
                for row in 0..n {
                    for j in 0..c {
                        let onehot = if labels[row] == j { 1.0 } else { 0.0 };
                        dl[row * c + j] = scale * (probs[row * c + j] - onehot);
                    }
                }
                self.accumulate(*logits, &dl);
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Tid,
        w: Tid,
        out_node: usize,
        g: &[f32],
        stride: usize,
        pad: usize,
    ) -> (Vec<f32>, Vec<f32>) {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        let so = self.nodes[out_node].value.shape().to_vec();
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, kh, kw) = (sw[0], sw[2], sw[3]);
        let (oh, ow) = (so[2], so[3]);
        let xs = self.value(x).data();
        let ws = self.value(w).data();

        let plane_x = c * h * wd;
        let plane_g = f * oh * ow;

        let mut dx = vec![0.0f32; n * plane_x];
        // dx is disjoint per sample; dw partials are reduced in fixed chunk
        // order so results do not depend on thread count.
        let dw_partials: Vec<Vec<f32>> = dx
            .par_chunks_mut(CHUNK * plane_x)
            .enumerate()
            .map(|(chunk_idx, dx_chunk)| {
                let n0 = chunk_idx * CHUNK;
                let n1 = (n0 + CHUNK).min(n);
                let mut dw = vec![0.0f32; f * c * kh * kw];
                for ni in n0..n1 {
                    let xrow = &xs[ni * plane_x..(ni + 1) * plane_x];
                    let grow = &g[ni * plane_g..(ni + 1) * plane_g];
                    let dxrow = &mut dx_chunk[(ni - n0) * plane_x..(ni - n0 + 1) * plane_x];
                    for fi in 0..f {
                        for ohi in 0..oh {
                            for owi in 0..ow {
                                let go = grow[(fi * oh + ohi) * ow + owi];
                                if go == 0.0 {
                                    continue;
                                }
                                for ci in 0..c {
                                    for khi in 0..kh {
                                        let ih = (ohi * stride + khi) as isize - pad as isize;
                                        if ih < 0 || ih >= h as isize {
                                            continue;
                                        }
                                        for kwi in 0..kw {
                                            let iw =
                                                (owi * stride + kwi) as isize - pad as isize;
                                            if iw < 0 || iw >= wd as isize {
                                                continue;
                                            }
                                            let xi =
                                                (ci * h + ih as usize) * wd + iw as usize;
                                            let wi = ((fi * c + ci) * kh + khi) * kw + kwi;
                                            dxrow[xi] += go * ws[wi];
                                            dw[wi] += go * xrow[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                dw
            })
            .collect();

        let mut dw = vec![0.0f32; f * c * kh * kw];
        for part in &dw_partials {
            for (acc, v) in dw.iter_mut().zip(part.iter()) {
                *acc += v;
            }
        }
        (dx, dw)
    }
}

fn zip_map(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

fn matmul_raw(a: &[f32], b: &[f32], n: usize, k: usize, m: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; n * m];
    out.par_chunks_mut(m).enumerate().for_each(|(r, row)| {
        for (c, slot) in row.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for j in 0..k {
                acc += a[r * k + j] as f64 * b[j * m + c] as f64;
            }
            *slot = acc as f32;
        }
    });
    out
}

fn conv2d_forward_one(
    x: &[f32],
    w: &[f32],
    out: &mut [f32],
    c: usize,
    h: usize,
    wd: usize,
    f: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
) {
    for fi in 0..f {
        for ohi in 0..oh {
            for owi in 0..ow {
                let mut acc = 0.0f64;
                for ci in 0..c {
                    for khi in 0..kh {
                        let ih = (ohi * stride + khi) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kwi in 0..kw {
                            let iw = (owi * stride + kwi) as isize - pad as isize;
                            if iw < 0 || iw >= wd as isize {
                                continue;
                            }
                            let xv = x[(ci * h + ih as usize) * wd + iw as usize];
                            let wv = w[((fi * c + ci) * kh + khi) * kw + kwi];
                            acc += xv as f64 * wv as f64;
                        }
                    }
                }
                out[(fi * oh + ohi) * ow + owi] = acc as f32;
            }
        }
    }
}

/// Staged GRU parameters: weights are [D,3H] / [H,3H], biases [3H],
/// gate order (reset, update, candidate).
#[derive(Debug, Clone, Copy)]
pub struct GruIds {
    pub w_ih: Tid,
    pub w_hh: Tid,
    pub b_ih: Tid,
    pub b_hh: Tid,
}

/// One GRU step: h' = z*h + (1-z)*n with
/// r = sigmoid(x_r + h_r), z = sigmoid(x_z + h_z), n = tanh(x_n + r*h_n).
pub fn gru_cell(tape: &mut Tape, x: Tid, h: Tid, p: &GruIds, hidden: usize) -> Result<Tid> {
    let gi = tape.linear(x, p.w_ih, p.b_ih)?;
    let gh = tape.linear(h, p.w_hh, p.b_hh)?;
    let gi_r = tape.slice1(gi, 0, hidden)?;
    let gi_z = tape.slice1(gi, hidden, hidden)?;
    let gi_n = tape.slice1(gi, 2 * hidden, hidden)?;
    let gh_r = tape.slice1(gh, 0, hidden)?;
    let gh_z = tape.slice1(gh, hidden, hidden)?;
    let gh_n = tape.slice1(gh, 2 * hidden, hidden)?;

    let r_pre = tape.add(gi_r, gh_r)?;
    let r = tape.sigmoid(r_pre);
    let z_pre = tape.add(gi_z, gh_z)?;
    let z = tape.sigmoid(z_pre);
    let rh = tape.mul(r, gh_n)?;
    let n_pre = tape.add(gi_n, rh)?;
    let n = tape.tanh(n_pre);

    let zh = tape.mul(z, h)?;
    let omz = tape.one_minus(z);
    let zn = tape.mul(omz, n)?;
    tape.add(zh, zn)
}
