//! Eager reverse-mode tape.
//!
//! Every operation evaluates immediately and appends a node holding its
//! output value plus whatever the backward rule needs. Node ids are
//! assigned in creation order, so the node list is already topologically
//! sorted and [`Tape::backward`] is a single reverse sweep.

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// The operation kinds reachable through [`Tape::apply`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Conv3x3,
    Add,
    MulScalar,
    Relu,
    Sigmoid,
    Mean,
    GlobalAvgPool,
    Upsample2xNearest,
    Downsample2xAvg,
    ConcatChannels,
    SoftmaxCrossEntropy,
    L2Norm,
    LogSumExp,
}

impl OpKind {
    pub const ALL: [OpKind; 14] = [
        OpKind::MatMul,
        OpKind::Conv3x3,
        OpKind::Add,
        OpKind::MulScalar,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Mean,
        OpKind::GlobalAvgPool,
        OpKind::Upsample2xNearest,
        OpKind::Downsample2xAvg,
        OpKind::ConcatChannels,
        OpKind::SoftmaxCrossEntropy,
        OpKind::L2Norm,
        OpKind::LogSumExp,
    ];
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv3x3 { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    MulScalar { x: Var, s: Var },
    Scale { x: Var, c: f64 },
    Relu(Var),
    Sigmoid(Var),
    Mean(Var),
    GlobalAvgPool(Var),
    Upsample2x(Var),
    Downsample2x(Var),
    Concat(Vec<Var>),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    L2Norm(Var),
    LogSumExp(Var),
    Reshape(Var),
    Select { x: Var, index: usize },
    ChannelBias { x: Var, b: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; `None` if `var` does not
    /// require grad.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn chw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(shape_err(op, shape, &[0, 0, 0])),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
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

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// The single element of a one-element node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Dispatches one of the listed [`OpKind`]s over `inputs`.
    ///
    /// `Conv3x3` takes `(x, w)` or `(x, w, b)`; `SoftmaxCrossEntropy`
    /// takes `(logits, labels)` where `labels` holds integral class ids;
    /// `ConcatChannels` takes any nonzero number of inputs.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::invalid(format!(
                    "{kind:?} expects {n} inputs, got {}",
                    inputs.len()
                )))
            }
        };
        match kind {
            OpKind::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Conv3x3 => match inputs {
                [x, w] => self.conv3x3(*x, *w, None),
                [x, w, b] => self.conv3x3(*x, *w, Some(*b)),
                _ => Err(Error::invalid("Conv3x3 expects 2 or 3 inputs")),
            },
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::MulScalar => {
                arity(2)?;
                self.mul_scalar(inputs[0], inputs[1])
            }
            OpKind::Relu => {
                arity(1)?;
                Ok(self.relu(inputs[0]))
            }
            OpKind::Sigmoid => {
                arity(1)?;
                Ok(self.sigmoid(inputs[0]))
            }
            OpKind::Mean => {
                arity(1)?;
                Ok(self.mean(inputs[0]))
            }
            OpKind::GlobalAvgPool => {
                arity(1)?;
                self.global_avg_pool(inputs[0])
            }
            OpKind::Upsample2xNearest => {
                arity(1)?;
                self.upsample2x(inputs[0])
            }
            OpKind::Downsample2xAvg => {
                arity(1)?;
                self.downsample2x(inputs[0])
            }
            OpKind::ConcatChannels => self.concat(inputs),
            OpKind::SoftmaxCrossEntropy => {
                arity(2)?;
                let labels = self.value(inputs[1]).data().to_vec();
                let mut ids = Vec::with_capacity(labels.len());
                for l in labels {
                    if l < 0.0 || l.fract() != 0.0 {
                        return Err(Error::invalid(format!("label {l} is not a class index")));
                    }
                    ids.push(l as usize);
                }
                self.softmax_cross_entropy(inputs[0], &ids)
            }
            OpKind::L2Norm => {
                arity(1)?;
                Ok(self.l2_norm(inputs[0]))
            }
            OpKind::LogSumExp => {
                arity(1)?;
                Ok(self.log_sum_exp(inputs[0]))
            }
        }
    }

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(shape_err("matmul", sa, sb)),
        };
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    /// Stride-1, padding-1 convolution. `x: (C_in, H, W)`,
    /// `w: (C_out, C_in, 3, 3)`, optional `b: (C_out)`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (c_in, h, wd) = chw("conv3x3", self.shape(x))?;
        let c_out = match *self.shape(w) {
            [co, ci, 3, 3] if ci == c_in => co,
            _ => return Err(shape_err("conv3x3", self.shape(x), self.shape(w))),
        };
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(shape_err("conv3x3", self.shape(w), self.shape(b)));
            }
        }
        let plane = h * wd;
        let mut out = vec![0.0; c_out * plane];
        if let Some(b) = b {
            for (co, &bv) in self.value(b).data().iter().enumerate() {
                out[co * plane..(co + 1) * plane].fill(bv);
            }
        }
        kernels::conv3x3_forward(
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
            c_in,
            c_out,
            h,
            wd,
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(Tensor::new(vec![c_out, h, wd], out)?, Op::Conv3x3 { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    /// `s * x` where `s` is a one-element node; differentiable in both.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("mul_scalar", self.shape(x), self.shape(s)));
        }
        let sv = self.scalar(s);
        let data = self.value(x).data().iter().map(|v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(Tensor::new(shape, data)?, Op::MulScalar { x, s }, rg))
    }

    /// `c * x` for a constant `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map_unary(x, |v| v * c, Op::Scale { x, c })
    }

    /// `x + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = self.constant(Tensor::new(shape, c.to_vec())?);
        self.add(x, k)
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(shape, data).expect("same shape"), op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    /// Mean over all elements, shape `(1)`.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// `(C, H, W) -> (C)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw("global_avg_pool", self.shape(x))?;
        let plane = h * w;
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks_exact(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        debug_assert_eq!(data.len(), c);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_vec(data), Op::GlobalAvgPool(x), rg))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw("upsample2x_nearest", self.shape(x))?;
        let mut out = vec![0.0; c * 4 * h * w];
        kernels::upsample2x(self.value(x).data(), &mut out, c, h, w);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![c, 2 * h, 2 * w], out)?, Op::Upsample2x(x), rg))
    }

    pub fn downsample2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw("downsample2x_avg", self.shape(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err("downsample2x_avg", self.shape(x), &[c, h / 2 * 2, w / 2 * 2]));
        }
        let mut out = vec![0.0; c * h * w / 4];
        kernels::downsample2x(self.value(x).data(), &mut out, c, h, w);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![c, h / 2, w / 2], out)?, Op::Downsample2x(x), rg))
    }

    /// Concatenation along the leading axis. Trailing dimensions must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("concat_channels needs at least one input"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        for &x in xs {
            let s = self.shape(x);
            if s[1..] != tail[..] {
                return Err(shape_err("concat_channels", self.shape(first), s));
            }
            lead += s[0];
        }
        let mut data = Vec::with_capacity(lead * tail.iter().product::<usize>());
        for &x in xs {
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = self.any_grad(xs);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(xs.to_vec()), rg))
    }

    /// Mean per-pixel softmax cross-entropy of `(classes, H, W)` logits
    /// against `H * W` labels. Also accepts `(classes)` logits with one label.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let classes = shape[0];
        let pixels: usize = shape[1..].iter().product();
        if labels.len() != pixels {
            return Err(shape_err("softmax_cross_entropy", &shape, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!(
                "softmax_cross_entropy: label {bad} out of range for {classes} classes"
            )));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; z.len()];
        let mut total = 0.0;
        for p in 0..pixels {
            let mut max = f64::NEG_INFINITY;
            for c in 0..classes {
                max = max.max(z[c * pixels + p]);
            }
            let mut sum = 0.0;
            for c in 0..classes {
                let e = (z[c * pixels + p] - max).exp();
                probs[c * pixels + p] = e;
                sum += e;
            }
            for c in 0..classes {
                probs[c * pixels + p] /= sum;
            }
            let l = labels[p];
            total += -(z[l * pixels + p] - max - sum.ln());
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / pixels as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Euclidean norm over all elements, shape `(1)`.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let n = self.value(x).sum_sq().sqrt();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(n), Op::L2Norm(x), rg)
    }

    /// `log(sum(exp(x)))` over all elements, shape `(1)`.
    pub fn log_sum_exp(&mut self, x: Var) -> Var {
        let v = kernels::log_sum_exp(self.value(x).data());
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(v), Op::LogSumExp(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Element `index` of `x` (flat), shape `(1)`.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = self.value(x);
        if index >= v.len() {
            return Err(shape_err("select", v.shape(), &[index]));
        }
        let s = v.data()[index];
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Select { x, index }, rg))
    }

    /// Adds `b[c]` to every element of channel `c` of `x: (C, ...)`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if self.shape(b) != [shape[0]] {
            return Err(shape_err("channel_bias", &shape, self.shape(b)));
        }
        let per: usize = shape[1..].iter().product();
        let bias = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[i / per])
            .collect();
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::ChannelBias { x, b }, rg))
    }

    /// Sum of one-element nodes.
    pub fn sum_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        let mut iter = xs.iter();
        let mut acc = *iter
            .next()
            .ok_or_else(|| Error::invalid("sum of zero terms"))?;
        for &x in iter {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from the one-element `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward on an empty tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                if !node.requires_grad {
                    return None;
                }
                let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                Some(Tensor::new(node.value.shape().to_vec(), data).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if rg(v) {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let row = &g[i * n..(i + 1) * n];
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] += row.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        let row = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            for (d, s) in gb[p * n..(p + 1) * n].iter_mut().zip(row) {
                                *d += a_ip * s;
                            }
                        }
                    }
                });
            }
            Op::Conv3x3 { x, w, b } => {
                let [c_out, c_in, _, _] = *self.shape(*w) else { unreachable!() };
                let [_, h, wd] = *self.shape(*x) else { unreachable!() };
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut gx = rg(*x).then(|| vec![0.0; xv.len()]);
                let mut gw = rg(*w).then(|| vec![0.0; wv.len()]);
                kernels::conv3x3_backward(
                    xv,
                    wv,
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    c_in,
                    c_out,
                    h,
                    wd,
                );
                if let Some(gx) = gx {
                    acc(*x, &mut |d| add_into(d, &gx));
                }
                if let Some(gw) = gw {
                    acc(*w, &mut |d| add_into(d, &gw));
                }
                if let Some(b) = b {
                    let plane = h * wd;
                    acc(*b, &mut |gb| {
                        for (co, gbv) in gb.iter_mut().enumerate() {
                            *gbv += g[co * plane..(co + 1) * plane].iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::MulScalar { x, s } => {
                let sv = self.scalar(*s);
                let xv = self.value(*x).data();
                acc(*x, &mut |d| {
                    for (di, gi) in d.iter_mut().zip(g) {
                        *di += sv * gi;
                    }
                });
                acc(*s, &mut |d| {
                    d[0] += xv.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                });
            }
            Op::Scale { x, c } => acc(*x, &mut |d| {
                for (di, gi) in d.iter_mut().zip(g) {
                    *di += c * gi;
                }
            }),
            Op::Relu(x) => {
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for ((di, gi), yi) in d.iter_mut().zip(g).zip(y) {
                        if *yi > 0.0 {
                            *di += gi;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for ((di, gi), yi) in d.iter_mut().zip(g).zip(y) {
                        *di += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|di| *di += g[0] / n));
            }
            Op::GlobalAvgPool(x) => {
                let [_, h, w] = *self.shape(*x) else { unreachable!() };
                let plane = h * w;
                acc(*x, &mut |d| {
                    for (c, chunk) in d.chunks_exact_mut(plane).enumerate() {
                        let gc = g[c] / plane as f64;
                        chunk.iter_mut().for_each(|di| *di += gc);
                    }
                });
            }
            Op::Upsample2x(x) => {
                let [c, h, w] = *self.shape(*x) else { unreachable!() };
                acc(*x, &mut |d| kernels::upsample2x_adjoint(g, d, c, h, w));
            }
            Op::Downsample2x(x) => {
                let [c, h, w] = *self.shape(*x) else { unreachable!() };
                acc(*x, &mut |d| kernels::downsample2x_adjoint(g, d, c, h, w));
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let len = self.value(x).len();
                    acc(x, &mut |d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let pixels = labels.len();
                let scale = g[0] / pixels as f64;
                acc(*logits, &mut |d| {
                    for (i, (di, p)) in d.iter_mut().zip(probs).enumerate() {
                        let (c, px) = (i / pixels, i % pixels);
                        let onehot = if labels[px] == c { 1.0 } else { 0.0 };
                        *di += scale * (p - onehot);
                    }
                });
            }
            Op::L2Norm(x) => {
                let n = node.value.data()[0];
                let xv = self.value(*x).data();
                if n > 0.0 {
                    acc(*x, &mut |d| {
                        for (di, xi) in d.iter_mut().zip(xv) {
                            *di += g[0] * xi / n;
                        }
                    });
                }
            }
            Op::LogSumExp(x) => {
                let lse = node.value.data()[0];
                let xv = self.value(*x).data();
                acc(*x, &mut |d| {
                    for (di, xi) in d.iter_mut().zip(xv) {
                        *di += g[0] * (xi - lse).exp();
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Select { x, index } => acc(*x, &mut |d| d[*index] += g[0]),
            Op::ChannelBias { x, b } => {
                acc(*x, &mut |d| add_into(d, g));
                let per = g.len() / self.value(*b).len();
                acc(*b, &mut |d| {
                    for (c, chunk) in g.chunks_exact(per).enumerate() {
                        d[c] += chunk.iter().sum::<f64>();
                    }
                });
            }
        }
    }
}
