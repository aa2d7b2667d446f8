//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every op appends one node holding its output value, so node order is a
//! topological order and the backward pass is a single reverse sweep. Leaves
//! created with `requires_grad = false` prune whole subgraphs from the sweep:
//! attribution marks only the input, training marks only the parameters.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use super::gemm::{gemm, MatRef};
use super::kernels::{self, ConvGeom};
use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    /// One loss per row, shape `[N]`.
    None,
}

/// Whether stochastic layers are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Reshape(Var),
    LogSoftmax(Var),
    Sigmoid(Var),
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Nll {
        input: Var,
        targets: Vec<usize>,
        reduction: Reduction,
    },
    Bce {
        input: Var,
        targets: Vec<T>,
        reduction: Reduction,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Clamp applied to probabilities inside the binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Default)]
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar with respect to the leaves that asked for them.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for `var`, or `None` when no path reaches it.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        parents: &[Var],
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * factor);
        self.push("scale", out, Op::Scale(a, factor), &[a])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(a), &[a])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatRef::row_major(self.value(a).data(), m, k),
            MatRef::row_major(self.value(b).data(), k, n),
            T::zero(),
            &mut out,
        );
        let out = Tensor::new(&[m, n], out)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// Adds `bias[c]` along axis 1 of an `[N, C, ...]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.value(x).shape(), self.value(bias).shape());
        if sx.len() < 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(shape_err("add_bias", sx, sb));
        }
        let inner: usize = sx[2..].iter().product();
        let b = self.value(bias).data();
        let mut out = self.value(x).clone();
        if inner == 1 {
            for row in out.data_mut().chunks_exact_mut(b.len()) {
                for (v, &bi) in row.iter_mut().zip(b) {
                    *v = *v + bi;
                }
            }
        } else {
            for (i, plane) in out.data_mut().chunks_exact_mut(inner).enumerate() {
                let bi = b[i % b.len()];
                plane.iter_mut().for_each(|v| *v = *v + bi);
            }
        }
        self.push("add_bias", out, Op::AddBias(x, bias), &[x, bias])
    }

    /// Valid 2-D convolution with stride 1. `x: [N, C, H, W]`,
    /// `weight: [O, C, KH, KW]`.
    pub fn conv2d(&mut self, x: Var, weight: Var) -> Result<Var> {
        let (sx, sw) = (self.value(x).shape(), self.value(weight).shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sx[2] < sw[2] || sx[3] < sw[3] {
            return Err(shape_err("conv2d", sx, sw));
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            height: sx[2],
            width: sx[3],
            out_ch: sw[0],
            kh: sw[2],
            kw: sw[3],
        };
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(weight).data());
        let out = Tensor::new(&[geom.batch, geom.out_ch, geom.out_h(), geom.out_w()], out)?;
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                input: x,
                weight,
                geom,
            },
            &[x, weight],
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", out, Op::Relu(x), &[x])
    }

    /// 2x2 max pooling, stride 2, over the last two axes of `[N, C, H, W]`.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 4 || sx[2] < 2 || sx[3] < 2 {
            return Err(shape_err("maxpool2", &sx, &[2, 2]));
        }
        let (out, argmax) = kernels::maxpool2_forward(&sx, self.value(x).data());
        let out = Tensor::new(&[sx[0], sx[1], sx[2] / 2, sx[3] / 2], out)?;
        self.push("maxpool2", out, Op::MaxPool2 { input: x, argmax }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        let n = *shape
            .first()
            .ok_or_else(|| shape_err("flatten", shape, &[]))?;
        let rest = shape[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Log-softmax over the last axis of `[N, K]`.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.value(x).shape();
        if sx.len() != 2 || sx[1] == 0 {
            return Err(shape_err("log_softmax", sx, &[]));
        }
        let k = sx[1];
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(k) {
            let mut arg = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[arg] {
                    arg = j;
                }
            }
            let max = row[arg];
            // the max term contributes exactly 1; ln_1p over the rest keeps
            // precision when one class dominates
            let rest: T = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != arg)
                .map(|(_, &v)| (v - max).exp())
                .sum();
            let tail = rest.ln_1p();
            row.iter_mut().for_each(|v| *v = (*v - max) - tail);
        }
        self.push("log_softmax", out, Op::LogSoftmax(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        self.push("sigmoid", out, Op::Sigmoid(x), &[x])
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1 / (1 - p)`. In eval
    /// mode this returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mut out = self.value(x).clone();
        apply_mask(out.data_mut(), &mask);
        self.push("dropout", out, Op::Dropout { input: x, mask }, &[x])
    }

    /// Negative log-likelihood of `targets` under log-probabilities `[N, K]`.
    pub fn nll_loss(&mut self, logp: Var, targets: &[usize], reduction: Reduction) -> Result<Var> {
        let s = self.value(logp).shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(shape_err("nll_loss", s, &[targets.len()]));
        }
        let k = s[1];
        if let Some(&label) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::InvalidLabel { label, classes: k });
        }
        let data = self.value(logp).data();
        let per_row: Vec<T> = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -data[i * k + t])
            .collect();
        let out = reduce(per_row, reduction);
        self.push(
            "nll_loss",
            out,
            Op::Nll {
                input: logp,
                targets: targets.to_vec(),
                reduction,
            },
            &[logp],
        )
    }

    /// Binary cross-entropy of probabilities `[N]` or `[N, 1]` against 0/1
    /// targets, with `p` clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce_loss(&mut self, probs: Var, targets: &[T], reduction: Reduction) -> Result<Var> {
        let s = self.value(probs).shape();
        if self.value(probs).len() != targets.len() || s.first() != Some(&targets.len()) {
            return Err(shape_err("bce_loss", s, &[targets.len()]));
        }
        let eps = T::of(BCE_EPS);
        let per_row: Vec<T> = self
            .value(probs)
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &t)| {
                let p = p.max(eps).min(T::one() - eps);
                -(t * p.ln() + (T::one() - t) * (T::one() - p).ln())
            })
            .collect();
        let out = reduce(per_row, reduction);
        self.push(
            "bce_loss",
            out,
            Op::Bce {
                input: probs,
                targets: targets.to_vec(),
                reduction,
            },
            &[probs],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if root.needs_grad {
            grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                leaves[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &node.value, g, &mut grads)?;
        }
        Ok(Gradients { grads: leaves })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        match grads[var.0].as_mut() {
            Some(existing) => add_into(existing.data_mut(), g.data()),
            None => grads[var.0] = Some(g),
        }
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        out: &Tensor<T>,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *b, g.clone());
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, g.map(|v| -v));
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let data = g
                        .data()
                        .iter()
                        .zip(vb.data())
                        .map(|(&d, &y)| d * y)
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(va.shape(), data)?);
                }
                if self.wants(*b) {
                    let data = g
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(&d, &x)| d * x)
                        .collect();
                    self.accumulate(grads, *b, Tensor::new(vb.shape(), data)?);
                }
            }
            Op::Scale(a, factor) => {
                let f = *factor;
                self.accumulate(grads, *a, g.map(|v| v * f));
            }
            Op::Sum(a) => {
                let seed = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), seed));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                let gm = MatRef::row_major(g.data(), m, n);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(
                        gm,
                        MatRef::row_major(vb.data(), k, n).t(),
                        T::zero(),
                        &mut da,
                    );
                    self.accumulate(grads, *a, Tensor::new(&[m, k], da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(
                        MatRef::row_major(va.data(), m, k).t(),
                        gm,
                        T::zero(),
                        &mut db,
                    );
                    self.accumulate(grads, *b, Tensor::new(&[k, n], db)?);
                }
            }
            Op::AddBias(x, bias) => {
                if self.wants(*bias) {
                    let c = self.value(*bias).len();
                    let inner: usize = g.shape()[2..].iter().product();
                    let mut db = vec![T::zero(); c];
                    for (i, chunk) in g.data().chunks_exact(inner).enumerate() {
                        db[i % c] = db[i % c] + chunk.iter().copied().sum();
                    }
                    self.accumulate(grads, *bias, Tensor::new(&[c], db)?);
                }
                self.accumulate(grads, *x, g);
            }
            Op::Conv2d {
                input,
                weight,
                geom,
            } => {
                let (dx, dw) = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g.data(),
                    self.wants(*input),
                    self.wants(*weight),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, Tensor::new(self.value(*input).shape(), dx)?);
                }
                if let Some(dw) = dw {
                    self.accumulate(
                        grads,
                        *weight,
                        Tensor::new(self.value(*weight).shape(), dw)?,
                    );
                }
            }
            Op::Relu(x) => {
                // Subgradient 0 at the kink.
                let data = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape(), data)?);
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = Tensor::zeros(self.value(*input).shape());
                let buf = dx.data_mut();
                for (&d, &idx) in g.data().iter().zip(argmax) {
                    buf[idx as usize] = buf[idx as usize] + d;
                }
                self.accumulate(grads, *input, dx);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.reshape(&shape)?);
            }
            Op::LogSoftmax(x) => {
                let k = out.shape()[1];
                let mut dx = g;
                for (drow, yrow) in dx
                    .data_mut()
                    .chunks_exact_mut(k)
                    .zip(out.data().chunks_exact(k))
                {
                    let total: T = drow.iter().copied().sum();
                    let mut arg = 0;
                    for (j, &y) in yrow.iter().enumerate() {
                        if y > yrow[arg] {
                            arg = j;
                        }
                    }
                    for (j, (d, &y)) in drow.iter_mut().zip(yrow).enumerate() {
                        // exp(y) rounds to 1 for a dominant class, so that
                        // entry uses g - total - expm1(y) * total instead
                        *d = if j == arg {
                            (*d - total) - y.exp_m1() * total
                        } else {
                            *d - y.exp() * total
                        };
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&d, &y)| d * y * (T::one() - y))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(out.shape(), data)?);
            }
            Op::Dropout { input, mask } => {
                let mut dx = g;
                apply_mask(dx.data_mut(), mask);
                self.accumulate(grads, *input, dx);
            }
            Op::Nll {
                input,
                targets,
                reduction,
            } => {
                let k = self.value(*input).shape()[1];
                let mut dx = Tensor::zeros(self.value(*input).shape());
                let buf = dx.data_mut();
                for (i, &t) in targets.iter().enumerate() {
                    buf[i * k + t] = -row_seed(&g, i, *reduction, targets.len());
                }
                self.accumulate(grads, *input, dx);
            }
            Op::Bce {
                input,
                targets,
                reduction,
            } => {
                let eps = T::of(BCE_EPS);
                let p = self.value(*input);
                let data = p
                    .data()
                    .iter()
                    .zip(targets)
                    .enumerate()
                    .map(|(i, (&p, &t))| {
                        let p = p.max(eps).min(T::one() - eps);
                        let local = -t / p + (T::one() - t) / (T::one() - p);
                        row_seed(&g, i, *reduction, targets.len()) * local
                    })
                    .collect();
                self.accumulate(grads, *input, Tensor::new(p.shape(), data)?);
            }
        }
        Ok(())
    }

    /// Per-example fingerprint of every piecewise branch taken in the
    /// recorded forward pass: ReLU signs, max-pool winners and the BCE clamp. Two
    /// forward passes with equal fingerprints lie on the same smooth piece.
    pub fn kink_signatures(&self, batch: usize) -> Vec<u64> {
        let mut hashers: Vec<DefaultHasher> = (0..batch).map(|_| DefaultHasher::new()).collect();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    let data = self.value(*x).data();
                    let per = data.len() / batch;
                    for (h, chunk) in hashers.iter_mut().zip(data.chunks_exact(per)) {
                        for v in chunk {
                            (*v > T::zero()).hash(h);
                        }
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    // winners are flat indices into the whole batch
                    let per = argmax.len() / batch;
                    let per_input = (self.value(*input).len() / batch) as u32;
                    for (row, (h, chunk)) in
                        hashers.iter_mut().zip(argmax.chunks_exact(per)).enumerate()
                    {
                        let base = row as u32 * per_input;
                        for &idx in chunk {
                            (idx - base).hash(h);
                        }
                    }
                }
                Op::Bce { input, .. } => {
                    let eps = T::of(BCE_EPS);
                    for (h, &p) in hashers.iter_mut().zip(self.value(*input).data()) {
                        ((p < eps) as u8 + 2 * (p > T::one() - eps) as u8).hash(h);
                    }
                }
                _ => {}
            }
        }
        hashers.into_iter().map(|h| h.finish()).collect()
    }

    /// Rows whose binary cross-entropy input lies outside the clamp range.
    /// The loss is flat there, while the backward pass still returns the
    /// derivative at the clamp boundary.
    pub fn bce_clamped(&self, batch: usize) -> Vec<bool> {
        let mut clamped = vec![false; batch];
        let eps = T::of(BCE_EPS);
        for node in &self.nodes {
            if let Op::Bce { input, .. } = &node.op {
                for (c, &p) in clamped.iter_mut().zip(self.value(*input).data()) {
                    *c |= p < eps || p > T::one() - eps;
                }
            }
        }
        clamped
    }
}

fn apply_mask<T: Element>(data: &mut [T], mask: &[T]) {
    for (v, &m) in data.iter_mut().zip(mask) {
        *v = *v * m;
    }
}

fn reduce<T: Element>(per_row: Vec<T>, reduction: Reduction) -> Tensor<T> {
    match reduction {
        Reduction::Sum => Tensor::scalar(per_row.iter().copied().sum()),
        Reduction::Mean => {
            let n = T::of(per_row.len().max(1) as f64);
            Tensor::scalar(per_row.iter().copied().sum::<T>() / n)
        }
        Reduction::None => {
            let n = per_row.len();
            Tensor::new(&[n], per_row).expect("length matches")
        }
    }
}

/// Upstream gradient reaching row `i` of a reduced loss.
fn row_seed<T: Element>(g: &Tensor<T>, i: usize, reduction: Reduction, rows: usize) -> T {
    match reduction {
        Reduction::Sum => g.data()[0],
        Reduction::Mean => g.data()[0] / T::of(rows as f64),
        Reduction::None => g.data()[i],
    }
}
