//! Reverse-mode differentiation over a fixed operation vocabulary.
//!
//! A [`Tape`] records every forward operation in execution order. Leaves are
//! either constant inputs or trainable parameters keyed by a [`ParamKey`];
//! [`Tape::backward`] walks the tape once in reverse and returns one gradient
//! per trainable parameter reached from the loss.
//!
//! Shape rules per op kind:
//! - `add`: equal shapes, or a rank-1 bias whose length equals the last axis of
//!   the left operand (broadcast over leading axes).
//! - `sub`, `mul`, `dot`: equal shapes. `dot` returns a scalar.
//! - `matmul`: `[m, k] × [k, n] → [m, n]`.
//! - `conv2d`: NCHW input, OIHW kernel, symmetric zero padding, equal strides.
//! - `prelu`: any input, single-element slope.
//! - `flatten`: `[n, ...] → [n, prod(...)]`.
//! - `l2_normalize`: normalizes along the last axis.
//! - `sum`, `scale`: any shape; `sum` returns a scalar.
//!
//! Two fused loss kernels sit beside the vocabulary: `cross_entropy` and the
//! additive angular margin logits used by the ArcFace loss.

mod gradcheck;
pub(crate) mod kernels;

use std::collections::BTreeMap;

pub use gradcheck::{grad_check, GradCheckReport};
pub use kernels::ConvGeom;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Index of a recorded node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifier of a trainable parameter, stable across tapes.
pub type ParamKey = usize;

/// The registered forward operation kinds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    MatMul,
    Conv2d { stride: usize, padding: usize },
    Prelu,
    Flatten,
    L2Normalize,
    Dot,
    Sum,
    Scale(f64),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::MatMul => "matmul",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::Prelu => "prelu",
            OpKind::Flatten => "flatten",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::Dot => "dot",
            OpKind::Sum => "sum",
            OpKind::Scale(_) => "scale",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            OpKind::Flatten | OpKind::L2Normalize | OpKind::Sum | OpKind::Scale(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Clone, Debug)]
struct ArcSaved<T> {
    x_hat: Vec<T>,
    x_norm: Vec<T>,
    w_hat: Vec<T>,
    w_norm: Vec<T>,
    /// d(target logit)/d(cos θ_target) / s, including the clamp mask.
    target_slope: Vec<T>,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Input,
    Param(ParamKey),
    Add { a: NodeId, b: NodeId, bias: bool },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Conv2d { x: NodeId, kernel: NodeId, geom: ConvGeom, cols: Vec<Vec<T>> },
    Prelu { x: NodeId, slope: NodeId },
    Flatten { x: NodeId },
    L2Normalize { x: NodeId, norms: Vec<T> },
    Dot { a: NodeId, b: NodeId },
    Sum { x: NodeId },
    Scale { x: NodeId, c: T },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<T> },
    ArcMargin { features: NodeId, weights: NodeId, targets: Vec<usize>, s: T, saved: ArcSaved<T> },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Distance of a forward evaluation from a point where an op is not smooth.
#[derive(Clone, Debug, PartialEq)]
pub struct Kink {
    pub op: &'static str,
    pub distance: f64,
    pub threshold: f64,
}

/// Gradients keyed by parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    map: BTreeMap<ParamKey, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, key: ParamKey) -> Option<&Tensor<T>> {
        self.map.get(&key)
    }

    pub fn contains(&self, key: ParamKey) -> bool {
        self.map.contains_key(&key)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamKey, &Tensor<T>)> {
        self.map.iter().map(|(&k, v)| (k, v))
    }

    /// Elementwise sum of two gradient maps.
    pub fn merged(mut self, other: &Gradients<T>) -> Self {
        for (k, g) in &other.map {
            match self.map.get_mut(k) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.map.insert(*k, g.clone());
                }
            }
        }
        self
    }

    /// Rescales each gradient tensor whose L2 norm exceeds `max_norm` down
    /// to exactly `max_norm`. Tensors are clipped independently.
    pub fn clip_each(mut self, max_norm: f64) -> Self {
        for g in self.map.values_mut() {
            let n = g.norm();
            if n > max_norm {
                let f = T::of(max_norm / n);
                g.data_mut().iter_mut().for_each(|v| *v = *v * f);
            }
        }
        self
    }
}

/// Records forward operations for one backward pass.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    kinks: Vec<Kink>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            kinks: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Non-smooth points met during the forward evaluation so far.
    pub fn kinks(&self) -> &[Kink] {
        &self.kinks
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, key: ParamKey, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Param(key), true)
    }

    /// Dispatch one of the registered op kinds.
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != kind.arity() {
            return Err(Error::invalid(
                kind.name(),
                format!("expected {} inputs, got {}", kind.arity(), inputs.len()),
            ));
        }
        match kind {
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Sub => self.sub(inputs[0], inputs[1]),
            OpKind::Mul => self.mul(inputs[0], inputs[1]),
            OpKind::MatMul => self.matmul(inputs[0], inputs[1]),
            OpKind::Conv2d { stride, padding } => {
                self.conv2d(inputs[0], inputs[1], stride, padding)
            }
            OpKind::Prelu => self.prelu(inputs[0], inputs[1]),
            OpKind::Flatten => self.flatten(inputs[0]),
            OpKind::L2Normalize => self.l2_normalize(inputs[0]),
            OpKind::Dot => self.dot(inputs[0], inputs[1]),
            OpKind::Sum => Ok(self.sum(inputs[0])),
            OpKind::Scale(c) => Ok(self.scale(inputs[0], c)),
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let bias = if va.shape() == vb.shape() {
            false
        } else if vb.shape().len() == 1 && va.shape().last() == Some(&vb.numel()) {
            true
        } else {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        };
        let mut out = va.clone();
        if bias {
            let n = vb.numel();
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                *o = *o + vb.data()[i % n];
            }
        } else {
            out.add_assign(vb);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add { a, b, bias }, rg))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul { a, b, m, k, n }, rg))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] || stride == 0 {
            return Err(Error::shape("conv2d", sx, sk));
        }
        if sx[2] + 2 * padding < sk[2] || sx[3] + 2 * padding < sk[3] {
            return Err(Error::shape("conv2d", sx, sk));
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_channels: sx[1],
            height: sx[2],
            width: sx[3],
            out_channels: sk[0],
            kernel_h: sk[2],
            kernel_w: sk[3],
            stride,
            padding,
        };
        let (out, cols) =
            kernels::conv2d_forward(&geom, self.value(x).data(), self.value(kernel).data());
        let out = Tensor::new(
            vec![geom.batch, geom.out_channels, geom.out_h(), geom.out_w()],
            out,
        )?;
        let rg = self.rg(x) || self.rg(kernel);
        // Columns are only needed for the kernel gradient.
        let cols = if self.rg(kernel) { cols } else { Vec::new() };
        Ok(self.push(out, Op::Conv2d { x, kernel, geom, cols }, rg))
    }

    pub fn prelu(&mut self, x: NodeId, slope: NodeId) -> Result<NodeId> {
        if self.value(slope).numel() != 1 {
            return Err(Error::shape("prelu", self.shape(x), self.shape(slope)));
        }
        let a = self.value(slope).item();
        let vx = self.value(x);
        let min_abs = vx
            .data()
            .iter()
            .map(|v| v.abs().f64())
            .fold(f64::INFINITY, f64::min);
        let out = vx.map(|v| if v > T::zero() { v } else { a * v });
        self.kinks.push(Kink {
            op: "prelu",
            distance: min_abs,
            threshold: 1e-3,
        });
        let rg = self.rg(x) || self.rg(slope);
        Ok(self.push(out, Op::Prelu { x, slope }, rg))
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(Error::invalid("flatten", "cannot flatten a scalar"));
        }
        let rest: usize = s[1..].iter().product();
        let out = self.value(x).clone().reshape(vec![s[0], rest])?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Flatten { x }, rg))
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let cols = *vx.shape().last().unwrap_or(&1);
        let mut out = vx.clone();
        let mut norms = Vec::with_capacity(vx.numel() / cols);
        for row in out.data_mut().chunks_mut(cols) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n.f64() <= 1e-12 {
                return Err(Error::invalid(
                    "l2_normalize",
                    format!("row norm {} is too small to normalize", n),
                ));
            }
            for v in row.iter_mut() {
                *v = *v / n;
            }
            norms.push(n);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::L2Normalize { x, norms }, rg))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("dot", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let v: T = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(v), Op::Dot { a, b }, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::Sum { x }, rg)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let c = T::of(c);
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, c }, rg)
    }

    /// Mean negative log-softmax of the target class, per row of `[N, n]` logits.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits);
        if s.len() != 2 {
            return Err(Error::invalid(
                "cross_entropy",
                format!("logits must be [batch, classes], got {s:?}"),
            ));
        }
        let (rows, n) = (s[0], s[1]);
        if n < 2 {
            return Err(Error::invalid("cross_entropy", "need at least two classes"));
        }
        if targets.len() != rows {
            return Err(Error::invalid(
                "cross_entropy",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("target {t} out of range for {n} classes"),
            ));
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); rows * n];
        let mut total = 0.0f64;
        for (i, &t) in targets.iter().enumerate() {
            let row = &z[i * n..(i + 1) * n];
            let (arg, max) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, T::neg_infinity()), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
            // log-sum-exp as max + ln(1 + rest) keeps precision when the loss is tiny.
            let mut rest = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * n + j] = e;
                if j != arg {
                    rest = rest + e;
                }
            }
            let denom = T::one() + rest;
            for p in &mut probs[i * n..(i + 1) * n] {
                *p = *p / denom;
            }
            total += ((max - row[t]) + rest.ln_1p()).f64();
        }
        let loss = Tensor::scalar(T::of(total / rows as f64));
        let rg = self.rg(logits);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Scaled cosine logits `[N, C]` with an additive angular margin on the target
    /// class. `features` is `[N, D]`; `weights` is `[D, C]` with one column per
    /// class. Both sides are l2-normalized internally.
    pub fn arc_margin_logits(
        &mut self,
        features: NodeId,
        weights: NodeId,
        targets: &[usize],
        s: f64,
        m: f64,
    ) -> Result<NodeId> {
        let (sf, sw) = (self.shape(features), self.shape(weights));
        if sf.len() != 2 || sw.len() != 2 || sf[1] != sw[0] {
            return Err(Error::shape("arcface", sf, sw));
        }
        let (rows, dim, classes) = (sf[0], sf[1], sw[1]);
        if targets.len() != rows {
            return Err(Error::invalid(
                "arcface",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::invalid(
                "arcface",
                format!("target {t} out of range for {classes} classes"),
            ));
        }
        let x = self.value(features).data();
        let w = self.value(weights).data();

        let mut x_hat = x.to_vec();
        let mut x_norm = Vec::with_capacity(rows);
        for (i, row) in x_hat.chunks_mut(dim).enumerate() {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n.f64() <= 1e-12 {
                return Err(Error::invalid(
                    "arcface",
                    format!("feature vector {i} has zero norm"),
                ));
            }
            row.iter_mut().for_each(|v| *v = *v / n);
            x_norm.push(n);
        }
        let mut w_norm = vec![T::zero(); classes];
        for d in 0..dim {
            for j in 0..classes {
                let v = w[d * classes + j];
                w_norm[j] = w_norm[j] + v * v;
            }
        }
        for (j, n) in w_norm.iter_mut().enumerate() {
            *n = n.sqrt();
            if n.f64() <= 1e-12 {
                return Err(Error::invalid(
                    "arcface",
                    format!("class weight column {j} has zero norm"),
                ));
            }
        }
        let mut w_hat = w.to_vec();
        for d in 0..dim {
            for j in 0..classes {
                w_hat[d * classes + j] = w_hat[d * classes + j] / w_norm[j];
            }
        }

        let mut cos = vec![T::zero(); rows * classes];
        kernels::gemm_nn(&x_hat, &w_hat, &mut cos, rows, dim, classes);

        let (cos_m, sin_m) = (m.cos(), m.sin());
        let fallback_at = (std::f64::consts::PI - m).cos();
        let lim = 1.0 - 1e-7;
        let mut target_slope = vec![T::zero(); rows];
        let mut min_edge = f64::INFINITY;
        let mut min_fallback = f64::INFINITY;
        for (i, &t) in targets.iter().enumerate() {
            let raw = cos[i * classes + t].f64();
            min_edge = min_edge.min(1.0 - raw.abs());
            let (phi, slope) = if m == 0.0 {
                // φ(c) = c, no square root to protect.
                (raw, 1.0)
            } else {
                min_fallback = min_fallback.min((raw - fallback_at).abs());
                let c = raw.clamp(-lim, lim);
                let clamp_mask = if raw.abs() > lim { 0.0 } else { 1.0 };
                if c > fallback_at {
                    let sin_t = (1.0 - c * c).sqrt();
                    (c * cos_m - sin_t * sin_m, (cos_m + c * sin_m / sin_t) * clamp_mask)
                } else {
                    (c - m * sin_m, clamp_mask)
                }
            };
            cos[i * classes + t] = T::of(phi);
            target_slope[i] = T::of(slope);
        }
        self.kinks.push(Kink {
            op: "arcface",
            distance: min_edge,
            threshold: 1e-3,
        });
        if m != 0.0 {
            self.kinks.push(Kink {
                op: "arcface-fallback",
                distance: min_fallback,
                threshold: 1e-3,
            });
        }
        let s_t = T::of(s);
        cos.iter_mut().for_each(|v| *v = *v * s_t);
        let out = Tensor::new(vec![rows, classes], cos)?;
        let rg = self.rg(features) || self.rg(weights);
        Ok(self.push(
            out,
            Op::ArcMargin {
                features,
                weights,
                targets: targets.to_vec(),
                s: s_t,
                saved: ArcSaved {
                    x_hat,
                    x_norm,
                    w_hat,
                    w_norm,
                    target_slope,
                },
            },
            rg,
        ))
    }

    /// Gradient of a scalar node with respect to every trainable parameter it
    /// depends on.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));
        let mut out = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(key) => match out.get_mut(key) {
                    Some(acc) => Tensor::add_assign(acc, &g),
                    None => {
                        out.insert(*key, g);
                    }
                },
                Op::Add { a, b, bias } => {
                    if self.rg(*b) {
                        let gb = if *bias {
                            let n = self.value(*b).numel();
                            let mut gb = vec![T::zero(); n];
                            for (i, &v) in g.data().iter().enumerate() {
                                gb[i % n] = gb[i % n] + v;
                            }
                            Tensor::new(self.shape(*b).to_vec(), gb)?
                        } else {
                            g.clone()
                        };
                        accumulate(&mut grads, *b, gb);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub { a, b } => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.map(|v| -v));
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul { a, b } => {
                    if self.rg(*a) {
                        let ga = zip(&g, self.value(*b), |x, y| x * y);
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = zip(&g, self.value(*a), |x, y| x * y);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMul { a, b, m, k, n } => {
                    if self.rg(*a) {
                        let mut ga = vec![T::zero(); m * k];
                        kernels::gemm_nt(g.data(), self.value(*b).data(), &mut ga, *m, *n, *k);
                        accumulate(&mut grads, *a, Tensor::new(vec![*m, *k], ga)?);
                    }
                    if self.rg(*b) {
                        let mut gb = vec![T::zero(); k * n];
                        kernels::gemm_tn(self.value(*a).data(), g.data(), &mut gb, *k, *m, *n);
                        accumulate(&mut grads, *b, Tensor::new(vec![*k, *n], gb)?);
                    }
                }
                Op::Conv2d {
                    x,
                    kernel,
                    geom,
                    cols,
                } => {
                    let (dx, dk) = kernels::conv2d_backward(
                        geom,
                        g.data(),
                        self.value(*kernel).data(),
                        cols,
                        self.rg(*x),
                        self.rg(*kernel),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?);
                    }
                    if let Some(dk) = dk {
                        accumulate(
                            &mut grads,
                            *kernel,
                            Tensor::new(self.shape(*kernel).to_vec(), dk)?,
                        );
                    }
                }
                Op::Prelu { x, slope } => {
                    let vx = self.value(*x);
                    let a = self.value(*slope).item();
                    if self.rg(*slope) {
                        let ga: T = vx
                            .data()
                            .iter()
                            .zip(g.data())
                            .filter(|(&v, _)| v <= T::zero())
                            .map(|(&v, &gv)| v * gv)
                            .sum();
                        let gs = Tensor::new(self.shape(*slope).to_vec(), vec![ga])?;
                        accumulate(&mut grads, *slope, gs);
                    }
                    if self.rg(*x) {
                        let gx = zip(&g, vx, |gv, v| if v > T::zero() { gv } else { a * gv });
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::Flatten { x } => {
                    let gx = g.reshape(self.shape(*x).to_vec())?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::L2Normalize { x, norms } => {
                    let y = &node.value;
                    let cols = *y.shape().last().unwrap_or(&1);
                    let mut gx = g.clone();
                    for (r, (gr, yr)) in gx
                        .data_mut()
                        .chunks_mut(cols)
                        .zip(y.data().chunks(cols))
                        .enumerate()
                    {
                        let proj: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for (gv, &yv) in gr.iter_mut().zip(yr) {
                            *gv = (*gv - yv * proj) / norms[r];
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Dot { a, b } => {
                    let gs = g.item();
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, self.value(*b).map(|v| v * gs));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, self.value(*a).map(|v| v * gs));
                    }
                }
                Op::Sum { x } => {
                    let gx = Tensor::full(self.shape(*x).to_vec(), g.item());
                    accumulate(&mut grads, *x, gx);
                }
                Op::Scale { x, c } => {
                    let c = *c;
                    accumulate(&mut grads, *x, g.map(|v| v * c));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let n = self.shape(*logits)[1];
                    let scale = g.item() / T::of(targets.len() as f64);
                    let mut gz = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        gz[i * n + t] = gz[i * n + t] - T::one();
                    }
                    gz.iter_mut().for_each(|v| *v = *v * scale);
                    accumulate(
                        &mut grads,
                        *logits,
                        Tensor::new(self.shape(*logits).to_vec(), gz)?,
                    );
                }
                Op::ArcMargin {
                    features,
                    weights,
                    targets,
                    s,
                    saved,
                } => {
                    let (rows, dim) = (self.shape(*features)[0], self.shape(*features)[1]);
                    let classes = self.shape(*weights)[1];
                    let mut gcos: Vec<T> = g.data().iter().map(|&v| v * *s).collect();
                    for (i, &t) in targets.iter().enumerate() {
                        gcos[i * classes + t] = gcos[i * classes + t] * saved.target_slope[i];
                    }
                    if self.rg(*features) {
                        let mut gxh = vec![T::zero(); rows * dim];
                        kernels::gemm_nt(&gcos, &saved.w_hat, &mut gxh, rows, classes, dim);
                        for i in 0..rows {
                            let xh = &saved.x_hat[i * dim..(i + 1) * dim];
                            let gr = &mut gxh[i * dim..(i + 1) * dim];
                            let proj: T = gr.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                            for (gv, &xv) in gr.iter_mut().zip(xh) {
                                *gv = (*gv - xv * proj) / saved.x_norm[i];
                            }
                        }
                        accumulate(&mut grads, *features, Tensor::new(vec![rows, dim], gxh)?);
                    }
                    if self.rg(*weights) {
                        let mut gwh = vec![T::zero(); dim * classes];
                        kernels::gemm_tn(&saved.x_hat, &gcos, &mut gwh, dim, rows, classes);
                        for j in 0..classes {
                            let mut proj = T::zero();
                            for d in 0..dim {
                                proj = proj + gwh[d * classes + j] * saved.w_hat[d * classes + j];
                            }
                            for d in 0..dim {
                                let idx = d * classes + j;
                                gwh[idx] = (gwh[idx] - saved.w_hat[idx] * proj) / saved.w_norm[j];
                            }
                        }
                        accumulate(
                            &mut grads,
                            *weights,
                            Tensor::new(vec![dim, classes], gwh)?,
                        );
                    }
                }
            }
        }
        Ok(Gradients { map: out })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}
