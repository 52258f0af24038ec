//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Values
//! are immutable once recorded; [`Tape::backward`] walks the record in reverse
//! and returns per-node gradients. Each primitive also adds its FLOP cost to
//! a counter (see [`crate::cost`]), optionally split by a stage label.

use std::collections::BTreeMap;

use crate::cost;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{numel_of, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type Derivative<T> = Box<dyn Fn(T, T) -> T + Send + Sync>;

enum Op<T> {
    Leaf,
    MatMul(Var, Var, MmDims),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Map(Var, Derivative<T>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    TokenMean(Var),
    GroupMean(Var, Vec<(usize, usize)>),
    Embedding(Var, Vec<usize>),
    Sum(Var),
    SoftmaxCe {
        logits: Var,
        targets: Vec<Option<usize>>,
        smoothing: T,
        probs: Vec<T>,
    },
    SigmoidCe {
        logits: Var,
        targets: Vec<Option<usize>>,
        smoothing: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug)]
struct MmDims {
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    p: usize,
    q: usize,
    s: usize,
}

pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<T>>,
    store: Option<&'a ParamStore<T>>,
    param_vars: BTreeMap<String, Var>,
    flops: u64,
    stage: Option<&'static str>,
    stage_flops: BTreeMap<&'static str, u64>,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            param_vars: BTreeMap::new(),
            flops: 0,
            stage: None,
            stage_flops: BTreeMap::new(),
        }
    }

    /// A tape whose [`Tape::param`] calls resolve against `store`.
    pub fn with_params(store: &'a ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Total FLOPs recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// FLOPs recorded under each stage label.
    pub fn stage_flops(&self) -> &BTreeMap<&'static str, u64> {
        &self.stage_flops
    }

    /// Labels subsequent primitives for the per-stage FLOP breakdown.
    pub fn set_stage(&mut self, stage: Option<&'static str>) {
        self.stage = stage;
    }

    fn count(&mut self, flops: u64) {
        self.flops += flops;
        if let Some(s) = self.stage {
            *self.stage_flops.entry(s).or_insert(0) += flops;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records the named parameter once per tape and returns its handle.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| Error::Usage("tape has no parameter store".into()))?;
        let value = store
            .get(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.leaf(value, true);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.param_vars
    }

    /// A constant copy of `v`'s value; no gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    // ------------------------------------------------------------------
    // linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (dims, out_shape) = mm_dims(&sa, &sb)?;
        let mut out = vec![T::zero(); numel_of(&out_shape)];
        {
            let av = self.nodes[a.0].value.data();
            let bv = self.nodes[b.0].value.data();
            let MmDims { p, q, s, .. } = dims;
            for bi in 0..dims.batch {
                let ao = if dims.a_batched { bi * p * q } else { 0 };
                let bo = if dims.b_batched { bi * q * s } else { 0 };
                gemm_nn(
                    &av[ao..ao + p * q],
                    &bv[bo..bo + q * s],
                    &mut out[bi * p * s..(bi + 1) * p * s],
                    p,
                    q,
                    s,
                );
            }
        }
        self.count(cost::matmul(dims.batch, dims.p, dims.q, dims.s));
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b, dims), &[a, b]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if x.rank() < 2 {
            return Err(Error::shape("transpose", x.shape(), &[]));
        }
        let value = transpose_last2(x);
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    /// Same data under a new shape of equal size.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    // ------------------------------------------------------------------
    // elementwise

    /// `a + b`, where `b`'s shape may be a trailing suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    fn broadcast_binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let x = &self.nodes[a.0].value;
        let y = &self.nodes[b.0].value;
        if !is_suffix(x.shape(), y.shape()) {
            return Err(Error::shape(op, x.shape(), y.shape()));
        }
        let n = y.numel().max(1);
        let yd = y.data();
        let data: Vec<T> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, yd[i % n]))
            .collect();
        let value = Tensor::new(x.shape(), data)?;
        self.count(cost::ELEMENTWISE * value.numel() as u64);
        Ok(value)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * c);
        self.count(cost::ELEMENTWISE * value.numel() as u64);
        self.push(value, Op::Scale(a, c), &[a])
    }

    /// `c * a + shift`.
    pub fn scale_shift(&mut self, a: Var, c: T, shift: T) -> Var {
        let value = self.nodes[a.0].value.map(|x| c * x + shift);
        self.count(cost::SCALE_SHIFT_PER_ELEM * value.numel() as u64);
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(gelu_scalar);
        self.count(cost::GELU_PER_ELEM * value.numel() as u64);
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.max(T::zero()));
        self.count(cost::RELU_PER_ELEM * value.numel() as u64);
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(sigmoid_scalar);
        self.count(cost::SIGMOID_PER_ELEM * value.numel() as u64);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.tanh());
        self.count(cost::TANH_PER_ELEM * value.numel() as u64);
        self.push(value, Op::Tanh(a), &[a])
    }

    /// Custom elementwise map. `derivative(x, y)` receives the input and the
    /// output and returns `dy/dx`. Costs one FLOP per element.
    pub fn map(
        &mut self,
        a: Var,
        f: impl Fn(T) -> T,
        derivative: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Var {
        let value = self.nodes[a.0].value.map(f);
        self.count(cost::ELEMENTWISE * value.numel() as u64);
        self.push(value, Op::Map(a, Box::new(derivative)), &[a])
    }

    // ------------------------------------------------------------------
    // normalisation

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric {
                op: "softmax",
                detail: "NaN input".into(),
            });
        }
        let w = *x.shape().last().unwrap_or(&1);
        let mut data = x.data().to_vec();
        if w > 0 {
            for row in data.chunks_mut(w) {
                softmax_in_place(row);
            }
        }
        let value = Tensor::new(x.shape(), data)?;
        self.count(cost::SOFTMAX_PER_ELEM * value.numel() as u64);
        Ok(self.push(value, Op::Softmax(a), &[a]))
    }

    /// Layer normalisation over the last axis with variance epsilon 1e-6.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let d = *xv.shape().last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::shape("layer_norm", xv.shape(), &[]));
        }
        for g in [gain, bias] {
            if self.shape(g) != [d] {
                return Err(Error::shape("layer_norm", &[d], self.shape(g)));
            }
        }
        let gv = self.nodes[gain.0].value.data();
        let bv = self.nodes[bias.0].value.data();
        let eps = T::of(1e-6);
        let dt = T::of(d as f64);
        let rows = xv.numel() / d;
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        self.count(cost::LAYER_NORM_PER_ELEM * value.numel() as u64);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    // ------------------------------------------------------------------
    // structure

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(numel_of(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let t = &self.nodes[p.0].value;
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape("slice", &s, &[axis, start, len]));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out_shape = s.clone();
        out_shape[axis] = len;
        let src = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(numel_of(&out_shape));
        for o in 0..outer {
            let base = o * s[axis] * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    /// Mean over the token (second-to-last) axis, which is removed.
    pub fn token_mean(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s[s.len() - 2] == 0 {
            return Err(Error::shape("token_mean", &s, &[]));
        }
        let (p, d) = (s[s.len() - 2], s[s.len() - 1]);
        let outer = numel_of(&s) / (p * d);
        let src = self.nodes[x.0].value.data();
        let inv = T::one() / T::of(p as f64);
        let mut data = vec![T::zero(); outer * d];
        for o in 0..outer {
            let dst = &mut data[o * d..(o + 1) * d];
            for t in 0..p {
                let row = &src[(o * p + t) * d..(o * p + t + 1) * d];
                for (a, &b) in dst.iter_mut().zip(row) {
                    *a += b;
                }
            }
            for a in dst.iter_mut() {
                *a *= inv;
            }
        }
        let out_shape = [&s[..s.len() - 2], &[d]].concat();
        let value = Tensor::new(&out_shape, data)?;
        self.count(outer as u64 * cost::token_mean(p, d));
        Ok(self.push(value, Op::TokenMean(x), &[x]))
    }

    /// Mean of each contiguous token group `(start, len)`.
    pub fn group_mean(&mut self, x: Var, groups: &[(usize, usize)]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("group_mean", &s, &[]));
        }
        let (p, d) = (s[s.len() - 2], s[s.len() - 1]);
        if groups.iter().any(|&(a, l)| l == 0 || a + l > p) {
            return Err(Error::config("summarizer.k", "empty or out-of-range pooling group"));
        }
        let k = groups.len();
        let outer = numel_of(&s) / (p * d).max(1);
        let src = self.nodes[x.0].value.data();
        let mut data = vec![T::zero(); outer * k * d];
        for o in 0..outer {
            for (g, &(start, len)) in groups.iter().enumerate() {
                let dst = &mut data[(o * k + g) * d..(o * k + g + 1) * d];
                for t in start..start + len {
                    let row = &src[(o * p + t) * d..(o * p + t + 1) * d];
                    for (a, &b) in dst.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                let inv = T::one() / T::of(len as f64);
                for a in dst.iter_mut() {
                    *a *= inv;
                }
            }
        }
        let mut out_shape = s.clone();
        let n = out_shape.len();
        out_shape[n - 2] = k;
        let value = Tensor::new(&out_shape, data)?;
        self.count((outer * (p * d + k * d)) as u64);
        Ok(self.push(value, Op::GroupMean(x, groups.to_vec()), &[x]))
    }

    /// Rows of `table` (`V × d`) gathered by `ids`, shaped `lead ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || numel_of(lead) != ids.len() {
            return Err(Error::shape("embedding", &ts, lead));
        }
        let (vocab, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Usage(format!(
                "embedding id {bad} out of range for vocabulary {vocab}"
            )));
        }
        let src = self.nodes[table.0].value.data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out_shape = [lead, &[d]].concat();
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::Embedding(table, ids.to_vec()), &[table]))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        self.count(self.nodes[x.0].value.numel() as u64);
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    // ------------------------------------------------------------------
    // losses

    /// Mean softmax cross-entropy over rows with a target. The target
    /// distribution is `(1-ε)·onehot + ε/c`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        smoothing: f64,
    ) -> Result<Var> {
        let (rows, c) = self.loss_dims("softmax_cross_entropy", logits, targets)?;
        let x = self.nodes[logits.0].value.data();
        let eps = T::of(smoothing);
        let ct = T::of(c as f64);
        let mut probs = x.to_vec();
        let mut total = T::zero();
        let mut n = 0usize;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let max = x[r * c..(r + 1) * c]
                .iter()
                .copied()
                .fold(T::neg_infinity(), T::max);
            let lse = max
                + x[r * c..(r + 1) * c]
                    .iter()
                    .map(|&v| (v - max).exp())
                    .sum::<T>()
                    .ln();
            softmax_in_place(row);
            if let Some(t) = targets[r] {
                n += 1;
                for (j, &v) in x[r * c..(r + 1) * c].iter().enumerate() {
                    let q = eps / ct + if j == t { T::one() - eps } else { T::zero() };
                    total += q * (lse - v);
                }
            }
        }
        debug_assert!(rows == targets.len());
        let loss = total / T::of(n as f64);
        self.count((cost::SOFTMAX_PER_ELEM + 2) * (rows * c) as u64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                smoothing: eps,
                probs,
            },
            &[logits],
        ))
    }

    /// Mean (over rows with a target) of the per-row sum of sigmoid
    /// cross-entropies. Targets are `(1-ε)·onehot + ε/2`.
    pub fn sigmoid_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        smoothing: f64,
    ) -> Result<Var> {
        let (_, c) = self.loss_dims("sigmoid_cross_entropy", logits, targets)?;
        let x = self.nodes[logits.0].value.data();
        let eps = T::of(smoothing);
        let half = T::of(0.5);
        let mut total = T::zero();
        let mut n = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            n += 1;
            for (j, &z) in x[r * c..(r + 1) * c].iter().enumerate() {
                let y = eps * half + if j == t { T::one() - eps } else { T::zero() };
                total += z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p();
            }
        }
        let loss = total / T::of(n as f64);
        self.count(6 * x.len() as u64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SigmoidCe {
                logits,
                targets: targets.to_vec(),
                smoothing: eps,
            },
            &[logits],
        ))
    }

    fn loss_dims(
        &self,
        op: &'static str,
        logits: Var,
        targets: &[Option<usize>],
    ) -> Result<(usize, usize)> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape(op, s, &[targets.len()]));
        }
        let c = s[1];
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(Error::Usage(format!("target {bad} out of range for {c} classes")));
        }
        if targets.iter().all(Option::is_none) {
            return Err(Error::Usage(format!("{op}: no supervised rows")));
        }
        Ok((s[0], c))
    }

    // ------------------------------------------------------------------
    // reverse pass

    /// Gradients of the scalar `loss` with respect to every recorded value
    /// that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.param_vars.clone(),
        })
    }

    /// Backward pass that accumulates parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward(loss)?.accumulate_into(store)
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b, dims) => {
                let MmDims { p, q, s, .. } = *dims;
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                if nodes[a.0].requires_grad {
                    let ga = grad_buf(grads, nodes, *a);
                    for bi in 0..dims.batch {
                        let ao = if dims.a_batched { bi * p * q } else { 0 };
                        let bo = if dims.b_batched { bi * q * s } else { 0 };
                        gemm_nt(
                            &gd[bi * p * s..(bi + 1) * p * s],
                            &bv[bo..bo + q * s],
                            &mut ga[ao..ao + p * q],
                            p,
                            q,
                            s,
                        );
                    }
                }
                if nodes[b.0].requires_grad {
                    let gb = grad_buf(grads, nodes, *b);
                    for bi in 0..dims.batch {
                        let ao = if dims.a_batched { bi * p * q } else { 0 };
                        let bo = if dims.b_batched { bi * q * s } else { 0 };
                        gemm_tn(
                            &av[ao..ao + p * q],
                            &gd[bi * p * s..(bi + 1) * p * s],
                            &mut gb[bo..bo + q * s],
                            p,
                            q,
                            s,
                        );
                    }
                }
            }
            Op::Transpose(a) => {
                let t = transpose_last2(g);
                add_into(grad_buf(grads, nodes, *a), t.data());
            }
            Op::Reshape(a) => {
                add_into(grad_buf(grads, nodes, *a), gd);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if nodes[a.0].requires_grad {
                    add_into(grad_buf(grads, nodes, *a), gd);
                }
                if nodes[b.0].requires_grad {
                    let gb = grad_buf(grads, nodes, *b);
                    let n = gb.len().max(1);
                    for (i, &v) in gd.iter().enumerate() {
                        gb[i % n] += sign * v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let n = bv.len().max(1);
                if nodes[a.0].requires_grad {
                    let ga = grad_buf(grads, nodes, *a);
                    for (i, &v) in gd.iter().enumerate() {
                        ga[i] += v * bv[i % n];
                    }
                }
                if nodes[b.0].requires_grad {
                    let gb = grad_buf(grads, nodes, *b);
                    for (i, &v) in gd.iter().enumerate() {
                        gb[i % n] += v * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = grad_buf(grads, nodes, *a);
                for (x, &v) in ga.iter_mut().zip(gd) {
                    *x += v * *c;
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let w = *node.value.shape().last().unwrap_or(&1);
                let ga = grad_buf(grads, nodes, *a);
                if w > 0 {
                    for ((gr, yr), dst) in gd.chunks(w).zip(y.chunks(w)).zip(ga.chunks_mut(w)) {
                        let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                        for ((d, &g), &y) in dst.iter_mut().zip(gr).zip(yr) {
                            *d += y * (g - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = nodes[gain.0].value.numel();
                let gv = nodes[gain.0].value.data();
                if nodes[gain.0].requires_grad {
                    let gg = grad_buf(grads, nodes, *gain);
                    for (i, &v) in gd.iter().enumerate() {
                        gg[i % d] += v * xhat[i];
                    }
                }
                if nodes[bias.0].requires_grad {
                    let gb = grad_buf(grads, nodes, *bias);
                    for (i, &v) in gd.iter().enumerate() {
                        gb[i % d] += v;
                    }
                }
                if nodes[x.0].requires_grad {
                    let gx = grad_buf(grads, nodes, *x);
                    let dt = T::of(d as f64);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let range = r * d..(r + 1) * d;
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in range.clone() {
                            let dh = gd[j] * gv[j - r * d];
                            m1 += dh;
                            m2 += dh * xhat[j];
                        }
                        m1 /= dt;
                        m2 /= dt;
                        for j in range {
                            let dh = gd[j] * gv[j - r * d];
                            gx[j] += rs * (dh - m1 - xhat[j] * m2);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let xv = nodes[a.0].value.data();
                let ga = grad_buf(grads, nodes, *a);
                for i in 0..gd.len() {
                    ga[i] += gd[i] * gelu_grad(xv[i]);
                }
            }
            Op::Relu(a) => {
                let xv = nodes[a.0].value.data();
                let ga = grad_buf(grads, nodes, *a);
                for i in 0..gd.len() {
                    if xv[i] > T::zero() {
                        ga[i] += gd[i];
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let ga = grad_buf(grads, nodes, *a);
                for i in 0..gd.len() {
                    ga[i] += gd[i] * y[i] * (T::one() - y[i]);
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let ga = grad_buf(grads, nodes, *a);
                for i in 0..gd.len() {
                    ga[i] += gd[i] * (T::one() - y[i] * y[i]);
                }
            }
            Op::Map(a, deriv) => {
                let xv = nodes[a.0].value.data();
                let y = node.value.data();
                let ga = grad_buf(grads, nodes, *a);
                for i in 0..gd.len() {
                    ga[i] += gd[i] * deriv(xv[i], y[i]);
                }
            }
            Op::Concat(parts, axis) => {
                let s = node.value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.shape()[*axis];
                    if nodes[p.0].requires_grad {
                        let gp = grad_buf(grads, nodes, p);
                        let chunk = len * inner;
                        for o in 0..outer {
                            let src = o * s[*axis] * inner + offset * inner;
                            add_into(&mut gp[o * chunk..(o + 1) * chunk], &gd[src..src + chunk]);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = nodes[x.0].value.shape();
                let len = node.value.shape()[*axis];
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let gx = grad_buf(grads, nodes, *x);
                for o in 0..outer {
                    let dst = o * xs[*axis] * inner + start * inner;
                    let src = o * len * inner;
                    add_into(&mut gx[dst..dst + len * inner], &gd[src..src + len * inner]);
                }
            }
            Op::TokenMean(x) => {
                let xs = nodes[x.0].value.shape();
                let (p, d) = (xs[xs.len() - 2], xs[xs.len() - 1]);
                let inv = T::one() / T::of(p as f64);
                let gx = grad_buf(grads, nodes, *x);
                for (i, v) in gx.iter_mut().enumerate() {
                    let o = i / (p * d);
                    *v += gd[o * d + i % d] * inv;
                }
            }
            Op::GroupMean(x, groups) => {
                let xs = nodes[x.0].value.shape();
                let (p, d) = (xs[xs.len() - 2], xs[xs.len() - 1]);
                let k = groups.len();
                let outer = nodes[x.0].value.numel() / (p * d).max(1);
                let gx = grad_buf(grads, nodes, *x);
                for o in 0..outer {
                    for (gi, &(start, len)) in groups.iter().enumerate() {
                        let inv = T::one() / T::of(len as f64);
                        let src = &gd[(o * k + gi) * d..(o * k + gi + 1) * d];
                        for t in start..start + len {
                            let dst = &mut gx[(o * p + t) * d..(o * p + t + 1) * d];
                            for (a, &b) in dst.iter_mut().zip(src) {
                                *a += b * inv;
                            }
                        }
                    }
                }
            }
            Op::Embedding(table, ids) => {
                let d = nodes[table.0].value.shape()[1];
                let gt = grad_buf(grads, nodes, *table);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &gd[r * d..(r + 1) * d]);
                }
            }
            Op::Sum(x) => {
                let gx = grad_buf(grads, nodes, *x);
                for v in gx.iter_mut() {
                    *v += gd[0];
                }
            }
            Op::SoftmaxCe {
                logits,
                targets,
                smoothing,
                probs,
            } => {
                let c = nodes[logits.0].value.shape()[1];
                let n = T::of(targets.iter().flatten().count() as f64);
                let ct = T::of(c as f64);
                let gl = grad_buf(grads, nodes, *logits);
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..c {
                        let q = *smoothing / ct
                            + if j == t { T::one() - *smoothing } else { T::zero() };
                        gl[r * c + j] += gd[0] * (probs[r * c + j] - q) / n;
                    }
                }
            }
            Op::SigmoidCe {
                logits,
                targets,
                smoothing,
            } => {
                let c = nodes[logits.0].value.shape()[1];
                let x = nodes[logits.0].value.data();
                let n = T::of(targets.iter().flatten().count() as f64);
                let half = T::of(0.5);
                let gl = grad_buf(grads, nodes, *logits);
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..c {
                        let y = *smoothing * half
                            + if j == t { T::one() - *smoothing } else { T::zero() };
                        gl[r * c + j] += gd[0] * (sigmoid_scalar(x[r * c + j]) - y) / n;
                    }
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `v`, or `None` if nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds every parameter gradient into the matching store entry.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (name, &v) in &self.params {
            if let Some(g) = self.wrt(v) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}

fn grad_buf<'g, T: Real>(
    grads: &'g mut [Option<Tensor<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> &'g mut [T] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()))
        .data_mut()
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn is_suffix(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn mm_dims(a: &[usize], b: &[usize]) -> Result<(MmDims, Vec<usize>)> {
    let err = || Error::shape("matmul", a, b);
    match (a.len(), b.len()) {
        (2, 2) => {
            if a[1] != b[0] {
                return Err(err());
            }
            let dims = MmDims {
                batch: 1,
                a_batched: false,
                b_batched: false,
                p: a[0],
                q: a[1],
                s: b[1],
            };
            Ok((dims, vec![a[0], b[1]]))
        }
        (3, 2) => {
            if a[2] != b[0] {
                return Err(err());
            }
            // Shared right operand: one tall product over batch*rows.
            let dims = MmDims {
                batch: 1,
                a_batched: false,
                b_batched: false,
                p: a[0] * a[1],
                q: a[2],
                s: b[1],
            };
            Ok((dims, vec![a[0], a[1], b[1]]))
        }
        (2, 3) => {
            if a[1] != b[1] {
                return Err(err());
            }
            let dims = MmDims {
                batch: b[0],
                a_batched: false,
                b_batched: true,
                p: a[0],
                q: a[1],
                s: b[2],
            };
            Ok((dims, vec![b[0], a[0], b[2]]))
        }
        (3, 3) => {
            if a[0] != b[0] || a[2] != b[1] {
                return Err(err());
            }
            let dims = MmDims {
                batch: a[0],
                a_batched: true,
                b_batched: true,
                p: a[1],
                q: a[2],
                s: b[2],
            };
            Ok((dims, vec![a[0], a[1], b[2]]))
        }
        _ => Err(err()),
    }
}

/// `c[p×s] += a[p×q] · b[q×s]`
fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], p: usize, q: usize, s: usize) {
    for i in 0..p {
        let crow = &mut c[i * s..(i + 1) * s];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == T::zero() {
                continue;
            }
            let brow = &b[k * s..(k + 1) * s];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c[p×q] += g[p×s] · b[q×s]ᵀ`
fn gemm_nt<T: Real>(g: &[T], b: &[T], c: &mut [T], p: usize, q: usize, s: usize) {
    for i in 0..p {
        let grow = &g[i * s..(i + 1) * s];
        for k in 0..q {
            let brow = &b[k * s..(k + 1) * s];
            let mut acc = T::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * q + k] += acc;
        }
    }
}

/// `c[q×s] += a[p×q]ᵀ · g[p×s]`
fn gemm_tn<T: Real>(a: &[T], g: &[T], c: &mut [T], p: usize, q: usize, s: usize) {
    for i in 0..p {
        let grow = &g[i * s..(i + 1) * s];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == T::zero() {
                continue;
            }
            let crow = &mut c[k * s..(k + 1) * s];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += aik * gv;
            }
        }
    }
}

fn transpose_last2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let r = s.len();
    let (p, q) = (s[r - 2], s[r - 1]);
    let outer = x.numel() / (p * q).max(1);
    let src = x.data();
    let mut data = vec![T::zero(); x.numel()];
    for o in 0..outer {
        let base = o * p * q;
        for i in 0..p {
            for j in 0..q {
                data[base + j * p + i] = src[base + i * q + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(&shape, data).expect("transpose preserves size")
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let u = T::of(SQRT_2_OVER_PI) * (x + T::of(GELU_CUBIC) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::of(SQRT_2_OVER_PI);
    let c = T::of(GELU_CUBIC);
    let u = k * (x + c * x * x * x);
    let th = u.tanh();
    let du = k * (T::one() + T::of(3.0) * c * x * x);
    T::of(0.5) * (T::one() + th) + T::of(0.5) * x * (T::one() - th * th) * du
}

pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
