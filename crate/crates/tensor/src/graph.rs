//! Tape-based reverse-mode autodiff.
//!
//! Every operation appends a node to the graph; nodes are therefore stored in
//! topological order and `backward` is a single reverse sweep. Parameters are
//! borrowed from a [`ParamStore`] for the lifetime of the graph, so the store
//! cannot be mutated while a graph referencing it is alive.

use std::cell::Cell;
use std::collections::HashMap;

use rand::RngCore;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'p, T> {
    Owned(Tensor<T>),
    Param(&'p Tensor<T>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Origin {
    Constant,
    Input,
    Param(ParamId),
    Computed,
}

enum Op<T> {
    Leaf,
    MatMul { trans_b: bool },
    Add,
    AddBias,
    Sub,
    Mul,
    Scale(T),
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    Sigmoid,
    Tanh,
    Relu,
    Softmax,
    LogSoftmax,
    Dropout { mask: Vec<T> },
    LayerNorm { xhat: Vec<T>, rstd: Vec<T> },
    Transpose,
    Sum,
    Mean,
}

struct Node<'p, T> {
    value: Value<'p, T>,
    op: Op<T>,
    inputs: Vec<Var>,
    requires_grad: bool,
    origin: Origin,
    /// Set once the value has been scanned for NaN; values never change.
    nan_free: Cell<bool>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T = f32> {
    params: Vec<Option<Tensor<T>>>,
    inputs: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.index()).and_then(Option::as_ref)
    }

    pub fn input(&self, v: Var) -> Option<&Tensor<T>> {
        self.inputs.get(&v)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter())
            .map(|v| {
                let v = v.to_f64_lossy();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }
}

pub struct Graph<'p, T: Scalar = f32> {
    params: Option<&'p ParamStore<T>>,
    param_nodes: HashMap<ParamId, Var>,
    nodes: Vec<Node<'p, T>>,
    frozen: bool,
}

impl<'p, T: Scalar> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// A graph without parameters; use [`Graph::input`] for differentiable leaves.
    pub fn new() -> Self {
        Graph {
            params: None,
            param_nodes: HashMap::new(),
            nodes: Vec::new(),
            frozen: false,
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Graph {
            params: Some(params),
            param_nodes: HashMap::new(),
            nodes: Vec::new(),
            frozen: false,
        }
    }

    /// Inference graph: parameters behave as constants, so no backward
    /// caches are kept.
    pub fn frozen(params: &'p ParamStore<T>) -> Self {
        Graph {
            frozen: true,
            ..Self::with_params(params)
        }
    }

    /// Smallest |x| over every value fed to a ReLU, or `None` without ReLUs.
    /// Finite differences with a step below this margin never cross a kink.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Relu))
            .flat_map(|n| self.value(n.inputs[0]).data().iter())
            .map(|v| v.to_f64_lossy().abs())
            .reduce(f64::min)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(t) => t,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn leaf(&mut self, value: Value<'p, T>, origin: Origin) -> Var {
        let requires_grad = !matches!(origin, Origin::Constant);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad,
            origin,
            nan_free: Cell::new(false),
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(Value::Owned(t), Origin::Constant)
    }

    /// Leaf whose gradient is reported by [`Gradients::input`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(Value::Owned(t), Origin::Input)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_nodes.get(&id) {
            return Ok(v);
        }
        let store = self
            .params
            .ok_or_else(|| TensorError::invalid("param", "graph has no parameter store"))?;
        if id.index() >= store.len() {
            return Err(TensorError::UnknownParam(format!("#{}", id.index())));
        }
        let v = self.leaf(Value::Param(store.get(id)), Origin::Param(id));
        if self.frozen {
            self.nodes[v.0].requires_grad = false;
        }
        self.param_nodes.insert(id, v);
        Ok(v)
    }

    fn check_nan(&self, op: &'static str, inputs: &[Var]) -> Result<()> {
        for (i, &v) in inputs.iter().enumerate() {
            let node = &self.nodes[v.0];
            if node.nan_free.get() {
                continue;
            }
            if self.value(v).has_nan() {
                return Err(TensorError::NaN { op, input: i });
            }
            node.nan_free.set(true);
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: Vec<Var>) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        // Backward caches are only needed on differentiable paths.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            inputs,
            requires_grad,
            origin: Origin::Computed,
            nan_free: Cell::new(false),
        });
        Var(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(TensorError::invalid(
                op,
                format!("expected a matrix, got shape {s:?}"),
            )),
        }
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m,k] · b[n,k]ᵀ`, without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op = if trans_b { "matmul_t" } else { "matmul" };
        let (m, k) = self.matrix_dims(op, a)?;
        let (br, bc) = self.matrix_dims(op, b)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(self.mismatch(op, a, b));
        }
        self.check_nan(op, &[a, b])?;
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            T::zero(),
            &mut out,
        );
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { trans_b },
            vec![a, b],
        ))
    }

    fn zip_same(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op_name, a, b));
        }
        self.check_nan(op_name, &[a, b])?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let shape = x.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), op, vec![a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, Op::Add, |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, Op::Sub, |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, Op::Mul, |p, q| p * q)
    }

    /// Adds a 1-D `bias` to every row of `x` (broadcast over leading axes).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] || self.value(x).rank() == 0 {
            return Err(self.mismatch("add_bias", x, bias));
        }
        self.check_nan("add_bias", &[x, bias])?;
        let b = self.value(bias).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(b).map(|(&p, &q)| p + q))
            .collect();
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddBias, vec![x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.map("scale", x, Op::Scale(c), |v| v * c)
    }

    fn map(&mut self, name: &'static str, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        self.check_nan(name, &[x])?;
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), op, vec![x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, Op::Sigmoid, |v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, Op::Tanh, |v| v.tanh())
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, Op::Relu, |v| v.max(T::zero()))
    }

    fn row_wise(
        &mut self,
        name: &'static str,
        x: Var,
        op: Op<T>,
        f: impl Fn(&[T], &mut [T]),
    ) -> Result<Var> {
        if self.value(x).rank() == 0 {
            return Err(TensorError::invalid(name, "needs at least one axis"));
        }
        self.check_nan(name, &[x])?;
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = vec![T::zero(); xv.numel()];
        for (src, dst) in xv.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            f(src, dst);
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), op, vec![x]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.row_wise("softmax", x, Op::Softmax, softmax_row)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.row_wise("log_softmax", x, Op::LogSoftmax, |src, dst| {
            let max = src.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = src.iter().map(|&v| (v - max).exp()).fold(T::zero(), |a, b| a + b).ln() + max;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s - lse;
            }
        })
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// scales survivors by `1 / (1 - rate)`. The mask is drawn from `rng`.
    pub fn dropout<R: RngCore + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::invalid(
                "dropout",
                format!("rate must lie in [0, 1), got {rate}"),
            ));
        }
        self.check_nan("dropout", &[x])?;
        let n = self.value(x).numel();
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let threshold = (rate * 4_294_967_296.0) as u64;
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if u64::from(rng.next_u32()) < threshold {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Dropout { mask }, vec![x]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(x).rank() == 0 {
            return Err(TensorError::invalid("layer_norm", "needs at least one axis"));
        }
        if self.shape(gamma) != [d] {
            return Err(self.mismatch("layer_norm", x, gamma));
        }
        if self.shape(beta) != [d] {
            return Err(self.mismatch("layer_norm", x, beta));
        }
        self.check_nan("layer_norm", &[x, gamma, beta])?;
        let eps = T::from_f64_lossy(eps);
        let dn = T::from_usize(d).expect("dimension fits in float");
        let (xv, g, b) = (self.value(x), self.value(gamma).data(), self.value(beta).data());
        let rows = xv.numel() / d;
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let src = &xv.data()[r * d..(r + 1) * d];
            let mean = src.iter().fold(T::zero(), |a, &v| a + v) / dn;
            let var = src.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (src[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { xhat, rstd },
            vec![x, gamma, beta],
        ))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::invalid(
                "concat",
                format!("axis {axis} out of range for shape {base:?}"),
            ));
        }
        for &p in &parts[1..] {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(self.mismatch("concat", first, p));
            }
        }
        self.check_nan("concat", parts)?;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total_axis: usize = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total_axis;
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat { axis },
            parts.to_vec(),
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of shape {shape:?}", start + len),
            ));
        }
        self.check_nan("slice", &[x])?;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Slice { axis, start },
            vec![x],
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", x)?;
        self.check_nan("transpose", &[x])?;
        let data = transpose_data(r, c, self.value(x).data());
        Ok(self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose, vec![x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_nan("sum", &[x])?;
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        Ok(self.push(Tensor::scalar(s), Op::Sum, vec![x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check_nan("mean", &[x])?;
        let xv = self.value(x);
        let n = T::from_usize(xv.numel()).expect("size fits in float");
        let s = xv.data().iter().fold(T::zero(), |a, &v| a + v) / n;
        Ok(self.push(Tensor::scalar(s), Op::Mean, vec![x]))
    }

    /// Reverse sweep from a scalar `loss`. The graph is left untouched, so
    /// repeated calls give identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let n_params = self.params.map_or(0, ParamStore::len);
        let mut result = Gradients {
            params: vec![None; n_params],
            inputs: HashMap::new(),
        };
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match node.origin {
                Origin::Param(id) => {
                    let shape = self.value(Var(idx)).shape().to_vec();
                    result.params[id.index()] = Some(Tensor::from_parts(shape, gy));
                    continue;
                }
                Origin::Input => {
                    let shape = self.value(Var(idx)).shape().to_vec();
                    result.inputs.insert(Var(idx), Tensor::from_parts(shape, gy));
                    continue;
                }
                Origin::Constant => continue,
                Origin::Computed => {}
            }
            if let Op::Slice { axis, start } = node.op {
                // Scatter into the input's accumulator; a dense zero-padded
                // gradient per slice would cost O(input) each time.
                let input = node.inputs[0];
                if self.nodes[input.0].requires_grad {
                    let in_shape = self.shape(input);
                    let outer: usize = in_shape[..axis].iter().product();
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let len = self.shape(Var(idx))[axis] * inner;
                    let acc = grads[input.0].get_or_insert_with(|| vec![T::zero(); self.value(input).numel()]);
                    for o in 0..outer {
                        let dst = (o * in_shape[axis] + start) * inner;
                        acc[dst..dst + len]
                            .iter_mut()
                            .zip(&gy[o * len..(o + 1) * len])
                            .for_each(|(a, &b)| *a = *a + b);
                    }
                }
                continue;
            }
            if let Op::MatMul { trans_b } = node.op {
                self.matmul_backward(idx, trans_b, &gy, &mut grads);
                continue;
            }
            for (slot, g) in self.input_grads(idx, &gy) {
                let input = node.inputs[slot];
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    empty => *empty = Some(g),
                }
            }
        }
        Ok(result)
    }

    /// Accumulates `dA = dY·Bᵀ` and `dB = Aᵀ·dY` straight into the input
    /// gradient buffers.
    fn matmul_backward(&self, idx: usize, trans_b: bool, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let (ia, ib) = (node.inputs[0], node.inputs[1]);
        let (a, b) = (self.value(ia), self.value(ib));
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = self.shape(Var(idx))[1];
        if self.nodes[ia.0].requires_grad {
            let (da, beta) = accumulator(&mut grads[ia.0], m * k);
            gemm(m, n, k, gy, false, b.data(), !trans_b, beta, da);
        }
        if self.nodes[ib.0].requires_grad {
            let (db, beta) = accumulator(&mut grads[ib.0], k * n);
            if trans_b {
                gemm(n, m, k, gy, true, a.data(), false, beta, db);
            } else {
                gemm(k, m, n, a.data(), true, gy, false, beta, db);
            }
        }
    }

    /// Vector-Jacobian products of node `idx` for each input slot that needs one.
    fn input_grads(&self, idx: usize, gy: &[T]) -> Vec<(usize, Vec<T>)> {
        let node = &self.nodes[idx];
        let y = self.value(Var(idx));
        let needs = |slot: usize| self.nodes[node.inputs[slot].0].requires_grad;
        let val = |slot: usize| self.value(node.inputs[slot]);
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { .. } => unreachable!("matmul gradients accumulate in place"),
            Op::Add => {
                out.push((0, gy.to_vec()));
                out.push((1, gy.to_vec()));
            }
            Op::Sub => {
                out.push((0, gy.to_vec()));
                out.push((1, gy.iter().map(|&g| -g).collect()));
            }
            Op::Mul => {
                let (a, b) = (val(0).data(), val(1).data());
                if needs(0) {
                    out.push((0, gy.iter().zip(b).map(|(&g, &v)| g * v).collect()));
                }
                if needs(1) {
                    out.push((1, gy.iter().zip(a).map(|(&g, &v)| g * v).collect()));
                }
            }
            Op::AddBias => {
                out.push((0, gy.to_vec()));
                if needs(1) {
                    let d = y.last_dim();
                    let mut db = vec![T::zero(); d];
                    for row in gy.chunks_exact(d) {
                        db.iter_mut().zip(row).for_each(|(a, &g)| *a = *a + g);
                    }
                    out.push((1, db));
                }
            }
            Op::Scale(c) => out.push((0, gy.iter().map(|&g| g * *c).collect())),
            Op::Concat { axis } => {
                let shape = y.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for (slot, &v) in node.inputs.iter().enumerate() {
                    let chunk = self.shape(v)[*axis] * inner;
                    if needs(slot) {
                        let mut g = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * total + offset;
                            g.extend_from_slice(&gy[base..base + chunk]);
                        }
                        out.push((slot, g));
                    }
                    offset += chunk;
                }
            }
            Op::Slice { .. } => unreachable!("slices are scattered in backward"),
            Op::Sigmoid => out.push((
                0,
                gy.iter()
                    .zip(y.data())
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect(),
            )),
            Op::Tanh => out.push((
                0,
                gy.iter()
                    .zip(y.data())
                    .map(|(&g, &t)| g * (T::one() - t * t))
                    .collect(),
            )),
            Op::Relu => out.push((
                0,
                gy.iter()
                    .zip(y.data())
                    .map(|(&g, &r)| if r > T::zero() { g } else { T::zero() })
                    .collect(),
            )),
            Op::Softmax => {
                let d = y.last_dim();
                let mut g = vec![T::zero(); gy.len()];
                for ((gr, yr), dst) in gy
                    .chunks_exact(d)
                    .zip(y.data().chunks_exact(d))
                    .zip(g.chunks_exact_mut(d))
                {
                    let dot = gr.iter().zip(yr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    for j in 0..d {
                        dst[j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((0, g));
            }
            Op::LogSoftmax => {
                let d = y.last_dim();
                let mut g = vec![T::zero(); gy.len()];
                for ((gr, yr), dst) in gy
                    .chunks_exact(d)
                    .zip(y.data().chunks_exact(d))
                    .zip(g.chunks_exact_mut(d))
                {
                    let total = gr.iter().fold(T::zero(), |a, &p| a + p);
                    for j in 0..d {
                        dst[j] = gr[j] - yr[j].exp() * total;
                    }
                }
                out.push((0, g));
            }
            Op::Dropout { mask } => {
                out.push((0, gy.iter().zip(mask).map(|(&g, &m)| g * m).collect()))
            }
            Op::LayerNorm { xhat, rstd } => {
                let d = y.last_dim();
                let gamma = val(1).data();
                let dn = T::from_usize(d).expect("dimension fits in float");
                if needs(0) {
                    let mut dx = vec![T::zero(); gy.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let row = r * d..(r + 1) * d;
                        let (gr, hr) = (&gy[row.clone()], &xhat[row.clone()]);
                        let mut sum_g = T::zero();
                        let mut sum_gh = T::zero();
                        for j in 0..d {
                            let gh = gr[j] * gamma[j];
                            sum_g = sum_g + gh;
                            sum_gh = sum_gh + gh * hr[j];
                        }
                        let (mg, mgh) = (sum_g / dn, sum_gh / dn);
                        for j in 0..d {
                            dx[r * d + j] = rs * (gr[j] * gamma[j] - mg - hr[j] * mgh);
                        }
                    }
                    out.push((0, dx));
                }
                if needs(1) {
                    let mut dg = vec![T::zero(); d];
                    for (gr, hr) in gy.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] = dg[j] + gr[j] * hr[j];
                        }
                    }
                    out.push((1, dg));
                }
                if needs(2) {
                    let mut db = vec![T::zero(); d];
                    for gr in gy.chunks_exact(d) {
                        db.iter_mut().zip(gr).for_each(|(a, &g)| *a = *a + g);
                    }
                    out.push((2, db));
                }
            }
            Op::Transpose => {
                let (r, c) = (y.shape()[0], y.shape()[1]);
                out.push((0, transpose_data(r, c, gy)));
            }
            Op::Sum => out.push((0, vec![gy[0]; val(0).numel()])),
            Op::Mean => {
                let n = val(0).numel();
                let g = gy[0] / T::from_usize(n).expect("size fits in float");
                out.push((0, vec![g; n]));
            }
        }
        out
    }
}

pub(crate) fn softmax_row<T: Scalar>(src: &[T], dst: &mut [T]) {
    let max = src.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total = total + *d;
    }
    for d in dst.iter_mut() {
        *d = *d / total;
    }
}

fn transpose_data<T: Scalar>(rows: usize, cols: usize, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Gradient buffer for accumulation and the GEMM `beta` that adds into it.
fn accumulator<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> (&mut Vec<T>, T) {
    let beta = if slot.is_some() { T::one() } else { T::zero() };
    (slot.get_or_insert_with(|| vec![T::zero(); len]), beta)
}

/// Softmax of each row of `t` over its last axis, outside any graph.
pub fn softmax_rows<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let d = t.last_dim();
    let mut out = vec![T::zero(); t.numel()];
    for (src, dst) in t.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        softmax_row(src, dst);
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}
