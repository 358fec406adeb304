use std::collections::HashMap;

use super::tensor::split_axis;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{MuseError, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise functions with closed-form derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Sigmoid,
    Tanh,
    Relu,
    Gelu,
    Softsign,
    Exp,
    Log,
    Sqrt,
    Abs,
    Square,
    Recip,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn softsign(x: f64) -> f64 {
    x / (1.0 + x.abs())
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Gelu => gelu(x),
            Unary::Softsign => softsign(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::Recip => 1.0 / x,
        }
    }

    /// Derivative at input `x` given the forward output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Gelu => {
                let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
            }
            Unary::Softsign => {
                let d = 1.0 + x.abs();
                1.0 / (d * d)
            }
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Recip => -y * y,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Maximum(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    ScaleBy(usize, usize),
    Unary(usize, Unary),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Reduce {
        input: usize,
        kind: Reduce,
        axis: usize,
        argmax: Vec<usize>,
    },
    SumAll(usize),
    Softmax {
        input: usize,
        axis: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Select {
        input: usize,
        axis: usize,
        index: usize,
    },
    Broadcast {
        input: usize,
        axis: usize,
    },
    Reshape(usize),
    Transpose(usize),
    L2Normalize {
        input: usize,
        axis: usize,
    },
    Clamp {
        input: usize,
        lo: f64,
        hi: f64,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation record. Nodes are created in topological order,
/// so backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    backward_visits: usize,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> MuseError {
    MuseError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn check_axis(op: &str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(MuseError::Domain(format!(
            "{op}: axis {axis} out of range for shape {:?}",
            t.shape()
        )));
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// Free leaf whose gradient can be read back with [`Graph::grad`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&i) = self.params.get(&id) {
            return Var(i);
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.requires_grad);
        self.params.insert(id, v.0);
        v
    }

    /// Stop-gradient copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Elementwise maximum; on ties the gradient goes to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, f64::max, Op::Maximum(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * c);
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Scale(a.0, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| x + c);
        let rg = self.rg(&[a.0]);
        self.push(value, Op::AddScalar(a.0), rg)
    }

    /// Multiplies every element of `t` by the rank-0 node `s`.
    pub fn scale_by(&mut self, t: Var, s: Var) -> Result<Var> {
        let sv = &self.nodes[s.0].value;
        if sv.len() != 1 {
            return Err(shape_err("scale_by", &self.nodes[t.0].value, sv));
        }
        let c = sv.item();
        let value = self.nodes[t.0].value.map(|x| x * c);
        let rg = self.rg(&[t.0, s.0]);
        Ok(self.push(value, Op::ScaleBy(t.0, s.0), rg))
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let value = self.nodes[a.0].value.map(|x| f.apply(x));
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Unary(a.0, f), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Neg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::from_parts(vec![m, n], out);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, Op::MatMul(a.0, b.0), rg))
    }

    /// `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] || ta.shape()[2] != tb.shape()[1] {
            return Err(shape_err("batch_matmul", ta, tb));
        }
        let (bs, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                &ta.data()[i * m * k..(i + 1) * m * k],
                &tb.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::from_parts(vec![bs, m, n], out);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, Op::BatchMatMul(a.0, b.0), rg))
    }

    /// Reduces over `axis`, removing it. Max ties route to the lowest index.
    pub fn reduce(&mut self, a: Var, kind: Reduce, axis: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        check_axis("reduce", t, axis)?;
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let x = t.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if kind == Reduce::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| x[(o * len + k) * inner + i];
                let slot = o * inner + i;
                match kind {
                    Reduce::Sum | Reduce::Mean => {
                        let mut s = 0.0;
                        for k in 0..len {
                            s += at(k);
                        }
                        out[slot] = if kind == Reduce::Mean { s / len as f64 } else { s };
                    }
                    Reduce::Max => {
                        let mut best = 0;
                        for k in 1..len {
                            if at(k) > at(best) {
                                best = k;
                            }
                        }
                        argmax[slot] = best;
                        out[slot] = at(best);
                    }
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::from_parts(shape, out);
        let rg = self.rg(&[a.0]);
        Ok(self.push(
            value,
            Op::Reduce {
                input: a.0,
                kind,
                axis,
                argmax,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, Reduce::Sum, axis)
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, Reduce::Mean, axis)
    }

    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, Reduce::Max, axis)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(s), Op::SumAll(a.0), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        check_axis("softmax", t, axis)?;
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (x[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[idx(k)] /= z;
                }
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::Softmax { input: a.0, axis }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| MuseError::Domain("concat of zero tensors".into()))?;
        let base = self.nodes[first.0].value.shape().to_vec();
        check_axis("concat", &self.nodes[first.0].value, axis)?;
        let mut total = 0;
        for (index, p) in parts.iter().enumerate() {
            let s = self.nodes[p.0].value.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(MuseError::ConcatShape {
                    axis,
                    index,
                    shape: s.to_vec(),
                    expected: base.clone(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = &self.nodes[p.0].value;
                let len = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat { inputs: ids, axis },
            rg,
        ))
    }

    /// Picks position `index` along `axis`, dropping that axis.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        check_axis("select", t, axis)?;
        let (outer, len, inner) = split_axis(t.shape(), axis);
        if index >= len {
            return Err(MuseError::Domain(format!(
                "select: index {index} out of range for axis {axis} of {:?}",
                t.shape()
            )));
        }
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * len + index) * inner;
            out.extend_from_slice(&t.data()[start..start + inner]);
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(&[a.0]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Select {
                input: a.0,
                axis,
                index,
            },
            rg,
        ))
    }

    /// Inserts a new axis of extent `len` at `axis`, replicating the input.
    pub fn broadcast(&mut self, a: Var, axis: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if axis > t.rank() || len == 0 {
            return Err(MuseError::Domain(format!(
                "broadcast: cannot insert axis {axis} of length {len} into {:?}",
                t.shape()
            )));
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let inner: usize = t.shape()[axis..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let chunk = &t.data()[o * inner..(o + 1) * inner];
            for _ in 0..len {
                out.extend_from_slice(chunk);
            }
        }
        let mut shape = t.shape().to_vec();
        shape.insert(axis, len);
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Broadcast { input: a.0, axis }, rg))
    }

    /// Broadcasts `a` over extra leading axes until it has shape `target`.
    pub fn expand_leading(&mut self, a: Var, target: &[usize]) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank > target.len() || self.shape(a) != &target[target.len() - rank..] {
            return Err(MuseError::Shape {
                op: "expand_leading",
                lhs: self.shape(a).to_vec(),
                rhs: target.to_vec(),
            });
        }
        let mut v = a;
        for &d in target[..target.len() - rank].iter().rev() {
            v = self.broadcast(v, 0, d)?;
        }
        Ok(v)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.reshape(shape)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::Reshape(a.0), rg))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.rank() < 2 {
            return Err(MuseError::Domain(format!("transpose of rank-{} tensor", t.rank())));
        }
        let r = t.rank();
        let (m, n) = (t.shape()[r - 2], t.shape()[r - 1]);
        let batch = t.len() / (m * n);
        let out = transpose_data(t.data(), batch, m, n);
        let mut shape = t.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Transpose(a.0), rg))
    }

    /// L2 normalisation along `axis`; slices with zero norm map to zero.
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        check_axis("l2_normalize", t, axis)?;
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let norm = (0..len).map(|k| x[idx(k)] * x[idx(k)]).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for k in 0..len {
                        out[idx(k)] = x[idx(k)] / norm;
                    }
                }
            }
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(
            Tensor::from_parts(t.shape().to_vec(), out),
            Op::L2Normalize { input: a.0, axis },
            rg,
        ))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.clamp(lo, hi));
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Clamp { input: a.0, lo, hi }, rg)
    }

    /// Runs reverse-mode accumulation from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(MuseError::Contract("backward already ran on this graph".into()));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(MuseError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        self.backward_visits = 0;
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backward_visits += 1;
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    /// Backward, then moves parameter gradients into `store`.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        store.begin_accumulate()?;
        self.backward(loss)?;
        for (&id, &node) in &self.params {
            if let Some(g) = &self.grads[node] {
                let shape = self.nodes[node].value.shape().to_vec();
                store.set_grad(id, Tensor::from_parts(shape, g.clone()));
            }
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.get(v.0)?.as_ref().map(|g| {
            Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone())
        })
    }

    /// Number of nodes processed by the last backward sweep.
    pub fn backward_visits(&self) -> usize {
        self.backward_visits
    }

    fn acc(&mut self, idx: usize, contrib: Vec<f64>) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut self.grads[idx] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(a, g.to_vec());
                self.acc(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(a, g.to_vec());
                self.acc(b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let da = zip_map(g, self.nodes[b].value.data(), |g, y| g * y);
                let db = zip_map(g, self.nodes[a].value.data(), |g, x| g * x);
                self.acc(a, da);
                self.acc(b, db);
            }
            Op::Maximum(a, b) => {
                let (xa, xb) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                let mut da = vec![0.0; g.len()];
                let mut db = vec![0.0; g.len()];
                for i in 0..g.len() {
                    if xa[i] >= xb[i] {
                        da[i] = g[i];
                    } else {
                        db[i] = g[i];
                    }
                }
                self.acc(a, da);
                self.acc(b, db);
            }
            Op::Scale(a, c) => self.acc(a, g.iter().map(|x| x * c).collect()),
            Op::AddScalar(a) => self.acc(a, g.to_vec()),
            Op::ScaleBy(t, s) => {
                let c = self.nodes[s].value.item();
                let ds: f64 = g.iter().zip(self.nodes[t].value.data()).map(|(g, x)| g * x).sum();
                self.acc(t, g.iter().map(|x| x * c).collect());
                self.acc(s, vec![ds]);
            }
            Op::Unary(a, f) => {
                let x = self.nodes[a].value.data();
                let y = self.nodes[idx].value.data();
                let d = (0..g.len()).map(|i| g[i] * f.derivative(x[i], y[i])).collect();
                self.acc(a, d);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let (da, db) = matmul_grads(ta.data(), tb.data(), g, m, k, n);
                self.acc(a, da);
                self.acc(b, db);
            }
            Op::BatchMatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
                let (bs, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
                let mut da = Vec::with_capacity(bs * m * k);
                let mut db = Vec::with_capacity(bs * k * n);
                for i in 0..bs {
                    let (ga, gb) = matmul_grads(
                        &ta.data()[i * m * k..(i + 1) * m * k],
                        &tb.data()[i * k * n..(i + 1) * k * n],
                        &g[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                    da.extend(ga);
                    db.extend(gb);
                }
                self.acc(a, da);
                self.acc(b, db);
            }
            Op::Reduce {
                input,
                kind,
                axis,
                argmax,
            } => {
                let shape = self.nodes[input].value.shape().to_vec();
                let (outer, len, inner) = split_axis(&shape, axis);
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let gv = g[o * inner + i];
                        match kind {
                            Reduce::Sum => (0..len).for_each(|k| d[(o * len + k) * inner + i] = gv),
                            Reduce::Mean => {
                                (0..len).for_each(|k| d[(o * len + k) * inner + i] = gv / len as f64)
                            }
                            Reduce::Max => d[(o * len + argmax[o * inner + i]) * inner + i] = gv,
                        }
                    }
                }
                self.acc(input, d);
            }
            Op::SumAll(a) => {
                let n = self.nodes[a].value.len();
                self.acc(a, vec![g[0]; n]);
            }
            Op::Softmax { input, axis } => {
                let y = &self.nodes[idx].value;
                let (outer, len, inner) = split_axis(y.shape(), axis);
                let yd = y.data();
                let mut d = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * yd[at(k)]).sum();
                        for k in 0..len {
                            d[at(k)] = yd[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                self.acc(input, d);
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[idx].value.shape().to_vec();
                let (outer, total, inner) = split_axis(&out_shape, axis);
                let mut offset = 0;
                for &p in &inputs {
                    let len = self.nodes[p].value.shape()[axis];
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&g[start..start + len * inner]);
                    }
                    offset += len;
                    self.acc(p, d);
                }
            }
            Op::Select { input, axis, index } => {
                let shape = self.nodes[input].value.shape().to_vec();
                let (outer, len, inner) = split_axis(&shape, axis);
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let start = (o * len + index) * inner;
                    d[start..start + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
                self.acc(input, d);
            }
            Op::Broadcast { input, axis } => {
                let in_shape = self.nodes[input].value.shape().to_vec();
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis..].iter().product();
                let len = self.nodes[idx].value.shape()[axis];
                let mut d = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..len {
                        let src = &g[(o * len + k) * inner..(o * len + k + 1) * inner];
                        for (dst, s) in d[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *dst += s;
                        }
                    }
                }
                self.acc(input, d);
            }
            Op::Reshape(a) => self.acc(a, g.to_vec()),
            Op::Transpose(a) => {
                let s = self.nodes[idx].value.shape();
                let r = s.len();
                let (m, n) = (s[r - 2], s[r - 1]);
                let batch = g.len() / (m * n);
                self.acc(a, transpose_data(g, batch, m, n));
            }
            Op::L2Normalize { input, axis } => {
                let x = &self.nodes[input].value;
                let y = self.nodes[idx].value.data();
                let (outer, len, inner) = split_axis(x.shape(), axis);
                let xd = x.data();
                let mut d = vec![0.0; xd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let norm = (0..len).map(|k| xd[at(k)] * xd[at(k)]).sum::<f64>().sqrt();
                        if norm == 0.0 {
                            continue;
                        }
                        let dot: f64 = (0..len).map(|k| y[at(k)] * g[at(k)]).sum();
                        for k in 0..len {
                            d[at(k)] = (g[at(k)] - y[at(k)] * dot) / norm;
                        }
                    }
                }
                self.acc(input, d);
            }
            Op::Clamp { input, lo, hi } => {
                let x = self.nodes[input].value.data();
                let d = (0..g.len())
                    .map(|i| if x[i] >= lo && x[i] <= hi { g[i] } else { 0.0 })
                    .collect();
                self.acc(input, d);
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// Returns (g * b^T, a^T * g).
fn matmul_grads(a: &[f64], b: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut da = vec![0.0; m * k];
    for i in 0..m {
        for p in 0..k {
            let mut s = 0.0;
            for j in 0..n {
                s += g[i * n + j] * b[p * n + j];
            }
            da[i * k + p] = s;
        }
    }
    let mut db = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                db[p * n + j] += av * g[i * n + j];
            }
        }
    }
    (da, db)
}

fn transpose_data(x: &[f64], batch: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        let base = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = x[base + i * n + j];
            }
        }
    }
    out
}
