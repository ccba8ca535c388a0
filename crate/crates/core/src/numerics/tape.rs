//! Reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Tape`] records each primitive as it is evaluated. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! returns gradients for every node and every parameter that was read.
//! One tape belongs to one thread; parameters are borrowed read-only.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{softmax_slice, Scalar, Tensor};
use crate::error::{HatError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    MeanRows(NodeId),
    RepeatRows(NodeId),
    Reshape(NodeId),
    Sum(NodeId),
    /// Scalar function of `x` whose local gradient was computed during the forward pass.
    ScalarFn {
        x: NodeId,
        grad: Tensor<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::SoftmaxRows(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::MeanRows(_) => "mean_rows",
            Op::RepeatRows(_) => "repeat_rows",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::ScalarFn { .. } => "scalar_fn",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor<T>>,
}

/// Computation record for one forward pass.
pub struct Tape<'a, T> {
    store: &'a ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, NodeId>,
    first_nonfinite: Option<(usize, &'static str)>,
}

/// Result of a backward pass.
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn node(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Parameter gradients indexed by `ParamId`, `None` where unreachable.
    pub fn into_params(self) -> Vec<Option<Tensor<T>>> {
        self.params
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            first_nonfinite: None,
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.store.value(*p),
            (None, _) => unreachable!("non-parameter node without value"),
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        let id = self.nodes.len();
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some((id, op.name()));
        }
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        NodeId(id)
    }

    /// Fails with the first node whose forward value was NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_nonfinite {
            Some((node, op)) => Err(HatError::NonFinite { node, op }),
            None => Ok(()),
        }
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(Op::MatMulT(a, b), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() || va.cols() != vb.cols() {
            return Err(HatError::dim(
                "add",
                format!("{:?} + {:?}", va.shape(), vb.shape()),
            ));
        }
        let v = va.zip_map(vb, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let cols = va.cols();
        if vb.len() != cols {
            return Err(HatError::dim(
                "add_row",
                format!("{:?} + row {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut v = va.clone();
        for r in 0..v.rows() {
            for (x, &y) in v.row_mut(r).iter_mut().zip(vb.data()) {
                *x = *x + y;
            }
        }
        Ok(self.push(Op::AddRow(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, k: T) -> NodeId {
        let v = self.value(a).scale(k);
        self.push(Op::Scale(a, k), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push(Op::Relu(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut v = va.clone();
        for r in 0..va.rows() {
            let p = softmax_slice(va.row(r));
            v.row_mut(r).copy_from_slice(&p);
        }
        self.push(Op::SoftmaxRows(a), v)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> Result<NodeId> {
        let vx = self.value(x);
        let d = vx.cols();
        let (g, b) = (self.value(gain), self.value(bias));
        if g.len() != d || b.len() != d {
            return Err(HatError::dim(
                "layer_norm",
                format!("width {d}, gain {:?}, bias {:?}", g.shape(), b.shape()),
            ));
        }
        let dn = T::of(d as f64);
        let mut xhat = vx.clone();
        let mut inv_std = Vec::with_capacity(vx.rows());
        let mut out = vx.clone();
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (c, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g.data()[c] + b.data()[c]);
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            out,
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if start + len > vx.cols() {
            return Err(HatError::dim(
                "slice_cols",
                format!("{start}+{len} > {}", vx.cols()),
            ));
        }
        let rows = vx.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&vx.row(r)[start..start + len]);
        }
        let v = Tensor::matrix(rows, len, data)?;
        Ok(self.push(Op::SliceCols { x, start }, v))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(HatError::dim("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let v = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v))
    }

    /// Column means, as a `1×cols` row.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        if rows == 0 {
            return Err(HatError::dim("mean_rows", "no rows"));
        }
        let mut data = vec![T::zero(); cols];
        for r in 0..rows {
            for (o, &v) in data.iter_mut().zip(vx.row(r)) {
                *o = *o + v;
            }
        }
        let n = T::of(rows as f64);
        data.iter_mut().for_each(|v| *v = *v / n);
        let v = Tensor::matrix(1, cols, data)?;
        Ok(self.push(Op::MeanRows(x), v))
    }

    /// Stacks a single row `n` times.
    pub fn repeat_rows(&mut self, x: NodeId, n: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.rows() != 1 {
            return Err(HatError::dim("repeat_rows", format!("{:?}", vx.shape())));
        }
        let v = Tensor::matrix(n, vx.cols(), vx.data().repeat(n))?;
        Ok(self.push(Op::RepeatRows(x), v))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(Op::Reshape(x), v))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), v)
    }

    /// Records `value = f(x)` where `grad = ∂f/∂x` is supplied by the caller.
    pub fn scalar_fn(&mut self, x: NodeId, value: T, grad: Tensor<T>) -> Result<NodeId> {
        if grad.len() != self.value(x).len() {
            return Err(HatError::dim("scalar_fn", "gradient shape differs from input"));
        }
        Ok(self.push(Op::ScalarFn { x, grad }, Tensor::scalar(value)))
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(T, NodeId)]) -> Result<NodeId> {
        let mut acc: Option<NodeId> = None;
        for &(w, n) in terms {
            let scaled = self.scale(n, w);
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled)?,
            });
        }
        acc.ok_or_else(|| HatError::dim("weighted_sum", "no terms"))
    }

    /// Reverse pass from a `1×1` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(HatError::dim("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(HatError::NonFinite {
                    node: i,
                    op: self.nodes[i].op.name(),
                });
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let mut params: Vec<Option<Tensor<T>>> = (0..self.store.len()).map(|_| None).collect();
        for (&pid, &nid) in &self.param_nodes {
            params[pid.0] = grads[nid.0].clone();
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn propagate(
        &self,
        i: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let mut acc = |id: NodeId, delta: Tensor<T>| match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &self.nodes[i].op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_t(self.value(*b))?);
                acc(*b, self.value(*a).t_matmul(g)?);
            }
            Op::MatMulT(a, b) => {
                acc(*a, g.matmul(self.value(*b))?);
                acc(*b, g.t_matmul(self.value(*a))?);
            }
            Op::Add(a, b) => {
                acc(*a, reshape_like(g, self.value(*a)));
                acc(*b, reshape_like(g, self.value(*b)));
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                let vb = self.value(*b);
                let mut gb = vec![T::zero(); vb.len()];
                for r in 0..g.rows() {
                    for (o, &v) in gb.iter_mut().zip(g.row(r)) {
                        *o = *o + v;
                    }
                }
                acc(*b, Tensor::new(vb.shape().to_vec(), gb)?);
            }
            Op::Scale(a, k) => acc(*a, g.scale(*k)),
            Op::Relu(a) => {
                let va = self.value(*a);
                acc(*a, g.zip_map(va, |gv, x| if x > T::zero() { gv } else { T::zero() }));
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.as_ref().expect("value");
                acc(*a, g.zip_map(y, |gv, yv| gv * yv * (T::one() - yv)));
            }
            Op::SoftmaxRows(a) => {
                let y = self.nodes[i].value.as_ref().expect("value");
                let mut gx = g.clone();
                for r in 0..y.rows() {
                    let dot: T = g.row(r).iter().zip(y.row(r)).map(|(&a, &b)| a * b).sum();
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = y.get(r, c) * (g.get(r, c) - dot);
                    }
                }
                acc(*a, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let d = xhat.cols();
                let dn = T::of(d as f64);
                let mut ggain = vec![T::zero(); d];
                let mut gbias = vec![T::zero(); d];
                let mut gx = Tensor::zeros(&[xhat.rows(), d]);
                for r in 0..xhat.rows() {
                    let gr = g.row(r);
                    let hr = xhat.row(r);
                    let gh: Vec<T> = gr.iter().zip(gv.data()).map(|(&a, &b)| a * b).collect();
                    let sum_gh: T = gh.iter().copied().sum();
                    let sum_ghh: T = gh.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                    for c in 0..d {
                        ggain[c] = ggain[c] + gr[c] * hr[c];
                        gbias[c] = gbias[c] + gr[c];
                        let v = inv_std[r] / dn * (dn * gh[c] - sum_gh - hr[c] * sum_ghh);
                        gx.set(r, c, v);
                    }
                }
                acc(*x, reshape_like(&gx, self.value(*x)));
                acc(*gain, Tensor::new(gv.shape().to_vec(), ggain)?);
                acc(*bias, Tensor::new(self.value(*bias).shape().to_vec(), gbias)?);
            }
            Op::SliceCols { x, start } => {
                let vx = self.value(*x);
                let mut gx = Tensor::zeros(&[vx.rows(), vx.cols()]);
                let len = g.cols();
                for r in 0..g.rows() {
                    gx.row_mut(r)[*start..start + len].copy_from_slice(g.row(r));
                }
                acc(*x, reshape_like(&gx, vx));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let w = vp.cols();
                    let mut gp = Tensor::zeros(&[vp.rows(), w]);
                    for r in 0..g.rows() {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    offset += w;
                    acc(p, reshape_like(&gp, vp));
                }
            }
            Op::MeanRows(x) => {
                let vx = self.value(*x);
                let n = T::of(vx.rows() as f64);
                let row: Vec<T> = g.data().iter().map(|&v| v / n).collect();
                let gx = Tensor::new(vx.shape().to_vec(), row.repeat(vx.rows()))?;
                acc(*x, gx);
            }
            Op::RepeatRows(x) => {
                let vx = self.value(*x);
                let mut gx = vec![T::zero(); vx.len()];
                for r in 0..g.rows() {
                    for (o, &v) in gx.iter_mut().zip(g.row(r)) {
                        *o = *o + v;
                    }
                }
                acc(*x, Tensor::new(vx.shape().to_vec(), gx)?);
            }
            Op::Reshape(x) => acc(*x, reshape_like(g, self.value(*x))),
            Op::Sum(x) => {
                let vx = self.value(*x);
                acc(*x, Tensor::full(vx.shape(), g.data()[0]));
            }
            Op::ScalarFn { x, grad } => {
                let k = g.data()[0];
                acc(*x, reshape_like(&grad.scale(k), self.value(*x)));
            }
        }
        Ok(())
    }
}

fn reshape_like<T: Scalar>(g: &Tensor<T>, like: &Tensor<T>) -> Tensor<T> {
    if g.shape() == like.shape() {
        g.clone()
    } else {
        g.clone()
            .reshape(like.shape().to_vec())
            .expect("gradient element count matches")
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
