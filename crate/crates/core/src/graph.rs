//! Recorded computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order: every input index is smaller than the node that uses
//! it. [`Graph::backward`] walks the list once in reverse and sums
//! contributions over fan-out.
//!
//! A graph is meant to live for one forward/backward pass and then be
//! dropped.

use crate::error::{Error, Result};
use crate::ops::{self, Axis};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    AddRow(Var, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    L2NormalizeRows(Var),
    Mean(Var, Axis),
    Max(Var, Axis),
    Sum(Var, Axis),
    SumAll(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
}

impl Op {
    pub fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) => vec![*a, *b],
            Transpose(a)
            | Scale(a, _)
            | Exp(a)
            | Log(a)
            | Tanh(a)
            | SoftmaxRows(a)
            | LogSoftmaxRows(a)
            | L2NormalizeRows(a)
            | Mean(a, _)
            | Max(a, _)
            | Sum(a, _)
            | SumAll(a) => vec![*a],
            LayerNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            ConcatCols(vs) | ConcatRows(vs) => vs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn evaluate_ref<'a>(op: &Op, value: &dyn Fn(Var) -> &'a Tensor) -> Result<Tensor> {
    use Op::*;
    match op {
        Leaf => Err(Error::Contract("leaf nodes carry their own value".into())),
        MatMul(a, b) => ops::matmul(value(*a), value(*b)),
        Transpose(a) => ops::transpose(value(*a)),
        Add(a, b) => ops::add(value(*a), value(*b)),
        Sub(a, b) => ops::sub(value(*a), value(*b)),
        Mul(a, b) => ops::mul(value(*a), value(*b)),
        Scale(a, f) => ops::scale(value(*a), *f),
        Exp(a) => ops::exp(value(*a)),
        Log(a) => ops::log(value(*a)),
        Tanh(a) => ops::tanh(value(*a)),
        AddRow(a, b) => ops::add_row(value(*a), value(*b)),
        SoftmaxRows(a) => ops::softmax_rows(value(*a)),
        LogSoftmaxRows(a) => ops::log_softmax_rows(value(*a)),
        LayerNorm {
            input,
            gamma,
            beta,
            eps,
        } => ops::layer_norm(value(*input), value(*gamma), value(*beta), *eps),
        L2NormalizeRows(a) => ops::l2_normalize_rows(value(*a)),
        Mean(a, axis) => ops::mean_axis(value(*a), *axis),
        Max(a, axis) => ops::max_axis(value(*a), *axis),
        Sum(a, axis) => ops::sum_axis(value(*a), *axis),
        SumAll(a) => ops::sum_all(value(*a)),
        ConcatCols(vs) => ops::concat_cols(&vs.iter().map(|v| value(*v)).collect::<Vec<_>>()),
        ConcatRows(vs) => ops::concat_rows(&vs.iter().map(|v| value(*v)).collect::<Vec<_>>()),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Every node handle in creation order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let value = match value.rank() {
            1 => {
                let n = value.numel();
                value.into_reshaped(vec![1, n]).expect("same element count")
            }
            2 => value,
            r => panic!("graph leaves must have rank 1 or 2, got rank {r}"),
        };
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf. Rank-1 tensors are stored as a single row.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Cuts the gradient path: a constant leaf holding `var`'s current value.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.value(var).clone();
        self.constant(value)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn op(&self, var: Var) -> &Op {
        &self.nodes[var.0].op
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let inputs = op.inputs();
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::Contract(format!("unknown node {}", bad.0)));
        }
        let nodes = &self.nodes;
        let value = evaluate_ref(&op, &|v: Var| &nodes[v.0].value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.push(Op::Scale(a, factor))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Tanh(a))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddRow(x, bias))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LogSoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.push(Op::LayerNorm {
            input,
            gamma,
            beta,
            eps,
        })
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::L2NormalizeRows(a))
    }

    pub fn mean_axis(&mut self, a: Var, axis: Axis) -> Result<Var> {
        self.push(Op::Mean(a, axis))
    }

    pub fn max_axis(&mut self, a: Var, axis: Axis) -> Result<Var> {
        self.push(Op::Max(a, axis))
    }

    pub fn sum_axis(&mut self, a: Var, axis: Axis) -> Result<Var> {
        self.push(Op::Sum(a, axis))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumAll(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatRows(parts.to_vec()))
    }

    /// Re-runs every non-leaf node from the recorded leaves and returns the
    /// recomputed values in node order.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => {
                    let vals = &values;
                    evaluate_ref(op, &|v: Var| &vals[v.0])?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse-mode pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            for (input, g) in self.input_grads(idx, &upstream)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                accumulate(&mut grads[input.0], g)?;
            }
        }

        grads.resize(self.nodes.len(), None);
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            let trainable_leaf = matches!(node.op, Op::Leaf) && node.requires_grad;
            if !trainable_leaf {
                *slot = None;
            } else if slot.is_none() {
                *slot = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `g`.
    fn input_grads(&self, idx: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        use Op::*;
        let node = &self.nodes[idx];
        let y = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        Ok(match &node.op {
            Leaf => vec![],
            MatMul(a, b) => {
                let da = ops::matmul(g, &val(b).transpose())?;
                let db = ops::matmul(&val(a).transpose(), g)?;
                vec![(*a, da), (*b, db)]
            }
            Transpose(a) => vec![(*a, g.transpose())],
            Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Mul(a, b) => vec![(*a, ops::mul(g, val(b))?), (*b, ops::mul(g, val(a))?)],
            Scale(a, f) => vec![(*a, ops::scale(g, *f)?)],
            Exp(a) => vec![(*a, ops::mul(g, y)?)],
            Log(a) => {
                let x = val(a);
                let data = g.data().iter().zip(x.data()).map(|(gi, xi)| gi / xi).collect();
                vec![(*a, Tensor::new(x.shape().to_vec(), data)?)]
            }
            Tanh(a) => {
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gi, yi)| gi * (1.0 - yi * yi))
                    .collect();
                vec![(*a, Tensor::new(y.shape().to_vec(), data)?)]
            }
            AddRow(x, b) => vec![(*x, g.clone()), (*b, ops::sum_axis(g, Axis::Rows)?)],
            SoftmaxRows(a) => {
                let (m, n) = (y.rows(), y.cols());
                let mut out = Vec::with_capacity(m * n);
                for i in 0..m {
                    let (gr, yr) = (g.row_slice(i), y.row_slice(i));
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    out.extend(gr.iter().zip(yr).map(|(gi, yi)| yi * (gi - dot)));
                }
                vec![(*a, Tensor::matrix(m, n, out))]
            }
            LogSoftmaxRows(a) => {
                let (m, n) = (y.rows(), y.cols());
                let mut out = Vec::with_capacity(m * n);
                for i in 0..m {
                    let (gr, yr) = (g.row_slice(i), y.row_slice(i));
                    let total: f64 = gr.iter().sum();
                    out.extend(gr.iter().zip(yr).map(|(gi, yi)| gi - yi.exp() * total));
                }
                vec![(*a, Tensor::matrix(m, n, out))]
            }
            LayerNorm {
                input,
                gamma,
                beta,
                eps,
            } => {
                let x = val(input);
                let gam = val(gamma).data();
                let (m, n) = (x.rows(), x.cols());
                let mut dx = Vec::with_capacity(m * n);
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for (i, (mean, rstd)) in ops::row_moments(x, *eps).into_iter().enumerate() {
                    let xr = x.row_slice(i);
                    let gr = g.row_slice(i);
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * rstd).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(gam).map(|(gi, ga)| gi * ga).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                        dx.push(rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx));
                    }
                }
                vec![
                    (*input, Tensor::matrix(m, n, dx)),
                    (*gamma, Tensor::matrix(1, n, dgamma)),
                    (*beta, Tensor::matrix(1, n, dbeta)),
                ]
            }
            L2NormalizeRows(a) => {
                let x = val(a);
                let (m, n) = (x.rows(), x.cols());
                let mut out = Vec::with_capacity(m * n);
                for i in 0..m {
                    let norm = x.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let (gr, yr) = (g.row_slice(i), y.row_slice(i));
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    out.extend(gr.iter().zip(yr).map(|(gi, yi)| (gi - yi * dot) / norm));
                }
                vec![(*a, Tensor::matrix(m, n, out))]
            }
            Mean(a, axis) => {
                let x = val(a);
                let count = match axis {
                    Axis::Rows => x.rows(),
                    Axis::Cols => x.cols(),
                } as f64;
                vec![(*a, broadcast_back(g, x, *axis, |v| v / count))]
            }
            Sum(a, axis) => {
                let x = val(a);
                vec![(*a, broadcast_back(g, x, *axis, |v| v))]
            }
            SumAll(a) => {
                let x = val(a);
                vec![(*a, Tensor::full(x.shape(), g.data()[0]))]
            }
            Max(a, axis) => {
                let x = val(a);
                let (_, n) = (x.rows(), x.cols());
                let mut out = Tensor::zeros(x.shape());
                let d = out.data_mut();
                for (slot, &arg) in ops::argmax_axis(x, *axis).iter().enumerate() {
                    match axis {
                        Axis::Rows => d[arg * n + slot] += g.data()[slot],
                        Axis::Cols => d[slot * n + arg] += g.data()[slot],
                    }
                }
                vec![(*a, out)]
            }
            ConcatCols(vs) => {
                let m = g.rows();
                let mut offset = 0;
                let mut res = Vec::with_capacity(vs.len());
                for v in vs {
                    let w = val(v).cols();
                    let mut part = Vec::with_capacity(m * w);
                    for i in 0..m {
                        part.extend_from_slice(&g.row_slice(i)[offset..offset + w]);
                    }
                    res.push((*v, Tensor::matrix(m, w, part)));
                    offset += w;
                }
                res
            }
            ConcatRows(vs) => {
                let mut start = 0;
                let mut res = Vec::with_capacity(vs.len());
                for v in vs {
                    let r = val(v).rows();
                    res.push((*v, g.slice_rows(start, r)));
                    start += r;
                }
                res
            }
        })
    }
}

fn broadcast_back(g: &Tensor, x: &Tensor, axis: Axis, f: impl Fn(f64) -> f64) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let v = match axis {
                Axis::Rows => g.data()[j],
                Axis::Cols => g.data()[i],
            };
            out.push(f(v));
        }
    }
    Tensor::matrix(m, n, out)
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            if acc.numel() != g.numel() {
                return Err(Error::Shape {
                    op: "backward",
                    left: acc.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    Ok(())
}
