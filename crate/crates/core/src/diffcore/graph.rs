use std::collections::HashMap;

use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// Arguments below this are clamped before taking a logarithm.
pub const LN_EPS: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Square(NodeId),
    Softplus(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    ConcatCols(NodeId, NodeId),
    RepeatRows(NodeId, usize),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only reverse-mode tape.
///
/// Each operation evaluates eagerly and records its inputs, so the graph is
/// acyclic by construction. Rebuild a fresh graph for every evaluation.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    names: HashMap<String, NodeId>,
}

/// Gradients of a scalar output, indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    names: HashMap<String, NodeId>,
}

impl Gradients {
    /// Gradient with respect to `id`, or `None` if it does not require one or
    /// is unreachable from the output.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `id`, zeros when unreachable.
    pub fn get_or_zeros(&self, id: NodeId, like: &Tensor) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn named(&self, name: &str) -> Option<&Tensor> {
        self.names.get(name).and_then(|&id| self.get(id))
    }
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

    /// A constant input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    /// A named leaf; its gradient can be looked up with [`Gradients::named`].
    pub fn input(&mut self, name: &str, value: Tensor, requires_grad: bool) -> NodeId {
        let id = self.push_leaf(value, requires_grad);
        self.names.insert(name.to_owned(), id);
        id
    }

    pub fn lookup(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, op: Op, value: Tensor, inputs: &[NodeId]) -> Result<NodeId> {
        if !value.is_all_finite() {
            return Err(Error::non_finite(format!("diffcore op {name}")));
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push("add", Op::Add(a, b), v, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push("sub", Op::Sub(a, b), v, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push("mul", Op::Mul(a, b), v, &[a, b])
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("div", a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x / y);
        self.push("div", Op::Div(a, b), v, &[a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let v = tensor::gemm(va, false, vb, false);
        self.push("matmul", Op::MatMul(a, b), v, &[a, b])
    }

    /// Adds the bias row `b` to every row of matrix `a`.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} for matrix {:?}", vb.shape(), va.shape()),
            ));
        }
        let v = tensor::add_row(va, vb);
        self.push("add_row", Op::AddRow(a, b), v, &[a, b])
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * c);
        self.push("scale", Op::Scale(a, c), v, &[a])
    }

    /// Adds a constant.
    pub fn offset(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + c);
        self.push("offset", Op::Offset(a), v, &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::tanh);
        self.push("tanh", Op::Tanh(a), v, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(tensor::sigmoid);
        self.push("sigmoid", Op::Sigmoid(a), v, &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::exp);
        self.push("exp", Op::Exp(a), v, &[a])
    }

    /// Natural log of `max(x, LN_EPS)`.
    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(LN_EPS).ln());
        self.push("ln", Op::Ln(a), v, &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * x);
        self.push("square", Op::Square(a), v, &[a])
    }

    /// `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(tensor::softplus);
        self.push("softplus", Op::Softplus(a), v, &[a])
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Op::Sum(a), Tensor::from_parts(Vec::new(), vec![s]), &[a])
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = va.data().iter().sum::<f64>() / va.len() as f64;
        self.push("mean", Op::Mean(a), Tensor::from_parts(Vec::new(), vec![s]), &[a])
    }

    /// Horizontal concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.rows() != vb.rows() {
            return Err(Error::shape(
                "concat_cols",
                format!("{:?} | {:?}", va.shape(), vb.shape()),
            ));
        }
        let v = tensor::concat_cols(va, vb);
        self.push("concat_cols", Op::ConcatCols(a, b), v, &[a, b])
    }

    /// Stacks `times` copies of matrix `a` vertically.
    pub fn repeat_rows(&mut self, a: NodeId, times: usize) -> Result<NodeId> {
        if self.value(a).shape().len() != 2 || times == 0 {
            return Err(Error::shape(
                "repeat_rows",
                format!("{:?} x{times}", self.value(a).shape()),
            ));
        }
        let v = tensor::repeat_rows(self.value(a), times);
        self.push("repeat_rows", Op::RepeatRows(a, times), v, &[a])
    }

    /// Reverse pass from a scalar `output`.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        if let Some(i) = grads.iter().flatten().position(|g| !g.is_all_finite()) {
            return Err(Error::non_finite(format!("gradient {i}")));
        }
        Ok(Gradients {
            grads,
            names: self.names.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let y = &node.value;
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, a, g.zip(val(b), |gv, bv| gv * bv));
                self.accumulate(grads, b, g.zip(val(a), |gv, av| gv * av));
            }
            Op::Div(a, b) => {
                self.accumulate(grads, a, g.zip(val(b), |gv, bv| gv / bv));
                // d(a/b)/db = -y/b
                let gb = g.zip(y, |gv, yv| gv * yv).zip(val(b), |t, bv| -t / bv);
                self.accumulate(grads, b, gb);
            }
            Op::MatMul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, a, tensor::gemm(g, false, val(b), true));
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, b, tensor::gemm(val(a), true, g, false));
                }
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, a, g.clone());
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, b, tensor::column_sums(g, val(b)));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, a, g.map(|v| v * c)),
            Op::Offset(a) => self.accumulate(grads, a, g.clone()),
            Op::Tanh(a) => self.accumulate(grads, a, g.zip(y, |gv, yv| gv * (1.0 - yv * yv))),
            Op::Sigmoid(a) => {
                self.accumulate(grads, a, g.zip(y, |gv, yv| gv * yv * (1.0 - yv)))
            }
            Op::Exp(a) => self.accumulate(grads, a, g.zip(y, |gv, yv| gv * yv)),
            Op::Ln(a) => self.accumulate(
                grads,
                a,
                g.zip(val(a), |gv, x| if x > LN_EPS { gv / x } else { 0.0 }),
            ),
            Op::Square(a) => self.accumulate(grads, a, g.zip(val(a), |gv, x| 2.0 * x * gv)),
            Op::Softplus(a) => {
                self.accumulate(grads, a, g.zip(val(a), |gv, x| gv * tensor::sigmoid(x)))
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                self.accumulate(grads, a, Tensor::full(val(a).shape(), s));
            }
            Op::Mean(a) => {
                let va = val(a);
                let s = g.data()[0] / va.len() as f64;
                self.accumulate(grads, a, Tensor::full(va.shape(), s));
            }
            Op::ConcatCols(a, b) => {
                let (ga, gb) = tensor::split_cols(g, val(a).cols());
                self.accumulate(grads, a, ga);
                self.accumulate(grads, b, gb);
            }
            Op::RepeatRows(a, times) => {
                self.accumulate(grads, a, tensor::fold_rows(g, val(a), times));
            }
        }
    }
}
