use super::array::Array;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for operations defined outside this module.
pub trait CustomBackward {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (`None` when the input receives none).
    fn backward(&self, inputs: &[&Array], output: &Array, grad: &Array)
        -> Result<Vec<Option<Array>>>;
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Abs(Var),
    Powf(Var, f64),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Array, rstd: Vec<f64> },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Clamp { x: Var, lo: Vec<f64>, hi: Vec<f64> },
    Custom { inputs: Vec<Var>, rule: Box<dyn CustomBackward> },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Abs(..) => "abs",
            Op::Powf(..) => "powf",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::GatherRows { .. } => "gather_rows",
            Op::Reshape(..) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::Clamp { .. } => "clamp",
            Op::Custom { rule, .. } => rule.name(),
        }
    }

    pub(crate) fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Transpose(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Log(x)
            | Op::Exp(x)
            | Op::Abs(x)
            | Op::Powf(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x) => vec![*x],
            Op::SumAxis { x, .. }
            | Op::Softmax { x, .. }
            | Op::Narrow { x, .. }
            | Op::GatherRows { x, .. }
            | Op::Clamp { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Array,
    pub(crate) grad: Option<Array>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Dynamic tape: nodes are appended in creation order, which is a topological order.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    fault: Option<(String, f64)>,
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

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push_leaf(value, false)
    }

    /// Leaf that accumulates a gradient during [`Graph::backward`].
    pub fn param(&mut self, value: Array) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Array, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers the result of an operation implemented outside this module.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Array,
        rule: Box<dyn CustomBackward>,
    ) -> Result<Var> {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        )
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Array> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Scales every gradient emitted by backward rules named `op` by `factor`.
    ///
    /// Only meant for negative-control tests of the gradient checker.
    pub fn inject_fault(&mut self, op: &str, factor: f64) {
        self.fault = Some((op.to_string(), factor));
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Array>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(self.nodes[loss.0].value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if !matches!(node.op, Op::Leaf) {
                let contribs = super::ops::backward_rule(self, i, &g)?;
                let scale = match &self.fault {
                    Some((name, f)) if name == node.op.name() => Some(*f),
                    _ => None,
                };
                for (parent, mut c) in contribs {
                    if !self.nodes[parent.0].requires_grad {
                        continue;
                    }
                    if let Some(f) = scale {
                        c.data_mut().iter_mut().for_each(|v| *v *= f);
                    }
                    debug_assert_eq!(c.shape(), self.nodes[parent.0].value.shape());
                    match &mut grads[parent.0] {
                        Some(acc) => acc.add_assign(&c),
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            match &mut self.nodes[i].grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}
