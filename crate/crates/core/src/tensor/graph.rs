use std::sync::atomic::{AtomicU32, Ordering};

use super::ops;
use super::{Element, Result, Tensor, TensorError};

static NEXT_GRAPH: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

/// Names accepted by [`Op::from_name`].
pub const CATALOG: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "concat",
    "slice",
    "gather-rows",
    "softmax",
    "log-softmax",
    "layer-norm",
    "gelu",
    "mean",
    "sum",
    "l2-normalize",
    "log",
    "exp",
    "square",
    "transpose",
    "masked-fill",
    "stop-gradient",
    "reshape",
];

/// A differentiable primitive together with its attributes.
///
/// Binary elementwise primitives (`Add`, `Sub`, `Mul`) accept a right operand
/// whose shape is a suffix of the left operand's shape; it is repeated over
/// the leading axes.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// `[.., m, k] × [.., k, n]`, or `[.., m, k] × [k, n]` with a shared right side.
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    /// Selects rows along axis 0 (embedding lookup).
    GatherRows {
        indices: Vec<usize>,
    },
    Softmax {
        axis: usize,
    },
    LogSoftmax {
        axis: usize,
    },
    /// Normalization only; gain and bias are applied with `Mul`/`Add`.
    LayerNorm {
        axis: usize,
        eps: f64,
    },
    /// tanh approximation.
    Gelu,
    Mean {
        axis: usize,
    },
    Sum {
        axis: usize,
    },
    L2Normalize {
        axis: usize,
        eps: f64,
    },
    Log,
    Exp,
    Square,
    Transpose {
        perm: Vec<usize>,
    },
    MaskedFill {
        mask: Vec<bool>,
        value: f64,
    },
    StopGradient,
    Reshape {
        shape: Vec<usize>,
    },
}

/// Loosely-typed attributes for name-based primitive construction.
#[derive(Clone, Debug, Default)]
pub struct Attrs {
    pub axis: Option<usize>,
    pub scalar: Option<f64>,
    pub eps: Option<f64>,
    pub start: Option<usize>,
    pub len: Option<usize>,
    pub indices: Option<Vec<usize>>,
    pub shape: Option<Vec<usize>>,
    pub mask: Option<Vec<bool>>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const L2_NORMALIZE_EPS: f64 = 1e-12;

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::GatherRows { .. } => "gather-rows",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log-softmax",
            Op::LayerNorm { .. } => "layer-norm",
            Op::Gelu => "gelu",
            Op::Mean { .. } => "mean",
            Op::Sum { .. } => "sum",
            Op::L2Normalize { .. } => "l2-normalize",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::Square => "square",
            Op::Transpose { .. } => "transpose",
            Op::MaskedFill { .. } => "masked-fill",
            Op::StopGradient => "stop-gradient",
            Op::Reshape { .. } => "reshape",
        }
    }

    /// Builds a primitive from its catalog name.
    pub fn from_name(name: &str, attrs: &Attrs) -> Result<Op> {
        fn need<V: Clone>(op: &'static str, what: &str, v: &Option<V>) -> Result<V> {
            v.clone().ok_or_else(|| TensorError::BadAttribute {
                op,
                reason: format!("missing `{what}`"),
            })
        }
        let axis = |op| need(op, "axis", &attrs.axis);
        Ok(match name {
            "matmul" => Op::MatMul,
            "add" => Op::Add,
            "sub" => Op::Sub,
            "mul" => Op::Mul,
            "scale" => Op::Scale(need("scale", "scalar", &attrs.scalar)?),
            "concat" => Op::Concat { axis: axis("concat")? },
            "slice" => Op::Slice {
                axis: axis("slice")?,
                start: need("slice", "start", &attrs.start)?,
                len: need("slice", "len", &attrs.len)?,
            },
            "gather-rows" => Op::GatherRows {
                indices: need("gather-rows", "indices", &attrs.indices)?,
            },
            "softmax" => Op::Softmax { axis: axis("softmax")? },
            "log-softmax" => Op::LogSoftmax {
                axis: axis("log-softmax")?,
            },
            "layer-norm" => Op::LayerNorm {
                axis: axis("layer-norm")?,
                eps: attrs.eps.unwrap_or(LAYER_NORM_EPS),
            },
            "gelu" => Op::Gelu,
            "mean" => Op::Mean { axis: axis("mean")? },
            "sum" => Op::Sum { axis: axis("sum")? },
            "l2-normalize" => Op::L2Normalize {
                axis: axis("l2-normalize")?,
                eps: attrs.eps.unwrap_or(L2_NORMALIZE_EPS),
            },
            "log" => Op::Log,
            "exp" => Op::Exp,
            "square" => Op::Square,
            "transpose" => Op::Transpose {
                perm: need("transpose", "shape", &attrs.shape)?,
            },
            "masked-fill" => Op::MaskedFill {
                mask: need("masked-fill", "mask", &attrs.mask)?,
                value: need("masked-fill", "scalar", &attrs.scalar)?,
            },
            "stop-gradient" => Op::StopGradient,
            "reshape" => Op::Reshape {
                shape: need("reshape", "shape", &attrs.shape)?,
            },
            other => return Err(TensorError::UnknownPrimitive(other.to_string())),
        })
    }

    pub(crate) fn arity(&self) -> Option<usize> {
        match self {
            Op::MatMul | Op::Add | Op::Sub | Op::Mul => Some(2),
            Op::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

struct Node<T> {
    op: Option<Op>,
    inputs: Vec<usize>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Computation record for one forward pass.
pub struct Graph<T> {
    id: u32,
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<T>) -> Var {
        let index = self.nodes.len() as u32;
        self.nodes.push(node);
        Var { graph: self.id, index }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index() >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index())
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Node {
            op: None,
            inputs: Vec::new(),
            value,
            requires_grad: false,
        })
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(Node {
            op: None,
            inputs: Vec::new(),
            value,
            requires_grad: true,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.check(v).expect("variable from another graph")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index()].requires_grad
    }

    /// Name of the primitive that produced `v`, `None` for leaves.
    pub fn op_name(&self, v: Var) -> Option<&'static str> {
        self.nodes[v.index()].op.as_ref().map(Op::name)
    }

    /// Runs a primitive forward and records it.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = op.arity() {
            if inputs.len() != n {
                return Err(TensorError::Arity {
                    op: op.name(),
                    expected: n,
                    actual: inputs.len(),
                });
            }
        } else if inputs.is_empty() {
            return Err(TensorError::Arity {
                op: op.name(),
                expected: 1,
                actual: 0,
            });
        }
        let idx = inputs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let values: Vec<&Tensor<T>> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let value = ops::forward(&op, &values)?;
        let requires_grad = !matches!(op, Op::StopGradient) && idx.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(Node {
            op: Some(op),
            inputs: idx,
            value,
            requires_grad,
        }))
    }

    /// Name-based entry point over [`CATALOG`].
    pub fn apply_named(&mut self, name: &str, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        let op = Op::from_name(name, attrs)?;
        self.apply(op, inputs)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.check(loss)?;
        let out = &self.nodes[root].value;
        if out.numel() != 1 {
            return Err(TensorError::NotScalar(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root].requires_grad {
            return Ok(Gradients { graph: self.id, grads });
        }
        grads[root] = Some(Tensor::full(out.shape(), T::one()));
        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let input_grads = ops::backward(op, &inputs, &node.value, &g, &needs);
            for ((&j, need), ig) in node.inputs.iter().zip(&needs).zip(input_grads) {
                if !need {
                    continue;
                }
                let Some(ig) = ig else { continue };
                match &mut grads[j] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(ig.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { graph: self.id, grads })
    }
}

/// Convenience wrappers; each panics only on foreign variables.
impl<T: Element> Graph<T> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, parts)
    }
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Op::Slice { axis, start, len }, &[a])
    }
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        self.apply(Op::GatherRows { indices }, &[a])
    }
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Softmax { axis }, &[a])
    }
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::LogSoftmax { axis }, &[a])
    }
    pub fn layer_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(
            Op::LayerNorm {
                axis,
                eps: LAYER_NORM_EPS,
            },
            &[a],
        )
    }
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Gelu, &[a])
    }
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Mean { axis }, &[a])
    }
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Sum { axis }, &[a])
    }
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(
            Op::L2Normalize {
                axis,
                eps: L2_NORMALIZE_EPS,
            },
            &[a],
        )
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Log, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Exp, &[a])
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Square, &[a])
    }
    pub fn transpose(&mut self, a: Var, perm: Vec<usize>) -> Result<Var> {
        self.apply(Op::Transpose { perm }, &[a])
    }
    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                expected: "rank >= 2".into(),
                actual: format!("{:?}", self.shape(a)),
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.transpose(a, perm)
    }
    pub fn masked_fill(&mut self, a: Var, mask: Vec<bool>, value: f64) -> Result<Var> {
        self.apply(Op::MaskedFill { mask, value }, &[a])
    }
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::StopGradient, &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape { shape: shape.to_vec() }, &[a])
    }
    /// Sum over every element, as a rank-0 scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, &[n])?;
        self.sum(flat, 0)
    }
    /// Mean over every element, as a rank-0 scalar.
    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, &[n])?;
        self.mean(flat, 0)
    }
}

/// Gradients produced by one [`Graph::backward`] call.
pub struct Gradients<T> {
    graph: u32,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// `None` when `v` is unreachable from the loss or does not require grad.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index()).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}
