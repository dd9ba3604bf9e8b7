//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Tape`] records one operation node per primitive applied to tracked
//! tensors; [`Tape::backward`] walks the record in reverse creation order and
//! accumulates gradients for every leaf. Tensors are immutable after creation
//! and cheap to clone (the payload is reference counted). Arithmetic is `f64`
//! throughout; checkpoints store 32-bit values (see [`crate::checkpoint`]).
//!
//! Nodes are recorded only when at least one input is tracked, so the same
//! forward code serves training (weights bound as leaves) and inference
//! (weights bound as constants, no recording overhead).
//!
//! Dropout masks come from a counter-based generator keyed by the tape's seed
//! and an operation counter, so a rebuilt graph reproduces identical masks.

mod adam;
mod check;
pub mod ops;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use check::{grad_check, GradCheckConfig, GradCheckReport, ParamCheck};

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};

/// A plain tensor value: shape plus row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorValue {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorValue {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data mismatch"
        );
        TensorValue { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        TensorValue {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        TensorValue {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Handle to a (possibly tracked) tensor.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<usize>,
}

impl Tensor {
    /// Untracked tensor; participates in forward math only.
    pub fn constant(value: TensorValue) -> Self {
        Tensor {
            shape: value.shape,
            data: Arc::new(value.data),
            node: None,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(h * w);
        for r in rows {
            assert_eq!(r.len(), w);
            data.extend_from_slice(r);
        }
        Tensor::constant(TensorValue::new(vec![h, w], data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn value(&self) -> TensorValue {
        TensorValue::new(self.shape.clone(), self.data.to_vec())
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn node_id(&self) -> Option<usize> {
        self.node
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            self.shape.first().copied().unwrap_or(1)
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }
}

#[derive(Debug, Clone)]
pub(crate) struct NodeInput {
    pub value: Arc<Vec<f64>>,
    pub shape: Vec<usize>,
    pub node: Option<usize>,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Matmul,
    Add { broadcast: bool },
    Sub { broadcast: bool },
    Mul { broadcast: bool },
    Scale(f64),
    AddScalar,
    SoftmaxRows,
    LayerNorm,
    Gelu,
    Relu,
    Sigmoid,
    Log,
    Clamp { lo: f64, hi: f64 },
    Dropout { rate: f64, key: u64 },
    Reshape,
    Transpose,
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    EmbeddingLookup { ids: Vec<usize> },
    Unfold { spec: ops::UnfoldSpec },
    Sum,
    Mean,
}

pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<NodeInput>,
    pub value: Arc<Vec<f64>>,
    pub shape: Vec<usize>,
    /// Per-op auxiliary data saved for backward (e.g. layernorm statistics).
    pub saved: Vec<f64>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    op_counter: u64,
}

/// Records forward operations for reverse-mode differentiation.
pub struct Tape {
    inner: RefCell<TapeInner>,
    train: bool,
    dropout_seed: u64,
}

impl Tape {
    /// Evaluation-mode tape: dropout is the identity.
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(TapeInner::default()),
            train: false,
            dropout_seed: 0,
        }
    }

    /// Training-mode tape; dropout masks derive from `dropout_seed`.
    pub fn training(dropout_seed: u64) -> Self {
        Tape {
            inner: RefCell::new(TapeInner::default()),
            train: true,
            dropout_seed,
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn dropout_seed(&self) -> u64 {
        self.dropout_seed
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Registers a tracked leaf (a trainable parameter).
    pub fn leaf(&self, value: TensorValue) -> Tensor {
        let data = Arc::new(value.data);
        let id = self.push_node(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: Arc::clone(&data),
            shape: value.shape.clone(),
            saved: Vec::new(),
        });
        Tensor {
            shape: value.shape,
            data,
            node: Some(id),
        }
    }

    pub(crate) fn push_node(&self, node: Node) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    /// Monotone counter; advances on every dropout application regardless of
    /// tracking so eval and train graphs stay aligned.
    pub(crate) fn next_op_key(&self) -> u64 {
        let mut inner = self.inner.borrow_mut();
        inner.op_counter += 1;
        inner.op_counter
    }

    pub(crate) fn record(
        &self,
        op: Op,
        inputs: &[&Tensor],
        value: Vec<f64>,
        shape: Vec<usize>,
        saved: Vec<f64>,
    ) -> Tensor {
        let data = Arc::new(value);
        let tracked = inputs.iter().any(|t| t.node.is_some());
        let node = if tracked {
            let node_inputs = inputs
                .iter()
                .map(|t| NodeInput {
                    value: Arc::clone(&t.data),
                    shape: t.shape.clone(),
                    node: t.node,
                })
                .collect();
            Some(self.push_node(Node {
                op,
                inputs: node_inputs,
                value: Arc::clone(&data),
                shape: shape.clone(),
                saved,
            }))
        } else {
            None
        };
        Tensor { shape, data, node }
    }

    /// Reverse accumulation from a scalar loss. Returns gradients addressable
    /// by the node ids of tracked tensors (typically leaves).
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if !loss.is_scalar() {
            return Err(Error::domain(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape
            )));
        }
        let Some(loss_node) = loss.node else {
            return Err(Error::domain(
                "loss is not tracked on this tape (no tracked inputs)",
            ));
        };
        let inner = self.inner.borrow();
        let n = inner.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss_node] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<TensorValue>> = vec![None; n];
        for id in (0..n).rev() {
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            let node = &inner.nodes[id];
            if matches!(node.op, Op::Leaf) {
                leaf_grads[id] = Some(TensorValue::new(node.shape.clone(), grad_out));
                continue;
            }
            let input_grads = ops::backward_node(node, &grad_out, self.dropout_seed)?;
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let (Some(target), Some(g)) = (input.node, g) else {
                    continue;
                };
                match &mut grads[target] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(Gradients {
            by_node: leaf_grads,
        })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradient map produced by [`Tape::backward`].
pub struct Gradients {
    by_node: Vec<Option<TensorValue>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a tracked leaf tensor.
    pub fn grad(&self, tensor: &Tensor) -> Option<&TensorValue> {
        tensor.node.and_then(|id| self.by_node.get(id)?.as_ref())
    }
}
