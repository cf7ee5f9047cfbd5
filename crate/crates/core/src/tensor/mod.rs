//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a reference-counted node. Leaves are created with
//! [`Tensor::new`]; every operation on tensors that require gradients records
//! an adjoint rule together with references to its inputs. Calling
//! [`Tensor::backward`] on a single-element tensor walks the recorded graph in
//! reverse topological order and accumulates `d loss / d leaf` into every leaf
//! that requires gradients.
//!
//! Broadcasting: binary elementwise ops align shapes on trailing axes. A
//! missing leading axis is treated as extent 1. On every aligned axis the
//! extents must be equal or one of them must be 1. Nothing else broadcasts.
//!
//! Precision: values are stored as `f64`. Tensors tagged
//! [`Precision::Standard`] have every produced value rounded through `f32`, so
//! the arithmetic observed by callers is single precision. The result of an op
//! is `Standard` if any input is.

pub mod conv;
mod elementwise;
mod linalg;
mod norm;

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub use conv::Conv2dOptions;
pub use elementwise::{broadcast_shape, gelu_scalar, gelu_scalar_deriv, Unary};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("length mismatch {got} vs {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("invalid shape {0:?}: every extent must be at least 1")]
    InvalidShape(Vec<usize>),
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("backward needs a single-element loss but got shape {0:?}; reduce with sum() or mean() first")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value at coordinate {index}")]
    NonFinite { index: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    /// 64-bit values. Used by every oracle and gradient test.
    #[default]
    Wide,
    /// Values rounded to 32-bit after each op.
    Standard,
}

impl Precision {
    pub fn combine(self, other: Precision) -> Precision {
        if self == Precision::Standard || other == Precision::Standard {
            Precision::Standard
        } else {
            Precision::Wide
        }
    }

    pub(crate) fn round_vec(self, mut data: Vec<f64>) -> Vec<f64> {
        if self == Precision::Standard {
            for v in &mut data {
                *v = *v as f32 as f64;
            }
        }
        data
    }
}

impl std::str::FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "wide" => Ok(Precision::Wide),
            "standard" => Ok(Precision::Standard),
            other => Err(format!("unknown precision '{other}' (expected wide or standard)")),
        }
    }
}

/// Adjoint rule: given the op inputs, the upstream gradient and the forward
/// output, return one optional gradient per input (same length as that input).
pub type AdjointFn = Box<dyn Fn(&[Tensor], &[f64], &[f64]) -> Vec<Option<Vec<f64>>>>;

pub(crate) struct Record {
    kind: &'static str,
    inputs: Vec<Tensor>,
    adjoint: AdjointFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    precision: Precision,
    record: Option<Record>,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.record.as_ref().map(|r| r.kind))
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&e| e == 0) {
        return Err(TensorError::InvalidShape(shape.to_vec()));
    }
    Ok(())
}

impl Tensor {
    /// Creates a leaf tensor in wide precision.
    pub fn new(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        Tensor::with_precision(shape, data, requires_grad, Precision::Wide)
    }

    pub fn with_precision(
        shape: &[usize],
        data: Vec<f64>,
        requires_grad: bool,
        precision: Precision,
    ) -> Result<Tensor> {
        check_shape(shape)?;
        let expected = numel(shape);
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                got: data.len(),
                expected,
            });
        }
        let grad = requires_grad.then(|| vec![0.0; expected]);
        Ok(Tensor(Rc::new(Node {
            id: next_id(),
            shape: shape.to_vec(),
            data: RefCell::new(precision.round_vec(data)),
            grad: RefCell::new(grad),
            requires_grad,
            precision,
            record: None,
        })))
    }

    pub fn zeros(shape: &[usize], requires_grad: bool, precision: Precision) -> Result<Tensor> {
        Tensor::with_precision(shape, vec![0.0; numel(shape)], requires_grad, precision)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new(&[1], vec![value], false).expect("scalar shape is valid")
    }

    /// Builds the output of a custom differentiable operation. The adjoint is
    /// only recorded when at least one input requires gradients.
    pub fn from_op(
        kind: &'static str,
        shape: &[usize],
        data: Vec<f64>,
        inputs: Vec<Tensor>,
        adjoint: AdjointFn,
    ) -> Result<Tensor> {
        check_shape(shape)?;
        if data.len() != numel(shape) {
            return Err(TensorError::LengthMismatch {
                got: data.len(),
                expected: numel(shape),
            });
        }
        let precision = inputs
            .iter()
            .fold(Precision::Wide, |p, t| p.combine(t.precision()));
        let requires_grad = inputs.iter().any(Tensor::requires_grad);
        let record = requires_grad.then_some(Record {
            kind,
            inputs,
            adjoint,
        });
        Ok(Tensor(Rc::new(Node {
            id: next_id(),
            shape: shape.to_vec(),
            data: RefCell::new(precision.round_vec(data)),
            grad: RefCell::new(None),
            requires_grad,
            precision,
            record,
        })))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.0.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.record.is_none()
    }

    pub fn precision(&self) -> Precision {
        self.0.precision
    }

    pub fn op_kind(&self) -> Option<&'static str> {
        self.0.record.as_ref().map(|r| r.kind)
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    /// Overwrites the values of a leaf (parameter updates, perturbations).
    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        let mut data = self.0.data.borrow_mut();
        if values.len() != data.len() {
            return Err(TensorError::LengthMismatch {
                got: values.len(),
                expected: data.len(),
            });
        }
        data.copy_from_slice(values);
        if self.0.precision == Precision::Standard {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        Ok(())
    }

    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        let mut data = self.0.data.borrow_mut();
        f(&mut data);
        if self.0.precision == Precision::Standard {
            for v in data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.0.grad.borrow_mut().as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// A copy of the values that takes no part in any graph.
    pub fn detach(&self) -> Tensor {
        Tensor::with_precision(&self.0.shape, self.to_vec(), false, self.0.precision)
            .expect("shape already validated")
    }

    pub fn same_node(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Accumulates `d self / d leaf` into every reachable requires-grad leaf.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let graph = Graph::from_root(self);
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.0.id, vec![1.0]);
        for node in graph.order.iter().rev() {
            let Some(gout) = grads.remove(&node.0.id) else {
                continue;
            };
            match &node.0.record {
                None => {
                    if let Some(g) = node.0.grad.borrow_mut().as_mut() {
                        for (a, b) in g.iter_mut().zip(&gout) {
                            *a += b;
                        }
                    }
                }
                Some(rec) => {
                    let out = node.0.data.borrow();
                    let input_grads = (rec.adjoint)(&rec.inputs, &gout, &out);
                    debug_assert_eq!(input_grads.len(), rec.inputs.len());
                    for (input, g) in rec.inputs.iter().zip(input_grads) {
                        let Some(g) = g else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(g.len(), input.numel(), "adjoint of {}", rec.kind);
                        match grads.get_mut(&input.0.id) {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&g) {
                                    *a += b;
                                }
                            }
                            None => {
                                grads.insert(input.0.id, g);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// The recorded operations reachable from a root, topologically ordered so
/// that every record's inputs precede it.
pub struct Graph {
    order: Vec<Tensor>,
}

impl Graph {
    pub fn from_root(root: &Tensor) -> Graph {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // iterative post-order DFS
        let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !t.requires_grad() || !visited.insert(t.0.id) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(rec) = &t.0.record {
                for input in rec.inputs.iter().rev() {
                    if input.requires_grad() && !visited.contains(&input.0.id) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        Graph { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Op kinds in evaluation order (leaves reported as "leaf").
    pub fn kinds(&self) -> Vec<&'static str> {
        self.order
            .iter()
            .map(|t| t.op_kind().unwrap_or("leaf"))
            .collect()
    }

    /// True when every record appears after all of its inputs.
    pub fn is_topological(&self) -> bool {
        let pos: HashMap<u64, usize> = self
            .order
            .iter()
            .enumerate()
            .map(|(i, t)| (t.0.id, i))
            .collect();
        self.order.iter().enumerate().all(|(i, t)| match &t.0.record {
            None => true,
            Some(rec) => rec
                .inputs
                .iter()
                .filter(|x| x.requires_grad())
                .all(|x| pos.get(&x.0.id).is_some_and(|&j| j < i)),
        })
    }
}

/// Resets the gradients of every tensor in `params`.
pub fn zero_grads(params: &[Tensor]) {
    for p in params {
        p.zero_grad();
    }
}
