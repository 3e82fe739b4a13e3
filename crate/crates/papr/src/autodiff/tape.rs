use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use super::tensor::{TapeRef, Tensor};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("backward root must be scalar-shaped, got {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("tensor was recorded on a different tape")]
    TapeMismatch,
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("gather index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// A recorded operation. Variants keep only input node ids plus whatever
/// static attributes the backward pass needs; forward values live on the
/// nodes themselves.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Matmul(usize, usize),
    Inner(usize, usize),
    Norm(usize),
    Sin(usize),
    Cos(usize),
    Exp(usize),
    Clamp(usize, f64, f64),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    /// Softmax along `axis` of a 2-d tensor (1-d treated as a single row).
    Softmax(usize, usize),
    Concat(Vec<usize>, usize),
    SliceCols(usize, usize, usize),
    Reshape(usize),
    GatherRows(usize, Rc<Vec<usize>>),
    SumAll(usize),
    MeanAll(usize),
    SumAxis(usize, usize),
    AddBias(usize, usize),
    ScaleCols(usize, usize),
    ScaleRows(usize, usize),
    SumGroups(usize, usize),
    Posenc(usize, usize),
    Conv2d {
        input: usize,
        kernel: usize,
        stride: usize,
    },
    Upsample2(usize),
}

pub(crate) struct Node {
    pub op: Op,
    pub shape: Vec<usize>,
    pub value: Rc<Vec<f64>>,
    pub requires_grad: bool,
}

/// Records tensor operations for reverse-mode differentiation.
///
/// A tape is single-threaded: record the forward pass, call
/// [`Tape::backward`] on a scalar root, read gradients off the result.
/// Leaf tensors created with [`Tensor::with_grad`] are leased onto the tape
/// the first time an op sees them; the same storage is never leased twice,
/// so gradient contributions from every use accumulate in one buffer.
pub struct Tape {
    pub(crate) id: u64,
    pub(crate) nodes: Vec<Node>,
    lease_cache: HashMap<usize, usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            lease_cache: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Binds a tensor to this tape as a leaf, reusing the existing node when
    /// the same storage was leased before.
    pub fn lease(&mut self, t: &Tensor) -> Tensor {
        let idx = self.node_of(t);
        self.handle(idx, t.shape().to_vec())
    }

    pub(crate) fn node_of(&mut self, t: &Tensor) -> usize {
        if let Some(r) = t.node {
            if r.tape == self.id {
                return r.node;
            }
        }
        let key = t.storage_id();
        if let Some(&idx) = self.lease_cache.get(&key) {
            return idx;
        }
        let idx = self.push(Op::Leaf, t.shape().to_vec(), t.storage(), t.requires_grad());
        self.lease_cache.insert(key, idx);
        idx
    }

    pub(crate) fn push(
        &mut self,
        op: Op,
        shape: Vec<usize>,
        value: Rc<Vec<f64>>,
        requires_grad: bool,
    ) -> usize {
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    pub(crate) fn handle(&self, idx: usize, shape: Vec<usize>) -> Tensor {
        let node = &self.nodes[idx];
        Tensor::from_storage(
            shape,
            Rc::clone(&node.value),
            Some(TapeRef {
                tape: self.id,
                node: idx,
            }),
            node.requires_grad,
        )
    }

    pub(crate) fn value(&self, idx: usize) -> &[f64] {
        &self.nodes[idx].value
    }

    pub(crate) fn rg(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    /// Reverse accumulation from a scalar root. Every node is visited at
    /// most once, in reverse recording order; leaves that do not influence
    /// the root report a zero gradient.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients<'_>> {
        if !root.is_scalar() {
            return Err(AutodiffError::NonScalarRoot(root.shape().to_vec()));
        }
        let root_idx = match root.node {
            Some(r) if r.tape == self.id => r.node,
            Some(_) => return Err(AutodiffError::TapeMismatch),
            None => return Err(AutodiffError::TapeMismatch),
        };
        let mut bufs: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        bufs[root_idx] = Some(vec![1.0]);
        for idx in (0..=root_idx).rev() {
            if bufs[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let grad = bufs[idx].take().unwrap();
            super::ops::backward_op(self, idx, &grad, &mut bufs);
            bufs[idx] = Some(grad);
        }
        Ok(Gradients { tape: self, bufs })
    }
}

/// Gradient buffers produced by [`Tape::backward`], keyed by node.
pub struct Gradients<'t> {
    tape: &'t Tape,
    bufs: Vec<Option<Vec<f64>>>,
}

impl Gradients<'_> {
    fn resolve(&self, t: &Tensor) -> Option<usize> {
        if let Some(r) = t.node {
            if r.tape == self.tape.id {
                return Some(r.node);
            }
            return None;
        }
        self.tape.lease_cache.get(&t.storage_id()).copied()
    }

    /// Gradient of the root with respect to `t`. Returns `None` for tensors
    /// that do not require grad or never touched this tape; leaves that
    /// require grad but did not influence the root get zeros.
    pub fn get(&self, t: &Tensor) -> Option<Tensor> {
        let idx = self.resolve(t)?;
        if !self.tape.nodes[idx].requires_grad {
            return None;
        }
        let shape = self.tape.nodes[idx].shape.clone();
        match &self.bufs[idx] {
            Some(buf) => Some(Tensor::new(shape, buf.clone())),
            None => Some(Tensor::zeros(shape)),
        }
    }
}

/// Allocates (or retrieves) the gradient buffer for `idx`.
pub(crate) fn buf_for<'a>(
    bufs: &'a mut [Option<Vec<f64>>],
    idx: usize,
    len: usize,
) -> &'a mut Vec<f64> {
    bufs[idx].get_or_insert_with(|| vec![0.0; len])
}
