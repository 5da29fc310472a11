//! Reverse-mode differentiation via an append-only operation tape.
//!
//! Every differentiable op pushes one node holding a backward closure-object
//! and the ids of its parents. `backward` walks the nodes in strict reverse
//! append order and accumulates (`+=`) partials into parent slots. Ops whose
//! inputs do not require gradient are not recorded at all, so a tape created
//! with [`Tape::no_grad`] retains nothing and intermediate buffers are freed
//! as soon as their [`Var`] handles drop.

use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct NodeRef {
    tape: u64,
    index: usize,
}

/// A tensor value plus, when it requires gradient, its node on a tape.
#[derive(Clone, Debug)]
pub struct Var {
    value: Rc<Tensor>,
    node: Option<NodeRef>,
}

impl Var {
    /// A value that is not on any tape and never receives gradient.
    pub fn constant(value: Tensor) -> Var {
        Var {
            value: Rc::new(value),
            node: None,
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub(crate) fn value_rc(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Index of this variable's node on its tape, if any.
    pub fn tape_index(&self) -> Option<usize> {
        self.node.map(|n| n.index)
    }

    pub fn item(&self) -> Result<f64> {
        self.value.item()
    }
}

/// Receives the partials an op's backward produces for its parents.
pub(crate) struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
}

impl GradSink<'_> {
    pub(crate) fn accumulate(&mut self, parent: Option<usize>, grad: Vec<f64>) {
        let Some(index) = parent else { return };
        match &mut self.grads[index] {
            Some(existing) => {
                debug_assert_eq!(existing.len(), grad.len());
                for (e, g) in existing.iter_mut().zip(&grad) {
                    *e += g;
                }
            }
            slot @ None => *slot = Some(grad),
        }
    }
}

pub(crate) trait Backward {
    fn backward(&self, grad: &[f64], sink: &mut GradSink<'_>);
}

struct Node {
    numel: usize,
    shape: Vec<usize>,
    op: Option<Box<dyn Backward>>,
}

pub struct Tape {
    id: u64,
    recording: bool,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            recording: true,
            nodes: Vec::new(),
        }
    }

    /// A tape that records nothing; every op result is a constant.
    pub fn no_grad() -> Tape {
        Tape {
            recording: false,
            ..Tape::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable input. On a non-recording tape this is a constant.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        if !self.recording {
            return Var::constant(value);
        }
        let index = self.nodes.len();
        self.nodes.push(Node {
            numel: value.numel(),
            shape: value.shape().to_vec(),
            op: None,
        });
        Var {
            value: Rc::new(value),
            node: Some(NodeRef {
                tape: self.id,
                index,
            }),
        }
    }

    /// Node index of `var` on this tape; `None` when it is a constant.
    pub(crate) fn parent(&self, var: &Var) -> Result<Option<usize>> {
        match var.node {
            None => Ok(None),
            Some(n) if n.tape == self.id => Ok(Some(n.index)),
            Some(_) => Err(TensorError::ForeignTape),
        }
    }

    pub(crate) fn parents<const K: usize>(&self, vars: [&Var; K]) -> Result<[Option<usize>; K]> {
        let mut out = [None; K];
        for (slot, var) in out.iter_mut().zip(vars) {
            *slot = self.parent(var)?;
        }
        Ok(out)
    }

    /// Appends a node if any parent requires gradient.
    pub(crate) fn push<B: Backward + 'static>(
        &mut self,
        value: Tensor,
        any_parent: bool,
        make_op: impl FnOnce() -> B,
    ) -> Var {
        if !self.recording || !any_parent {
            return Var::constant(value);
        }
        let index = self.nodes.len();
        self.nodes.push(Node {
            numel: value.numel(),
            shape: value.shape().to_vec(),
            op: Some(Box::new(make_op())),
        });
        Var {
            value: Rc::new(value),
            node: Some(NodeRef {
                tape: self.id,
                index,
            }),
        }
    }

    /// Propagates d(loss)/d(node) to every leaf reachable from `loss`.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if loss.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
        }
        let root = self.parent(loss)?.ok_or_else(|| {
            TensorError::invalid("backward", "loss is not on the tape (no input requires grad)")
        })?;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);
        for index in (0..=root).rev() {
            let node = &self.nodes[index];
            let Some(op) = &node.op else { continue };
            let Some(grad) = grads[index].take() else {
                continue;
            };
            debug_assert_eq!(grad.len(), node.numel);
            let mut sink = GradSink {
                grads: &mut grads[..index],
            };
            op.backward(&grad, &mut sink);
        }

        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                node.op.is_none().then(|| {
                    let data = grads[i].take().unwrap_or_else(|| vec![0.0; node.numel]);
                    Tensor::from_parts(node.shape.clone(), data)
                })
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            leaves,
        })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf; zeros when the leaf was unreachable from the loss.
    /// `None` for constants, intermediates, and variables of other tapes.
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        let node = var.node?;
        if node.tape != self.tape {
            return None;
        }
        self.leaves.get(node.index)?.as_ref()
    }

    pub fn take(&mut self, var: &Var) -> Option<Tensor> {
        let node = var.node?;
        if node.tape != self.tape {
            return None;
        }
        self.leaves.get_mut(node.index)?.take()
    }
}
