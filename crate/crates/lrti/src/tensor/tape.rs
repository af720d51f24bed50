//! The gradient tape: an ordered list of recorded primitives.
//!
//! Nodes are appended in execution order, so every node's inputs precede it
//! and the reverse sweep in [`Recording::backward`] is a valid topological
//! traversal. The tape owns an `Arc` of each node's output buffer; the byte
//! counter tracks buffers the tape *caused to be retained* (leaf inputs and
//! aliases are shared, not copied, and count zero).

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{ops, Elem, Tensor};
use crate::error::{Error, Result};

pub(crate) type NodeId = usize;

/// Where an output tensor lives on a tape: which recording (epoch) and which
/// node. Stale references from an earlier recording are ignored.
#[derive(Clone, Copy, Debug)]
pub(crate) struct TapeRef {
    pub epoch: u64,
    pub id: NodeId,
}

/// Recorded primitive with its input node ids and any metadata backward
/// needs beyond the input/output buffers themselves.
pub(crate) enum Op<E: Elem> {
    Leaf {
        uid: u64,
        requires_grad: bool,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: E,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
    },
    Conv2d3x3 {
        x: NodeId,
        w: NodeId,
    },
    Relu2 {
        x: NodeId,
    },
    Softmax {
        x: NodeId,
        axis: usize,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        axis: usize,
    },
    Charbonnier {
        pred: NodeId,
        target: NodeId,
    },
    Sum {
        x: NodeId,
    },
    Gather {
        x: NodeId,
        map: Arc<Vec<i64>>,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Reshape {
        x: NodeId,
    },
}

pub(crate) struct Node<E: Elem> {
    pub op: Op<E>,
    pub out: Arc<Vec<E>>,
    pub shape: Vec<usize>,
}

/// Size of a live tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TapeStats {
    /// Recorded operations, leaves included.
    pub ops: usize,
    /// Bytes of intermediate output buffers retained by the tape.
    pub bytes: usize,
}

/// Thread-local recording state. Public only because the [`Elem`] trait
/// must name it; use [`Recording`] instead.
#[doc(hidden)]
pub struct Tape<E: Elem> {
    epoch: u64,
    nodes: Vec<Node<E>>,
    leaf_index: HashMap<u64, NodeId>,
    bytes: usize,
}

static NEXT_EPOCH: AtomicU64 = AtomicU64::new(1);

impl<E: Elem> Tape<E> {
    fn new() -> Self {
        Tape {
            epoch: NEXT_EPOCH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            leaf_index: HashMap::new(),
            bytes: 0,
        }
    }

    pub(crate) fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Node id for a tensor consumed by a new op, registering it as a leaf
    /// if it has no live node on this tape.
    pub(crate) fn ensure_input(&mut self, t: &Tensor<E>) -> NodeId {
        if let Some(r) = t.node_ref() {
            if r.epoch == self.epoch {
                return r.id;
            }
        }
        if let Some(&id) = self.leaf_index.get(&t.uid()) {
            return id;
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf {
                uid: t.uid(),
                requires_grad: t.requires_grad(),
            },
            out: t.data_arc(),
            shape: t.shape().to_vec(),
        });
        self.leaf_index.insert(t.uid(), id);
        id
    }

    /// Append a computed node. `alias` marks ops whose output shares the
    /// input buffer (reshape) and therefore retains nothing new.
    pub(crate) fn push(
        &mut self,
        op: Op<E>,
        out: Arc<Vec<E>>,
        shape: Vec<usize>,
        alias: bool,
    ) -> NodeId {
        if !alias {
            self.bytes += out.len() * E::BYTES;
        }
        let id = self.nodes.len();
        self.nodes.push(Node { op, out, shape });
        id
    }

    fn stats(&self) -> TapeStats {
        TapeStats {
            ops: self.nodes.len(),
            bytes: self.bytes,
        }
    }
}

/// Gradients of a scalar loss with respect to the `requires_grad` leaves the
/// tape saw, keyed by leaf tensor identity.
#[derive(Debug)]
pub struct Gradients<E: Elem> {
    grads: HashMap<u64, Vec<E>>,
}

impl<E: Elem> Gradients<E> {
    /// Gradient buffer for a leaf, if it participated in the loss.
    pub fn get(&self, t: &Tensor<E>) -> Option<&[E]> {
        self.grads.get(&t.uid()).map(|v| v.as_slice())
    }

    /// Gradient for a leaf, zero-filled when the leaf never influenced the
    /// loss (a valid outcome for e.g. weights behind a detached boundary).
    pub fn get_or_zeros(&self, t: &Tensor<E>) -> Vec<E> {
        match self.grads.get(&t.uid()) {
            Some(g) => g.clone(),
            None => vec![E::zero(); t.numel()],
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Merge another gradient set into this one by elementwise addition
    /// (used for gradient accumulation across clips in a batch).
    pub fn accumulate(&mut self, other: &Gradients<E>) {
        for (uid, g) in &other.grads {
            match self.grads.get_mut(uid) {
                Some(dst) => {
                    for (d, s) in dst.iter_mut().zip(g.iter()) {
                        *d = *d + *s;
                    }
                }
                None => {
                    self.grads.insert(*uid, g.clone());
                }
            }
        }
    }

    /// Rescale every gradient in place.
    pub fn scale(&mut self, c: f64) {
        let c = E::from64(c);
        for g in self.grads.values_mut() {
            for v in g.iter_mut() {
                *v = *v * c;
            }
        }
    }
}

/// RAII handle for an active recording. Creating one activates the
/// thread-local tape for element type `E`; `backward` consumes both the
/// handle and the tape. Dropping the handle without calling `backward`
/// discards the tape.
pub struct Recording<E: Elem> {
    armed: bool,
    _marker: std::marker::PhantomData<fn() -> E>,
}

impl<E: Elem> Recording<E> {
    /// Activate recording. Errors if a recording for this element type is
    /// already active on this thread: one forward/backward pass owns one
    /// tape.
    pub fn start() -> Result<Self> {
        E::with_tape(|slot| {
            if slot.is_some() {
                return Err(Error::Usage(
                    "a gradient recording is already active on this thread".into(),
                ));
            }
            *slot = Some(Tape::new());
            Ok(())
        })?;
        Ok(Recording {
            armed: true,
            _marker: std::marker::PhantomData,
        })
    }

    /// Whether a recording is active for element type `E` on this thread.
    pub fn is_active() -> bool {
        E::with_tape(|slot| slot.is_some())
    }

    /// Current size of the active tape.
    pub fn stats(&self) -> TapeStats {
        E::with_tape(|slot| slot.as_ref().map(|t| t.stats()))
            .expect("recording handle exists but tape is gone")
    }

    /// Reverse sweep from a scalar loss. Consumes the tape: afterwards no
    /// recording is active and every retained buffer is released.
    pub fn backward(mut self, loss: &Tensor<E>) -> Result<Gradients<E>> {
        let tape = E::with_tape(|slot| slot.take())
            .ok_or_else(|| Error::Usage("no active recording".into()))?;
        self.armed = false;

        if loss.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let loss_id = match loss.node_ref() {
            Some(r) if r.epoch == tape.epoch => r.id,
            _ => {
                return Err(Error::Usage(
                    "loss has no ancestry on the active tape".into(),
                ))
            }
        };

        let mut grads: Vec<Option<Vec<E>>> = (0..tape.nodes.len()).map(|_| None).collect();
        grads[loss_id] = Some(vec![E::one()]);

        let mut leaf_grads: HashMap<u64, Vec<E>> = HashMap::new();
        for id in (0..=loss_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &tape.nodes[id].op {
                Op::Leaf {
                    uid,
                    requires_grad: true,
                } => {
                    leaf_grads.insert(*uid, g);
                }
                Op::Leaf { .. } => {}
                _ => ops::backward_step(&tape.nodes, id, &g, &mut grads),
            }
        }

        Ok(Gradients { grads: leaf_grads })
    }
}

impl<E: Elem> Drop for Recording<E> {
    fn drop(&mut self) {
        if self.armed {
            E::with_tape(|slot| {
                *slot = None;
            });
        }
    }
}
