//! Reverse-mode differentiation over the two real degrees of freedom of
//! every complex element.
//!
//! Gradients follow one convention library-wide: for a real loss `L` and an
//! element `z = x + jy`, the stored gradient is `∂L/∂x + j ∂L/∂y` (which is
//! `2 ∂L/∂z̄`). Descending along it, `z ← z − η·grad`, decreases `L`.
//!
//! A [`Tape`] records operations eagerly as they run. Values that do not
//! depend on any gradient-requiring leaf are plain constants and never touch
//! a tape, so the tape only holds the part of the graph that backward needs.

mod check;
mod ops;

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub use check::{finite_diff_check, finite_diff_check_many};
pub use ops::Pointwise;

use crate::ctensor::CTensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Maps the output gradient to one gradient per input. `needs[i]` is false
/// for inputs that are constants; their slot may be `None`.
pub(crate) type Vjp = Box<dyn Fn(&CTensor, &[bool]) -> Result<Vec<Option<CTensor>>>>;

struct Node {
    op: &'static str,
    parents: Vec<Option<NodeId>>,
    vjp: Option<Vjp>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    grads: HashMap<NodeId, CTensor>,
    params: HashMap<ParamId, NodeId>,
}

/// Operation record for one forward/backward pass.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tape").field("nodes", &inner.nodes.len()).finish()
    }
}

/// Identity of a learnable tensor across tapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

static NEXT_PARAM: AtomicU64 = AtomicU64::new(0);

impl ParamId {
    pub fn fresh() -> Self {
        ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed))
    }
}

/// A learnable tensor owned by a layer.
#[derive(Clone, Debug)]
pub struct Parameter {
    id: ParamId,
    pub value: CTensor,
}

impl Parameter {
    pub fn new(value: CTensor) -> Self {
        Parameter { id: ParamId::fresh(), value }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }
}

/// A tensor value plus, when it depends on a gradient-requiring leaf, its
/// node on a tape.
#[derive(Clone)]
pub struct Variable {
    value: CTensor,
    node: Option<(Tape, NodeId)>,
}

pub type Var = Variable;

impl std::fmt::Debug for Variable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Variable")
            .field("shape", &self.value.shape())
            .field("node", &self.node.as_ref().map(|n| n.1))
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: &'static str, parents: Vec<Option<NodeId>>, vjp: Option<Vjp>) -> NodeId {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        assert!(parents.iter().flatten().all(|&p| p < id), "tape must stay topologically ordered");
        inner.nodes.push(Node { op, parents, vjp });
        id
    }

    /// A leaf that receives a gradient on backward.
    pub fn leaf(&self, value: CTensor) -> Var {
        let id = self.push("leaf", vec![], None);
        Variable { value, node: Some((self.clone(), id)) }
    }

    /// The leaf for `param` on this tape, created on first use.
    pub fn param(&self, param: &Parameter) -> Var {
        let existing = self.inner.borrow().params.get(&param.id).copied();
        let id = match existing {
            Some(id) => id,
            None => {
                let id = self.push("param", vec![], None);
                self.inner.borrow_mut().params.insert(param.id, id);
                id
            }
        };
        Variable { value: param.value.clone(), node: Some((self.clone(), id)) }
    }

    pub fn grad_of(&self, id: NodeId) -> Option<CTensor> {
        self.inner.borrow().grads.get(&id).cloned()
    }

    /// Gradient accumulated for `param`, if it was reached by backward.
    pub fn param_grad(&self, param: &Parameter) -> Option<CTensor> {
        let inner = self.inner.borrow();
        let id = inner.params.get(&param.id)?;
        inner.grads.get(id).cloned()
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

impl Variable {
    /// A value that no gradient flows into.
    pub fn constant(value: CTensor) -> Var {
        Variable { value, node: None }
    }

    pub fn value(&self) -> &CTensor {
        &self.value
    }

    pub fn into_value(self) -> CTensor {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn rank(&self) -> usize {
        self.value.rank()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node.as_ref().map(|(_, id)| *id)
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|(t, _)| t)
    }

    /// Detached copy sharing the value.
    pub fn detach(&self) -> Var {
        Variable::constant(self.value.clone())
    }

    /// Gradient stored for this variable by the last backward pass.
    pub fn grad(&self) -> Option<CTensor> {
        let (tape, id) = self.node.as_ref()?;
        tape.grad_of(*id)
    }

    /// Records an op whose inputs are `inputs`. If none of them requires a
    /// gradient the result is a constant and `vjp` is dropped.
    pub(crate) fn record(
        op: &'static str,
        inputs: &[&Var],
        value: CTensor,
        vjp: impl Fn(&CTensor, &[bool]) -> Result<Vec<Option<CTensor>>> + 'static,
    ) -> Var {
        let mut tape: Option<&Tape> = None;
        for v in inputs {
            if let Some((t, _)) = &v.node {
                match tape {
                    None => tape = Some(t),
                    Some(existing) => assert!(existing.same(t), "variables from different tapes in `{op}`"),
                }
            }
        }
        let Some(tape) = tape else {
            return Variable::constant(value);
        };
        let parents = inputs.iter().map(|v| v.node_id()).collect();
        let id = tape.push(op, parents, Some(Box::new(vjp)));
        Variable { value, node: Some((tape.clone(), id)) }
    }

    /// Back-propagates from this scalar, real-valued loss.
    ///
    /// Every reachable leaf ends up holding `∂L/∂x + j ∂L/∂y`; unreachable
    /// leaves keep no gradient. Calling backward again on a new loss from
    /// the same tape accumulates into the existing leaf gradients.
    pub fn backward(&self) -> Result<()> {
        if self.value.numel() != 1 {
            return Err(Error::NonScalarLoss(self.value.shape().to_vec()));
        }
        let (re, im) = self.value.item()?;
        if im != 0.0 && im.abs() > 1e-12 * re.abs() {
            return Err(Error::NonRealLoss(im));
        }
        let Some((tape, root)) = &self.node else {
            return Ok(());
        };
        let seed = CTensor::from_planes(self.value.shape().to_vec(), vec![1.0], vec![0.0], self.value.dtype());
        let mut pending: HashMap<NodeId, CTensor> = HashMap::new();
        pending.insert(*root, seed);
        let mut guard = tape.inner.borrow_mut();
        let inner = &mut *guard;
        for id in (0..=*root).rev() {
            let Some(g) = pending.remove(&id) else { continue };
            let node = &inner.nodes[id];
            match &node.vjp {
                None => {
                    let slot = inner.grads.remove(&id);
                    let total = match slot {
                        Some(prev) => prev.add(&g)?,
                        None => g,
                    };
                    inner.grads.insert(id, total);
                }
                Some(vjp) => {
                    let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
                    let grads = vjp(&g, &needs)?;
                    debug_assert_eq!(grads.len(), node.parents.len(), "vjp arity for `{}`", node.op);
                    for (parent, pg) in node.parents.iter().zip(grads) {
                        let (Some(p), Some(pg)) = (parent, pg) else { continue };
                        let merged = match pending.remove(p) {
                            Some(prev) => prev.add(&pg)?,
                            None => pg,
                        };
                        pending.insert(*p, merged);
                    }
                }
            }
        }
        Ok(())
    }
}
