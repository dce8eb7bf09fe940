use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &mut GradBuf)>;

struct Node {
    value: Arc<Tensor>,
    needs_grad: bool,
    backward: Option<BackwardFn>,
}

/// Append-only record of a forward computation.
///
/// Node ids increase in creation order, so every node's inputs precede it and
/// a reverse sweep over ids is a valid topological order for backward.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    /// Keyed by store address and parameter id.
    params: RefCell<HashMap<(usize, ParamId), usize>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&self, value: Tensor, needs_grad: bool, backward: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value: Arc::new(value), needs_grad, backward: if needs_grad { backward } else { None } });
        Var { tape: self, id }
    }

    fn push_shared(&self, value: Arc<Tensor>, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, needs_grad, backward: None });
        Var { tape: self, id }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, true, None)
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, false, None)
    }

    /// Leaf for a stored parameter. Repeated calls within one tape return the
    /// same node so shared weights accumulate a single gradient. Frozen
    /// parameters enter as constants.
    pub fn param<'t>(&'t self, store: &ParamStore, id: ParamId) -> Var<'t> {
        let key = (store as *const ParamStore as usize, id);
        if let Some(&node) = self.params.borrow().get(&key) {
            return Var { tape: self, id: node };
        }
        let p = store.get(id);
        let var = self.push_shared(p.value.clone(), !p.frozen);
        self.params.borrow_mut().insert(key, var.id);
        var
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Reverse sweep from a scalar root. Each node's backward rule runs at
    /// most once and adds into its inputs' gradient buffers.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::contract("backward root belongs to another tape"));
        }
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.numel() != 1 {
            return Err(Error::contract(format!("backward needs a scalar root, got shape {:?}", root_value.shape())));
        }
        let mut buf = GradBuf {
            slots: (0..nodes.len()).map(|_| None).collect(),
            numel: nodes.iter().map(|n| n.value.numel()).collect(),
            needs: nodes.iter().map(|n| n.needs_grad).collect(),
        };
        if nodes[root.id].needs_grad {
            buf.slots[root.id] = Some(vec![1.0]);
        }
        for id in (0..=root.id).rev() {
            let Some(backward) = &nodes[id].backward else { continue };
            let Some(grad) = buf.slots[id].take() else { continue };
            backward(&grad, &mut buf);
            buf.slots[id] = Some(grad);
        }
        let params = self.params.borrow().iter().map(|(&(_, p), &n)| (p, n)).collect();
        Ok(Gradients { slots: buf.slots, params })
    }
}

/// Gradient accumulators indexed by node id.
pub(crate) struct GradBuf {
    slots: Vec<Option<Vec<f64>>>,
    numel: Vec<usize>,
    needs: Vec<bool>,
}

impl GradBuf {
    /// Accumulator for node `id`, or `None` when it needs no gradient.
    pub(crate) fn slot(&mut self, id: usize) -> Option<&mut [f64]> {
        if !self.needs[id] {
            return None;
        }
        let n = self.numel[id];
        Some(self.slots[id].get_or_insert_with(|| vec![0.0; n]))
    }

    pub(crate) fn add(&mut self, id: usize, g: &[f64]) {
        if let Some(slot) = self.slot(id) {
            for (s, v) in slot.iter_mut().zip(g) {
                *s += v;
            }
        }
    }

    pub(crate) fn wants(&self, id: usize) -> bool {
        self.needs[id]
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`; `None` when unreachable.
    pub fn wrt(&self, var: Var<'_>) -> Option<&[f64]> {
        self.slots.get(var.id).and_then(|s| s.as_deref())
    }

    /// Gradients of every trainable parameter that took part in the forward
    /// pass, sorted by parameter id.
    pub fn params(&self) -> Vec<(ParamId, &[f64])> {
        let mut out: Vec<_> = self.params.iter().filter_map(|&(p, node)| self.slots[node].as_deref().map(|g| (p, g))).collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

/// A tape together with the parameter store that model code reads from.
#[derive(Clone, Copy)]
pub struct Ctx<'a> {
    pub tape: &'a Tape,
    pub store: &'a ParamStore,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore) -> Self {
        Ctx { tape, store }
    }

    pub fn p(&self, id: ParamId) -> Var<'a> {
        self.tape.param(self.store, id)
    }

    pub fn constant(&self, value: Tensor) -> Var<'a> {
        self.tape.constant(value)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.needs_grad(self.id)
    }

    /// Cut the value loose from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.push_shared(self.value(), false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar_root() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates_both_contributions() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[4], |i| i as f64));
        let y = x.sum_all().add(&x.sum_all()).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[2.0; 4]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::full(&[2], 3.0));
        let x = tape.leaf(Tensor::full(&[2], 1.0));
        let y = x.mul(&c).unwrap().sum_all();
        let g = tape.backward(y).unwrap();
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(x).unwrap(), &[3.0, 3.0]);
    }
}
