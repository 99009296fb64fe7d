use std::collections::HashMap;
use std::sync::Arc;

use super::{numel, ParamId, ParamKind, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
pub trait Backward<T: Real> {
    fn name(&self) -> &'static str;

    /// Propagates `grad` (gradient w.r.t. the output `out`) into the operation's inputs.
    fn backward(&self, out: Var, grad: &[T], sink: &mut GradSink<'_, T>);
}

struct Node<T: Real> {
    shape: Vec<usize>,
    value: Arc<Vec<T>>,
    requires_grad: bool,
    op: Option<Box<dyn Backward<T>>>,
}

/// Write access to input gradients during one backward traversal.
pub struct GradSink<'a, T: Real> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<'a, T: Real> GradSink<'a, T> {
    pub fn value(&self, v: Var) -> &'a [T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &'a [usize] {
        &self.nodes[v.0].shape
    }

    /// Whether a gradient for `v` is needed at all.
    pub fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Zero-initialized accumulation buffer for `v`, or `None` if `v` needs no gradient.
    pub fn grad_mut(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    pub fn add(&mut self, v: Var, g: &[T]) {
        if let Some(buf) = self.grad_mut(v) {
            debug_assert_eq!(buf.len(), g.len());
            buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        }
    }
}

/// Append-only record of tensor operations supporting reverse-mode differentiation.
///
/// Inputs always precede outputs, so replaying indices in reverse is a valid
/// topological order. Leaf gradients accumulate across [`Tape::backward`] calls
/// until [`Tape::zero_grad`].
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    leaf_grads: HashMap<usize, Vec<T>>,
    params: Vec<(ParamId, Var)>,
    fault: Option<&'static str>,
    kink_hash: u64,
    kink_ops: usize,
    check_finite: bool,
    first_non_finite: Option<Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: HashMap::new(),
            params: Vec::new(),
            fault: None,
            kink_hash: 0xcbf2_9ce4_8422_2325,
            kink_ops: 0,
            check_finite: false,
            first_non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf sharing `t`'s values; it tracks gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push_node(t.shape().to_vec(), t.shared().clone(), t.requires_grad(), None)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push_node(t.shape().to_vec(), t.shared().clone(), false, None)
    }

    /// Binds a stored parameter, reusing the existing variable if already bound.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let entry = store.entry(id);
        let trainable = entry.kind == ParamKind::Trainable;
        let v = self.push_node(entry.tensor.shape().to_vec(), entry.tensor.shared().clone(), trainable, None);
        self.params.push((id, v));
        v
    }

    /// Makes later [`Tape::param`] lookups of `id` return `v`, so gradients of the
    /// parameter can be taken with respect to an arbitrary leaf.
    pub fn bind_param(&mut self, id: ParamId, v: Var) -> Result<()> {
        if self.params.iter().any(|(p, _)| *p == id) {
            return Err(Error::Autodiff(format!("parameter {} is already bound on this tape", id.index())));
        }
        self.params.push((id, v));
        Ok(())
    }

    /// Records the output of an operation; the backward closure is kept only when some
    /// input tracks gradients.
    pub fn push_op<B: Backward<T> + 'static>(
        &mut self,
        shape: Vec<usize>,
        value: Vec<T>,
        inputs: &[Var],
        op: B,
    ) -> Var {
        debug_assert_eq!(numel(&shape), value.len(), "{}: value/shape mismatch", op.name());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op: Option<Box<dyn Backward<T>>> = if requires_grad { Some(Box::new(op)) } else { None };
        self.push_node(shape, Arc::new(value), requires_grad, op)
    }

    fn push_node(
        &mut self,
        shape: Vec<usize>,
        value: Arc<Vec<T>>,
        requires_grad: bool,
        op: Option<Box<dyn Backward<T>>>,
    ) -> Var {
        let v = Var(self.nodes.len());
        if self.check_finite && self.first_non_finite.is_none() && value.iter().any(|x| !x.is_finite()) {
            self.first_non_finite = Some(v);
        }
        self.nodes.push(Node { shape, value, requires_grad, op });
        v
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Snapshot of a recorded value as a standalone tensor (shares storage).
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::from_shared(n.shape.clone(), n.value.clone())
    }

    /// Name of the operation that produced `v`, or `None` for leaves and untracked values.
    pub fn op_name(&self, v: Var) -> Option<&'static str> {
        self.nodes[v.0].op.as_ref().map(|op| op.name())
    }

    /// Enables recording of the first non-finite value produced on this tape.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn first_non_finite(&self) -> Option<Var> {
        self.first_non_finite
    }

    /// Test hook: scales the upstream gradient of every operation named `name` by 1.1.
    pub fn set_fault(&mut self, name: Option<&'static str>) {
        self.fault = name;
    }

    pub(crate) fn note_kinks(&mut self, mask: impl Iterator<Item = bool>) {
        self.kink_ops += 1;
        let mut h = self.kink_hash;
        for (i, bit) in mask.enumerate() {
            if bit {
                h ^= i as u64 + 0x9e37_79b9;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h ^= 0xff;
        self.kink_hash = h.wrapping_mul(0x0000_0100_0000_01b3);
    }

    /// Hash of every piecewise-linear branch taken so far; equal signatures mean the
    /// same linear region.
    pub fn kink_signature(&self) -> u64 {
        self.kink_hash
    }

    pub fn has_kinks(&self) -> bool {
        self.kink_ops > 0
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Autodiff(format!("variable {} is not on this tape", loss.0)))?;
        if node.value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        if node.op.is_none() {
            return Err(Error::Autodiff("loss has no computation record".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let factor = T::from_f64(1.1);
        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Some(op) => {
                    if self.fault == Some(op.name()) {
                        g.iter_mut().for_each(|x| *x *= factor);
                    }
                    let mut sink = GradSink { nodes: &self.nodes, grads: &mut grads[..i] };
                    op.backward(Var(i), &g, &mut sink);
                }
                None => {
                    if node.requires_grad {
                        match self.leaf_grads.get_mut(&i) {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                            None => {
                                self.leaf_grads.insert(i, g);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf variable.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(&v.0).map(|g| g.as_slice())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Adds the gradients of every bound parameter into the store's grad slots.
    pub fn write_param_grads(&self, store: &mut ParamStore<T>) -> Result<()> {
        for &(id, v) in &self.params {
            if let Some(g) = self.grad(v) {
                store.get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().copied()
    }
}
