use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{check_shape, Scalar, Tensor};

pub(crate) type BackwardFn<F> = Box<dyn Fn(&[F], &mut GradSink<'_, F>)>;

/// Deliberate backward-pass faults, used to prove the gradient checker can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negates the input gradient of every `conv2d`.
    ConvInputGradSign,
}

struct Node<F> {
    value: Rc<Vec<F>>,
    shape: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<F>>,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// A tape is single-threaded (`!Send`); build a fresh one per step.
pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
    strict: bool,
    fault: Option<Fault>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), strict: false, fault: None }
    }

    /// In strict mode `div` rejects zero denominators.
    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn with_fault(mut self, fault: Option<Fault>) -> Self {
        self.fault = fault;
        self
    }

    pub(crate) fn is_strict(&self) -> bool {
        self.strict
    }

    pub(crate) fn fault(&self) -> Option<Fault> {
        self.fault
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Input node whose gradient is tracked when `requires_grad` is set.
    pub fn leaf(&self, tensor: Tensor<F>, requires_grad: bool) -> Var<'_, F> {
        let shape = tensor.shape().to_vec();
        self.push_node(Node {
            value: Rc::new(tensor.into_data()),
            shape,
            requires_grad,
            backward: None,
        })
    }

    pub fn var(&self, tensor: Tensor<F>) -> Var<'_, F> {
        self.leaf(tensor, true)
    }

    pub fn constant(&self, tensor: Tensor<F>) -> Var<'_, F> {
        self.leaf(tensor, false)
    }

    pub fn scalar(&self, value: F) -> Var<'_, F> {
        self.constant(Tensor::scalar(value))
    }

    fn push_node(&self, node: Node<F>) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Appends an op result. The closure receives the output gradient and
    /// scatters partials into its inputs through the sink.
    pub(crate) fn push_op<'t>(
        &'t self,
        op: &'static str,
        value: Vec<F>,
        shape: Vec<usize>,
        inputs: &[Var<'t, F>],
        backward: impl Fn(&[F], &mut GradSink<'_, F>) + 'static,
    ) -> Result<Var<'t, F>> {
        check_shape(&shape)?;
        debug_assert_eq!(value.len(), shape.iter().product::<usize>(), "{op}: size mismatch");
        let requires_grad = inputs.iter().any(|v| v.requires_grad());
        Ok(self.push_node(Node {
            value: Rc::new(value),
            shape,
            requires_grad,
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
        }))
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Vec<F>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn shape_of(&self, id: usize) -> Ref<'_, [usize]> {
        Ref::map(self.nodes.borrow(), |n| n[id].shape.as_slice())
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a single-element loss.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        let nodes = self.nodes.borrow();
        let loss_shape = &nodes[loss.id].shape;
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape.clone()));
        }
        let requires: Vec<bool> = nodes.iter().map(|n| n.requires_grad).collect();
        let sizes: Vec<usize> = nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Option<Vec<F>>> = vec![None; nodes.len()];
        if requires[loss.id] {
            grads[loss.id] = Some(vec![F::one()]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(bw) = &nodes[id].backward {
                let mut sink = GradSink { grads: &mut grads, requires: &requires, sizes: &sizes };
                bw(&g, &mut sink);
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Accumulates partial derivatives during the reverse sweep.
pub struct GradSink<'a, F> {
    grads: &'a mut [Option<Vec<F>>],
    requires: &'a [bool],
    sizes: &'a [usize],
}

impl<F: Scalar> GradSink<'_, F> {
    /// Mutable gradient buffer for `id`, or `None` when it needs no gradient.
    pub fn slot(&mut self, id: usize) -> Option<&mut [F]> {
        if !self.requires[id] {
            return None;
        }
        let size = self.sizes[id];
        Some(self.grads[id].get_or_insert_with(|| vec![F::zero(); size]).as_mut_slice())
    }

    pub fn wants(&self, id: usize) -> bool {
        self.requires[id]
    }

    pub fn add(&mut self, id: usize, g: &[F]) {
        if let Some(slot) = self.slot(id) {
            for (s, &v) in slot.iter_mut().zip(g) {
                *s = *s + v;
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the loss w.r.t. `var`; `None` when the loss does not depend on it.
    pub fn get(&self, var: Var<'_, F>) -> Option<Tensor<F>> {
        self.grads[var.id]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[var.id], g.clone()).expect("gradient shape"))
    }

    /// Like [`get`](Self::get) but returns zeros for unreachable inputs.
    pub fn wrt(&self, var: Var<'_, F>) -> Tensor<F> {
        self.get(var).unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }

    pub fn raw(&self, var: Var<'_, F>) -> Option<&[F]> {
        self.grads[var.id].as_deref()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Scalar> {
    pub(crate) tape: &'t Tape<F>,
    pub(crate) id: usize,
}

impl<F: Scalar> fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t, F: Scalar> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id).to_vec()
    }

    pub fn dims4(&self) -> Result<[usize; 4]> {
        let s = self.shape();
        <[usize; 4]>::try_from(s.as_slice())
            .map_err(|_| Error::Shape(format!("expected rank 4, got {s:?}")))
    }

    pub fn numel(&self) -> usize {
        self.tape.shape_of(self.id).iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    pub fn value(&self) -> Rc<Vec<F>> {
        self.tape.value_of(self.id)
    }

    pub fn to_tensor(&self) -> Tensor<F> {
        Tensor::new(&self.shape(), self.value().to_vec()).expect("node shape")
    }

    /// Value of a single-element node.
    pub fn item(&self) -> F {
        self.value()[0]
    }

    /// Same value, cut off from the graph: nothing upstream receives gradient through it.
    pub fn detach(&self) -> Var<'t, F> {
        let node = Node {
            value: self.value(),
            shape: self.shape(),
            requires_grad: false,
            backward: None,
        };
        self.tape.push_node(node)
    }

    pub fn same_tape(&self, other: &Var<'t, F>) -> bool {
        std::ptr::eq(self.tape, other.tape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let loss = x.sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0; 6]);
    }

    #[test]
    fn detach_blocks_upstream() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap());
        let y = x.mul_scalar(2.0).unwrap();
        let loss = y.detach().mul(y).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        // d/dx [stopgrad(2x) * 2x] = 2 * stopgrad(2x) = 4x
        assert_eq!(g.wrt(x).data(), &[4.0, 8.0, 12.0]);

        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap());
        let loss = x.exp().unwrap().detach().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::<f32>::new();
        let x = tape.var(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }
}
