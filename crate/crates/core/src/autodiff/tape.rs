use std::cell::{Ref, RefCell};
use std::fmt;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// What a backward rule sees when the tape replays it.
pub(crate) struct BackwardCtx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a [T],
    /// `needs[i]` is false when input `i` cannot reach a gradient leaf.
    pub needs: Vec<bool>,
}

type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Linear record of operations, replayed in reverse by [`Tape::backward`].
///
/// Node ids are assigned in creation order, which is already a topological
/// order, so the reverse sweep is a plain descending loop.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. Gradients are kept for it iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor<T>) -> Var<'_, T> {
        let requires_grad = tensor.requires_grad();
        let id = self.push_node(Node { value: tensor, inputs: Vec::new(), requires_grad, backward: None });
        Var { tape: self, id }
    }

    pub fn constant(&self, tensor: Tensor<T>) -> Var<'_, T> {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Leaf that receives gradients.
    pub fn variable(&self, tensor: Tensor<T>) -> Var<'_, T> {
        self.leaf(tensor.with_requires_grad(true))
    }

    fn push_node(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    pub(crate) fn value(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Records an op output. The backward rule is dropped when no input needs it.
    pub(crate) fn push<F>(&self, value: Tensor<T>, inputs: &[usize], backward: F) -> Var<'_, T>
    where
        F: Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> + 'static,
    {
        let requires_grad = inputs.iter().any(|&i| self.requires_grad(i));
        let backward: Option<BackwardFn<T>> = if requires_grad { Some(Box::new(backward)) } else { None };
        let id = self.push_node(Node { value, inputs: inputs.to_vec(), requires_grad, backward });
        Var { tape: self, id }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", nodes[loss.id].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(rule) = &node.backward {
                let ctx = BackwardCtx {
                    inputs: node.inputs.iter().map(|&i| &nodes[i].value).collect(),
                    output: &node.value,
                    grad: &g,
                    needs: node.inputs.iter().map(|&i| nodes[i].requires_grad).collect(),
                };
                let input_grads = rule(&ctx);
                if input_grads.len() != node.inputs.len() {
                    return Err(Error::Internal(format!(
                        "backward rule of node {id} returned {} gradients for {} inputs",
                        input_grads.len(),
                        node.inputs.len()
                    )));
                }
                for (&input, ig) in node.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !nodes[input].requires_grad {
                        continue;
                    }
                    match &mut grads[input] {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
            if node.inputs.is_empty() {
                grads[id] = Some(g);
            }
        }
        Ok(Grads { grads })
    }
}

/// Leaf gradients produced by a backward sweep.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Vec<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        let v = self.value();
        Tensor::new(v.shape().to_vec(), v.data().to_vec()).expect("shape already validated")
    }

    /// Value of a single-element node.
    pub fn item(&self) -> T {
        self.value().data()[0]
    }
}
