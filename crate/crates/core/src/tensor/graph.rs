//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends one node to the tape, so the tape order is a
//! topological order and the backward sweep simply walks it in reverse.

use crate::error::{NtaaError, Result};

use super::{Element, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward closure may look at.
pub struct BackCtx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a [T],
    /// Whether each input wants a gradient; closures may skip work for `false`.
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    tag: &'static str,
    value: Tensor<T>,
    inputs: Vec<usize>,
    needs_grad: bool,
    backward: Option<BackwardFn<T>>,
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Result of one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. It receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, mut t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad();
        t.zero_grad();
        self.nodes.push(Node {
            tag: "leaf",
            value: t,
            inputs: Vec::new(),
            needs_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    /// Records a leaf that does receive a gradient.
    pub fn param(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(true);
        self.leaf(t)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn tag(&self, v: Var) -> &'static str {
        self.nodes[v.0].tag
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn push(
        &mut self,
        tag: &'static str,
        value: Tensor<T>,
        inputs: &[Var],
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(NtaaError::NonFinite(format!("forward output of {tag}")));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            tag,
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            needs_grad,
            backward: needs_grad.then_some(backward),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from the scalar `loss`. Gradients for leaves that do not
    /// require one are never materialised.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(NtaaError::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(f) = node.backward.as_ref() else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let ctx = BackCtx {
                inputs: node.inputs.iter().map(|&i| &self.nodes[i].value).collect(),
                output: &node.value,
                grad: &g,
                needs: node.inputs.iter().map(|&i| self.nodes[i].needs_grad).collect(),
            };
            let input_grads = f(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.tag);
            for (&input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[input].needs_grad {
                    continue;
                }
                if ig.iter().any(|v| !v.is_finite()) {
                    return Err(NtaaError::NonFinite(format!(
                        "gradient flowing out of {}",
                        node.tag
                    )));
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        // Non-leaf gradients were consumed above; only leaf slots survive.
        Ok(Gradients { grads })
    }
}
