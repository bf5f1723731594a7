//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! A [`Tape`] records one forward computation; [`Var`]s are handles into it.
//! Operations append nodes in execution order, so recording order is a
//! topological order and [`Var::backward`] propagates gradients by a single
//! reverse sweep, accumulating over fan-out by summation. One tape serves
//! one training step and stays on one thread; inference can use a
//! [`Tape::no_grad`] tape, which skips all backward bookkeeping.

pub mod gradcheck;
pub mod ops;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use gradcheck::{gradcheck, GradCheckConfig, GradCheckReport};

/// Arguments handed to an operation's backward closure.
pub struct BackArgs<'a, T: Scalar> {
    /// Gradient of the root with respect to this node's output.
    pub grad_out: &'a Tensor<T>,
    /// Forward values of the node's inputs, in recording order.
    pub inputs: Vec<&'a Tensor<T>>,
    /// Forward value of the node's output.
    pub output: &'a Tensor<T>,
    /// Which inputs actually need a gradient; closures may skip the rest.
    pub needs: &'a [bool],
}

type BackFn<T> = Box<dyn Fn(&BackArgs<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    inputs: Vec<usize>,
    requires_grad: bool,
    back: Option<BackFn<T>>,
}

struct TapeInner<T: Scalar> {
    values: Vec<Tensor<T>>,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    grad_enabled: bool,
}

/// Recording tape for one forward/backward pass.
pub struct Tape<T: Scalar> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// Tape that records values only; backward is unavailable but forward
    /// evaluation is cheaper. Used for inference and finite differences.
    pub fn no_grad() -> Self {
        Self::with_grad(false)
    }

    fn with_grad(grad_enabled: bool) -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                values: Vec::new(),
                nodes: Vec::new(),
                grads: Vec::new(),
                grad_enabled,
            })),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.inner.borrow().grad_enabled
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, node: Node<T>) -> Var<T> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.values.push(value);
        inner.nodes.push(node);
        inner.grads.push(None);
        Var {
            tape: self.clone(),
            id,
        }
    }

    /// Differentiable input: receives a gradient during backward.
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        let requires_grad = self.grad_enabled();
        self.push(
            value,
            Node {
                inputs: Vec::new(),
                requires_grad,
                back: None,
            },
        )
    }

    /// Non-differentiable input: data, masks, frozen weights.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        self.push(
            value,
            Node {
                inputs: Vec::new(),
                requires_grad: false,
                back: None,
            },
        )
    }

    /// Record an operation node. `back` is only built when some input needs
    /// gradients and the tape has them enabled.
    pub(crate) fn record(
        &self,
        inputs: &[&Var<T>],
        value: Tensor<T>,
        back: impl FnOnce() -> BackFn<T>,
    ) -> Var<T> {
        let same_tape = inputs.iter().all(|v| Rc::ptr_eq(&v.tape.inner, &self.inner));
        assert!(same_tape, "operation mixes variables from different tapes");
        let requires_grad = {
            let inner = self.inner.borrow();
            inner.grad_enabled
                && inputs
                    .iter()
                    .any(|v| inner.nodes[v.id].requires_grad)
        };
        let node = Node {
            inputs: inputs.iter().map(|v| v.id).collect(),
            requires_grad,
            back: requires_grad.then(back),
        };
        self.push(value, node)
    }
}

/// Handle to one tensor value on a tape.
pub struct Var<T: Scalar> {
    tape: Tape<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var {
            tape: self.tape.clone(),
            id: self.id,
        }
    }
}

impl<T: Scalar> Var<T> {
    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Clone of the forward value.
    pub fn value(&self) -> Tensor<T> {
        self.tape.inner.borrow().values[self.id].clone()
    }

    /// Borrow the forward value without cloning.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.tape.inner.borrow().values[self.id])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    pub fn numel(&self) -> usize {
        self.with_value(|v| v.numel())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Gradient accumulated by the last [`Var::backward`] call, if any.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.inner.borrow().grads[self.id].clone()
    }

    /// Same value as a fresh constant: gradients stop here.
    pub fn detach(&self) -> Var<T> {
        self.tape.constant(self.value())
    }

    /// Reverse sweep seeding `d(self)/d(self) = 1`. `self` must be scalar.
    ///
    /// Afterwards every reachable variable that requires gradients answers
    /// [`Var::grad`] with `d(self)/d(var)`, summed over all paths.
    pub fn backward(&self) -> Result<()> {
        let mut inner = self.tape.inner.borrow_mut();
        if !inner.grad_enabled {
            return Err(Error::Contract(
                "backward on a no-grad tape".into(),
            ));
        }
        if inner.values[self.id].numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                inner.values[self.id].shape()
            )));
        }
        let TapeInner {
            values,
            nodes,
            grads,
            ..
        } = &mut *inner;
        for g in grads.iter_mut() {
            *g = None;
        }
        grads[self.id] = Some(Tensor::scalar(T::ONE));
        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            if node.back.is_none() || grads[id].is_none() {
                continue;
            }
            let grad_out = grads[id].clone().expect("checked above");
            let back = node.back.as_ref().expect("checked above");
            let input_vals: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &values[i]).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| nodes[i].requires_grad)
                .collect();
            let args = BackArgs {
                grad_out: &grad_out,
                inputs: input_vals,
                output: &values[id],
                needs: &needs,
            };
            let input_grads = back(&args);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((&input_id, maybe_grad), need) in
                node.inputs.iter().zip(input_grads).zip(needs)
            {
                let Some(g) = maybe_grad else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(
                    g.shape(),
                    values[input_id].shape(),
                    "gradient shape mismatch on node {input_id}"
                );
                match &mut grads[input_id] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}
