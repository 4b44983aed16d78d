//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Var`] is a reference-counted graph node. Nodes only keep their inputs
//! when at least one input requires a gradient, so inference-only graphs free
//! intermediate activations as soon as they go out of scope.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Gradient rule of a differentiable operation.
pub(crate) trait Backward<T: Scalar> {
    /// Gradients for each input given the gradient of the output.
    /// `None` entries mean "no contribution".
    fn backward(&self, grad: &Tensor<T>, inputs: &[Var<T>]) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: RefCell<Option<Tensor<T>>>,
    inputs: Vec<Var<T>>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    /// A leaf whose gradient is accumulated by [`Var::backward`].
    pub fn param(value: Tensor<T>) -> Self {
        Self::leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false)
    }

    pub fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            value,
            grad: RefCell::new(None),
            inputs: Vec::new(),
            op: None,
            requires_grad,
        }))
    }

    pub(crate) fn from_op(
        value: Tensor<T>,
        inputs: Vec<Var<T>>,
        op: impl Backward<T> + 'static,
    ) -> Self {
        let requires_grad = inputs.iter().any(Var::requires_grad);
        let (inputs, op): (_, Option<Box<dyn Backward<T>>>) = if requires_grad {
            (inputs, Some(Box::new(op)))
        } else {
            (Vec::new(), None)
        };
        Var(Rc::new(Node {
            value,
            grad: RefCell::new(None),
            inputs,
            op,
            requires_grad,
        }))
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Accumulated gradient, if any has been propagated to this node.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.0.grad.borrow().clone()
    }

    fn id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    fn accumulate(&self, g: Tensor<T>) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc
                .add_assign(&g)
                .expect("gradient shape always matches its node"),
            None => *slot = Some(g),
        }
    }

    /// Back-propagates from a scalar output (seed gradient 1).
    pub fn backward(&self) -> Result<()> {
        if self.0.value.len() != 1 {
            return Err(Error::Structural(format!(
                "backward() needs a scalar output, got shape {:?}",
                self.shape()
            )));
        }
        self.backward_with(Tensor::full(self.shape(), T::one()))
    }

    /// Back-propagates an explicit output gradient.
    pub fn backward_with(&self, seed: Tensor<T>) -> Result<()> {
        self.0.value.expect_same_shape(&seed)?;
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topological_order();
        self.accumulate(seed);
        for node in order.iter().rev() {
            let Some(op) = node.0.op.as_ref() else {
                continue;
            };
            // Interior gradients are consumed here; leaves keep theirs.
            let Some(grad) = node.0.grad.borrow_mut().take() else {
                continue;
            };
            let grads = op.backward(&grad, &node.0.inputs);
            for (input, g) in node.0.inputs.iter().zip(grads) {
                if let Some(g) = g {
                    if input.requires_grad() {
                        input.accumulate(g);
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes reachable from `self`, inputs before consumers.
    fn topological_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Var<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !seen.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            for input in &node.0.inputs {
                if input.requires_grad() && !seen.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Square;
    impl Backward<f64> for Square {
        fn backward(&self, grad: &Tensor<f64>, inputs: &[Var<f64>]) -> Vec<Option<Tensor<f64>>> {
            let x = inputs[0].value();
            vec![Some(x.zip_map(grad, |a, g| 2.0 * a * g).unwrap())]
        }
    }

    fn square(x: &Var<f64>) -> Var<f64> {
        Var::from_op(x.value().map(|v| v * v), vec![x.clone()], Square)
    }

    struct SumAll;
    impl Backward<f64> for SumAll {
        fn backward(&self, grad: &Tensor<f64>, inputs: &[Var<f64>]) -> Vec<Option<Tensor<f64>>> {
            let g = grad.data()[0];
            vec![Some(Tensor::full(inputs[0].shape(), g))]
        }
    }

    fn sum(x: &Var<f64>) -> Var<f64> {
        Var::from_op(Tensor::scalar(x.value().sum()), vec![x.clone()], SumAll)
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        let x = Var::param(Tensor::from_vec(&[2], vec![1.5, -2.0]).unwrap());
        let a = square(&x);
        // x used twice: d/dx (sum(x^2) + sum(x^2)) = 4x
        let s1 = sum(&a);
        let s2 = sum(&a);
        let total = Var::from_op(
            Tensor::scalar(s1.value().data()[0] + s2.value().data()[0]),
            vec![s1, s2],
            AddScalars,
        );
        total.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[6.0, -8.0]);
    }

    struct AddScalars;
    impl Backward<f64> for AddScalars {
        fn backward(&self, grad: &Tensor<f64>, _: &[Var<f64>]) -> Vec<Option<Tensor<f64>>> {
            vec![Some(grad.clone()), Some(grad.clone())]
        }
    }

    #[test]
    fn constants_do_not_track_inputs() {
        let x = Var::constant(Tensor::from_vec(&[1], vec![3.0]).unwrap());
        let y = square(&x);
        assert!(!y.requires_grad());
        assert!(y.0.inputs.is_empty());
        y.backward().unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let x = Var::param(Tensor::<f64>::zeros(&[3]));
        assert!(square(&x).backward().is_err());
    }
}
