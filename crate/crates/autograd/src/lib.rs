//! Tape-based reverse-mode automatic differentiation over `ndarray`.
//!
//! Every operation appends an eagerly-evaluated node to a [`Tape`]. Calling
//! [`Tape::grad`] walks the tape backwards and builds the gradients *as new
//! tape nodes*, so a gradient is itself differentiable. This is what makes
//! objectives that contain an input-gradient term (e.g. a critic gradient
//! penalty) trainable with exact derivatives.
//!
//! The engine is deliberately small: `f64` elements, dynamic-rank arrays,
//! and only the operations the image models in this workspace need. Image
//! tensors use `[batch, channel, height, width]` layout.

use ndarray::{ArrayD, IxDyn};

mod conv;
mod ops;
mod resample;

pub use conv::{conv_out_dim, receptive_field};

/// Handle to a value on a [`Tape`]. Copyable; only meaningful together with
/// the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f64),
    AddScalar,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Abs,
    Sqrt,
    Recip,
    Conv2d { stride: usize, pad: usize },
    ConvIGrad { stride: usize, pad: usize },
    ConvWGrad { stride: usize, pad: usize },
    AddBias,
    MulBias,
    SumBhw,
    BroadcastC,
    SumAll,
    BroadcastAll,
    SumChw,
    BroadcastChw,
    SumHw,
    BroadcastHw,
    SumC,
    RepeatC,
    MulC1,
    ConcatC { sizes: Vec<usize> },
    SliceC { from: usize, to: usize },
    PadC { before: usize, after: usize },
    UpNearest2,
    DownSum2,
    ResizeBilinear,
    ResizeBilinearT,
}

pub(crate) struct Node {
    value: ArrayD<f64>,
    inputs: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Append-only computation record. Node ids are a topological order, so a
/// single reverse sweep suffices for backpropagation.
#[derive(Default)]
pub struct Tape {
    nodes: std::cell::RefCell<Vec<Node>>,
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

    fn push(&self, value: ArrayD<f64>, inputs: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            inputs,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn any_needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.needs(i))
    }

    /// Clone out the value of a variable.
    pub fn value(&self, v: Var) -> ArrayD<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Read a scalar (single-element) variable.
    pub fn scalar(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar() on non-scalar variable");
        *val.iter().next().unwrap()
    }

    /// Run `f` on the raw value without cloning.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&ArrayD<f64>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    /// Insert a differentiable leaf (e.g. a parameter block).
    pub fn leaf_grad(&self, value: ArrayD<f64>) -> Var {
        self.push(value, vec![], Op::Leaf, true)
    }

    /// Insert a constant leaf (data, masks, frozen inputs).
    pub fn leaf_nograd(&self, value: ArrayD<f64>) -> Var {
        self.push(value, vec![], Op::Leaf, false)
    }

    pub fn leaf(&self, value: ArrayD<f64>, requires_grad: bool) -> Var {
        if requires_grad {
            self.leaf_grad(value)
        } else {
            self.leaf_nograd(value)
        }
    }

    pub fn scalar_leaf(&self, value: f64) -> Var {
        self.leaf_nograd(ArrayD::from_elem(IxDyn(&[1]), value))
    }

    /// Reverse-mode gradients of a scalar `output` with respect to `wrt`.
    ///
    /// The returned gradients are tape variables built from differentiable
    /// operations, so they can participate in further losses and be
    /// differentiated again. Entries are `None` when `output` does not depend
    /// on the corresponding variable.
    pub fn grad(&self, output: Var, wrt: &[Var]) -> Vec<Option<Var>> {
        {
            let nodes = self.nodes.borrow();
            assert_eq!(
                nodes[output.0].value.len(),
                1,
                "grad() expects a scalar output"
            );
        }
        let horizon = output.0 + 1;
        let mut adjoint: Vec<Option<Var>> = vec![None; horizon];
        let seed_shape = self.shape(output);
        adjoint[output.0] = Some(self.leaf_nograd(ArrayD::ones(IxDyn(&seed_shape))));

        for id in (0..horizon).rev() {
            let Some(g) = adjoint[id] else { continue };
            let (op, inputs, needs_grad) = {
                let nodes = self.nodes.borrow();
                let n = &nodes[id];
                (n.op.clone(), n.inputs.clone(), n.needs_grad)
            };
            if !needs_grad || inputs.is_empty() {
                continue;
            }
            let want: Vec<bool> = inputs.iter().map(|&i| self.needs(i)).collect();
            let contribs = self.vjp(&op, id, g, &inputs, &want);
            debug_assert_eq!(contribs.len(), inputs.len());
            for (k, contrib) in contribs.into_iter().enumerate() {
                if let Some(c) = contrib {
                    let slot = inputs[k];
                    adjoint[slot] = Some(match adjoint[slot] {
                        None => c,
                        Some(existing) => self.add(existing, c),
                    });
                }
            }
        }

        wrt.iter()
            .map(|v| if v.0 < horizon { adjoint[v.0] } else { None })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn grad_of_simple_product() {
        let t = Tape::new();
        let a = t.leaf_grad(ArrayD::from_elem(IxDyn(&[2]), 3.0));
        let b = t.leaf_grad(ArrayD::from_elem(IxDyn(&[2]), 4.0));
        let y = t.sum_all(t.mul(a, b));
        let g = t.grad(y, &[a, b]);
        assert_eq!(t.value(g[0].unwrap()), ArrayD::from_elem(IxDyn(&[2]), 4.0));
        assert_eq!(t.value(g[1].unwrap()), ArrayD::from_elem(IxDyn(&[2]), 3.0));
    }

    #[test]
    fn gradient_is_differentiable_again() {
        // y = x^3, dy/dx = 3x^2, d2y/dx2 = 6x
        let t = Tape::new();
        let x = t.leaf_grad(ArrayD::from_elem(IxDyn(&[1]), 2.0));
        let y = t.mul(t.mul(x, x), x);
        let dy = t.grad(t.sum_all(y), &[x])[0].unwrap();
        assert!((t.scalar(dy) - 12.0).abs() < 1e-12);
        let d2y = t.grad(t.sum_all(dy), &[x])[0].unwrap();
        assert!((t.scalar(d2y) - 12.0).abs() < 1e-12);
    }

    #[test]
    fn constant_leaf_gets_no_gradient() {
        let t = Tape::new();
        let a = t.leaf_grad(ArrayD::from_elem(IxDyn(&[3]), 1.0));
        let c = t.leaf_nograd(ArrayD::from_elem(IxDyn(&[3]), 5.0));
        let y = t.sum_all(t.mul(a, c));
        let g = t.grad(y, &[a, c]);
        assert!(g[0].is_some());
        assert!(g[1].is_none());
    }
}
