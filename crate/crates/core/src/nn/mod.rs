//! Hand-written layers with explicit forward caches and backward passes.
//!
//! Every layer's `forward` borrows the parameters immutably and returns the
//! activations needed by `backward`. Gradients accumulate into a second
//! instance of the same layer (see [`Module::zeros_like`]), which lets the
//! optimizer pair parameters with their gradients by traversal order.

mod conv;
mod norm;
mod ops;

pub use conv::Conv;
pub use norm::{GroupNorm, NormCache};
pub use ops::{
    global_average_pool, global_average_pool_backward, max_pool2, max_pool2_backward, relu_backward,
    relu_inplace, sigmoid, sigmoid_backward, upsample_nearest2, upsample_nearest2_backward, PoolCache,
};

use crate::scalar::Scalar;

/// A named-by-position parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Param {
            shape,
            data: vec![T::zero(); len],
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let len = shape.iter().product();
        Param {
            shape,
            data: vec![value; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Parameter traversal shared by the backbone, the threshold head and the
/// optimizer. Traversal order is fixed and defines the checkpoint layout.
pub trait Module<T: Scalar>: Clone {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>));

    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| out.push((name, p)));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }

    /// A structurally identical copy with every parameter set to zero,
    /// used as a gradient accumulator.
    fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.visit_mut("", &mut |_, p| p.data.fill(T::zero()));
        g
    }

    fn fill_zero(&mut self) {
        self.visit_mut("", &mut |_, p| p.data.fill(T::zero()));
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
