//! Named parameter collections.
//!
//! Every learnable block stores its tensors in a plain struct and implements
//! [`Params`]; gradients use the same struct type, zeroed.

use rand::Rng;

use crate::numerics::Tensor;

/// Suffix marking tensors the optimizer never updates.
pub const FROZEN_SUFFIX: &str = "offset_bias";

pub trait Params {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor));

    /// A copy with every tensor zeroed, suitable as a gradient accumulator.
    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, t| t.fill(0.0));
        z
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |n, t| out.push((n, t)));
        out
    }

    fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}

pub fn is_frozen(name: &str) -> bool {
    name.ends_with(FROZEN_SUFFIX)
}

impl<T: Params> Params for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&format!("{prefix}{i}."), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&format!("{prefix}{i}."), f);
        }
    }
}

/// Implements [`Params`] for a struct from its tensor fields and nested
/// parameter fields.
#[macro_export]
macro_rules! impl_params {
    ($ty:ty { $($t:ident),* $(,)? } $(nested { $($n:ident),* $(,)? })?) => {
        impl $crate::params::Params for $ty {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a $crate::numerics::Tensor)) {
                $( f(format!("{prefix}{}", stringify!($t)), &self.$t); )*
                $($( $crate::params::Params::visit(&self.$n, &format!("{prefix}{}.", stringify!($n)), f); )*)?
            }
            fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut $crate::numerics::Tensor)) {
                $( f(format!("{prefix}{}", stringify!($t)), &mut self.$t); )*
                $($( $crate::params::Params::visit_mut(&mut self.$n, &format!("{prefix}{}.", stringify!($n)), f); )*)?
            }
        }
    };
}

/// Glorot-uniform matrix `[fan_out, fan_in]`.
pub fn glorot<R: Rng + ?Sized>(fan_out: usize, fan_in: usize, rng: &mut R) -> Tensor {
    let scale = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(&[fan_out, fan_in], scale, rng)
}

/// Learnable affine layer normalization over the channel axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn new(dim: usize) -> Self {
        LayerNormParams { gamma: Tensor::filled(&[dim], 1.0), beta: Tensor::zeros(&[dim]) }
    }
}

impl_params!(LayerNormParams { gamma, beta });
