//! Layer-level network engine with explicit forward and backward passes.
//!
//! Each layer caches what its backward pass needs during a [`Mode::Train`]
//! forward call. Backward consumes the cache, accumulates parameter
//! gradients into [`Param::grad`] and returns the gradient with respect to
//! the layer input.

mod act;
mod conv;
mod norm;
mod pool;

pub use act::{ActKind, Activation, Dropout};
pub use conv::{conv_output_size, Conv2d, ConvTranspose2d};
pub use norm::BatchNorm2d;
pub(crate) use pool::gather_with_indices;
pub use pool::{max_pool_with_indices, unpool_with_indices, PoolIndices};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Scalar, Tensor};

/// Forward pass mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates and backward caches.
    Train,
    /// Running statistics, no caches.
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train)
    }
}

/// A learnable tensor together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Whether weight decay applies (convolution kernels only).
    pub decay: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>, decay: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad, decay }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// A named slot exposed by [`Module::visit`].
pub enum Slot<'a, T> {
    Param(&'a mut Param<T>),
    /// Non-learnable state such as batch-norm running statistics.
    Buffer(&'a mut Tensor<T>),
}

pub trait Module<T: Scalar> {
    /// Visits every parameter and buffer with a stable dotted name.
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>));

    fn zero_grad(&mut self) {
        self.visit("", &mut |_, slot| {
            if let Slot::Param(p) = slot {
                p.zero_grad();
            }
        });
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, slot| {
            if let Slot::Param(p) = slot {
                n += p.value.len();
            }
        });
        n
    }

    /// Names and shapes of every learnable parameter, in visit order.
    fn param_shapes(&mut self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, slot| {
            if let Slot::Param(p) = slot {
                out.push((name.to_string(), p.value.shape().to_vec()));
            }
        });
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Zero-mean normal with `std = sqrt(2 / fan_in)`.
    HeNormal,
    /// Zero-mean normal with a fixed standard deviation.
    Normal(f64),
}

impl Init {
    pub fn sample<T: Scalar, R: Rng + ?Sized>(
        self,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Tensor<T> {
        let std = match self {
            Init::HeNormal => (2.0 / fan_in as f64).sqrt(),
            Init::Normal(s) => s,
        };
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
    }
}

/// Convolution followed by optional batch norm and an activation.
#[derive(Clone, Debug)]
pub struct ConvBlock<T> {
    pub conv: Conv2d<T>,
    pub bn: Option<BatchNorm2d<T>>,
    pub act: Activation<T>,
}

impl<T: Scalar> ConvBlock<T> {
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> crate::Result<Tensor<T>> {
        let mut y = self.conv.forward(x, mode)?;
        if let Some(bn) = &mut self.bn {
            y = bn.forward(&y, mode)?;
        }
        Ok(self.act.forward(y, mode))
    }

    pub fn backward(&mut self, dy: Tensor<T>, need_dx: bool) -> crate::Result<Option<Tensor<T>>> {
        let mut g = self.act.backward(dy)?;
        if let Some(bn) = &mut self.bn {
            g = bn.backward(g)?;
        }
        self.conv.backward(&g, need_dx)
    }
}

impl<T: Scalar> Module<T> for ConvBlock<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        if let Some(bn) = &mut self.bn {
            bn.visit(&join(prefix, "bn"), f);
        }
    }
}

/// Number of trainable parameters whose gradient or value is non-finite.
pub fn non_finite_params<T: Scalar>(m: &mut dyn Module<T>) -> usize {
    let mut bad = 0;
    m.visit("", &mut |_, slot| {
        if let Slot::Param(p) = slot {
            if !p.value.all_finite() {
                bad += 1;
            }
        }
    });
    bad
}
