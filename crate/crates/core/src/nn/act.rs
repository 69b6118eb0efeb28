use rand::Rng;

use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActKind {
    Identity,
    Relu,
    LeakyRelu(f64),
    Tanh,
}

/// Element-wise activation with its backward cache.
#[derive(Clone, Debug)]
pub struct Activation<T> {
    pub kind: ActKind,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Activation<T> {
    pub fn new(kind: ActKind) -> Self {
        Self { kind, cache: None }
    }
    pub fn identity() -> Self {
        Self::new(ActKind::Identity)
    }
    pub fn relu() -> Self {
        Self::new(ActKind::Relu)
    }
    pub fn leaky(slope: f64) -> Self {
        Self::new(ActKind::LeakyRelu(slope))
    }
    pub fn tanh() -> Self {
        Self::new(ActKind::Tanh)
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let zero = T::zero();
        let y = match self.kind {
            ActKind::Identity => x,
            ActKind::Relu => x.map(|v| if v > zero { v } else { zero }),
            ActKind::LeakyRelu(s) => {
                let s = T::from_f64(s);
                x.map(|v| if v > zero { v } else { v * s })
            }
            ActKind::Tanh => x.map(|v| v.tanh()),
        };
        // ReLU variants can recover the sign pattern from the output; tanh
        // derives its derivative from the output directly.
        self.cache = (mode.is_train() && self.kind != ActKind::Identity).then(|| y.clone());
        y
    }

    pub fn backward(&mut self, mut dy: Tensor<T>) -> Result<Tensor<T>> {
        if self.kind == ActKind::Identity {
            return Ok(dy);
        }
        let y = self
            .cache
            .take()
            .ok_or_else(|| Error::Shape("activation backward without a training forward".into()))?;
        let zero = T::zero();
        match self.kind {
            ActKind::Identity => unreachable!(),
            ActKind::Relu => {
                for (g, &v) in dy.data_mut().iter_mut().zip(y.data()) {
                    if v <= zero {
                        *g = zero;
                    }
                }
            }
            ActKind::LeakyRelu(s) => {
                let s = T::from_f64(s);
                for (g, &v) in dy.data_mut().iter_mut().zip(y.data()) {
                    if v <= zero {
                        *g *= s;
                    }
                }
            }
            ActKind::Tanh => {
                for (g, &v) in dy.data_mut().iter_mut().zip(y.data()) {
                    *g *= T::one() - v * v;
                }
            }
        }
        Ok(dy)
    }
}

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
#[derive(Clone, Debug)]
pub struct Dropout<T> {
    pub rate: f64,
    mask: Option<Vec<T>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(rate: f64) -> Self {
        Self { rate, mask: None }
    }

    /// Applies dropout when `active`; otherwise the identity.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        mut x: Tensor<T>,
        active: bool,
        mode: Mode,
        rng: &mut R,
    ) -> Tensor<T> {
        if !active || self.rate <= 0.0 {
            self.mask = None;
            return x;
        }
        let keep = T::from_f64(1.0 / (1.0 - self.rate));
        let mask: Vec<T> = (0..x.len())
            .map(|_| {
                if rng.random::<f64>() < self.rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        for (v, &m) in x.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.mask = mode.is_train().then_some(mask);
        x
    }

    pub fn backward(&mut self, mut dy: Tensor<T>) -> Tensor<T> {
        if let Some(mask) = self.mask.take() {
            for (g, &m) in dy.data_mut().iter_mut().zip(&mask) {
                *g *= m;
            }
        }
        dy
    }
}
