use super::{join, Mode, Module, Param, Slot};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-channel batch normalisation over `(N, H, W)`.
///
/// Training uses biased batch variance for normalisation and folds the
/// unbiased variance into the running estimate with `momentum`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache<T>>,
}

#[derive(Clone, Debug)]
struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self::with_gamma(Tensor::full(&[channels], T::one()))
    }

    pub fn with_gamma(gamma: Tensor<T>) -> Self {
        let channels = gamma.len();
        Self {
            channels,
            gamma: Param::new(gamma, false),
            beta: Param::new(Tensor::zeros(&[channels]), false),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!(
                "batch norm expects {} channels, got {c}",
                self.channels
            )));
        }
        let plane = h * w;
        let count = n * plane;
        let eps = T::from_f64(self.eps);
        let mut out = Tensor::zeros(x.shape());
        match mode {
            Mode::Eval => {
                for ch in 0..c {
                    let inv = T::one() / (self.running_var.data()[ch] + eps).sqrt();
                    let mean = self.running_mean.data()[ch];
                    let (g, b) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
                    for i in 0..n {
                        let off = (i * c + ch) * plane;
                        for (o, &v) in out.data_mut()[off..off + plane]
                            .iter_mut()
                            .zip(&x.data()[off..off + plane])
                        {
                            *o = (v - mean) * inv * g + b;
                        }
                    }
                }
                self.cache = None;
            }
            Mode::Train => {
                let mut xhat = Tensor::zeros(x.shape());
                let mut inv_std = Vec::with_capacity(c);
                let m = T::from_f64(self.momentum);
                for ch in 0..c {
                    let mut sum = T::zero();
                    for i in 0..n {
                        let off = (i * c + ch) * plane;
                        for &v in &x.data()[off..off + plane] {
                            sum += v;
                        }
                    }
                    let mean = sum / T::from_f64(count as f64);
                    let mut sq = T::zero();
                    for i in 0..n {
                        let off = (i * c + ch) * plane;
                        for &v in &x.data()[off..off + plane] {
                            let d = v - mean;
                            sq += d * d;
                        }
                    }
                    let var = sq / T::from_f64(count as f64);
                    let inv = T::one() / (var + eps).sqrt();
                    inv_std.push(inv);
                    let (g, b) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
                    for i in 0..n {
                        let off = (i * c + ch) * plane;
                        for k in off..off + plane {
                            let xh = (x.data()[k] - mean) * inv;
                            xhat.data_mut()[k] = xh;
                            out.data_mut()[k] = xh * g + b;
                        }
                    }
                    let unbiased = if count > 1 {
                        sq / T::from_f64((count - 1) as f64)
                    } else {
                        var
                    };
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = (T::one() - m) * *rm + m * mean;
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = (T::one() - m) * *rv + m * unbiased;
                }
                self.cache = Some(BnCache { xhat, inv_std });
            }
        }
        Ok(out)
    }

    pub fn backward(&mut self, dy: Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Shape("batch norm backward without a training forward".into()))?;
        let (n, c, h, w) = dy.dims4()?;
        if cache.xhat.shape() != dy.shape() {
            return Err(Error::Shape(format!(
                "batch norm backward got gradient {:?}",
                dy.shape()
            )));
        }
        let plane = h * w;
        let count = T::from_f64((n * plane) as f64);
        let mut dx = dy;
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for i in 0..n {
                let off = (i * c + ch) * plane;
                for k in off..off + plane {
                    let g = dx.data()[k];
                    sum_dy += g;
                    sum_dy_xhat += g * cache.xhat.data()[k];
                }
            }
            self.gamma.grad.data_mut()[ch] += sum_dy_xhat;
            self.beta.grad.data_mut()[ch] += sum_dy;
            let scale = self.gamma.value.data()[ch] * cache.inv_std[ch] / count;
            for i in 0..n {
                let off = (i * c + ch) * plane;
                for k in off..off + plane {
                    let g = dx.data()[k];
                    let xh = cache.xhat.data()[k];
                    dx.data_mut()[k] = scale * (count * g - sum_dy - xh * sum_dy_xhat);
                }
            }
        }
        Ok(dx)
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        f(&join(prefix, "gamma"), Slot::Param(&mut self.gamma));
        f(&join(prefix, "beta"), Slot::Param(&mut self.beta));
        f(&join(prefix, "running_mean"), Slot::Buffer(&mut self.running_mean));
        f(&join(prefix, "running_var"), Slot::Buffer(&mut self.running_var));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_output_is_standardised_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Init::Normal(3.0).sample::<f64, _>(&[4, 2, 3, 3], 1, &mut rng);
        let mut bn = BatchNorm2d::<f64>::new(2);
        let y = bn.forward(&x, Mode::Train).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|i| y.data()[(i * 2 + ch) * 9..(i * 2 + ch) * 9 + 9].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        // running stats moved 10% of the way toward batch stats
        assert!(bn.running_mean.data().iter().all(|v| v.abs() < 3.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Init::Normal(1.0).sample::<f64, _>(&[3, 2, 2, 2], 1, &mut rng);
        let r = Init::Normal(1.0).sample::<f64, _>(&[3, 2, 2, 2], 1, &mut rng);
        let mut bn = BatchNorm2d::<f64>::with_gamma(Tensor::from_vec(&[2], vec![1.5, 0.7]).unwrap());
        bn.beta.value = Tensor::from_vec(&[2], vec![0.1, -0.2]).unwrap();
        let _ = bn.forward(&x, Mode::Train).unwrap();
        let dx = bn.backward(r.clone()).unwrap();
        let loss = |x: &Tensor<f64>| -> f64 {
            let mut b = bn.clone();
            let y = b.forward(x, Mode::Train).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let num = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((num - dx.data()[idx]).abs() < 1e-6, "{idx}: {num} vs {}", dx.data()[idx]);
        }
    }
}
