//! Conditional image-to-depth translation: a U-Net generator, a patch
//! discriminator over stacked RGB and depth, and the adversarial and L1
//! objectives.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    conv_output_size, join, Activation, BatchNorm2d, Conv2d, ConvBlock, ConvTranspose2d, Dropout, Init,
    Mode, Module, Slot,
};
use crate::tensor::{Scalar, Tensor};

const GAN_INIT: Init = Init::Normal(0.02);
const LEAK: f64 = 0.2;

fn scaled(width: usize, scale: f64) -> usize {
    ((width as f64 * scale).round() as usize).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Dropout in the innermost decoder levels whenever noise is requested.
    Dropout,
    /// Never stochastic.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub depth_levels: usize,
    pub base_width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub noise_mode: NoiseMode,
    pub dropout_rate: f64,
    /// Number of innermost decoder levels carrying dropout.
    pub dropout_levels: usize,
    pub scale_factor: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            out_channels: 1,
            depth_levels: 8,
            base_width: 64,
            kernel: 4,
            stride: 2,
            noise_mode: NoiseMode::Dropout,
            dropout_rate: 0.5,
            dropout_levels: 3,
            scale_factor: 1.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("generator channel counts must be positive".into()));
        }
        if self.depth_levels < 2 {
            return Err(Error::Config(format!(
                "generator needs >=2 levels, got {}",
                self.depth_levels
            )));
        }
        if self.kernel != 4 || self.stride != 2 {
            return Err(Error::Config(format!(
                "generator supports 4x4 stride-2 convolutions only, got {}x{} stride {}",
                self.kernel, self.kernel, self.stride
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(self.scale_factor > 0.0 && self.scale_factor <= 1.0) {
            return Err(Error::Config(format!("scale factor {} outside (0, 1]", self.scale_factor)));
        }
        Ok(())
    }

    /// Encoder widths from the outermost level inward.
    pub fn level_widths(&self) -> Vec<usize> {
        (0..self.depth_levels)
            .map(|i| {
                let w = (self.base_width << i.min(3)).min(8 * self.base_width);
                scaled(w, self.scale_factor)
            })
            .collect()
    }

    pub fn size_multiple(&self) -> usize {
        1 << self.depth_levels
    }
}

#[derive(Clone, Debug)]
struct UpBlock<T> {
    conv: ConvTranspose2d<T>,
    bn: Option<BatchNorm2d<T>>,
    act: Activation<T>,
    dropout: Option<Dropout<T>>,
}

impl<T: Scalar> Module<T> for UpBlock<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        if let Some(bn) = &mut self.bn {
            bn.visit(&join(prefix, "bn"), f);
        }
    }
}

/// U-Net generator mapping RGB to a tanh-bounded depth map.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    config: GeneratorConfig,
    down: Vec<ConvBlock<T>>,
    /// Decoder blocks, innermost first.
    up: Vec<UpBlock<T>>,
    rng: ChaCha8Rng,
    skip_channels: Vec<usize>,
}

pub fn build_generator<T: Scalar>(config: &GeneratorConfig, seed: u64) -> Result<Generator<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = config.level_widths();
    let l = config.depth_levels;
    let (k, s) = (config.kernel, config.stride);

    let mut down = Vec::with_capacity(l);
    for i in 0..l {
        let cin = if i == 0 { config.in_channels } else { widths[i - 1] };
        let plain = i == 0 || i == l - 1;
        down.push(ConvBlock {
            conv: Conv2d::new(cin, widths[i], k, s, 1, plain, GAN_INIT, &mut rng),
            bn: (!plain).then(|| BatchNorm2d::with_gamma(gamma_init(widths[i], &mut rng))),
            act: if i == l - 1 { Activation::relu() } else { Activation::leaky(LEAK) },
        });
    }

    let mut up = Vec::with_capacity(l);
    for j in (0..l).rev() {
        let cin = if j == l - 1 { widths[j] } else { 2 * widths[j] };
        if j == 0 {
            up.push(UpBlock {
                conv: ConvTranspose2d::new(cin, config.out_channels, k, s, 1, true, GAN_INIT, &mut rng),
                bn: None,
                act: Activation::tanh(),
                dropout: None,
            });
        } else {
            let depth_from_inner = l - 1 - j;
            let noisy = config.noise_mode == NoiseMode::Dropout && depth_from_inner < config.dropout_levels;
            up.push(UpBlock {
                conv: ConvTranspose2d::new(cin, widths[j - 1], k, s, 1, false, GAN_INIT, &mut rng),
                bn: Some(BatchNorm2d::with_gamma(gamma_init(widths[j - 1], &mut rng))),
                act: Activation::relu(),
                dropout: noisy.then(|| Dropout::new(config.dropout_rate)),
            });
        }
    }
    Ok(Generator {
        config: config.clone(),
        down,
        up,
        rng: ChaCha8Rng::seed_from_u64(crate::util::derive_seed(seed, "generator-noise")),
        skip_channels: Vec::new(),
    })
}

/// Batch-norm scale drawn from N(1, 0.02).
fn gamma_init<T: Scalar>(c: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let mut g = Init::Normal(0.02).sample::<T, _>(&[c], 1, rng);
    g.data_mut().iter_mut().for_each(|v| *v += T::one());
    g
}

impl<T: Scalar> Generator<T> {
    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Reseeds the dropout stream.
    pub fn reseed_noise(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Spatial size of the innermost feature map for an `h x w` input.
    pub fn bottleneck_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let m = self.config.size_multiple();
        (h / m, w / m)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "generator expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let m = self.config.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!("input {h}x{w} is not divisible by {m}")));
        }
        Ok(())
    }

    /// Depth map `[B, out, H, W]` in `[-1, 1]`. With `noise_on` false the
    /// output is a deterministic function of the input and weights.
    pub fn forward(&mut self, rgb: &Tensor<T>, noise_on: bool, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(rgb)?;
        let mut skips = Vec::with_capacity(self.down.len());
        let mut h = rgb.clone();
        for b in &mut self.down {
            h = b.forward(&h, mode)?;
            skips.push(h.clone());
        }
        skips.pop();
        self.skip_channels.clear();
        let last = self.up.len() - 1;
        for (j, b) in self.up.iter_mut().enumerate() {
            let mut y = b.conv.forward(&h, mode)?;
            if let Some(bn) = &mut b.bn {
                y = bn.forward(&y, mode)?;
            }
            y = b.act.forward(y, mode);
            if let Some(d) = &mut b.dropout {
                y = d.forward(y, noise_on, mode, &mut self.rng);
            }
            h = if j < last {
                let skip = skips.pop().expect("one skip per inner level");
                self.skip_channels.push(skip.shape()[1]);
                Tensor::concat_channels(&y, &skip)?
            } else {
                y
            };
        }
        Ok(h)
    }

    /// Accumulates parameter gradients for the last training forward pass.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<()> {
        if self.skip_channels.len() + 1 != self.up.len() {
            return Err(Error::Shape("backward without a forward pass".into()));
        }
        let last = self.up.len() - 1;
        let mut skip_grads: Vec<Tensor<T>> = Vec::with_capacity(last);
        let mut g = dy.clone();
        for (j, b) in self.up.iter_mut().enumerate().rev() {
            if j < last {
                let skip_c = self.skip_channels[j];
                let c = g.shape()[1];
                let (gy, gs) = g.split_channels(c - skip_c)?;
                skip_grads.push(gs);
                g = gy;
            }
            if let Some(d) = &mut b.dropout {
                g = d.backward(g);
            }
            g = b.act.backward(g)?;
            if let Some(bn) = &mut b.bn {
                g = bn.backward(g)?;
            }
            g = b.conv.backward(&g, true)?.expect("input gradient requested");
        }
        // skip_grads[k] belongs to the encoder level feeding up block `last - 1 - k`
        let l = self.down.len();
        for (i, b) in self.down.iter_mut().enumerate().rev() {
            if i < l - 1 {
                g.add_assign(&skip_grads[i]);
            }
            match b.backward(g, i > 0)? {
                Some(dx) => g = dx,
                None => break,
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Module<T> for Generator<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        for (i, b) in self.down.iter_mut().enumerate() {
            b.visit(&join(prefix, &format!("down.{i}")), f);
        }
        for (i, b) in self.up.iter_mut().enumerate() {
            b.visit(&join(prefix, &format!("up.{i}")), f);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    /// Stride-2 blocks before the stride-1 block and the score head.
    pub layers: usize,
    pub base_width: usize,
    pub kernel: usize,
    pub padding: usize,
    pub scale_factor: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            layers: 3,
            base_width: 64,
            kernel: 4,
            padding: 1,
            scale_factor: 1.0,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels < 2 || self.layers == 0 || self.base_width == 0 || self.kernel == 0 {
            return Err(Error::Config(
                "discriminator needs >=2 input channels, >=1 block and a positive width".into(),
            ));
        }
        if !(self.scale_factor > 0.0 && self.scale_factor <= 1.0) {
            return Err(Error::Config(format!("scale factor {} outside (0, 1]", self.scale_factor)));
        }
        Ok(())
    }

    /// (stride, output width) of every convolution including the head.
    fn stack(&self) -> Vec<(usize, usize)> {
        let width = |i: usize| scaled((self.base_width << i.min(3)).min(8 * self.base_width), self.scale_factor);
        let mut v: Vec<(usize, usize)> = (0..self.layers).map(|i| (2, width(i))).collect();
        v.push((1, width(self.layers)));
        v.push((1, 1));
        v
    }

    /// Side of the input square that influences one output score.
    pub fn receptive_field(&self) -> usize {
        self.stack()
            .iter()
            .rev()
            .fold(1, |rf, &(s, _)| (rf - 1) * s + self.kernel)
    }

    /// Input distance between neighbouring output scores.
    pub fn output_stride(&self) -> usize {
        self.stack().iter().map(|&(s, _)| s).product()
    }

    /// Score map size for an `n`-pixel side, if the input is large enough.
    pub fn output_size(&self, n: usize) -> Option<usize> {
        self.stack()
            .iter()
            .try_fold(n, |n, &(s, _)| conv_output_size(n, self.kernel, s, self.padding))
    }
}

/// Patch discriminator over channel-stacked RGB and depth. Scores are raw
/// logits; the losses apply the sigmoid.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    config: DiscriminatorConfig,
    blocks: Vec<ConvBlock<T>>,
}

pub fn build_discriminator<T: Scalar>(config: &DiscriminatorConfig, seed: u64) -> Result<Discriminator<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stack = config.stack();
    let n = stack.len();
    let mut blocks = Vec::with_capacity(n);
    let mut cin = config.in_channels;
    for (i, &(s, w)) in stack.iter().enumerate() {
        let head = i == n - 1;
        let plain = i == 0 || head;
        blocks.push(ConvBlock {
            conv: Conv2d::new(cin, w, config.kernel, s, config.padding, plain, GAN_INIT, &mut rng),
            bn: (!plain).then(|| BatchNorm2d::with_gamma(gamma_init(w, &mut rng))),
            act: if head { Activation::identity() } else { Activation::leaky(LEAK) },
        });
        cin = w;
    }
    Ok(Discriminator {
        config: config.clone(),
        blocks,
    })
}

impl<T: Scalar> Discriminator<T> {
    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    /// Score map `[B, 1, h', w']` for the stacked pair.
    pub fn forward(&mut self, rgb: &Tensor<T>, depth: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (nb, _, h, w) = rgb.dims4()?;
        let (nd, _, hd, wd) = depth.dims4()?;
        if (nb, h, w) != (nd, hd, wd) {
            return Err(Error::Shape(format!(
                "rgb {:?} and depth {:?} are not aligned",
                rgb.shape(),
                depth.shape()
            )));
        }
        let x = Tensor::concat_channels(rgb, depth)?;
        if x.shape()[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects {} stacked channels, got {}",
                self.config.in_channels,
                x.shape()[1]
            )));
        }
        if self.config.output_size(h.min(w)).is_none() {
            return Err(Error::Shape(format!("input {h}x{w} too small for the discriminator")));
        }
        let mut h = x;
        for b in &mut self.blocks {
            h = b.forward(&h, mode)?;
        }
        Ok(h)
    }

    /// Accumulates parameter gradients; when `need_depth_grad` is set,
    /// returns the gradient with respect to the depth input.
    pub fn backward(&mut self, dscore: &Tensor<T>, need_depth_grad: bool) -> Result<Option<Tensor<T>>> {
        let mut g = dscore.clone();
        let n = self.blocks.len();
        for (i, b) in self.blocks.iter_mut().enumerate().rev() {
            match b.backward(g, i > 0 || need_depth_grad)? {
                Some(dx) => g = dx,
                None => return Ok(None),
            }
            debug_assert!(i < n);
        }
        let c = g.shape()[1];
        let rgb_c = c - (self.config.in_channels - 3).max(1);
        Ok(Some(g.split_channels(rgb_c)?.1))
    }
}

impl<T: Scalar> Module<T> for Discriminator<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
    }
}

/// A scalar loss with its gradient with respect to one input.
#[derive(Clone, Debug)]
pub struct LossGrad<T> {
    pub value: T,
    pub grad: Tensor<T>,
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn finite_or_err(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("{what} is not finite")))
    }
}

/// Mean of `-log σ(s)` when `target_real`, else of `-log(1 - σ(s))`.
pub fn logistic_loss<T: Scalar>(scores: &Tensor<T>, target_real: bool) -> Result<LossGrad<T>> {
    if scores.is_empty() {
        return Err(Error::Shape("empty score map".into()));
    }
    if !scores.all_finite() {
        return Err(Error::Numerical("score map contains non-finite values".into()));
    }
    let n = scores.len() as f64;
    let mut total = 0.0;
    let mut grad = Tensor::zeros(scores.shape());
    for (g, &s) in grad.data_mut().iter_mut().zip(scores.data()) {
        let s = s.to_f64();
        *g = if target_real {
            total += softplus(-s);
            T::from_f64((sigmoid(s) - 1.0) / n)
        } else {
            total += softplus(s);
            T::from_f64(sigmoid(s) / n)
        };
    }
    let value = finite_or_err(total / n, "logistic loss")?;
    Ok(LossGrad {
        value: T::from_f64(value),
        grad,
    })
}

/// `-mean log σ(real) - mean log(1 - σ(fake))`.
pub fn gan_loss_discriminator<T: Scalar>(scores_real: &Tensor<T>, scores_fake: &Tensor<T>) -> Result<f64> {
    let r = logistic_loss(scores_real, true)?.value.to_f64();
    let f = logistic_loss(scores_fake, false)?.value.to_f64();
    finite_or_err(r + f, "discriminator loss")
}

/// Non-saturating generator loss `-mean log σ(fake)`.
pub fn gan_loss_generator<T: Scalar>(scores_fake: &Tensor<T>) -> Result<f64> {
    Ok(logistic_loss(scores_fake, true)?.value.to_f64())
}

/// Mean absolute difference, with the subgradient with respect to `fake`.
pub fn l1_loss_grad<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>) -> Result<LossGrad<T>> {
    if real.shape() != fake.shape() {
        return Err(Error::Shape(format!(
            "L1 operands {:?} and {:?} differ",
            real.shape(),
            fake.shape()
        )));
    }
    if real.is_empty() {
        return Err(Error::Shape("empty L1 operands".into()));
    }
    let n = real.len() as f64;
    let inv = T::from_f64(1.0 / n);
    let mut total = 0.0;
    let mut grad = Tensor::zeros(fake.shape());
    for ((g, &a), &b) in grad.data_mut().iter_mut().zip(real.data()).zip(fake.data()) {
        let d = b - a;
        total += d.abs().to_f64();
        *g = if d > T::zero() {
            inv
        } else if d < T::zero() {
            T::zero() - inv
        } else {
            T::zero()
        };
    }
    Ok(LossGrad {
        value: T::from_f64(total / n),
        grad,
    })
}

pub fn l1_depth_loss<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>) -> Result<f64> {
    Ok(l1_loss_grad(real, fake)?.value.to_f64())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanLossTerms {
    pub d_loss_real: f64,
    pub d_loss_fake: f64,
    pub g_adv_loss: f64,
    pub g_l1_loss: f64,
    pub lambda: f64,
}

pub fn total_generator_loss(terms: &GanLossTerms) -> f64 {
    terms.g_adv_loss + terms.lambda * terms.g_l1_loss
}
