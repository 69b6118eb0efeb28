//! Encoder-decoder segmentation network with pooling-index upsampling.
//!
//! The encoder is a VGG16-style stack of 3x3 convolution stages, each
//! closed by 2x2 max pooling that records argmax positions. The decoder
//! mirrors the encoder: it unpools with the recorded positions and runs the
//! stage's convolutions in reverse width order, ending in a plain
//! convolution to per-class logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    gather_with_indices, join, max_pool_with_indices, unpool_with_indices, Activation, BatchNorm2d,
    Conv2d, ConvBlock, Init, Mode, Module, PoolIndices, Slot,
};
use crate::tensor::{Scalar, Tensor};

/// VGG16 encoder layout: (convolutions, channel width) per stage.
pub const VGG16_STAGES: [(usize, usize); 5] = [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegModelConfig {
    /// 3 for RGB, 4 for RGB stacked with depth.
    pub in_channels: usize,
    pub num_classes: usize,
    pub encoder_spec: Vec<(usize, usize)>,
    pub kernel_size: usize,
    pub pool_size: usize,
    /// Uniform channel-width multiplier in (0, 1].
    pub scale_factor: f64,
}

impl Default for SegModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: 2,
            encoder_spec: VGG16_STAGES.to_vec(),
            kernel_size: 3,
            pool_size: 2,
            scale_factor: 1.0,
        }
    }
}

impl SegModelConfig {
    pub fn new(in_channels: usize, scale_factor: f64) -> Self {
        Self {
            in_channels,
            scale_factor,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes < 2 {
            return Err(Error::Config(format!(
                "segmentation needs >=1 input channel and >=2 classes, got {} and {}",
                self.in_channels, self.num_classes
            )));
        }
        if self.encoder_spec.is_empty() || self.encoder_spec.iter().any(|&(n, w)| n == 0 || w == 0) {
            return Err(Error::Config("encoder stages need >=1 convolution of width >=1".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel_size)));
        }
        if self.pool_size != 2 {
            return Err(Error::Config(format!(
                "only 2x2 pooling is supported, got {}",
                self.pool_size
            )));
        }
        if !(self.scale_factor > 0.0 && self.scale_factor <= 1.0) {
            return Err(Error::Config(format!(
                "scale factor {} outside (0, 1]",
                self.scale_factor
            )));
        }
        Ok(())
    }

    /// Channel width of every encoder stage after scaling.
    pub fn stage_widths(&self) -> Vec<usize> {
        self.encoder_spec
            .iter()
            .map(|&(_, w)| ((w as f64 * self.scale_factor).round() as usize).max(1))
            .collect()
    }

    /// Spatial dims must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.encoder_spec.len()
    }
}

/// How encoder weights are initialised.
#[derive(Clone, Debug)]
pub enum InitSpec {
    /// He-normal kernels from a seeded generator.
    Random { seed: u64 },
    /// Externally supplied encoder kernels in layer order, each
    /// `[out, in, k, k]` for a 3-channel first layer. Any further layers
    /// (decoder, classifier) are drawn from the seeded generator.
    Pretrained { encoder: Vec<Tensor<f32>>, seed: u64 },
}

/// Extends a 3-channel first-layer kernel with `extra` input slices, each
/// the element-wise mean of the RGB slices.
pub fn init_first_conv<T: Scalar>(pretrained_first: &Tensor<T>, extra: usize) -> Result<Tensor<T>> {
    let (o, c, kh, kw) = pretrained_first.dims4()?;
    if c != 3 {
        return Err(Error::Init(format!(
            "first-layer kernel has {c} input channels, expected 3"
        )));
    }
    let plane = kh * kw;
    let third = T::from_f64(1.0 / 3.0);
    let mut out = Vec::with_capacity(o * (3 + extra) * plane);
    let src = pretrained_first.data();
    for f in 0..o {
        let base = f * 3 * plane;
        out.extend_from_slice(&src[base..base + 3 * plane]);
        let mean: Vec<T> = (0..plane)
            .map(|p| (src[base + p] + src[base + plane + p] + src[base + 2 * plane + p]) * third)
            .collect();
        for _ in 0..extra {
            out.extend_from_slice(&mean);
        }
    }
    Tensor::from_vec(&[o, 3 + extra, kh, kw], out)
}

#[derive(Clone, Debug)]
struct Stage<T> {
    blocks: Vec<ConvBlock<T>>,
}

fn conv_bn_relu<T: Scalar>(cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> ConvBlock<T> {
    ConvBlock {
        conv: Conv2d::new(cin, cout, k, 1, k / 2, false, Init::HeNormal, rng),
        bn: Some(BatchNorm2d::new(cout)),
        act: Activation::relu(),
    }
}

#[derive(Clone, Debug)]
pub struct SegModel<T> {
    config: SegModelConfig,
    encoder: Vec<Stage<T>>,
    decoder: Vec<Stage<T>>,
    classifier: Conv2d<T>,
    indices: Vec<PoolIndices>,
}

/// Builds a model from `config`, optionally loading pretrained encoder kernels.
pub fn build_segnet<T: Scalar>(config: &SegModelConfig, init: &InitSpec) -> Result<SegModel<T>> {
    config.validate()?;
    let seed = match init {
        InitSpec::Random { seed } | InitSpec::Pretrained { seed, .. } => *seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = config.stage_widths();
    let k = config.kernel_size;

    let mut encoder = Vec::with_capacity(widths.len());
    let mut cin = config.in_channels;
    for (s, &(n, _)) in config.encoder_spec.iter().enumerate() {
        let blocks = (0..n)
            .map(|j| {
                let b = conv_bn_relu(if j == 0 { cin } else { widths[s] }, widths[s], k, &mut rng);
                b
            })
            .collect();
        cin = widths[s];
        encoder.push(Stage { blocks });
    }

    // decoder stages in execution order: deepest first
    let mut decoder = Vec::with_capacity(widths.len());
    for s in (0..widths.len()).rev() {
        let n = config.encoder_spec[s].0;
        let w = widths[s];
        let mut blocks = Vec::new();
        if s == 0 {
            for _ in 0..n - 1 {
                blocks.push(conv_bn_relu(w, w, k, &mut rng));
            }
        } else {
            for j in 0..n {
                let out = if j + 1 == n { widths[s - 1] } else { w };
                blocks.push(conv_bn_relu(w, out, k, &mut rng));
            }
        }
        decoder.push(Stage { blocks });
    }
    let classifier = Conv2d::new(widths[0], config.num_classes, k, 1, k / 2, true, Init::HeNormal, &mut rng);

    let mut model = SegModel {
        config: config.clone(),
        encoder,
        decoder,
        classifier,
        indices: Vec::new(),
    };
    if let InitSpec::Pretrained { encoder: weights, .. } = init {
        model.load_encoder(weights)?;
    }
    Ok(model)
}

impl<T: Scalar> SegModel<T> {
    pub fn config(&self) -> &SegModelConfig {
        &self.config
    }

    fn load_encoder(&mut self, weights: &[Tensor<f32>]) -> Result<()> {
        let convs: usize = self.encoder.iter().map(|s| s.blocks.len()).sum();
        if weights.len() != convs {
            return Err(Error::Init(format!(
                "pretrained encoder has {} kernels, model has {convs}",
                weights.len()
            )));
        }
        let extra = self.config.in_channels.checked_sub(3);
        let mut it = weights.iter();
        for (li, block) in self.encoder.iter_mut().flat_map(|s| s.blocks.iter_mut()).enumerate() {
            let w = it.next().expect("counted above").cast::<T>();
            let w = if li == 0 {
                match extra {
                    Some(0) => w,
                    Some(e) => init_first_conv(&w, e)?,
                    None => {
                        return Err(Error::Init(format!(
                            "pretrained first layer needs >=3 input channels, model has {}",
                            self.config.in_channels
                        )))
                    }
                }
            } else {
                w
            };
            if w.shape() != block.conv.weight.value.shape() {
                return Err(Error::Init(format!(
                    "pretrained encoder layer {li}: shape {:?}, model expects {:?}",
                    w.shape(),
                    block.conv.weight.value.shape()
                )));
            }
            block.conv.weight.value = w;
        }
        Ok(())
    }

    /// First convolution kernel, `[width, in_channels, k, k]`.
    pub fn first_conv_weight(&self) -> &Tensor<T> {
        &self.encoder[0].blocks[0].conv.weight.value
    }

    /// Encoder and decoder convolution counts (excluding nothing).
    pub fn conv_counts(&self) -> (usize, usize) {
        let enc = self.encoder.iter().map(|s| s.blocks.len()).sum();
        let dec: usize = self.decoder.iter().map(|s| s.blocks.len()).sum::<usize>() + 1;
        (enc, dec)
    }

    /// Output channels of every encoder and decoder convolution, in order.
    pub fn conv_widths(&self) -> (Vec<usize>, Vec<usize>) {
        let enc = self
            .encoder
            .iter()
            .flat_map(|s| s.blocks.iter().map(|b| b.conv.out_channels))
            .collect();
        let mut dec: Vec<usize> = self
            .decoder
            .iter()
            .flat_map(|s| s.blocks.iter().map(|b| b.conv.out_channels))
            .collect();
        dec.push(self.classifier.out_channels);
        (enc, dec)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let m = self.config.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by {m}"
            )));
        }
        Ok(())
    }

    /// Per-pixel class scores `[B, classes, H, W]`.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.indices.clear();
        let mut h = x.clone();
        for stage in &mut self.encoder {
            for b in &mut stage.blocks {
                h = b.forward(&h, mode)?;
            }
            let (p, idx) = max_pool_with_indices(&h)?;
            self.indices.push(idx);
            h = p;
        }
        for (d, stage) in self.decoder.iter_mut().enumerate() {
            let idx = &self.indices[self.indices.len() - 1 - d];
            h = unpool_with_indices(&h, idx)?;
            for b in &mut stage.blocks {
                h = b.forward(&h, mode)?;
            }
        }
        self.classifier.forward(&h, mode)
    }

    /// Backpropagates `dlogits` through the last training forward pass,
    /// accumulating parameter gradients.
    pub fn backward(&mut self, dlogits: &Tensor<T>) -> Result<()> {
        if self.indices.len() != self.encoder.len() {
            return Err(Error::Shape("backward without a forward pass".into()));
        }
        let mut g = self
            .classifier
            .backward(dlogits, true)?
            .expect("input gradient requested");
        let depth = self.indices.len();
        for (d, stage) in self.decoder.iter_mut().enumerate().rev() {
            for b in stage.blocks.iter_mut().rev() {
                g = b.backward(g, true)?.expect("input gradient requested");
            }
            g = gather_with_indices(&g, &self.indices[depth - 1 - d])?;
        }
        for (s, stage) in self.encoder.iter_mut().enumerate().rev() {
            g = unpool_with_indices(&g, &self.indices[s])?;
            for (j, b) in stage.blocks.iter_mut().enumerate().rev() {
                match b.backward(g, s > 0 || j > 0)? {
                    Some(dx) => g = dx,
                    None => return Ok(()),
                }
            }
        }
        Ok(())
    }

    /// Argmax class per pixel, `[B, H, W]` flattened.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Vec<u8>> {
        let logits = self.forward(x, Mode::Eval)?;
        Ok(argmax_classes(&logits)?)
    }
}

/// Per-pixel argmax over the class axis; ties go to the lower class.
pub fn argmax_classes<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let (n, c, h, w) = logits.dims4()?;
    let plane = h * w;
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut best = 0usize;
            for k in 1..c {
                if logits.data()[base + k * plane + p] > logits.data()[base + best * plane + p] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

impl<T: Scalar> Module<T> for SegModel<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_, T>)) {
        for (s, stage) in self.encoder.iter_mut().enumerate() {
            for (j, b) in stage.blocks.iter_mut().enumerate() {
                b.visit(&join(prefix, &format!("encoder.{s}.{j}")), f);
            }
        }
        for (s, stage) in self.decoder.iter_mut().enumerate() {
            for (j, b) in stage.blocks.iter_mut().enumerate() {
                b.visit(&join(prefix, &format!("decoder.{s}.{j}")), f);
            }
        }
        self.classifier.visit(&join(prefix, "classifier"), f);
    }
}

/// Mean negative log-likelihood of the labelled class under a softmax.
#[derive(Clone, Debug)]
pub struct NllLoss<T> {
    pub value: T,
    /// Gradient with respect to the logits.
    pub grad: Tensor<T>,
}

/// Mean over pixels of `-log softmax(logits)[label]`, with its gradient.
pub fn nll_segmentation_loss<T: Scalar>(logits: &Tensor<T>, labels: &[u8]) -> Result<NllLoss<T>> {
    let (n, c, h, w) = logits.dims4()?;
    let plane = h * w;
    if labels.len() != n * plane {
        return Err(Error::Shape(format!(
            "{} labels for logits {:?}",
            labels.len(),
            logits.shape()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::Label(format!("label {bad} outside [0, {c})")));
    }
    let count = (n * plane) as f64;
    let inv = T::from_f64(1.0 / count);
    let mut total = 0.0f64;
    let mut grad = Tensor::zeros(logits.shape());
    let mut probs = vec![T::zero(); c];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut top = 0;
            for k in 1..c {
                if logits.data()[base + k * plane + p] > logits.data()[base + top * plane + p] {
                    top = k;
                }
            }
            let m = logits.data()[base + top * plane + p];
            let mut rest = T::zero();
            for k in 0..c {
                let e = (logits.data()[base + k * plane + p] - m).exp();
                probs[k] = e;
                if k != top {
                    rest += e;
                }
            }
            let z = T::one() + rest;
            let label = labels[b * plane + p] as usize;
            let log_p = logits.data()[base + label * plane + p] - m - rest.ln_1p();
            total -= log_p.to_f64();
            for k in 0..c {
                let mut g = probs[k] / z;
                if k == label {
                    g -= T::one();
                }
                grad.data_mut()[base + k * plane + p] = g * inv;
            }
        }
    }
    Ok(NllLoss {
        value: T::from_f64(total / count),
        grad,
    })
}
