//! Optimizers, learning-rate schedules and the segmentation and GAN
//! training loops.

use std::collections::BTreeMap;
use std::fmt;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{discriminator_archive, generator_archive, segnet_archive, Archive};
use crate::error::{Error, Result};
use crate::gan::{l1_loss_grad, logistic_loss, total_generator_loss, Discriminator, GanLossTerms, Generator};
use crate::nn::{Mode, Module, Slot};
use crate::raster::{augment, sample_partial_modality, PatchSample};
use crate::segnet::{nll_segmentation_loss, SegModel};
use crate::tensor::{Scalar, Tensor};
use crate::util::derive_seed;

/// Input configuration of a segmentation experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// RGB only, trained and tested without depth.
    RgbOnly,
    /// Trained with depth withheld from half the samples, tested without depth.
    PartialDepth,
    /// The RGB and depth model fed generated depth at test time.
    RgbSynthDepth,
    /// RGB and real depth at training and test time.
    RgbDepth,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::RgbOnly, Arm::PartialDepth, Arm::RgbSynthDepth, Arm::RgbDepth];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::RgbOnly => "rgb_only",
            Arm::PartialDepth => "partial_depth",
            Arm::RgbSynthDepth => "rgb_synth_depth",
            Arm::RgbDepth => "rgb_depth",
        }
    }

    /// Row label in comparison tables.
    pub fn title(self) -> &'static str {
        match self {
            Arm::RgbOnly => "RGB only (Lower Bound)",
            Arm::PartialDepth => "RGB & Partial Depth (Baseline)",
            Arm::RgbSynthDepth => "RGB & Synthetic Depth",
            Arm::RgbDepth => "RGB & Depth (Upper Bound)",
        }
    }

    pub fn in_channels(self) -> usize {
        match self {
            Arm::RgbOnly => 3,
            _ => 4,
        }
    }

    /// The arm whose trained model this arm evaluates.
    pub fn model_arm(self) -> Arm {
        match self {
            Arm::RgbSynthDepth => Arm::RgbDepth,
            a => a,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm {s:?}")))
    }
}

/// `base_lr * (1 - iter / max_iter)^power`.
pub fn poly_lr(base_lr: f64, iter: usize, max_iter: usize, power: f64) -> Result<f64> {
    if max_iter == 0 || iter > max_iter {
        return Err(Error::Schedule(format!(
            "iteration {iter} outside [0, {max_iter}]"
        )));
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// Constant until `decay_start`, then linear down to zero at `total`.
pub fn linear_decay_lr(base_lr: f64, epoch: usize, decay_start: usize, total: usize) -> Result<f64> {
    if decay_start >= total || epoch > total {
        return Err(Error::Schedule(format!(
            "epoch {epoch} with decay from {decay_start} to {total}"
        )));
    }
    if epoch < decay_start {
        return Ok(base_lr);
    }
    Ok(base_lr * (total - epoch) as f64 / (total - decay_start) as f64)
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `v' = momentum * v + (grad + weight_decay * param)`, `param' = param - lr * v'`.
pub fn sgd_momentum_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    same_shape(param, grad, "sgd gradient")?;
    same_shape(param, velocity, "sgd velocity")?;
    let (lr, m, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
    for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = m * *v + (g + wd * *p);
        *p -= lr * *v;
    }
    Ok(())
}

/// Bias-corrected Adam update at step `t >= 1`.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::Schedule("adam step count starts at 1".into()));
    }
    same_shape(param, grad, "adam gradient")?;
    same_shape(param, m, "adam first moment")?;
    same_shape(param, v, "adam second moment")?;
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
    let (inv_c1, inv_c2) = (T::from_f64(1.0 / c1), T::from_f64(1.0 / c2));
    let (lr, eps) = (T::from_f64(lr), T::from_f64(eps));
    for (((p, &g), mi), vi) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.data_mut())
        .zip(v.data_mut())
    {
        *mi = b1 * *mi + one_b1 * g;
        *vi = b2 * *vi + one_b2 * g * g;
        *p -= lr * (*mi * inv_c1) / ((*vi * inv_c2).sqrt() + eps);
    }
    Ok(())
}

/// SGD with momentum; weight decay only on parameters flagged for it.
#[derive(Clone, Debug, Default)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut dyn Module<T>, lr: f64) -> Result<()> {
        let mut res = Ok(());
        let (m, wd) = (self.momentum, self.weight_decay);
        model.visit("", &mut |name, slot| {
            if let (Slot::Param(p), true) = (slot, res.is_ok()) {
                let v = self
                    .velocity
                    .entry(name.to_string())
                    .or_insert_with(|| Tensor::zeros(p.value.shape()));
                let decay = if p.decay { wd } else { 0.0 };
                res = sgd_momentum_step(&mut p.value, &p.grad, v, lr, m, decay);
            }
        });
        res
    }
}

/// Adam with per-parameter moments keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut dyn Module<T>, lr: f64) -> Result<()> {
        self.t += 1;
        let mut res = Ok(());
        model.visit("", &mut |name, slot| {
            if let (Slot::Param(p), true) = (slot, res.is_ok()) {
                let m = self
                    .m
                    .entry(name.to_string())
                    .or_insert_with(|| Tensor::zeros(p.value.shape()));
                let v = self
                    .v
                    .entry(name.to_string())
                    .or_insert_with(|| Tensor::zeros(p.value.shape()));
                res = adam_step(&mut p.value, &p.grad, m, v, self.t, lr, self.beta1, self.beta2, self.eps);
            }
        });
        res
    }
}

fn store_state(a: &mut Archive, prefix: &str, map: &BTreeMap<String, Tensor<f32>>) {
    for (k, t) in map {
        a.tensors.insert(format!("{prefix}.{k}"), t.clone());
    }
}

fn load_state(a: &Archive, prefix: &str) -> BTreeMap<String, Tensor<f32>> {
    let p = format!("{prefix}.");
    a.tensors
        .iter()
        .filter_map(|(k, t)| k.strip_prefix(&p).map(|k| (k.to_string(), t.clone())))
        .collect()
}

impl Sgd<f32> {
    pub fn save_into(&self, a: &mut Archive, prefix: &str) {
        store_state(a, &format!("{prefix}.velocity"), &self.velocity);
    }

    pub fn load_from(&mut self, a: &Archive, prefix: &str) {
        self.velocity = load_state(a, &format!("{prefix}.velocity"));
    }
}

impl Adam<f32> {
    pub fn save_into(&self, a: &mut Archive, prefix: &str) {
        store_state(a, &format!("{prefix}.m"), &self.m);
        store_state(a, &format!("{prefix}.v"), &self.v);
        a.tensors
            .insert(format!("{prefix}.t"), Tensor::from_vec(&[2], split_u64(self.t)).expect("2 values"));
    }

    pub fn load_from(&mut self, a: &Archive, prefix: &str) -> Result<()> {
        self.m = load_state(a, &format!("{prefix}.m"));
        self.v = load_state(a, &format!("{prefix}.v"));
        let t = a
            .tensors
            .get(&format!("{prefix}.t"))
            .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}.t")))?;
        self.t = join_u64(t.data());
        Ok(())
    }
}

/// Stores a step count exactly as two 24-bit `f32` halves (valid below 2^48).
fn split_u64(t: u64) -> Vec<f32> {
    vec![(t & 0xFF_FFFF) as f32, (t >> 24) as f32]
}

fn join_u64(v: &[f32]) -> u64 {
    v[0] as u64 | ((v[1] as u64) << 24)
}

/// Hyperparameters of segmentation training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub arm: Arm,
    /// Probability of keeping depth per sample in the partial-depth arm.
    pub partial_depth_rate: f64,
    /// Random horizontal and vertical flips.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            weight_decay: 0.0005,
            momentum: 0.9,
            poly_power: 0.9,
            epochs: 30,
            batch_size: 4,
            seed: 0,
            arm: Arm::RgbOnly,
            partial_depth_rate: 0.5,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.base_lr > 0.0 && self.poly_power > 0.0 && self.epochs > 0 && self.batch_size > 0;
        if !positive || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("invalid segmentation training config {self:?}")));
        }
        if self.arm == Arm::RgbSynthDepth {
            return Err(Error::Config(
                "rgb_synth_depth reuses the rgb_depth model; train that arm instead".into(),
            ));
        }
        Ok(())
    }
}

/// Hyperparameters of GAN training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanTrainConfig {
    pub base_lr: f64,
    pub epochs: usize,
    pub decay_start_epoch: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.0002,
            epochs: 200,
            decay_start_epoch: 100,
            batch_size: 4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lambda: 100.0,
            seed: 0,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.decay_start_epoch >= self.epochs {
            return Err(Error::Config(format!(
                "decay start {} must precede the last epoch {}",
                self.decay_start_epoch, self.epochs
            )));
        }
        if self.base_lr <= 0.0 || self.batch_size == 0 || self.lambda < 0.0 {
            return Err(Error::Config(format!("invalid GAN training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iter: usize,
    pub epoch: usize,
    pub lr: f64,
    pub values: Vec<f64>,
}

/// Progress and append-only loss history of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub global_iter: usize,
    pub columns: Vec<String>,
    pub history: Vec<HistoryRow>,
    pub last_checkpoint: Option<PathBuf>,
}

impl TrainState {
    fn new(columns: &[&str]) -> Self {
        Self {
            epoch: 0,
            global_iter: 0,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            history: Vec::new(),
            last_checkpoint: None,
        }
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Config(format!("no history column {name}")))
    }

    /// Every logged value of one column, in iteration order.
    pub fn series(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.column(name)?;
        Ok(self.history.iter().map(|r| r.values[c]).collect())
    }

    /// Mean of a column over the rows logged in `epoch` (0-based).
    pub fn epoch_mean(&self, name: &str, epoch: usize) -> Result<f64> {
        let c = self.column(name)?;
        let v: Vec<f64> = self
            .history
            .iter()
            .filter(|r| r.epoch == epoch)
            .map(|r| r.values[c])
            .collect();
        if v.is_empty() {
            return Err(Error::EmptyEval(format!("no history rows for epoch {epoch}")));
        }
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    }

    /// CSV with columns `iter, epoch, lr` followed by the named losses.
    pub fn to_csv(&self) -> String {
        let mut s = format!("iter,epoch,lr,{}\n", self.columns.join(","));
        for r in &self.history {
            s.push_str(&format!("{},{},{:e}", r.iter, r.epoch, r.lr));
            for v in &r.values {
                s.push_str(&format!(",{v:e}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Channel-stacks a batch: `[B, 3, s, s]`, or `[B, 4, s, s]` with depth.
pub fn stack_batch(patches: &[PatchSample], with_depth: bool) -> Result<(Tensor<f32>, Vec<u8>)> {
    let first = patches
        .first()
        .ok_or_else(|| Error::EmptyDataset("empty batch".into()))?;
    let s = first.size;
    let c = if with_depth { 4 } else { 3 };
    let plane = s * s;
    let mut data = Vec::with_capacity(patches.len() * c * plane);
    let mut labels = Vec::with_capacity(patches.len() * plane);
    for p in patches {
        if p.size != s {
            return Err(Error::Shape(format!("mixed patch sizes {s} and {}", p.size)));
        }
        data.extend_from_slice(&p.rgb);
        if with_depth {
            data.extend_from_slice(&p.depth);
        }
        labels.extend_from_slice(&p.labels);
    }
    Ok((Tensor::from_vec(&[patches.len(), c, s, s], data)?, labels))
}

/// RGB `[B, 3, s, s]` and depth `[B, 1, s, s]` tensors of a batch.
pub fn pair_batch(patches: &[PatchSample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (x, _) = stack_batch(patches, true)?;
    x.split_channels(3)
}

fn batch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("batches-{epoch}")));
    idx.shuffle(&mut rng);
    idx
}

fn iters_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Consecutive non-finite losses tolerated before a run is aborted.
pub const DIVERGENCE_PATIENCE: usize = 3;

/// Segmentation training: SGD with momentum under a per-iteration poly
/// schedule, with per-epoch checkpoints.
pub struct SegTrainer {
    pub model: SegModel<f32>,
    pub cfg: TrainConfig,
    pub state: TrainState,
    opt: Sgd<f32>,
    checkpoint_dir: Option<PathBuf>,
    bad_streak: usize,
}

impl SegTrainer {
    pub fn new(model: SegModel<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if model.config().in_channels != cfg.arm.in_channels() {
            return Err(Error::Config(format!(
                "arm {} needs {} input channels, model has {}",
                cfg.arm,
                cfg.arm.in_channels(),
                model.config().in_channels
            )));
        }
        let opt = Sgd::new(cfg.momentum, cfg.weight_decay);
        Ok(Self {
            model,
            cfg,
            state: TrainState::new(&["loss", "depth_present_rate"]),
            opt,
            checkpoint_dir: None,
            bad_streak: 0,
        })
    }

    /// Writes `epoch_NNN.ckpt` into `dir` after every epoch.
    pub fn with_checkpoints(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    /// Model, optimizer and progress in one archive.
    pub fn archive(&mut self) -> Archive {
        let extra = serde_json::json!({
            "arm": self.cfg.arm,
            "epoch": self.state.epoch,
            "global_iter": self.state.global_iter,
            "seed": self.cfg.seed,
            "train_config": self.cfg,
        });
        let mut a = segnet_archive(&mut self.model, extra);
        self.opt.save_into(&mut a, "opt");
        a
    }

    /// Restores a trainer from [`SegTrainer::archive`] output.
    pub fn resume(a: &Archive) -> Result<Self> {
        let model = crate::checkpoint::segnet_from_archive(a)?;
        let cfg: TrainConfig = a.meta_field("train_config")?;
        let mut t = Self::new(model, cfg)?;
        t.opt.load_from(a, "opt");
        t.state.epoch = a.meta_field("epoch")?;
        t.state.global_iter = a.meta_field("global_iter")?;
        Ok(t)
    }

    /// One optimizer iteration on `batch`; returns the loss.
    pub fn step(&mut self, batch: &[PatchSample], lr: f64) -> Result<f64> {
        let (x, labels) = stack_batch(batch, self.cfg.arm.in_channels() == 4)?;
        self.model.zero_grad();
        let logits = self.model.forward(&x, Mode::Train)?;
        let loss = nll_segmentation_loss(&logits, &labels)?;
        let value = loss.value as f64;
        if value.is_finite() {
            self.model.backward(&loss.grad)?;
            self.opt.step(&mut self.model, lr)?;
        }
        Ok(value)
    }

    fn check_data(&self, data: &[PatchSample]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::EmptyDataset("no training patches".into()));
        }
        if matches!(self.cfg.arm, Arm::RgbDepth | Arm::PartialDepth) && data.iter().any(|p| !p.depth_present) {
            return Err(Error::Config(format!(
                "arm {} needs real depth on every training patch",
                self.cfg.arm
            )));
        }
        Ok(())
    }

    fn epoch_batches(&self, data: &[PatchSample], epoch: usize) -> Result<Vec<PatchSample>> {
        let seed = self.cfg.seed;
        let mut aug = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("augment-{epoch}")));
        let mut modality = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("modality-{epoch}")));
        batch_order(data.len(), seed, epoch)
            .into_iter()
            .map(|i| {
                let mut p = data[i].clone();
                if self.cfg.augment {
                    p = augment(p, &mut aug);
                }
                match self.cfg.arm {
                    Arm::PartialDepth => sample_partial_modality(p, self.cfg.partial_depth_rate, &mut modality),
                    Arm::RgbOnly => Ok(p.without_depth()),
                    _ => Ok(p),
                }
            })
            .collect()
    }

    /// Runs the remaining epochs over `data`.
    pub fn fit(&mut self, data: &[PatchSample]) -> Result<()> {
        self.check_data(data)?;
        let per_epoch = iters_per_epoch(data.len(), self.cfg.batch_size);
        let max_iter = self.cfg.epochs * per_epoch;
        while self.state.epoch < self.cfg.epochs {
            let epoch = self.state.epoch;
            let samples = self.epoch_batches(data, epoch)?;
            for batch in samples.chunks(self.cfg.batch_size) {
                let lr = poly_lr(self.cfg.base_lr, self.state.global_iter, max_iter, self.cfg.poly_power)?;
                let loss = self.step(batch, lr)?;
                let present = batch.iter().filter(|p| p.depth_present).count() as f64 / batch.len() as f64;
                self.state.history.push(HistoryRow {
                    iter: self.state.global_iter,
                    epoch,
                    lr,
                    values: vec![loss, present],
                });
                self.state.global_iter += 1;
                self.guard(loss)?;
            }
            self.state.epoch += 1;
            if let Some(dir) = self.checkpoint_dir.clone() {
                let path = dir.join(format!("epoch_{:03}.ckpt", self.state.epoch));
                self.archive().save(&path)?;
                self.state.last_checkpoint = Some(path);
            }
        }
        Ok(())
    }

    fn guard(&mut self, loss: f64) -> Result<()> {
        if loss.is_finite() {
            self.bad_streak = 0;
            return Ok(());
        }
        self.bad_streak += 1;
        if self.bad_streak >= DIVERGENCE_PATIENCE {
            return Err(Error::Diverged {
                iter: self.state.global_iter,
                message: format!("{DIVERGENCE_PATIENCE} consecutive non-finite losses"),
                last_checkpoint: self.state.last_checkpoint.clone(),
            });
        }
        Ok(())
    }
}

/// Trains `model` on `data` for `cfg.epochs` epochs.
pub fn train_segmentation(
    model: SegModel<f32>,
    data: &[PatchSample],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(SegModel<f32>, TrainState)> {
    let mut t = SegTrainer::new(model, cfg.clone())?;
    if let Some(dir) = checkpoint_dir {
        t = t.with_checkpoints(dir);
    }
    t.fit(data)?;
    Ok((t.model, t.state))
}

fn fingerprint(m: &mut dyn Module<f32>) -> u64 {
    let mut h = DefaultHasher::new();
    m.visit("", &mut |name, slot| {
        if let Slot::Param(p) = slot {
            name.hash(&mut h);
            for v in p.value.data() {
                v.to_bits().hash(&mut h);
            }
        }
    });
    h.finish()
}

/// Alternating conditional GAN training with Adam and a linear decay.
pub struct GanTrainer {
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub cfg: GanTrainConfig,
    pub state: TrainState,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
    checkpoint_dir: Option<PathBuf>,
    bad_streak: usize,
}

pub const GAN_COLUMNS: [&str; 5] = ["d_real", "d_fake", "g_adv", "g_l1", "g_total"];

impl GanTrainer {
    pub fn new(generator: Generator<f32>, discriminator: Discriminator<f32>, cfg: GanTrainConfig) -> Result<Self> {
        cfg.validate()?;
        let gc = generator.config();
        if discriminator.config().in_channels != gc.in_channels + gc.out_channels {
            return Err(Error::Config(format!(
                "discriminator takes {} channels, generator pairs have {}",
                discriminator.config().in_channels,
                gc.in_channels + gc.out_channels
            )));
        }
        let adam = || Adam::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        Ok(Self {
            generator,
            discriminator,
            opt_g: adam(),
            opt_d: adam(),
            cfg,
            state: TrainState::new(&GAN_COLUMNS),
            checkpoint_dir: None,
            bad_streak: 0,
        })
    }

    pub fn with_checkpoints(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    /// Generator and discriminator archives, each with its optimizer state.
    pub fn archives(&mut self) -> (Archive, Archive) {
        let extra = serde_json::json!({
            "epoch": self.state.epoch,
            "global_iter": self.state.global_iter,
            "seed": self.cfg.seed,
            "train_config": self.cfg,
        });
        let mut g = generator_archive(&mut self.generator, extra.clone());
        self.opt_g.save_into(&mut g, "opt");
        let mut d = discriminator_archive(&mut self.discriminator, extra);
        self.opt_d.save_into(&mut d, "opt");
        (g, d)
    }

    pub fn resume(g: &Archive, d: &Archive) -> Result<Self> {
        let generator = crate::checkpoint::generator_from_archive(g)?;
        let discriminator = crate::checkpoint::discriminator_from_archive(d)?;
        let cfg: GanTrainConfig = g.meta_field("train_config")?;
        let mut t = Self::new(generator, discriminator, cfg)?;
        t.opt_g.load_from(g, "opt")?;
        t.opt_d.load_from(d, "opt")?;
        t.state.epoch = g.meta_field("epoch")?;
        t.state.global_iter = g.meta_field("global_iter")?;
        t.generator
            .reseed_noise(derive_seed(t.cfg.seed, &format!("noise-{}", t.state.epoch)));
        Ok(t)
    }

    /// One discriminator update followed by one generator update.
    pub fn step(&mut self, batch: &[PatchSample], lr: f64) -> Result<GanLossTerms> {
        let (rgb, depth) = pair_batch(batch)?;
        let fake = self.generator.forward(&rgb, true, Mode::Train)?;

        self.discriminator.zero_grad();
        let s_real = self.discriminator.forward(&rgb, &depth, Mode::Train)?;
        let real = logistic_loss(&s_real, true)?;
        self.discriminator.backward(&real.grad, false)?;
        let s_fake = self.discriminator.forward(&rgb, &fake, Mode::Train)?;
        let fake_l = logistic_loss(&s_fake, false)?;
        self.discriminator.backward(&fake_l.grad, false)?;
        self.opt_d.step(&mut self.discriminator, lr)?;

        self.generator.zero_grad();
        self.discriminator.zero_grad();
        let s = self.discriminator.forward(&rgb, &fake, Mode::Train)?;
        let adv = logistic_loss(&s, true)?;
        let mut g = self
            .discriminator
            .backward(&adv.grad, true)?
            .expect("depth gradient requested");
        let l1 = l1_loss_grad(&depth, &fake)?;
        let lambda = self.cfg.lambda as f32;
        for (a, &b) in g.data_mut().iter_mut().zip(l1.grad.data()) {
            *a += lambda * b;
        }
        self.generator.backward(&g)?;
        let frozen = fingerprint(&mut self.discriminator);
        self.opt_g.step(&mut self.generator, lr)?;
        if fingerprint(&mut self.discriminator) != frozen {
            return Err(Error::Consistency("discriminator changed during the generator step".into()));
        }
        self.discriminator.zero_grad();

        Ok(GanLossTerms {
            d_loss_real: real.value as f64,
            d_loss_fake: fake_l.value as f64,
            g_adv_loss: adv.value as f64,
            g_l1_loss: l1.value as f64,
            lambda: self.cfg.lambda,
        })
    }

    pub fn fit(&mut self, data: &[PatchSample]) -> Result<()> {
        if data.is_empty() {
            return Err(Error::EmptyDataset("no GAN training pairs".into()));
        }
        if data.iter().any(|p| !p.depth_present) {
            return Err(Error::Config("GAN training needs real depth on every pair".into()));
        }
        while self.state.epoch < self.cfg.epochs {
            let epoch = self.state.epoch;
            let lr = linear_decay_lr(self.cfg.base_lr, epoch, self.cfg.decay_start_epoch, self.cfg.epochs)?;
            self.generator
                .reseed_noise(derive_seed(self.cfg.seed, &format!("noise-{epoch}")));
            let order = batch_order(data.len(), self.cfg.seed, epoch);
            for idx in order.chunks(self.cfg.batch_size) {
                let batch: Vec<PatchSample> = idx.iter().map(|&i| data[i].clone()).collect();
                let (terms, total) = match self.step(&batch, lr) {
                    Ok(t) => (t, total_generator_loss(&t)),
                    Err(Error::Numerical(_)) => {
                        let nan = GanLossTerms {
                            d_loss_real: f64::NAN,
                            d_loss_fake: f64::NAN,
                            g_adv_loss: f64::NAN,
                            g_l1_loss: f64::NAN,
                            lambda: self.cfg.lambda,
                        };
                        (nan, f64::NAN)
                    }
                    Err(e) => return Err(e),
                };
                self.state.history.push(HistoryRow {
                    iter: self.state.global_iter,
                    epoch,
                    lr,
                    values: vec![terms.d_loss_real, terms.d_loss_fake, terms.g_adv_loss, terms.g_l1_loss, total],
                });
                self.state.global_iter += 1;
                self.guard(total)?;
            }
            self.state.epoch += 1;
            if let Some(dir) = self.checkpoint_dir.clone() {
                let (g, d) = self.archives();
                let gp = dir.join(format!("generator_epoch_{:03}.ckpt", self.state.epoch));
                g.save(&gp)?;
                d.save(&dir.join(format!("discriminator_epoch_{:03}.ckpt", self.state.epoch)))?;
                self.state.last_checkpoint = Some(gp);
            }
        }
        Ok(())
    }

    fn guard(&mut self, loss: f64) -> Result<()> {
        if loss.is_finite() {
            self.bad_streak = 0;
            return Ok(());
        }
        self.bad_streak += 1;
        if self.bad_streak >= DIVERGENCE_PATIENCE {
            return Err(Error::Diverged {
                iter: self.state.global_iter,
                message: format!("{DIVERGENCE_PATIENCE} consecutive non-finite losses"),
                last_checkpoint: self.state.last_checkpoint.clone(),
            });
        }
        Ok(())
    }
}

/// Trains the pair and keeps only the generator.
pub fn train_gan(
    generator: Generator<f32>,
    discriminator: Discriminator<f32>,
    data: &[PatchSample],
    cfg: &GanTrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(Generator<f32>, TrainState)> {
    let mut t = GanTrainer::new(generator, discriminator, cfg.clone())?;
    if let Some(dir) = checkpoint_dir {
        t = t.with_checkpoints(dir);
    }
    t.fit(data)?;
    Ok((t.generator, t.state))
}
