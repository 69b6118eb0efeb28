#![allow(dead_code)]

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use synthdepth::nn::{Module, Slot};
use synthdepth::pipeline::ExperimentConfig;
use synthdepth::raster::toy::{make_toy_dataset, ToyConfig};
use synthdepth::Tensor;

/// Small scenes for fast pipeline tests.
pub fn small_toy(tiles: usize, size: usize) -> ToyConfig {
    ToyConfig {
        tiles,
        size,
        object_side: (6, 14),
        objects_per_tile: (3, 6),
        dark_patches_per_tile: (1, 2),
        ..ToyConfig::default()
    }
}

pub fn write_small_toy(root: &Path, tiles: usize, size: usize) -> Vec<String> {
    make_toy_dataset(root, &small_toy(tiles, size)).unwrap()
}

/// A pipeline configuration that trains in seconds.
pub fn tiny_config(data: &Path, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::toy(data, out);
    cfg.patch_size = 32;
    cfg.scale_factor = 0.0625;
    cfg.train.epochs = 2;
    cfg.gan.epochs = 2;
    cfg.gan.decay_start_epoch = 1;
    cfg.generator.depth_levels = 4;
    cfg
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Analytic gradients of every parameter, keyed by name.
pub fn param_grads(m: &mut dyn Module<f64>) -> Vec<(String, Tensor<f64>)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, slot| {
        if let Slot::Param(p) = slot {
            out.push((name.to_string(), p.grad.clone()));
        }
    });
    out
}

pub fn nudge(m: &mut dyn Module<f64>, target: &str, idx: usize, delta: f64) {
    m.visit("", &mut |name, slot| {
        if let Slot::Param(p) = slot {
            if name == target {
                p.value.data_mut()[idx] += delta;
            }
        }
    });
}

#[derive(Debug)]
pub struct GradCheck {
    pub coords: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Central differences with step `h` on `coords` sampled parameter entries.
/// `grads` are the analytic gradients of `loss` at the current parameters;
/// every tensor is sampled at least once before sampling at random.
pub fn grad_check<M: Module<f64>>(
    m: &mut M,
    grads: &[(String, Tensor<f64>)],
    h: f64,
    coords: usize,
    seed: u64,
    mut loss: impl FnMut(&mut M) -> f64,
) -> GradCheck {
    const FLOOR: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<(usize, usize)> = Vec::with_capacity(coords);
    for (t, (_, g)) in grads.iter().enumerate() {
        picks.push((t, rng.random_range(0..g.len())));
    }
    while picks.len() < coords {
        let t = rng.random_range(0..grads.len());
        picks.push((t, rng.random_range(0..grads[t].1.len())));
    }
    let mut out = GradCheck {
        coords: picks.len(),
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for (t, i) in picks {
        let (name, g) = &grads[t];
        nudge(m, name, i, h);
        let up = loss(m);
        nudge(m, name, i, -2.0 * h);
        let down = loss(m);
        nudge(m, name, i, h);
        let numeric = (up - down) / (2.0 * h);
        let analytic = g.data()[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        if rel > out.max_rel_err {
            out.max_rel_err = rel;
            out.worst = format!("{name}[{i}] analytic {analytic:e} numeric {numeric:e}");
        }
    }
    out
}
