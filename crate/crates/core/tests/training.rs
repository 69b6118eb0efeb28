mod common;

use synthdepth::checkpoint::Archive;
use synthdepth::gan::{build_discriminator, build_generator, DiscriminatorConfig, GeneratorConfig};
use synthdepth::nn::{Mode, Module, Slot};
use synthdepth::raster::toy::generate_tile;
use synthdepth::raster::{extract_patches, normalize_height, DepthScaling, PatchSample};
use synthdepth::segnet::{build_segnet, InitSpec, SegModelConfig};
use synthdepth::train::{train_segmentation, Arm, GanTrainConfig, GanTrainer, SegTrainer, TrainConfig};
use synthdepth::Tensor;

use common::small_toy;

fn toy_patches(tiles: usize, size: usize, patch: usize) -> Vec<PatchSample> {
    let cfg = small_toy(tiles, size);
    (0..tiles)
        .flat_map(|i| {
            let tile = generate_tile(&cfg, &format!("TOYA_Tile_{i:03}"));
            let ndsm = normalize_height(&tile);
            extract_patches(&tile, &ndsm, patch, DepthScaling::default()).unwrap()
        })
        .collect()
}

fn seg_trainer(arm: Arm, epochs: usize, seed: u64) -> SegTrainer {
    let model = build_segnet(&SegModelConfig::new(arm.in_channels(), 0.0625), &InitSpec::Random { seed }).unwrap();
    let cfg = TrainConfig {
        arm,
        epochs,
        seed,
        ..TrainConfig::default()
    };
    SegTrainer::new(model, cfg).unwrap()
}

fn small_gan(levels: usize, lambda: f64, epochs: usize) -> GanTrainer {
    let g = build_generator(
        &GeneratorConfig {
            depth_levels: levels,
            scale_factor: 0.25,
            ..GeneratorConfig::default()
        },
        1,
    )
    .unwrap();
    let d = build_discriminator(
        &DiscriminatorConfig {
            scale_factor: 0.25,
            ..DiscriminatorConfig::default()
        },
        2,
    )
    .unwrap();
    let cfg = GanTrainConfig {
        epochs,
        decay_start_epoch: epochs / 2,
        lambda,
        seed: 3,
        ..GanTrainConfig::default()
    };
    GanTrainer::new(g, d, cfg).unwrap()
}

#[test]
fn identical_seeds_give_identical_histories() {
    let data = toy_patches(2, 64, 32);
    let run = || {
        let t = seg_trainer(Arm::PartialDepth, 2, 9);
        let (_, state) = train_segmentation(t.model, &data, &t.cfg, None).unwrap();
        state.to_csv()
    };
    assert_eq!(run(), run());
}

#[test]
fn partial_depth_logs_presence_near_one_half() {
    let data = toy_patches(4, 64, 32);
    let mut t = seg_trainer(Arm::PartialDepth, 4, 5);
    t.fit(&data).unwrap();
    let rates = t.state.series("depth_present_rate").unwrap();
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    // 64 Bernoulli(0.5) draws: four standard deviations is 0.25
    assert!((mean - 0.5).abs() < 0.25, "presence rate {mean}");
    assert!(rates.iter().any(|&r| r < 1.0) && rates.iter().any(|&r| r > 0.0));
}

#[test]
fn rgb_only_never_reads_depth() {
    let mut data = toy_patches(1, 64, 32);
    for p in &mut data {
        p.depth.iter_mut().for_each(|v| *v = f32::NAN);
    }
    let mut t = seg_trainer(Arm::RgbOnly, 1, 4);
    t.fit(&data).unwrap();
    assert!(t.state.series("loss").unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn resumed_training_reproduces_the_next_loss() {
    let data = toy_patches(2, 64, 32);
    let dir = tempfile::tempdir().unwrap();
    let mut t = seg_trainer(Arm::RgbDepth, 1, 6).with_checkpoints(dir.path());
    t.fit(&data).unwrap();
    let path = t.state.last_checkpoint.clone().unwrap();
    let mut resumed = SegTrainer::resume(&Archive::load(&path).unwrap()).unwrap();
    assert_eq!(resumed.state.epoch, 1);
    assert_eq!(resumed.state.global_iter, t.state.global_iter);

    let batch = &data[..4];
    let a = t.step(batch, 0.005).unwrap();
    let b = resumed.step(batch, 0.005).unwrap();
    assert!((a - b).abs() <= 1e-6 * a.abs(), "{a} vs {b}");
    let a = t.step(batch, 0.005).unwrap();
    let b = resumed.step(batch, 0.005).unwrap();
    assert!((a - b).abs() <= 1e-6 * a.abs(), "momentum state differs: {a} vs {b}");
}

#[test]
fn resumed_gan_matches_uninterrupted_training() {
    let data = toy_patches(1, 64, 32);
    let dir = tempfile::tempdir().unwrap();
    let mut straight = small_gan(4, 100.0, 3).with_checkpoints(dir.path());
    straight.fit(&data).unwrap();

    let mut resumed = GanTrainer::resume(
        &Archive::load(&dir.path().join("generator_epoch_001.ckpt")).unwrap(),
        &Archive::load(&dir.path().join("discriminator_epoch_001.ckpt")).unwrap(),
    )
    .unwrap();
    assert_eq!(resumed.state.epoch, 1);
    resumed.fit(&data).unwrap();

    let tail = |s: &GanTrainer| s.state.series("g_total").unwrap().last().copied().unwrap();
    let (a, b) = (tail(&straight), tail(&resumed));
    assert!((a - b).abs() <= 1e-6 * a.abs(), "{a} vs {b}");
}

#[test]
fn discriminator_loss_starts_near_two_ln_two() {
    let data = toy_patches(1, 64, 64);
    let mut t = small_gan(6, 100.0, 1);
    let terms = t.step(&data[..1], 0.0002).unwrap();
    let d = terms.d_loss_real + terms.d_loss_fake;
    assert!((d - 2.0 * std::f64::consts::LN_2).abs() < 0.5, "initial discriminator loss {d}");
}

#[test]
fn l1_drops_below_a_quarter_of_the_first_epoch() {
    let data = toy_patches(8, 128, 64);
    let mut t = small_gan(6, 100.0, 25);
    t.fit(&data).unwrap();
    let first = t.state.epoch_mean("g_l1", 0).unwrap();
    let last = t.state.epoch_mean("g_l1", 24).unwrap();
    assert!(last < 0.25 * first, "L1 {first} -> {last}");
}

#[test]
fn without_l1_adversarial_losses_stay_finite() {
    let data = toy_patches(2, 64, 64);
    let mut t = small_gan(6, 0.0, 3);
    t.fit(&data).unwrap();
    for col in ["d_real", "d_fake", "g_adv"] {
        assert!(t.state.series(col).unwrap().iter().all(|v| v.is_finite()), "{col}");
    }
}

fn params_of(m: &mut dyn Module<f32>) -> Vec<Tensor<f32>> {
    let mut v = Vec::new();
    m.visit("", &mut |_, s| {
        if let Slot::Param(p) = s {
            v.push(p.value.clone());
        }
    });
    v
}

#[test]
fn a_gan_step_moves_both_networks() {
    let data = toy_patches(1, 64, 64);
    let mut t = small_gan(6, 100.0, 1);
    let (g0, d0) = (params_of(&mut t.generator), params_of(&mut t.discriminator));
    t.step(&data[..1], 0.0002).unwrap();
    assert_ne!(params_of(&mut t.generator), g0);
    assert_ne!(params_of(&mut t.discriminator), d0);
}

#[test]
fn discriminator_scores_ignore_pixels_outside_their_receptive_field() {
    let cfg = DiscriminatorConfig {
        scale_factor: 0.125,
        ..DiscriminatorConfig::default()
    };
    let mut d = build_discriminator::<f32>(&cfg, 8).unwrap();
    let n = cfg.receptive_field();
    let rgb = common::random_tensor(&[1, 3, n, n], 1).cast::<f32>();
    let depth = common::random_tensor(&[1, 1, n, n], 2).cast::<f32>();
    d.forward(&rgb, &depth, Mode::Train).unwrap();
    let base = d.forward(&rgb, &depth, Mode::Eval).unwrap();
    let k = base.shape()[3];
    assert_eq!(cfg.output_size(n), Some(k));

    // padding shifts each score's window up-left by padding times the
    // input stride of every layer: 1 + 2 + 4 + 8 + 8 pixels
    let shift = cfg.padding * 23;
    let first_unseen = n - shift;
    let mut occlude = |r0: usize, c0: usize| {
        let mut x = depth.clone();
        for r in r0..(r0 + 4).min(n) {
            for c in c0..(c0 + 4).min(n) {
                x.data_mut()[r * n + c] = 5.0;
            }
        }
        d.forward(&rgb, &x, Mode::Eval).unwrap()
    };
    let top_left = occlude(0, 0);
    assert_ne!(top_left.data()[0], base.data()[0]);
    assert_eq!(top_left.data()[k * k - 1], base.data()[k * k - 1]);
    let bottom_right = occlude(n - 4, n - 4);
    assert!(n - 4 >= first_unseen);
    assert_eq!(bottom_right.data()[0], base.data()[0]);
    assert_ne!(bottom_right.data()[k * k - 1], base.data()[k * k - 1]);
}
