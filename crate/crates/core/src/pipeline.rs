//! Experiment orchestration over a dataset root and an output root.
//!
//! Commands communicate only through files under the output root:
//!
//! ```text
//! <out>/manifest.json             train/test split
//! <out>/runs/seg_<arm>/           config.toml, epoch_NNN.ckpt, model.ckpt, history.csv, run.json
//! <out>/runs/gan/                 config.toml, generator*.ckpt, discriminator*.ckpt, history.csv, run.json
//! <out>/eval/                     report_<arm>.json, comparison.csv, comparison.md
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{discriminator_archive, generator_archive, generator_from_archive, segnet_archive, segnet_from_archive, Archive};
use crate::error::{Error, Result};
use crate::eval::{compare_runs, evaluate_arm, ComparisonTable, MetricsReport};
use crate::gan::{build_discriminator, build_generator, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::nn::Mode;
use crate::raster::io::{discover_tiles, read_rgb, tile_id_of, write_band_f32, TilePaths};
use crate::raster::{extract_patches, location_prefix, normalize_height, scale_rgb, split_ids, DepthScaling, PatchSample, Raster, RasterTile, SplitManifest};
use crate::segnet::{build_segnet, InitSpec, SegModelConfig};
use crate::tensor::Tensor;
use crate::train::{Arm, GanTrainConfig, GanTrainer, SegTrainer, TrainConfig, TrainState};
use crate::util::{derive_seed, read_json, sha256_hex, write_json, write_text};

/// Everything a pipeline command needs, serializable as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset_root: PathBuf,
    pub output_root: PathBuf,
    /// Master seed; every stage derives its own seed from it.
    pub seed: u64,
    pub split_seed: u64,
    pub split_ratio: f64,
    pub patch_size: usize,
    pub scale_factor: f64,
    pub depth_clip_max: f32,
    /// Recorded for provenance; every computation here is single-threaded.
    pub deterministic: bool,
    pub arms: Vec<Arm>,
    pub train: TrainConfig,
    pub gan: GanTrainConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset_root: PathBuf::from("data"),
            output_root: PathBuf::from("out"),
            seed: 0,
            split_seed: 0,
            split_ratio: 0.8,
            patch_size: 512,
            scale_factor: 1.0,
            depth_clip_max: DepthScaling::default().clip_max,
            deterministic: true,
            arms: Arm::ALL.to_vec(),
            train: TrainConfig::default(),
            gan: GanTrainConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale settings for the synthetic dataset: 64 px patches,
    /// quarter-width networks, 10 segmentation and 20 GAN epochs.
    pub fn toy(dataset_root: impl Into<PathBuf>, output_root: impl Into<PathBuf>) -> Self {
        Self {
            dataset_root: dataset_root.into(),
            output_root: output_root.into(),
            patch_size: 64,
            scale_factor: 0.25,
            train: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
            gan: GanTrainConfig {
                epochs: 20,
                decay_start_epoch: 10,
                ..GanTrainConfig::default()
            },
            generator: GeneratorConfig {
                depth_levels: 6,
                ..GeneratorConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn scaling(&self) -> DepthScaling {
        DepthScaling {
            clip_max: self.depth_clip_max,
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.output_root.join("manifest.json")
    }

    pub fn seg_run_dir(&self, arm: Arm) -> PathBuf {
        self.output_root.join("runs").join(format!("seg_{}", arm.model_arm()))
    }

    pub fn gan_run_dir(&self) -> PathBuf {
        self.output_root.join("runs").join("gan")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.output_root.join("eval")
    }

    pub fn seg_model_config(&self, arm: Arm) -> SegModelConfig {
        SegModelConfig::new(arm.in_channels(), self.scale_factor)
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            scale_factor: self.scale_factor,
            ..self.generator.clone()
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            scale_factor: self.scale_factor,
            ..self.discriminator.clone()
        }
    }
}

/// Exclusive use of an output root for the lifetime of the guard.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(output_root: &Path) -> Result<Self> {
        fs::create_dir_all(output_root).map_err(|e| Error::io(output_root, e))?;
        let path = output_root.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Provenance record written into every run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub kind: String,
    pub arm: Option<Arm>,
    pub config_hash: String,
    pub seed: u64,
    pub manifest_hash: String,
    pub final_checkpoint: PathBuf,
    pub epochs: usize,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrepareOutcome {
    pub manifest: SplitManifest,
    pub manifest_hash: String,
    /// The manifest already existed with identical content.
    pub up_to_date: bool,
}

/// Validates the dataset layout and writes the split manifest.
pub fn cmd_prepare(cfg: &ExperimentConfig) -> Result<PrepareOutcome> {
    let tiles = discover_tiles(&cfg.dataset_root)?;
    if tiles.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no *_RGB.tif rasters under {}",
            cfg.dataset_root.display()
        )));
    }
    let ids: Vec<String> = tiles.iter().map(|t| t.tile_id.clone()).collect();
    let manifest = split_ids(&ids, cfg.split_ratio, cfg.split_seed, location_prefix)?;
    let hash = manifest.hash();
    let path = cfg.manifest_path();
    if path.is_file() {
        let existing = SplitManifest::load(&path)?;
        if existing.hash() == hash {
            return Ok(PrepareOutcome {
                manifest,
                manifest_hash: hash,
                up_to_date: true,
            });
        }
        return Err(Error::Consistency(format!(
            "{} describes a different split; remove it to re-split",
            path.display()
        )));
    }
    manifest.save(&path)?;
    Ok(PrepareOutcome {
        manifest,
        manifest_hash: hash,
        up_to_date: false,
    })
}

fn load_manifest(cfg: &ExperimentConfig) -> Result<(SplitManifest, String)> {
    let path = cfg.manifest_path();
    if !path.is_file() {
        return Err(Error::Config(format!(
            "{} not found; run prepare first",
            path.display()
        )));
    }
    let m = SplitManifest::load(&path)?;
    let h = m.hash();
    Ok((m, h))
}

fn load_tiles(cfg: &ExperimentConfig, ids: &[String]) -> Result<Vec<RasterTile>> {
    ids.iter()
        .map(|id| TilePaths::new(&cfg.dataset_root, id).load())
        .collect()
}

/// Grid patches with real normalized depth from every listed tile.
pub fn load_patches(cfg: &ExperimentConfig, ids: &[String]) -> Result<Vec<PatchSample>> {
    let mut out = Vec::new();
    for tile in load_tiles(cfg, ids)? {
        let ndsm = normalize_height(&tile);
        out.extend(extract_patches(&tile, &ndsm, cfg.patch_size, cfg.scaling())?);
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset("no training patches".into()));
    }
    Ok(out)
}

fn write_run_files(dir: &Path, state: &TrainState, record: &RunRecord) -> Result<()> {
    write_text(&dir.join("history.csv"), &state.to_csv())?;
    write_json(&dir.join("run.json"), record)
}

/// Trains the segmentation model of `arm` on the training split.
pub fn cmd_train_seg(cfg: &ExperimentConfig, arm: Arm) -> Result<PathBuf> {
    if arm == Arm::RgbSynthDepth {
        return Err(Error::Config(
            "rgb_synth_depth evaluates the rgb_depth model; train rgb_depth and the GAN".into(),
        ));
    }
    let (manifest, manifest_hash) = load_manifest(cfg)?;
    let data = load_patches(cfg, &manifest.train_tiles)?;
    let dir = cfg.seg_run_dir(arm);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_text(&dir.join("config.toml"), &cfg.to_toml())?;

    let seed = derive_seed(cfg.seed, &format!("seg-{arm}"));
    let model = build_segnet(
        &cfg.seg_model_config(arm),
        &InitSpec::Random {
            seed: derive_seed(seed, "init"),
        },
    )?;
    let tc = TrainConfig {
        arm,
        seed: derive_seed(seed, "train"),
        ..cfg.train.clone()
    };
    let mut trainer = SegTrainer::new(model, tc)?.with_checkpoints(&dir);
    let fitted = trainer.fit(&data);
    write_text(&dir.join("history.csv"), &trainer.state.to_csv())?;
    fitted?;

    let final_path = dir.join("model.ckpt");
    let extra = serde_json::json!({ "arm": arm, "seed": seed, "manifest_hash": manifest_hash });
    segnet_archive(&mut trainer.model, extra).save(&final_path)?;
    let record = RunRecord {
        kind: "segmentation".into(),
        arm: Some(arm),
        config_hash: cfg.hash(),
        seed,
        manifest_hash,
        final_checkpoint: final_path,
        epochs: trainer.state.epoch,
        iterations: trainer.state.global_iter,
    };
    write_run_files(&dir, &trainer.state, &record)?;
    Ok(dir)
}

/// Trains the depth generator and its discriminator on the training split.
pub fn cmd_train_gan(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let (manifest, manifest_hash) = load_manifest(cfg)?;
    let data = load_patches(cfg, &manifest.train_tiles)?;
    let dir = cfg.gan_run_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_text(&dir.join("config.toml"), &cfg.to_toml())?;

    let seed = derive_seed(cfg.seed, "gan");
    let g = build_generator(&cfg.generator_config(), derive_seed(seed, "generator"))?;
    let d = build_discriminator(&cfg.discriminator_config(), derive_seed(seed, "discriminator"))?;
    let gc = GanTrainConfig {
        seed: derive_seed(seed, "train"),
        ..cfg.gan.clone()
    };
    let mut trainer = GanTrainer::new(g, d, gc)?.with_checkpoints(&dir);
    let fitted = trainer.fit(&data);
    write_text(&dir.join("history.csv"), &trainer.state.to_csv())?;
    fitted?;

    let extra = serde_json::json!({ "seed": seed, "manifest_hash": manifest_hash });
    let final_path = dir.join("generator.ckpt");
    generator_archive(&mut trainer.generator, extra.clone()).save(&final_path)?;
    discriminator_archive(&mut trainer.discriminator, extra).save(&dir.join("discriminator.ckpt"))?;
    let record = RunRecord {
        kind: "gan".into(),
        arm: None,
        config_hash: cfg.hash(),
        seed,
        manifest_hash,
        final_checkpoint: final_path,
        epochs: trainer.state.epoch,
        iterations: trainer.state.global_iter,
    };
    write_run_files(&dir, &trainer.state, &record)?;
    Ok(dir)
}

/// Loads a generator checkpoint for deterministic inference.
pub fn load_generator(path: &Path) -> Result<Generator<f32>> {
    let g = generator_from_archive(&Archive::load(path)?)?;
    if g.config().in_channels != 3 || g.config().out_channels != 1 {
        return Err(Error::Config(format!(
            "generator maps {} to {} channels, expected RGB to one depth band",
            g.config().in_channels,
            g.config().out_channels
        )));
    }
    Ok(g)
}

/// Patch origins covering `n` pixels; the last patch is aligned to the edge.
fn covering_origins(n: usize, ps: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=n - ps).step_by(ps).collect();
    if v.last() != Some(&(n - ps)) {
        v.push(n - ps);
    }
    v
}

/// Synthetic depth in network range for a full RGB raster, generated patch
/// by patch with noise off.
pub fn synthesize_depth(g: &mut Generator<f32>, rgb: &Raster<u8>, patch_size: usize) -> Result<Raster<f32>> {
    let (h, w) = (rgb.height, rgb.width);
    if rgb.bands != 3 || h < patch_size || w < patch_size {
        return Err(Error::Shape(format!(
            "need a 3-band raster of at least {patch_size}x{patch_size}, got {}x{h}x{w}",
            rgb.bands
        )));
    }
    let mut out = Raster::filled(1, h, w, 0.0f32);
    for &r0 in &covering_origins(h, patch_size) {
        for &c0 in &covering_origins(w, patch_size) {
            let crop = rgb.crop(r0, c0, patch_size, patch_size);
            let x = Tensor::from_vec(
                &[1, 3, patch_size, patch_size],
                crop.data.iter().map(|&v| scale_rgb(v)).collect(),
            )?;
            let d = g.forward(&x, false, Mode::Eval)?;
            for r in 0..patch_size {
                let dst = (r0 + r) * w + c0;
                out.data[dst..dst + patch_size].copy_from_slice(&d.data()[r * patch_size..(r + 1) * patch_size]);
            }
        }
    }
    Ok(out)
}

/// Writes `<id>_SYN.tif` (network range) and `<id>_SYNM.tif` (meters) for
/// every `*_RGB.tif` in `input_dir`. Returns the network-range paths.
pub fn cmd_infer_depth(cfg: &ExperimentConfig, checkpoint: &Path, input_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut g = load_generator(checkpoint)?;
    let mut inputs: Vec<PathBuf> = fs::read_dir(input_dir)
        .map_err(|e| Error::io(input_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().ends_with("_RGB.tif")))
        .collect();
    inputs.sort();
    let scaling = cfg.scaling();
    let mut written = Vec::with_capacity(inputs.len());
    for p in inputs {
        let id = tile_id_of(&p);
        let depth = synthesize_depth(&mut g, &read_rgb(&p)?, cfg.patch_size)?;
        let meters = Raster::new(1, depth.height, depth.width, depth.data.iter().map(|&v| scaling.to_meters(v)).collect())?;
        let net = out_dir.join(format!("{id}_SYN.tif"));
        write_band_f32(&net, &depth)?;
        write_band_f32(&out_dir.join(format!("{id}_SYNM.tif")), &meters)?;
        written.push(net);
    }
    Ok(written)
}

fn read_run(dir: &Path, manifest_hash: &str) -> Result<RunRecord> {
    let path = dir.join("run.json");
    if !path.is_file() {
        return Err(Error::Config(format!("{} not found; train that run first", path.display())));
    }
    let r: RunRecord = read_json(&path)?;
    if r.manifest_hash != manifest_hash {
        return Err(Error::Consistency(format!(
            "{} was trained on split {}, the current manifest is {}",
            dir.display(),
            r.manifest_hash,
            manifest_hash
        )));
    }
    Ok(r)
}

/// Evaluates the requested arms on the test split and writes reports and
/// the comparison table.
pub fn cmd_evaluate(cfg: &ExperimentConfig, arms: &[Arm]) -> Result<ComparisonTable> {
    let (manifest, manifest_hash) = load_manifest(cfg)?;
    let tiles = load_tiles(cfg, &manifest.test_tiles)?;
    let dir = cfg.eval_dir();
    let mut reports = Vec::with_capacity(arms.len());
    for &arm in arms {
        let run = read_run(&cfg.seg_run_dir(arm), &manifest_hash)?;
        let mut model = segnet_from_archive(&Archive::load(&run.final_checkpoint)?)?;
        let mut generator = if arm == Arm::RgbSynthDepth {
            let gan = read_run(&cfg.gan_run_dir(), &manifest_hash)?;
            Some(load_generator(&gan.final_checkpoint)?)
        } else {
            None
        };
        let report = evaluate_arm(&mut model, generator.as_mut(), &tiles, arm, cfg.patch_size, cfg.scaling())?;
        write_json(&dir.join(format!("report_{arm}.json")), &report)?;
        reports.push(report);
    }
    let table = compare_runs(&reports);
    write_table(&dir, &table)?;
    Ok(table)
}

/// Prepares, trains every configured arm (and the generator when the
/// synthetic arm is requested), then evaluates.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ComparisonTable> {
    cmd_prepare(cfg)?;
    let mut trained = Vec::new();
    for &arm in &cfg.arms {
        let m = arm.model_arm();
        if !trained.contains(&m) {
            cmd_train_seg(cfg, m)?;
            trained.push(m);
        }
    }
    if cfg.arms.contains(&Arm::RgbSynthDepth) {
        cmd_train_gan(cfg)?;
    }
    cmd_evaluate(cfg, &cfg.arms)
}

pub fn write_table(dir: &Path, table: &ComparisonTable) -> Result<()> {
    write_text(&dir.join("comparison.csv"), &table.to_csv())?;
    write_text(&dir.join("comparison.md"), &table.to_markdown())
}

/// Every `report_<arm>.json` under the eval directory of `output_root`.
pub fn read_reports(output_root: &Path) -> Result<Vec<MetricsReport>> {
    let dir = output_root.join("eval");
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .is_some_and(|n| n.to_string_lossy().starts_with("report_") && n.to_string_lossy().ends_with(".json"))
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| read_json(p)).collect()
}

/// Comparison over one or more output roots; reports of the same arm from
/// different roots (e.g. seeds) are averaged.
pub fn cmd_report(roots: &[PathBuf], out_dir: &Path) -> Result<ComparisonTable> {
    if roots.is_empty() {
        return Err(Error::EmptyEval("no output roots to report on".into()));
    }
    let mut by_arm: std::collections::BTreeMap<String, Vec<MetricsReport>> = Default::default();
    for root in roots {
        for r in read_reports(root)? {
            by_arm.entry(r.arm.clone()).or_default().push(r);
        }
    }
    if by_arm.is_empty() {
        return Err(Error::EmptyEval("no reports found".into()));
    }
    let merged = by_arm
        .values()
        .map(|rs| MetricsReport::mean(rs))
        .collect::<Result<Vec<_>>>()?;
    let table = compare_runs(&merged);
    write_table(out_dir, &table)?;
    write_json(&out_dir.join("reports_mean.json"), &merged)?;
    Ok(table)
}
