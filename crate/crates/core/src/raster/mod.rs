//! Multi-band raster scenes: ingestion, height normalisation, patch
//! extraction, dataset splitting, augmentation and missing-modality sampling.

pub mod io;
pub mod toy;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Planar multi-band raster, band-major `[bands, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T> {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Raster<T> {
    pub fn new(bands: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != bands * height * width {
            return Err(Error::Shape(format!(
                "raster {bands}x{height}x{width} needs {} samples, got {}",
                bands * height * width,
                data.len()
            )));
        }
        Ok(Self {
            bands,
            height,
            width,
            data,
        })
    }

    pub fn filled(bands: usize, height: usize, width: usize, v: T) -> Self {
        Self {
            bands,
            height,
            width,
            data: vec![v; bands * height * width],
        }
    }

    #[inline]
    pub fn get(&self, band: usize, row: usize, col: usize) -> T {
        self.data[(band * self.height + row) * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, band: usize, row: usize, col: usize, v: T) {
        self.data[(band * self.height + row) * self.width + col] = v;
    }

    pub fn band(&self, band: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[band * n..(band + 1) * n]
    }

    /// Copies the window `[row, row+h) x [col, col+w)` of every band.
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Raster<T> {
        let mut data = Vec::with_capacity(self.bands * h * w);
        for b in 0..self.bands {
            for r in row..row + h {
                let start = (b * self.height + r) * self.width + col;
                data.extend_from_slice(&self.data[start..start + w]);
            }
        }
        Raster {
            bands: self.bands,
            height: h,
            width: w,
            data,
        }
    }
}

/// One co-registered scene.
#[derive(Clone, Debug)]
pub struct RasterTile {
    pub tile_id: String,
    /// 3-band 8-bit RGB.
    pub rgb: Raster<u8>,
    /// Surface model in meters.
    pub dsm: Raster<f32>,
    /// Terrain model in meters.
    pub dtm: Raster<f32>,
    /// 0 = ground, 1 = building.
    pub labels: Raster<u8>,
    pub gsd_meters: f64,
}

impl RasterTile {
    pub fn height(&self) -> usize {
        self.rgb.height
    }

    pub fn width(&self) -> usize {
        self.rgb.width
    }

    /// Checks band counts, co-registration and label values, then applies
    /// the non-finite fill rule to the height models.
    pub fn validated(mut self) -> Result<Self> {
        let (h, w) = (self.rgb.height, self.rgb.width);
        if self.rgb.bands != 3 {
            return Err(Error::Shape(format!(
                "{}: RGB raster has {} bands",
                self.tile_id, self.rgb.bands
            )));
        }
        for (name, r) in [
            ("DSM", (self.dsm.bands, self.dsm.height, self.dsm.width)),
            ("DTM", (self.dtm.bands, self.dtm.height, self.dtm.width)),
            ("GTL", (self.labels.bands, self.labels.height, self.labels.width)),
        ] {
            if r != (1, h, w) {
                return Err(Error::Shape(format!(
                    "{}: {name} is {}x{}x{}, expected 1x{h}x{w}",
                    self.tile_id, r.0, r.1, r.2
                )));
            }
        }
        if let Some(bad) = self.labels.data.iter().find(|&&v| v > 1) {
            return Err(Error::Label(format!(
                "{}: label value {bad} outside {{0, 1}}",
                self.tile_id
            )));
        }
        fill_non_finite(&mut self.dsm, &mut self.dtm);
        Ok(self)
    }
}

/// Replaces non-finite height samples so that nDSM is zero there.
///
/// A missing DSM sample takes the DTM value and vice versa; where both are
/// missing, both take the mean of the finite terrain samples (or 0).
pub fn fill_non_finite(dsm: &mut Raster<f32>, dtm: &mut Raster<f32>) {
    let finite: Vec<f64> = dtm
        .data
        .iter()
        .filter(|v| v.is_finite())
        .map(|&v| v as f64)
        .collect();
    let fallback = if finite.is_empty() {
        0.0
    } else {
        (finite.iter().sum::<f64>() / finite.len() as f64) as f32
    };
    for (s, t) in dsm.data.iter_mut().zip(dtm.data.iter_mut()) {
        match (s.is_finite(), t.is_finite()) {
            (true, true) => {}
            (false, true) => *s = *t,
            (true, false) => *t = *s,
            (false, false) => {
                *s = fallback;
                *t = fallback;
            }
        }
    }
}

/// Reads the four co-registered rasters of one scene.
pub fn load_tile(rgb_path: &Path, dsm_path: &Path, dtm_path: &Path, label_path: &Path) -> Result<RasterTile> {
    let rgb = io::read_rgb(rgb_path)?;
    let dsm = io::read_band_f32(dsm_path)?;
    let dtm = io::read_band_f32(dtm_path)?;
    let labels = io::read_labels(label_path)?;
    RasterTile {
        tile_id: io::tile_id_of(rgb_path),
        rgb,
        dsm,
        dtm,
        labels,
        gsd_meters: 0.5,
    }
    .validated()
}

/// Height above terrain, `dsm - dtm`, in meters.
pub fn normalize_height(tile: &RasterTile) -> Raster<f32> {
    let data = tile
        .dsm
        .data
        .iter()
        .zip(&tile.dtm.data)
        .map(|(s, t)| s - t)
        .collect();
    Raster {
        bands: 1,
        height: tile.dsm.height,
        width: tile.dsm.width,
        data,
    }
}

/// Maps nDSM meters into the network range and back.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthScaling {
    /// Heights are clipped to `[0, clip_max]` meters before scaling.
    pub clip_max: f32,
}

impl Default for DepthScaling {
    fn default() -> Self {
        Self { clip_max: 30.0 }
    }
}

impl DepthScaling {
    #[inline]
    pub fn to_network(&self, meters: f32) -> f32 {
        meters.clamp(0.0, self.clip_max) / self.clip_max * 2.0 - 1.0
    }

    #[inline]
    pub fn to_meters(&self, v: f32) -> f32 {
        (v.clamp(-1.0, 1.0) + 1.0) * 0.5 * self.clip_max
    }
}

/// 8-bit intensity mapped to `[-1, 1]`.
#[inline]
pub fn scale_rgb(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// A training unit cut from a tile.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub size: usize,
    /// `[3, size, size]` in `[-1, 1]`.
    pub rgb: Vec<f32>,
    /// `[size, size]` in `[-1, 1]`; all zeros when `depth_present` is false.
    pub depth: Vec<f32>,
    pub labels: Vec<u8>,
    pub depth_present: bool,
    pub source_tile: String,
    pub origin: (usize, usize),
}

impl PatchSample {
    /// Replaces depth by the missing-modality encoding.
    pub fn without_depth(mut self) -> Self {
        self.depth.iter_mut().for_each(|v| *v = 0.0);
        self.depth_present = false;
        self
    }
}

/// Non-overlapping row-major grid of `patch_size` squares. Ragged margins
/// beyond the last full patch are dropped.
pub fn extract_patches(
    tile: &RasterTile,
    depth: &Raster<f32>,
    patch_size: usize,
    scaling: DepthScaling,
) -> Result<Vec<PatchSample>> {
    let (h, w) = (tile.height(), tile.width());
    if patch_size == 0 || patch_size > h || patch_size > w {
        return Err(Error::Shape(format!(
            "patch size {patch_size} does not fit tile {} of {h}x{w}",
            tile.tile_id
        )));
    }
    if (depth.bands, depth.height, depth.width) != (1, h, w) {
        return Err(Error::Shape(format!(
            "depth raster {}x{}x{} does not match tile {h}x{w}",
            depth.bands, depth.height, depth.width
        )));
    }
    let mut out = Vec::with_capacity((h / patch_size) * (w / patch_size));
    for r in (0..=h - patch_size).step_by(patch_size) {
        for c in (0..=w - patch_size).step_by(patch_size) {
            let rgb = tile.rgb.crop(r, c, patch_size, patch_size);
            let d = depth.crop(r, c, patch_size, patch_size);
            let l = tile.labels.crop(r, c, patch_size, patch_size);
            out.push(PatchSample {
                size: patch_size,
                rgb: rgb.data.iter().map(|&v| scale_rgb(v)).collect(),
                depth: d.data.iter().map(|&v| scaling.to_network(v)).collect(),
                labels: l.data,
                depth_present: true,
                source_tile: tile.tile_id.clone(),
                origin: (r, c),
            });
        }
    }
    Ok(out)
}

/// Train/test partition shared by every experimental arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train_tiles: Vec<String>,
    pub test_tiles: Vec<String>,
    pub seed: u64,
    pub ratio: f64,
}

impl SplitManifest {
    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        crate::util::sha256_hex(serde_json::to_string(self).expect("manifest serializes").as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::util::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::util::read_json(path)
    }
}

/// Location group of a tile id: the text before the first underscore
/// (`JAX_Tile_004` belongs to `JAX`).
pub fn location_prefix(tile_id: &str) -> String {
    tile_id.split('_').next().unwrap_or(tile_id).to_string()
}

/// Seeded split performed independently inside each location group.
pub fn split_ids(
    ids: &[String],
    ratio: f64,
    seed: u64,
    location_of: impl Fn(&str) -> String,
) -> Result<SplitManifest> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} outside (0, 1)")));
    }
    if ids.is_empty() {
        return Err(Error::EmptyDataset("no tiles to split".into()));
    }
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for id in ids {
        groups.entry(location_of(id)).or_default().push(id.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, mut group) in groups {
        group.sort();
        group.dedup();
        group.shuffle(&mut rng);
        let n_train = (ratio * group.len() as f64).round() as usize;
        let rest = group.split_off(n_train);
        train.extend(group);
        test.extend(rest);
    }
    train.sort();
    test.sort();
    Ok(SplitManifest {
        train_tiles: train,
        test_tiles: test,
        seed,
        ratio,
    })
}

/// [`split_ids`] over loaded tiles.
pub fn split_dataset(
    tiles: &[RasterTile],
    ratio: f64,
    seed: u64,
    location_of: impl Fn(&str) -> String,
) -> Result<SplitManifest> {
    let ids: Vec<String> = tiles.iter().map(|t| t.tile_id.clone()).collect();
    split_ids(&ids, ratio, seed, location_of)
}

/// Which flips to apply to a patch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Flips {
    pub horizontal: bool,
    pub vertical: bool,
}

fn flip_plane<T: Copy>(plane: &mut [T], size: usize, flips: Flips) {
    if flips.horizontal {
        for row in plane.chunks_mut(size) {
            row.reverse();
        }
    }
    if flips.vertical {
        for r in 0..size / 2 {
            let (top, bottom) = plane.split_at_mut((size - 1 - r) * size);
            top[r * size..(r + 1) * size].swap_with_slice(&mut bottom[..size]);
        }
    }
}

/// Applies the same spatial flips to every band of the patch.
pub fn apply_flips(mut patch: PatchSample, flips: Flips) -> PatchSample {
    let n = patch.size * patch.size;
    for band in patch.rgb.chunks_mut(n) {
        flip_plane(band, patch.size, flips);
    }
    flip_plane(&mut patch.depth, patch.size, flips);
    flip_plane(&mut patch.labels, patch.size, flips);
    patch
}

/// Random horizontal and vertical flips, each with probability 0.5.
pub fn augment<R: Rng + ?Sized>(patch: PatchSample, rng: &mut R) -> PatchSample {
    let flips = Flips {
        horizontal: rng.random_bool(0.5),
        vertical: rng.random_bool(0.5),
    };
    apply_flips(patch, flips)
}

/// Keeps real depth with probability `p`, otherwise swaps in the
/// missing-modality encoding. RGB and labels are never touched.
pub fn sample_partial_modality<R: Rng + ?Sized>(patch: PatchSample, p: f64, rng: &mut R) -> Result<PatchSample> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("keep probability {p} outside [0, 1]")));
    }
    if rng.random::<f64>() < p {
        Ok(patch)
    } else {
        Ok(patch.without_depth())
    }
}
