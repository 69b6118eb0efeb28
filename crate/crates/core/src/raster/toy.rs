//! Procedural scenes in the dataset layout.
//!
//! Buildings and parking lots are rectangles drawn with the same paved
//! texture, so their footprints cannot be told apart by local colour alone.
//! Only buildings are extruded in the surface model, and only buildings cast
//! a shadow toward the bottom-right whose length grows with their height.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io::{write_band_f32, write_rgb, TilePaths};
use super::{Raster, RasterTile};
use crate::error::Result;
use crate::util::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub tiles: usize,
    pub size: usize,
    pub seed: u64,
    /// Tile ids are `<location>_Tile_<nnn>`, assigned round-robin.
    pub locations: Vec<String>,
    /// Rectangles attempted per tile.
    pub objects_per_tile: (usize, usize),
    /// Rectangle side length range in pixels.
    pub object_side: (usize, usize),
    /// Building height range in meters.
    pub building_height: (f32, f32),
    /// Shadow offset in pixels per meter of height.
    pub shadow_px_per_m: f32,
    /// Multiplicative darkening inside shadows.
    pub shadow_factor: f32,
    /// Shadow-like dark ground patches with no height.
    pub dark_patches_per_tile: (usize, usize),
    /// Standard deviation of the height noise in meters.
    pub height_noise: f32,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            tiles: 40,
            size: 256,
            seed: 0,
            locations: vec!["TOYA".into(), "TOYB".into()],
            objects_per_tile: (8, 14),
            object_side: (12, 40),
            building_height: (4.0, 20.0),
            shadow_px_per_m: 0.3,
            shadow_factor: 0.6,
            dark_patches_per_tile: (2, 5),
            height_noise: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Rect {
    r: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl Rect {
    fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.r && r < self.r + self.h && c >= self.c && c < self.c + self.w
    }

    fn overlaps(&self, o: &Rect, margin: usize) -> bool {
        !(self.r + self.h + margin <= o.r
            || o.r + o.h + margin <= self.r
            || self.c + self.w + margin <= o.c
            || o.c + o.w + margin <= self.c)
    }
}

fn clamp_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Generates one scene in memory.
pub fn generate_tile(cfg: &ToyConfig, tile_id: &str) -> RasterTile {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, tile_id));
    let n = cfg.size;
    let noise = Normal::new(0.0f32, 1.0).expect("unit normal");

    // terrain: tilted plane plus a gentle undulation
    let base = rng.random_range(5.0..40.0f32);
    let (gx, gy) = (rng.random_range(-0.03..0.03f32), rng.random_range(-0.03..0.03f32));
    let (fx, fy) = (rng.random_range(0.005..0.03f32), rng.random_range(0.005..0.03f32));
    let mut dtm = Raster::filled(1, n, n, 0.0f32);
    for r in 0..n {
        for c in 0..n {
            let v = base + gx * c as f32 + gy * r as f32 + (fx * c as f32).sin() * (fy * r as f32).cos();
            dtm.set(0, r, c, v);
        }
    }

    // ground: vegetation-coloured noise
    let tint = [
        rng.random_range(85.0..115.0f32),
        rng.random_range(105.0..135.0f32),
        rng.random_range(65.0..95.0f32),
    ];
    let mut rgb = Raster::filled(3, n, n, 0u8);
    let mut rgbf = vec![[0.0f32; 3]; n * n];
    for (i, px) in rgbf.iter_mut().enumerate() {
        let (r, c) = (i / n, i % n);
        let low = 8.0 * ((r as f32 * 0.05).sin() + (c as f32 * 0.07).cos());
        for b in 0..3 {
            px[b] = tint[b] + low + 10.0 * noise.sample(&mut rng);
        }
    }

    // rectangles
    let mut rects: Vec<(Rect, Option<f32>)> = Vec::new();
    let target = rng.random_range(cfg.objects_per_tile.0..=cfg.objects_per_tile.1);
    let mut attempts = 0;
    while rects.len() < target && attempts < 400 {
        attempts += 1;
        let h = rng.random_range(cfg.object_side.0..=cfg.object_side.1);
        let w = rng.random_range(cfg.object_side.0..=cfg.object_side.1);
        if h + 2 >= n || w + 2 >= n {
            continue;
        }
        let rect = Rect {
            r: rng.random_range(1..n - h - 1),
            c: rng.random_range(1..n - w - 1),
            h,
            w,
        };
        let gap = (cfg.shadow_px_per_m * cfg.building_height.1).ceil() as usize + 2;
        if rects.iter().any(|(o, _)| o.overlaps(&rect, gap)) {
            continue;
        }
        let height = rng
            .random_bool(0.5)
            .then(|| rng.random_range(cfg.building_height.0..cfg.building_height.1));
        rects.push((rect, height));
    }

    // dark shadow-like patches on open ground
    let dark = rng.random_range(cfg.dark_patches_per_tile.0..=cfg.dark_patches_per_tile.1);
    for _ in 0..dark {
        let h = rng.random_range(3..10);
        let w = rng.random_range(3..16);
        let r0 = rng.random_range(0..n - h);
        let c0 = rng.random_range(0..n - w);
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                for v in rgbf[r * n + c].iter_mut() {
                    *v *= cfg.shadow_factor;
                }
            }
        }
    }

    let mut ndsm = Raster::filled(1, n, n, 0.0f32);
    let mut labels = Raster::filled(1, n, n, 0u8);
    for (rect, height) in &rects {
        // shared paved texture for roofs and lots
        let gray = rng.random_range(95.0..175.0f32);
        let hue = [
            rng.random_range(-8.0..8.0f32),
            rng.random_range(-8.0..8.0f32),
            rng.random_range(-8.0..8.0f32),
        ];
        let stripes = rng.random_bool(0.4);
        let period = rng.random_range(4..8usize);
        for r in rect.r..rect.r + rect.h {
            for c in rect.c..rect.c + rect.w {
                let stripe = if stripes && (c - rect.c) % period == 0 { 25.0 } else { 0.0 };
                let e = 6.0 * noise.sample(&mut rng);
                for b in 0..3 {
                    rgbf[r * n + c][b] = gray + hue[b] + stripe + e;
                }
            }
        }
        if let Some(h) = height {
            let off = (h * cfg.shadow_px_per_m).round() as usize;
            for r in rect.r..(rect.r + rect.h + off).min(n) {
                for c in rect.c..(rect.c + rect.w + off).min(n) {
                    if rect.contains(r, c) {
                        ndsm.set(0, r, c, *h);
                        labels.set(0, r, c, 1);
                    } else if r >= rect.r + off && c >= rect.c + off {
                        for v in rgbf[r * n + c].iter_mut() {
                            *v *= cfg.shadow_factor;
                        }
                    }
                }
            }
        }
    }

    for (i, px) in rgbf.iter().enumerate() {
        for b in 0..3 {
            rgb.data[b * n * n + i] = clamp_u8(px[b]);
        }
    }
    let mut dsm = dtm.clone();
    for (i, v) in dsm.data.iter_mut().enumerate() {
        *v += ndsm.data[i] + cfg.height_noise * noise.sample(&mut rng);
    }

    RasterTile {
        tile_id: tile_id.to_string(),
        rgb,
        dsm,
        dtm,
        labels,
        gsd_meters: 0.5,
    }
}

pub fn tile_ids(cfg: &ToyConfig) -> Vec<String> {
    (0..cfg.tiles)
        .map(|i| {
            let loc = &cfg.locations[i % cfg.locations.len()];
            format!("{loc}_Tile_{i:03}")
        })
        .collect()
}

/// Writes the whole toy dataset to `root`; returns the tile ids.
pub fn make_toy_dataset(root: &Path, cfg: &ToyConfig) -> Result<Vec<String>> {
    let ids = tile_ids(cfg);
    for id in &ids {
        let tile = generate_tile(cfg, id);
        let paths = TilePaths::new(root, id);
        write_rgb(&paths.rgb, &tile.rgb)?;
        write_band_f32(&paths.dsm, &tile.dsm)?;
        write_band_f32(&paths.dtm, &tile.dtm)?;
        let gtl = Raster::new(
            1,
            tile.labels.height,
            tile.labels.width,
            tile.labels.data.iter().map(|&v| v as f32).collect(),
        )?;
        write_band_f32(&paths.gtl, &gtl)?;
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::normalize_height;

    #[test]
    fn generation_is_deterministic_and_valid() {
        let cfg = ToyConfig {
            size: 64,
            object_side: (6, 14),
            ..ToyConfig::default()
        };
        let a = generate_tile(&cfg, "TOYA_Tile_000");
        let b = generate_tile(&cfg, "TOYA_Tile_000");
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.dsm, b.dsm);
        let a = a.validated().unwrap();
        assert!(a.labels.data.iter().any(|&v| v == 1));
    }

    #[test]
    fn buildings_stand_out_in_height() {
        let cfg = ToyConfig::default();
        let t = generate_tile(&cfg, "TOYB_Tile_001");
        let h = normalize_height(&t);
        let (mut inside, mut outside) = (Vec::new(), Vec::new());
        for (i, &l) in t.labels.data.iter().enumerate() {
            if l == 1 {
                inside.push(h.data[i]);
            } else {
                outside.push(h.data[i]);
            }
        }
        let min_in = inside.iter().cloned().fold(f32::INFINITY, f32::min);
        let max_out = outside.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert!(min_in > max_out, "{min_in} vs {max_out}");
    }

    #[test]
    fn dataset_is_written_in_layout() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyConfig {
            tiles: 3,
            size: 32,
            object_side: (6, 10),
            ..ToyConfig::default()
        };
        let ids = make_toy_dataset(dir.path(), &cfg).unwrap();
        let found = crate::raster::io::discover_tiles(dir.path()).unwrap();
        assert_eq!(found.len(), 3);
        assert_eq!(found[0].tile_id, ids[0]);
        let t = found[0].load().unwrap();
        assert_eq!((t.height(), t.width()), (32, 32));
    }
}
