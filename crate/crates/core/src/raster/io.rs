//! TIFF raster reading and writing for the dataset layout
//! `<root>/<tile_id>_{RGB,DSM,DTM,GTL}.tif`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::{colortype, TiffEncoder};
use tiff::ColorType;

use super::{Raster, RasterTile};
use crate::error::{Error, Result};

pub const RASTER_EXT: &str = "tif";

fn raster_err(path: &Path, message: impl ToString) -> Error {
    Error::Raster {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

fn open(path: &Path) -> Result<Decoder<BufReader<File>>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Decoder::new(BufReader::new(f))
        .map(|d| d.with_limits(Limits::unlimited()))
        .map_err(|e| raster_err(path, e))
}

fn decode(path: &Path) -> Result<(usize, usize, ColorType, DecodingResult)> {
    let mut dec = open(path)?;
    let (w, h) = dec.dimensions().map_err(|e| raster_err(path, e))?;
    let ct = dec.colortype().map_err(|e| raster_err(path, e))?;
    let img = dec.read_image().map_err(|e| raster_err(path, e))?;
    Ok((h as usize, w as usize, ct, img))
}

/// Interleaved samples to planar band-major order.
fn planar<T: Copy + Default>(interleaved: &[T], bands: usize) -> Vec<T> {
    let n = interleaved.len() / bands;
    let mut out = vec![T::default(); interleaved.len()];
    for (i, px) in interleaved.chunks_exact(bands).enumerate() {
        for (b, &v) in px.iter().enumerate() {
            out[b * n + i] = v;
        }
    }
    out
}

/// Reads an 8-bit RGB raster into planar `[3, H, W]`.
pub fn read_rgb(path: &Path) -> Result<Raster<u8>> {
    let (h, w, ct, img) = decode(path)?;
    match (ct, img) {
        (ColorType::RGB(8), DecodingResult::U8(v)) => Raster::new(3, h, w, planar(&v, 3)),
        (ColorType::RGBA(8), DecodingResult::U8(v)) => {
            let rgba = planar(&v, 4);
            Raster::new(3, h, w, rgba[..3 * h * w].to_vec())
        }
        (ct, _) => Err(raster_err(path, format!("expected 8-bit RGB, found {ct:?}"))),
    }
}

/// Reads any single-band numeric raster as 32-bit float.
pub fn read_band_f32(path: &Path) -> Result<Raster<f32>> {
    let (h, w, ct, img) = decode(path)?;
    if !matches!(ct, ColorType::Gray(_)) {
        return Err(raster_err(path, format!("expected a single band, found {ct:?}")));
    }
    let data: Vec<f32> = match img {
        DecodingResult::F32(v) => v,
        DecodingResult::F64(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::U8(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::I16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::I32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::U32(v) => v.into_iter().map(|x| x as f32).collect(),
        other => {
            return Err(raster_err(
                path,
                format!("unsupported sample format {:?}", std::mem::discriminant(&other)),
            ))
        }
    };
    Raster::new(1, h, w, data)
}

/// Reads a label raster; every sample must be exactly 0 or 1.
pub fn read_labels(path: &Path) -> Result<Raster<u8>> {
    let band = read_band_f32(path)?;
    let mut data = Vec::with_capacity(band.data.len());
    for (i, &v) in band.data.iter().enumerate() {
        if v == 0.0 {
            data.push(0)
        } else if v == 1.0 {
            data.push(1)
        } else {
            return Err(Error::Label(format!(
                "{}: value {v} at sample {i} outside {{0, 1}}",
                path.display()
            )));
        }
    }
    Raster::new(1, band.height, band.width, data)
}

fn create(path: &Path) -> Result<TiffEncoder<BufWriter<File>>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    TiffEncoder::new(BufWriter::new(f)).map_err(|e| raster_err(path, e))
}

pub fn write_rgb(path: &Path, r: &Raster<u8>) -> Result<()> {
    if r.bands != 3 {
        return Err(Error::Shape(format!("RGB write needs 3 bands, got {}", r.bands)));
    }
    let n = r.height * r.width;
    let mut interleaved = Vec::with_capacity(3 * n);
    for i in 0..n {
        for b in 0..3 {
            interleaved.push(r.data[b * n + i]);
        }
    }
    create(path)?
        .write_image::<colortype::RGB8>(r.width as u32, r.height as u32, &interleaved)
        .map_err(|e| raster_err(path, e))
}

pub fn write_band_f32(path: &Path, r: &Raster<f32>) -> Result<()> {
    if r.bands != 1 {
        return Err(Error::Shape(format!("band write needs 1 band, got {}", r.bands)));
    }
    create(path)?
        .write_image::<colortype::Gray32Float>(r.width as u32, r.height as u32, &r.data)
        .map_err(|e| raster_err(path, e))
}

/// Paths of the four rasters of one tile.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePaths {
    pub tile_id: String,
    pub rgb: PathBuf,
    pub dsm: PathBuf,
    pub dtm: PathBuf,
    pub gtl: PathBuf,
}

impl TilePaths {
    pub fn new(root: &Path, tile_id: &str) -> Self {
        let p = |suffix: &str| root.join(format!("{tile_id}_{suffix}.{RASTER_EXT}"));
        Self {
            tile_id: tile_id.to_string(),
            rgb: p("RGB"),
            dsm: p("DSM"),
            dtm: p("DTM"),
            gtl: p("GTL"),
        }
    }

    pub fn all(&self) -> [&Path; 4] {
        [&self.rgb, &self.dsm, &self.dtm, &self.gtl]
    }

    pub fn load(&self) -> Result<RasterTile> {
        super::load_tile(&self.rgb, &self.dsm, &self.dtm, &self.gtl)
    }
}

/// Tile id of an RGB raster path (`JAX_004_RGB.tif` -> `JAX_004`).
pub fn tile_id_of(rgb_path: &Path) -> String {
    let stem = rgb_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    stem.strip_suffix("_RGB").unwrap_or(&stem).to_string()
}

/// Finds every `<id>_RGB.tif` under `root` and checks that its companion
/// rasters exist. Errors name the first incomplete tile.
pub fn discover_tiles(root: &Path) -> Result<Vec<TilePaths>> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix(&format!("_RGB.{RASTER_EXT}")) {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let paths = TilePaths::new(root, &id);
        for (kind, p) in [("DSM", &paths.dsm), ("DTM", &paths.dtm), ("GTL", &paths.gtl)] {
            if !p.is_file() {
                return Err(Error::io(
                    p.clone(),
                    std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        format!("tile {id} is missing its {kind} raster"),
                    ),
                ));
            }
        }
        out.push(paths);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rasters_round_trip_through_tiff() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = Raster::new(3, 3, 4, (0..36).map(|v| v as u8 * 7).collect()).unwrap();
        let band = Raster::new(1, 3, 4, (0..12).map(|v| v as f32 * 0.25 - 1.0).collect()).unwrap();
        write_rgb(&dir.path().join("a_RGB.tif"), &rgb).unwrap();
        write_band_f32(&dir.path().join("a_DSM.tif"), &band).unwrap();
        assert_eq!(read_rgb(&dir.path().join("a_RGB.tif")).unwrap(), rgb);
        assert_eq!(read_band_f32(&dir.path().join("a_DSM.tif")).unwrap(), band);
    }

    #[test]
    fn non_binary_label_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x_GTL.tif");
        write_band_f32(&p, &Raster::new(1, 1, 3, vec![0.0, 1.0, 2.0]).unwrap()).unwrap();
        assert!(matches!(read_labels(&p), Err(Error::Label(_))));
    }

    #[test]
    fn discovery_names_the_incomplete_tile() {
        let dir = tempfile::tempdir().unwrap();
        let rgb = Raster::filled(3, 2, 2, 0u8);
        let band = Raster::filled(1, 2, 2, 0.0f32);
        let t = TilePaths::new(dir.path(), "LOC_7");
        write_rgb(&t.rgb, &rgb).unwrap();
        write_band_f32(&t.dsm, &band).unwrap();
        write_band_f32(&t.gtl, &band).unwrap();
        let err = discover_tiles(dir.path()).unwrap_err().to_string();
        assert!(err.contains("LOC_7") && err.contains("DTM"), "{err}");
        assert_eq!(tile_id_of(&t.rgb), "LOC_7");
    }

    #[test]
    fn unreadable_file_is_an_io_error() {
        let r = read_band_f32(Path::new("/nonexistent/x_DSM.tif"));
        assert!(matches!(r, Err(Error::Io { .. })));
    }
}
