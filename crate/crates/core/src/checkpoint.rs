//! Tensor archives for model and optimizer state.
//!
//! Layout: a magic line, a little-endian `u64` header length, a JSON
//! header with free-form metadata and a tensor index, then the raw
//! little-endian `f32` payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::{build_discriminator, build_generator, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::nn::{Module, Slot};
use crate::segnet::{build_segnet, InitSpec, SegModel, SegModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8] = b"SYNTHDEPTH-ARCHIVE-1\n";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

/// Named tensors plus JSON metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Archive {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    /// Adds every parameter and buffer of `m` under `prefix`.
    pub fn insert_module(&mut self, prefix: &str, m: &mut dyn Module<f32>) {
        m.visit(prefix, &mut |name, slot| {
            let t = match slot {
                Slot::Param(p) => p.value.clone(),
                Slot::Buffer(b) => b.clone(),
            };
            self.tensors.insert(name.to_string(), t);
        });
    }

    /// Overwrites every parameter and buffer of `m` from entries under
    /// `prefix`. Missing entries and shape mismatches are errors.
    pub fn restore_module(&self, prefix: &str, m: &mut dyn Module<f32>) -> Result<()> {
        let mut err = None;
        m.visit(prefix, &mut |name, slot| {
            if err.is_some() {
                return;
            }
            let dst = match slot {
                Slot::Param(p) => &mut p.value,
                Slot::Buffer(b) => b,
            };
            match self.tensors.get(name) {
                None => err = Some(Error::Checkpoint(format!("missing tensor {name}"))),
                Some(t) if t.shape() != dst.shape() => {
                    err = Some(Error::Checkpoint(format!(
                        "tensor {name}: archive shape {:?}, model expects {:?}",
                        t.shape(),
                        dst.shape()
                    )))
                }
                Some(t) => *dst = t.clone(),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn meta_field<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("metadata field {key} missing")))?;
        serde_json::from_value(v.clone())
            .map_err(|e| Error::Checkpoint(format!("metadata field {key}: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut buf = Vec::with_capacity(MAGIC.len() + 8 + header.len() + 4 * offset);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        if !bytes.starts_with(MAGIC) {
            return Err(bad("not a checkpoint archive"));
        }
        let rest = &bytes[MAGIC.len()..];
        if rest.len() < 8 {
            return Err(bad("truncated header"));
        }
        let hlen = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let rest = &rest[8..];
        if rest.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&rest[..hlen])?;
        let payload = &rest[hlen..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let (lo, hi) = (4 * e.offset, 4 * (e.offset + n));
            if hi > payload.len() {
                return Err(bad(&format!("tensor {} runs past the payload", e.name)));
            }
            let data = payload[lo..hi]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(e.name, Tensor::from_vec(&e.shape, data)?);
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }
}

fn kind_check(a: &Archive, want: &str) -> Result<()> {
    let kind: String = a.meta_field("kind")?;
    if kind != want {
        return Err(Error::Config(format!("checkpoint holds a {kind}, expected a {want}")));
    }
    Ok(())
}

/// Model-only archive for a segmentation network.
pub fn segnet_archive(model: &mut SegModel<f32>, extra: serde_json::Value) -> Archive {
    let mut meta = serde_json::json!({ "kind": "segnet", "config": model.config() });
    merge(&mut meta, extra);
    let mut a = Archive::new(meta);
    a.insert_module("model", model);
    a
}

pub fn segnet_from_archive(a: &Archive) -> Result<SegModel<f32>> {
    kind_check(a, "segnet")?;
    let cfg: SegModelConfig = a.meta_field("config")?;
    let mut m = build_segnet(&cfg, &InitSpec::Random { seed: 0 })?;
    a.restore_module("model", &mut m)?;
    Ok(m)
}

pub fn generator_archive(g: &mut Generator<f32>, extra: serde_json::Value) -> Archive {
    let mut meta = serde_json::json!({ "kind": "generator", "config": g.config() });
    merge(&mut meta, extra);
    let mut a = Archive::new(meta);
    a.insert_module("model", g);
    a
}

pub fn generator_from_archive(a: &Archive) -> Result<Generator<f32>> {
    kind_check(a, "generator")?;
    let cfg: GeneratorConfig = a.meta_field("config")?;
    let mut g = build_generator(&cfg, 0)?;
    a.restore_module("model", &mut g)?;
    Ok(g)
}

pub fn discriminator_archive(d: &mut Discriminator<f32>, extra: serde_json::Value) -> Archive {
    let mut meta = serde_json::json!({ "kind": "discriminator", "config": d.config() });
    merge(&mut meta, extra);
    let mut a = Archive::new(meta);
    a.insert_module("model", d);
    a
}

pub fn discriminator_from_archive(a: &Archive) -> Result<Discriminator<f32>> {
    kind_check(a, "discriminator")?;
    let cfg: DiscriminatorConfig = a.meta_field("config")?;
    let mut d = build_discriminator(&cfg, 0)?;
    a.restore_module("model", &mut d)?;
    Ok(d)
}

fn merge(meta: &mut serde_json::Value, extra: serde_json::Value) {
    if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
        m.extend(e);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;

    #[test]
    fn segnet_round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut m: SegModel<f32> =
            build_segnet(&SegModelConfig::new(4, 0.0625), &InitSpec::Random { seed: 5 }).unwrap();
        let x = Tensor::from_fn(&[1, 4, 32, 32], |i| ((i * 37) % 101) as f32 / 50.0 - 1.0);
        let _ = m.forward(&x, Mode::Train).unwrap();
        let want = m.forward(&x, Mode::Eval).unwrap();
        segnet_archive(&mut m, serde_json::json!({ "epoch": 3 })).save(&path).unwrap();
        let a = Archive::load(&path).unwrap();
        assert_eq!(a.meta_field::<u32>("epoch").unwrap(), 3);
        let mut back = segnet_from_archive(&a).unwrap();
        assert_eq!(back.forward(&x, Mode::Eval).unwrap(), want);
    }

    #[test]
    fn shape_mismatch_fails_loudly() {
        let mut small: SegModel<f32> =
            build_segnet(&SegModelConfig::new(3, 0.0625), &InitSpec::Random { seed: 5 }).unwrap();
        let mut a = segnet_archive(&mut small, serde_json::Value::Null);
        let mut wide: SegModel<f32> =
            build_segnet(&SegModelConfig::new(4, 0.0625), &InitSpec::Random { seed: 5 }).unwrap();
        assert!(matches!(a.restore_module("model", &mut wide), Err(Error::Checkpoint(_))));
        a.tensors.clear();
        assert!(matches!(a.restore_module("model", &mut small), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn wrong_kind_is_a_config_error() {
        let cfg = GeneratorConfig {
            depth_levels: 2,
            scale_factor: 0.125,
            ..GeneratorConfig::default()
        };
        let mut g = build_generator::<f32>(&cfg, 1).unwrap();
        let a = generator_archive(&mut g, serde_json::Value::Null);
        assert!(matches!(segnet_from_archive(&a), Err(Error::Config(_))));
        assert!(generator_from_archive(&a).is_ok());
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(Archive::load(&path), Err(Error::Checkpoint(_))));
    }
}
