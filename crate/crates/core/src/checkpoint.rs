//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `DNORMCK\0`, the format version (u32 LE), the manifest length
//! (u64 LE), the JSON manifest, then every blob back to back as little-endian f32 in
//! row-major order. The manifest lists each blob's name, shape, byte offset into the blob
//! region and SHA-256.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::layers::{Conv2d, Linear};
use crate::models::{Architecture, ModelState};
use crate::normcore::{AffineParams, NormConfig, NormLayerState, NormStats};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DNORMCK\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv { stride: usize, pad: usize },
    Norm { stats_sets: usize, affine_sets: usize },
    Head,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub kind: LayerKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// Resolved experiment configuration (TOML) the model was produced under.
    pub config: String,
    pub epoch: usize,
    pub seed: u64,
    pub arch: Architecture,
    pub norm: NormConfig,
    /// Every conv, norm layer and head, in model order.
    pub layers: Vec<LayerEntry>,
    pub blobs: Vec<BlobEntry>,
}

/// Provenance stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub config: String,
    pub epoch: usize,
    pub seed: u64,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct BlobWriter {
    region: Vec<u8>,
    entries: Vec<BlobEntry>,
}

impl BlobWriter {
    fn push(&mut self, name: String, shape: &[usize], values: &[f32]) {
        let start = self.region.len();
        for v in values {
            self.region.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&self.region[start..]);
        self.entries.push(BlobEntry {
            name,
            shape: shape.to_vec(),
            offset: start as u64,
            sha256: hex(&digest),
        });
    }
}

fn norm_blob(layer: &str, part: &str) -> String {
    format!("norm.{layer}.{part}")
}

/// Serializes the model and its provenance to bytes.
pub fn to_bytes(model: &ModelState<f32>, meta: &CheckpointMeta) -> Vec<u8> {
    let mut w = BlobWriter {
        region: Vec::new(),
        entries: Vec::new(),
    };
    let mut layers = Vec::new();
    for (i, c) in model.convs.iter().enumerate() {
        let name = format!("conv.{i}");
        w.push(format!("{name}.weight"), c.weight.shape(), c.weight.data());
        layers.push(LayerEntry {
            name,
            kind: LayerKind::Conv {
                stride: c.stride,
                pad: c.pad,
            },
        });
    }
    for (l, name) in model.norms.iter().zip(&model.norm_names) {
        for (s, st) in l.stats.iter().enumerate() {
            w.push(norm_blob(name, &format!("stats.{s}.mean")), &[l.channels], &st.mean);
            w.push(norm_blob(name, &format!("stats.{s}.var")), &[l.channels], &st.var);
        }
        for (a, ap) in l.affine.iter().enumerate() {
            w.push(norm_blob(name, &format!("affine.{a}.gamma")), &[l.channels], &ap.gamma);
            w.push(norm_blob(name, &format!("affine.{a}.beta")), &[l.channels], &ap.beta);
        }
        layers.push(LayerEntry {
            name: name.clone(),
            kind: LayerKind::Norm {
                stats_sets: l.stats.len(),
                affine_sets: l.affine.len(),
            },
        });
    }
    for (h, head) in model.heads.iter().enumerate() {
        let name = format!("head.{h}");
        w.push(format!("{name}.weight"), head.weight.shape(), head.weight.data());
        w.push(format!("{name}.bias"), &[head.bias.len()], &head.bias);
        layers.push(LayerEntry {
            name,
            kind: LayerKind::Head,
        });
    }
    let manifest = Manifest {
        version: VERSION,
        config: meta.config.clone(),
        epoch: meta.epoch,
        seed: meta.seed,
        arch: model.arch,
        norm: model.norm,
        layers,
        blobs: w.entries,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(20 + json.len() + w.region.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.region);
    out
}

pub fn save_checkpoint(path: &Path, model: &ModelState<f32>, meta: &CheckpointMeta) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(model, meta))?;
    f.sync_all()?;
    Ok(())
}

fn split_header(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(20..20usize.saturating_add(len))
        .ok_or_else(|| Error::Format("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    if manifest.version != VERSION {
        return Err(Error::Version {
            found: manifest.version,
            expected: VERSION,
        });
    }
    Ok((manifest, &bytes[20 + len..]))
}

struct BlobReader<'a> {
    region: &'a [u8],
    entries: std::collections::HashMap<&'a str, &'a BlobEntry>,
}

impl BlobReader<'_> {
    fn read(&self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing blob `{name}`")))?;
        if e.shape != shape {
            return Err(Error::Shape(format!(
                "blob `{name}` has shape {:?}, expected {shape:?}",
                e.shape
            )));
        }
        let count: usize = shape.iter().product();
        let start = e.offset as usize;
        let bytes = start
            .checked_add(count * 4)
            .and_then(|end| self.region.get(start..end))
            .ok_or_else(|| Error::Format(format!("truncated blob `{name}`")))?;
        if hex(&Sha256::digest(bytes)) != e.sha256 {
            return Err(Error::Checksum(name.to_string()));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelState<f32>, Manifest)> {
    let (manifest, region) = split_header(bytes)?;
    let reader = BlobReader {
        region,
        entries: manifest.blobs.iter().map(|b| (b.name.as_str(), b)).collect(),
    };
    let norm = manifest.norm;
    let mut convs = Vec::new();
    let mut norms = Vec::new();
    let mut heads = Vec::new();
    for layer in &manifest.layers {
        match layer.kind {
            LayerKind::Conv { stride, pad } => {
                let name = format!("{}.weight", layer.name);
                let shape = reader
                    .entries
                    .get(name.as_str())
                    .map(|e| e.shape.clone())
                    .ok_or_else(|| Error::Format(format!("missing blob `{name}`")))?;
                if shape.len() != 4 {
                    return Err(Error::Shape(format!("conv blob `{name}` has rank {}", shape.len())));
                }
                let weight = Tensor::from_vec(&shape, reader.read(&name, &shape)?)?;
                convs.push(Conv2d { weight, stride, pad });
            }
            LayerKind::Norm {
                stats_sets,
                affine_sets,
            } => {
                let gamma0 = norm_blob(&layer.name, "affine.0.gamma");
                let channels = reader
                    .entries
                    .get(gamma0.as_str())
                    .and_then(|e| e.shape.first().copied())
                    .ok_or_else(|| Error::Format(format!("missing blob `{gamma0}`")))?;
                let stats = (0..stats_sets)
                    .map(|s| {
                        Ok(NormStats {
                            mean: reader.read(&norm_blob(&layer.name, &format!("stats.{s}.mean")), &[channels])?,
                            var: reader.read(&norm_blob(&layer.name, &format!("stats.{s}.var")), &[channels])?,
                            momentum: norm.momentum as f32,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let affine = (0..affine_sets)
                    .map(|a| {
                        Ok(AffineParams {
                            gamma: reader.read(&norm_blob(&layer.name, &format!("affine.{a}.gamma")), &[channels])?,
                            beta: reader.read(&norm_blob(&layer.name, &format!("affine.{a}.beta")), &[channels])?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                norms.push(NormLayerState {
                    channels,
                    config: norm,
                    stats,
                    affine,
                });
            }
            LayerKind::Head => {
                let wname = format!("{}.weight", layer.name);
                let shape = [manifest.arch.classes, {
                    reader
                        .entries
                        .get(wname.as_str())
                        .and_then(|e| e.shape.get(1).copied())
                        .ok_or_else(|| Error::Format(format!("missing blob `{wname}`")))?
                }];
                let weight = Tensor::from_vec(&shape, reader.read(&wname, &shape)?)?;
                let bias = reader.read(&format!("{}.bias", layer.name), &[manifest.arch.classes])?;
                heads.push(Linear { weight, bias });
            }
        }
    }
    let model = ModelState::from_parts(manifest.arch, norm, convs, norms, heads)?;
    Ok((model, manifest))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelState<f32>, Manifest)> {
    from_bytes(&std::fs::read(path)?)
}

/// SHA-256 of a checkpoint's full byte content.
pub fn digest(model: &ModelState<f32>, meta: &CheckpointMeta) -> String {
    hex(&Sha256::digest(to_bytes(model, meta)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, Routing};
    use crate::normcore::{BranchTag, NormKind, NormMode};

    fn model(mode: NormMode) -> ModelState<f32> {
        let arch = Architecture::small_cnn(10).with_width(0.25).with_input(3, 8);
        let mut m: ModelState<f32> =
            build_model(arch, crate::normcore::NormConfig::new(NormKind::Batch, mode), 2, 4).unwrap();
        for (i, l) in m.norms.iter_mut().enumerate() {
            for (s, st) in l.stats.iter_mut().enumerate() {
                st.mean.iter_mut().for_each(|v| *v = 0.01 * (i + s) as f32);
                st.var.iter_mut().for_each(|v| *v = 1.0 + 0.5 * s as f32);
            }
        }
        m
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            config: "seed = 3\n".into(),
            epoch: 7,
            seed: 3,
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model(NormMode::Dual);
        let bytes = to_bytes(&m, &meta());
        let (back, manifest) = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back, &meta()), bytes);
        assert_eq!(manifest.layers.len(), m.convs.len() + m.norms.len() + m.heads.len());
        assert_eq!(
            (manifest.epoch, manifest.seed, manifest.config.as_str()),
            (7, 3, "seed = 3\n")
        );
        let x = Tensor::from_fn(&[4, 3, 8, 8], |i| ((i * 37 % 101) as f32) / 101.0);
        for tag in BranchTag::ALL {
            let a = m.logits(&x, &Routing::eval(tag)).unwrap();
            let b = back.logits(&x, &Routing::eval(tag)).unwrap();
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model(NormMode::DualNsOnly);
        save_checkpoint(&path, &m, &meta()).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap().0, m);
    }

    #[test]
    fn corrupted_blob_fails_checksum() {
        let m = model(NormMode::Dual);
        let mut bytes = to_bytes(&m, &meta());
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        assert!(matches!(from_bytes(&bytes), Err(Error::Checksum(name)) if name == "head.1.bias"));
    }

    #[test]
    fn truncated_and_versioned_files_rejected() {
        let m = model(NormMode::Single);
        let bytes = to_bytes(&m, &meta());
        assert!(
            matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(msg)) if msg.contains("truncated blob"))
        );
        let mut v2 = bytes.clone();
        v2[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(from_bytes(&v2), Err(Error::Version { found: 2, expected: 1 })));
        assert!(matches!(from_bytes(b"garbage"), Err(Error::Format(_))));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let m = model(NormMode::Dual);
        let bytes = to_bytes(&m, &meta());
        let (mut manifest, region) = split_header(&bytes).unwrap();
        manifest.blobs[0].shape[0] += 1;
        let json = serde_json::to_vec(&manifest).unwrap();
        let mut forged = Vec::new();
        forged.extend_from_slice(MAGIC);
        forged.extend_from_slice(&VERSION.to_le_bytes());
        forged.extend_from_slice(&(json.len() as u64).to_le_bytes());
        forged.extend_from_slice(&json);
        forged.extend_from_slice(region);
        assert!(from_bytes(&forged).is_err());
    }

    #[test]
    fn digest_is_stable() {
        let m = model(NormMode::Cross);
        assert_eq!(digest(&m, &meta()), digest(&m.clone(), &meta()));
        let mut other = m.clone();
        other.heads[0].bias[0] += 1.0;
        assert_ne!(digest(&m, &meta()), digest(&other, &meta()));
    }
}
