//! Checkpoint directories: `checkpoint.toml` plus `params.bin`, and concept
//! token sidecars keyed by effect name.
//!
//! Blobs hold every tensor back to back in little-endian order of the
//! recorded dtype; the manifest lists name, shape and element offset.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserConfig, DenoiserParams, ParamGroup, CONCEPT};
use crate::error::{Error, Result};
use crate::manifest;
use crate::tensor::{Scalar, Tensor};

pub const FORMAT: &str = "refvfx-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "checkpoint.toml";
pub const BLOB: &str = "params.bin";

pub const CONCEPT_FORMAT: &str = "refvfx-concept";
pub const CONCEPT_MANIFEST: &str = "concept.toml";
pub const CONCEPT_BLOB: &str = "concept.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the blob.
    pub offset: usize,
    pub trainable: bool,
}

/// What produced the parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingInfo {
    pub phase: String,
    pub steps: usize,
    pub seed: u64,
    pub trainable: Vec<ParamGroup>,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub backbone_checksum: String,
    pub concept_checksum: String,
    pub config: DenoiserConfig,
    pub training: TrainingInfo,
    /// Resolved run configuration, when written by the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<toml::Table>,
    pub tensors: Vec<TensorEntry>,
}

fn encode<T: Scalar>(tensors: impl Iterator<Item = (String, Tensor<T>)>, trainable: &[ParamGroup]) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            trainable: trainable.contains(&DenoiserParams::<T>::group(&name)),
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for &v in t.data() {
            v.write_le(&mut blob);
        }
    }
    (entries, blob)
}

fn decode<T: Scalar>(dtype: &str, blob: &[u8], entries: &[TensorEntry]) -> Result<BTreeMap<String, Tensor<T>>> {
    let width = match dtype {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::Format(format!("unsupported dtype `{other}`"))),
    };
    let total: usize = entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if blob.len() != total * width {
        return Err(Error::Format(format!(
            "blob holds {} bytes, manifest describes {}",
            blob.len(),
            total * width
        )));
    }
    let mut out = BTreeMap::new();
    for e in entries {
        let n: usize = e.shape.iter().product();
        let bytes = blob
            .get(e.offset * width..(e.offset + n) * width)
            .ok_or_else(|| Error::Format(format!("tensor `{}` runs past the blob", e.name)))?;
        let data: Vec<T> = bytes
            .chunks_exact(width)
            .map(|c| {
                if width == 4 {
                    T::of(f32::read_le(c) as f64)
                } else {
                    T::of(f64::read_le(c))
                }
            })
            .collect();
        out.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    Ok(out)
}

/// Write atomically. Identical inputs give byte-identical files.
pub fn save<T: Scalar>(dir: &Path, params: &DenoiserParams<T>, training: &TrainingInfo, run: Option<&toml::Table>) -> Result<CheckpointManifest> {
    let (tensors, blob) = encode(params.iter().map(|(n, t)| (n.to_string(), t.clone())), &training.trainable);
    let m = CheckpointManifest {
        format: FORMAT.into(),
        version: VERSION,
        dtype: T::DTYPE.into(),
        backbone_checksum: params.backbone_checksum(),
        concept_checksum: params.checksum(&[ParamGroup::Concept]),
        config: params.config.clone(),
        training: training.clone(),
        run: run.cloned(),
        tensors,
    };
    let text = manifest::to_text(&m)?;
    manifest::write_dir_atomic(dir, |tmp| {
        fs::write(tmp.join(BLOB), &blob)?;
        fs::write(tmp.join(MANIFEST), text.as_bytes())?;
        Ok(())
    })?;
    Ok(m)
}

/// Load, converting to `T` when needed, and verify the stored checksums.
pub fn load<T: Scalar>(dir: &Path) -> Result<(DenoiserParams<T>, CheckpointManifest)> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::Precondition(format!("no checkpoint at {}", dir.display())));
    }
    let m: CheckpointManifest = manifest::read(&path)?;
    if m.format != FORMAT {
        return Err(Error::Format(format!("`{}` is not a checkpoint", m.format)));
    }
    if m.version != VERSION {
        return Err(Error::Format(format!("checkpoint version {} unsupported (expected {VERSION})", m.version)));
    }
    let blob = fs::read(dir.join(BLOB))?;
    let tensors = decode::<T>(&m.dtype, &blob, &m.tensors)?;
    let expected = DenoiserParams::<T>::zeros(m.config.clone())?;
    let missing: Vec<&str> = expected.iter().map(|(n, _)| n).filter(|n| !tensors.contains_key(*n)).collect();
    if !missing.is_empty() {
        return Err(Error::Format(format!("checkpoint lacks {}", missing.join(", "))));
    }
    let params = DenoiserParams::from_tensors(m.config.clone(), tensors)?;
    if m.dtype == T::DTYPE
        && (params.backbone_checksum() != m.backbone_checksum || params.checksum(&[ParamGroup::Concept]) != m.concept_checksum)
    {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }
    Ok((params, m))
}

/// Concept tokens learnt for one effect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptManifest {
    pub format: String,
    pub version: u32,
    pub effect: String,
    pub dtype: String,
    pub tokens: usize,
    pub model_dim: usize,
    /// Backbone the tokens were trained against.
    pub backbone_checksum: String,
    pub steps: usize,
    pub seed: u64,
}

/// Sidecar directory for `effect` under `root`.
pub fn concept_dir(root: &Path, effect: &str) -> std::path::PathBuf {
    root.join(effect)
}

pub fn save_concept<T: Scalar>(dir: &Path, tokens: &Tensor<T>, info: &ConceptManifest) -> Result<()> {
    let (_, blob) = encode(std::iter::once((CONCEPT.to_string(), tokens.clone())), &[]);
    let m = ConceptManifest {
        format: CONCEPT_FORMAT.into(),
        version: VERSION,
        dtype: T::DTYPE.into(),
        tokens: tokens.shape()[0],
        model_dim: tokens.shape()[1],
        ..info.clone()
    };
    let text = manifest::to_text(&m)?;
    manifest::write_dir_atomic(dir, |tmp| {
        fs::write(tmp.join(CONCEPT_BLOB), &blob)?;
        fs::write(tmp.join(CONCEPT_MANIFEST), text.as_bytes())?;
        Ok(())
    })
}

pub fn load_concept<T: Scalar>(dir: &Path) -> Result<(Tensor<T>, ConceptManifest)> {
    let m: ConceptManifest = manifest::read(&dir.join(CONCEPT_MANIFEST))?;
    if m.format != CONCEPT_FORMAT || m.version != VERSION {
        return Err(Error::Format(format!("`{}` v{} is not a concept sidecar", m.format, m.version)));
    }
    let blob = fs::read(dir.join(CONCEPT_BLOB))?;
    let entry = TensorEntry {
        name: CONCEPT.into(),
        shape: vec![m.tokens, m.model_dim],
        offset: 0,
        trainable: true,
    };
    let mut t = decode::<T>(&m.dtype, &blob, &[entry])?;
    Ok((t.remove(CONCEPT).expect("decoded"), m))
}
