//! Model directories: `schema.json` plus `weights.bin`.
//!
//! `weights.bin` layout, all integers little-endian:
//!
//! ```text
//! magic   b"SDAIEW\0\x01"
//! u32     tensor count
//! per tensor: u32 name length, name (UTF-8), u32 rank, u64 × rank dims, u64 offset (in floats)
//! f32 × total   tensor data, concatenated in index order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{ArchConfig, Backbone, Head, HeadKind};
use crate::error::{Error, Result};
use crate::exif::{TagEntry, TagSchema};
use crate::nn::{Module, Param};
use crate::rng::{seeded, sha256_hex};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const SCHEMA_FILE: &str = "schema.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const MAGIC: &[u8; 8] = b"SDAIEW\0\x01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Backbone plus one head per EXIF tag.
    Pretext,
    /// Backbone plus a single sigmoid head.
    Binary,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub name: String,
    pub kind: HeadKind,
    pub outputs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub kind: ModelKind,
    pub arch: ArchConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<TagEntry>>,
    pub heads: Vec<HeadSpec>,
    /// Training iterations completed when the checkpoint was written.
    #[serde(default)]
    pub iteration: u64,
    /// Digest of the checkpoint this model was initialized from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_digest: Option<String>,
}

/// A backbone with its named heads.
#[derive(Clone, Debug)]
pub struct Model {
    pub kind: ModelKind,
    pub backbone: Backbone<f32>,
    pub heads: Vec<(String, Head<f32>)>,
    pub tags: Option<TagSchema>,
    pub iteration: u64,
    pub parent_digest: Option<String>,
}

impl Model {
    pub fn head(&self, name: &str) -> Option<&Head<f32>> {
        self.heads.iter().find(|(n, _)| n == name).map(|(_, h)| h)
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            version: CHECKPOINT_VERSION,
            kind: self.kind,
            arch: self.backbone.config,
            tags: self.tags.as_ref().map(|t| t.as_slice().to_vec()),
            heads: self
                .heads
                .iter()
                .map(|(name, h)| HeadSpec {
                    name: name.clone(),
                    kind: h.kind,
                    outputs: h.outputs(),
                })
                .collect(),
            iteration: self.iteration,
            parent_digest: self.parent_digest.clone(),
        }
    }

    pub fn weights_bytes(&self) -> Vec<u8> {
        encode_weights(self)
    }

    /// SHA-256 of `weights.bin` followed by the canonical `schema.json`.
    pub fn digest(&self) -> Result<String> {
        let mut bytes = self.weights_bytes();
        bytes.extend_from_slice(serde_json::to_string(&self.meta())?.as_bytes());
        Ok(sha256_hex(&bytes))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(SCHEMA_FILE), serde_json::to_string_pretty(&self.meta())?)?;
        fs::write(dir.join(WEIGHTS_FILE), self.weights_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_text = fs::read_to_string(dir.join(SCHEMA_FILE))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(SCHEMA_FILE).display())))?;
        let meta: CheckpointMeta = serde_json::from_str(&meta_text)?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", meta.version)));
        }
        let bytes = fs::read(dir.join(WEIGHTS_FILE))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(WEIGHTS_FILE).display())))?;
        let tensors = decode_weights(&bytes)?;
        let mut model = Self::skeleton(&meta)?;
        model.assign(tensors)?;
        Ok(model)
    }

    /// A model with the right shapes and throwaway values.
    fn skeleton(meta: &CheckpointMeta) -> Result<Self> {
        let backbone = Backbone::new(meta.arch, 0)?;
        let mut rng = seeded(0);
        let d = backbone.token_dim();
        let heads = meta
            .heads
            .iter()
            .map(|s| (s.name.clone(), Head::new(&s.name, s.kind, d, s.outputs, &mut rng)))
            .collect();
        let tags = meta.tags.clone().map(TagSchema::from_entries).transpose()?;
        Ok(Self {
            kind: meta.kind,
            backbone,
            heads,
            tags,
            iteration: meta.iteration,
            parent_digest: meta.parent_digest.clone(),
        })
    }

    fn assign(&mut self, mut tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        let mut missing = Vec::new();
        let mut bad_shape = Vec::new();
        let mut fill = |p: &mut Param<f32>| match tensors.remove(&p.name) {
            Some((shape, data)) if shape == p.shape => p.value = data,
            Some((shape, _)) => bad_shape.push(format!("{} {:?} vs {:?}", p.name, shape, p.shape)),
            None => missing.push(p.name.clone()),
        };
        self.backbone.visit_mut(&mut fill);
        for (_, h) in &mut self.heads {
            h.visit_mut(&mut fill);
        }
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!("missing tensors: {}", missing.join(", "))));
        }
        if !bad_shape.is_empty() {
            return Err(Error::Checkpoint(format!("shape mismatch: {}", bad_shape.join("; "))));
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }
}

impl Module<f32> for Model {
    fn visit(&self, f: &mut dyn FnMut(&Param<f32>)) {
        self.backbone.visit(f);
        for (_, h) in &self.heads {
            h.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<f32>)) {
        self.backbone.visit_mut(f);
        for (_, h) in &mut self.heads {
            h.visit_mut(f);
        }
    }
}

/// Serializes every parameter of `module` in visit order.
pub fn encode_weights(module: &dyn Module<f32>) -> Vec<u8> {
    let mut count = 0u32;
    module.visit(&mut |_| count += 1);
    let mut out = Vec::with_capacity(64 * count as usize + 4 * module.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&count.to_le_bytes());
    let mut offset = 0u64;
    module.visit(&mut |p| {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += p.len() as u64;
    });
    module.visit(&mut |p| {
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("weights truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Tensors by name: `(shape, values)`.
pub type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

/// Parses `weights.bin` into a [`TensorMap`].
pub fn decode_weights(bytes: &[u8]) -> Result<TensorMap> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a weights file".into()));
    }
    let count = r.u32()? as usize;
    let mut index = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = r.u64()? as usize;
        index.push((name, shape, offset));
    }
    let data = &bytes[r.pos..];
    if !data.len().is_multiple_of(4) {
        return Err(Error::Checkpoint("weights payload is not a whole number of floats".into()));
    }
    let floats = data.len() / 4;
    let mut out = BTreeMap::new();
    for (name, shape, offset) in index {
        let n: usize = shape.iter().product();
        if offset + n > floats {
            return Err(Error::Checkpoint(format!("tensor `{name}` runs past the payload")));
        }
        let values = data[4 * offset..4 * (offset + n)]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if out.insert(name.clone(), (shape, values)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
    }
    Ok(out)
}
