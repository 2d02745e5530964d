//! Binary checkpoints.
//!
//! Layout: magic `MSGTCKPT1` · u64 LE header length · header JSON · u64 LE
//! index length · index JSON · tensor blob of f32 LE values. The header holds
//! the architecture, concept and label names and training metadata; the index
//! maps every tensor name to its offset (in values) and shape. Parameters are
//! kept at f32 precision in memory, so a reload reproduces the model exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_io::TaskKind;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"MSGTCKPT1";
pub const FORMAT_VERSION: u32 = 1;
const CONCEPTS_TENSOR: &str = "concepts";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub task: TaskKind,
    pub dim: usize,
    pub n_concepts: usize,
    pub n_classes: usize,
    pub config: ModelConfig,
    pub concept_names: Vec<String>,
    pub label_names: Vec<String>,
    /// Training configuration as it was supplied.
    #[serde(default)]
    pub train_config: Option<serde_json::Value>,
    #[serde(default)]
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

/// A model plus the metadata stored alongside it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub train_config: Option<serde_json::Value>,
    pub loss_history: Vec<f64>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            train_config: None,
            loss_history: Vec::new(),
        }
    }

    fn header(&self) -> CheckpointHeader {
        let m = &self.model;
        CheckpointHeader {
            format_version: FORMAT_VERSION,
            task: m.task,
            dim: m.dim(),
            n_concepts: m.n_concepts(),
            n_classes: m.n_classes(),
            config: m.config.clone(),
            concept_names: m.concept_names.clone(),
            label_names: m.label_names.clone(),
            train_config: self.train_config.clone(),
            loss_history: self.loss_history.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = &self.model.store;
        let mut tensors: Vec<(&str, &Tensor)> = vec![(CONCEPTS_TENSOR, self.model.concepts())];
        tensors.extend(store.ids().map(|id| (store.name(id), store.value(id))));
        let mut index = Vec::with_capacity(tensors.len());
        let mut blob = Vec::new();
        let mut offset = 0;
        for (name, t) in tensors {
            index.push(IndexEntry {
                name: name.to_string(),
                offset,
                shape: t.shape().to_vec(),
            });
            for &v in t.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
            offset += t.numel();
        }
        let header = serde_json::to_vec(&self.header())?;
        let index = serde_json::to_vec(&index)?;
        let mut out = Vec::with_capacity(9 + 16 + header.len() + index.len() + blob.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(index.len() as u64).to_le_bytes());
        out.extend_from_slice(&index);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(Error::NotCheckpointFile);
        }
        let mut cur = Cursor {
            bytes,
            pos: CHECKPOINT_MAGIC.len(),
        };
        let header: CheckpointHeader = serde_json::from_slice(cur.section("header")?)
            .map_err(|e| Error::CorruptPayload(format!("checkpoint header: {e}")))?;
        let index: Vec<IndexEntry> = serde_json::from_slice(cur.section("index")?)
            .map_err(|e| Error::CorruptPayload(format!("checkpoint index: {e}")))?;
        let blob = &bytes[cur.pos..];
        if blob.len() % 4 != 0 {
            return Err(Error::CorruptPayload("tensor blob is not a whole number of f32 values".into()));
        }
        let values: Vec<f64> = blob
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        if header.format_version != FORMAT_VERSION {
            return Err(Error::CorruptPayload(format!(
                "unsupported checkpoint version {}",
                header.format_version
            )));
        }

        let read = |entry: &IndexEntry| -> Result<Tensor> {
            let n: usize = entry.shape.iter().product();
            let end = entry.offset.checked_add(n).filter(|&e| e <= values.len()).ok_or_else(|| {
                Error::CorruptPayload(format!("tensor `{}` runs past the blob", entry.name))
            })?;
            Tensor::new(entry.shape.clone(), values[entry.offset..end].to_vec())
        };
        let find = |name: &str| {
            index
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::CorruptPayload(format!("missing tensor `{name}`")))
        };

        let concepts = read(find(CONCEPTS_TENSOR)?)?;
        if concepts.shape() != [header.n_concepts, header.dim] || header.concept_names.len() != header.n_concepts {
            return Err(Error::CorruptPayload(format!(
                "concept tensor {:?} does not match header ({} × {})",
                concepts.shape(),
                header.n_concepts,
                header.dim
            )));
        }
        if header.label_names.len() != header.n_classes {
            return Err(Error::CorruptPayload("label names do not match class count".into()));
        }
        let mut model = Model::new(
            header.config,
            header.task,
            header.concept_names,
            concepts,
            header.label_names,
            0,
        )?;
        if index.len() != model.store.len() + 1 {
            return Err(Error::CorruptPayload(format!(
                "checkpoint has {} tensors, architecture expects {}",
                index.len(),
                model.store.len() + 1
            )));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let entry = find(model.store.name(id))?;
            if entry.shape != model.store.value(id).shape() {
                return Err(Error::CorruptPayload(format!(
                    "tensor `{}` has shape {:?}, architecture expects {:?}",
                    entry.name,
                    entry.shape,
                    model.store.value(id).shape()
                )));
            }
            *model.store.value_mut(id) = read(entry)?;
        }
        Ok(Self {
            model,
            train_config: header.train_config,
            loss_history: header.loss_history,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Short content hash identifying the serialized model.
    pub fn version(&self) -> Result<String> {
        Ok(model_version(&self.to_bytes()?))
    }
}

pub fn model_version(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn section(&mut self, what: &str) -> Result<&'a [u8]> {
        let truncated = || Error::CorruptPayload(format!("truncated checkpoint {what}"));
        let len_end = self.pos.checked_add(8).filter(|&e| e <= self.bytes.len()).ok_or_else(truncated)?;
        let len = u64::from_le_bytes(self.bytes[self.pos..len_end].try_into().expect("8 bytes"));
        let end = usize::try_from(len)
            .ok()
            .and_then(|l| len_end.checked_add(l))
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(truncated)?;
        self.pos = end;
        Ok(&self.bytes[len_end..end])
    }
}
