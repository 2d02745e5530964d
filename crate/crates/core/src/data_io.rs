//! Embedding tables, dataset manifests, candidate-phrase files and the
//! deterministic pseudo-embedder that stands in for a real text/image encoder.
//!
//! Embedding file layout (all integers little-endian):
//!
//! ```text
//! "MSGTEMB1" | n: u32 | d: u32 | normalized: u8 | n NUL-terminated UTF-8 names | n·d f32
//! ```

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_norm, Tensor};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"MSGTEMB1";

/// Tolerance on unit norms of stored vectors. Payloads are `f32`, so a
/// unit vector written to disk and read back is only unit to ~1e-7.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Named embedding rows (`n × d`).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    names: Vec<String>,
    vectors: Tensor,
    normalized: bool,
}

impl EmbeddingTable {
    pub fn new(names: Vec<String>, rows: Vec<Vec<f64>>, dim: usize, normalized: bool) -> Result<Self> {
        if names.len() != rows.len() {
            return Err(Error::invalid(format!(
                "{} names for {} rows",
                names.len(),
                rows.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::invalid(format!("duplicate embedding name `{dup}`")));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (name, r) in names.iter().zip(&rows) {
            if r.len() != dim {
                return Err(Error::invalid(format!(
                    "row `{name}` has dimension {}, expected {dim}",
                    r.len()
                )));
            }
            if normalized && (l2_norm(r) - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::invalid(format!("row `{name}` is not unit norm")));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            names,
            vectors: Tensor::matrix(rows.len(), dim, data)?,
            normalized,
        })
    }

    /// Builds a table after ℓ2-normalising every row.
    pub fn normalized_from(names: Vec<String>, rows: Vec<Vec<f64>>, dim: usize) -> Result<Self> {
        let rows = rows
            .into_iter()
            .map(|r| {
                let n = l2_norm(&r);
                if n == 0.0 {
                    Err(Error::invalid("cannot normalise a zero vector"))
                } else {
                    Ok(r.into_iter().map(|x| x / n).collect())
                }
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Self::new(names, rows, dim, true)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        self.vectors.row_slice(i)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Table restricted to the given rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let data = rows.iter().flat_map(|&i| self.vector(i).to_vec()).collect();
        Self {
            names: rows.iter().map(|&i| self.names[i].clone()).collect(),
            vectors: Tensor::matrix(rows.len(), self.dim(), data).expect("subset shape"),
            normalized: self.normalized,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.push(u8::from(self.normalized));
        for n in &self.names {
            out.extend_from_slice(n.as_bytes());
            out.push(0);
        }
        for &v in self.vectors.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != EMBEDDING_MAGIC {
            return Err(Error::NotEmbeddingFile);
        }
        let corrupt = |m: &str| Error::CorruptPayload(m.to_string());
        if bytes.len() < 17 {
            return Err(corrupt("truncated header"));
        }
        let n = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let d = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let normalized = match bytes[16] {
            0 => false,
            1 => true,
            _ => return Err(corrupt("bad normalized flag")),
        };
        let mut pos = 17;
        let mut names = Vec::with_capacity(n);
        for _ in 0..n {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == 0)
                .ok_or_else(|| corrupt("unterminated name"))?;
            let name = std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| corrupt("name is not UTF-8"))?;
            names.push(name.to_string());
            pos += end + 1;
        }
        let payload = &bytes[pos..];
        if payload.len() != n * d * 4 {
            return Err(corrupt(&format!(
                "expected {} payload bytes for {n}x{d}, found {}",
                n * d * 4,
                payload.len()
            )));
        }
        let rows = payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect::<Vec<f64>>()
            .chunks(d.max(1))
            .take(n)
            .map(<[f64]>::to_vec)
            .collect::<Vec<_>>();
        let rows = if d == 0 { vec![vec![]; n] } else { rows };
        Self::new(names, rows, d, normalized).map_err(|e| Error::CorruptPayload(e.to_string()))
    }
}

pub fn load_embedding_file(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingTable::from_bytes(&bytes)
}

pub fn write_embedding_file(path: impl AsRef<Path>, table: &EmbeddingTable) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, table.to_bytes()).map_err(|e| Error::io(path, e))
}

/// 64-bit FNV-1a over the UTF-8 bytes of `text`.
pub fn fnv1a64(text: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    text.bytes()
        .fold(OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

/// Deterministic unit vector for `text`: a ChaCha8 stream keyed by
/// `fnv1a64(text) ^ seed` yields `d` standard normals, which are then
/// ℓ2-normalised.
pub fn pseudo_embed(text: &str, d: usize, seed: u64) -> Result<Vec<f64>> {
    if d < 2 {
        return Err(Error::invalid(format!("embedding dimension must be >= 2, got {d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(text) ^ seed);
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = l2_norm(&v);
    Ok(v.into_iter().map(|x| x / n).collect())
}

/// Text encoder used for question/answer tokens and hint text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl PseudoEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>> {
        pseudo_embed(text, self.dim, self.seed)
    }

    pub fn embed_table(&self, texts: &[String]) -> Result<EmbeddingTable> {
        let rows = texts.iter().map(|t| self.embed(t)).collect::<Result<Vec<_>>>()?;
        EmbeddingTable::new(texts.to_vec(), rows, self.dim, true)
    }
}

/// Candidate concept phrases, one per non-blank line.
pub fn read_candidates(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_candidates(&text))
}

pub fn parse_candidates(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    SingleLabel,
    MultiLabel,
}

/// Ground-truth state of one concept for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Annotation {
    Present,
    Absent,
    Unknown,
}

/// Raw annotation code used in manifests: `1`, `0`, `-1` (uncertain) or `null`.
pub type AnnotationCode = Option<i8>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    /// Names of rows in the view embedding table, one per view.
    pub views: Vec<String>,
    /// Positive label indices (exactly one for single-label tasks).
    pub labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub uncertain_labels: Vec<usize>,
    #[serde(default = "default_split")]
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hint_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept_annotations: Option<Vec<AnnotationCode>>,
    /// `(X, Y)` region centre per declared concept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_centers: Option<Vec<[f64; 2]>>,
}

fn default_split() -> String {
    "train".to_string()
}

impl SampleRecord {
    /// Per-concept annotations; uncertain codes become `Absent` when
    /// `uncertain_as_negative` is set and `Unknown` otherwise.
    pub fn annotations(&self, uncertain_as_negative: bool) -> Option<Vec<Annotation>> {
        self.concept_annotations.as_ref().map(|codes| {
            codes
                .iter()
                .map(|c| match c {
                    Some(1) => Annotation::Present,
                    Some(0) => Annotation::Absent,
                    Some(-1) if uncertain_as_negative => Annotation::Absent,
                    _ => Annotation::Unknown,
                })
                .collect()
        })
    }

    /// Binary target vector; uncertain labels count as negative under the
    /// default policy and as positive otherwise.
    pub fn targets(&self, n_classes: usize, uncertain_as_negative: bool) -> Vec<f64> {
        let mut t = vec![0.0; n_classes];
        for &l in &self.labels {
            t[l] = 1.0;
        }
        if !uncertain_as_negative {
            for &l in &self.uncertain_labels {
                t[l] = 1.0;
            }
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task: TaskKind,
    pub label_names: Vec<String>,
    /// Concept names that `concept_annotations` and `region_centers` index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept_names: Option<Vec<String>>,
    /// View embedding file, relative to the manifest.
    pub embeddings: PathBuf,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Manifest(m));
        if self.label_names.is_empty() {
            return bad("no label names".into());
        }
        let mut ids = HashSet::new();
        let n_concepts = self.concept_names.as_ref().map(Vec::len);
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return bad(format!("duplicate sample id `{}`", s.id));
            }
            if s.views.is_empty() {
                return bad(format!("sample `{}` has no views", s.id));
            }
            if let Some(l) = s
                .labels
                .iter()
                .chain(&s.uncertain_labels)
                .find(|&&l| l >= self.label_names.len())
            {
                return bad(format!("sample `{}` label {l} out of range", s.id));
            }
            if self.task == TaskKind::SingleLabel && s.labels.len() != 1 {
                return bad(format!(
                    "sample `{}` needs exactly one label for a single-label task",
                    s.id
                ));
            }
            for (what, len) in [
                ("concept_annotations", s.concept_annotations.as_ref().map(Vec::len)),
                ("region_centers", s.region_centers.as_ref().map(Vec::len)),
            ] {
                if let Some(len) = len {
                    match n_concepts {
                        None => return bad(format!("sample `{}` has {what} but no concept_names", s.id)),
                        Some(k) if k != len => {
                            return bad(format!(
                                "sample `{}` {what} has length {len}, expected {k}",
                                s.id
                            ))
                        }
                        _ => {}
                    }
                }
            }
            if let Some(codes) = &s.concept_annotations {
                if let Some(c) = codes.iter().flatten().find(|c| !matches!(c, -1..=1)) {
                    return bad(format!("sample `{}` annotation code {c} not in {{-1,0,1}}", s.id));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn samples_in(&self, split: &str) -> Vec<&SampleRecord> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }
}

/// A validated manifest with its view embeddings resolved.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub views: EmbeddingTable,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, views: EmbeddingTable) -> Result<Self> {
        manifest.validate()?;
        let index: HashMap<String, usize> = views
            .names()
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        for s in &manifest.samples {
            if let Some(v) = s.views.iter().find(|v| !index.contains_key(*v)) {
                return Err(Error::Manifest(format!(
                    "sample `{}` references unknown view `{v}`",
                    s.id
                )));
            }
        }
        Ok(Self {
            manifest,
            views,
            index,
        })
    }

    /// Reads a manifest and the embedding file it points at.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest = DatasetManifest::from_json(&text)?;
        let emb_path = path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&manifest.embeddings);
        let views = load_embedding_file(&emb_path)?;
        Self::new(manifest, views)
    }

    pub fn sample(&self, id: &str) -> Option<&SampleRecord> {
        self.manifest.samples.iter().find(|s| s.id == id)
    }

    pub fn view_vectors(&self, sample: &SampleRecord) -> Vec<Vec<f64>> {
        sample
            .views
            .iter()
            .map(|v| self.views.vector(self.index[v]).to_vec())
            .collect()
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.label_names.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> EmbeddingTable {
        EmbeddingTable::new(
            vec!["a".into(), "b".into()],
            vec![vec![0.5, 0.5, 0.5, 0.5], vec![1.0, 0.0, 0.0, 0.0]],
            4,
            true,
        )
        .unwrap()
    }

    #[test]
    fn empty_table_round_trip() {
        let t = EmbeddingTable::new(vec![], vec![], 8, false).unwrap();
        let back = EmbeddingTable::from_bytes(&t.to_bytes()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.dim(), 8);
    }

    #[test]
    fn two_rows_round_trip_bit_identical() {
        let t = table();
        let back = EmbeddingTable::from_bytes(&t.to_bytes()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let bytes = table().to_bytes();
        let err = EmbeddingTable::from_bytes(&bytes[..bytes.len() - 6]).unwrap_err();
        assert!(err.to_string().starts_with("corrupt payload"), "{err}");
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = table().to_bytes();
        bytes[0] = b'X';
        let err = EmbeddingTable::from_bytes(&bytes).unwrap_err();
        assert_eq!(err.to_string(), "not an embedding file");
    }

    #[test]
    fn normalized_flag_is_verified() {
        let mut bytes = EmbeddingTable::new(vec!["x".into()], vec![vec![2.0, 0.0]], 2, false)
            .unwrap()
            .to_bytes();
        bytes[16] = 1;
        assert!(matches!(
            EmbeddingTable::from_bytes(&bytes),
            Err(Error::CorruptPayload(_))
        ));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64("a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64("foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn pseudo_embed_contract() {
        let a = pseudo_embed("a", 8, 0).unwrap();
        assert_eq!(a, pseudo_embed("a", 8, 0).unwrap());
        assert!((l2_norm(&a) - 1.0).abs() < 1e-12);
        let b = pseudo_embed("b", 8, 0).unwrap();
        assert!(crate::numerics::cosine(&a, &b) < 0.99);
        assert_ne!(a, pseudo_embed("a", 8, 1).unwrap());
        assert!(pseudo_embed("a", 1, 0).is_err());
    }

    #[test]
    fn candidates_skip_blank_lines() {
        assert_eq!(
            parse_candidates("edema\n\n  pleural effusion \n"),
            vec!["edema", "pleural effusion"]
        );
    }

    fn manifest() -> DatasetManifest {
        DatasetManifest::from_json(
            r#"{
              "task": "multi-label",
              "label_names": ["a", "b"],
              "concept_names": ["c0", "c1", "c2"],
              "embeddings": "views.emb",
              "samples": [
                {"id": "s1", "views": ["v1"], "labels": [1], "uncertain_labels": [0],
                 "concept_annotations": [1, -1, null]},
                {"id": "s2", "views": ["v2", "v3"], "labels": [], "split": "test"}
              ]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn uncertain_maps_to_negative_by_default() {
        let m = manifest();
        let s = &m.samples[0];
        assert_eq!(
            s.annotations(true).unwrap(),
            vec![Annotation::Present, Annotation::Absent, Annotation::Unknown]
        );
        assert_eq!(s.annotations(false).unwrap()[1], Annotation::Unknown);
        assert_eq!(s.targets(2, true), vec![0.0, 1.0]);
        assert_eq!(s.targets(2, false), vec![1.0, 1.0]);
        assert_eq!(m.samples[1].split, "test");
    }

    #[test]
    fn manifest_validation_rejects_bad_input() {
        let mut m = manifest();
        m.samples[1].id = "s1".into();
        assert!(m.validate().is_err());

        let mut m = manifest();
        m.samples[0].labels = vec![2];
        assert!(m.validate().is_err());

        let mut m = manifest();
        m.samples[0].concept_annotations = Some(vec![Some(1)]);
        assert!(m.validate().is_err());

        let mut m = manifest();
        m.samples[0].views.clear();
        assert!(m.validate().is_err());

        let mut m = manifest();
        m.task = TaskKind::SingleLabel;
        assert!(m.validate().is_err());
    }
}
