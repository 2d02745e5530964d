//! Concept-pool extraction: merge near-duplicate candidate phrases, score each
//! survivor by how it separates the label set, keep the top `K`.

use std::cmp::Ordering;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::data_io::EmbeddingTable;
use crate::error::{Error, Result};
use crate::numerics::{cosine, Tensor};

pub const DEFAULT_TAU_C: f64 = 0.1;
pub const DEFAULT_TAU_R: f64 = 0.85;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredConcept {
    pub name: String,
    pub embedding: Vec<f64>,
    /// Mean cosine similarity to the label names.
    pub mu: f64,
    /// Population standard deviation of those similarities.
    pub sigma: f64,
    /// `sigma` when `mu >= tau_r`, else 0.
    pub relevance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptPool {
    pub concepts: Vec<ScoredConcept>,
    pub tau_c: f64,
    pub tau_r: f64,
    pub k: usize,
    /// How many zero-relevance concepts were taken to reach `k`.
    pub zero_relevance_fill: usize,
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Keeps the smaller index as root so every root is its component's
    /// lowest member.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        match ra.cmp(&rb) {
            Ordering::Less => self.parent[rb] = ra,
            Ordering::Greater => self.parent[ra] = rb,
            Ordering::Equal => {}
        }
    }
}

/// Merges every pair with cosine similarity above `tau_c` into one connected
/// component and keeps the lowest-index member of each, in original order.
pub fn dedup(candidates: &EmbeddingTable, tau_c: f64) -> Result<EmbeddingTable> {
    if !candidates.is_normalized() {
        return Err(Error::invalid("dedup needs normalized candidate embeddings"));
    }
    if !(0.0..=1.0).contains(&tau_c) {
        return Err(Error::invalid(format!("tau_c must be in [0, 1], got {tau_c}")));
    }
    let n = candidates.len();
    let mut sets = DisjointSet::new(n);
    for i in 0..n {
        for j in i + 1..n {
            if cosine(candidates.vector(i), candidates.vector(j)) > tau_c {
                sets.union(i, j);
            }
        }
    }
    let keep: Vec<usize> = (0..n).filter(|&i| sets.find(i) == i).collect();
    Ok(candidates.subset(&keep))
}

/// Scores every concept against the label embeddings.
pub fn relevance(
    pool: &EmbeddingTable,
    labels: &EmbeddingTable,
    tau_r: f64,
) -> Result<Vec<ScoredConcept>> {
    if !pool.is_normalized() || !labels.is_normalized() {
        return Err(Error::invalid("relevance needs normalized embeddings"));
    }
    if labels.is_empty() {
        return Err(Error::invalid("relevance needs at least one label"));
    }
    if pool.dim() != labels.dim() {
        return Err(Error::shape(
            "relevance",
            format!("concept dim {} vs label dim {}", pool.dim(), labels.dim()),
        ));
    }
    let ny = labels.len() as f64;
    Ok((0..pool.len())
        .map(|i| {
            let c = pool.vector(i);
            let sims: Vec<f64> = (0..labels.len())
                .map(|y| cosine(c, labels.vector(y)))
                .collect();
            let mu = sims.iter().sum::<f64>() / ny;
            let sigma = (sims.iter().map(|s| (s - mu) * (s - mu)).sum::<f64>() / ny).sqrt();
            ScoredConcept {
                name: pool.names()[i].clone(),
                embedding: c.to_vec(),
                mu,
                sigma,
                relevance: if mu >= tau_r { sigma } else { 0.0 },
            }
        })
        .collect())
}

/// Relevance descending, then name ascending.
pub fn rank_order(a: &ScoredConcept, b: &ScoredConcept) -> Ordering {
    b.relevance
        .total_cmp(&a.relevance)
        .then_with(|| a.name.cmp(&b.name))
}

pub fn select_top_k(mut scored: Vec<ScoredConcept>, k: usize) -> Result<ConceptPool> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if scored.is_empty() {
        return Err(Error::invalid("no scored concepts to select from"));
    }
    scored.sort_by(rank_order);
    scored.truncate(k);
    let zero_relevance_fill = scored.iter().filter(|c| c.relevance <= 0.0).count();
    if zero_relevance_fill > 0 {
        warn!(
            zero_relevance_fill,
            k, "fewer than K concepts have positive relevance; filling with zero-relevance concepts"
        );
    }
    Ok(ConceptPool {
        concepts: scored,
        tau_c: f64::NAN,
        tau_r: f64::NAN,
        k,
        zero_relevance_fill,
    })
}

/// dedup → relevance → top-K.
pub fn build_pool(
    candidates: &EmbeddingTable,
    labels: &EmbeddingTable,
    tau_c: f64,
    tau_r: f64,
    k: usize,
) -> Result<ConceptPool> {
    let survivors = dedup(candidates, tau_c)?;
    let scored = relevance(&survivors, labels, tau_r)?;
    let mut pool = select_top_k(scored, k)?;
    pool.tau_c = tau_c;
    pool.tau_r = tau_r;
    Ok(pool)
}

impl ConceptPool {
    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.concepts.first().map_or(0, |c| c.embedding.len())
    }

    pub fn names(&self) -> Vec<String> {
        self.concepts.iter().map(|c| c.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.concepts.iter().position(|c| c.name == name)
    }

    /// `K × d` matrix of concept embeddings.
    pub fn embedding_matrix(&self) -> Tensor {
        let data = self
            .concepts
            .iter()
            .flat_map(|c| c.embedding.iter().copied())
            .collect();
        Tensor::matrix(self.len(), self.dim(), data).expect("uniform concept dims")
    }

    pub fn to_json(&self) -> Result<String> {
        let file = PoolFile {
            tau_c: self.tau_c,
            tau_r: self.tau_r,
            k: self.k,
            dim: self.dim(),
            zero_relevance_fill: self.zero_relevance_fill,
            concepts: self
                .concepts
                .iter()
                .map(|c| PoolEntry {
                    name: c.name.clone(),
                    mu: c.mu,
                    sigma: c.sigma,
                    relevance: c.relevance,
                    embedding: encode_f32(&c.embedding),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: PoolFile = serde_json::from_str(text)?;
        let concepts = file
            .concepts
            .into_iter()
            .map(|e| {
                let embedding = decode_f32(&e.embedding)?;
                if embedding.len() != file.dim {
                    return Err(Error::CorruptPayload(format!(
                        "concept `{}` has {} values, pool dim is {}",
                        e.name,
                        embedding.len(),
                        file.dim
                    )));
                }
                Ok(ScoredConcept {
                    name: e.name,
                    embedding,
                    mu: e.mu,
                    sigma: e.sigma,
                    relevance: e.relevance,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            concepts,
            tau_c: file.tau_c,
            tau_r: file.tau_r,
            k: file.k,
            zero_relevance_fill: file.zero_relevance_fill,
        })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize, Deserialize)]
struct PoolFile {
    tau_c: f64,
    tau_r: f64,
    k: usize,
    dim: usize,
    #[serde(default)]
    zero_relevance_fill: usize,
    concepts: Vec<PoolEntry>,
}

#[derive(Serialize, Deserialize)]
struct PoolEntry {
    name: String,
    mu: f64,
    sigma: f64,
    relevance: f64,
    /// Base64 of little-endian `f32` values.
    embedding: String,
}

fn encode_f32(v: &[f64]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode_f32(s: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::CorruptPayload(format!("bad base64 embedding: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::CorruptPayload("embedding length not a multiple of 4".into()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect())
}
