//! Inference over one loaded checkpoint, shared by the CLI and the HTTP
//! service. An `Engine` is immutable after loading; every request builds its
//! own input and clamp set.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use msgt_core::bottleneck::ClampSet;
use msgt_core::checkpoint::{model_version, Checkpoint};
use msgt_core::concept_pool::ConceptPool;
use msgt_core::data_io::{Dataset, SampleRecord};
use msgt_core::model::{Model, SampleInput};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("unknown sample `{0}`")]
    UnknownSample(String),

    #[error("bad clamp: {0}")]
    BadClamp(String),

    #[error("bad request: {0}")]
    BadRequest(String),

    #[error(transparent)]
    Core(#[from] msgt_core::Error),
}

/// One requested clamp. Concepts may be named by index or by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClampRequest {
    #[serde(default, alias = "concept_index", skip_serializing_if = "Option::is_none")]
    pub index: Option<i64>,
    #[serde(default, alias = "concept_name", skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub value: f64,
}

/// Body of `/intervene` and the format of intervention files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InterventionRequest {
    #[serde(default)]
    pub sample_id: String,
    #[serde(default)]
    pub clamps: Vec<ClampRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hint_text: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct PredictRequest {
    pub sample_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub index: usize,
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClampSource {
    Request,
    Hint,
    Annotation,
}

/// Which quantity a clamp overwrote: the concept score `z` or the prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClampTarget {
    Z,
    Prior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedClamp {
    pub index: usize,
    pub name: String,
    pub value: f64,
    pub source: ClampSource,
    pub target: ClampTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProb {
    pub name: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResponse {
    pub schema_version: u32,
    pub sample_id: String,
    pub concept_scores: Vec<ConceptScore>,
    pub clamped: Vec<AppliedClamp>,
    pub class_probs: Vec<ClassProb>,
    pub model_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptInfo {
    pub index: usize,
    pub name: String,
    /// Pool relevance score, when a pool was supplied.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relevance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptsResponse {
    pub schema_version: u32,
    pub concepts: Vec<ConceptInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleInfo {
    pub id: String,
    pub split: String,
    pub labels: Vec<String>,
    pub n_views: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplesResponse {
    pub schema_version: u32,
    pub samples: Vec<SampleInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub schema_version: u32,
    pub status: String,
    pub model_version: String,
    pub n_concepts: usize,
    pub n_classes: usize,
}

#[derive(Debug)]
pub struct Engine {
    pub model: Model,
    pub dataset: Dataset,
    pub pool: Option<ConceptPool>,
    pub model_version: String,
}

impl Engine {
    pub fn new(checkpoint: Checkpoint, dataset: Dataset, pool: Option<ConceptPool>) -> Result<Self, EngineError> {
        let model_version = checkpoint.version()?;
        Self::with_version(checkpoint.model, dataset, pool, model_version)
    }

    fn with_version(
        model: Model,
        dataset: Dataset,
        pool: Option<ConceptPool>,
        model_version: String,
    ) -> Result<Self, EngineError> {
        if dataset.views.dim() != model.dim() {
            return Err(EngineError::BadRequest(format!(
                "manifest views have dimension {}, checkpoint expects {}",
                dataset.views.dim(),
                model.dim()
            )));
        }
        if dataset.manifest.label_names != model.label_names {
            return Err(EngineError::BadRequest(
                "manifest label names differ from the checkpoint".to_string(),
            ));
        }
        if let Some(p) = &pool {
            if p.names() != model.concept_names {
                return Err(EngineError::BadRequest(
                    "pool concepts differ from the checkpoint".to_string(),
                ));
            }
        }
        Ok(Self {
            model,
            dataset,
            pool,
            model_version,
        })
    }

    /// Loads a checkpoint, its manifest and optionally the pool it was
    /// trained on. The model version hashes the checkpoint file bytes.
    pub fn load(ckpt: &Path, manifest: &Path, pool: Option<&Path>) -> Result<Self, EngineError> {
        let bytes = fs::read(ckpt).map_err(|e| msgt_core::Error::Io {
            path: ckpt.to_path_buf(),
            source: e,
        })?;
        let checkpoint = Checkpoint::from_bytes(&bytes)?;
        let dataset = Dataset::load(manifest)?;
        let pool = pool.map(ConceptPool::load).transpose()?;
        Self::with_version(checkpoint.model, dataset, pool, model_version(&bytes))
    }

    pub fn health(&self) -> HealthResponse {
        HealthResponse {
            schema_version: SCHEMA_VERSION,
            status: "ok".to_string(),
            model_version: self.model_version.clone(),
            n_concepts: self.model.n_concepts(),
            n_classes: self.model.n_classes(),
        }
    }

    pub fn concepts(&self) -> ConceptsResponse {
        let concepts = self
            .model
            .concept_names
            .iter()
            .enumerate()
            .map(|(index, name)| ConceptInfo {
                index,
                name: name.clone(),
                relevance: self.pool.as_ref().map(|p| p.concepts[index].relevance),
            })
            .collect();
        ConceptsResponse {
            schema_version: SCHEMA_VERSION,
            concepts,
        }
    }

    pub fn samples(&self) -> SamplesResponse {
        let labels = &self.dataset.manifest.label_names;
        let samples = self
            .dataset
            .manifest
            .samples
            .iter()
            .map(|s| SampleInfo {
                id: s.id.clone(),
                split: s.split.clone(),
                labels: s.labels.iter().map(|&l| labels[l].clone()).collect(),
                n_views: s.views.len(),
            })
            .collect();
        SamplesResponse {
            schema_version: SCHEMA_VERSION,
            samples,
        }
    }

    fn record(&self, sample_id: &str) -> Result<&SampleRecord, EngineError> {
        self.dataset
            .sample(sample_id)
            .ok_or_else(|| EngineError::UnknownSample(sample_id.to_string()))
    }

    /// Resolves requested clamps to a validated clamp set.
    pub fn resolve_clamps(&self, clamps: &[ClampRequest]) -> Result<ClampSet, EngineError> {
        let k = self.model.n_concepts();
        let mut set = ClampSet::new();
        for c in clamps {
            let index = match (c.index, &c.name) {
                (Some(i), None) => {
                    if i < 0 || i as u64 >= k as u64 {
                        return Err(EngineError::BadClamp(format!(
                            "concept index {i} out of range for {k} concepts"
                        )));
                    }
                    i as usize
                }
                (None, Some(n)) => self
                    .model
                    .concept_names
                    .iter()
                    .position(|m| m == n)
                    .ok_or_else(|| EngineError::BadClamp(format!("unknown concept `{n}`")))?,
                (Some(_), Some(_)) => {
                    return Err(EngineError::BadClamp("give either an index or a name, not both".to_string()))
                }
                (None, None) => return Err(EngineError::BadClamp("clamp names no concept".to_string())),
            };
            if c.value != 0.0 && c.value != 1.0 {
                return Err(EngineError::BadClamp(format!(
                    "value {} for concept {index} is not 0 or 1",
                    c.value
                )));
            }
            set.insert(index, c.value)?;
        }
        Ok(set)
    }

    pub fn predict(&self, sample_id: &str) -> Result<PredictionResponse, EngineError> {
        self.intervene(&InterventionRequest {
            sample_id: sample_id.to_string(),
            ..InterventionRequest::default()
        })
    }

    /// Runs the model on a sample with the requested clamps and hint. A hint
    /// in the request replaces the one stored with the sample.
    pub fn intervene(&self, req: &InterventionRequest) -> Result<PredictionResponse, EngineError> {
        let input = self.input(req)?;
        let plan = self.model.plan(&input)?;
        let pred = self.model.predict(&input)?;
        let requested: BTreeSet<usize> = input.request_clamps.iter().map(|(i, _)| i).collect();
        let names = &self.model.concept_names;
        let mut clamped: Vec<AppliedClamp> = plan
            .z_clamps
            .iter()
            .map(|(index, value)| AppliedClamp {
                index,
                name: names[index].clone(),
                value,
                source: if requested.contains(&index) {
                    ClampSource::Request
                } else {
                    ClampSource::Hint
                },
                target: ClampTarget::Z,
            })
            .collect();
        clamped.extend(plan.prior_clamps.iter().map(|(index, value)| AppliedClamp {
            index,
            name: names[index].clone(),
            value,
            source: ClampSource::Annotation,
            target: ClampTarget::Prior,
        }));
        Ok(PredictionResponse {
            schema_version: SCHEMA_VERSION,
            sample_id: req.sample_id.clone(),
            concept_scores: pred
                .z
                .iter()
                .enumerate()
                .map(|(index, &score)| ConceptScore {
                    index,
                    name: names[index].clone(),
                    score,
                })
                .collect(),
            clamped,
            class_probs: self
                .model
                .label_names
                .iter()
                .zip(&pred.probs)
                .map(|(name, &probability)| ClassProb {
                    name: name.clone(),
                    probability,
                })
                .collect(),
            model_version: self.model_version.clone(),
        })
    }

    /// The model input a request resolves to.
    pub fn input(&self, req: &InterventionRequest) -> Result<SampleInput, EngineError> {
        let record = self.record(&req.sample_id)?;
        let mut input = self.model.sample_input(&self.dataset, record)?;
        input.request_clamps = self.resolve_clamps(&req.clamps)?;
        if let Some(h) = &req.hint_text {
            input.hint = Some(self.model.embedder().embed(h)?);
        }
        Ok(input)
    }

    pub fn graph_dump(&self, req: &InterventionRequest) -> Result<serde_json::Value, EngineError> {
        let input = self.input(req)?;
        Ok(self.model.graph_dump(&input)?)
    }
}
