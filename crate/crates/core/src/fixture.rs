//! Synthetic desk-scale datasets built from pseudo embeddings.
//!
//! Each class gets a prototype `pseudo_embed("class <label>")`; a sample is
//! its class prototype plus `noise` times a per-sample pseudo embedding,
//! renormalized. With the default noise the classes are linearly separable.

use std::fs;
use std::path::{Path, PathBuf};

use crate::concept_pool::{build_pool, ConceptPool};
use crate::data_io::{
    pseudo_embed, write_embedding_file, Dataset, DatasetManifest, EmbeddingTable, SampleRecord, TaskKind,
};
use crate::error::{Error, Result};
use crate::numerics::l2_norm;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// Seed of the shipped separable fixture.
pub const FIXTURE_SEED: u64 = 20_241_016;

pub const CANDIDATE_PHRASES: [&str; 10] = [
    "bright plumage",
    "dark stripe",
    "long beak",
    "small body",
    "round spot",
    "pale wing",
    "curved claw",
    "short tail",
    "white patch",
    "red crown",
];

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub n_samples: usize,
    pub n_classes: usize,
    pub dim: usize,
    pub seed: u64,
    pub noise: f64,
    pub n_concepts: usize,
    /// Dedup threshold for the candidate phrases. Random vectors in low
    /// dimension often exceed 0.1 cosine, so the fixture uses a looser one.
    pub tau_c: f64,
    pub tau_r: f64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            n_samples: 8,
            n_classes: 2,
            dim: 16,
            seed: FIXTURE_SEED,
            noise: 0.3,
            n_concepts: 6,
            tau_c: 0.6,
            tau_r: crate::concept_pool::DEFAULT_TAU_R,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub spec: FixtureSpec,
    pub dataset: Dataset,
    pub candidates: EmbeddingTable,
    pub labels: EmbeddingTable,
    pub pool: ConceptPool,
    pub config: TrainConfig,
}

pub fn label_name(c: usize) -> String {
    format!("class {c}")
}

/// Training settings used for the shipped fixture.
pub fn fixture_config(spec: &FixtureSpec) -> TrainConfig {
    TrainConfig {
        seed: spec.seed,
        epochs: 200,
        batch_size: 2,
        model: ModelConfig {
            graph_concepts: 4,
            ..ModelConfig::default()
        },
        learning_rate: 1e-3,
        ..TrainConfig::default()
    }
}

pub fn synthetic(spec: &FixtureSpec) -> Result<Fixture> {
    if spec.n_classes < 2 || spec.n_samples < spec.n_classes {
        return Err(Error::invalid("fixture needs >= 2 classes and a sample per class"));
    }
    let d = spec.dim;
    let label_names: Vec<String> = (0..spec.n_classes).map(label_name).collect();
    let protos = label_names
        .iter()
        .map(|n| pseudo_embed(n, d, spec.seed))
        .collect::<Result<Vec<_>>>()?;
    let mut view_names = Vec::new();
    let mut view_rows = Vec::new();
    let mut samples = Vec::new();
    for i in 0..spec.n_samples {
        let c = i % spec.n_classes;
        let noise = pseudo_embed(&format!("sample {i}"), d, spec.seed)?;
        let v: Vec<f64> = protos[c].iter().zip(&noise).map(|(p, e)| p + spec.noise * e).collect();
        let n = l2_norm(&v);
        let name = format!("s{i}.view");
        view_names.push(name.clone());
        // stored at file precision so in-memory and on-disk fixtures agree
        view_rows.push(v.iter().map(|x| f64::from((x / n) as f32)).collect());
        samples.push(SampleRecord {
            id: format!("s{i}"),
            views: vec![name],
            labels: vec![c],
            uncertain_labels: Vec::new(),
            split: "train".to_string(),
            hint_text: None,
            concept_annotations: None,
            region_centers: None,
        });
    }
    let views = EmbeddingTable::new(view_names, view_rows, d, true)?;
    let manifest = DatasetManifest {
        task: TaskKind::SingleLabel,
        label_names: label_names.clone(),
        concept_names: None,
        embeddings: PathBuf::from("views.emb"),
        samples,
    };
    let dataset = Dataset::new(manifest, views)?;
    let phrases: Vec<String> = CANDIDATE_PHRASES.iter().map(|s| s.to_string()).collect();
    let candidates = EmbeddingTable::normalized_from(
        phrases.clone(),
        phrases.iter().map(|p| pseudo_embed(p, d, spec.seed)).collect::<Result<_>>()?,
        d,
    )?;
    let labels = EmbeddingTable::normalized_from(label_names, protos, d)?;
    let pool = build_pool(&candidates, &labels, spec.tau_c, spec.tau_r, spec.n_concepts)?;
    let config = fixture_config(spec);
    Ok(Fixture {
        spec: spec.clone(),
        dataset,
        candidates,
        labels,
        pool,
        config,
    })
}

/// Paths of a fixture written to disk.
#[derive(Debug, Clone)]
pub struct FixtureFiles {
    pub manifest: PathBuf,
    pub views: PathBuf,
    pub candidates: PathBuf,
    pub candidate_embeddings: PathBuf,
    pub label_embeddings: PathBuf,
    pub pool: PathBuf,
    pub config: PathBuf,
}

pub fn write(fixture: &Fixture, dir: impl AsRef<Path>) -> Result<FixtureFiles> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = FixtureFiles {
        manifest: dir.join("manifest.json"),
        views: dir.join("views.emb"),
        candidates: dir.join("candidates.txt"),
        candidate_embeddings: dir.join("candidates.emb"),
        label_embeddings: dir.join("labels.emb"),
        pool: dir.join("pool.json"),
        config: dir.join("config.json"),
    };
    let put = |p: &Path, text: String| fs::write(p, text).map_err(|e| Error::io(p, e));
    put(&files.manifest, serde_json::to_string_pretty(&fixture.dataset.manifest)?)?;
    write_embedding_file(&files.views, &fixture.dataset.views)?;
    put(&files.candidates, fixture.candidates.names().join("\n") + "\n")?;
    write_embedding_file(&files.candidate_embeddings, &fixture.candidates)?;
    write_embedding_file(&files.label_embeddings, &fixture.labels)?;
    fixture.pool.save(&files.pool)?;
    put(&files.config, serde_json::to_string_pretty(&fixture.config)?)?;
    Ok(files)
}
