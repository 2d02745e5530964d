//! Heterogeneous graphs over concepts and QA words, plus their structural
//! prior matrices.
//!
//! A graph has two node partitions (concepts or question words first, answer
//! words second). Every node pair gets a scalar distance and an edge kind:
//! intra-concept pairs use the spatial rule, intra-word pairs the word-order
//! rule, cross-partition pairs the constant 1. The structural embedding maps
//! that scalar to one learned value per attention head through a bucket
//! table: the scalar is clipped to `[0, max]` and split into `buckets`
//! uniform bins, each owning one row of the table.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::concept_pool::ConceptPool;
use crate::data_io::PseudoEmbedder;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub const DEFAULT_BUCKETS: usize = 32;
pub const DEFAULT_D_MAX: f64 = 64.0;
pub const QUESTION_TEMPLATE: [&str; 4] = ["which", "findings", "are", "present"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketSpec {
    pub buckets: usize,
    pub max: f64,
}

impl Default for BucketSpec {
    fn default() -> Self {
        Self {
            buckets: DEFAULT_BUCKETS,
            max: DEFAULT_D_MAX,
        }
    }
}

impl BucketSpec {
    pub fn new(buckets: usize, max: f64) -> Result<Self> {
        if buckets == 0 || !(max > 0.0) {
            return Err(Error::invalid(format!(
                "bucket spec needs buckets >= 1 and max > 0, got {buckets}, {max}"
            )));
        }
        Ok(Self { buckets, max })
    }

    pub fn index(&self, x: f64) -> usize {
        let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, self.max) };
        ((x / self.max * self.buckets as f64).floor() as usize).min(self.buckets - 1)
    }
}

/// Which learned embedding function a node pair uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    /// Concept–concept, embedded by Ψ_v.
    Spatial = 0,
    /// Word–word, embedded by Ψ_a.
    Order = 1,
    /// Across partitions, embedded by Ψ_cross.
    Cross = 2,
}

pub const EDGE_KINDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Concept,
    AnswerWord,
    QuestionWord,
}

/// `l_v · ((Xi − Xj)² + (Yi − Yj)²)`.
pub fn spatial_edge(xi: f64, yi: f64, xj: f64, yj: f64, l_v: f64) -> f64 {
    l_v * ((xi - xj).powi(2) + (yi - yj).powi(2))
}

/// `l_a · (i − j)²` for 0-based token positions.
pub fn order_edge(i: usize, j: usize, l_a: f64) -> f64 {
    let d = i as f64 - j as f64;
    l_a * d * d
}

/// Distance rule inside one partition.
#[derive(Debug, Clone, PartialEq)]
pub enum EdgeRule {
    /// Region centres `(X, Y)`, one per node.
    Spatial { centers: Vec<[f64; 2]>, l_v: f64 },
    /// Squared feature distance `l_v · ‖f_i − f_j‖²`, for concepts without
    /// region centres.
    FeatureDistance { l_v: f64 },
    Order { l_a: f64 },
}

impl EdgeRule {
    fn kind(&self) -> EdgeKind {
        match self {
            EdgeRule::Spatial { .. } | EdgeRule::FeatureDistance { .. } => EdgeKind::Spatial,
            EdgeRule::Order { .. } => EdgeKind::Order,
        }
    }

    fn distance(&self, features: &Tensor, i: usize, j: usize) -> f64 {
        match self {
            EdgeRule::Spatial { centers, l_v } => {
                let (a, b) = (centers[i], centers[j]);
                spatial_edge(a[0], a[1], b[0], b[1], *l_v)
            }
            EdgeRule::FeatureDistance { l_v } => {
                let d: f64 = features
                    .row_slice(i)
                    .iter()
                    .zip(features.row_slice(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                l_v * d
            }
            EdgeRule::Order { l_a } => order_edge(i, j, *l_a),
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        match self {
            EdgeRule::Spatial { centers, l_v } => {
                if centers.len() != n {
                    return Err(Error::shape(
                        "build_graph",
                        format!("{} region centres for {n} nodes", centers.len()),
                    ));
                }
                positive("l_v", *l_v)
            }
            EdgeRule::FeatureDistance { l_v } => positive("l_v", *l_v),
            EdgeRule::Order { l_a } => positive("l_a", *l_a),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be > 0, got {v}")))
    }
}

/// One node partition: features, node tag and intra-partition distance rule.
#[derive(Debug, Clone)]
pub struct Side<'a> {
    pub features: &'a Tensor,
    pub kind: NodeKind,
    pub rule: EdgeRule,
}

/// Feature-free structure of a graph: node tags, pairwise distances, edge
/// kinds and the bucket-table row used for every pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphLayout {
    pub node_kinds: Vec<NodeKind>,
    pub n_first: usize,
    pub n_second: usize,
    /// `n × n` scalar distances (cross pairs hold 1).
    pub distances: Tensor,
    pub edge_kinds: Vec<EdgeKind>,
    /// Row of the `(EDGE_KINDS · buckets) × H` table for each pair.
    pub table_rows: Vec<usize>,
}

impl GraphLayout {
    pub fn new(first: &Side<'_>, second: &Side<'_>, spec: BucketSpec) -> Result<Self> {
        let (n1, n2) = (first.features.rows(), second.features.rows());
        if n1 > 0 && n2 > 0 && first.features.cols() != second.features.cols() {
            return Err(Error::shape(
                "build_graph",
                format!(
                    "feature dims {} vs {}",
                    first.features.cols(),
                    second.features.cols()
                ),
            ));
        }
        first.rule.validate(n1)?;
        second.rule.validate(n2)?;
        let n = n1 + n2;
        let mut distances = Tensor::zeros(&[n, n]);
        let mut edge_kinds = Vec::with_capacity(n * n);
        let mut table_rows = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let (kind, d) = match (i < n1, j < n1) {
                    (true, true) => (first.rule.kind(), first.rule.distance(first.features, i, j)),
                    (false, false) => (
                        second.rule.kind(),
                        second.rule.distance(second.features, i - n1, j - n1),
                    ),
                    _ => (EdgeKind::Cross, 1.0),
                };
                distances.set(i, j, d);
                edge_kinds.push(kind);
                table_rows.push(kind as usize * spec.buckets + spec.index(d));
            }
        }
        let node_kinds = std::iter::repeat(first.kind)
            .take(n1)
            .chain(std::iter::repeat(second.kind).take(n2))
            .collect();
        Ok(Self {
            node_kinds,
            n_first: n1,
            n_second: n2,
            distances,
            edge_kinds,
            table_rows,
        })
    }

    /// Single-partition layout over word positions (the reasoning graph).
    pub fn words(n: usize, kind: NodeKind, l_a: f64, spec: BucketSpec) -> Result<Self> {
        let empty = Tensor::zeros(&[0, 1]);
        let feats = Tensor::zeros(&[n, 1]);
        Self::new(
            &Side {
                features: &empty,
                kind: NodeKind::Concept,
                rule: EdgeRule::Order { l_a },
            },
            &Side {
                features: &feats,
                kind,
                rule: EdgeRule::Order { l_a },
            },
            spec,
        )
    }

    pub fn len(&self) -> usize {
        self.node_kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_kinds.is_empty()
    }

    /// Indices of nodes with the given tag.
    pub fn rows_of(&self, kind: NodeKind) -> Vec<usize> {
        self.node_kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| **k == kind)
            .map(|(i, _)| i)
            .collect()
    }

    /// Bucket index within the kind's own table for every pair.
    pub fn bucket_indices(&self, spec: BucketSpec) -> Vec<usize> {
        self.table_rows.iter().map(|r| r % spec.buckets).collect()
    }

    /// Evaluated structural prior for every head of `table`.
    pub fn structural(&self, table: &Tensor) -> Vec<Tensor> {
        let n = self.len();
        (0..table.cols())
            .map(|h| {
                let data = self.table_rows.iter().map(|&r| table.get(r, h)).collect();
                Tensor::matrix(n, n, data).expect("n×n")
            })
            .collect()
    }

    /// The structural prior of head `head` as a differentiable lookup.
    pub fn structural_var(&self, tape: &mut Tape, table: Var, head: usize) -> Result<Var> {
        let n = self.len();
        tape.gather(table, &self.table_rows, head, n, n)
    }
}

/// Bucket table for the three edge kinds: `(EDGE_KINDS · buckets) × H`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralTables {
    pub spec: BucketSpec,
    pub table: Tensor,
}

impl StructuralTables {
    pub fn zeros(spec: BucketSpec, heads: usize) -> Self {
        Self {
            spec,
            table: Tensor::zeros(&[EDGE_KINDS * spec.buckets, heads]),
        }
    }

    pub fn heads(&self) -> usize {
        self.table.cols()
    }

    /// Ψ_kind(x) for head `head`.
    pub fn lookup(&self, kind: EdgeKind, x: f64, head: usize) -> f64 {
        self.table
            .get(kind as usize * self.spec.buckets + self.spec.index(x), head)
    }
}

/// Node features plus structure and the evaluated per-head structural prior.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroGraph {
    pub layout: GraphLayout,
    pub node_features: Tensor,
    /// One `n × n` prior per attention head.
    pub structural: Vec<Tensor>,
}

impl HeteroGraph {
    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    /// Debug dump: node kinds, per-head structural matrices, bucket indices.
    pub fn dump(&self, spec: BucketSpec) -> serde_json::Value {
        json!({
            "node_kinds": self.layout.node_kinds,
            "edge_kinds": self.layout.edge_kinds,
            "distances": self.layout.distances.to_rows(),
            "bucket_indices": self.layout.bucket_indices(spec),
            "structural": self.structural.iter().map(Tensor::to_rows).collect::<Vec<_>>(),
        })
    }
}

/// Stacks two partitions and evaluates their structural prior with `psi`.
pub fn build_graph(first: &Side<'_>, second: &Side<'_>, psi: &StructuralTables) -> Result<HeteroGraph> {
    let layout = GraphLayout::new(first, second, psi.spec)?;
    let node_features = stack_rows(first.features, second.features)?;
    let structural = layout.structural(&psi.table);
    Ok(HeteroGraph {
        layout,
        node_features,
        structural,
    })
}

fn stack_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut rows = a.to_rows();
    rows.extend(b.to_rows());
    if rows.is_empty() {
        return Tensor::new(vec![0, a.cols().max(b.cols())], vec![]);
    }
    Tensor::from_rows(&rows)
}

/// Reasoning graph over answer words: features `[T_a | ac-guided | aq-guided]`
/// (the last block is dropped when `aq` is `None`), order edges between words.
pub fn build_reasoning_graph(
    t_a: &Tensor,
    ac: &Tensor,
    aq: Option<&Tensor>,
    l_a: f64,
    psi: &StructuralTables,
) -> Result<HeteroGraph> {
    let n = t_a.rows();
    let parts: Vec<&Tensor> = std::iter::once(t_a).chain(Some(ac)).chain(aq).collect();
    if let Some(bad) = parts.iter().find(|p| p.rows() != n) {
        return Err(Error::shape(
            "build_reasoning_graph",
            format!("{} rows vs {n} answer words", bad.rows()),
        ));
    }
    let data = (0..n)
        .flat_map(|i| parts.iter().flat_map(move |p| p.row_slice(i).to_vec()))
        .collect();
    let width = parts.iter().map(|p| p.cols()).sum();
    let node_features = Tensor::matrix(n, width, data)?;
    let layout = GraphLayout::words(n, NodeKind::AnswerWord, l_a, psi.spec)?;
    let structural = layout.structural(&psi.table);
    Ok(HeteroGraph {
        layout,
        node_features,
        structural,
    })
}

/// Templated question/answer text for a set of selected concepts.
#[derive(Debug, Clone, PartialEq)]
pub struct QaPair {
    pub question_tokens: Vec<String>,
    pub answer_tokens: Vec<String>,
    pub question_features: Tensor,
    pub answer_features: Tensor,
}

fn embed_tokens(tokens: &[String], embedder: &PseudoEmbedder) -> Result<Tensor> {
    let rows = tokens
        .iter()
        .map(|t| embedder.embed(t))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// Question: the fixed template. Answer: the selected concept names, split
/// on whitespace, in selection order.
pub fn generate_qa_from_names(names: &[&str], embedder: &PseudoEmbedder) -> Result<QaPair> {
    if names.is_empty() {
        return Err(Error::invalid("QA generation needs at least one concept"));
    }
    let question_tokens: Vec<String> = QUESTION_TEMPLATE.iter().map(|s| s.to_string()).collect();
    let answer_tokens: Vec<String> = names
        .iter()
        .flat_map(|n| n.split_whitespace().map(str::to_string))
        .collect();
    if answer_tokens.is_empty() {
        return Err(Error::invalid("selected concept names contain no tokens"));
    }
    Ok(QaPair {
        question_features: embed_tokens(&question_tokens, embedder)?,
        answer_features: embed_tokens(&answer_tokens, embedder)?,
        question_tokens,
        answer_tokens,
    })
}

pub fn generate_qa(pool: &ConceptPool, selected: &[usize], embedder: &PseudoEmbedder) -> Result<QaPair> {
    let names = selected
        .iter()
        .map(|&i| {
            pool.concepts
                .get(i)
                .map(|c| c.name.as_str())
                .ok_or_else(|| Error::invalid(format!("concept index {i} out of range")))
        })
        .collect::<Result<Vec<_>>>()?;
    generate_qa_from_names(&names, embedder)
}
