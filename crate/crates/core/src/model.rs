//! The full classifier: concept bottleneck, templated QA graphs,
//! contextualization and reasoning stacks, MLP head and losses.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bottleneck::{cbl_loss, elastic_net, plan_interventions, Bottleneck, BottleneckVars, ClampSet, InterventionPlan};
use crate::data_io::{Annotation, Dataset, PseudoEmbedder, SampleRecord, TaskKind};
use crate::error::{Error, Result};
use crate::graphs::{generate_qa_from_names, BucketSpec, EdgeRule, GraphLayout, NodeKind, QaPair, Side, EDGE_KINDS};
use crate::numerics::{log_softmax_rows, sigmoid, Bindings, Initializer, ParamId, ParamStore, Tape, Tensor, Var};
use crate::sgt_moe::{FeedForward, LayerConfig, MlpClassifier, SgtStack, StackVars};

/// Architecture and intervention settings. Every field has a default, so a
/// partial JSON object is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub heads: usize,
    pub context_layers: usize,
    pub reason_layers: usize,
    pub experts: usize,
    pub use_moe: bool,
    pub use_qa_graph: bool,
    pub use_structural_prior: bool,
    pub use_z_in_classifier: bool,
    /// Upper bound on concept nodes per graph; the top-scoring concepts of
    /// `z` are kept.
    pub graph_concepts: usize,
    pub l_v: f64,
    pub l_a: f64,
    pub l_sgt: f64,
    pub buckets: usize,
    pub d_max: f64,
    pub sgt_buckets: usize,
    /// Seed of the pseudo text encoder used for QA tokens and hints.
    pub text_seed: u64,
    pub tau_h: f64,
    pub use_annotation_clamps: bool,
    pub use_hint_clamps: bool,
    pub uncertain_as_negative: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            context_layers: 2,
            reason_layers: 2,
            experts: 8,
            use_moe: true,
            use_qa_graph: true,
            use_structural_prior: true,
            use_z_in_classifier: true,
            graph_concepts: 8,
            l_v: 1.0,
            l_a: 1.0,
            l_sgt: crate::sgt_moe::DEFAULT_L_SGT,
            buckets: crate::graphs::DEFAULT_BUCKETS,
            d_max: crate::graphs::DEFAULT_D_MAX,
            sgt_buckets: crate::sgt_moe::DEFAULT_SGT_BUCKETS,
            text_seed: 0,
            tau_h: crate::bottleneck::DEFAULT_TAU_H,
            use_annotation_clamps: true,
            use_hint_clamps: true,
            uncertain_as_negative: true,
        }
    }
}

impl ModelConfig {
    pub fn bucket_spec(&self) -> Result<BucketSpec> {
        BucketSpec::new(self.buckets, self.d_max)
    }

    fn layer_config(&self, width: usize) -> Result<LayerConfig> {
        let mut c = LayerConfig::new(width, self.heads, self.experts, self.use_moe);
        c.l_sgt = self.l_sgt;
        c.sgt_buckets = BucketSpec::new(self.sgt_buckets, 1.0)?;
        Ok(c)
    }

    /// Width of the reasoning stack for node dimension `d`.
    pub fn reason_width(&self, d: usize) -> usize {
        if self.use_qa_graph {
            3 * d
        } else {
            2 * d
        }
    }

    /// Width of every layer, in construction order.
    pub fn layer_widths(&self, d: usize) -> Vec<usize> {
        let stacks = if self.use_qa_graph { 2 } else { 1 };
        let mut w = vec![d; stacks * self.context_layers];
        w.extend(std::iter::repeat(self.reason_width(d)).take(self.reason_layers));
        w
    }

    /// Scalars added by gating over `experts` experts instead of a single
    /// feed-forward net: `(K_e − 1)` extra experts plus the gate per layer.
    pub fn moe_extra_params(&self, d: usize) -> usize {
        let k = self.experts;
        self.layer_widths(d)
            .iter()
            .map(|&w| (k - 1) * FeedForward::count_for(w) + w * k + k)
            .sum()
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.context_layers == 0 || self.reason_layers == 0 {
            return Err(Error::invalid("stacks need at least one layer"));
        }
        if self.graph_concepts == 0 {
            return Err(Error::invalid("graph_concepts must be >= 1"));
        }
        for w in [d, self.reason_width(d)] {
            self.layer_config(w)?;
            if self.heads == 0 || w % self.heads != 0 {
                return Err(Error::invalid(format!(
                    "width {w} is not divisible by {} heads",
                    self.heads
                )));
            }
        }
        if self.experts == 0 {
            return Err(Error::invalid("experts must be >= 1"));
        }
        Ok(())
    }
}

/// Everything the model needs about one sample, aligned to the pool order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleInput {
    pub views: Vec<Vec<f64>>,
    pub annotations: Option<Vec<Annotation>>,
    pub hint: Option<Vec<f64>>,
    pub region_centers: Option<Vec<[f64; 2]>>,
    /// Explicit clamps on `z`; they win over hint clamps.
    pub request_clamps: ClampSet,
}

impl SampleInput {
    pub fn from_views(views: Vec<Vec<f64>>) -> Self {
        Self {
            views,
            ..Self::default()
        }
    }

    /// One input per view, sharing every other field.
    pub fn split_views(&self) -> Vec<SampleInput> {
        self.views
            .iter()
            .map(|v| SampleInput {
                views: vec![v.clone()],
                ..self.clone()
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub task: TaskKind,
    pub concept_names: Vec<String>,
    pub label_names: Vec<String>,
    pub store: ParamStore,
    pub bottleneck: Bottleneck,
    /// `(EDGE_KINDS · buckets) × H`: spatial, order and cross rows.
    pub structural: ParamId,
    pub ac_stack: SgtStack,
    pub aq_stack: Option<SgtStack>,
    pub reason_stack: SgtStack,
    pub classifier: MlpClassifier,
}

/// Tape handles and structure of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub bottleneck: BottleneckVars,
    pub selected: Vec<usize>,
    pub qa: QaPair,
    pub ac_layout: GraphLayout,
    pub aq_layout: Option<GraphLayout>,
    pub reason_layout: GraphLayout,
    pub ac: StackVars,
    pub aq: Option<StackVars>,
    pub v_reason: Var,
    pub reason: StackVars,
    pub v_cls: Var,
    pub logits: Var,
}

impl ForwardVars {
    pub fn stacks(&self) -> impl Iterator<Item = &StackVars> {
        std::iter::once(&self.ac)
            .chain(self.aq.as_ref())
            .chain(std::iter::once(&self.reason))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub task: Var,
    pub align: Var,
    pub sparse: Var,
    pub total: Var,
}

/// Plain-value result of inference on one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub concept_scores: Vec<f64>,
    pub z: Vec<f64>,
    pub z_clamps: ClampSet,
    pub prior_clamps: ClampSet,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Model {
    pub fn new(
        config: ModelConfig,
        task: TaskKind,
        concept_names: Vec<String>,
        concepts: Tensor,
        label_names: Vec<String>,
        seed: u64,
    ) -> Result<Self> {
        let d = concepts.cols();
        config.validate(d)?;
        if concept_names.len() != concepts.rows() {
            return Err(Error::shape(
                "model",
                format!("{} names for {} concept embeddings", concept_names.len(), concepts.rows()),
            ));
        }
        if label_names.is_empty() {
            return Err(Error::invalid("model needs at least one label"));
        }
        let k = concepts.rows();
        let concepts = concepts.map(|v| f64::from(v as f32));
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let bottleneck = Bottleneck::new(&mut store, &mut init, concepts)?;
        let spec = config.bucket_spec()?;
        let structural = store.add(
            "graph.structural",
            Tensor::zeros(&[EDGE_KINDS * spec.buckets, config.heads]),
        )?;
        let ctx = config.layer_config(d)?;
        let ac_stack = SgtStack::new(&mut store, &mut init, "ac", config.context_layers, ctx)?;
        let aq_stack = if config.use_qa_graph {
            Some(SgtStack::new(&mut store, &mut init, "aq", config.context_layers, ctx)?)
        } else {
            None
        };
        let rw = config.reason_width(d);
        let reason_stack = SgtStack::new(&mut store, &mut init, "reason", config.reason_layers, config.layer_config(rw)?)?;
        let cls_in = rw + if config.use_z_in_classifier { k } else { 0 };
        let classifier = MlpClassifier::new(&mut store, &mut init, "classifier", cls_in, rw, label_names.len())?;
        store.round_to_f32();
        Ok(Self {
            config,
            task,
            concept_names,
            label_names,
            store,
            bottleneck,
            structural,
            ac_stack,
            aq_stack,
            reason_stack,
            classifier,
        })
    }

    pub fn dim(&self) -> usize {
        self.bottleneck.dim()
    }

    pub fn n_concepts(&self) -> usize {
        self.bottleneck.n_concepts()
    }

    pub fn n_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn concepts(&self) -> &Tensor {
        &self.bottleneck.concepts
    }

    pub fn embedder(&self) -> PseudoEmbedder {
        PseudoEmbedder::new(self.dim(), self.config.text_seed)
    }

    /// Builds a pool-aligned input from a dataset record. Annotations and
    /// region centres are matched by concept name; concepts the manifest does
    /// not mention stay unknown, and centres are used only when every pool
    /// concept has one.
    pub fn sample_input(&self, dataset: &Dataset, record: &SampleRecord) -> Result<SampleInput> {
        let views = dataset.view_vectors(record);
        let manifest_names = dataset.manifest.concept_names.as_deref().unwrap_or(&[]);
        let lookup: Vec<Option<usize>> = self
            .concept_names
            .iter()
            .map(|n| manifest_names.iter().position(|m| m == n))
            .collect();
        let annotations = record
            .annotations(self.config.uncertain_as_negative)
            .map(|ann| {
                lookup
                    .iter()
                    .map(|i| i.map_or(Annotation::Unknown, |i| ann[i]))
                    .collect()
            });
        let region_centers = record.region_centers.as_ref().and_then(|c| {
            lookup.iter().map(|i| i.map(|i| c[i])).collect::<Option<Vec<_>>>()
        });
        let hint = match &record.hint_text {
            Some(t) => Some(self.embedder().embed(t)?),
            None => None,
        };
        Ok(SampleInput {
            views,
            annotations,
            hint,
            region_centers,
            request_clamps: ClampSet::new(),
        })
    }

    pub fn plan(&self, input: &SampleInput) -> Result<InterventionPlan> {
        let ann = if self.config.use_annotation_clamps {
            input.annotations.as_deref()
        } else {
            None
        };
        let hint = if self.config.use_hint_clamps {
            input.hint.as_deref()
        } else {
            None
        };
        let mut plan = plan_interventions(ann, hint, self.concepts(), self.config.tau_h)?;
        input.request_clamps.mask(self.n_concepts())?;
        plan.z_clamps = plan.z_clamps.merged(&input.request_clamps);
        Ok(plan)
    }

    /// Indices of the concepts that become graph nodes: highest `z` first,
    /// lower index on ties.
    pub fn select_concepts(&self, z: &[f64]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..z.len()).collect();
        idx.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
        idx.truncate(self.config.graph_concepts.min(z.len()));
        idx
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, input: &SampleInput) -> Result<ForwardVars> {
        let plan = self.plan(input)?;
        let bn = self.bottleneck.forward(tape, p, &input.views, &plan)?;
        let selected = self.select_concepts(tape.value(bn.z).data());
        let names: Vec<&str> = selected.iter().map(|&i| self.concept_names[i].as_str()).collect();
        let qa = generate_qa_from_names(&names, &self.embedder())?;
        let spec = self.config.bucket_spec()?;
        let use_prior = self.config.use_structural_prior;
        let table = p.get(self.structural);

        // concept nodes z_k · t_k
        let zt = tape.transpose(bn.z);
        let zsel = tape.select_rows(zt, &selected)?;
        let tsel = tape.constant(Tensor::from_rows(
            &selected.iter().map(|&i| self.concepts().row_slice(i).to_vec()).collect::<Vec<_>>(),
        )?);
        let concept_nodes = tape.mul_col(tsel, zsel)?;
        let concept_values = tape.value(concept_nodes).clone();
        let concept_rule = match &input.region_centers {
            Some(c) => EdgeRule::Spatial {
                centers: selected.iter().map(|&i| c[i]).collect(),
                l_v: self.config.l_v,
            },
            None => EdgeRule::FeatureDistance { l_v: self.config.l_v },
        };
        let answer_side = Side {
            features: &qa.answer_features,
            kind: NodeKind::AnswerWord,
            rule: EdgeRule::Order { l_a: self.config.l_a },
        };
        let ac_layout = GraphLayout::new(
            &Side {
                features: &concept_values,
                kind: NodeKind::Concept,
                rule: concept_rule,
            },
            &answer_side,
            spec,
        )?;
        let t_a = tape.constant(qa.answer_features.clone());
        let ac_nodes = tape.concat_rows(&[concept_nodes, t_a])?;
        let priors = self.first_priors(tape, &self.ac_stack, &ac_layout, table, use_prior)?;
        let ac = self.ac_stack.forward(tape, p, ac_nodes, priors, use_prior)?;
        let ac_rows = ac_layout.rows_of(NodeKind::AnswerWord);
        let ac_answers = tape.select_rows(ac.v, &ac_rows)?;

        let mut parts = vec![t_a, ac_answers];
        let (aq_layout, aq) = match &self.aq_stack {
            Some(stack) => {
                let layout = GraphLayout::new(
                    &Side {
                        features: &qa.question_features,
                        kind: NodeKind::QuestionWord,
                        rule: EdgeRule::Order { l_a: self.config.l_a },
                    },
                    &answer_side,
                    spec,
                )?;
                let t_q = tape.constant(qa.question_features.clone());
                let nodes = tape.concat_rows(&[t_q, t_a])?;
                let priors = self.first_priors(tape, stack, &layout, table, use_prior)?;
                let out = stack.forward(tape, p, nodes, priors, use_prior)?;
                let rows = layout.rows_of(NodeKind::AnswerWord);
                if rows.len() != ac_rows.len() {
                    return Err(Error::shape(
                        "reason_and_classify",
                        format!("{} answer rows vs {}", rows.len(), ac_rows.len()),
                    ));
                }
                parts.push(tape.select_rows(out.v, &rows)?);
                (Some(layout), Some(out))
            }
            None => (None, None),
        };
        let v_reason = tape.concat_cols(&parts)?;
        let reason_layout = GraphLayout::words(qa.answer_tokens.len(), NodeKind::AnswerWord, self.config.l_a, spec)?;
        let priors = self.first_priors(tape, &self.reason_stack, &reason_layout, table, use_prior)?;
        let reason = self.reason_stack.forward(tape, p, v_reason, priors, use_prior)?;
        let v_cls = reason.v;
        let pooled = tape.mean_rows(v_cls);
        let features = if self.config.use_z_in_classifier {
            tape.concat_cols(&[pooled, bn.z])?
        } else {
            pooled
        };
        let logits = self.classifier.forward(tape, p, features)?;
        Ok(ForwardVars {
            bottleneck: bn,
            selected,
            qa,
            ac_layout,
            aq_layout,
            reason_layout,
            ac,
            aq,
            v_reason,
            reason,
            v_cls,
            logits,
        })
    }

    fn first_priors(
        &self,
        tape: &mut Tape,
        stack: &SgtStack,
        layout: &GraphLayout,
        table: Var,
        use_prior: bool,
    ) -> Result<Option<Vec<Var>>> {
        if use_prior {
            Ok(Some(stack.graph_priors(tape, layout, table)?))
        } else {
            Ok(None)
        }
    }

    /// Task loss plus alignment and `lambda`-weighted elastic net on the
    /// classifier's first weight matrix.
    pub fn loss(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        vars: &ForwardVars,
        targets: &[f64],
        lambda: f64,
        phi: f64,
    ) -> Result<LossVars> {
        let task = self.task_loss(tape, vars.logits, targets)?;
        let sparse = elastic_net(tape, p.get(self.classifier.hidden.weight), phi)?;
        let cbl = cbl_loss(tape, vars.bottleneck.align, sparse, lambda)?;
        let total = tape.add(task, cbl)?;
        Ok(LossVars {
            task,
            align: vars.bottleneck.align,
            sparse,
            total,
        })
    }

    /// Cross-entropy over classes (single-label) or mean binary
    /// cross-entropy over labels (multi-label).
    pub fn task_loss(&self, tape: &mut Tape, logits: Var, targets: &[f64]) -> Result<Var> {
        let c = self.n_classes();
        if targets.len() != c {
            return Err(Error::shape("task_loss", format!("{} targets for {c} classes", targets.len())));
        }
        let y = tape.constant(Tensor::row(targets));
        match self.task {
            TaskKind::SingleLabel => {
                let lp = tape.log_softmax_rows(logits)?;
                let picked = tape.mul(lp, y)?;
                let s = tape.sum(picked);
                Ok(tape.scale(s, -1.0))
            }
            TaskKind::MultiLabel => {
                let pos = tape.log_sigmoid(logits);
                let neg_in = tape.scale(logits, -1.0);
                let neg = tape.log_sigmoid(neg_in);
                let one_minus = tape.constant(Tensor::row(&targets.iter().map(|t| 1.0 - t).collect::<Vec<_>>()));
                let a = tape.mul(pos, y)?;
                let b = tape.mul(neg, one_minus)?;
                let s = tape.add(a, b)?;
                let m = tape.mean(s);
                Ok(tape.scale(m, -1.0))
            }
        }
    }

    pub fn probabilities(&self, logits: &[f64]) -> Result<Vec<f64>> {
        match self.task {
            TaskKind::SingleLabel => Ok(log_softmax_rows(&Tensor::row(logits))?
                .data()
                .iter()
                .map(|v| v.exp())
                .collect()),
            TaskKind::MultiLabel => Ok(logits.iter().map(|&x| sigmoid(x)).collect()),
        }
    }

    /// One gradient-free forward over exactly the views in `input`.
    pub fn predict_once(&self, input: &SampleInput) -> Result<Prediction> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let vars = self.forward(&mut tape, &p, input)?;
        let plan = self.plan(input)?;
        let logits = tape.value(vars.logits).data().to_vec();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLogits);
        }
        Ok(Prediction {
            concept_scores: tape.value(vars.bottleneck.z).data().to_vec(),
            z: tape.value(vars.bottleneck.z).data().to_vec(),
            z_clamps: plan.z_clamps,
            prior_clamps: plan.prior_clamps,
            probs: self.probabilities(&logits)?,
            logits,
        })
    }

    /// Inference protocol: single-label tasks fuse all views in one pass;
    /// multi-label tasks run each view alone and take the element-wise max
    /// of probabilities and concept scores.
    pub fn predict(&self, input: &SampleInput) -> Result<Prediction> {
        match self.task {
            TaskKind::SingleLabel => self.predict_once(input),
            TaskKind::MultiLabel => {
                let per_view = input
                    .split_views()
                    .iter()
                    .map(|v| self.predict_once(v))
                    .collect::<Result<Vec<_>>>()?;
                let mut out = per_view[0].clone();
                for pv in &per_view[1..] {
                    for (field, other) in [
                        (&mut out.probs, &pv.probs),
                        (&mut out.z, &pv.z),
                        (&mut out.concept_scores, &pv.concept_scores),
                        (&mut out.logits, &pv.logits),
                    ] {
                        for (a, b) in field.iter_mut().zip(other) {
                            *a = a.max(*b);
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    /// Node kinds, distances, bucket indices and evaluated structural priors
    /// of every graph built for `input`.
    pub fn graph_dump(&self, input: &SampleInput) -> Result<serde_json::Value> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let vars = self.forward(&mut tape, &p, input)?;
        let spec = self.config.bucket_spec()?;
        let table = self.store.value(self.structural);
        let dump = |l: &GraphLayout| {
            json!({
                "node_kinds": l.node_kinds,
                "edge_kinds": l.edge_kinds,
                "distances": l.distances.to_rows(),
                "bucket_indices": l.bucket_indices(spec),
                "structural": l.structural(table).iter().map(Tensor::to_rows).collect::<Vec<_>>(),
            })
        };
        Ok(json!({
            "selected_concepts": vars.selected.iter().map(|&i| &self.concept_names[i]).collect::<Vec<_>>(),
            "question_tokens": vars.qa.question_tokens,
            "answer_tokens": vars.qa.answer_tokens,
            "concept_answer": dump(&vars.ac_layout),
            "question_answer": vars.aq_layout.as_ref().map(dump),
            "reasoning": dump(&vars.reason_layout),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::pseudo_embed;

    fn tiny(task: TaskKind, config: ModelConfig) -> Model {
        let names: Vec<String> = ["wing bar", "red crown", "long tail"].iter().map(|s| s.to_string()).collect();
        let rows: Vec<Vec<f64>> = names.iter().map(|n| pseudo_embed(n, 4, 1).unwrap()).collect();
        Model::new(
            config,
            task,
            names,
            Tensor::from_rows(&rows).unwrap(),
            vec!["a".into(), "b".into()],
            42,
        )
        .unwrap()
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            heads: 2,
            experts: 2,
            context_layers: 1,
            reason_layers: 1,
            ..ModelConfig::default()
        }
    }

    fn input() -> SampleInput {
        SampleInput::from_views(vec![pseudo_embed("img", 4, 5).unwrap()])
    }

    #[test]
    fn shapes_and_widths() {
        let m = tiny(TaskKind::SingleLabel, small_config());
        let mut tape = Tape::new();
        let p = m.store.bind_frozen(&mut tape);
        let v = m.forward(&mut tape, &p, &input()).unwrap();
        let n_a = v.qa.answer_tokens.len();
        assert_eq!(v.selected.len(), 3);
        assert_eq!(tape.value(v.v_reason).shape(), &[n_a, 12]);
        assert_eq!(tape.value(v.v_cls).shape(), &[n_a, 12]);
        assert_eq!(tape.value(v.logits).shape(), &[1, 2]);
        assert_eq!(v.ac_layout.len(), 3 + n_a);
        assert_eq!(v.aq_layout.as_ref().unwrap().len(), 4 + n_a);
    }

    #[test]
    fn no_qa_graph_halves_reasoning() {
        let m = tiny(
            TaskKind::SingleLabel,
            ModelConfig {
                use_qa_graph: false,
                ..small_config()
            },
        );
        let mut tape = Tape::new();
        let p = m.store.bind_frozen(&mut tape);
        let v = m.forward(&mut tape, &p, &input()).unwrap();
        assert_eq!(tape.value(v.v_reason).cols(), 8);
        assert!(v.aq.is_none());
    }

    #[test]
    fn selection_order() {
        let m = tiny(
            TaskKind::SingleLabel,
            ModelConfig {
                graph_concepts: 2,
                ..small_config()
            },
        );
        assert_eq!(m.select_concepts(&[0.2, 0.9, 0.2]), vec![1, 0]);
    }

    #[test]
    fn moe_toggle_parameter_difference() {
        for qa in [true, false] {
            let base = ModelConfig {
                use_qa_graph: qa,
                experts: 3,
                ..small_config()
            };
            let with = tiny(TaskKind::SingleLabel, base.clone());
            let without = tiny(
                TaskKind::SingleLabel,
                ModelConfig {
                    use_moe: false,
                    ..base.clone()
                },
            );
            assert_eq!(
                with.store.num_scalars() - without.store.num_scalars(),
                base.moe_extra_params(4)
            );
        }
    }

    #[test]
    fn request_clamps_reach_z() {
        let m = tiny(TaskKind::MultiLabel, small_config());
        let mut inp = input();
        inp.views.push(pseudo_embed("img2", 4, 5).unwrap());
        inp.request_clamps.insert(2, 1.0).unwrap();
        inp.request_clamps.insert(0, 0.0).unwrap();
        let pred = m.predict(&inp).unwrap();
        assert_eq!(pred.z[2], 1.0);
        assert_eq!(pred.z[0], 0.0);
        assert!(pred.probs.iter().all(|p| (0.0..=1.0).contains(p)));
        inp.request_clamps.insert(7, 1.0).unwrap();
        assert!(m.predict(&inp).is_err());
    }

    #[test]
    fn golden_logits() {
        let m = tiny(TaskKind::SingleLabel, small_config());
        let pred = m.predict(&input()).unwrap();
        for (a, b) in pred.logits.iter().zip(GOLDEN_LOGITS) {
            assert!((a - b).abs() < 1e-9, "{:?}", pred.logits);
        }
    }

    const GOLDEN_LOGITS: [f64; 2] = [0.015257091698915438, -0.0776363005978461];
}
