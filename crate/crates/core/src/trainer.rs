//! Training loop, Adam optimizer and split evaluation.
//!
//! Training is deterministic for a given seed: examples are visited in
//! manifest order, per-example gradients are computed in parallel but summed
//! in example order, and parameters only change in the sequential optimizer
//! step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::checkpoint::Checkpoint;
use crate::concept_pool::ConceptPool;
use crate::data_io::{Dataset, TaskKind};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{Model, ModelConfig, SampleInput};
use crate::numerics::{ParamStore, Tape, Tensor};

const BOTTLENECK_PREFIX: &str = "bottleneck.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub phi: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Weight of the classification loss; the bottleneck loss enters as is.
    pub task_weight: f64,
    /// Train the bottleneck alone for `stage_one_epochs`, then freeze it and
    /// train everything else.
    pub two_stage: bool,
    pub stage_one_epochs: usize,
    pub split: String,
    /// When set, must agree with the manifest.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskKind>,
    #[serde(flatten)]
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 50,
            learning_rate: 1e-3,
            batch_size: 8,
            lambda: crate::bottleneck::DEFAULT_LAMBDA,
            phi: crate::bottleneck::DEFAULT_PHI,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            task_weight: 1.0,
            two_stage: false,
            stage_one_epochs: 0,
            split: "train".to_string(),
            task: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if self.lambda < 0.0 || !(0.0..=1.0).contains(&self.phi) {
            return Err(Error::invalid("need lambda >= 0 and phi in [0, 1]"));
        }
        if self.two_stage && self.stage_one_epochs > self.epochs {
            return Err(Error::invalid("stage_one_epochs exceeds epochs"));
        }
        Ok(())
    }
}

/// First-order adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |s: &ParamStore| s.ids().map(|id| Tensor::zeros(s.value(id).shape())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    /// Updates every parameter with `trainable[i]` set from its stored
    /// gradient.
    pub fn step(&mut self, store: &mut ParamStore, trainable: &[bool]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            if !trainable[i] {
                continue;
            }
            let g = store.grad(id).data().to_vec();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let w = store.value_mut(id).data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                w[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// One training example: a (possibly single-view) input and its targets.
#[derive(Debug, Clone)]
pub struct Example {
    pub input: SampleInput,
    pub targets: Vec<f64>,
}

/// Examples of `split` in manifest order. Multi-label samples contribute one
/// example per view.
pub fn examples(model: &Model, dataset: &Dataset, split: &str) -> Result<Vec<Example>> {
    let records = dataset.manifest.samples_in(split);
    if records.is_empty() {
        return Err(Error::invalid(format!("split `{split}` has no samples")));
    }
    let mut out = Vec::new();
    for r in records {
        let input = model.sample_input(dataset, r)?;
        let targets = r.targets(model.n_classes(), model.config.uncertain_as_negative);
        match model.task {
            TaskKind::SingleLabel => out.push(Example { input, targets }),
            TaskKind::MultiLabel => out.extend(input.split_views().into_iter().map(|input| Example {
                input,
                targets: targets.clone(),
            })),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Joint,
    BottleneckOnly,
    HeadOnly,
}

/// Objective value and per-parameter gradients of one example.
fn example_gradients(
    model: &Model,
    config: &TrainConfig,
    stage: Stage,
    ex: &Example,
    scale: f64,
    epoch: usize,
    batch: usize,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let diverged = |tape: &Tape| {
        let detail = match tape.first_non_finite() {
            Some((node, op)) => format!("first non-finite value produced by `{op}` (node {node})"),
            None => "non-finite loss".to_string(),
        };
        Error::Diverged { epoch, batch, detail }
    };
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let vars = match model.forward(&mut tape, &p, &ex.input) {
        Ok(v) => v,
        Err(Error::NonFiniteLogits) => return Err(diverged(&tape)),
        Err(e) => return Err(e),
    };
    let parts = model.loss(&mut tape, &p, &vars, &ex.targets, config.lambda, config.phi)?;
    let task = tape.scale(parts.task, config.task_weight);
    let sparse = tape.scale(parts.sparse, config.lambda);
    let objective = match stage {
        Stage::Joint => {
            let a = tape.add(task, parts.align)?;
            tape.add(a, sparse)?
        }
        Stage::BottleneckOnly => parts.align,
        Stage::HeadOnly => tape.add(task, sparse)?,
    };
    let value = tape.value(objective).item();
    if !value.is_finite() {
        return Err(diverged(&tape));
    }
    let scaled = tape.scale(objective, scale);
    tape.backward(scaled)?;
    let grads = model.store.ids().map(|id| tape.grad(p.get(id)).cloned()).collect();
    Ok((value, grads))
}

/// Trains `model` in place and returns the mean objective of every epoch.
pub fn train_model(model: &mut Model, config: &TrainConfig, data: &[Example]) -> Result<Vec<f64>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    let mut adam = Adam::new(&model.store, config.learning_rate, config.beta1, config.beta2, config.adam_eps);
    let names: Vec<bool> = model
        .store
        .ids()
        .map(|id| model.store.name(id).starts_with(BOTTLENECK_PREFIX))
        .collect();
    let all = vec![true; names.len()];
    let bottleneck_only = names.clone();
    let head_only: Vec<bool> = names.iter().map(|b| !b).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let stage = match (config.two_stage, epoch < config.stage_one_epochs) {
            (false, _) => Stage::Joint,
            (true, true) => Stage::BottleneckOnly,
            (true, false) => Stage::HeadOnly,
        };
        let trainable = match stage {
            Stage::Joint => &all,
            Stage::BottleneckOnly => &bottleneck_only,
            Stage::HeadOnly => &head_only,
        };
        let mut total = 0.0;
        for (b, batch) in data.chunks(config.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            let m: &Model = model;
            let results: Vec<Result<(f64, Vec<Option<Tensor>>)>> = batch
                .par_iter()
                .map(|ex| example_gradients(m, config, stage, ex, scale, epoch, b))
                .collect();
            model.store.zero_grad();
            let ids: Vec<_> = model.store.ids().collect();
            for r in results {
                let (value, grads) = r?;
                total += value;
                for (id, g) in ids.iter().zip(&grads) {
                    if let Some(g) = g {
                        model.store.add_grad(*id, g);
                    }
                }
            }
            adam.step(&mut model.store, trainable);
        }
        let mean = total / data.len() as f64;
        info!(epoch, loss = mean, "epoch finished");
        history.push(mean);
    }
    model.store.zero_grad();
    model.store.round_to_f32();
    Ok(history)
}

/// Builds a model over `pool` and trains it on the configured split.
pub fn train(config: &TrainConfig, dataset: &Dataset, pool: &ConceptPool) -> Result<Checkpoint> {
    config.validate()?;
    let task = dataset.manifest.task;
    if let Some(t) = config.task {
        if t != task {
            return Err(Error::invalid(format!(
                "config task {t:?} does not match manifest task {task:?}"
            )));
        }
    }
    if pool.dim() != dataset.views.dim() {
        return Err(Error::shape(
            "train",
            format!("pool dim {} vs view dim {}", pool.dim(), dataset.views.dim()),
        ));
    }
    let mut model = Model::new(
        config.model.clone(),
        task,
        pool.names(),
        pool.embedding_matrix(),
        dataset.manifest.label_names.clone(),
        config.seed,
    )?;
    let data = examples(&model, dataset, &config.split)?;
    let history = train_model(&mut model, config, &data)?;
    Ok(Checkpoint {
        model,
        train_config: Some(serde_json::to_value(config)?),
        loss_history: history,
    })
}

/// Predictions and targets for every sample of `split`, in manifest order.
pub fn predict_split(model: &Model, dataset: &Dataset, split: &str) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let records = dataset.manifest.samples_in(split);
    if records.is_empty() {
        return Err(Error::invalid(format!("split `{split}` has no samples")));
    }
    let probs = records
        .par_iter()
        .map(|r| Ok(model.predict(&model.sample_input(dataset, r)?)?.probs))
        .collect::<Result<Vec<_>>>()?;
    let targets = records
        .iter()
        .map(|r| r.targets(model.n_classes(), model.config.uncertain_as_negative))
        .collect();
    Ok((probs, targets))
}

pub fn evaluate(model: &Model, dataset: &Dataset, split: &str) -> Result<MetricsReport> {
    let (probs, targets) = predict_split(model, dataset, split)?;
    MetricsReport::from_predictions(
        split,
        &model.label_names,
        &probs,
        &targets,
        model.task == TaskKind::SingleLabel,
    )
}

/// Evaluation report carrying the checkpoint's loss curve and version.
pub fn evaluate_checkpoint(ck: &Checkpoint, dataset: &Dataset, split: &str) -> Result<MetricsReport> {
    let mut report = evaluate(&ck.model, dataset, split)?;
    report.loss_history = ck.loss_history.clone();
    report.model_version = Some(ck.version()?);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::row(&[1.0, -1.0])).unwrap();
        s.add_grad(id, &Tensor::row(&[0.5, -2.0]));
        let mut adam = Adam::new(&s, 0.1, 0.9, 0.999, 0.0);
        adam.step(&mut s, &[true]);
        let w = s.value(id).data();
        assert!((w[0] - 0.9).abs() < 1e-12 && (w[1] + 0.9).abs() < 1e-12);
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::row(&[1.0])).unwrap();
        s.add_grad(id, &Tensor::row(&[1.0]));
        let mut adam = Adam::new(&s, 0.1, 0.9, 0.999, 1e-8);
        adam.step(&mut s, &[false]);
        assert_eq!(s.value(id).data(), &[1.0]);
    }

    #[test]
    fn config_json_is_flat_and_partial() {
        let c: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "experts": 2, "use_moe": false}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.model.experts, 2);
        assert!(!c.model.use_moe);
        assert_eq!(c.model.heads, 4);
        let back: TrainConfig = serde_json::from_value(serde_json::to_value(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
