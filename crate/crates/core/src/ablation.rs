//! Config sweeps: train and evaluate one model per grid point and report a
//! CSV row for each.

use std::io::Write;

use serde::Serialize;
use serde_json::Value;

use crate::concept_pool::ConceptPool;
use crate::data_io::Dataset;
use crate::error::{Error, Result};
use crate::trainer::{evaluate, train, TrainConfig};

/// One swept key and its values, parsed from `key=v1,v2,...`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<Value>,
}

impl SweepAxis {
    pub fn parse(text: &str) -> Result<Self> {
        let (key, values) = text
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("sweep `{text}` is not key=v1,v2,...")))?;
        let key = key.trim().to_string();
        let values: Vec<Value> = values
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(|v| serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string())))
            .collect();
        if key.is_empty() || values.is_empty() {
            return Err(Error::invalid(format!("sweep `{text}` needs a key and values")));
        }
        Ok(Self { key, values })
    }
}

/// `base` with `key` set to `value`; unknown keys and ill-typed values are
/// errors.
pub fn with_override(base: &TrainConfig, key: &str, value: &Value) -> Result<TrainConfig> {
    let mut json = serde_json::to_value(base)?;
    let obj = json.as_object_mut().expect("config serializes to an object");
    if !obj.contains_key(key) {
        return Err(Error::invalid(format!("unknown sweep key `{key}`")));
    }
    obj.insert(key.to_string(), value.clone());
    serde_json::from_value(json).map_err(|e| Error::invalid(format!("bad value {value} for `{key}`: {e}")))
}

/// Cartesian product of the axes, first axis varying slowest.
pub fn grid(base: &TrainConfig, axes: &[SweepAxis]) -> Result<Vec<(String, TrainConfig)>> {
    let mut points = vec![(Vec::<String>::new(), base.clone())];
    for axis in axes {
        let mut next = Vec::with_capacity(points.len() * axis.values.len());
        for (label, cfg) in &points {
            for v in &axis.values {
                let mut l = label.clone();
                l.push(format!("{}={}", axis.key, display(v)));
                next.push((l, with_override(cfg, &axis.key, v)?));
            }
        }
        points = next;
    }
    Ok(points.into_iter().map(|(l, c)| (l.join(";"), c)).collect())
}

fn display(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub config: String,
    pub experts: usize,
    pub use_moe: bool,
    pub use_qa_graph: bool,
    pub use_structural_prior: bool,
    pub use_z_in_classifier: bool,
    pub n_params: usize,
    pub final_loss: Option<f64>,
    pub split: String,
    pub top1: Option<f64>,
    pub macro_auc: Option<f64>,
    pub macro_f1: f64,
}

pub fn run(
    base: &TrainConfig,
    axes: &[SweepAxis],
    dataset: &Dataset,
    pool: &ConceptPool,
    split: &str,
) -> Result<Vec<AblationRow>> {
    grid(base, axes)?
        .into_iter()
        .map(|(label, cfg)| {
            let ck = train(&cfg, dataset, pool)?;
            let report = evaluate(&ck.model, dataset, split)?;
            let m = &cfg.model;
            Ok(AblationRow {
                config: label,
                experts: m.experts,
                use_moe: m.use_moe,
                use_qa_graph: m.use_qa_graph,
                use_structural_prior: m.use_structural_prior,
                use_z_in_classifier: m.use_z_in_classifier,
                n_params: ck.model.store.num_scalars(),
                final_loss: ck.loss_history.last().copied(),
                split: split.to_string(),
                top1: report.top1,
                macro_auc: report.macro_auc,
                macro_f1: report.macro_f1,
            })
        })
        .collect()
}

pub fn write_csv<W: Write>(rows: &[AblationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(Error::RawIo)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_grid() {
        let a = SweepAxis::parse("experts=2,4").unwrap();
        assert_eq!(a.values, vec![Value::from(2), Value::from(4)]);
        let b = SweepAxis::parse("use_moe=true,false").unwrap();
        let g = grid(&TrainConfig::default(), &[a, b]).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g[1].0, "experts=2;use_moe=false");
        assert_eq!(g[1].1.model.experts, 2);
        assert!(!g[1].1.model.use_moe);
        assert!(SweepAxis::parse("experts").is_err());
        assert!(grid(&TrainConfig::default(), &[SweepAxis::parse("nope=1").unwrap()]).is_err());
        assert!(grid(&TrainConfig::default(), &[SweepAxis::parse("experts=many").unwrap()]).is_err());
    }
}
