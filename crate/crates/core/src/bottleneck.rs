//! Concept bottleneck: per-view concept predictions, vision–language priors,
//! their fusion across views, human/annotation clamps and the alignment and
//! sparsity losses that train the concept head.
//!
//! The fusion network is permutation invariant in the views. Its inputs are
//! the mean and the max of the per-view scores; both are mapped to logit
//! space, combined affinely per concept and squashed back with a sigmoid.
//! Weights start at `(0.5, 0.5)` with zero bias, so a single view passes
//! through unchanged.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data_io::{Annotation, UNIT_NORM_TOL};
use crate::error::{Error, Result};
use crate::numerics::{cosine, l2_norm, Bindings, Initializer, Linear, ParamId, ParamStore, Tape, Tensor, Var};

const LOGIT_EPS: f64 = 1e-12;
pub const DEFAULT_TAU_H: f64 = 0.6;
pub const DEFAULT_PHI: f64 = 0.5;
pub const DEFAULT_LAMBDA: f64 = 1e-4;

/// Concept index → forced value (0 or 1).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClampSet(BTreeMap<usize, f64>);

impl ClampSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, index: usize, value: f64) -> Result<()> {
        if value != 0.0 && value != 1.0 {
            return Err(Error::invalid(format!("clamp value must be 0 or 1, got {value}")));
        }
        self.0.insert(index, value);
        Ok(())
    }

    pub fn get(&self, index: usize) -> Option<f64> {
        self.0.get(&index).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.0.iter().map(|(&k, &v)| (k, v))
    }

    /// Entries of `other` win on conflicts.
    pub fn merged(&self, other: &ClampSet) -> ClampSet {
        let mut out = self.clone();
        out.0.extend(other.0.iter().map(|(&k, &v)| (k, v)));
        out
    }

    /// Overwrite mask for a vector of length `k`.
    pub fn mask(&self, k: usize) -> Result<Vec<Option<f64>>> {
        if let Some((&i, _)) = self.0.iter().find(|(&i, _)| i >= k) {
            return Err(Error::invalid(format!(
                "clamp index {i} out of range for {k} concepts"
            )));
        }
        Ok((0..k).map(|i| self.get(i)).collect())
    }
}

/// Where each clamp acts: annotation clamps replace the fused prior (the
/// training target), hint and request clamps replace the prediction in `z`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InterventionPlan {
    pub prior_clamps: ClampSet,
    pub z_clamps: ClampSet,
}

/// Clamps implied by annotations and by a hint embedding.
///
/// `a_k = 1` forces the prior to 1, `a_k = 0` forces it to 0; a hint forces
/// `z_k = 1` for every concept whose cosine with the hint exceeds `tau_h`.
pub fn plan_interventions(
    annotations: Option<&[Annotation]>,
    hint: Option<&[f64]>,
    concepts: &Tensor,
    tau_h: f64,
) -> Result<InterventionPlan> {
    let k = concepts.rows();
    let mut plan = InterventionPlan::default();
    if let Some(ann) = annotations {
        if ann.len() != k {
            return Err(Error::shape(
                "apply_interventions",
                format!("{} annotations for {k} concepts", ann.len()),
            ));
        }
        for (i, a) in ann.iter().enumerate() {
            match a {
                Annotation::Present => plan.prior_clamps.insert(i, 1.0)?,
                Annotation::Absent => plan.prior_clamps.insert(i, 0.0)?,
                Annotation::Unknown => {}
            }
        }
    }
    if let Some(h) = hint {
        for i in 0..k {
            if cosine(h, concepts.row_slice(i)) > tau_h {
                plan.z_clamps.insert(i, 1.0)?;
            }
        }
    }
    Ok(plan)
}

/// Applies annotation overrides to the fused prior `f` and returns the
/// modified prior together with the hint clamps destined for `z`.
pub fn apply_interventions(
    f: &[f64],
    annotations: Option<&[Annotation]>,
    hint: Option<&[f64]>,
    concepts: &Tensor,
    tau_h: f64,
) -> Result<(Vec<f64>, ClampSet)> {
    let plan = plan_interventions(annotations, hint, concepts, tau_h)?;
    let mask = plan.prior_clamps.mask(f.len())?;
    let f2 = f.iter().zip(&mask).map(|(&v, m)| m.unwrap_or(v)).collect();
    Ok((f2, plan.z_clamps))
}

/// Concept head, fusion network and the frozen concept embeddings.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub head: Linear,
    /// `2 × K`: row 0 weighs the mean feature, row 1 the max feature.
    pub fusion_weight: ParamId,
    /// `1 × K`.
    pub fusion_bias: ParamId,
    pub concepts: Tensor,
}

/// Tape handles produced by one bottleneck pass.
#[derive(Debug, Clone, Copy)]
pub struct BottleneckVars {
    /// Fused concept predictions, `1 × K`.
    pub p: Var,
    /// Fused prior after annotation clamps, `1 × K`.
    pub prior: Var,
    /// Final concept vector after hint/request clamps, `1 × K`.
    pub z: Var,
    pub align: Var,
}

/// Plain-value view of one bottleneck pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckOutput {
    pub p: Vec<f64>,
    pub f: Vec<f64>,
    pub clamps: ClampSet,
    pub z: Vec<f64>,
}

impl Bottleneck {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, concepts: Tensor) -> Result<Self> {
        let (k, d) = (concepts.rows(), concepts.cols());
        if k == 0 {
            return Err(Error::invalid("bottleneck needs at least one concept"));
        }
        for i in 0..k {
            if (l2_norm(concepts.row_slice(i)) - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::invalid(format!("concept embedding {i} is not unit norm")));
            }
        }
        let head = Linear::new(store, init, "bottleneck.head", d, k)?;
        let fusion_weight = store.add("bottleneck.fusion.weight", Tensor::full(&[2, k], 0.5))?;
        let fusion_bias = store.add("bottleneck.fusion.bias", Tensor::zeros(&[1, k]))?;
        Ok(Self {
            head,
            fusion_weight,
            fusion_bias,
            concepts,
        })
    }

    pub fn n_concepts(&self) -> usize {
        self.concepts.rows()
    }

    pub fn dim(&self) -> usize {
        self.concepts.cols()
    }

    fn views_tensor(&self, views: &[Vec<f64>]) -> Result<Tensor> {
        if views.is_empty() {
            return Err(Error::invalid("at least one view is required"));
        }
        for (m, v) in views.iter().enumerate() {
            if v.len() != self.dim() {
                return Err(Error::shape(
                    "bottleneck",
                    format!("view {m} has dim {}, concepts have {}", v.len(), self.dim()),
                ));
            }
            if (l2_norm(v) - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::invalid(format!("view {m} is not unit norm")));
            }
        }
        Tensor::from_rows(views)
    }

    /// Per-concept fusion of an `M × K` score matrix into `1 × K`.
    pub fn fuse(&self, tape: &mut Tape, weight: Var, bias: Var, scores: Var) -> Result<Var> {
        fuse_views_var(tape, weight, bias, scores)
    }

    /// Per-view sigmoid of the head, fused across views.
    pub fn predict_concepts(&self, tape: &mut Tape, p: &Bindings, views: Var) -> Result<Var> {
        let logits = self.head.forward(tape, p, views)?;
        let scores = tape.sigmoid(logits);
        self.fuse(tape, p.get(self.fusion_weight), p.get(self.fusion_bias), scores)
    }

    /// `sigmoid(v · t_k)` per view, fused with the current fusion weights
    /// held constant so the prior acts as a fixed target.
    pub fn prior_scores(&self, tape: &mut Tape, p: &Bindings, views: Var) -> Result<Var> {
        let t = tape.constant(self.concepts.transpose());
        let sims = tape.matmul(views, t)?;
        let scores = tape.sigmoid(sims);
        let (w, b) = (
            tape.value(p.detached(self.fusion_weight)).clone(),
            tape.value(p.detached(self.fusion_bias)).clone(),
        );
        let w = tape.constant(w);
        let b = tape.constant(b);
        self.fuse(tape, w, b, scores)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        views: &[Vec<f64>],
        plan: &InterventionPlan,
    ) -> Result<BottleneckVars> {
        let views = tape.constant(self.views_tensor(views)?);
        let pred = self.predict_concepts(tape, p, views)?;
        let f = self.prior_scores(tape, p, views)?;
        let prior = tape.overwrite(f, &plan.prior_clamps.mask(self.n_concepts())?)?;
        let align = alignment_loss(tape, pred, prior)?;
        let z = assemble_z(tape, pred, &plan.z_clamps)?;
        Ok(BottleneckVars { p: pred, prior, z, align })
    }

    /// Forward pass without gradients, returning plain vectors.
    pub fn evaluate(
        &self,
        store: &ParamStore,
        views: &[Vec<f64>],
        plan: &InterventionPlan,
    ) -> Result<BottleneckOutput> {
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let vars = self.forward(&mut tape, &bound, views, plan)?;
        let views_t = tape.constant(self.views_tensor(views)?);
        let f = self.prior_scores(&mut tape, &bound, views_t)?;
        Ok(BottleneckOutput {
            p: tape.value(vars.p).data().to_vec(),
            f: tape.value(f).data().to_vec(),
            clamps: plan.z_clamps.clone(),
            z: tape.value(vars.z).data().to_vec(),
        })
    }
}

fn fuse_views_var(tape: &mut Tape, weight: Var, bias: Var, scores: Var) -> Result<Var> {
    let mean = tape.mean_rows(scores);
    let max = tape.max_rows(scores)?;
    let lmean = tape.logit(mean, LOGIT_EPS);
    let lmax = tape.logit(max, LOGIT_EPS);
    let w_mean = tape.select_rows(weight, &[0])?;
    let w_max = tape.select_rows(weight, &[1])?;
    let a = tape.mul(lmean, w_mean)?;
    let b = tape.mul(lmax, w_max)?;
    let s = tape.add(a, b)?;
    let s = tape.add(s, bias)?;
    Ok(tape.sigmoid(s))
}

/// Fuses one concept's per-view scores with fusion weights `(w_mean, w_max)`
/// and bias `b`.
pub fn fuse_views(scores: &[f64], weights: [f64; 2], bias: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("fuse_views needs at least one score"));
    }
    if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::invalid("fuse_views scores must lie in [0, 1]"));
    }
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::column(scores));
    let w = tape.constant(Tensor::column(&weights));
    let b = tape.constant(Tensor::scalar(bias));
    let out = fuse_views_var(&mut tape, w, b, s)?;
    Ok(tape.value(out).item())
}

/// `(1/K) Σ (p_k − f_k)²`.
pub fn alignment_loss(tape: &mut Tape, p: Var, f: Var) -> Result<Var> {
    let d = tape.sub(p, f)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// `phi·‖W‖₁ + ((1−phi)/2)·‖W‖_F²`.
pub fn elastic_net(tape: &mut Tape, w: Var, phi: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&phi) {
        return Err(Error::invalid(format!("phi must be in [0, 1], got {phi}")));
    }
    let a = tape.abs(w);
    let l1 = tape.sum(a);
    let sq = tape.mul(w, w)?;
    let l2 = tape.sum(sq);
    let l1 = tape.scale(l1, phi);
    let l2 = tape.scale(l2, (1.0 - phi) / 2.0);
    tape.add(l1, l2)
}

/// `align + lambda · sparse`.
pub fn cbl_loss(tape: &mut Tape, align: Var, sparse: Var, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    let s = tape.scale(sparse, lambda);
    tape.add(align, s)
}

/// `z = p` with clamped coordinates overwritten. The overwrite cuts those
/// coordinates off from the gradient.
pub fn assemble_z(tape: &mut Tape, p: Var, clamps: &ClampSet) -> Result<Var> {
    let k = tape.value(p).numel();
    let mask = clamps.mask(k)?;
    tape.overwrite(p, &mask)
}

/// Scalar helpers over plain slices, mostly for tests and reporting.
pub mod values {
    use super::*;

    fn eval(f: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape)?;
        Ok(tape.value(out).item())
    }

    pub fn alignment_loss(p: &[f64], f: &[f64]) -> Result<f64> {
        if p.len() != f.len() {
            return Err(Error::shape(
                "alignment_loss",
                format!("{} vs {}", p.len(), f.len()),
            ));
        }
        eval(|t| {
            let a = t.constant(Tensor::row(p));
            let b = t.constant(Tensor::row(f));
            super::alignment_loss(t, a, b)
        })
    }

    pub fn elastic_net(w: &Tensor, phi: f64) -> Result<f64> {
        eval(|t| {
            let v = t.constant(w.clone());
            super::elastic_net(t, v, phi)
        })
    }

    pub fn cbl_loss(align: f64, sparse: f64, lambda: f64) -> Result<f64> {
        eval(|t| {
            let a = t.constant(Tensor::scalar(align));
            let s = t.constant(Tensor::scalar(sparse));
            super::cbl_loss(t, a, s, lambda)
        })
    }

    pub fn assemble_z(p: &[f64], clamps: &ClampSet) -> Result<Vec<f64>> {
        let mut t = Tape::new();
        let v = t.constant(Tensor::row(p));
        let z = super::assemble_z(&mut t, v, clamps)?;
        Ok(t.value(z).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sigmoid;

    fn concepts(k: usize, d: usize, seed: u64) -> Tensor {
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|i| crate::data_io::pseudo_embed(&format!("c{i}"), d, seed).unwrap())
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn single_view_fusion_is_identity() {
        for s in [0.01, 0.3, 0.5, 0.77, 0.999] {
            assert!((fuse_views(&[s], [0.5, 0.5], 0.0).unwrap() - s).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_scores_collapse_features() {
        let c = 0.37;
        let out = fuse_views(&[c, c, c], [0.5, 0.5], 0.0).unwrap();
        assert!((out - c).abs() < 1e-12);
    }

    #[test]
    fn two_view_hand_value() {
        // mean 0.5 → logit 0, max 0.8 → logit ln 4; sigmoid(0.5 ln 4) = 2/3
        let out = fuse_views(&[0.2, 0.8], [0.5, 0.5], 0.0).unwrap();
        assert!((out - 2.0 / 3.0).abs() < 1e-12);
        let out = fuse_views(&[0.2, 0.8], [1.0, -0.5], 0.25).unwrap();
        let expect = sigmoid(-0.5 * 4f64.ln() + 0.25);
        assert!((out - expect).abs() < 1e-12);
    }

    #[test]
    fn fuse_views_rejects_empty() {
        assert!(fuse_views(&[], [0.5, 0.5], 0.0).is_err());
    }

    #[test]
    fn zero_head_scores_half() {
        let mut store = ParamStore::new();
        let b = Bottleneck::new(&mut store, &mut Initializer::new(0), concepts(3, 4, 0)).unwrap();
        store.value_mut(b.head.weight).data_mut().fill(0.0);
        let v = crate::data_io::pseudo_embed("v", 4, 9).unwrap();
        let out = b.evaluate(&store, &[v.clone(), v], &InterventionPlan::default()).unwrap();
        for &x in &out.p {
            assert!((x - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn prior_hand_values() {
        let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let mut store = ParamStore::new();
        let b = Bottleneck::new(&mut store, &mut Initializer::new(0), t).unwrap();
        let plan = InterventionPlan::default();
        let out = b.evaluate(&store, &[vec![1.0, 0.0]], &plan).unwrap();
        assert!((out.f[0] - sigmoid(1.0)).abs() < 1e-12);
        assert!((out.f[0] - 0.7311).abs() < 1e-4);
        assert!((out.f[1] - 0.5).abs() < 1e-12);
        let out = b.evaluate(&store, &[vec![-1.0, 0.0]], &plan).unwrap();
        assert!((out.f[0] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn view_errors() {
        let mut store = ParamStore::new();
        let b = Bottleneck::new(&mut store, &mut Initializer::new(0), concepts(2, 4, 0)).unwrap();
        let plan = InterventionPlan::default();
        assert!(b.evaluate(&store, &[], &plan).is_err());
        assert!(b.evaluate(&store, &[vec![1.0, 0.0]], &plan).is_err());
        assert!(b.evaluate(&store, &[vec![2.0, 0.0, 0.0, 0.0]], &plan).is_err());
    }

    #[test]
    fn interventions() {
        let t = concepts(6, 8, 1);
        let f = vec![0.4; 6];
        let (f2, clamps) = apply_interventions(&f, None, None, &t, 0.6).unwrap();
        assert_eq!(f2, f);
        assert!(clamps.is_empty());

        let mut ann = vec![Annotation::Unknown; 6];
        ann[3] = Annotation::Present;
        ann[1] = Annotation::Absent;
        let (f2, _) = apply_interventions(&f, Some(&ann), None, &t, 0.6).unwrap();
        assert_eq!(f2[3], 1.0);
        assert_eq!(f2[1], 0.0);
        assert_eq!(f2[0], 0.4);

        let hint = t.row_slice(5).to_vec();
        let (_, clamps) = apply_interventions(&f, None, Some(&hint), &t, 0.6).unwrap();
        assert_eq!(clamps.get(5), Some(1.0));
        assert!(clamps.iter().all(|(i, _)| cosine(&hint, t.row_slice(i)) > 0.6));
    }

    #[test]
    fn loss_hand_values() {
        assert_eq!(values::alignment_loss(&[0.3, 0.6], &[0.3, 0.6]).unwrap(), 0.0);
        assert_eq!(values::alignment_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(values::alignment_loss(&[0.5], &[0.0]).unwrap(), 0.25);
        assert!(values::alignment_loss(&[0.5], &[0.0, 1.0]).is_err());

        assert_eq!(values::elastic_net(&Tensor::zeros(&[2, 3]), 0.5).unwrap(), 0.0);
        let w = Tensor::row(&[1.0, -1.0]);
        assert_eq!(values::elastic_net(&w, 1.0).unwrap(), 2.0);
        assert_eq!(values::elastic_net(&Tensor::scalar(2.0), 0.0).unwrap(), 2.0);
        assert!(values::elastic_net(&w, 1.5).is_err());

        assert_eq!(values::cbl_loss(0.1, 2.0, 0.0).unwrap(), 0.1);
        assert!((values::cbl_loss(0.1, 2.0, 0.05).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(values::cbl_loss(0.0, 0.0, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn assemble_z_clamps() {
        let p = [0.2, 0.4, 0.6];
        assert_eq!(values::assemble_z(&p, &ClampSet::new()).unwrap(), p);
        let mut c = ClampSet::new();
        c.insert(0, 1.0).unwrap();
        assert_eq!(values::assemble_z(&p, &c).unwrap()[0], 1.0);
        c.insert(2, 0.0).unwrap();
        assert_eq!(values::assemble_z(&p, &c).unwrap(), vec![1.0, 0.4, 0.0]);
        c.insert(3, 1.0).unwrap();
        assert!(values::assemble_z(&p, &c).is_err());
        assert!(ClampSet::new().insert(0, 0.5).is_err());
    }
}
