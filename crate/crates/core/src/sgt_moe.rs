//! Structure-injecting graph-transformer layers with a mixture-of-experts
//! feed-forward block, layer stacks, and the MLP classifier head.
//!
//! Every layer is post-norm:
//! `h = LN(V + attn(V, E_st))`, `V_evo = LN(h + moe(h))`.
//! Attention per head is `softmax(E_st_h + Q_h K_hᵀ / √d_h) V_h`, heads are
//! concatenated and projected back to the layer width.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphs::{BucketSpec, GraphLayout};
use crate::numerics::{Bindings, Initializer, LayerNorm, Linear, ParamId, ParamStore, Tape, Tensor, Var};

/// Buckets of the attention-to-prior table; inputs are clipped to `[0, 1]`.
pub const DEFAULT_SGT_BUCKETS: usize = 32;
pub const DEFAULT_L_SGT: f64 = 1.0;
pub const FFN_EXPANSION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub width: usize,
    pub heads: usize,
    pub experts: usize,
    pub use_moe: bool,
    pub l_sgt: f64,
    pub sgt_buckets: BucketSpec,
}

impl LayerConfig {
    pub fn new(width: usize, heads: usize, experts: usize, use_moe: bool) -> Self {
        Self {
            width,
            heads,
            experts,
            use_moe,
            l_sgt: DEFAULT_L_SGT,
            sgt_buckets: BucketSpec {
                buckets: DEFAULT_SGT_BUCKETS,
                max: 1.0,
            },
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width == 0 || self.width % self.heads != 0 {
            return Err(Error::invalid(format!(
                "layer width {} must be a positive multiple of the head count {}",
                self.width, self.heads
            )));
        }
        if self.experts == 0 {
            return Err(Error::invalid("expert count must be >= 1"));
        }
        if !(self.l_sgt >= 0.0) {
            return Err(Error::invalid(format!("l_sgt must be >= 0, got {}", self.l_sgt)));
        }
        Ok(())
    }
}

/// Two-layer feed-forward net `w → 4w → w` with GELU.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, init, &format!("{name}.up"), width, FFN_EXPANSION * width)?,
            down: Linear::new(store, init, &format!("{name}.down"), FFN_EXPANSION * width, width)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, p, h)
    }

    pub fn num_scalars(&self) -> usize {
        self.up.num_scalars() + self.down.num_scalars()
    }

    /// Scalar count of one feed-forward net of the given width.
    pub fn count_for(width: usize) -> usize {
        let h = FFN_EXPANSION * width;
        width * h + h + h * width + width
    }
}

/// Dense soft-gated experts, or a single feed-forward net when gating is off.
#[derive(Debug, Clone)]
pub struct MoeBlock {
    pub gate: Option<Linear>,
    pub experts: Vec<FeedForward>,
}

#[derive(Debug, Clone, Copy)]
pub struct MoeVars {
    pub out: Var,
    /// `n × K_e` softmax gate weights; `None` for the single-FFN block.
    pub gates: Option<Var>,
}

impl MoeBlock {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        width: usize,
        experts: usize,
        use_moe: bool,
    ) -> Result<Self> {
        if !use_moe {
            return Ok(Self {
                gate: None,
                experts: vec![FeedForward::new(store, init, &format!("{name}.ffn"), width)?],
            });
        }
        if experts == 0 {
            return Err(Error::invalid("expert count must be >= 1"));
        }
        let gate = Linear::new(store, init, &format!("{name}.gate"), width, experts)?;
        let experts = (0..experts)
            .map(|k| FeedForward::new(store, init, &format!("{name}.expert{k}"), width))
            .collect::<Result<_>>()?;
        Ok(Self {
            gate: Some(gate),
            experts,
        })
    }

    /// `Σ_k softmax(gate(x))_k · E_k(x)` per row, summed in expert order.
    pub fn forward(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<MoeVars> {
        let Some(gate) = self.gate else {
            let out = self.experts[0].forward(tape, p, x)?;
            return Ok(MoeVars { out, gates: None });
        };
        let logits = gate.forward(tape, p, x)?;
        let gates = tape.softmax_rows(logits)?;
        let mut acc: Option<Var> = None;
        for (k, expert) in self.experts.iter().enumerate() {
            let y = expert.forward(tape, p, x)?;
            let g = tape.slice_cols(gates, k, k + 1)?;
            let term = tape.mul_col(y, g)?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
        Ok(MoeVars {
            out: acc.expect("at least one expert"),
            gates: Some(gates),
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.gate.map_or(0, |g| g.num_scalars())
            + self.experts.iter().map(FeedForward::num_scalars).sum::<usize>()
    }
}

/// Per-head structural priors entering one layer's attention.
pub type Priors = Option<Vec<Var>>;

#[derive(Debug, Clone)]
pub struct SgtLayer {
    pub config: LayerConfig,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    /// `buckets × H` table embedding rescaled attention as the next prior.
    pub psi_sgt: ParamId,
    pub moe: MoeBlock,
}

#[derive(Debug, Clone)]
pub struct AttentionVars {
    pub update: Var,
    /// Per-head `n × n` attention.
    pub heads: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub v_evo: Var,
    pub attention: Vec<Var>,
    pub gates: Option<Var>,
}

impl LayerVars {
    /// Head-mean attention, the matrix handed to the next layer.
    pub fn e_evo(&self, tape: &Tape) -> Tensor {
        head_mean(tape, &self.attention)
    }
}

fn head_mean(tape: &Tape, heads: &[Var]) -> Tensor {
    let first = tape.value(heads[0]);
    let mut out = Tensor::zeros(first.shape());
    for &h in heads {
        for (o, v) in out.data_mut().iter_mut().zip(tape.value(h).data()) {
            *o += v;
        }
    }
    let inv = 1.0 / heads.len() as f64;
    out.map(|v| v * inv)
}

impl SgtLayer {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, config: LayerConfig) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        Ok(Self {
            query: Linear::new(store, init, &format!("{name}.query"), w, w)?,
            key: Linear::new(store, init, &format!("{name}.key"), w, w)?,
            value: Linear::new(store, init, &format!("{name}.value"), w, w)?,
            output: Linear::new(store, init, &format!("{name}.output"), w, w)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), w)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), w)?,
            psi_sgt: store.add(
                format!("{name}.psi_sgt"),
                Tensor::zeros(&[config.sgt_buckets.buckets, config.heads]),
            )?,
            moe: MoeBlock::new(store, init, &format!("{name}.moe"), w, config.experts, config.use_moe)?,
            config,
        })
    }

    fn check_input(&self, tape: &Tape, v: Var, priors: &Priors) -> Result<usize> {
        let x = tape.value(v);
        if x.shape().len() != 2 || x.cols() != self.config.width || x.rows() == 0 {
            return Err(Error::shape(
                "sgt_attention",
                format!("nodes {:?} for layer width {}", x.shape(), self.config.width),
            ));
        }
        let n = x.rows();
        if let Some(ps) = priors {
            if ps.len() != self.config.heads {
                return Err(Error::shape(
                    "sgt_attention",
                    format!("{} prior heads for {} attention heads", ps.len(), self.config.heads),
                ));
            }
            if let Some(bad) = ps.iter().find(|&&p| tape.value(p).shape() != [n, n]) {
                return Err(Error::shape(
                    "sgt_attention",
                    format!("prior {:?} for {n} nodes", tape.value(*bad).shape()),
                ));
            }
        }
        Ok(n)
    }

    pub fn attention(&self, tape: &mut Tape, p: &Bindings, v: Var, priors: &Priors) -> Result<AttentionVars> {
        self.check_input(tape, v, priors)?;
        let dh = self.config.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let q = self.query.forward(tape, p, v)?;
        let k = self.key.forward(tape, p, v)?;
        let val = self.value.forward(tape, p, v)?;
        let mut heads = Vec::with_capacity(self.config.heads);
        let mut outs = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, a, b)?;
            let kh = tape.slice_cols(k, a, b)?;
            let vh = tape.slice_cols(val, a, b)?;
            let kt = tape.transpose(kh);
            let s = tape.matmul(qh, kt)?;
            let mut s = tape.scale(s, inv_sqrt);
            if let Some(ps) = priors {
                s = tape.add(s, ps[h])?;
            }
            let att = tape.softmax_rows(s)?;
            outs.push(tape.matmul(att, vh)?);
            heads.push(att);
        }
        let cat = tape.concat_cols(&outs)?;
        let update = self.output.forward(tape, p, cat)?;
        Ok(AttentionVars { update, heads })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, v: Var, priors: &Priors) -> Result<LayerVars> {
        let att = self.attention(tape, p, v, priors)?;
        let h = tape.add(v, att.update)?;
        let h = self.norm1.forward(tape, p, h)?;
        let moe = self.moe.forward(tape, p, h)?;
        let out = tape.add(h, moe.out)?;
        let v_evo = self.norm2.forward(tape, p, out)?;
        Ok(LayerVars {
            v_evo,
            attention: att.heads,
            gates: moe.gates,
        })
    }

    /// Bucket-table rows for `l_sgt · E_evo`.
    pub fn rescale_indices(&self, e_evo: &Tensor) -> Vec<usize> {
        e_evo
            .data()
            .iter()
            .map(|&e| self.config.sgt_buckets.index(self.config.l_sgt * e))
            .collect()
    }

    /// Next-layer priors `Ψ_sgt(l_sgt · E_evo)`, one per head.
    pub fn rescale_prior(&self, tape: &mut Tape, p: &Bindings, e_evo: &Tensor) -> Result<Vec<Var>> {
        let idx = self.rescale_indices(e_evo);
        let n = e_evo.rows();
        (0..self.config.heads)
            .map(|h| tape.gather(p.get(self.psi_sgt), &idx, h, n, n))
            .collect()
    }
}

/// Plain-value version of the prior rescaling for one head.
pub fn rescale_prior(e_evo: &Tensor, l_sgt: f64, psi_sgt: &Tensor, spec: BucketSpec, head: usize) -> Tensor {
    e_evo.map(|e| psi_sgt.get(spec.index(l_sgt * e), head))
}

/// A stack of layers over one graph.
#[derive(Debug, Clone)]
pub struct SgtStack {
    pub layers: Vec<SgtLayer>,
}

#[derive(Debug, Clone)]
pub struct StackVars {
    pub v: Var,
    pub e_evo: Tensor,
    pub layers: Vec<LayerVars>,
}

impl SgtStack {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        n_layers: usize,
        config: LayerConfig,
    ) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::invalid(format!("{name} needs at least one layer")));
        }
        let layers = (0..n_layers)
            .map(|l| SgtLayer::new(store, init, &format!("{name}.layer{l}"), config))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn config(&self) -> &LayerConfig {
        &self.layers[0].config
    }

    /// Structural prior of the first layer: one table lookup per head.
    pub fn graph_priors(&self, tape: &mut Tape, layout: &GraphLayout, table: Var) -> Result<Vec<Var>> {
        (0..self.config().heads)
            .map(|h| layout.structural_var(tape, table, h))
            .collect()
    }

    /// Layer 1 consumes `first`; every later layer consumes the rescaled
    /// head-mean attention of its predecessor. With `use_prior` off no layer
    /// receives a prior.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bindings,
        v: Var,
        first: Priors,
        use_prior: bool,
    ) -> Result<StackVars> {
        let mut priors = if use_prior { first } else { None };
        let mut x = v;
        let mut outs: Vec<LayerVars> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            if l > 0 && use_prior {
                let e = outs[l - 1].e_evo(tape);
                priors = Some(layer.rescale_prior(tape, p, &e)?);
            }
            let out = layer.forward(tape, p, x, &priors)?;
            x = out.v_evo;
            outs.push(out);
        }
        let e_evo = outs.last().expect("non-empty").e_evo(tape);
        Ok(StackVars { v: x, e_evo, layers: outs })
    }
}

/// One hidden layer (GELU) followed by the output map. `hidden.weight` is
/// the matrix the elastic-net penalty acts on.
#[derive(Debug, Clone, Copy)]
pub struct MlpClassifier {
    pub hidden: Linear,
    pub output: Linear,
}

impl MlpClassifier {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        input: usize,
        hidden: usize,
        classes: usize,
    ) -> Result<Self> {
        if classes == 0 {
            return Err(Error::invalid("classifier needs at least one class"));
        }
        Ok(Self {
            hidden: Linear::new(store, init, &format!("{name}.hidden"), input, hidden)?,
            output: Linear::new(store, init, &format!("{name}.output"), hidden, classes)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bindings, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.output.forward(tape, p, h)
    }
}
