//! Knowledge-enhanced view reasoning.
//!
//! Three stages produce one representation per candidate view: instruction-
//! aware purification reweights fact/region/history features by their best
//! relevance score against the instruction tokens; cross-modal transformer
//! stacks let region and history features interact with the retrieved facts;
//! instruction-guided aggregation pools regions (and map nodes) into single
//! vectors that an FFN fuses into the final view representation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{init_transformer_layer, transformer_layer, AttnCfg};
use crate::error::{Error, Result};
use crate::graph::{Graph, Params, TensorRef};

/// Which features drive the aggregation attention query: the raw features
/// (as the formulas state) or the enhanced ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggQuerySource {
    Raw,
    Enhanced,
}

#[derive(Debug, Clone, Copy)]
pub struct ReasonerCfg {
    pub dim: usize,
    pub heads: usize,
    /// Cross-modal transformer depth for both interaction stacks.
    pub layers: usize,
    /// Optional sigmoid gate over the purification weights.
    pub alpha_gate: bool,
    pub aggregate_query_source: AggQuerySource,
    /// Ablation switches.
    pub purify_enabled: bool,
    pub vf_enabled: bool,
    pub hf_enabled: bool,
}

impl ReasonerCfg {
    pub fn standard(dim: usize, heads: usize, layers: usize) -> Self {
        Self {
            dim,
            heads,
            layers,
            alpha_gate: false,
            aggregate_query_source: AggQuerySource::Raw,
            purify_enabled: true,
            vf_enabled: true,
            hf_enabled: true,
        }
    }

    pub fn attn(&self) -> Result<AttnCfg> {
        AttnCfg::new(self.dim, self.heads)
    }
}

/// Registers purification/aggregation weights, both interaction stacks, and
/// the fusion FFN.
pub fn init_reasoner_params(params: &mut Params, rng: &mut impl Rng, cfg: &ReasonerCfg) {
    let d = cfg.dim;
    for w in ["kerm.w1", "kerm.w2", "kerm.w3", "kerm.w4"] {
        params.init_weight(w, d, d, rng);
    }
    for l in 0..cfg.layers {
        init_transformer_layer(params, rng, &format!("kerm.vf.{l}"), d, true);
    }
    for l in 0..cfg.layers {
        init_transformer_layer(params, rng, &format!("kerm.hf.{l}"), d, true);
    }
    params.init_weight("kerm.fuse.w1", 2 * d, d, rng);
    params.init_zeros("kerm.fuse.b1", 1, d);
    params.init_weight("kerm.fuse.w2", d, d, rng);
    params.init_zeros("kerm.fuse.b2", 1, d);
}

/// Purification output: the relevance matrix, the per-row weights, and the
/// reweighted features.
#[derive(Debug, Clone, Copy)]
pub struct PurifiedSet {
    /// Features x instruction-tokens relevance matrix.
    pub relevance: TensorRef,
    /// Per-feature weight: row-wise max of the relevance matrix (optionally
    /// sigmoid-gated).
    pub alpha: TensorRef,
    /// alpha[i] * x[i, :].
    pub purified: TensorRef,
}

/// Relevance-weighted feature purification: A = (X W1)(L W2)^T / sqrt(d),
/// alpha = row-max of A, purified = diag(alpha) X.
pub fn purify(
    g: &mut Graph,
    params: &Params,
    x: TensorRef,
    instruction: TensorRef,
    cfg: &ReasonerCfg,
) -> Result<PurifiedSet> {
    let d = cfg.dim;
    if g.value(x).cols() != d || g.value(instruction).cols() != d {
        return Err(Error::Dim(format!(
            "purify inputs must have {d} columns, got {} and {}",
            g.value(x).cols(),
            g.value(instruction).cols()
        )));
    }
    let w1 = g.param(params, "kerm.w1")?;
    let w2 = g.param(params, "kerm.w2")?;
    let xw = g.matmul(x, w1)?;
    let lw = g.matmul(instruction, w2)?;
    let lwt = g.transpose(lw);
    let scores = g.matmul(xw, lwt)?;
    let relevance = g.scale_const(scores, 1.0 / (d as f64).sqrt());
    let mut alpha = g.row_max(relevance)?;
    if cfg.alpha_gate {
        alpha = g.sigmoid(alpha);
    }
    let purified = g.scale_rows(x, alpha)?;
    Ok(PurifiedSet {
        relevance,
        alpha,
        purified,
    })
}

/// Multi-layer cross-modal interaction: each layer cross-attends the
/// features over the purified facts, self-attends, and applies the FFN.
pub fn fact_interact(
    g: &mut Graph,
    params: &Params,
    stack: &str,
    features: TensorRef,
    facts: TensorRef,
    cfg: &ReasonerCfg,
) -> Result<TensorRef> {
    let attn = cfg.attn()?;
    let mut x = features;
    for l in 0..cfg.layers {
        x = transformer_layer(g, params, &format!("{stack}.{l}"), x, Some(facts), attn)?;
    }
    Ok(x)
}

/// Instruction-guided pooling: eta = softmax((Rq W3)(L0 W4)^T / sqrt(d))
/// over the K rows, output = eta . enhanced.
pub fn aggregate(
    g: &mut Graph,
    params: &Params,
    query_feats: TensorRef,
    enhanced: TensorRef,
    instruction_cls: TensorRef,
    cfg: &ReasonerCfg,
) -> Result<(TensorRef, TensorRef)> {
    let d = cfg.dim;
    if g.value(query_feats).rows() != g.value(enhanced).rows() {
        return Err(Error::Dim(format!(
            "aggregate query rows {} vs enhanced rows {}",
            g.value(query_feats).rows(),
            g.value(enhanced).rows()
        )));
    }
    let w3 = g.param(params, "kerm.w3")?;
    let w4 = g.param(params, "kerm.w4")?;
    let rw = g.matmul(query_feats, w3)?;
    let lw = g.matmul(instruction_cls, w4)?;
    let lwt = g.transpose(lw);
    let scores = g.matmul(rw, lwt)?;
    let scores = g.scale_const(scores, 1.0 / (d as f64).sqrt());
    let scores_row = g.transpose(scores);
    let eta = g.softmax_rows(scores_row)?;
    let pooled = g.matmul(eta, enhanced)?;
    Ok((pooled, eta))
}

/// Two-layer FFN over the concatenated region/history vectors.
pub fn fuse(
    g: &mut Graph,
    params: &Params,
    region_vec: TensorRef,
    history_vec: TensorRef,
) -> Result<TensorRef> {
    let cat = g.concat_cols(region_vec, history_vec)?;
    let w1 = g.param(params, "kerm.fuse.w1")?;
    let b1 = g.param(params, "kerm.fuse.b1")?;
    let w2 = g.param(params, "kerm.fuse.w2")?;
    let b2 = g.param(params, "kerm.fuse.b2")?;
    let h = g.matmul(cat, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.gelu(h);
    let out = g.matmul(h, w2)?;
    g.add_row(out, b2)
}

/// Inputs for one view's enhancement.
#[derive(Debug, Clone, Copy)]
pub struct ViewBundle {
    /// KxD raw region features.
    pub regions: TensorRef,
    /// (K*k)xD retrieved fact features.
    pub facts: TensorRef,
    /// mxD map-node (history) features, shared across the step's views.
    pub history: TensorRef,
    /// MxD instruction token features.
    pub instruction: TensorRef,
    /// 1xD whole-instruction feature.
    pub instruction_cls: TensorRef,
}

/// Enhancement output: the view representation plus the inspection values
/// (purification weights and aggregation distribution).
#[derive(Debug, Clone)]
pub struct EnhancedView {
    pub repr: TensorRef,
    /// Purification weight per retrieved fact, in fact-row order.
    pub fact_alpha: Vec<f64>,
    pub region_alpha: Vec<f64>,
    pub history_alpha: Vec<f64>,
    /// Aggregation weights over the K regions.
    pub eta: Vec<f64>,
}

fn column(t: &crate::tensor::Tensor2) -> Vec<f64> {
    (0..t.rows()).map(|r| t.at(r, 0)).collect()
}

/// Full per-view pipeline: purify facts/regions/history, run both
/// interaction stacks, aggregate under the instruction, fuse.
pub fn enhance_view(
    g: &mut Graph,
    params: &Params,
    bundle: &ViewBundle,
    cfg: &ReasonerCfg,
) -> Result<EnhancedView> {
    let d = cfg.dim;
    for (name, m) in [
        ("regions", bundle.regions),
        ("facts", bundle.facts),
        ("history", bundle.history),
        ("instruction", bundle.instruction),
    ] {
        if g.value(m).cols() != d {
            return Err(Error::Dim(format!("{name} must have {d} columns")));
        }
    }

    let (ep, fact_alpha) = if cfg.purify_enabled {
        let p = purify(g, params, bundle.facts, bundle.instruction, cfg)?;
        (p.purified, column(g.value(p.alpha)))
    } else {
        (bundle.facts, vec![1.0; g.value(bundle.facts).rows()])
    };
    let (rp, region_alpha) = if cfg.purify_enabled {
        let p = purify(g, params, bundle.regions, bundle.instruction, cfg)?;
        (p.purified, column(g.value(p.alpha)))
    } else {
        (bundle.regions, vec![1.0; g.value(bundle.regions).rows()])
    };
    let (hp, history_alpha) = if cfg.purify_enabled {
        let p = purify(g, params, bundle.history, bundle.instruction, cfg)?;
        (p.purified, column(g.value(p.alpha)))
    } else {
        (bundle.history, vec![1.0; g.value(bundle.history).rows()])
    };

    let r2 = if cfg.vf_enabled {
        fact_interact(g, params, "kerm.vf", rp, ep, cfg)?
    } else {
        rp
    };
    let h2 = if cfg.hf_enabled {
        fact_interact(g, params, "kerm.hf", hp, ep, cfg)?
    } else {
        hp
    };

    let rq = match cfg.aggregate_query_source {
        AggQuerySource::Raw => bundle.regions,
        AggQuerySource::Enhanced => r2,
    };
    let hq = match cfg.aggregate_query_source {
        AggQuerySource::Raw => bundle.history,
        AggQuerySource::Enhanced => h2,
    };
    let (rbar, eta) = aggregate(g, params, rq, r2, bundle.instruction_cls, cfg)?;
    let (hbar, _) = aggregate(g, params, hq, h2, bundle.instruction_cls, cfg)?;
    let repr = fuse(g, params, rbar, hbar)?;
    Ok(EnhancedView {
        repr,
        fact_alpha,
        region_alpha,
        history_alpha,
        eta: g.value(eta).row(0).to_vec(),
    })
}
