//! Multi-head attention and transformer layers built from graph primitives.
//!
//! Multi-head splitting is explicit column slicing, so everything stays 2-D.
//! Parameters are looked up by a dotted name prefix; `init_*` registers the
//! matching weights so the forward functions can assume they exist.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Params, TensorRef};

/// Layer-norm epsilon used everywhere.
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct AttnCfg {
    pub dim: usize,
    pub heads: usize,
}

impl AttnCfg {
    pub fn new(dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "head count {heads} must divide model dimension {dim}"
            )));
        }
        Ok(Self { dim, heads })
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Registers Wq/Wk/Wv/Wo (+biases) and the post-residual layer norm.
pub fn init_attention(params: &mut Params, rng: &mut impl Rng, prefix: &str, dim: usize) {
    for w in ["wq", "wk", "wv", "wo"] {
        params.init_weight(&format!("{prefix}.{w}"), dim, dim, rng);
    }
    for b in ["bq", "bk", "bv", "bo"] {
        params.init_zeros(&format!("{prefix}.{b}"), 1, dim);
    }
    params.init_ones(&format!("{prefix}.ln_g"), 1, dim);
    params.init_zeros(&format!("{prefix}.ln_b"), 1, dim);
}

/// Registers a position-wise FFN (hidden 2*dim) and its layer norm.
pub fn init_ffn(params: &mut Params, rng: &mut impl Rng, prefix: &str, dim: usize) {
    let hidden = 2 * dim;
    params.init_weight(&format!("{prefix}.w1"), dim, hidden, rng);
    params.init_zeros(&format!("{prefix}.b1"), 1, hidden);
    params.init_weight(&format!("{prefix}.w2"), hidden, dim, rng);
    params.init_zeros(&format!("{prefix}.b2"), 1, dim);
    params.init_ones(&format!("{prefix}.ln_g"), 1, dim);
    params.init_zeros(&format!("{prefix}.ln_b"), 1, dim);
}

/// Registers one transformer layer: optional cross-attention block,
/// self-attention block, FFN.
pub fn init_transformer_layer(
    params: &mut Params,
    rng: &mut impl Rng,
    prefix: &str,
    dim: usize,
    with_cross: bool,
) {
    if with_cross {
        init_attention(params, rng, &format!("{prefix}.xattn"), dim);
    }
    init_attention(params, rng, &format!("{prefix}.sattn"), dim);
    init_ffn(params, rng, &format!("{prefix}.ffn"), dim);
}

fn linear(
    g: &mut Graph,
    params: &Params,
    x: TensorRef,
    w: &str,
    b: &str,
) -> Result<TensorRef> {
    let w = g.param(params, w)?;
    let b = g.param(params, b)?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Scaled dot-product context of `q_in` over `kv_in`: per-head softmax
/// attention, heads re-concatenated, before the output projection.
pub fn multi_head_context(
    g: &mut Graph,
    params: &Params,
    prefix: &str,
    q_in: TensorRef,
    kv_in: TensorRef,
    cfg: AttnCfg,
) -> Result<TensorRef> {
    if g.value(q_in).cols() != cfg.dim || g.value(kv_in).cols() != cfg.dim {
        return Err(Error::Dim(format!(
            "attention inputs must have {} columns",
            cfg.dim
        )));
    }
    let q = linear(g, params, q_in, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
    let k = linear(g, params, kv_in, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
    let v = linear(g, params, kv_in, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;

    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (from, to) = (h * hd, (h + 1) * hd);
        let qh = g.slice_cols(q, from, to)?;
        let kh = g.slice_cols(k, from, to)?;
        let vh = g.slice_cols(v, from, to)?;
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale_const(scores, scale);
        let probs = g.softmax_rows(scores)?;
        heads.push(g.matmul(probs, vh)?);
    }
    let mut ctx = heads[0];
    for h in &heads[1..] {
        ctx = g.concat_cols(ctx, *h)?;
    }
    Ok(ctx)
}

/// Multi-head attention with residual add and layer norm.
pub fn cross_attention(
    g: &mut Graph,
    params: &Params,
    prefix: &str,
    q_in: TensorRef,
    kv_in: TensorRef,
    cfg: AttnCfg,
) -> Result<TensorRef> {
    let ctx = multi_head_context(g, params, prefix, q_in, kv_in, cfg)?;
    let out = linear(g, params, ctx, &format!("{prefix}.wo"), &format!("{prefix}.bo"))?;
    let res = g.add(q_in, out)?;
    let gain = g.param(params, &format!("{prefix}.ln_g"))?;
    let bias = g.param(params, &format!("{prefix}.ln_b"))?;
    g.layer_norm(res, gain, bias, LN_EPS)
}

fn ffn_block(
    g: &mut Graph,
    params: &Params,
    prefix: &str,
    x: TensorRef,
) -> Result<TensorRef> {
    let h = linear(g, params, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
    let h = g.gelu(h);
    let out = linear(g, params, h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))?;
    let res = g.add(x, out)?;
    let gain = g.param(params, &format!("{prefix}.ln_g"))?;
    let bias = g.param(params, &format!("{prefix}.ln_b"))?;
    g.layer_norm(res, gain, bias, LN_EPS)
}

/// One transformer layer: cross-attention over `ctx` when present, then
/// self-attention, then the position-wise FFN; each block carries its own
/// residual and layer norm.
pub fn transformer_layer(
    g: &mut Graph,
    params: &Params,
    prefix: &str,
    x: TensorRef,
    ctx: Option<TensorRef>,
    cfg: AttnCfg,
) -> Result<TensorRef> {
    let x = match ctx {
        Some(ctx) => cross_attention(g, params, &format!("{prefix}.xattn"), x, ctx, cfg)?,
        None => x,
    };
    let x = cross_attention(g, params, &format!("{prefix}.sattn"), x, x, cfg)?;
    ffn_block(g, params, &format!("{prefix}.ffn"), x)
}
