//! Action head: instruction encoding, candidate scoring over the map
//! frontier plus STOP, and object grounding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{init_attention, init_transformer_layer, transformer_layer, AttnCfg};
use crate::attention::cross_attention;
use crate::error::{Error, Result};
use crate::graph::{Graph, Params, TensorRef};
use crate::sim::map::NodeState;
use crate::tensor::Tensor2;

/// A movement decision: a map node or the distinguished STOP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Option<u32>", into = "Option<u32>")]
pub enum ActionTarget {
    Stop,
    Node(u32),
}

impl From<Option<u32>> for ActionTarget {
    fn from(v: Option<u32>) -> Self {
        match v {
            None => ActionTarget::Stop,
            Some(n) => ActionTarget::Node(n),
        }
    }
}

impl From<ActionTarget> for Option<u32> {
    fn from(t: ActionTarget) -> Self {
        match t {
            ActionTarget::Stop => None,
            ActionTarget::Node(n) => Some(n),
        }
    }
}

/// Normalized distribution over action candidates. Anything not listed has
/// probability exactly zero.
#[derive(Debug, Clone)]
pub struct ActionScores {
    pub candidates: Vec<ActionTarget>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// Log-probability row (1xC) in the graph that produced these scores;
    /// absent for scripted policies.
    pub log_prob_row: Option<TensorRef>,
}

impl ActionScores {
    /// Scripted scores from explicit probabilities (tests and teachers).
    pub fn from_probs(candidates: Vec<ActionTarget>, probs: Vec<f64>) -> Result<Self> {
        if candidates.len() != probs.len() || candidates.is_empty() {
            return Err(Error::Invalid("candidates/probs length mismatch".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || probs.iter().any(|p| *p < 0.0) {
            return Err(Error::Invalid("probabilities must be a distribution".into()));
        }
        let logits = probs.iter().map(|p| p.max(1e-300).ln()).collect();
        Ok(Self {
            candidates,
            logits,
            probs,
            log_prob_row: None,
        })
    }

    /// Highest-probability candidate; ties resolve to the earliest entry.
    pub fn argmax(&self) -> Result<ActionTarget> {
        if self.candidates.is_empty() {
            return Err(Error::Invalid("no candidates to choose from".into()));
        }
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        Ok(self.candidates[best])
    }

    pub fn index_of(&self, target: ActionTarget) -> Option<usize> {
        self.candidates.iter().position(|c| *c == target)
    }

    pub fn prob_of(&self, target: ActionTarget) -> f64 {
        self.index_of(target).map_or(0.0, |i| self.probs[i])
    }

    pub fn stop_prob(&self) -> f64 {
        self.prob_of(ActionTarget::Stop)
    }
}

/// Scores over the objects visible at a node.
#[derive(Debug, Clone)]
pub struct ObjectScores {
    pub object_ids: Vec<u32>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub log_prob_row: Option<TensorRef>,
}

impl ObjectScores {
    pub fn argmax(&self) -> Option<u32> {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        self.object_ids.get(best).copied()
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.object_ids.iter().position(|o| *o == id)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PolicyCfg {
    pub dim: usize,
    pub heads: usize,
    /// Instruction encoder depth.
    pub enc_layers: usize,
    /// Candidate encoder depth.
    pub cand_layers: usize,
}

impl PolicyCfg {
    pub fn attn(&self) -> Result<AttnCfg> {
        AttnCfg::new(self.dim, self.heads)
    }
}

/// Registers every policy-side parameter. When a provider is given, the
/// token embedding table starts from the provider's word vectors so
/// instruction tokens and region/fact features share a space from the
/// first step; the table stays learnable either way.
pub fn init_policy_params(
    params: &mut Params,
    rng: &mut impl Rng,
    vocab_size: usize,
    cfg: &PolicyCfg,
    provider: Option<&crate::retrieval::EmbeddingProviderSpec>,
) {
    match provider {
        Some(spec) if spec.provider == crate::retrieval::ProviderKind::HashBag => {
            let mut table = Tensor2::glorot(vocab_size, cfg.dim, rng);
            for id in 0..vocab_size {
                let word = crate::vocab::word(id).expect("vocab id in range");
                if id == crate::vocab::CLS || id == crate::vocab::MASK {
                    continue;
                }
                if let Ok(v) = crate::retrieval::embed_text(spec, word) {
                    for (c, val) in v.iter().enumerate() {
                        table.set(id, c, *val);
                    }
                }
            }
            params.insert("pol.embed", table);
        }
        _ => params.init_weight("pol.embed", vocab_size, cfg.dim, rng),
    }
    for l in 0..cfg.enc_layers {
        init_transformer_layer(params, rng, &format!("pol.enc.{l}"), cfg.dim, false);
    }
    params.init_weight("pol.stop", 1, cfg.dim, rng);
    params.init_weight("pol.tag.visited", 1, cfg.dim, rng);
    params.init_weight("pol.tag.current", 1, cfg.dim, rng);
    params.init_weight("pol.tag.navigable", 1, cfg.dim, rng);
    for l in 0..cfg.cand_layers {
        init_transformer_layer(params, rng, &format!("pol.cand.{l}"), cfg.dim, true);
    }
    params.init_weight("pol.act.w", cfg.dim, 1, rng);
    params.init_zeros("pol.act.b", 1, 1);
    // content-relevance gate: the matching itself is a fixed prior over
    // provider embeddings, only its weight and the stop threshold learn
    params.insert("pol.match.scale", Tensor2::filled(1, 1, (cfg.dim as f64).sqrt()));
    params.insert("pol.match.stop", Tensor2::filled(1, 1, 0.5 / (cfg.dim as f64).sqrt()));
    init_attention(params, rng, "pol.obj.xattn", cfg.dim);
    params.init_weight("pol.obj.w", cfg.dim, 1, rng);
    params.init_zeros("pol.obj.b", 1, 1);
}

/// Encoded instruction: per-word features plus the whole-instruction CLS
/// feature and raw phrase (bigram) embeddings for relevance scoring.
#[derive(Debug, Clone)]
pub struct InstructionEncoding {
    pub token_ids: Vec<usize>,
    /// MxD word features.
    pub l: TensorRef,
    /// 1xD CLS feature.
    pub l0: TensorRef,
    /// (M-1)xD consecutive-pair embeddings straight off the token table
    /// (MxD single-token table rows when the instruction has one word).
    pub bigrams: TensorRef,
}

/// Classic sinusoidal position table.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor2 {
    let mut out = Tensor2::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim {
            let exponent = (2 * (i / 2)) as f64 / dim as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            out.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    out
}

/// Embeds `[CLS] + tokens`, adds sinusoidal positions, and runs the
/// self-attention encoder stack. With a hash-bag provider the phrase rows
/// are provider constants; otherwise they fall back to token-table means.
pub fn encode_instruction(
    g: &mut Graph,
    params: &Params,
    tokens: &[usize],
    cfg: &PolicyCfg,
    provider: Option<&crate::retrieval::EmbeddingProviderSpec>,
) -> Result<InstructionEncoding> {
    if tokens.is_empty() {
        return Err(Error::Invalid("instruction must have at least one token".into()));
    }
    let table = params.get("pol.embed")?;
    let vocab_rows = table.rows();
    if let Some(bad) = tokens.iter().find(|&&t| t >= vocab_rows) {
        return Err(Error::Invalid(format!("token id {bad} outside vocabulary")));
    }
    let mut ids = Vec::with_capacity(tokens.len() + 1);
    ids.push(crate::vocab::CLS);
    ids.extend_from_slice(tokens);

    let table = g.param(params, "pol.embed")?;
    let mut x = g.select_rows(table, &ids)?;
    let pos = g.constant(positional_encoding(ids.len(), cfg.dim));
    x = g.add(x, pos)?;
    let attn = cfg.attn()?;
    for l in 0..cfg.enc_layers {
        x = transformer_layer(g, params, &format!("pol.enc.{l}"), x, None, attn)?;
    }
    let l0 = g.slice_rows(x, 0, 1)?;
    let l = g.slice_rows(x, 1, ids.len())?;
    let hash_bag = provider.filter(|p| p.provider == crate::retrieval::ProviderKind::HashBag);
    let bigrams = match hash_bag {
        Some(spec) => {
            let words: Vec<&str> = tokens
                .iter()
                .map(|&t| crate::vocab::word(t).expect("validated above"))
                .collect();
            let mut rows = Vec::new();
            if words.len() >= 2 {
                for pair in words.windows(2) {
                    rows.push(crate::retrieval::embed_text(
                        spec,
                        &format!("{} {}", pair[0], pair[1]),
                    )?);
                }
            } else {
                rows.push(crate::retrieval::embed_text(spec, words[0])?);
            }
            g.constant(Tensor2::from_rows(&rows)?)
        }
        None => {
            if tokens.len() >= 2 {
                let heads = g.select_rows(table, &tokens[..tokens.len() - 1])?;
                let tails = g.select_rows(table, &tokens[1..])?;
                let sum = g.add(heads, tails)?;
                g.scale_const(sum, 0.5)
            } else {
                g.select_rows(table, tokens)?
            }
        }
    };
    Ok(InstructionEncoding {
        token_ids: tokens.to_vec(),
        l,
        l0,
        bigrams,
    })
}

/// One scoring candidate: a target, its feature row (1xD), and its map
/// state. STOP carries the current node's feature and the current tag.
#[derive(Debug, Clone, Copy)]
pub struct Candidate {
    pub target: ActionTarget,
    pub feature: TensorRef,
    /// Raw per-region content rows used by the relevance term; candidates
    /// without one (STOP) get the learned stop threshold instead.
    pub match_feats: Option<TensorRef>,
    pub state: NodeState,
}

fn tag_name(state: NodeState) -> &'static str {
    match state {
        NodeState::Visited => "pol.tag.visited",
        NodeState::Current => "pol.tag.current",
        NodeState::Navigable => "pol.tag.navigable",
    }
}

/// Scores candidates: state tags (plus the stop embedding for STOP) are
/// added to each feature, the stack self-attends over candidates with
/// cross-attention to the instruction, and a linear head yields logits.
pub fn score_actions(
    g: &mut Graph,
    params: &Params,
    candidates: &[Candidate],
    instruction: &InstructionEncoding,
    cfg: &PolicyCfg,
) -> Result<ActionScores> {
    if candidates.is_empty() {
        return Err(Error::Invalid("need at least the STOP candidate".into()));
    }
    if candidates
        .iter()
        .filter(|c| c.target == ActionTarget::Stop)
        .count()
        != 1
    {
        return Err(Error::Invalid("exactly one STOP candidate required".into()));
    }
    let mut rows = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let tag = g.param(params, tag_name(cand.state))?;
        let mut row = g.add(cand.feature, tag)?;
        if cand.target == ActionTarget::Stop {
            let stop = g.param(params, "pol.stop")?;
            row = g.add(row, stop)?;
        }
        rows.push(row);
    }
    let stacked = g.concat_rows(&rows)?;
    let attn = cfg.attn()?;
    let mut x = stacked;
    for l in 0..cfg.cand_layers {
        x = transformer_layer(g, params, &format!("pol.cand.{l}"), x, Some(instruction.l), attn)?;
    }
    let w = g.param(params, "pol.act.w")?;
    let b = g.param(params, "pol.act.b")?;
    let logits_col = g.matmul(x, w)?;
    let logits_col = g.add_row(logits_col, b)?;
    // relevance term: each candidate's region rows against the instruction
    // phrase embeddings (mean over regions of the best phrase match);
    // the STOP candidate competes through a learned threshold
    let lmt = g.transpose(instruction.bigrams);
    let stop_rel = g.param(params, "pol.match.stop")?;
    let mut rel_rows = Vec::with_capacity(candidates.len());
    for cand in candidates {
        match cand.match_feats {
            Some(mf) => {
                let a = g.matmul(mf, lmt)?;
                let a = g.scale_const(a, 1.0 / (cfg.dim as f64).sqrt());
                let best = g.row_max(a)?;
                rel_rows.push(g.mean_rows(best)?);
            }
            None => rel_rows.push(stop_rel),
        }
    }
    let rel = g.concat_rows(&rel_rows)?;
    let scale = g.param(params, "pol.match.scale")?;
    let rel_scaled = g.matmul(rel, scale)?;
    let logits_col = g.add(logits_col, rel_scaled)?;
    let logits_row = g.transpose(logits_col);
    let log_probs = g.log_softmax_rows(logits_row)?;
    let probs: Vec<f64> = g.value(log_probs).row(0).iter().map(|lp| lp.exp()).collect();
    Ok(ActionScores {
        candidates: candidates.iter().map(|c| c.target).collect(),
        logits: g.value(logits_row).row(0).to_vec(),
        probs,
        log_prob_row: Some(log_probs),
    })
}

/// Grounds objects against the instruction: one cross-attention block over
/// object features, then a linear head and softmax.
pub fn ground_objects(
    g: &mut Graph,
    params: &Params,
    object_ids: &[u32],
    object_features: TensorRef,
    instruction: &InstructionEncoding,
    cfg: &PolicyCfg,
) -> Result<ObjectScores> {
    if object_ids.is_empty() {
        return Err(Error::Invalid("object grounding needs at least one object".into()));
    }
    if g.value(object_features).rows() != object_ids.len() {
        return Err(Error::Dim("object feature rows must match object ids".into()));
    }
    let attn = cfg.attn()?;
    let x = cross_attention(g, params, "pol.obj.xattn", object_features, instruction.l, attn)?;
    let w = g.param(params, "pol.obj.w")?;
    let b = g.param(params, "pol.obj.b")?;
    let logits_col = g.matmul(x, w)?;
    let logits_col = g.add_row(logits_col, b)?;
    let logits_row = g.transpose(logits_col);
    let log_probs = g.log_softmax_rows(logits_row)?;
    let probs: Vec<f64> = g.value(log_probs).row(0).iter().map(|lp| lp.exp()).collect();
    Ok(ObjectScores {
        object_ids: object_ids.to_vec(),
        logits: g.value(logits_row).row(0).to_vec(),
        probs,
        log_prob_row: Some(log_probs),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::grad_check;
    use crate::rng::seeded;
    use crate::vocab;

    fn cfg() -> PolicyCfg {
        PolicyCfg {
            dim: 16,
            heads: 2,
            enc_layers: 1,
            cand_layers: 1,
        }
    }

    fn setup(seed: u64) -> Params {
        let mut params = Params::new();
        init_policy_params(&mut params, &mut seeded(seed), vocab::size(), &cfg(), None);
        params
    }

    #[test]
    fn action_target_serde_uses_null_for_stop() {
        let json = serde_json::to_string(&vec![ActionTarget::Stop, ActionTarget::Node(4)]).unwrap();
        assert_eq!(json, "[null,4]");
        let back: Vec<ActionTarget> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, vec![ActionTarget::Stop, ActionTarget::Node(4)]);
    }

    #[test]
    fn from_probs_validates() {
        assert!(ActionScores::from_probs(vec![ActionTarget::Stop], vec![0.4]).is_err());
        let s =
            ActionScores::from_probs(vec![ActionTarget::Stop, ActionTarget::Node(1)], vec![0.25, 0.75])
                .unwrap();
        assert_eq!(s.argmax().unwrap(), ActionTarget::Node(1));
        assert_eq!(s.stop_prob(), 0.25);
        assert_eq!(s.prob_of(ActionTarget::Node(9)), 0.0);
    }

    #[test]
    fn single_token_instruction_shapes() {
        let params = setup(1);
        let mut g = Graph::new();
        let enc = encode_instruction(&mut g, &params, &[vocab::token_id("kitchen").unwrap()], &cfg(), None)
            .unwrap();
        assert_eq!(g.value(enc.l).rows(), 1);
        assert_eq!(g.value(enc.l).cols(), 16);
        assert_eq!(g.value(enc.l0).rows(), 1);
    }

    #[test]
    fn encoding_is_deterministic() {
        let params = setup(2);
        let tokens = vocab::tokenize("go to the kitchen").unwrap();
        let run = || {
            let mut g = Graph::new();
            let enc = encode_instruction(&mut g, &params, &tokens, &cfg(), None).unwrap();
            g.value(enc.l).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn unknown_token_rejected() {
        let params = setup(3);
        let mut g = Graph::new();
        assert!(encode_instruction(&mut g, &params, &[usize::MAX], &cfg(), None).is_err());
    }

    #[test]
    fn encoder_matches_manual_layer_composition() {
        let params = setup(4);
        let tokens = vocab::tokenize("red chair").unwrap();
        let mut g = Graph::new();
        let enc = encode_instruction(&mut g, &params, &tokens, &cfg(), None).unwrap();

        // manual: embed rows + positions, one transformer layer, then split
        let mut g2 = Graph::new();
        let table = g2.param(&params, "pol.embed").unwrap();
        let ids = [vocab::CLS, tokens[0], tokens[1]];
        let emb = g2.select_rows(table, &ids).unwrap();
        let pos = g2.constant(positional_encoding(3, 16));
        let x = g2.add(emb, pos).unwrap();
        let y = transformer_layer(&mut g2, &params, "pol.enc.0", x, None, cfg().attn().unwrap())
            .unwrap();
        let l_manual = g2.slice_rows(y, 1, 3).unwrap();
        assert!(g.value(enc.l).max_abs_diff(g2.value(l_manual)) < 1e-10);
    }

    #[test]
    fn two_candidates_make_a_distribution() {
        let params = setup(5);
        let mut g = Graph::new();
        let enc = encode_instruction(&mut g, &params, &vocab::tokenize("go to the office").unwrap(), &cfg(), None)
            .unwrap();
        let f0 = g.constant(Tensor2::glorot(1, 16, &mut seeded(50)));
        let f1 = g.constant(Tensor2::glorot(1, 16, &mut seeded(51)));
        let scores = score_actions(
            &mut g,
            &params,
            &[
                Candidate {
                    target: ActionTarget::Stop,
                    feature: f0,
                    match_feats: None,
                    state: NodeState::Current,
                },
                Candidate {
                    target: ActionTarget::Node(7),
                    feature: f1,
                    match_feats: Some(f1),
                    state: NodeState::Navigable,
                },
            ],
            &enc,
            &cfg(),
        )
        .unwrap();
        assert_eq!(scores.probs.len(), 2);
        let sum: f64 = scores.probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert_eq!(scores.prob_of(ActionTarget::Node(99)), 0.0);
    }

    #[test]
    fn candidate_permutation_permutes_outputs() {
        let params = setup(6);
        let mut g = Graph::new();
        let enc = encode_instruction(&mut g, &params, &vocab::tokenize("find the lamp").unwrap(), &cfg(), None)
            .unwrap();
        let feats: Vec<TensorRef> = (0..4)
            .map(|i| g.constant(Tensor2::glorot(1, 16, &mut seeded(60 + i))))
            .collect();
        let mk = |i: usize| Candidate {
            target: if i == 0 {
                ActionTarget::Stop
            } else {
                ActionTarget::Node(i as u32)
            },
            feature: feats[i],
            match_feats: if i == 0 { None } else { Some(feats[i]) },
            state: if i == 0 {
                NodeState::Current
            } else {
                NodeState::Navigable
            },
        };
        let a = score_actions(&mut g, &params, &[mk(0), mk(1), mk(2), mk(3)], &enc, &cfg()).unwrap();
        let b = score_actions(&mut g, &params, &[mk(2), mk(0), mk(3), mk(1)], &enc, &cfg()).unwrap();
        for (i, t) in a.candidates.iter().enumerate() {
            let j = b.index_of(*t).unwrap();
            assert!((a.probs[i] - b.probs[j]).abs() < 1e-9, "candidate order leaked");
        }
    }

    #[test]
    fn uniform_logits_give_uniform_distribution() {
        let params = setup(7);
        let mut g = Graph::new();
        let enc = encode_instruction(&mut g, &params, &vocab::tokenize("go to the attic").unwrap(), &cfg(), None)
            .unwrap();
        // identical features and states -> identical logits for node candidates
        let f = g.constant(Tensor2::glorot(1, 16, &mut seeded(70)));
        let cands: Vec<Candidate> = (0..3)
            .map(|i| Candidate {
                target: ActionTarget::Node(i as u32),
                feature: f,
                match_feats: Some(f),
                state: NodeState::Navigable,
            })
            .chain(std::iter::once(Candidate {
                target: ActionTarget::Stop,
                feature: f,
                match_feats: None,
                state: NodeState::Current,
            }))
            .collect();
        let s = score_actions(&mut g, &params, &cands, &enc, &cfg()).unwrap();
        for w in s.probs[..3].windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn single_object_grounds_with_probability_one() {
        let params = setup(8);
        let mut g = Graph::new();
        let enc = encode_instruction(&mut g, &params, &vocab::tokenize("find the photo").unwrap(), &cfg(), None)
            .unwrap();
        let feats = g.constant(Tensor2::glorot(1, 16, &mut seeded(80)));
        let s = ground_objects(&mut g, &params, &[42], feats, &enc, &cfg()).unwrap();
        assert_eq!(s.probs, vec![1.0]);
        assert_eq!(s.argmax(), Some(42));
        assert!(ground_objects(&mut g, &params, &[], feats, &enc, &cfg()).is_err());
    }

    #[test]
    fn duplicate_object_features_share_probability() {
        let params = setup(9);
        let mut g = Graph::new();
        let enc = encode_instruction(&mut g, &params, &vocab::tokenize("find the vase").unwrap(), &cfg(), None)
            .unwrap();
        let row = Tensor2::glorot(1, 16, &mut seeded(90));
        let feats = g
            .constant(Tensor2::from_rows(&vec![row.row(0).to_vec(); 3]).unwrap());
        let s = ground_objects(&mut g, &params, &[1, 2, 3], feats, &enc, &cfg()).unwrap();
        assert!((s.probs[0] - s.probs[1]).abs() < 1e-12);
        assert!((s.probs[1] - s.probs[2]).abs() < 1e-12);
    }

    #[test]
    fn policy_gradients_pass_finite_differences() {
        // small dims keep the check fast
        let small = PolicyCfg {
            dim: 8,
            heads: 2,
            enc_layers: 1,
            cand_layers: 1,
        };
        let mut params = Params::new();
        init_policy_params(&mut params, &mut seeded(10), 8, &small, None);
        params.insert("feat", Tensor2::glorot(2, 8, &mut seeded(11)));
        let err = grad_check(
            |g, p| {
                let enc = encode_instruction(g, p, &[2, 3, 4], &small, None)?;
                let feats = g.param(p, "feat")?;
                let f0 = g.slice_rows(feats, 0, 1)?;
                let f1 = g.slice_rows(feats, 1, 2)?;
                let scores = score_actions(
                    g,
                    p,
                    &[
                        Candidate {
                            target: ActionTarget::Stop,
                            feature: f0,
                            match_feats: None,
                            state: NodeState::Current,
                        },
                        Candidate {
                            target: ActionTarget::Node(1),
                            feature: f1,
                            match_feats: Some(f1),
                            state: NodeState::Navigable,
                        },
                    ],
                    &enc,
                    &small,
                )?;
                let row = scores.log_prob_row.expect("model scores carry the row");
                let picked = g.gather_cols(row, &[1])?;
                let n = g.neg(picked);
                Ok(g.scale_const(n, 0.01))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "policy grad err {err}");
    }
}
