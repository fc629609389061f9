//! Full-model episode execution: assembles view bundles from cached
//! retrievals, maintains map-node features across steps, scores actions,
//! and grounds objects. Both training and evaluation roll out through here.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Params, TensorRef};
use crate::policy::{
    encode_instruction, ground_objects, score_actions, ActionTarget, Candidate,
    InstructionEncoding, ObjectScores, PolicyCfg,
};
use crate::reasoner::{enhance_view, AggQuerySource, ReasonerCfg, ViewBundle};
use crate::retrieval::{crop_regions, default_crops, embed_text, EmbeddingProviderSpec, FactIndex};
use crate::rng::seeded_stream;
use crate::sim::episode::{demonstrator_next, AlphaRecord, EpisodeSpec, Termination, Trajectory};
use crate::sim::map::{NodeState, TopoMap};
use crate::sim::world::{World, VIEWS_PER_NODE};
use crate::tensor::Tensor2;
use crate::vocab;

/// Movement candidate scope: the whole map frontier (map-level actions) or
/// only the current node's neighbors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionLevel {
    Map,
    Local,
}

/// What stands in for the retrieved-fact features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FactsMode {
    /// Knowledge-base retrieval per region.
    Facts,
    /// Object-tag features: "an image of a <label>" for the node's objects.
    ObjectTags,
    /// No knowledge: zero fact features.
    None,
}

/// Model hyperparameters shared by the reasoner, policy head, and agent.
#[derive(Debug, Clone, Copy)]
pub struct ModelCfg {
    pub dim: usize,
    pub heads: usize,
    /// Cross-modal interaction depth (both stacks).
    pub layers: usize,
    pub enc_layers: usize,
    pub cand_layers: usize,
    /// Region crop count: 1, 5, or 9.
    pub crops: usize,
    /// Facts retrieved per region.
    pub k: usize,
    pub aggregate_query_source: AggQuerySource,
    pub alpha_gate: bool,
    pub purify_enabled: bool,
    pub vf_enabled: bool,
    pub hf_enabled: bool,
    pub facts_mode: FactsMode,
    pub action_level: ActionLevel,
}

impl Default for ModelCfg {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            layers: 2,
            enc_layers: 2,
            cand_layers: 1,
            crops: 5,
            k: 5,
            aggregate_query_source: AggQuerySource::Raw,
            alpha_gate: false,
            purify_enabled: true,
            vf_enabled: true,
            hf_enabled: true,
            facts_mode: FactsMode::Facts,
            action_level: ActionLevel::Map,
        }
    }
}

impl ModelCfg {
    pub fn reasoner(&self) -> ReasonerCfg {
        ReasonerCfg {
            dim: self.dim,
            heads: self.heads,
            layers: self.layers,
            alpha_gate: self.alpha_gate,
            aggregate_query_source: self.aggregate_query_source,
            purify_enabled: self.purify_enabled,
            vf_enabled: self.vf_enabled,
            hf_enabled: self.hf_enabled,
        }
    }

    pub fn policy(&self) -> PolicyCfg {
        PolicyCfg {
            dim: self.dim,
            heads: self.heads,
            enc_layers: self.enc_layers,
            cand_layers: self.cand_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        crop_regions(self.crops)?;
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config("heads must divide dim".into()));
        }
        Ok(())
    }
}

/// Registers every learnable tensor: reasoner, policy, and the two
/// pretraining heads. The instruction embedding table starts from the
/// provider's word vectors when one is supplied.
pub fn init_model_params(
    seed: u64,
    vocab_size: usize,
    cfg: &ModelCfg,
    provider: Option<&EmbeddingProviderSpec>,
) -> Params {
    let mut params = Params::new();
    let mut rng = crate::rng::seeded(seed);
    crate::reasoner::init_reasoner_params(&mut params, &mut rng, &cfg.reasoner());
    crate::policy::init_policy_params(&mut params, &mut rng, vocab_size, &cfg.policy(), provider);
    let d = cfg.dim;
    params.init_weight("head.mlm.w1", d, d, &mut rng);
    params.init_zeros("head.mlm.b1", 1, d);
    params.init_weight("head.mlm.w2", d, vocab_size, &mut rng);
    params.init_zeros("head.mlm.b2", 1, vocab_size);
    let classes = vocab::labels().len();
    params.init_weight("head.mrc.w1", d, d, &mut rng);
    params.init_zeros("head.mrc.b1", 1, d);
    params.init_weight("head.mrc.w2", d, classes, &mut rng);
    params.init_zeros("head.mrc.b2", 1, classes);
    params
}

/// Precomputed per-view inputs: crop query embeddings and the fact block.
#[derive(Debug, Clone)]
pub struct ViewData {
    pub region_embeds: Tensor2,
    pub fact_embeds: Tensor2,
    pub fact_ids: Vec<String>,
}

/// Per-world caches keyed by (node, view). Content-addressed, so lazy fill
/// order cannot affect results.
#[derive(Default)]
pub struct WorldCache {
    views: BTreeMap<(u32, usize), ViewData>,
    raw_view_feature: BTreeMap<(u32, usize), Tensor2>,
    node_raw: BTreeMap<u32, Tensor2>,
    object_feature: BTreeMap<u32, Tensor2>,
}

/// Joins the base region texts whose default rectangles overlap each crop.
/// With the default five crops this is the identity mapping.
pub fn crop_texts(view_regions: &[String], crops: usize) -> Result<Vec<String>> {
    if crops == 5 {
        return Ok(view_regions.to_vec());
    }
    let layout = crop_regions(crops)?;
    let base = default_crops();
    Ok(layout
        .iter()
        .map(|crop| {
            let mut parts = Vec::new();
            for (b, text) in base.iter().zip(view_regions) {
                if crop.overlaps(b) {
                    parts.push(text.as_str());
                }
            }
            parts.join(" ")
        })
        .collect())
}

/// Everything fixed for one world during rollouts.
pub struct Agent<'a> {
    pub world: &'a World,
    pub index: Option<&'a FactIndex>,
    pub provider: EmbeddingProviderSpec,
    pub cfg: ModelCfg,
    cache: WorldCache,
}

impl<'a> Agent<'a> {
    pub fn new(
        world: &'a World,
        index: Option<&'a FactIndex>,
        provider: EmbeddingProviderSpec,
        cfg: ModelCfg,
    ) -> Result<Self> {
        cfg.validate()?;
        if provider.dim != cfg.dim {
            return Err(Error::Config(format!(
                "embedding dim {} must equal model dim {}",
                provider.dim, cfg.dim
            )));
        }
        if cfg.facts_mode == FactsMode::Facts && index.is_none() {
            return Err(Error::Config("facts mode needs a fact index".into()));
        }
        let mut agent = Self {
            world,
            index,
            provider,
            cfg,
            cache: WorldCache::default(),
        };
        agent.precompute()?;
        Ok(agent)
    }

    /// Read-only lookup; [`Agent::precompute`] must have covered the view.
    pub fn view_data(&self, node: u32, view: usize) -> Result<&ViewData> {
        self.cache
            .views
            .get(&(node, view))
            .ok_or_else(|| Error::Invalid(format!("view {node}:{view} not precomputed")))
    }

    fn build_view_data(&mut self, node: u32, view: usize) -> Result<()> {
        if !self.cache.views.contains_key(&(node, view)) {
            let regions = &self.world.node(node)?.views[view].regions;
            let texts = crop_texts(regions, self.cfg.crops)?;
            let mut rows = Vec::with_capacity(texts.len());
            for t in &texts {
                rows.push(embed_text(&self.provider, t)?);
            }
            let region_embeds = Tensor2::from_rows(&rows)?;

            let total = texts.len() * self.cfg.k;
            let (fact_embeds, fact_ids) = match self.cfg.facts_mode {
                FactsMode::Facts => {
                    let index = self.index.expect("validated at construction");
                    let k = self.cfg.k.min(index.len());
                    let mut ids = Vec::with_capacity(total);
                    let mut fact_rows = Vec::with_capacity(total);
                    for q in &rows {
                        for (id, _score) in index.top_k(q, k)? {
                            let v = index.vector_by_id(&id).expect("retrieved id exists");
                            fact_rows.push(v.iter().map(|x| *x as f64).collect());
                            ids.push(id);
                        }
                    }
                    (Tensor2::from_rows(&fact_rows)?, ids)
                }
                FactsMode::ObjectTags => {
                    let objects = self.world.objects_at(node);
                    let mut ids = Vec::with_capacity(total);
                    let mut fact_rows = Vec::with_capacity(total);
                    for _ in 0..texts.len() {
                        for j in 0..self.cfg.k {
                            if objects.is_empty() {
                                fact_rows.push(vec![0.0; self.cfg.dim]);
                                ids.push("tag:none".to_string());
                            } else {
                                let o = objects[j % objects.len()];
                                let prompt = format!("an image of a {}", o.label);
                                fact_rows.push(embed_text(&self.provider, &prompt)?);
                                ids.push(format!("tag:{}", o.label));
                            }
                        }
                    }
                    (Tensor2::from_rows(&fact_rows)?, ids)
                }
                FactsMode::None => (
                    Tensor2::zeros(total, self.cfg.dim),
                    vec!["none".to_string(); total],
                ),
            };
            self.cache.views.insert(
                (node, view),
                ViewData {
                    region_embeds,
                    fact_embeds,
                    fact_ids,
                },
            );
        }
        Ok(())
    }

    /// Fills every cache the rollout and pretraining paths touch: region
    /// crop embeddings for all views, fact blocks for navigable views,
    /// per-view and per-node raw features, object features. After this the
    /// agent is read-only and safe to share across threads.
    pub fn precompute(&mut self) -> Result<()> {
        for node in 0..self.world.len() as u32 {
            for view in 0..VIEWS_PER_NODE {
                // raw crop embedding for every view
                let regions = &self.world.node(node)?.views[view].regions;
                let texts = crop_texts(regions, self.cfg.crops)?;
                let mut mean = Tensor2::zeros(1, self.cfg.dim);
                for t in &texts {
                    let e = embed_text(&self.provider, t)?;
                    for (c, v) in e.iter().enumerate() {
                        mean.set(0, c, mean.at(0, c) + v / texts.len() as f64);
                    }
                }
                self.cache.raw_view_feature.insert((node, view), mean);
            }
            let mut node_mean = Tensor2::zeros(1, self.cfg.dim);
            for view in 0..VIEWS_PER_NODE {
                let f = &self.cache.raw_view_feature[&(node, view)];
                for c in 0..self.cfg.dim {
                    node_mean.set(0, c, node_mean.at(0, c) + f.at(0, c) / VIEWS_PER_NODE as f64);
                }
            }
            self.cache.node_raw.insert(node, node_mean);
            // fact blocks only where enhancement happens
            for nb in self.world.neighbors(node) {
                let view = self.world.view_toward(node, nb)?;
                self.build_view_data(node, view)?;
            }
        }
        for obj in &self.world.objects {
            let v = embed_text(&self.provider, &obj.label)?;
            self.cache
                .object_feature
                .insert(obj.id, Tensor2::new(1, self.cfg.dim, v)?);
        }
        Ok(())
    }

    /// Mean of a view's crop embeddings (constant input feature).
    pub fn raw_view_feature(&self, node: u32, view: usize) -> Result<&Tensor2> {
        self.cache
            .raw_view_feature
            .get(&(node, view))
            .ok_or_else(|| Error::Invalid(format!("view {node}:{view} not precomputed")))
    }

    /// Mean over all 36 views' raw features; the bootstrap node feature.
    pub fn raw_node_feature(&self, node: u32) -> Result<&Tensor2> {
        self.cache
            .node_raw
            .get(&node)
            .ok_or_else(|| Error::Invalid(format!("node {node} not precomputed")))
    }

    fn object_feature(&self, object_id: u32) -> Result<&Tensor2> {
        self.cache
            .object_feature
            .get(&object_id)
            .ok_or_else(|| Error::Invalid(format!("object {object_id} not precomputed")))
    }

    /// Grounding scores over the objects at a node.
    pub fn ground_at(
        &self,
        g: &mut Graph,
        params: &Params,
        node: u32,
        enc: &InstructionEncoding,
    ) -> Result<Option<ObjectScores>> {
        let objects = self.world.objects_at(node);
        if objects.is_empty() {
            return Ok(None);
        }
        let ids: Vec<u32> = objects.iter().map(|o| o.id).collect();
        let mut rows = Vec::with_capacity(ids.len());
        for id in &ids {
            rows.push(self.object_feature(*id)?.row(0).to_vec());
        }
        let feats = g.constant(Tensor2::from_rows(&rows)?);
        let scores = ground_objects(g, params, &ids, feats, enc, &self.cfg.policy())?;
        Ok(Some(scores))
    }
}

/// How actions are chosen during a rollout.
#[derive(Debug, Clone, Copy)]
pub enum RolloutMode {
    /// Greedy policy actions, no supervision collected.
    Eval,
    /// Greedy policy actions with per-step demonstrator supervision;
    /// with probability `teacher_forcing` the demonstrator's action is
    /// executed instead.
    Finetune { teacher_forcing: f64 },
    /// Execute the demonstrator (demonstration-path supervision).
    Teacher,
}

/// One rolled-out episode plus the loss hooks training needs.
pub struct Rollout {
    pub trajectory: Trajectory,
    /// Per step: the log-probability row and the supervised action's index.
    pub sap_terms: Vec<(TensorRef, usize)>,
    /// Grounding log-probability row and the target object's index, at the
    /// ground-truth destination (training) or the declared node (eval).
    pub og_term: Option<(TensorRef, usize)>,
}

/// Rolls one episode through the full model inside the caller's graph.
pub fn rollout(
    g: &mut Graph,
    params: &Params,
    agent: &Agent,
    spec: &EpisodeSpec,
    mode: RolloutMode,
    max_steps: usize,
    termination_policy: bool,
    rng_seed: (u64, u64),
) -> Result<Rollout> {
    if max_steps == 0 {
        return Err(Error::Config("max_steps must be >= 1".into()));
    }
    let tokens = vocab::tokenize(&spec.instruction)?;
    let enc = encode_instruction(g, params, &tokens, &agent.cfg.policy(), Some(&agent.provider))?;
    let mut rng: ChaCha8Rng = seeded_stream(rng_seed.0, rng_seed.1);

    let mut map = TopoMap::start(agent.world, spec.start)?;
    let mut feats: BTreeMap<u32, TensorRef> = BTreeMap::new();
    let mut enhanced: std::collections::BTreeSet<u32> = std::collections::BTreeSet::new();
    let mut self_blended: std::collections::BTreeSet<u32> = std::collections::BTreeSet::new();
    let mut region_rows: BTreeMap<u32, TensorRef> = BTreeMap::new();
    let raw_start = agent.raw_node_feature(spec.start)?.clone();
    feats.insert(spec.start, g.constant(raw_start));

    let mut path = vec![spec.start];
    let mut actions = Vec::new();
    let mut stop_probs = Vec::new();
    let mut step_nodes = Vec::new();
    let mut travel_length = 0.0;
    let mut alphas: Vec<AlphaRecord> = Vec::new();
    let mut sap_terms = Vec::new();
    let mut stopped = false;

    for _step in 0..max_steps {
        let current = map.current();
        // history snapshot before this step's enhancements
        let mut h_rows = Vec::new();
        for (node, _state) in map.known_nodes() {
            if let Some(f) = feats.get(&node) {
                h_rows.push(*f);
            } else {
                let raw = agent.raw_node_feature(node)?.clone();
                let r = g.constant(raw);
                feats.insert(node, r);
                h_rows.push(r);
            }
        }
        let history = g.concat_rows(&h_rows)?;

        // enhance the current panorama's navigable views; each node keeps the
        // representation from its first observation
        let mut neighbor_reprs = Vec::new();
        for nb in agent.world.neighbors(current) {
            let already_enhanced = enhanced.contains(&nb);
            if already_enhanced {
                continue;
            }
            let view = agent.world.view_toward(current, nb)?;
            let vd = agent.view_data(current, view)?;
            let regions = g.constant(vd.region_embeds.clone());
            let fact_embeds = g.constant(vd.fact_embeds.clone());
            let fact_ids = vd.fact_ids.clone();
            let bundle = ViewBundle {
                regions,
                facts: fact_embeds,
                history,
                instruction: enc.l,
                instruction_cls: enc.l0,
            };
            let out = enhance_view(g, params, &bundle, &agent.cfg.reasoner())?;
            alphas.push(AlphaRecord {
                view_id: format!("{current}:{view}"),
                fact_ids,
                alphas: out.fact_alpha.clone(),
            });
            // keep the raw view content on a residual path next to the
            // knowledge-enhanced representation
            let raw_view = g.constant(agent.raw_view_feature(current, view)?.clone());
            let blended = g.add(out.repr, raw_view)?;
            let blended = g.scale_const(blended, 0.5);
            feats.insert(nb, blended);
            region_rows.insert(nb, regions);
            enhanced.insert(nb);
            neighbor_reprs.push(blended);
        }
        // on first arrival a node's feature gains its whole-panorama raw
        // component (that is where its objects live); outgoing enhanced views
        // are folded in when available
        if !self_blended.contains(&current) {
            let raw = g.constant(agent.raw_node_feature(current)?.clone());
            let base = if neighbor_reprs.is_empty() {
                feats[&current]
            } else {
                let stacked = g.concat_rows(&neighbor_reprs)?;
                g.mean_rows(stacked)?
            };
            let sum = g.add(base, raw)?;
            feats.insert(current, g.scale_const(sum, 0.5));
            self_blended.insert(current);
            enhanced.insert(current);
        }

        // candidates: STOP plus the frontier (or just the neighbors in
        // local mode)
        let mut candidates = vec![Candidate {
            target: ActionTarget::Stop,
            feature: feats[&current],
            match_feats: None,
            state: NodeState::Current,
        }];
        let reachable: Vec<u32> = match agent.cfg.action_level {
            ActionLevel::Map => map.frontier(),
            ActionLevel::Local => agent.world.neighbors(current),
        };
        for v in reachable {
            candidates.push(Candidate {
                target: ActionTarget::Node(v),
                feature: feats[&v],
                match_feats: region_rows.get(&v).copied().or(Some(feats[&v])),
                state: map.state(v).expect("frontier nodes are known"),
            });
        }
        let scores = score_actions(g, params, &candidates, &enc, &agent.cfg.policy())?;

        // supervision and the executed action
        let teacher = match mode {
            RolloutMode::Eval => None,
            RolloutMode::Finetune { .. } | RolloutMode::Teacher => Some(match agent.cfg.action_level {
                ActionLevel::Map => demonstrator_next(agent.world, &map, current, spec.goal)?,
                ActionLevel::Local => {
                    if current == spec.goal {
                        ActionTarget::Stop
                    } else {
                        let p = agent.world.shortest_path(current, spec.goal)?;
                        ActionTarget::Node(p[1])
                    }
                }
            }),
        };
        if let Some(expert) = teacher {
            let idx = scores.index_of(expert).ok_or_else(|| {
                Error::IllegalAction(format!(
                    "expert action {expert:?} missing from candidate set"
                ))
            })?;
            let row = scores.log_prob_row.expect("model scores carry the row");
            sap_terms.push((row, idx));
        }
        let executed = match mode {
            RolloutMode::Eval => scores.argmax()?,
            RolloutMode::Teacher => teacher.unwrap(),
            RolloutMode::Finetune { teacher_forcing } => {
                if teacher_forcing > 0.0 && rng.random_bool(teacher_forcing.clamp(0.0, 1.0)) {
                    teacher.unwrap()
                } else {
                    scores.argmax()?
                }
            }
        };

        step_nodes.push(current);
        stop_probs.push(scores.stop_prob());
        match executed {
            ActionTarget::Stop => {
                actions.push(None);
                stopped = true;
                break;
            }
            ActionTarget::Node(v) => {
                actions.push(Some(v));
                let from = map.current();
                let traversed = map.move_to(agent.world, v)?;
                let mut prev = from;
                for &hop in &traversed {
                    travel_length += agent.world.edge_weight(prev, hop)?;
                    prev = hop;
                }
                path.extend(traversed);
            }
        }
    }

    let (termination, final_node) = if stopped {
        (Termination::Stopped, map.current())
    } else if termination_policy {
        let mut best = 0usize;
        for (i, p) in stop_probs.iter().enumerate() {
            if *p > stop_probs[best] {
                best = i;
            }
        }
        (Termination::ForcedMaxSteps, step_nodes[best])
    } else {
        (Termination::ForcedMaxSteps, map.current())
    };

    // grounding: training grounds at the true destination, evaluation at the
    // declared final node
    let mut predicted_object = None;
    let mut og_term = None;
    if spec.target_object.is_some() {
        let ground_node = match mode {
            RolloutMode::Eval => final_node,
            _ => spec.goal,
        };
        if let Some(obj_scores) = agent.ground_at(g, params, ground_node, &enc)? {
            if matches!(mode, RolloutMode::Eval) {
                predicted_object = obj_scores.argmax();
            } else {
                let target = spec.target_object.unwrap();
                let idx = obj_scores.index_of(target).ok_or_else(|| {
                    Error::IllegalAction(format!(
                        "target object {target} missing at destination {ground_node}"
                    ))
                })?;
                let row = obj_scores.log_prob_row.expect("model scores carry the row");
                og_term = Some((row, idx));
            }
        }
    }

    Ok(Rollout {
        trajectory: Trajectory {
            episode_id: spec.id.clone(),
            path,
            actions,
            stop_probs,
            step_nodes,
            final_node,
            predicted_object,
            termination,
            travel_length,
            alphas,
        },
        sap_terms,
        og_term,
    })
}
