//! Training: masking, the four objectives (MLM, MRC, SAP, OG), the
//! pretraining and fine-tuning drivers, checkpoints, and evaluation.
//!
//! Fine-tuning rolls the current policy out and queries the demonstrator
//! for per-step supervision; pretraining follows demonstration paths and
//! adds the masked-prediction tasks. One optimizer step per iteration;
//! rollouts within an iteration run on worker threads, gradients are summed
//! in slot order, so runs are bit-reproducible for a fixed seed.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{rollout, Agent, RolloutMode};
use crate::error::{Error, Result};
use crate::graph::{Graph, Params, TensorRef};
use crate::metrics::{aggregate_report, nav_metrics, MetricRow, Report, SuccessMode};
use crate::policy::encode_instruction;
use crate::rng::seeded_stream;
use crate::sim::episode::{EpisodeSpec, Trajectory};
use crate::sim::world::{World, VIEWS_PER_NODE};
use crate::tensor::Tensor2;
use crate::vocab;

const CKPT_MAGIC: &[u8; 8] = b"KERMCKP1";
const CKPT_VERSION: u32 = 1;

// rng stream purposes
const STREAM_PICK: u64 = 1 << 56;
const STREAM_MASK: u64 = 2 << 56;
const STREAM_ROLLOUT: u64 = 3 << 56;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// Plain gradient descent is the default; adaptive moments are the
/// documented opt-in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// First/second moment accumulators for the adaptive optimizer.
#[derive(Debug, Default)]
struct AdamState {
    m: BTreeMap<String, Tensor2>,
    v: BTreeMap<String, Tensor2>,
    t: usize,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    fn step(
        &mut self,
        params: &mut Params,
        grads: &BTreeMap<String, Tensor2>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let t = self.t as f64;
        let bias1 = 1.0 - ADAM_BETA1.powf(t);
        let bias2 = 1.0 - ADAM_BETA2.powf(t);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor2::zeros(g.rows(), g.cols()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor2::zeros(g.rows(), g.cols()));
            let pd = p.data_mut();
            for ((pv, gv), (mv, vv)) in pd
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                let mhat = *mv / bias1;
                let vhat = *vv / bias2;
                *pv -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub iterations: usize,
    pub lr: f64,
    pub mask_prob: f64,
    pub seed: u64,
    pub max_steps: usize,
    /// Episodes rolled out (in parallel) per optimizer step.
    pub batch: usize,
    /// Probability of executing the demonstrator's action instead of the
    /// policy's during fine-tune rollouts.
    pub teacher_forcing: f64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Finetune,
            iterations: 1000,
            lr: 1e-2,
            mask_prob: 0.15,
            seed: 3,
            max_steps: 15,
            batch: 4,
            teacher_forcing: 0.5,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config("mask_prob must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.teacher_forcing) {
            return Err(Error::Config("teacher_forcing must be in [0, 1]".into()));
        }
        if self.batch == 0 || self.max_steps == 0 {
            return Err(Error::Config("batch and max_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Independently replaces each maskable token by MASK with probability `p`.
/// Returns the masked sequence plus (position, original id) pairs.
pub fn mask_instruction(
    tokens: &[usize],
    p: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut masked = tokens.to_vec();
    let mut positions = Vec::new();
    for (i, t) in tokens.iter().enumerate() {
        if *t == vocab::CLS || *t == vocab::MASK {
            continue;
        }
        if p > 0.0 && rng.random_bool(p) {
            masked[i] = vocab::MASK;
            positions.push((i, *t));
        }
    }
    (masked, positions)
}

/// Picks views to mask for region classification; each masked view carries
/// its semantic class label.
pub fn mask_views(
    world: &World,
    node: u32,
    p: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for view in 0..VIEWS_PER_NODE {
        if p > 0.0 && rng.random_bool(p) {
            out.push((view, world.view_class(node, view)?));
        }
    }
    Ok(out)
}

/// Behavior-cloning loss: sum over steps of -log p(expert action).
pub fn loss_sap(g: &mut Graph, terms: &[(TensorRef, usize)]) -> Result<TensorRef> {
    if terms.is_empty() {
        return Err(Error::Invalid("SAP loss needs at least one step".into()));
    }
    let mut acc: Option<TensorRef> = None;
    for (row, idx) in terms {
        let picked = g.gather_cols(*row, &[*idx])?;
        acc = Some(match acc {
            None => picked,
            Some(a) => g.add(a, picked)?,
        });
    }
    Ok(g.neg(acc.expect("non-empty terms")))
}

/// Object-grounding loss: -log p(target object).
pub fn loss_og(g: &mut Graph, log_prob_row: TensorRef, target_idx: usize) -> Result<TensorRef> {
    let picked = g.gather_cols(log_prob_row, &[target_idx])?;
    Ok(g.neg(picked))
}

/// Masked-language loss: mean negative log-likelihood of the original words
/// under the predicted distributions (one row per masked position).
pub fn loss_mlm(g: &mut Graph, probs: TensorRef, labels: &[usize]) -> Result<TensorRef> {
    if labels.is_empty() || g.value(probs).rows() != labels.len() {
        return Err(Error::Invalid("one distribution per masked position required".into()));
    }
    let picked = g.gather_cols(probs, labels)?;
    let lp = g.ln_clamped(picked, 1e-12);
    let mean = g.mean_all(lp);
    Ok(g.neg(mean))
}

/// Masked-region loss: mean KL(target || predicted) over masked views.
/// Predicted entries are clamped at 1e-12 where the target has support.
pub fn loss_mrc(g: &mut Graph, predicted: TensorRef, targets: &Tensor2) -> Result<TensorRef> {
    let p = g.value(predicted);
    if p.rows() != targets.rows() || p.cols() != targets.cols() {
        return Err(Error::Dim("predicted/target shape mismatch".into()));
    }
    if targets.rows() == 0 {
        return Err(Error::Invalid("KL loss needs at least one row".into()));
    }
    for r in 0..targets.rows() {
        let s: f64 = targets.row(r).iter().sum();
        if (s - 1.0).abs() > 1e-6 || targets.row(r).iter().any(|v| *v < 0.0) {
            return Err(Error::Invalid("targets must be probability distributions".into()));
        }
    }
    let n = targets.rows() as f64;
    // sum_i t_i ln t_i (constant in the graph)
    let entropy_term: f64 = targets
        .data()
        .iter()
        .map(|&t| if t > 0.0 { t * t.ln() } else { 0.0 })
        .sum::<f64>()
        / n;
    let lp = g.ln_clamped(predicted, 1e-12);
    let t_const = g.constant(targets.clone());
    let cross = g.mul_elem(t_const, lp)?;
    let cross_sum = g.sum_all(cross);
    let cross_mean = g.scale_const(cross_sum, -1.0 / n);
    let ent = g.constant(Tensor2::filled(1, 1, entropy_term));
    g.add(cross_mean, ent)
}

/// MLM forward: encode the masked instruction, average each masked
/// position's state with the demonstration-path mean feature, and predict
/// the original word.
fn mlm_forward(
    g: &mut Graph,
    params: &Params,
    agent: &Agent,
    spec: &EpisodeSpec,
    rng: &mut ChaCha8Rng,
    mask_prob: f64,
) -> Result<Option<TensorRef>> {
    let tokens = vocab::tokenize(&spec.instruction)?;
    let (masked, positions) = mask_instruction(&tokens, mask_prob, rng);
    if positions.is_empty() {
        return Ok(None);
    }
    let enc = encode_instruction(g, params, &masked, &agent.cfg.policy(), Some(&agent.provider))?;
    // demonstration path mean feature
    let path = agent.world.shortest_path(spec.start, spec.goal)?;
    let mut mean = Tensor2::zeros(1, agent.cfg.dim);
    for node in &path {
        let f = agent.raw_node_feature(*node)?;
        for c in 0..agent.cfg.dim {
            mean.set(0, c, mean.at(0, c) + f.at(0, c) / path.len() as f64);
        }
    }
    let path_mean = g.constant(mean);

    let mut rows = Vec::with_capacity(positions.len());
    for (pos, _label) in &positions {
        let state = g.slice_rows(enc.l, *pos, pos + 1)?;
        let summed = g.add(state, path_mean)?;
        rows.push(g.scale_const(summed, 0.5));
    }
    let stacked = g.concat_rows(&rows)?;
    let w1 = g.param(params, "head.mlm.w1")?;
    let b1 = g.param(params, "head.mlm.b1")?;
    let w2 = g.param(params, "head.mlm.w2")?;
    let b2 = g.param(params, "head.mlm.b2")?;
    let h = g.matmul(stacked, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.gelu(h);
    let logits = g.matmul(h, w2)?;
    let logits = g.add_row(logits, b2)?;
    let probs = g.softmax_rows(logits)?;
    let labels: Vec<usize> = positions.iter().map(|(_, l)| *l).collect();
    Ok(Some(loss_mlm(g, probs, &labels)?))
}

/// MRC forward: zero masked view features (positions preserved), encode the
/// panorama with the candidate stack against the instruction, and predict
/// each masked view's semantic class; KL against the one-hot target.
fn mrc_forward(
    g: &mut Graph,
    params: &Params,
    agent: &Agent,
    spec: &EpisodeSpec,
    rng: &mut ChaCha8Rng,
    mask_prob: f64,
) -> Result<Option<TensorRef>> {
    let node = spec.goal;
    let masked = mask_views(agent.world, node, mask_prob, rng)?;
    if masked.is_empty() {
        return Ok(None);
    }
    let tokens = vocab::tokenize(&spec.instruction)?;
    let enc = encode_instruction(g, params, &tokens, &agent.cfg.policy(), Some(&agent.provider))?;

    let mask_set: std::collections::BTreeSet<usize> = masked.iter().map(|(v, _)| *v).collect();
    let mut rows = Vec::with_capacity(VIEWS_PER_NODE);
    for view in 0..VIEWS_PER_NODE {
        if mask_set.contains(&view) {
            rows.push(vec![0.0; agent.cfg.dim]);
        } else {
            rows.push(agent.raw_view_feature(node, view)?.row(0).to_vec());
        }
    }
    let feats = g.constant(Tensor2::from_rows(&rows)?);
    let pos = g.constant(crate::policy::positional_encoding(VIEWS_PER_NODE, agent.cfg.dim));
    let mut x = g.add(feats, pos)?;
    let attn = agent.cfg.policy().attn()?;
    for l in 0..agent.cfg.cand_layers {
        x = crate::attention::transformer_layer(
            g,
            params,
            &format!("pol.cand.{l}"),
            x,
            Some(enc.l),
            attn,
        )?;
    }
    let mut masked_states = Vec::with_capacity(masked.len());
    for (view, _) in &masked {
        masked_states.push(g.slice_rows(x, *view, view + 1)?);
    }
    let stacked = g.concat_rows(&masked_states)?;
    let w1 = g.param(params, "head.mrc.w1")?;
    let b1 = g.param(params, "head.mrc.b1")?;
    let w2 = g.param(params, "head.mrc.w2")?;
    let b2 = g.param(params, "head.mrc.b2")?;
    let h = g.matmul(stacked, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.gelu(h);
    let logits = g.matmul(h, w2)?;
    let logits = g.add_row(logits, b2)?;
    let probs = g.softmax_rows(logits)?;

    let classes = vocab::labels().len();
    let mut targets = Tensor2::zeros(masked.len(), classes);
    for (r, (_, class)) in masked.iter().enumerate() {
        targets.set(r, *class, 1.0);
    }
    Ok(Some(loss_mrc(g, probs, &targets)?))
}

/// Per-task loss values of one episode (already plain numbers).
#[derive(Debug, Clone, Copy, Default)]
struct TaskLosses {
    mlm: Option<f64>,
    mrc: Option<f64>,
    sap: Option<f64>,
    og: Option<f64>,
}

impl TaskLosses {
    fn total(&self) -> f64 {
        self.mlm.unwrap_or(0.0) + self.mrc.unwrap_or(0.0) + self.sap.unwrap_or(0.0)
            + self.og.unwrap_or(0.0)
    }
}

/// One episode's contribution: gradients (already scaled by 1/batch) plus
/// the task losses.
fn episode_pass(
    params: &Params,
    agent: &Agent,
    spec: &EpisodeSpec,
    cfg: &TrainConfig,
    iter: usize,
    slot: usize,
    batch_scale: f64,
) -> Result<(BTreeMap<String, Tensor2>, TaskLosses)> {
    let mut g = Graph::new();
    let mut losses = TaskLosses::default();
    let mut parts: Vec<TensorRef> = Vec::new();
    let stream = (iter * cfg.batch + slot) as u64;

    let mode = match cfg.phase {
        Phase::Pretrain => RolloutMode::Teacher,
        Phase::Finetune => RolloutMode::Finetune {
            teacher_forcing: cfg.teacher_forcing,
        },
    };
    let r = rollout(
        &mut g,
        params,
        agent,
        spec,
        mode,
        cfg.max_steps,
        true,
        (cfg.seed, STREAM_ROLLOUT | stream),
    )?;
    if !r.sap_terms.is_empty() {
        let sap = loss_sap(&mut g, &r.sap_terms)?;
        losses.sap = Some(g.value(sap).scalar()?);
        // optimize the per-step mean so episode length does not set the
        // gradient scale; the logged value stays the summed loss
        let normed = g.scale_const(sap, 1.0 / r.sap_terms.len() as f64);
        parts.push(normed);
    }
    if let Some((row, idx)) = r.og_term {
        let og = loss_og(&mut g, row, idx)?;
        losses.og = Some(g.value(og).scalar()?);
        parts.push(og);
    }
    if cfg.phase == Phase::Pretrain {
        let mut mask_rng = seeded_stream(cfg.seed, STREAM_MASK | stream);
        if let Some(mlm) = mlm_forward(&mut g, params, agent, spec, &mut mask_rng, cfg.mask_prob)? {
            losses.mlm = Some(g.value(mlm).scalar()?);
            parts.push(mlm);
        }
        if let Some(mrc) = mrc_forward(&mut g, params, agent, spec, &mut mask_rng, cfg.mask_prob)? {
            losses.mrc = Some(g.value(mrc).scalar()?);
            parts.push(mrc);
        }
    }
    if parts.is_empty() {
        return Ok((BTreeMap::new(), losses));
    }
    let mut total = parts[0];
    for p in &parts[1..] {
        total = g.add(total, *p)?;
    }
    if !g.value(total).scalar()?.is_finite() {
        return Err(Error::Diverged(format!(
            "non-finite loss in episode {} at iteration {iter}",
            spec.id
        )));
    }
    let scaled = g.scale_const(total, batch_scale);
    g.backward(scaled)?;
    Ok((g.take_grads(), losses))
}

/// Training-set view: worlds with their episode lists share one agent each.
pub struct TrainSet<'a> {
    pub agents: &'a [Agent<'a>],
    pub episodes: &'a [Vec<EpisodeSpec>],
}

impl<'a> TrainSet<'a> {
    fn flat(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (w, eps) in self.episodes.iter().enumerate() {
            for e in 0..eps.len() {
                out.push((w, e));
            }
        }
        out
    }
}

pub const TRAIN_LOG_HEADER: &str = "iter,task,loss";

/// Runs the configured phase: picks a batch of episodes per iteration,
/// accumulates their gradients on worker threads, applies one SGD step, and
/// logs per-task means as CSV rows.
pub fn train(
    set: &TrainSet,
    params: &mut Params,
    cfg: &TrainConfig,
    log: &mut impl Write,
) -> Result<()> {
    cfg.validate()?;
    if set.agents.len() != set.episodes.len() {
        return Err(Error::Config("one episode list per world required".into()));
    }
    let flat = set.flat();
    if flat.is_empty() {
        return Err(Error::Config("no training episodes".into()));
    }
    writeln!(log, "{TRAIN_LOG_HEADER}")?;
    let mut adam = AdamState::default();

    for iter in 0..cfg.iterations {
        let mut pick = seeded_stream(cfg.seed, STREAM_PICK | iter as u64);
        let batch: Vec<(usize, usize)> = (0..cfg.batch)
            .map(|_| flat[pick.random_range(0..flat.len())])
            .collect();
        let batch_scale = 1.0 / cfg.batch as f64;

        let mut results: Vec<Option<Result<(BTreeMap<String, Tensor2>, TaskLosses)>>> =
            (0..batch.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (slot, (w, e)) in batch.iter().enumerate() {
                let agent = &set.agents[*w];
                let spec = &set.episodes[*w][*e];
                let params_ref = &*params;
                handles.push((
                    slot,
                    scope.spawn(move || {
                        episode_pass(params_ref, agent, spec, cfg, iter, slot, batch_scale)
                    }),
                ));
            }
            for (slot, h) in handles {
                results[slot] = Some(h.join().expect("rollout thread panicked"));
            }
        });

        let mut grads: BTreeMap<String, Tensor2> = BTreeMap::new();
        let mut agg = Vec::new();
        for r in results.into_iter() {
            let (g, losses) = r.expect("slot filled")?;
            for (name, grad) in g {
                match grads.get_mut(&name) {
                    Some(acc) => *acc = acc.add(&grad)?,
                    None => {
                        grads.insert(name, grad);
                    }
                }
            }
            agg.push(losses);
        }

        let mean = |f: fn(&TaskLosses) -> Option<f64>| -> Option<f64> {
            let vals: Vec<f64> = agg.iter().filter_map(f).collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        let total_mean = agg.iter().map(TaskLosses::total).sum::<f64>() / agg.len() as f64;
        if !total_mean.is_finite() {
            return Err(Error::Diverged(format!("iteration {iter}: loss is not finite")));
        }
        if cfg.phase == Phase::Pretrain {
            if let Some(v) = mean(|l| l.mlm) {
                writeln!(log, "{iter},mlm,{v:.6}")?;
            }
            if let Some(v) = mean(|l| l.mrc) {
                writeln!(log, "{iter},mrc,{v:.6}")?;
            }
        }
        if let Some(v) = mean(|l| l.sap) {
            writeln!(log, "{iter},sap,{v:.6}")?;
        }
        if let Some(v) = mean(|l| l.og) {
            writeln!(log, "{iter},og,{v:.6}")?;
        }
        writeln!(log, "{iter},total,{total_mean:.6}")?;

        match cfg.optimizer {
            Optimizer::Sgd => params.sgd_step(&grads, cfg.lr)?,
            Optimizer::Adam => adam.step(params, &grads, cfg.lr)?,
        }
    }
    Ok(())
}

/// Evaluation setup shared by the CLI and the acceptance suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold: f64,
    pub success_mode: SuccessMode,
    pub max_steps: usize,
    pub termination_policy: bool,
    pub split: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 3.0,
            success_mode: SuccessMode::Distance,
            max_steps: 15,
            termination_policy: true,
            split: "val".to_string(),
        }
    }
}

pub struct Evaluation {
    pub trajectories: Vec<Trajectory>,
    pub rows: Vec<MetricRow>,
    /// Report under the configured termination policy plus the opposite
    /// convention for comparison.
    pub report: Report,
    pub report_other_tp: Report,
}

/// Greedy rollout of every episode; metrics under both final-node
/// conventions (termination policy on and off).
pub fn evaluate(set: &TrainSet, params: &Params, cfg: &EvalConfig) -> Result<Evaluation> {
    let mut trajectories = Vec::new();
    let mut rows = Vec::new();
    let mut rows_other = Vec::new();
    for (w, eps) in set.episodes.iter().enumerate() {
        let agent = &set.agents[w];
        for spec in eps {
            let mut g = Graph::new();
            let r = rollout(
                &mut g,
                params,
                agent,
                spec,
                RolloutMode::Eval,
                cfg.max_steps,
                cfg.termination_policy,
                (0, 0),
            )?;
            let mut t = r.trajectory;
            rows.push(nav_metrics(agent.world, spec, &t, cfg.threshold, cfg.success_mode)?);

            // the opposite termination convention on the same rollout
            let other_final = if t.termination == crate::sim::episode::Termination::ForcedMaxSteps {
                if cfg.termination_policy {
                    *t.path.last().expect("path non-empty")
                } else {
                    let mut best = 0usize;
                    for (i, p) in t.stop_probs.iter().enumerate() {
                        if *p > t.stop_probs[best] {
                            best = i;
                        }
                    }
                    t.step_nodes[best]
                }
            } else {
                t.final_node
            };
            let mut other = t.clone();
            other.final_node = other_final;
            // grounding at the alternative node
            if other_final != t.final_node && spec.target_object.is_some() {
                let mut g2 = Graph::new();
                let tokens = vocab::tokenize(&spec.instruction)?;
                let enc = encode_instruction(&mut g2, params, &tokens, &agent.cfg.policy(), Some(&agent.provider))?;
                other.predicted_object = agent
                    .ground_at(&mut g2, params, other_final, &enc)?
                    .and_then(|s| s.argmax());
            }
            rows_other.push(nav_metrics(
                agent.world,
                spec,
                &other,
                cfg.threshold,
                cfg.success_mode,
            )?);
            t.episode_id = spec.id.clone();
            trajectories.push(t);
        }
    }
    let (on_label, off_label) = (cfg.split.clone(), format!("{}-notp", cfg.split));
    let (report, report_other_tp) = if cfg.termination_policy {
        (
            aggregate_report(&on_label, &rows)?,
            aggregate_report(&off_label, &rows_other)?,
        )
    } else {
        (
            aggregate_report(&format!("{}-tp", cfg.split), &rows_other)?,
            aggregate_report(&on_label, &rows)?,
        )
    };
    // keep the configured convention first
    let (report, report_other_tp) = if cfg.termination_policy {
        (report, report_other_tp)
    } else {
        (report_other_tp, report)
    };
    Ok(Evaluation {
        trajectories,
        rows,
        report,
        report_other_tp,
    })
}

/// Binary checkpoint: magic, version, then an EOF-terminated named-tensor
/// table (u32 name length, name, u32 rows, u32 cols, row-major f64 values).
pub fn save_checkpoint(mut w: impl Write, params: &Params) -> Result<()> {
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rows() as u32).to_le_bytes())?;
        w.write_all(&(t.cols() as u32).to_le_bytes())?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(mut r: impl Read) -> Result<Params> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let mut vb = [0u8; 4];
    r.read_exact(&mut vb)?;
    if u32::from_le_bytes(vb) != CKPT_VERSION {
        return Err(Error::Format("unsupported checkpoint version".into()));
    }
    let mut params = Params::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("checkpoint name is not UTF-8".into()))?;
        let mut dims = [0u8; 8];
        r.read_exact(&mut dims)?;
        let rows = u32::from_le_bytes(dims[0..4].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(dims[4..8].try_into().unwrap()) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut vbuf = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut vbuf)?;
            data.push(f64::from_le_bytes(vbuf));
        }
        params.insert(&name, Tensor2::new(rows, cols, data)?);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{init_model_params, FactsMode, ModelCfg};
    use crate::kb::KnowledgeBase;
    use crate::retrieval::{EmbeddingProviderSpec, FactIndex};
    use crate::rng::seeded;
    use crate::sim::gen::{gen_world, GenConfig};

    #[test]
    fn mask_probability_edges() {
        let tokens: Vec<usize> = vec![2, 3, 4, 5, 6];
        let mut rng = seeded(1);
        let (m0, p0) = mask_instruction(&tokens, 0.0, &mut rng);
        assert_eq!(m0, tokens);
        assert!(p0.is_empty());
        let (m1, p1) = mask_instruction(&tokens, 1.0, &mut rng);
        assert!(m1.iter().all(|t| *t == vocab::MASK));
        assert_eq!(p1.len(), 5);
        for (pos, label) in p1 {
            assert_eq!(label, tokens[pos]);
        }
    }

    #[test]
    fn mask_fraction_is_statistically_right() {
        let tokens: Vec<usize> = vec![2; 100_000];
        let mut rng = seeded(7);
        let (_, positions) = mask_instruction(&tokens, 0.15, &mut rng);
        let fraction = positions.len() as f64 / tokens.len() as f64;
        assert!((fraction - 0.15).abs() < 0.01, "masked fraction {fraction}");
    }

    #[test]
    fn sap_loss_analytic_values() {
        let mut g = Graph::new();
        // p = 1 at the supervised index -> loss 0
        let row = g.constant(Tensor2::from_rows(&[vec![0.0, -700.0]]).unwrap());
        let loss = loss_sap(&mut g, &[(row, 0)]).unwrap();
        assert!(g.value(loss).scalar().unwrap().abs() < 1e-12);
        // uniform over 4 -> ln 4
        let lp = (0.25f64).ln();
        let row = g.constant(Tensor2::from_rows(&[vec![lp; 4]]).unwrap());
        let loss = loss_sap(&mut g, &[(row, 2)]).unwrap();
        assert!((g.value(loss).scalar().unwrap() - 4f64.ln()).abs() < 1e-12);
        // three steps sum
        let rows: Vec<(TensorRef, usize)> = [0.5f64, 0.25, 0.125]
            .iter()
            .map(|p| {
                let r = g
                    .constant(Tensor2::from_rows(&[vec![p.ln(), (1.0 - p).ln()]]).unwrap());
                (r, 0)
            })
            .collect();
        let loss = loss_sap(&mut g, &rows).unwrap();
        let expect = -(0.5f64.ln() + 0.25f64.ln() + 0.125f64.ln());
        assert!((g.value(loss).scalar().unwrap() - expect).abs() < 1e-12);
        assert!(loss_sap(&mut g, &[]).is_err());
    }

    #[test]
    fn og_loss_analytic_values() {
        let mut g = Graph::new();
        let row = g.constant(Tensor2::from_rows(&[vec![(0.2f64).ln(); 5]]).unwrap());
        let loss = loss_og(&mut g, row, 3).unwrap();
        assert!((g.value(loss).scalar().unwrap() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mlm_loss_analytic_values() {
        let mut g = Graph::new();
        let v = 7usize;
        let probs = g.constant(Tensor2::from_rows(&vec![vec![1.0 / v as f64; v]; 3]).unwrap());
        let loss = loss_mlm(&mut g, probs, &[0, 3, 6]).unwrap();
        assert!((g.value(loss).scalar().unwrap() - (v as f64).ln()).abs() < 1e-12);
        let onehot = g.constant(Tensor2::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap());
        let loss = loss_mlm(&mut g, onehot, &[1]).unwrap();
        assert!(g.value(loss).scalar().unwrap().abs() < 1e-12);
    }

    #[test]
    fn mrc_loss_analytic_values() {
        let mut g = Graph::new();
        // identical distributions -> 0
        let t = Tensor2::from_rows(&[vec![0.3, 0.2, 0.5]]).unwrap();
        let p = g.constant(t.clone());
        let loss = loss_mrc(&mut g, p, &t).unwrap();
        assert!(g.value(loss).scalar().unwrap().abs() < 1e-12);
        // one-hot target, uniform prediction over 4 -> ln 4
        let t = Tensor2::from_rows(&[vec![0.0, 0.0, 1.0, 0.0]]).unwrap();
        let p = g.constant(Tensor2::from_rows(&[vec![0.25; 4]]).unwrap());
        let loss = loss_mrc(&mut g, p, &t).unwrap();
        assert!((g.value(loss).scalar().unwrap() - 4f64.ln()).abs() < 1e-12);
        // random pair against a direct oracle
        let t = Tensor2::from_rows(&[vec![0.1, 0.6, 0.3], vec![0.5, 0.25, 0.25]]).unwrap();
        let pv = Tensor2::from_rows(&[vec![0.2, 0.5, 0.3], vec![0.4, 0.4, 0.2]]).unwrap();
        let p = g.constant(pv.clone());
        let loss = loss_mrc(&mut g, p, &t).unwrap();
        let mut oracle = 0.0;
        for r in 0..2 {
            for c in 0..3 {
                let tv = t.at(r, c);
                if tv > 0.0 {
                    oracle += tv * (tv / pv.at(r, c)).ln();
                }
            }
        }
        oracle /= 2.0;
        assert!((g.value(loss).scalar().unwrap() - oracle).abs() < 1e-12);
        // zero predicted mass where target has support: clamped, stays finite
        let t = Tensor2::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let p = g.constant(Tensor2::from_rows(&[vec![0.0, 1.0]]).unwrap());
        let loss = loss_mrc(&mut g, p, &t).unwrap();
        assert!(g.value(loss).scalar().unwrap().is_finite());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let cfg = ModelCfg {
            dim: 16,
            heads: 2,
            layers: 1,
            enc_layers: 1,
            cand_layers: 1,
            k: 2,
            ..ModelCfg::default()
        };
        let params = init_model_params(5, vocab::size(), &cfg, None);
        let mut bytes = Vec::new();
        save_checkpoint(&mut bytes, &params).unwrap();
        let re = load_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(params, re);
        let mut bytes2 = Vec::new();
        save_checkpoint(&mut bytes2, &re).unwrap();
        assert_eq!(bytes, bytes2);
    }

    fn tiny_setup() -> (
        crate::sim::world::World,
        Vec<EpisodeSpec>,
        FactIndex,
        EmbeddingProviderSpec,
        ModelCfg,
    ) {
        let g = gen_world(&GenConfig {
            nodes: 8,
            train_episodes: 3,
            eval_episodes: 1,
            min_hops: 1,
            max_hops: 3,
            ..GenConfig::default()
        })
        .unwrap();
        let lex = crate::kb::Lexicon::from_pairs(vocab::default_lexicon_pairs()).unwrap();
        let lines: Vec<std::io::Result<String>> = g
            .records
            .iter()
            .map(|r| Ok(serde_json::to_string(r).unwrap()))
            .collect();
        let parsed = crate::kb::parse_records(lines.into_iter(), &lex).unwrap();
        let kb = KnowledgeBase::build(parsed.facts);
        let provider = EmbeddingProviderSpec::hash_bag(16, 7).unwrap();
        let index = FactIndex::build(&kb, &provider).unwrap();
        let cfg = ModelCfg {
            dim: 16,
            heads: 2,
            layers: 1,
            enc_layers: 1,
            cand_layers: 1,
            k: 2,
            facts_mode: FactsMode::Facts,
            ..ModelCfg::default()
        };
        (g.world, g.train, index, provider, cfg)
    }

    #[test]
    fn finetune_runs_and_logs_deterministically() {
        let (world, train_eps, index, provider, cfg) = tiny_setup();
        let run = || {
            let agent = Agent::new(&world, Some(&index), provider.clone(), cfg).unwrap();
            let agents = vec![agent];
            let episodes = vec![train_eps.clone()];
            let set = TrainSet {
                agents: &agents,
                episodes: &episodes,
            };
            let mut params = init_model_params(9, vocab::size(), &cfg, Some(&provider));
            let mut log = Vec::new();
            let tc = TrainConfig {
                iterations: 3,
                batch: 2,
                max_steps: 6,
                ..TrainConfig::default()
            };
            train(&set, &mut params, &tc, &mut log).unwrap();
            let mut bytes = Vec::new();
            save_checkpoint(&mut bytes, &params).unwrap();
            (String::from_utf8(log).unwrap(), bytes)
        };
        let (log_a, ck_a) = run();
        let (log_b, ck_b) = run();
        assert_eq!(log_a, log_b, "training log must be bit-identical");
        assert_eq!(ck_a, ck_b, "checkpoint must be bit-identical");
        assert!(log_a.starts_with("iter,task,loss\n"));
        assert!(log_a.contains(",sap,"));
        assert!(log_a.contains(",total,"));
    }

    #[test]
    fn zero_iterations_rejected_and_params_unchanged_via_empty_grads() {
        let (world, train_eps, index, provider, cfg) = tiny_setup();
        let agent = Agent::new(&world, Some(&index), provider.clone(), cfg).unwrap();
        let agents = vec![agent];
        let episodes = vec![train_eps];
        let set = TrainSet {
            agents: &agents,
            episodes: &episodes,
        };
        let mut params = init_model_params(9, vocab::size(), &cfg, Some(&provider));
        let before = params.clone();
        let tc = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        let mut sink = Vec::new();
        assert!(train(&set, &mut params, &tc, &mut sink).is_err());
        assert_eq!(params, before);
    }

    #[test]
    fn pretrain_covers_all_four_tasks() {
        let (world, train_eps, index, provider, cfg) = tiny_setup();
        let agent = Agent::new(&world, Some(&index), provider.clone(), cfg).unwrap();
        let agents = vec![agent];
        let episodes = vec![train_eps];
        let set = TrainSet {
            agents: &agents,
            episodes: &episodes,
        };
        let mut params = init_model_params(10, vocab::size(), &cfg, Some(&provider));
        let mut log = Vec::new();
        let tc = TrainConfig {
            phase: Phase::Pretrain,
            iterations: 4,
            batch: 2,
            max_steps: 8,
            mask_prob: 0.5,
            ..TrainConfig::default()
        };
        train(&set, &mut params, &tc, &mut log).unwrap();
        let text = String::from_utf8(log).unwrap();
        for task in ["mlm", "mrc", "sap", "og"] {
            assert!(text.contains(&format!(",{task},")), "missing task {task} in log");
        }
    }

    #[test]
    fn evaluate_produces_both_termination_conventions() {
        let (world, train_eps, index, provider, cfg) = tiny_setup();
        let agent = Agent::new(&world, Some(&index), provider.clone(), cfg).unwrap();
        let agents = vec![agent];
        let episodes = vec![train_eps];
        let set = TrainSet {
            agents: &agents,
            episodes: &episodes,
        };
        let params = init_model_params(11, vocab::size(), &cfg, Some(&provider));
        let ec = EvalConfig {
            max_steps: 4,
            ..EvalConfig::default()
        };
        let ev = evaluate(&set, &params, &ec).unwrap();
        assert_eq!(ev.trajectories.len(), 3);
        assert_eq!(ev.report.split, "val");
        assert_eq!(ev.report_other_tp.split, "val-notp");
        assert!(ev.report.sr <= ev.report.osr + 1e-12);
    }
}
