//! Episode execution: the shortest-distance demonstrator, the greedy
//! rollout loop with the step-limit termination policy, and trajectory
//! bookkeeping.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{ActionScores, ActionTarget};
use crate::sim::map::TopoMap;
use crate::sim::world::World;

/// One navigation task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub id: String,
    pub start: u32,
    pub goal: u32,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_object: Option<u32>,
}

pub fn write_episodes(mut w: impl Write, episodes: &[EpisodeSpec]) -> Result<()> {
    for ep in episodes {
        serde_json::to_writer(&mut w, ep)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_episodes(r: impl BufRead) -> Result<Vec<EpisodeSpec>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("bad episode line: {e}")))?,
        );
    }
    Ok(out)
}

/// Teacher action: among the map's frontier candidates, the node minimizing
/// dist(current, v) + dist(v, goal); STOP at the goal. Ties break toward the
/// lower node id.
pub fn demonstrator_next(
    world: &World,
    map: &TopoMap,
    current: u32,
    goal: u32,
) -> Result<ActionTarget> {
    if current == goal {
        return Ok(ActionTarget::Stop);
    }
    let from_current = world.shortest_dists(current)?;
    let from_goal = world.shortest_dists(goal)?;
    if from_goal[current as usize].is_infinite() {
        return Err(Error::Invalid(format!("goal {goal} unreachable from {current}")));
    }
    let mut best: Option<(f64, u32)> = None;
    for v in map.frontier() {
        let total = from_current[v as usize] + from_goal[v as usize];
        // frontier is ascending, so strict < keeps the lowest id on ties
        if best.is_none() || total < best.unwrap().0 {
            best = Some((total, v));
        }
    }
    let (_, v) = best.ok_or_else(|| Error::IllegalAction("frontier is empty".into()))?;
    Ok(ActionTarget::Node(v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    #[serde(rename = "stopped")]
    Stopped,
    #[serde(rename = "forced-max-steps")]
    ForcedMaxSteps,
}

/// Per-view purification weights recorded during a rollout, one entry per
/// enhanced view: the weight of each retrieved fact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaRecord {
    pub view_id: String,
    pub fact_ids: Vec<String>,
    pub alphas: Vec<f64>,
}

/// Executed episode record.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub episode_id: String,
    /// Full traversed node sequence, starting at the start node.
    pub path: Vec<u32>,
    /// One decision per step; null encodes STOP.
    pub actions: Vec<Option<u32>>,
    /// Stop probability recorded at each step.
    pub stop_probs: Vec<f64>,
    /// Node the agent occupied when each decision was taken.
    pub step_nodes: Vec<u32>,
    /// Declared final position (termination policy applied when forced).
    pub final_node: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_object: Option<u32>,
    pub termination: Termination,
    /// Sum of traversed edge weights, meters.
    pub travel_length: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alphas: Vec<AlphaRecord>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.actions.len()
    }
}

pub fn write_trajectories(mut w: impl Write, trajectories: &[Trajectory]) -> Result<()> {
    for t in trajectories {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trajectories(r: impl BufRead) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("bad trajectory line: {e}")))?,
        );
    }
    Ok(out)
}

/// Greedy rollout. The policy scores each step; STOP terminates. Hitting
/// `max_steps` forces termination: with the termination policy on, the
/// declared final node is the step node with the highest recorded stop
/// probability (earliest on ties); off, it is the last node visited.
pub fn run_episode<P>(
    world: &World,
    spec: &EpisodeSpec,
    mut policy: P,
    max_steps: usize,
    termination_policy: bool,
) -> Result<Trajectory>
where
    P: FnMut(&World, &TopoMap, &EpisodeSpec, usize) -> Result<ActionScores>,
{
    if max_steps == 0 {
        return Err(Error::Config("max_steps must be >= 1".into()));
    }
    let mut map = TopoMap::start(world, spec.start)?;
    let mut path = vec![spec.start];
    let mut actions = Vec::new();
    let mut stop_probs = Vec::new();
    let mut step_nodes = Vec::new();
    let mut travel_length = 0.0;
    let mut stopped = false;

    for step in 0..max_steps {
        let scores = policy(world, &map, spec, step)?;
        let action = scores.argmax()?;
        step_nodes.push(map.current());
        stop_probs.push(scores.stop_prob());
        match action {
            ActionTarget::Stop => {
                actions.push(None);
                stopped = true;
                break;
            }
            ActionTarget::Node(v) => {
                actions.push(Some(v));
                let from = map.current();
                let traversed = map.move_to(world, v)?;
                let mut prev = from;
                for &hop in &traversed {
                    travel_length += world.edge_weight(prev, hop)?;
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

    Ok(Trajectory {
        episode_id: spec.id.clone(),
        path,
        actions,
        stop_probs,
        step_nodes,
        final_node,
        predicted_object: None,
        termination,
        travel_length,
        alphas: Vec::new(),
    })
}

/// "forced/total (pp.pp%)" with the percentage to two decimals.
pub fn format_termination_stats(forced: usize, total: usize) -> String {
    let pct = if total == 0 {
        0.0
    } else {
        forced as f64 * 100.0 / total as f64
    };
    format!("{forced}/{total} ({pct:.2}%)")
}

pub fn termination_stats(trajectories: &[Trajectory]) -> (usize, usize, String) {
    let forced = trajectories
        .iter()
        .filter(|t| t.termination == Termination::ForcedMaxSteps)
        .count();
    (
        forced,
        trajectories.len(),
        format_termination_stats(forced, trajectories.len()),
    )
}

/// The purification-weight dump: one CSV row per retrieved fact per view.
pub fn write_alpha_csv(mut w: impl Write, trajectories: &[Trajectory]) -> Result<usize> {
    writeln!(w, "view_id,fact_rank,fact_id,alpha")?;
    let mut rows = 0;
    for t in trajectories {
        for rec in &t.alphas {
            for (rank, (fact_id, alpha)) in rec.fact_ids.iter().zip(&rec.alphas).enumerate() {
                writeln!(w, "{},{},{},{:.6}", rec.view_id, rank, fact_id, alpha)?;
                rows += 1;
            }
        }
    }
    Ok(rows)
}
