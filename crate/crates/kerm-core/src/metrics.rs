//! Navigation evaluation: TL, NE, SR, OSR, SPL, RGS, RGSPL.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::episode::{EpisodeSpec, Trajectory};
use crate::sim::world::World;

/// How episode success is decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuccessMode {
    /// Navigation error under the threshold (meters).
    Distance,
    /// The final node's views contain the target object.
    ObjectVisibility,
}

/// Per-episode metric values. Rates are 0/1 per episode and averaged by
/// [`aggregate_report`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub tl: f64,
    pub ne: f64,
    pub sr: f64,
    pub osr: f64,
    pub spl: f64,
    pub rgs: f64,
    pub rgspl: f64,
    /// Whether this episode carries a grounding task at all.
    pub has_grounding: bool,
}

fn success_at(
    world: &World,
    spec: &EpisodeSpec,
    node: u32,
    dist_to_goal: &[f64],
    threshold: f64,
    mode: SuccessMode,
) -> bool {
    match mode {
        SuccessMode::Distance => dist_to_goal[node as usize] < threshold,
        SuccessMode::ObjectVisibility => match spec.target_object {
            Some(obj) => world.object(obj).is_some_and(|o| o.node == node),
            None => dist_to_goal[node as usize] == 0.0,
        },
    }
}

/// Navigation metrics for one trajectory. `threshold` is the success
/// distance in meters (the standard value is 3).
pub fn nav_metrics(
    world: &World,
    spec: &EpisodeSpec,
    trajectory: &Trajectory,
    threshold: f64,
    mode: SuccessMode,
) -> Result<MetricRow> {
    world.node(trajectory.final_node)?;
    for hop in &trajectory.path {
        world.node(*hop)?;
    }
    let dist_to_goal = world.shortest_dists(spec.goal)?;
    let tl = trajectory.travel_length;
    let ne = dist_to_goal[trajectory.final_node as usize];
    if ne.is_infinite() {
        return Err(Error::Invalid("final node cannot reach the goal".into()));
    }
    let success = success_at(world, spec, trajectory.final_node, &dist_to_goal, threshold, mode);
    let oracle = trajectory
        .path
        .iter()
        .any(|&n| success_at(world, spec, n, &dist_to_goal, threshold, mode));
    let ideal = dist_to_goal[spec.start as usize];
    let sr = if success { 1.0 } else { 0.0 };
    let spl = if ideal.max(tl) == 0.0 {
        sr
    } else {
        sr * ideal / ideal.max(tl)
    };

    let (rgs, rgspl, has_grounding) = match spec.target_object {
        None => (0.0, 0.0, false),
        Some(target) => {
            let grounded = success && trajectory.predicted_object == Some(target);
            let rgs = if grounded { 1.0 } else { 0.0 };
            let rgspl = if ideal.max(tl) == 0.0 {
                rgs
            } else {
                rgs * ideal / ideal.max(tl)
            };
            (rgs, rgspl, true)
        }
    };

    Ok(MetricRow {
        tl,
        ne,
        sr,
        osr: if oracle { 1.0 } else { 0.0 },
        spl,
        rgs,
        rgspl,
        has_grounding,
    })
}

/// Mean metrics over a split. Grounding rates average over the episodes
/// that actually carry a target object.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub split: String,
    pub episodes: usize,
    pub tl: f64,
    pub ne: f64,
    pub sr: f64,
    pub osr: f64,
    pub spl: f64,
    pub rgs: f64,
    pub rgspl: f64,
}

pub fn aggregate_report(split: &str, rows: &[MetricRow]) -> Result<Report> {
    if rows.is_empty() {
        return Err(Error::Invalid("cannot aggregate an empty evaluation".into()));
    }
    let n = rows.len() as f64;
    let grounded: Vec<&MetricRow> = rows.iter().filter(|r| r.has_grounding).collect();
    let gn = grounded.len() as f64;
    let report = Report {
        split: split.to_string(),
        episodes: rows.len(),
        tl: rows.iter().map(|r| r.tl).sum::<f64>() / n,
        ne: rows.iter().map(|r| r.ne).sum::<f64>() / n,
        sr: rows.iter().map(|r| r.sr).sum::<f64>() / n,
        osr: rows.iter().map(|r| r.osr).sum::<f64>() / n,
        spl: rows.iter().map(|r| r.spl).sum::<f64>() / n,
        rgs: if grounded.is_empty() {
            0.0
        } else {
            grounded.iter().map(|r| r.rgs).sum::<f64>() / gn
        },
        rgspl: if grounded.is_empty() {
            0.0
        } else {
            grounded.iter().map(|r| r.rgspl).sum::<f64>() / gn
        },
    };
    assert!(
        report.spl <= report.sr + 1e-12 && report.sr <= report.osr + 1e-12,
        "metric ordering violated: SPL {} SR {} OSR {}",
        report.spl,
        report.sr,
        report.osr
    );
    assert!(
        report.rgspl <= report.rgs + 1e-12,
        "metric ordering violated: RGSPL {} RGS {}",
        report.rgspl,
        report.rgs
    );
    Ok(report)
}

pub const REPORT_CSV_HEADER: &str = "split,TL,NE,SR,OSR,SPL,RGS,RGSPL";

/// Fixed-header CSV: distances in meters, rates as percentages, two
/// decimals throughout.
pub fn write_report_csv(mut w: impl Write, reports: &[Report]) -> Result<()> {
    writeln!(w, "{REPORT_CSV_HEADER}")?;
    for r in reports {
        writeln!(
            w,
            "{},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2}",
            r.split,
            r.tl,
            r.ne,
            r.sr * 100.0,
            r.osr * 100.0,
            r.spl * 100.0,
            r.rgs * 100.0,
            r.rgspl * 100.0
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::episode::Termination;
    use crate::sim::gen::{gen_world, GenConfig};
    use crate::sim::world::{View, World, WorldMeta, WorldNode};

    fn trajectory(spec: &EpisodeSpec, path: Vec<u32>, tl: f64, final_node: u32) -> Trajectory {
        Trajectory {
            episode_id: spec.id.clone(),
            path: path.clone(),
            actions: path.iter().skip(1).map(|n| Some(*n)).chain([None]).collect(),
            stop_probs: vec![0.5; path.len()],
            step_nodes: path,
            final_node,
            predicted_object: None,
            termination: Termination::Stopped,
            travel_length: tl,
            alphas: vec![],
        }
    }

    /// Straight-line world with controllable spacing.
    fn line_world(xs: &[f64]) -> World {
        let nodes = xs
            .iter()
            .enumerate()
            .map(|(id, &x)| WorldNode {
                id: id as u32,
                pos: [x, 0.0, 0.0],
                views: (0..36)
                    .map(|v| View {
                        heading: 0.0,
                        elevation: 0.0,
                        regions: vec!["kitchen wall".into(); 5],
                        to_node: if v == 0 && id + 1 < xs.len() {
                            Some(id as u32 + 1)
                        } else if v == 18 && id > 0 {
                            Some(id as u32 - 1)
                        } else {
                            None
                        },
                    })
                    .collect(),
            })
            .collect();
        World {
            meta: WorldMeta { seed: 0 },
            nodes,
            edges: (0..xs.len() as u32 - 1).map(|i| (i, i + 1)).collect(),
            objects: vec![],
        }
    }

    fn spec(start: u32, goal: u32) -> EpisodeSpec {
        EpisodeSpec {
            id: "t".into(),
            start,
            goal,
            instruction: "go to the kitchen".into(),
            target_object: None,
        }
    }

    #[test]
    fn perfect_run_scores_perfectly() {
        let w = line_world(&[0.0, 2.0, 4.0]);
        let s = spec(0, 2);
        let t = trajectory(&s, vec![0, 1, 2], 4.0, 2);
        let m = nav_metrics(&w, &s, &t, 3.0, SuccessMode::Distance).unwrap();
        assert_eq!((m.sr, m.spl, m.ne, m.osr), (1.0, 1.0, 0.0, 1.0));
    }

    #[test]
    fn never_moving_far_from_goal_scores_zero() {
        let w = line_world(&[0.0, 5.0, 10.0]);
        let s = spec(0, 2);
        let t = trajectory(&s, vec![0], 0.0, 0);
        let m = nav_metrics(&w, &s, &t, 3.0, SuccessMode::Distance).unwrap();
        assert_eq!((m.tl, m.sr, m.spl, m.osr), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(m.ne, 10.0);
    }

    #[test]
    fn doubled_path_halves_spl() {
        // goal one hop away (4m), agent detours to 3 then back: TL = 2*ideal
        let w = line_world(&[0.0, 4.0, 8.0]);
        let s = spec(1, 2);
        let t = trajectory(&s, vec![1, 0, 1, 2], 12.0, 2);
        let m = nav_metrics(&w, &s, &t, 3.0, SuccessMode::Distance).unwrap();
        assert_eq!(m.sr, 1.0);
        assert!((m.spl - 4.0 / 12.0).abs() < 1e-12);

        let t2 = trajectory(&s, vec![1, 2], 8.0, 2);
        let m2 = nav_metrics(&w, &s, &t2, 3.0, SuccessMode::Distance).unwrap();
        assert!((m2.spl - 0.5).abs() < 1e-12, "TL = 2*ideal gives SPL 0.5");
    }

    #[test]
    fn three_meter_boundary() {
        let w29 = line_world(&[0.0, 2.9]);
        let s = spec(0, 1);
        let t = trajectory(&s, vec![0], 0.0, 0);
        let m = nav_metrics(&w29, &s, &t, 3.0, SuccessMode::Distance).unwrap();
        assert_eq!(m.sr, 1.0, "NE 2.9 succeeds");

        let w31 = line_world(&[0.0, 3.1]);
        let m = nav_metrics(&w31, &s, &t, 3.0, SuccessMode::Distance).unwrap();
        assert_eq!(m.sr, 0.0, "NE 3.1 fails");
    }

    #[test]
    fn oracle_counts_any_visited_success() {
        let w = line_world(&[0.0, 2.0, 9.0]);
        let s = spec(0, 1);
        // passes through the goal but ends far away
        let t = trajectory(&s, vec![0, 1, 2], 9.0, 2);
        let m = nav_metrics(&w, &s, &t, 3.0, SuccessMode::Distance).unwrap();
        assert_eq!((m.sr, m.osr), (0.0, 1.0));
    }

    #[test]
    fn grounding_needs_success_and_correct_object() {
        let g = gen_world(&GenConfig {
            nodes: 10,
            train_episodes: 4,
            eval_episodes: 1,
            ..GenConfig::default()
        })
        .unwrap();
        let s = g.train.iter().find(|e| e.target_object.is_some()).unwrap();
        let target = s.target_object.unwrap();
        let path = g.world.shortest_path(s.start, s.goal).unwrap();
        let tl: f64 = path.windows(2).map(|ab| g.world.edge_weight(ab[0], ab[1]).unwrap()).sum();
        let mut t = trajectory(s, path, tl, s.goal);
        t.predicted_object = Some(target);
        let m = nav_metrics(&g.world, s, &t, 3.0, SuccessMode::Distance).unwrap();
        assert_eq!(m.rgs, 1.0);
        assert!((m.rgspl - m.spl).abs() < 1e-12);

        t.predicted_object = Some(target + 1);
        let m = nav_metrics(&g.world, s, &t, 3.0, SuccessMode::Distance).unwrap();
        assert_eq!(m.rgs, 0.0);

        // correct object with doubled path halves rgspl
        t.predicted_object = Some(target);
        t.travel_length = tl * 2.0;
        let m = nav_metrics(&g.world, s, &t, 3.0, SuccessMode::Distance).unwrap();
        assert_eq!(m.rgs, 1.0);
        assert!((m.rgspl - 0.5).abs() < 1e-12);
    }

    #[test]
    fn visibility_mode_requires_object_at_final_node() {
        let g = gen_world(&GenConfig {
            nodes: 10,
            train_episodes: 4,
            eval_episodes: 1,
            ..GenConfig::default()
        })
        .unwrap();
        let s = g.train.iter().find(|e| e.target_object.is_some()).unwrap();
        let path = g.world.shortest_path(s.start, s.goal).unwrap();
        let tl: f64 = path.windows(2).map(|ab| g.world.edge_weight(ab[0], ab[1]).unwrap()).sum();
        let t = trajectory(s, path.clone(), tl, s.goal);
        let m = nav_metrics(&g.world, s, &t, 3.0, SuccessMode::ObjectVisibility).unwrap();
        assert_eq!(m.sr, 1.0);

        let t_start = trajectory(s, vec![s.start], 0.0, s.start);
        let m = nav_metrics(&g.world, s, &t_start, 3.0, SuccessMode::ObjectVisibility).unwrap();
        assert_eq!(m.sr, 0.0);
    }

    #[test]
    fn aggregate_averages_and_orders() {
        let w = line_world(&[0.0, 2.0, 4.0]);
        let s = spec(0, 2);
        let good = nav_metrics(&w, &s, &trajectory(&s, vec![0, 1, 2], 4.0, 2), 3.0, SuccessMode::Distance)
            .unwrap();
        let bad = nav_metrics(&w, &s, &trajectory(&s, vec![0], 0.0, 0), 3.0, SuccessMode::Distance)
            .unwrap();
        let single = aggregate_report("x", &[good]).unwrap();
        assert_eq!(single.sr, good.sr);
        let both = aggregate_report("x", &[good, bad]).unwrap();
        assert!((both.sr - 0.5).abs() < 1e-12);
        assert!(both.spl <= both.sr && both.sr <= both.osr);
        assert!(aggregate_report("x", &[]).is_err());
    }

    #[test]
    fn csv_header_is_bit_exact() {
        let w = line_world(&[0.0, 2.0]);
        let s = spec(0, 1);
        let row = nav_metrics(&w, &s, &trajectory(&s, vec![0, 1], 2.0, 1), 3.0, SuccessMode::Distance)
            .unwrap();
        let rep = aggregate_report("val", &[row]).unwrap();
        let mut buf = Vec::new();
        write_report_csv(&mut buf, &[rep]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "split,TL,NE,SR,OSR,SPL,RGS,RGSPL");
        assert_eq!(lines.next().unwrap(), "val,2.00,0.00,100.00,100.00,100.00,0.00,0.00");
    }
}
