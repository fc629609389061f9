//! Seeded synthetic world generation.
//!
//! Geometry: uniform points in a square, each node wired to its nearest
//! `branching` neighbors, components then stitched by their closest pairs.
//! Content: every node gets a room; objects with attribute/predicate/landmark
//! context are dropped into view regions; navigable views describe the room
//! they lead to. Region texts, facts, and instructions all draw from the one
//! crate vocabulary, so embedding overlap carries signal.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kb::RawRegionRecord;
use crate::rng;
use crate::sim::episode::EpisodeSpec;
use crate::sim::world::{View, World, WorldMeta, WorldNode, WorldObject, REGIONS_PER_VIEW, VIEWS_PER_NODE};
use crate::vocab;

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub seed: u64,
    pub nodes: usize,
    pub branching: usize,
    pub objects_per_node: usize,
    pub train_episodes: usize,
    pub eval_episodes: usize,
    pub min_hops: usize,
    pub max_hops: usize,
    /// Attach a ground-truth object to every episode.
    pub grounding: bool,
    /// Prefix for generated region/record ids (distinguishes worlds that
    /// share one knowledge base).
    pub tag: String,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 11,
            nodes: 40,
            branching: 3,
            objects_per_node: 2,
            train_episodes: 40,
            eval_episodes: 10,
            min_hops: 2,
            max_hops: 4,
            grounding: true,
            tag: "w0".to_string(),
        }
    }
}

impl GenConfig {
    fn validate(&self) -> Result<()> {
        if self.nodes < 4 {
            return Err(Error::Config("world needs at least 4 nodes".into()));
        }
        if self.branching == 0 || self.objects_per_node == 0 {
            return Err(Error::Config("branching and objects_per_node must be >= 1".into()));
        }
        if self.objects_per_node > vocab::OBJECTS.len() {
            return Err(Error::Config(format!(
                "objects_per_node must be <= {}",
                vocab::OBJECTS.len()
            )));
        }
        if self.min_hops == 0 || self.min_hops > self.max_hops {
            return Err(Error::Config("need 1 <= min_hops <= max_hops".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Placement {
    object_id: u32,
    label: &'static str,
    attr: &'static str,
    pred: &'static str,
    landmark: &'static str,
    node: u32,
    view: usize,
    region: usize,
}

pub struct Generated {
    pub world: World,
    pub train: Vec<EpisodeSpec>,
    pub eval: Vec<EpisodeSpec>,
    pub records: Vec<RawRegionRecord>,
}

pub fn gen_world(cfg: &GenConfig) -> Result<Generated> {
    cfg.validate()?;
    let mut rng = rng::seeded(cfg.seed);
    let n = cfg.nodes;

    // positions in a plane sized so average edges land a few meters apart
    let side = (n as f64).sqrt() * 3.5;
    let positions: Vec<[f64; 3]> = (0..n)
        .map(|_| [rng.random_range(0.0..side), rng.random_range(0.0..side), 0.0])
        .collect();

    let edges = build_edges(&positions, cfg.branching);

    // compound room identity per node: attribute + room, drawn without
    // replacement while combinations last, so route waypoints stay
    // unambiguous
    let mut combos: Vec<String> = Vec::new();
    for a in vocab::ATTRIBUTES {
        for r in vocab::ROOMS {
            combos.push(format!("{a} {r}"));
        }
    }
    combos.shuffle(&mut rng);
    let rooms: Vec<String> = (0..n).map(|i| combos[i % combos.len()].clone()).collect();

    // object placements, regions 1.. so navigable door texts survive
    let mut placements = Vec::new();
    let mut next_object = 0u32;
    for node in 0..n {
        let mut labels: Vec<&'static str> = vocab::OBJECTS.to_vec();
        labels.shuffle(&mut rng);
        for &label in labels.iter().take(cfg.objects_per_node) {
            placements.push(Placement {
                object_id: next_object,
                label,
                attr: vocab::ATTRIBUTES[rng.random_range(0..vocab::ATTRIBUTES.len())],
                pred: vocab::PREDICATES[rng.random_range(0..vocab::PREDICATES.len())],
                landmark: vocab::LANDMARKS[rng.random_range(0..vocab::LANDMARKS.len())],
                node: node as u32,
                view: rng.random_range(0..VIEWS_PER_NODE),
                region: rng.random_range(1..REGIONS_PER_VIEW),
            });
            next_object += 1;
        }
    }

    let nav_views = assign_navigable_views(&positions, &edges);

    // first placement per node, advertised through doors facing it
    let first_placement: Vec<&Placement> = (0..n)
        .map(|node| {
            placements
                .iter()
                .find(|p| p.node == node as u32)
                .expect("every node has at least one object")
        })
        .collect();

    // region texts; navigable views describe what is visible through the
    // door: the next room and its distinctive object
    let mut nodes = Vec::with_capacity(n);
    for node in 0..n {
        let mut views = Vec::with_capacity(VIEWS_PER_NODE);
        for v in 0..VIEWS_PER_NODE {
            let to_node = nav_views[node].get(&v).copied();
            let mut regions = Vec::with_capacity(REGIONS_PER_VIEW);
            for r in 0..REGIONS_PER_VIEW {
                let landmark = vocab::LANDMARKS[rng.random_range(0..vocab::LANDMARKS.len())];
                let text = match (to_node, r) {
                    (Some(t), 0) => format!("{} door", rooms[t as usize]),
                    (Some(t), 1) => {
                        let p = first_placement[t as usize];
                        format!("{} {}", p.attr, p.label)
                    }
                    (Some(t), 2) => format!("{} {landmark}", rooms[t as usize]),
                    _ => format!("{} {landmark}", rooms[node]),
                };
                regions.push(text);
            }
            views.push(View {
                heading: (v as f64) * 10.0_f64.to_radians(),
                elevation: 0.0,
                regions,
                to_node,
            });
        }
        nodes.push(WorldNode {
            id: node as u32,
            pos: positions[node],
            views,
        });
    }
    for p in &placements {
        nodes[p.node as usize].views[p.view].regions[p.region] =
            format!("{} {} {} {}", p.attr, p.label, p.pred, p.landmark);
    }

    let world = World {
        meta: WorldMeta { seed: cfg.seed },
        nodes,
        edges: edges.clone(),
        objects: placements
            .iter()
            .map(|p| WorldObject {
                id: p.object_id,
                label: p.label.to_string(),
                node: p.node,
                view: p.view as u32,
            })
            .collect(),
    };
    world.validate()?;

    let records = region_records(&world, cfg, &mut rng);

    let (train, eval) = sample_episodes(&world, &rooms, &placements, cfg, &mut rng)?;

    Ok(Generated {
        world,
        train,
        eval,
        records,
    })
}

/// Nearest-neighbor wiring plus component stitching. Deterministic given
/// positions.
fn build_edges(positions: &[[f64; 3]], branching: usize) -> Vec<(u32, u32)> {
    let n = positions.len();
    let d2 = |a: usize, b: usize| -> f64 {
        (positions[a][0] - positions[b][0]).powi(2)
            + (positions[a][1] - positions[b][1]).powi(2)
            + (positions[a][2] - positions[b][2]).powi(2)
    };
    let mut edge_set = std::collections::BTreeSet::new();
    for a in 0..n {
        let mut by_dist: Vec<usize> = (0..n).filter(|&b| b != a).collect();
        by_dist.sort_by(|&x, &y| d2(a, x).total_cmp(&d2(a, y)).then(x.cmp(&y)));
        for &b in by_dist.iter().take(branching) {
            edge_set.insert((a.min(b) as u32, a.max(b) as u32));
        }
    }
    // union-find to stitch components
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, x: usize) -> usize {
        if parent[x] != x {
            let r = find(parent, parent[x]);
            parent[x] = r;
        }
        parent[x]
    }
    for &(a, b) in &edge_set {
        let (ra, rb) = (find(&mut parent, a as usize), find(&mut parent, b as usize));
        if ra != rb {
            parent[ra] = rb;
        }
    }
    loop {
        let roots: std::collections::BTreeSet<usize> =
            (0..n).map(|x| find(&mut parent, x)).collect();
        if roots.len() <= 1 {
            break;
        }
        // closest pair across the first root's component and the rest
        let first_root = *roots.iter().next().unwrap();
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..n {
            if find(&mut parent, a) != first_root {
                continue;
            }
            for b in 0..n {
                if find(&mut parent, b) == first_root {
                    continue;
                }
                let d = d2(a, b);
                if best.is_none() || d < best.unwrap().0 {
                    best = Some((d, a, b));
                }
            }
        }
        let (_, a, b) = best.expect("multiple components imply a cross pair");
        edge_set.insert((a.min(b) as u32, a.max(b) as u32));
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra] = rb;
    }
    edge_set.into_iter().collect()
}

/// Maps each neighbor to the view slot whose heading best matches the
/// direction toward it; collisions probe forward deterministically.
fn assign_navigable_views(
    positions: &[[f64; 3]],
    edges: &[(u32, u32)],
) -> Vec<std::collections::BTreeMap<usize, u32>> {
    let n = positions.len();
    let mut neighbors: Vec<Vec<u32>> = vec![Vec::new(); n];
    for &(a, b) in edges {
        neighbors[a as usize].push(b);
        neighbors[b as usize].push(a);
    }
    let mut out = vec![std::collections::BTreeMap::new(); n];
    for node in 0..n {
        neighbors[node].sort_unstable();
        for &nb in &neighbors[node] {
            let dx = positions[nb as usize][0] - positions[node][0];
            let dy = positions[nb as usize][1] - positions[node][1];
            let mut angle = dy.atan2(dx);
            if angle < 0.0 {
                angle += std::f64::consts::TAU;
            }
            let step = 10.0_f64.to_radians();
            let mut slot = (angle / step).round() as usize % VIEWS_PER_NODE;
            while out[node].contains_key(&slot) {
                slot = (slot + 1) % VIEWS_PER_NODE;
            }
            out[node].insert(slot, nb);
        }
    }
    out
}

/// One record per region. Object regions yield an attribute pair and a
/// relationship triplet; labels occasionally appear in plural surface form
/// so canonicalization has work to do.
fn region_records(world: &World, cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<RawRegionRecord> {
    let mut records = Vec::new();
    for node in &world.nodes {
        for (vidx, view) in node.views.iter().enumerate() {
            for (ridx, text) in view.regions.iter().enumerate() {
                let region_id = format!("{}-n{}-v{}-r{}", cfg.tag, node.id, vidx, ridx);
                let tokens: Vec<&str> = text.split(' ').collect();
                let mut rec = RawRegionRecord {
                    region_id,
                    attributes: vec![],
                    relationships: vec![],
                };
                match tokens.len() {
                    2 => rec.attributes.push((tokens[0].into(), tokens[1].into())),
                    3 => rec
                        .relationships
                        .push((tokens[0].into(), tokens[1].into(), tokens[2].into())),
                    4 => {
                        let mut label = tokens[1].to_string();
                        if rng.random_bool(0.3) {
                            label = vocab::plural(&label);
                        }
                        rec.attributes.push((tokens[0].into(), label.clone()));
                        rec.relationships
                            .push((label, tokens[2].into(), tokens[3].into()));
                    }
                    _ => unreachable!("generator emits 2-, 3-, or 4-token regions"),
                }
                records.push(rec);
            }
        }
    }
    records
}

fn sample_episodes(
    world: &World,
    rooms: &[String],
    placements: &[Placement],
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<EpisodeSpec>, Vec<EpisodeSpec>)> {
    let hops = hop_matrix(world);
    let total = cfg.train_episodes + cfg.eval_episodes;
    let mut used = std::collections::BTreeSet::new();
    let mut episodes = Vec::with_capacity(total);
    let mut attempts = 0;
    while episodes.len() < total {
        attempts += 1;
        if attempts > total * 200 {
            return Err(Error::Config(
                "could not sample enough distinct episodes; widen hop range or add nodes".into(),
            ));
        }
        let start = rng.random_range(0..world.len()) as u32;
        let goals: Vec<u32> = (0..world.len() as u32)
            .filter(|&g| {
                let h = hops[start as usize][g as usize];
                g != start && h >= cfg.min_hops && h <= cfg.max_hops
            })
            .collect();
        if goals.is_empty() {
            continue;
        }
        let goal = goals[rng.random_range(0..goals.len())];
        let at_goal: Vec<&Placement> = placements.iter().filter(|p| p.node == goal).collect();
        let pick = at_goal[rng.random_range(0..at_goal.len())];
        if !used.insert((start, goal, pick.object_id)) {
            continue;
        }
        // route waypoints: the rooms along the shortest path, consecutive
        // repeats collapsed (step-by-step style instructions)
        let path = world.shortest_path(start, goal)?;
        let mut waypoints: Vec<&str> = Vec::new();
        for node in &path[1..] {
            let room = rooms[*node as usize].as_str();
            if waypoints.last() != Some(&room) {
                waypoints.push(room);
            }
        }
        let route = waypoints.join(" then the ");
        let instruction = format!(
            "go to the {route} and find the {} {} near the {}",
            pick.attr, pick.label, pick.landmark
        );
        episodes.push((start, goal, pick.object_id, instruction));
    }
    let make = |slice: &[(u32, u32, u32, String)], split: &str, tag: &str| {
        slice
            .iter()
            .enumerate()
            .map(|(i, (start, goal, obj, instruction))| EpisodeSpec {
                id: format!("{tag}-{split}-{i:03}"),
                start: *start,
                goal: *goal,
                instruction: instruction.clone(),
                target_object: cfg.grounding.then_some(*obj),
            })
            .collect::<Vec<_>>()
    };
    let train = make(&episodes[..cfg.train_episodes], "train", &cfg.tag);
    let eval = make(&episodes[cfg.train_episodes..], "eval", &cfg.tag);
    Ok((train, eval))
}

/// All-pairs hop counts by repeated BFS.
fn hop_matrix(world: &World) -> Vec<Vec<usize>> {
    let n = world.len();
    let mut out = vec![vec![usize::MAX; n]; n];
    for s in 0..n {
        let mut queue = std::collections::VecDeque::new();
        out[s][s] = 0;
        queue.push_back(s as u32);
        while let Some(u) = queue.pop_front() {
            for v in world.neighbors(u) {
                if out[s][v as usize] == usize::MAX {
                    out[s][v as usize] = out[s][u as usize] + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_identical_json() {
        let cfg = GenConfig {
            nodes: 12,
            train_episodes: 6,
            eval_episodes: 2,
            ..GenConfig::default()
        };
        let a = gen_world(&cfg).unwrap();
        let b = gen_world(&cfg).unwrap();
        assert_eq!(a.world.to_json().unwrap(), b.world.to_json().unwrap());
        assert_eq!(
            serde_json::to_string(&a.train).unwrap(),
            serde_json::to_string(&b.train).unwrap()
        );
        assert_eq!(a.records.len(), b.records.len());
    }

    #[test]
    fn requested_shape_is_delivered() {
        let cfg = GenConfig {
            nodes: 30,
            train_episodes: 10,
            eval_episodes: 3,
            ..GenConfig::default()
        };
        let g = gen_world(&cfg).unwrap();
        assert_eq!(g.world.len(), 30);
        g.world.validate().unwrap();
        assert_eq!(g.train.len(), 10);
        assert_eq!(g.eval.len(), 3);
        assert_eq!(g.world.objects.len(), 30 * cfg.objects_per_node);
    }

    #[test]
    fn goals_are_reachable_within_hops() {
        let cfg = GenConfig {
            nodes: 20,
            train_episodes: 8,
            eval_episodes: 4,
            ..GenConfig::default()
        };
        let g = gen_world(&cfg).unwrap();
        for ep in g.train.iter().chain(&g.eval) {
            let d = g.world.shortest_dists(ep.start).unwrap();
            assert!(d[ep.goal as usize].is_finite());
            assert_ne!(ep.start, ep.goal);
            assert!(!ep.instruction.is_empty());
        }
    }

    #[test]
    fn too_few_nodes_rejected() {
        let cfg = GenConfig {
            nodes: 3,
            ..GenConfig::default()
        };
        assert!(gen_world(&cfg).is_err());
    }

    #[test]
    fn instructions_tokenize_with_crate_vocab() {
        let g = gen_world(&GenConfig {
            nodes: 10,
            train_episodes: 4,
            eval_episodes: 2,
            ..GenConfig::default()
        })
        .unwrap();
        for ep in g.train.iter().chain(&g.eval) {
            crate::vocab::tokenize(&ep.instruction).unwrap();
        }
    }
}
