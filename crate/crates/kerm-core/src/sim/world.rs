//! Navigation worlds: a connected graph of panoramic nodes.
//!
//! Every node carries 36 single views; a view either faces open space or is
//! the navigable view toward exactly one neighbor. Region texts stand in for
//! pixels at desk scale.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab;

pub const VIEWS_PER_NODE: usize = 36;
pub const REGIONS_PER_VIEW: usize = 5;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldMeta {
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct View {
    pub heading: f64,
    pub elevation: f64,
    pub regions: Vec<String>,
    pub to_node: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldNode {
    pub id: u32,
    pub pos: [f64; 3],
    pub views: Vec<View>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldObject {
    pub id: u32,
    pub label: String,
    pub node: u32,
    pub view: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct World {
    pub meta: WorldMeta,
    pub nodes: Vec<WorldNode>,
    pub edges: Vec<(u32, u32)>,
    pub objects: Vec<WorldObject>,
}

impl World {
    pub fn node(&self, id: u32) -> Result<&WorldNode> {
        self.nodes
            .get(id as usize)
            .filter(|n| n.id == id)
            .ok_or_else(|| Error::Invalid(format!("unknown node {id}")))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edge_weight(&self, a: u32, b: u32) -> Result<f64> {
        let (pa, pb) = (self.node(a)?.pos, self.node(b)?.pos);
        Ok(((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2) + (pa[2] - pb[2]).powi(2)).sqrt())
    }

    /// Neighbors of `a`, ascending.
    pub fn neighbors(&self, a: u32) -> Vec<u32> {
        let mut out: Vec<u32> = self
            .edges
            .iter()
            .filter_map(|&(x, y)| {
                if x == a {
                    Some(y)
                } else if y == a {
                    Some(x)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }

    /// The navigable view of `node` facing `neighbor`.
    pub fn view_toward(&self, node: u32, neighbor: u32) -> Result<usize> {
        self.node(node)?
            .views
            .iter()
            .position(|v| v.to_node == Some(neighbor))
            .ok_or_else(|| Error::Invalid(format!("no view from {node} toward {neighbor}")))
    }

    /// Exact single-source shortest-path distances over edge weights.
    /// Unreachable nodes get infinity.
    pub fn shortest_dists(&self, source: u32) -> Result<Vec<f64>> {
        self.node(source)?;
        let n = self.nodes.len();
        let adj = self.adjacency();
        let mut dist = vec![f64::INFINITY; n];
        dist[source as usize] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(Reverse((OrdF64(0.0), source)));
        while let Some(Reverse((OrdF64(d), u))) = heap.pop() {
            if d > dist[u as usize] {
                continue;
            }
            for &(v, w) in &adj[u as usize] {
                let nd = d + w;
                if nd < dist[v as usize] {
                    dist[v as usize] = nd;
                    heap.push(Reverse((OrdF64(nd), v)));
                }
            }
        }
        Ok(dist)
    }

    /// Shortest path from `a` to `b` inclusive; ties broken toward lower
    /// predecessor ids.
    pub fn shortest_path(&self, a: u32, b: u32) -> Result<Vec<u32>> {
        self.node(a)?;
        self.node(b)?;
        let n = self.nodes.len();
        let adj = self.adjacency();
        let mut dist = vec![f64::INFINITY; n];
        let mut prev = vec![u32::MAX; n];
        dist[a as usize] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(Reverse((OrdF64(0.0), a)));
        while let Some(Reverse((OrdF64(d), u))) = heap.pop() {
            if d > dist[u as usize] {
                continue;
            }
            for &(v, w) in &adj[u as usize] {
                let nd = d + w;
                let better = nd < dist[v as usize]
                    || (nd == dist[v as usize] && prev[v as usize] != u32::MAX && u < prev[v as usize]);
                if better {
                    dist[v as usize] = nd;
                    prev[v as usize] = u;
                    heap.push(Reverse((OrdF64(nd), v)));
                }
            }
        }
        if dist[b as usize].is_infinite() {
            return Err(Error::Invalid(format!("node {b} unreachable from {a}")));
        }
        let mut path = vec![b];
        let mut cur = b;
        while cur != a {
            cur = prev[cur as usize];
            path.push(cur);
        }
        path.reverse();
        Ok(path)
    }

    fn adjacency(&self) -> Vec<Vec<(u32, f64)>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(a, b) in &self.edges {
            let w = self.edge_weight(a, b).expect("edge endpoints exist");
            adj[a as usize].push((b, w));
            adj[b as usize].push((a, w));
        }
        for list in &mut adj {
            list.sort_by(|x, y| x.0.cmp(&y.0));
        }
        adj
    }

    /// Objects visible at a node, ascending by object id.
    pub fn objects_at(&self, node: u32) -> Vec<&WorldObject> {
        let mut out: Vec<&WorldObject> = self.objects.iter().filter(|o| o.node == node).collect();
        out.sort_by_key(|o| o.id);
        out
    }

    pub fn object(&self, id: u32) -> Option<&WorldObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Semantic class of a view, derived from its region texts: the first
    /// object word encountered, else the first room word. Stands in for an
    /// image classifier.
    pub fn view_class(&self, node: u32, view: usize) -> Result<usize> {
        let v = self
            .node(node)?
            .views
            .get(view)
            .ok_or_else(|| Error::Invalid(format!("view {view} out of range")))?;
        let mut room_fallback = None;
        for region in &v.regions {
            for token in region.split_whitespace() {
                if vocab::OBJECTS.contains(&token) {
                    return Ok(vocab::label_id(token).expect("object word is a label"));
                }
                if room_fallback.is_none() && vocab::ROOMS.contains(&token) {
                    room_fallback = vocab::label_id(token);
                }
            }
        }
        room_fallback.ok_or_else(|| {
            Error::Invalid(format!("view {node}:{view} has no classifiable content"))
        })
    }

    /// Structural invariants: dense ascending ids, 36 views x 5 regions,
    /// positive edge weights, connectivity, one navigable view per neighbor.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Format("world has no nodes".into()));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id as usize != i {
                return Err(Error::Format(format!(
                    "node ids must be dense and ascending; index {i} holds id {}",
                    n.id
                )));
            }
            if n.views.len() != VIEWS_PER_NODE {
                return Err(Error::Format(format!(
                    "node {} has {} views, expected {VIEWS_PER_NODE}",
                    n.id,
                    n.views.len()
                )));
            }
            for v in &n.views {
                if v.regions.len() != REGIONS_PER_VIEW {
                    return Err(Error::Format(format!(
                        "node {} has a view with {} regions, expected {REGIONS_PER_VIEW}",
                        n.id,
                        v.regions.len()
                    )));
                }
            }
        }
        for &(a, b) in &self.edges {
            if a == b {
                return Err(Error::Format(format!("self edge at {a}")));
            }
            if self.edge_weight(a, b)? <= 0.0 {
                return Err(Error::Format(format!("edge ({a},{b}) has non-positive weight")));
            }
        }
        for n in &self.nodes {
            let neighbors = self.neighbors(n.id);
            for &nb in &neighbors {
                let count = n.views.iter().filter(|v| v.to_node == Some(nb)).count();
                if count != 1 {
                    return Err(Error::Format(format!(
                        "node {} has {count} navigable views toward {nb}, expected 1",
                        n.id
                    )));
                }
            }
            for v in &n.views {
                if let Some(t) = v.to_node {
                    if !neighbors.contains(&t) {
                        return Err(Error::Format(format!(
                            "node {} has a view toward non-neighbor {t}",
                            n.id
                        )));
                    }
                }
            }
        }
        let dist = self.shortest_dists(0)?;
        if dist.iter().any(|d| d.is_infinite()) {
            return Err(Error::Format("world graph is not connected".into()));
        }
        for o in &self.objects {
            self.node(o.node)?;
            if o.view as usize >= VIEWS_PER_NODE {
                return Err(Error::Format(format!("object {} has bad view index", o.id)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let w: World = serde_json::from_str(s).map_err(|e| Error::Format(format!("world: {e}")))?;
        w.validate()?;
        Ok(w)
    }
}

/// Total order over f64 for heap keys (no NaNs in distances).
#[derive(PartialEq, PartialOrd)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

#[allow(clippy::derive_ord_xor_partial_ord)]
impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}
