//! Incrementally built topological map over a world graph.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::sim::world::World;
use crate::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeState {
    Visited,
    Current,
    Navigable,
}

/// Known subgraph of the world with visited/current/navigable node states
/// and an optional feature vector per node.
#[derive(Debug, Clone)]
pub struct TopoMap {
    states: BTreeMap<u32, NodeState>,
    edges: BTreeSet<(u32, u32)>,
    features: BTreeMap<u32, Tensor2>,
}

impl TopoMap {
    /// Map at episode start: the start node is current and its panorama has
    /// been observed.
    pub fn start(world: &World, start: u32) -> Result<Self> {
        world.node(start)?;
        let mut map = Self {
            states: BTreeMap::new(),
            edges: BTreeSet::new(),
            features: BTreeMap::new(),
        };
        map.states.insert(start, NodeState::Current);
        map.observe(world, start)?;
        Ok(map)
    }

    /// Integrates one panorama: all world neighbors become navigable (unless
    /// already known) and their connecting edges are recorded.
    pub fn observe(&mut self, world: &World, node: u32) -> Result<()> {
        if !self.states.contains_key(&node) {
            return Err(Error::IllegalAction(format!(
                "cannot observe unknown node {node}"
            )));
        }
        for nb in world.neighbors(node) {
            self.states.entry(nb).or_insert(NodeState::Navigable);
            self.edges.insert((node.min(nb), node.max(nb)));
        }
        Ok(())
    }

    pub fn current(&self) -> u32 {
        *self
            .states
            .iter()
            .find(|(_, s)| **s == NodeState::Current)
            .expect("map always has exactly one current node")
            .0
    }

    pub fn state(&self, node: u32) -> Option<NodeState> {
        self.states.get(&node).copied()
    }

    pub fn known_nodes(&self) -> impl Iterator<Item = (u32, NodeState)> + '_ {
        self.states.iter().map(|(n, s)| (*n, *s))
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Movement targets: navigable and visited nodes, excluding the current
    /// one. Ascending by id.
    pub fn frontier(&self) -> Vec<u32> {
        self.states
            .iter()
            .filter(|(_, s)| **s != NodeState::Current)
            .map(|(n, _)| *n)
            .collect()
    }

    /// Executes a map-level action: walks the world shortest path to a
    /// frontier node, observing every node passed through. Returns the
    /// traversed nodes after the starting position.
    pub fn move_to(&mut self, world: &World, target: u32) -> Result<Vec<u32>> {
        match self.state(target) {
            Some(NodeState::Navigable) | Some(NodeState::Visited) => {}
            Some(NodeState::Current) => {
                return Err(Error::IllegalAction("already at target node".into()))
            }
            None => {
                return Err(Error::IllegalAction(format!(
                    "node {target} is not a map candidate"
                )))
            }
        }
        let from = self.current();
        let path = world.shortest_path(from, target)?;
        self.states.insert(from, NodeState::Visited);
        for &hop in &path[1..] {
            self.states.insert(hop, NodeState::Visited);
            self.observe(world, hop)?;
        }
        self.states.insert(target, NodeState::Current);
        Ok(path[1..].to_vec())
    }

    pub fn set_feature(&mut self, node: u32, feature: Tensor2) {
        self.features.insert(node, feature);
    }

    pub fn feature(&self, node: u32) -> Option<&Tensor2> {
        self.features.get(&node)
    }

    /// Test hook: every recorded edge exists in the world and exactly one
    /// node is current.
    pub fn is_consistent_with(&self, world: &World) -> bool {
        let one_current = self
            .states
            .values()
            .filter(|s| **s == NodeState::Current)
            .count()
            == 1;
        let edges_ok = self.edges.iter().all(|&(a, b)| {
            world
                .neighbors(a)
                .binary_search(&b)
                .is_ok()
        });
        let nodes_ok = self.states.keys().all(|&n| world.node(n).is_ok());
        one_current && edges_ok && nodes_ok
    }
}
