//! Discrete navigation environments: worlds, topological maps, the
//! shortest-distance demonstrator, and episode execution.

pub mod episode;
pub mod gen;
pub mod map;
pub mod world;

pub use episode::{
    demonstrator_next, format_termination_stats, read_episodes, read_trajectories, run_episode,
    termination_stats, write_alpha_csv, write_episodes, write_trajectories, AlphaRecord,
    EpisodeSpec, Termination, Trajectory,
};
pub use gen::{gen_world, GenConfig, Generated};
pub use map::{NodeState, TopoMap};
pub use world::{View, World, WorldMeta, WorldNode, WorldObject, REGIONS_PER_VIEW, VIEWS_PER_NODE};
