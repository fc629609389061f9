//! Knowledge-enhanced navigation reasoning at desk scale.
//!
//! The crate covers the full pipeline: fact knowledge-base construction,
//! embedding-based fact retrieval per view region, the
//! purification / interaction / aggregation reasoner, a graph navigation
//! simulator with a shortest-path demonstrator, imitation training, and the
//! standard navigation metric suite.

pub mod agent;
pub mod attention;
pub mod kb;
pub mod metrics;
pub mod policy;
pub mod reasoner;
pub mod retrieval;
pub mod sim;
pub mod vocab;
pub mod error;
pub mod graph;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{grad_check, Graph, Params, TensorRef};
pub use tensor::Tensor2;
