//! Layered constraint-repair toolkit: a structural causal simulator over
//! layered dependency graphs, causal edge-weight estimators, count-state
//! compression, a pruned Thompson-sampling MCTS planner with baselines, and a
//! seeded benchmark harness.

pub mod bitmap;
pub mod error;
pub mod graph;

pub use bitmap::Bitmap;
pub use error::{Error, Result};
pub use graph::{ConstraintGraph, LoaReport};
pub mod scm;
pub mod seed;
pub mod identify;
pub mod estimate;
pub mod instances;
pub mod compress;
pub mod plan;
pub mod bench;
pub mod cli;
