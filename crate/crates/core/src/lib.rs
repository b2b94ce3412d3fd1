//! Expression-tree decoding for equation generation.
//!
//! Equations are compiled into layers of mutually independent expressions; a
//! query-based decoder predicts each layer in parallel and is trained with a
//! bipartite-matching set loss.

pub mod data;
pub mod equation;
pub mod labels;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod train;
