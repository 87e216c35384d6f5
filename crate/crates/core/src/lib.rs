//! Cross-domain sequential recommendation with dual dynamic graphs.
//!
//! Two local graphs (one per domain) and one global graph over the merged
//! history are grown event by event; a fuse attentive gate moves knowledge from
//! the global graph into the local node states before each prediction.

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod error;
pub mod gate;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
