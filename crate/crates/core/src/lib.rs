//! External-context aggregation for event-sequence embeddings.
//!
//! A GRU encoder turns each user's event history into a trajectory of hidden
//! states. An as-of store keeps those states indexed by time so that, for any
//! query time, a snapshot of every context user's latest state can be
//! aggregated into an external context vector `g_t` and concatenated with the
//! user's own state `h_t` for downstream tasks.

pub mod aggregation;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod nn;
pub mod pipeline;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
