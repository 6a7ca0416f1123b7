//! Performance models for a two-stage generative rendering pipeline: a
//! compute-bound world model feeding memory-bound decoders.
//!
//! - [`perfmodel`]: closed-form stage latency and throughput.
//! - [`allocator`]: device split between the two stages.
//! - [`simulator`]: discrete-event pipeline simulation.
//! - [`speculation`]: speculative action prefetching.
//! - [`extrapolation`]: latent extrapolation gated on action divergence.
//! - [`memcost`]: memory-traffic analysis and operator fusion planning.
//! - [`scenario`]: composed scenarios and the ablation ladder.

pub mod allocator;
pub mod error;
pub mod extrapolation;
pub mod io;
pub mod memcost;
pub mod perfmodel;
pub mod scenario;
pub mod simulator;
pub mod speculation;
pub mod trace;

pub use error::{Error, Result};
