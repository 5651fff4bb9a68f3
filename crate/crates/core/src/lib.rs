//! Set-based verification of feed-forward neural networks.
//!
//! Outputs are enclosed with zonotopes; unsafe output regions are pulled back onto the
//! latent factors of the input set to shrink the inputs that still need checking, and a
//! batched branch-and-bound loop verifies, falsifies, or runs out of budget.

pub mod cli;
pub mod enclosure;
pub mod engine;
pub mod error;
pub mod network;
pub mod oracle;
pub mod refine;
pub mod setlib;
pub mod specparse;

pub use engine::{verify, EngineConfig, Heuristic, Outcome, Verdict};
pub use error::{Error, Result};
pub use network::Network;
pub use specparse::VerificationTask;
