//! Reward-guided token ordering for masked discrete diffusion.
//!
//! The crate pairs a practical online controller (confidence warmup, bucketized
//! reward estimates, shortlist reranking) with an exact enumeration oracle for
//! small instances, so that the controller's behavior can be compared against
//! the quantities it approximates.
//!
//! Layout:
//! - [`state`] and [`rng`]: value types and seeded randomness.
//! - [`targets`]: enumerable clean-sequence laws and terminal rewards.
//! - [`denoiser`]: a tabular conditional denoiser and its progressive training loop.
//! - [`controllers`]: ordering policies, gate schedule and bucket statistics.
//! - [`oracle`]: exact harmonic functions, tilted laws, KL and regret tools.
//! - [`experiments`]: named seeded procedures that emit metrics reports.

// `!(x > 0.0)` is used on purpose so that NaN parameters are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod controllers;
pub mod denoiser;
pub mod experiments;
pub mod oracle;
pub mod par;
pub mod rng;
pub mod state;
pub mod targets;

pub use rng::SeededRng;
pub use state::{MaskedState, PhaseBin, PhaseMode, RevealAction, Token, Vocab, MASK};

/// Version string embedded in every output file.
pub const ARTIFACT_VERSION: &str = concat!("dprm-core/", env!("CARGO_PKG_VERSION"));
