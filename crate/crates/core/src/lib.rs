//! Closed-loop prompt optimization for generative backends.
//!
//! A run plans an enhanced prompt (optionally guided by a skill), splits the
//! user's request into yes/no criteria, then alternates generation,
//! verification and refinement until every criterion passes or the
//! iteration budget runs out. A compressed memory of earlier attempts feeds
//! each refinement.
//!
//! The [`backends`] module provides HTTP clients and a deterministic
//! synthetic world for testing.

pub mod agents;
pub mod backends;
pub mod digest;
pub mod engine;
pub mod memory;
pub mod seed;
pub mod skills;
pub mod store;
pub mod types;

pub use engine::{run_loop, Engine, EngineError, RunOutput};
pub use types::{LoopConfig, Trajectory, UserPrompt};
