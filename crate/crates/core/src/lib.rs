//! Desk-scale laboratory for studying how to split a training budget between
//! supervised warm-up and reinforcement learning.
//!
//! The pipeline mirrors a two-stage recipe: a scripted teacher generates
//! expert trajectories on a synthetic multi-step task family, a linear-softmax
//! student is trained by cross-entropy with checkpoints snapshotted at branch
//! points, and each branch is fine-tuned with multi-turn GRPO. Every phase
//! bills exact FLOPs to a ledger so runs can be placed on a compute/performance
//! frontier, and a bootstrap analyzer ranks hyperparameter importance across
//! random-search sweeps.

pub mod bootstrap;
pub mod compute;
pub mod curriculum;
pub mod env;
pub mod error;
pub mod grpo;
pub mod harness;
pub mod policy;
pub mod rng;
pub mod sft;

pub use error::{Error, Result};
