//! Sandboxed multi-turn environment for code-writing agents on verifiable
//! data tasks, with rollout sampling, outcome verification and dataset
//! mining for agent fine-tuning.

pub mod model;
pub mod sandbox;
pub mod protocol;
pub mod suites;
pub mod http;
pub mod policy;
pub mod session;
pub mod rollout;
pub mod verifier;
pub mod metrics;
pub mod dataprep;
pub mod cli;
