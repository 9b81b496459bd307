//! Hybrid preference / group-relative reinforcement learning on synthetic
//! verifiable token tasks.

pub mod cli;
pub mod error;
pub mod grpo;
pub mod mpo;
pub mod oracle;
pub mod policy;
pub mod records;
pub mod ssb;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
