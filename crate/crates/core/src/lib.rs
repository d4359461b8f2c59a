//! Simulator for personalized federated learning of student outcome
//! predictors across demographic subgroups.

pub mod access;
pub mod data;
pub mod error;
pub mod eval;
pub mod federation;
pub mod ingest;
pub mod irt;
pub mod neural;
pub mod pretrain;
pub mod rng;
pub mod synthgen;

pub use error::{Error, Result};
