//! Verification-centred generation, validation, repair and audit of
//! thermal-protection-system conduction artifacts.

pub mod artifact;
pub mod assets;
pub mod audit;
pub mod bench;
pub mod cdg;
pub mod cli;
pub mod executor;
pub mod fixtures;
pub mod metrics;
pub mod gates;
pub mod repair;
pub mod rng;
pub mod units;
