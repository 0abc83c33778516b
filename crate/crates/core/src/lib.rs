//! Supervised contrastive losses with pluggable class projections, mutual
//! information estimators and bounds, and a small synthetic-data training lab.

pub mod encoder;
pub mod error;
pub mod experiments;
pub mod losses;
pub mod miest;
pub mod numerics;
pub mod projections;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
