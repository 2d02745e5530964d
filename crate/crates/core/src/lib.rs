pub mod ablation;
pub mod bottleneck;
pub mod checkpoint;
pub mod concept_pool;
pub mod data_io;
pub mod error;
pub mod fixture;
pub mod graphs;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod sgt_moe;
pub mod trainer;

pub use error::{Error, Result};
