pub mod config;
pub mod costmodel;
pub mod error;
pub mod glm;
pub mod ingest;
pub mod netsim;
pub mod switch_agg;
pub mod trainer;
pub mod wire;
pub mod worker_proto;

pub use error::{Error, Result};
