//! Configuration, stream files, checkpoints, logs and the lap protocol
//! around `conjflow-core`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod io;
pub mod metrics;
pub mod protocol;
pub mod render;

pub use conjflow_core as core;
pub use error::{Error, Result};
