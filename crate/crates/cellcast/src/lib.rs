//! cellcast: cluster cellular grid cells by daily peak-traffic hour and
//! forecast hourly traffic with one TCN-LSTM model per cluster.

pub mod cluster;
pub mod config;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod model;
pub mod nn;
pub mod profile;
pub mod trainer;

pub use error::{Error, Result};
