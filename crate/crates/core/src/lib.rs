pub mod app;
pub mod config;
pub mod deq;
pub mod eqnet;
pub mod error;
pub mod grad;
pub mod graph;
pub mod irreps;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod params;
pub mod sim;
#[cfg(test)]
pub(crate) mod testutil;
pub mod train;
pub mod vec3;

pub use error::{Error, Result};
