pub mod cli;
pub mod config;
pub mod critic;
pub mod data;
pub mod error;
pub mod image;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod train;
