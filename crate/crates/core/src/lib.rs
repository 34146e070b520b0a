pub mod analyzer;
pub mod cli;
pub mod codec;
pub mod config;
pub mod dedup;
pub mod enumerate;
pub mod error;
pub mod index;
pub mod model;
pub mod pipeline;
pub mod predictor;
pub mod report;

pub use error::{Error, Result};
