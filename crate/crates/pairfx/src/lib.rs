//! Two-stage outfit-compatibility explanation pipeline: dataset construction
//! from co-purchase catalogs, pair classifiers with word-level extraction,
//! prompt-templated explanation generation, and text-distribution metrics.

pub mod config;
pub mod corpus;
pub mod error;
pub mod io;
pub mod llm;
pub mod metrics;
pub mod nn;
pub mod pairs;
pub mod par;
pub mod rng;
pub mod stage1;
pub mod stage2;
pub mod tensor;
pub mod testing;
pub mod text;

pub use error::{Error, Result};
