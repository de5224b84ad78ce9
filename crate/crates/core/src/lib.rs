//! Cross appearance-edge learning for face-forgery detection, end to end:
//! a dense f64 autodiff engine, edge/frequency operators, the multi-grained
//! appearance-edge transformer, a procedural forgery corpus with a
//! hierarchical manifest, and evaluation protocols with ACC/AUC reporting.

pub mod align;
pub mod config;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod error;
pub mod image;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::CaelError;
