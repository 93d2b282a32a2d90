//! Multi-prompt visual in-context learning at desk scale.
//!
//! The pipeline retrieves the support pairs most similar to a query, splits
//! them into a holistic, a high-similarity and a low-similarity group, fuses
//! each group into a single prompt canvas, and decodes the query label with a
//! multi-branch inpainting transformer whose main branch cross-attends to the
//! two guidance branches over a range of intermediate blocks.

pub mod backbone;
pub mod canvas;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod nn;
pub mod pipeline;
pub mod prompt_gen;
pub mod retrieval;
pub mod taskgen;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
