//! Prompt-based news recommendation as a text-to-text task.
//!
//! User histories and candidate articles are rendered into prompts, a small
//! encoder-decoder transformer is trained to answer "yes" or "no", and the
//! normalised probability of "yes" ranks the candidates.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod prompts;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
