//! Joint-attention translation model that fuses every layer of a small
//! pre-trained encoder through per-layer gated combiners, with staged
//! training, beam search and BLEU evaluation.

pub mod blocks;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod kernel;
pub mod microbert;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
