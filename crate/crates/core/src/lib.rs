//! Cross-attention span extraction for fusion-in-decoder question answering.
//!
//! A small encoder-decoder transformer built on a hand-written reverse-mode
//! autodiff engine. The decoder's last-layer cross-attention, averaged over
//! heads, doubles as a start/end distribution over context tokens, which
//! supports extractive answers, hallucination fallback, and passage
//! reranking without extra parameters.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod heatmap;
pub mod inference;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Result, XaqaError};
pub use tensor::Tensor;
