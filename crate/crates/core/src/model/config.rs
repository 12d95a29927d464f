use serde::{Deserialize, Serialize};

use crate::error::{Result, XaqaError};

pub type Token = u32;

pub const PAD: Token = 0;
pub const BOS: Token = 1;
pub const EOS: Token = 2;
pub const SEP: Token = 3;
/// First id of the ordinary vocabulary.
pub const FIRST_WORD: Token = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    /// Positions per encoder segment (question + separator + passage).
    pub max_seq_len: usize,
    /// Decoder input positions, BOS included.
    pub max_decode_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 200,
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 128,
            max_seq_len: 32,
            max_decode_len: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(XaqaError::contract(format!("model config: {name} must be >= 1")));
        }
        if self.vocab_size <= FIRST_WORD as usize {
            return Err(XaqaError::contract("model config: vocab_size must exceed the special tokens"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(XaqaError::contract(format!(
                "model config: d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_decode_len < 2 {
            return Err(XaqaError::contract("model config: max_decode_len must be >= 2"));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}
