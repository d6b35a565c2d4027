use serde::{Deserialize, Serialize};

use super::ModelError;

/// Encoder-decoder transformer dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub vocab_size: usize,
    /// One embedding table for source, target and the output projection.
    #[serde(default = "yes")]
    pub share_embeddings: bool,
}

fn yes() -> bool {
    true
}

impl TransformerConfig {
    /// Small 2+2 layer model used for CPU-scale experiments.
    pub fn desk(vocab_size: usize) -> Self {
        TransformerConfig {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 64,
            ffn_dim: 256,
            heads: 4,
            dropout: 0.1,
            max_positions: 256,
            vocab_size,
            share_embeddings: true,
        }
    }

    /// 5+5 layers with transformer-base widths.
    pub fn paper_scale(vocab_size: usize) -> Self {
        TransformerConfig {
            enc_layers: 5,
            dec_layers: 5,
            d_model: 512,
            ffn_dim: 2048,
            heads: 8,
            dropout: 0.1,
            max_positions: 1024,
            vocab_size,
            share_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("d_model", self.d_model),
            ("ffn_dim", self.ffn_dim),
            ("heads", self.heads),
            ("max_positions", self.max_positions),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let (d, f, v) = (self.d_model, self.ffn_dim, self.vocab_size);
        let ln = 2 * d;
        let attn = 4 * (d * d + d);
        let ffn = d * f + f + f * d + d;
        let enc = self.enc_layers * (2 * ln + attn + ffn) + ln;
        let dec = self.dec_layers * (3 * ln + 2 * attn + ffn) + ln;
        let embed = if self.share_embeddings { v * d } else { 3 * v * d };
        embed + enc + dec
    }
}
