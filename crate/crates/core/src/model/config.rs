// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::tokenizer::BASE_VOCAB;
use crate::error::{Error, Result};

/// Shape of a decoder-only transformer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub norm_eps: f32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        if self.max_seq == 0 {
            return fail("max_seq must be at least 1".into());
        }
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff == 0 {
            return fail("d_ff must be at least 1".into());
        }
        if self.vocab_size < BASE_VOCAB {
            return fail(format!(
                "vocab_size {} is smaller than the byte vocabulary ({BASE_VOCAB})",
                self.vocab_size
            ));
        }
        if !self.norm_eps.is_finite() || self.norm_eps < 0.0 {
            return fail(format!("norm_eps {} must be finite and non-negative", self.norm_eps));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer < self.n_layers {
            Ok(())
        } else {
            Err(Error::InvalidLayer {
                layer,
                n_layers: self.n_layers,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 259,
            max_seq: 64,
            norm_eps: 1e-5,
        }
    }

    #[test]
    fn validation() {
        assert!(cfg().validate().is_ok());
        assert!(ModelConfig { n_heads: 3, ..cfg() }.validate().is_err());
        assert!(ModelConfig { n_layers: 0, ..cfg() }.validate().is_err());
        assert!(ModelConfig { max_seq: 0, ..cfg() }.validate().is_err());
        assert!(ModelConfig {
            vocab_size: 100,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(matches!(
            cfg().check_layer(2),
            Err(Error::InvalidLayer { layer: 2, n_layers: 2 })
        ));
    }
}
