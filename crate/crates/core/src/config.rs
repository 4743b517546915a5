//! Named model configurations.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Dimensions shared by every block of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding width.
    pub d: usize,
    /// Attention heads.
    pub heads: usize,
    /// Stacked blocks.
    pub blocks: usize,
    /// Rows of the input/output latent arrays.
    pub l_i: usize,
    /// Rows of each block's bottleneck latents.
    pub l_b: usize,
    pub d_ff: usize,
    /// Rows per chunk for constant-memory evaluation.
    pub chunk_size: usize,
}

impl ModelConfig {
    pub fn new(d: usize, heads: usize, blocks: usize, l_i: usize, l_b: usize) -> Self {
        Self {
            d,
            heads,
            blocks,
            l_i,
            l_b,
            d_ff: 2 * d,
            chunk_size: 128,
        }
    }

    /// Gradient-check scale.
    pub fn tiny() -> Self {
        Self::new(16, 2, 2, 4, 4)
    }

    /// Training scale.
    pub fn desk() -> Self {
        Self::new(32, 4, 2, 8, 8)
    }

    /// Latent counts and width used for benchmarks.
    pub fn deployment() -> Self {
        Self::new(64, 8, 2, 128, 128)
    }

    pub const KNOWN: [&'static str; 3] = ["tiny", "desk", "deployment"];

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "desk" => Ok(Self::desk()),
            "deployment" => Ok(Self::deployment()),
            _ => Err(Error::UnknownConfig {
                name: name.to_string(),
                known: Self::KNOWN.join(", "),
            }),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return contract(format!("heads ({}) must divide d ({})", self.heads, self.d));
        }
        if self.blocks == 0
            || self.l_i == 0
            || self.l_b == 0
            || self.d_ff == 0
            || self.chunk_size == 0
        {
            return contract("block count, latent counts, d_ff and chunk size must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_config_lists_known() {
        let err = ModelConfig::named("huge").unwrap_err().to_string();
        assert!(err.contains("tiny") && err.contains("deployment"), "{err}");
    }

    #[test]
    fn named_configs_are_valid() {
        for name in ModelConfig::KNOWN {
            ModelConfig::named(name).unwrap().validate().unwrap();
        }
        assert!(ModelConfig::new(10, 3, 1, 2, 2).validate().is_err());
    }
}
