use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature dimension before subsampling.
    pub input_dim: usize,
    pub subsample_stride: usize,
    pub model_dim: usize,
    /// Total encoder depth.
    pub num_layers: usize,
    /// Depth of the always-executed lower stack; the intermediate head sits here.
    pub split_layer: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Vocabulary size excluding blank.
    pub vocab_size: usize,
    pub use_conv_block: bool,
    /// Odd width of the depthwise convolution.
    pub conv_kernel: usize,
    pub factorized_heads: bool,
    /// Blank threshold for layer skipping.
    pub tau_skip: f64,
    /// Frames (current plus predecessors) that must all be blank-confident.
    pub window_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            subsample_stride: 2,
            model_dim: 32,
            num_layers: 6,
            split_layer: 4,
            num_heads: 2,
            ffn_dim: 64,
            vocab_size: 8,
            use_conv_block: true,
            conv_kernel: 5,
            factorized_heads: false,
            tau_skip: 0.99,
            window_len: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.split_layer < 1 || self.split_layer >= self.num_layers {
            return bad(format!(
                "split_layer {} must satisfy 1 <= K < num_layers {}",
                self.split_layer, self.num_layers
            ));
        }
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return bad(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if !(self.tau_skip > 0.0 && self.tau_skip <= 1.0) {
            return bad(format!("tau_skip {} outside (0, 1]", self.tau_skip));
        }
        if self.window_len == 0 {
            return bad("window_len must be >= 1".into());
        }
        if self.input_dim == 0 || self.subsample_stride == 0 || self.ffn_dim == 0 || self.vocab_size == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.use_conv_block && self.conv_kernel % 2 == 0 {
            return bad(format!("conv_kernel {} must be odd", self.conv_kernel));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}
