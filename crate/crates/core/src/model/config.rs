use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub experts_per_layer: usize,
    pub top_k: usize,
    pub shared_experts: usize,
    pub ffn_hidden: usize,
    pub renormalize_gates: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            embed_dim: 32,
            num_layers: 4,
            experts_per_layer: 16,
            top_k: 2,
            shared_experts: 0,
            ffn_hidden: 64,
            renormalize_gates: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("experts_per_layer", self.experts_per_layer),
            ("top_k", self.top_k),
            ("ffn_hidden", self.ffn_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.top_k > self.experts_per_layer {
            return Err(Error::config(format!(
                "top_k {} exceeds experts_per_layer {}",
                self.top_k, self.experts_per_layer
            )));
        }
        Ok(())
    }
}
