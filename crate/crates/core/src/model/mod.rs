//! Prefix-conditioned encoder–decoder report generator.
//!
//! A slide feature vector `f` is mapped by the prompt encoder to
//! `h = ReLU(W₁·f + b₁)` and `p = reshape(W₂·h + b₂)` with `p` of shape
//! `(prefix_len, d_model)`. The prefix rows are prepended to the embedded
//! text prompt and the result runs through a small pre-norm transformer
//! backbone. The backbone is pretrained on report text and frozen; only the
//! prompt encoder and the auxiliary label heads on `h` are trained.

mod forward;
mod generate;
mod pretrain;
mod state;

pub use forward::{
    build_encoder_input, encode_visual_prefix, forward_loss, sample_loss, BatchLoss, Bound, LossParts,
    SampleInput, TruncationCounter,
};
pub use generate::{generate, generate_from_prefix, generate_ids, Decoding};
pub use pretrain::{corrupt_tokens, init_backbone_pretrain, PretrainConfig, PretrainReport};
pub use state::{Layout, ModelState, ParamGroup, ParamSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which side of the backbone receives the visual prefix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrefixSide {
    /// Prepended to the encoder input (ahead of the prompt tokens).
    #[default]
    Encoder,
    /// Prepended to the decoder input; the encoder sees only the prompt.
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuxWeights {
    pub organ: f64,
    pub sample: f64,
    pub finding: f64,
}

impl Default for AuxWeights {
    fn default() -> Self {
        AuxWeights {
            organ: 0.1,
            sample: 0.1,
            finding: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Visual feature dimension.
    pub d_v: usize,
    /// Prompt-encoder hidden width.
    pub hidden: usize,
    /// Number of prefix rows.
    pub prefix_len: usize,
    /// Backbone embedding width.
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    /// Maximum number of decoder target tokens (generation stops here too).
    pub max_len: usize,
    pub prompt_text: String,
    pub prompt_dropout: f64,
    pub n_organs: usize,
    pub n_sample_types: usize,
    pub n_findings: usize,
    pub aux_weights: AuxWeights,
    pub prefix_side: PrefixSide,
    /// 1 selects greedy decoding.
    pub beam_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_v: 768,
            hidden: 512,
            prefix_len: 8,
            d_model: 64,
            enc_layers: 2,
            dec_layers: 2,
            n_heads: 4,
            ffn_dim: 128,
            vocab_size: 0,
            max_len: 96,
            prompt_text: "Pathology report:".to_string(),
            prompt_dropout: 0.2,
            n_organs: 7,
            n_sample_types: 0,
            n_findings: 0,
            aux_weights: AuxWeights::default(),
            prefix_side: PrefixSide::Encoder,
            beam_width: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.prefix_len < 1 {
            return err("prefix_len must be at least 1".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return err(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !(0.0..=1.0).contains(&self.prompt_dropout) {
            return err(format!("prompt_dropout {} outside [0, 1]", self.prompt_dropout));
        }
        for (name, v) in [
            ("d_v", self.d_v),
            ("hidden", self.hidden),
            ("d_model", self.d_model),
            ("ffn_dim", self.ffn_dim),
            ("max_len", self.max_len),
            ("n_organs", self.n_organs),
            ("n_sample_types", self.n_sample_types),
            ("n_findings", self.n_findings),
            ("beam_width", self.beam_width),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if self.vocab_size <= crate::tokenizer::N_SPECIAL {
            return err(format!("vocab_size {} has no regular tokens", self.vocab_size));
        }
        Ok(())
    }
}


#[cfg(test)]
mod tests;
