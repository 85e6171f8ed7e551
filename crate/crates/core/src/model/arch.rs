use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Role of a parameter tensor within the transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComponentTag {
    TokenEmbedding,
    PositionEmbedding,
    SegmentEmbedding,
    EncoderLinear,
    LayerNormParam,
    ClassificationHead,
    Bias,
}

impl ComponentTag {
    pub const ALL: [ComponentTag; 7] = [
        ComponentTag::TokenEmbedding,
        ComponentTag::PositionEmbedding,
        ComponentTag::SegmentEmbedding,
        ComponentTag::EncoderLinear,
        ComponentTag::LayerNormParam,
        ComponentTag::ClassificationHead,
        ComponentTag::Bias,
    ];

    /// Accounting group, for tags that carry linear or embedding weights.
    pub fn group(self) -> Option<ComponentGroup> {
        match self {
            ComponentTag::TokenEmbedding
            | ComponentTag::PositionEmbedding
            | ComponentTag::SegmentEmbedding => Some(ComponentGroup::Embeddings),
            ComponentTag::EncoderLinear => Some(ComponentGroup::Encoder),
            ComponentTag::ClassificationHead => Some(ComponentGroup::Head),
            ComponentTag::LayerNormParam | ComponentTag::Bias => None,
        }
    }
}

/// The three top-level components a model is accounted by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComponentGroup {
    Embeddings,
    Encoder,
    Head,
}

impl ComponentGroup {
    pub const ALL: [ComponentGroup; 3] = [
        ComponentGroup::Embeddings,
        ComponentGroup::Encoder,
        ComponentGroup::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ComponentGroup::Embeddings => "embeddings",
            ComponentGroup::Encoder => "encoder",
            ComponentGroup::Head => "head",
        }
    }

    pub fn tags(self) -> &'static [ComponentTag] {
        match self {
            ComponentGroup::Embeddings => &[
                ComponentTag::TokenEmbedding,
                ComponentTag::PositionEmbedding,
                ComponentTag::SegmentEmbedding,
            ],
            ComponentGroup::Encoder => &[ComponentTag::EncoderLinear],
            ComponentGroup::Head => &[ComponentTag::ClassificationHead],
        }
    }
}

/// Shape of a transformer-encoder classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub num_segments: usize,
    pub num_labels: usize,
}

impl ArchitectureSpec {
    /// Desk-scale model used for all training experiments.
    pub fn tiny() -> Self {
        ArchitectureSpec {
            vocab_size: 64,
            hidden_dim: 32,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 64,
            max_positions: 16,
            num_segments: 2,
            num_labels: 4,
        }
    }

    /// BERT-base shape (accounting only).
    pub fn bert_base() -> Self {
        ArchitectureSpec {
            vocab_size: 30522,
            hidden_dim: 768,
            num_layers: 12,
            num_heads: 12,
            ffn_dim: 3072,
            max_positions: 512,
            num_segments: 2,
            num_labels: 2,
        }
    }

    /// RoBERTa-large with a single-logit multiple-choice scoring head
    /// (accounting only).
    pub fn roberta_large() -> Self {
        ArchitectureSpec {
            vocab_size: 50265,
            hidden_dim: 1024,
            num_layers: 24,
            num_heads: 16,
            ffn_dim: 4096,
            max_positions: 514,
            num_segments: 1,
            num_labels: 1,
        }
    }

    pub fn preset(name: &str) -> Result<Self, Error> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "bert-base" => Ok(Self::bert_base()),
            "roberta-large" => Ok(Self::roberta_large()),
            other => Err(Error::Config(format!(
                "unknown architecture preset `{other}` (expected tiny, bert-base or roberta-large)"
            ))),
        }
    }

    pub const PRESETS: [&'static str; 3] = ["tiny", "bert-base", "roberta-large"];

    pub fn validate(&self) -> Result<(), Error> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_positions", self.max_positions),
            ("num_segments", self.num_segments),
            ("num_labels", self.num_labels),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Linear weights in one encoder layer: Q, K, V, output, FFN up and down.
    pub fn encoder_layer_weights(&self) -> u64 {
        let h = self.hidden_dim as u64;
        4 * h * h + 2 * h * self.ffn_dim as u64
    }
}
