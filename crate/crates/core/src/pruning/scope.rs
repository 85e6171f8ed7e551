use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::model::ComponentTag;

/// How a sparsity target is distributed over the in-scope tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    /// One ranking over every in-scope weight.
    #[default]
    Global,
    /// Each tensor pruned to the same fraction.
    PerLayerUniform,
}

/// Which parameter tensors may be pruned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScopePolicy {
    pub tags: BTreeSet<ComponentTag>,
    #[serde(default)]
    pub granularity: Granularity,
}

impl Default for ScopePolicy {
    fn default() -> Self {
        Self::encoder_only()
    }
}

impl ScopePolicy {
    /// Encoder linear weights only; embeddings and head stay dense.
    pub fn encoder_only() -> Self {
        ScopePolicy {
            tags: [ComponentTag::EncoderLinear].into_iter().collect(),
            granularity: Granularity::Global,
        }
    }

    /// Embeddings, encoder linear weights and the classification head.
    pub fn smc_style() -> Self {
        ScopePolicy {
            tags: [
                ComponentTag::TokenEmbedding,
                ComponentTag::PositionEmbedding,
                ComponentTag::SegmentEmbedding,
                ComponentTag::EncoderLinear,
                ComponentTag::ClassificationHead,
            ]
            .into_iter()
            .collect(),
            granularity: Granularity::Global,
        }
    }

    pub fn with_granularity(mut self, granularity: Granularity) -> Self {
        self.granularity = granularity;
        self
    }

    pub fn includes(&self, tag: ComponentTag) -> bool {
        self.tags.contains(&tag)
    }

    pub fn tag_list(&self) -> Vec<ComponentTag> {
        self.tags.iter().copied().collect()
    }

    /// Short name used in reports: `encoder`, `all`, or a `+`-joined tag list.
    pub fn label(&self) -> String {
        if self.tags == Self::encoder_only().tags {
            "encoder".into()
        } else if self.tags == Self::smc_style().tags {
            "all".into()
        } else {
            self.tags
                .iter()
                .map(|t| serde_json::to_value(t).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default())
                .collect::<Vec<_>>()
                .join("+")
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        match label {
            "encoder" | "encoder-only" => Some(Self::encoder_only()),
            "all" | "smc" | "smc-style" => Some(Self::smc_style()),
            _ => None,
        }
    }
}
