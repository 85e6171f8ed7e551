//! Synthetic sequence-classification task.
//!
//! Each sequence starts with a `[CLS]` token followed by content tokens, some
//! of which are a designated marker. The label is
//! `(markers in the first half of the content + position of the first marker) mod num_labels`,
//! so it depends on token identity as well as token position. Segment ids
//! split the content into its two halves.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;

pub const CLS_TOKEN: usize = 0;
pub const MARKER_TOKEN: usize = 1;
const FIRST_PLAIN_TOKEN: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub vocab_size: usize,
    /// Total length including the leading `[CLS]`.
    pub sequence_length: usize,
    pub num_labels: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub seed: u64,
    /// Probability that a content token is the marker.
    #[serde(default = "default_marker_prob")]
    pub marker_prob: f64,
}

fn default_marker_prob() -> f64 {
    0.2
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            vocab_size: 64,
            sequence_length: 16,
            num_labels: 4,
            train_size: 8000,
            eval_size: 2000,
            seed: 1234,
            marker_prob: default_marker_prob(),
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= FIRST_PLAIN_TOKEN {
            return Err(Error::Config(format!("vocab_size {} leaves no plain tokens", self.vocab_size)));
        }
        if self.sequence_length < 3 {
            return Err(Error::Config("sequence_length must be at least 3".into()));
        }
        if self.num_labels < 2 {
            return Err(Error::Config("num_labels must be at least 2".into()));
        }
        if self.train_size == 0 || self.eval_size == 0 {
            return Err(Error::Config("train_size and eval_size must be positive".into()));
        }
        if !(self.marker_prob > 0.0 && self.marker_prob < 1.0) {
            return Err(Error::Config(format!("marker_prob {} not in (0, 1)", self.marker_prob)));
        }
        Ok(())
    }

    fn content_len(&self) -> usize {
        self.sequence_length - 1
    }

    fn half(&self) -> usize {
        self.content_len() / 2
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub segments: Vec<usize>,
    pub label: usize,
}

/// Label of a full token sequence (including `[CLS]`).
pub fn label_of(spec: &TaskSpec, tokens: &[usize]) -> usize {
    let content = &tokens[1..];
    let count = content[..spec.half()].iter().filter(|&&t| t == MARKER_TOKEN).count();
    let first = content
        .iter()
        .position(|&t| t == MARKER_TOKEN)
        .unwrap_or(content.len());
    (count + first) % spec.num_labels
}

fn segments_for(spec: &TaskSpec) -> Vec<usize> {
    (0..spec.sequence_length)
        .map(|i| if i == 0 || i - 1 < spec.half() { 0 } else { 1 })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seq_len: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut token_ids = Vec::with_capacity(indices.len() * self.seq_len);
        let mut segment_ids = Vec::with_capacity(indices.len() * self.seq_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let e = &self.examples[i];
            token_ids.extend_from_slice(&e.tokens);
            segment_ids.extend_from_slice(&e.segments);
            labels.push(e.label);
        }
        Batch {
            batch_size: indices.len(),
            seq_len: self.seq_len,
            token_ids,
            segment_ids,
            labels,
        }
    }

    /// Consecutive batches in dataset order; the last one may be short.
    pub fn batches(&self, batch_size: usize) -> Vec<Batch> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1)).map(|c| self.batch(c)).collect()
    }

    /// Full batches of a seeded permutation; a trailing remainder is dropped.
    pub fn epoch_batches(&self, batch_size: usize, seed: u64) -> Vec<Batch> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.chunks_exact(batch_size.max(1)).map(|c| self.batch(c)).collect()
    }

    pub fn label_counts(&self, num_labels: usize) -> Vec<usize> {
        let mut counts = vec![0; num_labels];
        for e in &self.examples {
            counts[e.label] += 1;
        }
        counts
    }
}

/// Deterministic train and eval sets with no sequence in common.
pub fn gen_task(spec: &TaskSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let segments = segments_for(spec);
    let total = spec.train_size + spec.eval_size;
    let mut seen = HashSet::with_capacity(total);
    let mut all = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while all.len() < total {
        attempts += 1;
        if attempts > 100 * total {
            return Err(Error::Config(
                "could not draw enough distinct sequences; enlarge vocab or sequence length".into(),
            ));
        }
        let mut tokens = Vec::with_capacity(spec.sequence_length);
        tokens.push(CLS_TOKEN);
        for _ in 0..spec.content_len() {
            let t = if rng.gen::<f64>() < spec.marker_prob {
                MARKER_TOKEN
            } else {
                rng.gen_range(FIRST_PLAIN_TOKEN..spec.vocab_size)
            };
            tokens.push(t);
        }
        if !seen.insert(tokens.clone()) {
            continue;
        }
        let label = label_of(spec, &tokens);
        all.push(Example {
            tokens,
            segments: segments.clone(),
            label,
        });
    }
    let eval = all.split_off(spec.train_size);
    Ok((
        Dataset {
            seq_len: spec.sequence_length,
            examples: all,
        },
        Dataset {
            seq_len: spec.sequence_length,
            examples: eval,
        },
    ))
}
