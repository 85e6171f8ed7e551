use std::collections::BTreeMap;

use super::MaskSet;
use crate::distill::Objective;
use crate::error::{Error, Result};
use crate::model::{Batch, Mode, Model, ParamId};
use crate::scalar::Scalar;
use crate::tensor::Graph;

/// Added to every diagonal Fisher entry before scoring so that all-zero
/// gradients still yield a magnitude-ordered ranking.
pub const FISHER_DAMPENING: f64 = 1e-8;

/// Per-weight pruning scores for the tensors of a [`MaskSet`].
///
/// Entries already masked carry `f64::NEG_INFINITY` so they always rank
/// lowest and stay pruned.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Saliency {
    scores: BTreeMap<ParamId, Vec<f64>>,
}

impl Saliency {
    pub fn new(scores: BTreeMap<ParamId, Vec<f64>>) -> Self {
        Saliency { scores }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.scores.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.scores.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    /// Replaces the scores of masked entries with the sentinel.
    pub fn sentinel_masked(mut self, masks: &MaskSet) -> Self {
        for (id, s) in self.scores.iter_mut() {
            if let Some(m) = masks.get(*id) {
                for (v, &k) in s.iter_mut().zip(m.keep()) {
                    if !k {
                        *v = f64::NEG_INFINITY;
                    }
                }
            }
        }
        self
    }
}

/// `|w|` for every in-scope weight.
pub fn magnitude_scores<T: Scalar>(model: &Model<T>, masks: &MaskSet) -> Saliency {
    let scores = masks
        .ids()
        .into_iter()
        .map(|id| {
            let s = model.param(id).value.data().iter().map(|w| w.as_f64().abs()).collect();
            (id, s)
        })
        .collect();
    Saliency::new(scores).sentinel_masked(masks)
}

/// Diagonal empirical Fisher: the per-entry mean over `num_samples` of the
/// squared per-sample gradient.
///
/// `sample_grads(i)` returns the gradient of the loss on sample `i`, one
/// vector per tensor with lengths `sizes`.
pub fn diagonal_fisher<F>(sizes: &[usize], num_samples: usize, mut sample_grads: F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(usize) -> Result<Vec<Vec<f64>>>,
{
    if num_samples == 0 {
        return Err(Error::Contract("fisher estimate needs at least one sample".into()));
    }
    let mut acc: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    for i in 0..num_samples {
        let grads = sample_grads(i)?;
        if grads.len() != sizes.len() {
            return Err(Error::Contract(format!(
                "sample gradient has {} tensors, expected {}",
                grads.len(),
                sizes.len()
            )));
        }
        for (a, g) in acc.iter_mut().zip(&grads) {
            if a.len() != g.len() {
                return Err(Error::Contract("sample gradient size mismatch".into()));
            }
            for (x, &v) in a.iter_mut().zip(g) {
                *x += v * v;
            }
        }
    }
    let inv = 1.0 / num_samples as f64;
    for a in acc.iter_mut() {
        for x in a.iter_mut() {
            *x *= inv;
        }
    }
    Ok(acc)
}

/// Optimal-brain-damage saliency `w² · (F + dampening) / 2`.
pub fn obd_scores(weights: &[f64], fisher: &[f64], dampening: f64) -> Vec<f64> {
    weights
        .iter()
        .zip(fisher)
        .map(|(&w, &f)| w * w * (f + dampening) / 2.0)
        .collect()
}

/// Diagonal-Fisher saliency of the in-scope weights of `model`.
///
/// Samples are taken in order from `data`, one example at a time, cycling
/// when `num_samples` exceeds the number of examples. The model is run in
/// eval mode.
pub fn fisher_scores<T: Scalar>(
    model: &Model<T>,
    masks: &MaskSet,
    data: &[Batch],
    objective: &Objective<'_, T>,
    num_samples: usize,
    dampening: f64,
) -> Result<Saliency> {
    let examples: Vec<(usize, usize)> = data
        .iter()
        .enumerate()
        .flat_map(|(b, batch)| (0..batch.batch_size).map(move |i| (b, i)))
        .collect();
    if examples.is_empty() {
        return Err(Error::Contract("fisher scoring needs a non-empty data set".into()));
    }
    let ids = masks.ids();
    let sizes: Vec<usize> = ids.iter().map(|&id| model.param(id).value.numel()).collect();
    let fisher = diagonal_fisher(&sizes, num_samples, |i| {
        let (b, row) = examples[i % examples.len()];
        let single = single_example(&data[b], row);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &single, Mode::Eval)?;
        let loss = objective.loss(&mut g, out.logits, &single)?;
        let grads = g.backward(loss)?;
        Ok(ids
            .iter()
            .map(|&id| match grads.data(out.param_nodes[id]) {
                Some(d) => d.iter().map(|v| v.as_f64()).collect(),
                None => vec![0.0; model.param(id).value.numel()],
            })
            .collect())
    })?;
    let scores = ids
        .iter()
        .zip(&fisher)
        .map(|(&id, f)| {
            let w: Vec<f64> = model.param(id).value.data().iter().map(|v| v.as_f64()).collect();
            (id, obd_scores(&w, f, dampening))
        })
        .collect();
    Ok(Saliency::new(scores).sentinel_masked(masks))
}

fn single_example(batch: &Batch, row: usize) -> Batch {
    let s = batch.seq_len;
    Batch {
        batch_size: 1,
        seq_len: s,
        token_ids: batch.token_ids[row * s..(row + 1) * s].to_vec(),
        segment_ids: batch.segment_ids[row * s..(row + 1) * s].to_vec(),
        labels: vec![batch.labels[row]],
    }
}
