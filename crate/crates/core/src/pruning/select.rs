use serde::{Deserialize, Serialize};

use super::{fisher_scores, magnitude_scores, Granularity, MaskSet, Saliency, ScopePolicy, FISHER_DAMPENING};
use crate::distill::Objective;
use crate::error::{Error, Result};
use crate::model::{Batch, Model, ParamId};
use crate::scalar::Scalar;
use crate::tensor::TensorError;

/// Weight-scoring rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Pruner {
    Magnitude,
    /// Diagonal empirical-Fisher (optimal brain damage) saliency. A
    /// first-order-cost stand-in for blockwise second-order pruners.
    DiagonalFisher {
        num_samples: usize,
        #[serde(default = "default_dampening")]
        dampening: f64,
    },
}

fn default_dampening() -> f64 {
    FISHER_DAMPENING
}

impl Pruner {
    pub fn name(&self) -> &'static str {
        match self {
            Pruner::Magnitude => "magnitude",
            Pruner::DiagonalFisher { .. } => "diagonal-fisher",
        }
    }

    pub fn scores<T: Scalar>(
        &self,
        model: &Model<T>,
        masks: &MaskSet,
        data: &[Batch],
        objective: &Objective<'_, T>,
    ) -> Result<Saliency> {
        match *self {
            Pruner::Magnitude => Ok(magnitude_scores(model, masks)),
            Pruner::DiagonalFisher { num_samples, dampening } => {
                fisher_scores(model, masks, data, objective, num_samples, dampening)
            }
        }
    }
}

/// Number of weights that must be masked out of `numel` to reach `target`.
pub fn target_count(target: f64, numel: usize) -> usize {
    ((target * numel as f64) + 1e-9).floor().min(numel as f64) as usize
}

/// Masks the lowest-scoring weights until the in-scope sparsity reaches
/// `⌊target·N⌋ / N`.
///
/// Masked weights stay masked. Ties are broken by `(parameter id, flat
/// index)` ascending.
pub fn select_prune(scores: &Saliency, masks: &MaskSet, target: f64, policy: &ScopePolicy) -> Result<MaskSet> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Schedule(format!("target sparsity {target} outside [0, 1]")));
    }
    for (id, m) in masks.iter() {
        let s = scores
            .get(id)
            .ok_or_else(|| Error::Contract(format!("no scores for parameter {id}")))?;
        if s.len() != m.numel() {
            return Err(Error::Contract(format!(
                "scores for parameter {id} have {} entries, mask has {}",
                s.len(),
                m.numel()
            )));
        }
    }
    let total = masks.numel();
    let want = target_count(target, total);
    let current = masks.num_pruned();
    if want < current {
        return Err(Error::Schedule(format!(
            "target sparsity {target} is below the current sparsity {}",
            masks.sparsity()
        )));
    }
    let mut out = masks.clone();
    match policy.granularity {
        Granularity::Global => {
            let mut candidates: Vec<(f64, ParamId, usize)> = Vec::with_capacity(total - current);
            for (id, m) in masks.iter() {
                let s = scores.get(id).unwrap();
                for (i, (&k, &v)) in m.keep().iter().zip(s).enumerate() {
                    if k {
                        candidates.push((v, id, i));
                    }
                }
            }
            prune_lowest(&mut out, &mut candidates, want - current);
        }
        Granularity::PerLayerUniform => {
            for (id, count) in per_tensor_counts(masks, target, want) {
                let m = masks.get(id).unwrap();
                let s = scores.get(id).unwrap();
                let mut candidates: Vec<(f64, ParamId, usize)> = m
                    .keep()
                    .iter()
                    .zip(s)
                    .enumerate()
                    .filter(|(_, (&k, _))| k)
                    .map(|(i, (_, &v))| (v, id, i))
                    .collect();
                let extra = count.saturating_sub(m.num_pruned());
                prune_lowest(&mut out, &mut candidates, extra);
            }
        }
    }
    Ok(out)
}

fn prune_lowest(out: &mut MaskSet, candidates: &mut [(f64, ParamId, usize)], count: usize) {
    if count == 0 {
        return;
    }
    let cmp = |a: &(f64, ParamId, usize), b: &(f64, ParamId, usize)| {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    };
    let count = count.min(candidates.len());
    if count < candidates.len() {
        candidates.select_nth_unstable_by(count, cmp);
    }
    for &(_, id, i) in &candidates[..count] {
        out.get_mut(id).expect("candidate from mask set").prune(i);
    }
}

/// Splits `want` over tensors proportionally to their size (largest
/// remainder), never below what a tensor already has masked.
fn per_tensor_counts(masks: &MaskSet, target: f64, want: usize) -> Vec<(ParamId, usize)> {
    let mut alloc: Vec<(ParamId, usize, f64)> = masks
        .iter()
        .map(|(id, m)| {
            let exact = target * m.numel() as f64;
            let base = target_count(target, m.numel());
            (id, base, exact - base as f64)
        })
        .collect();
    let assigned: usize = alloc.iter().map(|a| a.1).sum();
    let mut order: Vec<usize> = (0..alloc.len()).collect();
    order.sort_by(|&a, &b| alloc[b].2.total_cmp(&alloc[a].2).then(alloc[a].0.cmp(&alloc[b].0)));
    for &i in order.iter().take(want.saturating_sub(assigned)) {
        alloc[i].1 += 1;
    }
    alloc
        .into_iter()
        .map(|(id, n, _)| (id, n.max(masks.get(id).unwrap().num_pruned())))
        .collect()
}

/// Sets masked weights to exactly zero.
pub fn apply_masks<T: Scalar>(model: &mut Model<T>, masks: &MaskSet) -> Result<()> {
    for (id, m) in masks.iter() {
        if id >= model.params().len() {
            return Err(Error::Contract(format!("mask for unknown parameter {id}")));
        }
        let p = model.param_mut(id);
        if p.value.shape() != m.shape() {
            return Err(TensorError::Shape {
                op: "apply_masks",
                lhs: p.value.shape().to_vec(),
                rhs: m.shape().to_vec(),
            }
            .into());
        }
        for (w, &k) in p.value.data_mut().iter_mut().zip(m.keep()) {
            if !k {
                *w = T::zero();
            }
        }
    }
    Ok(())
}

/// Prunes a trained model to `target` in a single selection from dense
/// masks, without any retraining, and applies the result.
pub fn one_shot_prune<T: Scalar>(
    model: &mut Model<T>,
    pruner: &Pruner,
    target: f64,
    policy: &ScopePolicy,
    data: &[Batch],
    objective: &Objective<'_, T>,
) -> Result<MaskSet> {
    let dense = MaskSet::dense(model, policy);
    let scores = pruner.scores(model, &dense, data, objective)?;
    let masks = select_prune(&scores, &dense, target, policy)?;
    apply_masks(model, &masks)?;
    Ok(masks)
}
