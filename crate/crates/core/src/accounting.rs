//! Parameter and FLOP accounting per model component.
//!
//! Only weights of linear layers and embedding tables are counted; biases,
//! layer norms and activations are ignored. One multiply-accumulate is two
//! FLOPs, counted per token for a forward pass, and embedding lookups cost
//! nothing. Attention score and context products carry no weights and are
//! left out.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{ArchitectureSpec, ComponentGroup, ComponentTag, Model};
use crate::pruning::MaskSet;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentReport {
    pub component: ComponentGroup,
    pub param_count: u64,
    pub flops_per_token: u64,
    pub fraction_of_total_params: f64,
    pub fraction_of_total_flops: f64,
}

pub fn param_count(spec: &ArchitectureSpec, group: ComponentGroup) -> u64 {
    let h = spec.hidden_dim as u64;
    match group {
        ComponentGroup::Embeddings => {
            (spec.vocab_size + spec.max_positions + spec.num_segments) as u64 * h
        }
        ComponentGroup::Encoder => spec.num_layers as u64 * spec.encoder_layer_weights(),
        ComponentGroup::Head => h * spec.num_labels as u64,
    }
}

pub fn flop_count(spec: &ArchitectureSpec, group: ComponentGroup) -> u64 {
    match group {
        ComponentGroup::Embeddings => 0,
        ComponentGroup::Encoder | ComponentGroup::Head => 2 * param_count(spec, group),
    }
}

/// Table of the three components with their shares of the totals.
pub fn component_table(spec: &ArchitectureSpec) -> Vec<ComponentReport> {
    let params: Vec<u64> = ComponentGroup::ALL.iter().map(|&g| param_count(spec, g)).collect();
    let flops: Vec<u64> = ComponentGroup::ALL.iter().map(|&g| flop_count(spec, g)).collect();
    let tp: u64 = params.iter().sum();
    let tf: u64 = flops.iter().sum();
    let frac = |x: u64, t: u64| if t == 0 { 0.0 } else { x as f64 / t as f64 };
    ComponentGroup::ALL
        .iter()
        .enumerate()
        .map(|(i, &g)| ComponentReport {
            component: g,
            param_count: params[i],
            flops_per_token: flops[i],
            fraction_of_total_params: frac(params[i], tp),
            fraction_of_total_flops: frac(flops[i], tf),
        })
        .collect()
}

pub fn table_csv(rows: &[ComponentReport]) -> String {
    let mut out = String::from("component,param_count,fraction_of_total_params,flops_per_token,fraction_of_total_flops\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.component.name(),
            r.param_count,
            r.fraction_of_total_params,
            r.flops_per_token,
            r.fraction_of_total_flops
        );
    }
    out
}

fn millions(x: u64) -> String {
    let m = x as f64 / 1e6;
    if x == 0 {
        "0".into()
    } else if m < 0.01 {
        format!("{m:.3}M")
    } else {
        format!("{m:.1}M")
    }
}

pub fn table_text(rows: &[ComponentReport]) -> String {
    let mut out = format!(
        "{:<12} {:>12} {:>10} {:>12} {:>10}\n",
        "component", "params", "% params", "FLOPs/token", "% FLOPs"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<12} {:>12} {:>9.1}% {:>12} {:>9.1}%",
            r.component.name(),
            millions(r.param_count),
            100.0 * r.fraction_of_total_params,
            millions(r.flops_per_token),
            100.0 * r.fraction_of_total_flops
        );
    }
    out
}

/// Density of one component group under a set of masks.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupDensity {
    pub component: ComponentGroup,
    pub weights: u64,
    pub nonzero_mask: u64,
    pub density: f64,
    pub effective_flops_per_token: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityReport {
    pub groups: Vec<GroupDensity>,
    /// Masked encoder-linear weights over all encoder-linear weights.
    pub encoder_sparsity: f64,
}

impl SparsityReport {
    pub fn density(&self, group: ComponentGroup) -> f64 {
        self.groups
            .iter()
            .find(|g| g.component == group)
            .map(|g| g.density)
            .unwrap_or(1.0)
    }
}

/// Per-group density of `model` under `masks`; unmasked tensors count as
/// dense.
pub fn sparsity_report<T: Scalar>(model: &Model<T>, masks: &MaskSet) -> Result<SparsityReport> {
    for (id, m) in masks.iter() {
        let p = model
            .params()
            .get(id)
            .ok_or_else(|| Error::Contract(format!("mask for unknown parameter {id}")))?;
        if p.value.shape() != m.shape() {
            return Err(Error::Contract(format!(
                "mask shape {:?} does not match parameter {} shape {:?}",
                m.shape(),
                p.name,
                p.value.shape()
            )));
        }
    }
    let mut groups = Vec::new();
    let mut encoder_sparsity = 0.0;
    for group in ComponentGroup::ALL {
        let tags: &[ComponentTag] = group.tags();
        let (mut n, mut kept) = (0u64, 0u64);
        for id in model.parameters_by_component(tags) {
            let numel = model.param(id).value.numel() as u64;
            n += numel;
            kept += match masks.get(id) {
                Some(m) => (m.numel() - m.num_pruned()) as u64,
                None => numel,
            };
        }
        let density = if n == 0 { 1.0 } else { kept as f64 / n as f64 };
        if group == ComponentGroup::Encoder {
            encoder_sparsity = 1.0 - density;
        }
        groups.push(GroupDensity {
            component: group,
            weights: n,
            nonzero_mask: kept,
            density,
            effective_flops_per_token: flop_count(model.spec(), group) as f64 * density,
        });
    }
    Ok(SparsityReport {
        groups,
        encoder_sparsity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_encoder_counts_by_hand() {
        let spec = ArchitectureSpec::tiny();
        assert_eq!(param_count(&spec, ComponentGroup::Encoder), 2 * (4 * 32 * 32 + 2 * 32 * 64));
        assert_eq!(param_count(&spec, ComponentGroup::Encoder), 16384);
        assert_eq!(flop_count(&spec, ComponentGroup::Encoder), 32768);
        assert_eq!(flop_count(&spec, ComponentGroup::Embeddings), 0);
    }

    #[test]
    fn fractions_sum_to_one() {
        for spec in [ArchitectureSpec::tiny(), ArchitectureSpec::bert_base(), ArchitectureSpec::roberta_large()] {
            let t = component_table(&spec);
            let p: f64 = t.iter().map(|r| r.fraction_of_total_params).sum();
            let f: f64 = t.iter().map(|r| r.fraction_of_total_flops).sum();
            assert!((p - 1.0).abs() < 1e-9 && (f - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn csv_has_header_and_three_rows() {
        let csv = table_csv(&component_table(&ArchitectureSpec::tiny()));
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("component,"));
    }
}
