use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ScopePolicy;
use crate::error::{io_err, Error, Result};
use crate::model::{ComponentTag, Model, ParamId};
use crate::scalar::Scalar;

/// Binary keep-mask over one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    keep: Vec<bool>,
}

impl Mask {
    pub fn ones(shape: &[usize]) -> Self {
        Mask {
            shape: shape.to_vec(),
            keep: vec![true; shape.iter().product()],
        }
    }

    pub fn from_keep(shape: &[usize], keep: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != keep.len() {
            return Err(Error::Contract(format!(
                "mask of {} entries does not fit shape {shape:?}",
                keep.len()
            )));
        }
        Ok(Mask {
            shape: shape.to_vec(),
            keep,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn numel(&self) -> usize {
        self.keep.len()
    }

    pub fn num_pruned(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    pub fn density(&self) -> f64 {
        if self.keep.is_empty() {
            return 1.0;
        }
        1.0 - self.num_pruned() as f64 / self.numel() as f64
    }

    pub(crate) fn prune(&mut self, index: usize) {
        self.keep[index] = false;
    }

    /// Packs keep bits LSB-first into bytes.
    pub fn to_packed(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.keep.len().div_ceil(8)];
        for (i, &k) in self.keep.iter().enumerate() {
            if k {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn from_packed(shape: &[usize], bytes: &[u8]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if bytes.len() != n.div_ceil(8) {
            return Err(Error::Checkpoint(format!(
                "packed mask has {} bytes, expected {} for shape {shape:?}",
                bytes.len(),
                n.div_ceil(8)
            )));
        }
        let keep = (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
        Ok(Mask {
            shape: shape.to_vec(),
            keep,
        })
    }
}

/// Masks for the prunable parameters of one model.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskSet {
    masks: BTreeMap<ParamId, Mask>,
}

impl MaskSet {
    /// All-ones masks for exactly the tensors selected by `policy`.
    pub fn dense<T: Scalar>(model: &Model<T>, policy: &ScopePolicy) -> Self {
        let masks = model
            .parameters_by_component(&policy.tag_list())
            .into_iter()
            .map(|id| (id, Mask::ones(model.param(id).value.shape())))
            .collect();
        MaskSet { masks }
    }

    pub fn from_masks(masks: BTreeMap<ParamId, Mask>) -> Self {
        MaskSet { masks }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mask> {
        self.masks.get(&id)
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> Option<&mut Mask> {
        self.masks.get_mut(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.masks.contains_key(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mask)> {
        self.masks.iter().map(|(&k, v)| (k, v))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.masks.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.masks.values().map(Mask::numel).sum()
    }

    pub fn num_pruned(&self) -> usize {
        self.masks.values().map(Mask::num_pruned).sum()
    }

    /// Fraction of masked entries over every tensor in the set.
    pub fn sparsity(&self) -> f64 {
        let n = self.numel();
        if n == 0 {
            return 0.0;
        }
        self.num_pruned() as f64 / n as f64
    }

    /// Sparsity restricted to tensors whose tag is in `tags`.
    pub fn sparsity_over<T: Scalar>(&self, model: &Model<T>, tags: &[ComponentTag]) -> f64 {
        let (mut n, mut z) = (0usize, 0usize);
        for (id, m) in self.iter() {
            if tags.contains(&model.param(id).tag) {
                n += m.numel();
                z += m.num_pruned();
            }
        }
        if n == 0 {
            0.0
        } else {
            z as f64 / n as f64
        }
    }

    /// True when every entry masked in `self` is also masked in `later`.
    pub fn is_refined_by(&self, later: &MaskSet) -> bool {
        self.masks.iter().all(|(id, m)| match later.masks.get(id) {
            Some(l) => m.keep.iter().zip(&l.keep).all(|(&a, &b)| a || !b),
            None => false,
        })
    }
}

/// Manifest stored next to bit-packed mask files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskManifest {
    pub policy: ScopePolicy,
    pub step: usize,
    pub achieved_sparsity: f64,
    pub masks: Vec<MaskEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskEntry {
    pub param: ParamId,
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

/// Writes `manifest.json` plus one `<name>.mask` file per tensor into `dir`.
pub fn save_masks<T: Scalar>(
    dir: &Path,
    model: &Model<T>,
    masks: &MaskSet,
    policy: &ScopePolicy,
    step: usize,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::new();
    for (id, m) in masks.iter() {
        let name = model.param(id).name.clone();
        let file = format!("{name}.mask");
        let path = dir.join(&file);
        fs::write(&path, m.to_packed()).map_err(io_err(&path))?;
        entries.push(MaskEntry {
            param: id,
            name,
            shape: m.shape().to_vec(),
            file,
        });
    }
    let manifest = MaskManifest {
        policy: policy.clone(),
        step,
        achieved_sparsity: masks.sparsity(),
        masks: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(())
}

pub fn load_masks(dir: &Path) -> Result<(MaskSet, MaskManifest)> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: MaskManifest = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut masks = BTreeMap::new();
    for e in &manifest.masks {
        let p = dir.join(&e.file);
        let bytes = fs::read(&p).map_err(io_err(&p))?;
        masks.insert(e.param, Mask::from_packed(&e.shape, &bytes)?);
    }
    Ok((MaskSet { masks }, manifest))
}
