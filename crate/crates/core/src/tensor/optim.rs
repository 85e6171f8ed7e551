use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with one moment slot per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Adam {
            cfg,
            first: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            steps: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Advances the shared step counter; call once before updating the
    /// tensors of an optimizer step.
    pub fn begin_step(&mut self) {
        self.steps += 1;
    }

    /// Updates one tensor in place.
    pub fn update(&mut self, slot: usize, param: &mut [T], grad: &[T], lr: f64) {
        let c = &self.cfg;
        let t = self.steps.max(1) as i32;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let one = T::one();
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let lr_t = T::of(lr);
        let eps = T::of(c.eps);
        let wd = T::of(c.weight_decay);
        let m = &mut self.first[slot];
        let v = &mut self.second[slot];
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            let mut step = mhat / (vhat.sqrt() + eps);
            if c.weight_decay != 0.0 {
                step += wd * param[i];
            }
            param[i] -= lr_t * step;
        }
    }

    /// Zeroes both moments of the entries where `keep` is false.
    pub fn reset_entries(&mut self, slot: usize, keep: &[bool]) {
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                self.first[slot][i] = T::zero();
                self.second[slot][i] = T::zero();
            }
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}
