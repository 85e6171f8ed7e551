//! Sparsity schedules, learning-rate schedules, and the pruning timetable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SparsityKind {
    Linear,
    Cubic,
}

/// Sparsity trajectory over `num_pruning_steps` pruning events.
///
/// A positive `s_init` makes the first event a large jump (the accelerated
/// variant); `s_init = 0` is the conventional schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsityScheduleSpec {
    pub kind: SparsityKind,
    pub s_init: f64,
    pub s_final: f64,
    pub num_pruning_steps: usize,
}

impl SparsityScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.s_init) {
            return Err(Error::Config(format!("s_init {} not in [0, 1)", self.s_init)));
        }
        if !(self.s_final > 0.0 && self.s_final <= 1.0) {
            return Err(Error::Config(format!("s_final {} not in (0, 1]", self.s_final)));
        }
        if self.s_init > self.s_final {
            return Err(Error::Config(format!(
                "s_init {} exceeds s_final {}",
                self.s_init, self.s_final
            )));
        }
        if self.num_pruning_steps == 0 {
            return Err(Error::Config("a sparsity schedule needs at least one pruning step".into()));
        }
        Ok(())
    }
}

/// Target sparsity at pruning event `k` in `0..K`.
///
/// Cubic: `s_f + (s_i - s_f)·(1 - k/(K-1))³`; linear interpolates affinely.
/// With `K = 1` the only event goes straight to `s_final`.
pub fn sparsity_at(spec: &SparsityScheduleSpec, k: usize) -> Result<f64> {
    spec.validate()?;
    let n = spec.num_pruning_steps;
    if k >= n {
        return Err(Error::Schedule(format!("pruning step {k} outside 0..{n}")));
    }
    if n == 1 || k == n - 1 {
        return Ok(spec.s_final);
    }
    if k == 0 {
        return Ok(spec.s_init);
    }
    let progress = k as f64 / (n - 1) as f64;
    let (si, sf) = (spec.s_init, spec.s_final);
    Ok(match spec.kind {
        SparsityKind::Cubic => sf + (si - sf) * (1.0 - progress).powi(3),
        SparsityKind::Linear => si + (sf - si) * progress,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrKind {
    /// Linear decay restarted at `lr_init` every `cycle_epochs`.
    RecurringLinear,
    /// One linear decay over the whole run.
    SingleLinear,
    /// Linear ramp from `lr_final` to `lr_init` over `warmup_steps`, then
    /// linear decay.
    LinearWithWarmup,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LRScheduleSpec {
    pub kind: LrKind,
    pub lr_init: f64,
    pub lr_final: f64,
    #[serde(default = "default_cycle")]
    pub cycle_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
    #[serde(default)]
    pub warmup_steps: usize,
}

fn default_cycle() -> usize {
    2
}

impl LRScheduleSpec {
    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0) || self.lr_final < 0.0 || self.lr_final > self.lr_init {
            return Err(Error::Config(format!(
                "learning rates must satisfy 0 <= lr_final ({}) <= lr_init ({}), lr_init > 0",
                self.lr_final, self.lr_init
            )));
        }
        if self.steps_per_epoch == 0 {
            return Err(Error::Config("steps_per_epoch must be at least 1".into()));
        }
        if self.kind == LrKind::RecurringLinear
            && (self.cycle_epochs == 0 || self.total_epochs % self.cycle_epochs != 0)
        {
            return Err(Error::Config(format!(
                "total_epochs {} is not a multiple of cycle_epochs {}",
                self.total_epochs, self.cycle_epochs
            )));
        }
        if self.kind == LrKind::LinearWithWarmup && self.warmup_steps >= self.total_steps().max(1) {
            return Err(Error::Config("warmup longer than the run".into()));
        }
        Ok(())
    }
}

/// Affine from `from` at position 0 to `to` at position `len - 1`.
fn ramp(from: f64, to: f64, pos: usize, len: usize) -> f64 {
    if len <= 1 {
        return from;
    }
    from + (to - from) * pos as f64 / (len - 1) as f64
}

/// Learning rate used for optimizer step `step`.
pub fn lr_at(spec: &LRScheduleSpec, step: usize) -> Result<f64> {
    spec.validate()?;
    let total = spec.total_steps();
    if step >= total {
        return Err(Error::Schedule(format!("step {step} outside 0..{total}")));
    }
    Ok(match spec.kind {
        LrKind::Constant => spec.lr_init,
        LrKind::SingleLinear => ramp(spec.lr_init, spec.lr_final, step, total),
        LrKind::RecurringLinear => {
            let cycle = spec.cycle_epochs * spec.steps_per_epoch;
            ramp(spec.lr_init, spec.lr_final, step % cycle, cycle)
        }
        LrKind::LinearWithWarmup => {
            let w = spec.warmup_steps;
            if step < w {
                ramp(spec.lr_final, spec.lr_init, step, w + 1)
            } else {
                ramp(spec.lr_init, spec.lr_final, step - w, total - w)
            }
        }
    })
}

/// When pruning events happen during a run.
///
/// Event `b` is applied immediately before optimizer step `b`. Steps in the
/// first `stabilization_epochs` see the dense model and steps in the last
/// `stabilization_epochs` see the final masks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timetable {
    pub pruning_steps: Vec<usize>,
    pub stabilization_epochs: usize,
    pub prune_frequency: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

impl Timetable {
    pub fn num_pruning_steps(&self) -> usize {
        self.pruning_steps.len()
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    /// First optimizer step of the trailing stabilization window.
    pub fn final_window_start(&self) -> usize {
        (self.total_epochs - self.stabilization_epochs) * self.steps_per_epoch
    }
}

/// `K = prune_frequency · (total_epochs - 2·stabilization_epochs)` events,
/// evenly spaced from the end of the leading stabilization window to the
/// start of the trailing one (both inclusive).
pub fn pruning_timetable(
    total_epochs: usize,
    steps_per_epoch: usize,
    prune_frequency: usize,
    stabilization_epochs: usize,
) -> Result<Timetable> {
    if total_epochs <= 2 * stabilization_epochs {
        return Err(Error::Config(format!(
            "{total_epochs} epochs leave no pruning window after {stabilization_epochs} stabilization epochs at each end"
        )));
    }
    if prune_frequency == 0 || steps_per_epoch == 0 {
        return Err(Error::Config("prune_frequency and steps_per_epoch must be positive".into()));
    }
    let window_epochs = total_epochs - 2 * stabilization_epochs;
    let k = prune_frequency * window_epochs;
    let start = stabilization_epochs * steps_per_epoch;
    let span = window_epochs * steps_per_epoch;
    if k > 1 && span < k - 1 {
        return Err(Error::Config(format!(
            "{k} pruning steps do not fit in {span} optimizer steps"
        )));
    }
    let pruning_steps = (0..k)
        .map(|j| if k == 1 { start } else { start + j * span / (k - 1) })
        .collect();
    Ok(Timetable {
        pruning_steps,
        stabilization_epochs,
        prune_frequency,
        total_epochs,
        steps_per_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cubic(si: f64, sf: f64, k: usize) -> SparsityScheduleSpec {
        SparsityScheduleSpec {
            kind: SparsityKind::Cubic,
            s_init: si,
            s_final: sf,
            num_pruning_steps: k,
        }
    }

    #[test]
    fn single_step_schedule_is_constant_final() {
        assert_eq!(sparsity_at(&cubic(0.3, 0.8, 1), 0).unwrap(), 0.8);
    }

    #[test]
    fn out_of_range_step_is_rejected() {
        assert!(matches!(sparsity_at(&cubic(0.0, 0.9, 3), 3), Err(Error::Schedule(_))));
        let lr = LRScheduleSpec {
            kind: LrKind::SingleLinear,
            lr_init: 1e-3,
            lr_final: 0.0,
            cycle_epochs: 2,
            total_epochs: 1,
            steps_per_epoch: 10,
            warmup_steps: 0,
        };
        assert!(lr_at(&lr, 10).is_err());
        assert_eq!(lr_at(&lr, 9).unwrap(), 0.0);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(cubic(0.9, 0.5, 3).validate().is_err());
        assert!(cubic(0.0, 0.0, 3).validate().is_err());
        assert!(cubic(0.0, 0.5, 0).validate().is_err());
        assert!(pruning_timetable(4, 100, 10, 2).is_err());
        assert!(pruning_timetable(5, 5, 10, 2).is_err());
    }

    #[test]
    fn warmup_ramps_up_then_down() {
        let lr = LRScheduleSpec {
            kind: LrKind::LinearWithWarmup,
            lr_init: 1e-4,
            lr_final: 1e-6,
            cycle_epochs: 2,
            total_epochs: 2,
            steps_per_epoch: 50,
            warmup_steps: 10,
        };
        assert_eq!(lr_at(&lr, 0).unwrap(), 1e-6);
        assert!((lr_at(&lr, 10).unwrap() - 1e-4).abs() < 1e-18);
        assert!((lr_at(&lr, 99).unwrap() - 1e-6).abs() < 1e-18);
        assert!(lr_at(&lr, 5).unwrap() < lr_at(&lr, 9).unwrap());
    }
}
