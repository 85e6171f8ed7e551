use serde::{Deserialize, Serialize};

use crate::distill::KdConfig;
use crate::error::{Error, Result};
use crate::model::{ArchitectureSpec, ForwardConfig};
use crate::pruning::{Pruner, ScopePolicy};
use crate::scalar::Precision;
use crate::schedules::{
    pruning_timetable, LRScheduleSpec, LrKind, SparsityKind, SparsityScheduleSpec, Timetable,
};
use crate::task::TaskSpec;
use crate::tensor::AdamConfig;

/// Learning-rate schedule without the run length, which comes from the
/// enclosing section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSettings {
    pub kind: LrKind,
    pub lr_init: f64,
    pub lr_final: f64,
    #[serde(default = "two")]
    pub cycle_epochs: usize,
    #[serde(default)]
    pub warmup_steps: usize,
}

fn two() -> usize {
    2
}

impl LrSettings {
    pub fn spec(&self, total_epochs: usize, steps_per_epoch: usize) -> LRScheduleSpec {
        LRScheduleSpec {
            kind: self.kind,
            lr_init: self.lr_init,
            lr_final: self.lr_final,
            cycle_epochs: self.cycle_epochs,
            total_epochs,
            steps_per_epoch,
            warmup_steps: self.warmup_steps,
        }
    }
}

/// Dense fine-tuning that produces the starting point and the teacher.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseSection {
    pub epochs: usize,
    pub lr: LrSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsitySettings {
    pub kind: SparsityKind,
    pub s_init: f64,
    pub s_final: f64,
}

/// The gradual pruning part of a recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSection {
    pub scope: ScopePolicy,
    pub pruner: Pruner,
    pub sparsity: SparsitySettings,
    pub lr: LrSettings,
    pub epochs: usize,
    pub prune_frequency: usize,
    pub stabilization_epochs: usize,
    /// Distillation from the dense model; plain cross-entropy when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kd: Option<KdConfig>,
}

/// A complete, self-describing experiment: model, task, dense fine-tuning,
/// and the pruning schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningRecipe {
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    pub batch_size: usize,
    pub model: ArchitectureSpec,
    pub forward: ForwardConfig,
    pub task: TaskSpec,
    pub optimizer: AdamConfig,
    pub dense: DenseSection,
    pub prune: PruneSection,
}

pub const PRESET_NAMES: [&str; 4] = ["gmp-star-10ep", "gmp-star-30ep", "smc-style", "one-shot"];

/// Dense fine-tuning rate for the toy task, the analog of a task's default
/// fine-tuning learning rate.
pub const TOY_DENSE_LR: f64 = 1e-3;

impl PruningRecipe {
    /// Ten-epoch GMP★: encoder-only magnitude pruning, cubic schedule with a
    /// 70% first step, 2-epoch recurring LR 1e-4 → 1e-6, KD (1.0, 5.5).
    pub fn gmp_star_10ep() -> Self {
        PruningRecipe {
            name: "gmp-star-10ep".into(),
            seed: 0,
            precision: Precision::Single,
            batch_size: 32,
            model: ArchitectureSpec::tiny(),
            forward: ForwardConfig::default(),
            task: TaskSpec::default(),
            optimizer: AdamConfig::default(),
            dense: DenseSection {
                epochs: 3,
                lr: LrSettings {
                    kind: LrKind::SingleLinear,
                    lr_init: TOY_DENSE_LR,
                    lr_final: 0.0,
                    cycle_epochs: 2,
                    warmup_steps: 0,
                },
            },
            prune: PruneSection {
                scope: ScopePolicy::encoder_only(),
                pruner: Pruner::Magnitude,
                sparsity: SparsitySettings {
                    kind: SparsityKind::Cubic,
                    s_init: 0.7,
                    s_final: 0.9,
                },
                lr: LrSettings {
                    kind: LrKind::RecurringLinear,
                    lr_init: 1e-4,
                    lr_final: 1e-6,
                    cycle_epochs: 2,
                    warmup_steps: 0,
                },
                epochs: 10,
                prune_frequency: 10,
                stabilization_epochs: 2,
                kd: Some(KdConfig::default()),
            },
        }
    }

    pub fn gmp_star_30ep() -> Self {
        let mut r = Self::gmp_star_10ep();
        r.name = "gmp-star-30ep".into();
        r.prune.epochs = 30;
        r
    }

    /// Naive baseline: everything except layer norms and biases is pruned,
    /// a 3-epoch schedule from zero sparsity with a single linear decay at
    /// the dense fine-tuning rate, no distillation.
    pub fn smc_style() -> Self {
        let mut r = Self::gmp_star_10ep();
        r.name = "smc-style".into();
        r.prune = PruneSection {
            scope: ScopePolicy::smc_style(),
            pruner: Pruner::Magnitude,
            sparsity: SparsitySettings {
                kind: SparsityKind::Cubic,
                s_init: 0.0,
                s_final: 0.9,
            },
            lr: LrSettings {
                kind: LrKind::SingleLinear,
                lr_init: TOY_DENSE_LR,
                lr_final: 0.0,
                cycle_epochs: 2,
                warmup_steps: 0,
            },
            epochs: 3,
            prune_frequency: 10,
            stabilization_epochs: 1,
            kd: None,
        };
        r
    }

    /// One-shot diagonal-Fisher pruning of all components to 50%.
    pub fn one_shot() -> Self {
        let mut r = Self::gmp_star_10ep();
        r.name = "one-shot".into();
        r.prune.scope = ScopePolicy::smc_style();
        r.prune.pruner = Pruner::DiagonalFisher {
            num_samples: 256,
            dampening: crate::pruning::FISHER_DAMPENING,
        };
        r.prune.sparsity.s_final = 0.5;
        r.prune.kd = None;
        r
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "gmp-star-10ep" | "gmp-star" => Ok(Self::gmp_star_10ep()),
            "gmp-star-30ep" => Ok(Self::gmp_star_30ep()),
            "smc-style" => Ok(Self::smc_style()),
            "one-shot" => Ok(Self::one_shot()),
            other => Err(Error::Config(format!(
                "unknown recipe preset `{other}` (expected one of {})",
                PRESET_NAMES.join(", ")
            ))),
        }
    }

    /// Parses a TOML recipe; unknown keys are rejected and errors carry the
    /// line and column.
    pub fn from_toml(text: &str) -> Result<Self> {
        let recipe: PruningRecipe = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        recipe.validate()?;
        Ok(recipe)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("recipe serializes")
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.task.train_size / self.batch_size.max(1)
    }

    pub fn timetable(&self) -> Result<Timetable> {
        pruning_timetable(
            self.prune.epochs,
            self.steps_per_epoch(),
            self.prune.prune_frequency,
            self.prune.stabilization_epochs,
        )
    }

    pub fn sparsity_spec(&self) -> Result<SparsityScheduleSpec> {
        let k = self.timetable()?.num_pruning_steps();
        let s = SparsityScheduleSpec {
            kind: self.prune.sparsity.kind,
            s_init: self.prune.sparsity.s_init,
            s_final: self.prune.sparsity.s_final,
            num_pruning_steps: k,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn prune_lr_spec(&self) -> LRScheduleSpec {
        self.prune.lr.spec(self.prune.epochs, self.steps_per_epoch())
    }

    pub fn dense_lr_spec(&self) -> LRScheduleSpec {
        self.dense.lr.spec(self.dense.epochs, self.steps_per_epoch())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.steps_per_epoch() == 0 {
            return Err(Error::Config(format!(
                "train_size {} is smaller than batch_size {}",
                self.task.train_size, self.batch_size
            )));
        }
        if self.task.vocab_size > self.model.vocab_size
            || self.task.sequence_length > self.model.max_positions
            || self.task.num_labels != self.model.num_labels
            || self.model.num_segments < 2
        {
            return Err(Error::Config(
                "task does not fit the model (vocab, sequence length, labels or segments)".into(),
            ));
        }
        if self.prune.scope.tags.is_empty() {
            return Err(Error::Config("pruning scope is empty".into()));
        }
        if let Some(kd) = &self.prune.kd {
            kd.validate()?;
        }
        if let Pruner::DiagonalFisher { num_samples, .. } = self.prune.pruner {
            if num_samples == 0 {
                return Err(Error::Config("diagonal-fisher needs num_samples >= 1".into()));
            }
        }
        if self.dense.epochs > 0 {
            self.dense_lr_spec().validate()?;
        }
        self.prune_lr_spec().validate()?;
        self.sparsity_spec()?;
        Ok(())
    }
}
