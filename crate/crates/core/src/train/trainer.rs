use super::recipe::PruningRecipe;
use super::runlog::{EvalRecord, PruneEvent, RunLog, StepRecord};
use crate::accounting::sparsity_report;
use crate::distill::{Objective, Teacher};
use crate::error::{Error, Result};
use crate::model::{Batch, ComponentTag, Mode, Model};
use crate::pruning::{apply_masks, select_prune, MaskSet};
use crate::scalar::Scalar;
use crate::schedules::{lr_at, sparsity_at, LRScheduleSpec};
use crate::task::Dataset;
use crate::tensor::{Adam, AdamConfig, Graph};

/// Train and eval splits of a task.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Dataset,
    pub eval: Dataset,
}

/// Stateless 64-bit mixer for deriving per-epoch and per-step seeds.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const EVAL_BATCH: usize = 256;

/// Argmax accuracy of `model` on `data`.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for batch in data.batches(EVAL_BATCH) {
        let logits = model.logits(&batch)?;
        for (r, &label) in batch.labels.iter().enumerate() {
            let row = logits.row(r);
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            if best == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Hooks for inspecting a run while it progresses.
pub trait RunObserver<T> {
    fn on_prune(&mut self, _event: &PruneEvent, _model: &Model<T>, _masks: &MaskSet) {}
    fn on_eval(&mut self, _record: &EvalRecord, _model: &Model<T>, _masks: &MaskSet) {}
}

impl<T> RunObserver<T> for () {}

/// Limits applied on top of a recipe.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Stop after this many optimizer steps. Pruning events scheduled at the
    /// stopping step still run.
    pub max_steps: Option<usize>,
}

struct StepContext<'a, T> {
    objective: Objective<'a, T>,
    masks: Option<&'a MaskSet>,
    seed: u64,
}

/// One forward/backward/Adam step; returns the loss. Gradients of masked
/// entries are zeroed before the update.
fn train_step<T: Scalar>(
    model: &mut Model<T>,
    adam: &mut Adam<T>,
    batch: &Batch,
    lr: f64,
    step: usize,
    ctx: &StepContext<'_, T>,
) -> Result<f64> {
    let mut g = Graph::new();
    let out = model.forward(
        &mut g,
        batch,
        Mode::Train {
            dropout_seed: mix_seed(ctx.seed, 1, step as u64),
        },
    )?;
    let loss_node = ctx.objective.loss(&mut g, out.logits, batch)?;
    let loss = g.value(loss_node).item().as_f64();
    if !loss.is_finite() {
        return Err(Error::Diverged {
            step,
            detail: format!("loss is {loss} at lr {lr}"),
        });
    }
    let mut grads = g.backward(loss_node)?;
    adam.begin_step();
    for (id, node) in out.param_nodes.iter().enumerate() {
        let Some(mut grad) = grads.take(*node) else {
            continue;
        };
        if let Some(m) = ctx.masks.and_then(|ms| ms.get(id)) {
            for (gv, &k) in grad.iter_mut().zip(m.keep()) {
                if !k {
                    *gv = T::zero();
                }
            }
        }
        adam.update(id, model.param_mut(id).value.data_mut(), &grad, lr);
    }
    Ok(loss)
}

fn new_adam<T: Scalar>(model: &Model<T>, cfg: AdamConfig) -> Adam<T> {
    Adam::new(cfg, model.params().iter().map(|p| p.value.numel()))
}

/// Dense fine-tuning with Adam and cross-entropy; evaluates after every
/// epoch.
pub fn train_dense<T: Scalar>(
    model: &mut Model<T>,
    data: &TaskData,
    epochs: usize,
    lr_schedule: &LRScheduleSpec,
    batch_size: usize,
    optimizer: AdamConfig,
    seed: u64,
) -> Result<RunLog> {
    let mut log = RunLog::default();
    if epochs == 0 {
        return Ok(log);
    }
    let spe = data.train.len() / batch_size.max(1);
    if lr_schedule.total_steps() < epochs * spe {
        return Err(Error::Config(format!(
            "learning-rate schedule covers {} steps, run needs {}",
            lr_schedule.total_steps(),
            epochs * spe
        )));
    }
    let mut adam = new_adam(model, optimizer);
    let ctx = StepContext {
        objective: Objective::CrossEntropy,
        masks: None,
        seed,
    };
    let mut step = 0;
    for epoch in 0..epochs {
        for batch in data.train.epoch_batches(batch_size, mix_seed(seed, 0, epoch as u64)) {
            let lr = lr_at(lr_schedule, step)?;
            let loss = train_step(model, &mut adam, &batch, lr, step, &ctx)?;
            log.steps.push(StepRecord {
                step,
                epoch,
                lr,
                encoder_sparsity: 0.0,
                train_loss: loss,
            });
            step += 1;
        }
        log.evals.push(EvalRecord {
            step,
            epoch,
            accuracy: evaluate(model, &data.eval)?,
        });
    }
    Ok(log)
}

/// Result of a gradual pruning run.
#[derive(Debug, Clone)]
pub struct PruneOutcome<T> {
    pub model: Model<T>,
    pub masks: MaskSet,
    pub log: RunLog,
}

/// Gradual pruning of a trained dense model following `recipe`.
pub fn gradual_prune<T: Scalar>(
    dense: &Model<T>,
    teacher: Option<&Teacher<T>>,
    recipe: &PruningRecipe,
    data: &TaskData,
) -> Result<PruneOutcome<T>> {
    gradual_prune_with(dense, teacher, recipe, data, RunOptions::default(), &mut ())
}

/// [`gradual_prune`] with run limits and an observer.
///
/// Before each optimizer step, any pruning event scheduled for that step
/// rescoring the weights, raises the masks to the scheduled sparsity,
/// zeroes the newly masked weights and clears their Adam moments.
pub fn gradual_prune_with<T: Scalar, O: RunObserver<T> + ?Sized>(
    dense: &Model<T>,
    teacher: Option<&Teacher<T>>,
    recipe: &PruningRecipe,
    data: &TaskData,
    options: RunOptions,
    observer: &mut O,
) -> Result<PruneOutcome<T>> {
    recipe.validate()?;
    let prune = &recipe.prune;
    let objective = match (&prune.kd, teacher) {
        (Some(cfg), Some(t)) => Objective::Distill { teacher: t, cfg: *cfg },
        (None, None) => Objective::CrossEntropy,
        (Some(_), None) => return Err(Error::Config("recipe enables distillation but no teacher was given".into())),
        (None, Some(_)) => return Err(Error::Config("a teacher was given but the recipe has no distillation".into())),
    };
    let timetable = recipe.timetable()?;
    let sparsity = recipe.sparsity_spec()?;
    let lr_spec = recipe.prune_lr_spec();
    lr_spec.validate()?;
    let spe = recipe.steps_per_epoch();
    let total = timetable.total_steps();
    let limit = options.max_steps.unwrap_or(total).min(total);
    let scoring: Vec<Batch> = match prune.pruner {
        crate::pruning::Pruner::Magnitude => Vec::new(),
        crate::pruning::Pruner::DiagonalFisher { num_samples, .. } => {
            let n = num_samples.min(data.train.len());
            data.train.batches(recipe.batch_size).into_iter().take(n.div_ceil(recipe.batch_size)).collect()
        }
    };

    let mut model = dense.clone();
    let mut masks = MaskSet::dense(&model, &prune.scope);
    let mut adam = new_adam(&model, recipe.optimizer);
    let mut log = RunLog::default();
    let mut next_event = 0;
    let mut encoder_sparsity = sparsity_report(&model, &masks)?.encoder_sparsity;
    let seed = recipe.seed;
    let mut order: Vec<usize> = Vec::new();
    let mut order_epoch = None;

    for step in 0..=limit {
        while next_event < timetable.pruning_steps.len() && timetable.pruning_steps[next_event] == step {
            let target = sparsity_at(&sparsity, next_event)?;
            let scores = prune.pruner.scores(&model, &masks, &scoring, &objective)?;
            let updated = select_prune(&scores, &masks, target, &prune.scope)?;
            apply_masks(&mut model, &updated)?;
            for (id, m) in updated.iter() {
                adam.reset_entries(id, m.keep());
            }
            masks = updated;
            encoder_sparsity = sparsity_report(&model, &masks)?.encoder_sparsity;
            let event = PruneEvent {
                index: next_event,
                step,
                target,
                achieved: masks.sparsity(),
            };
            observer.on_prune(&event, &model, &masks);
            log.prune_events.push(event);
            next_event += 1;
        }
        if step == limit {
            break;
        }
        let epoch = step / spe;
        if order_epoch != Some(epoch) {
            order = epoch_order(data.train.len(), mix_seed(seed, 0, epoch as u64));
            order_epoch = Some(epoch);
        }
        let i = step % spe;
        let batch = data.train.batch(&order[i * recipe.batch_size..(i + 1) * recipe.batch_size]);
        let lr = lr_at(&lr_spec, step)?;
        let ctx = StepContext {
            objective,
            masks: Some(&masks),
            seed: mix_seed(seed, 7, 0),
        };
        let loss = train_step(&mut model, &mut adam, &batch, lr, step, &ctx)?;
        log.steps.push(StepRecord {
            step,
            epoch,
            lr,
            encoder_sparsity,
            train_loss: loss,
        });
        if (step + 1) % spe == 0 {
            let record = EvalRecord {
                step: step + 1,
                epoch,
                accuracy: evaluate(&model, &data.eval)?,
            };
            check_masked_zero(&model, &masks, step + 1)?;
            observer.on_eval(&record, &model, &masks);
            log.evals.push(record);
        }
    }
    if log.evals.last().map(|e| e.step) != Some(limit) {
        let record = EvalRecord {
            step: limit,
            epoch: limit / spe,
            accuracy: evaluate(&model, &data.eval)?,
        };
        check_masked_zero(&model, &masks, limit)?;
        observer.on_eval(&record, &model, &masks);
        log.evals.push(record);
    }
    Ok(PruneOutcome { model, masks, log })
}

fn epoch_order(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    idx
}

fn check_masked_zero<T: Scalar>(model: &Model<T>, masks: &MaskSet, step: usize) -> Result<()> {
    for (id, m) in masks.iter() {
        let p = model.param(id);
        if p.value.data().iter().zip(m.keep()).any(|(w, &k)| !k && *w != T::zero()) {
            return Err(Error::Contract(format!(
                "masked weight of {} is nonzero after step {step}",
                p.name
            )));
        }
    }
    Ok(())
}

/// Encoder-linear sparsity of a masked model.
pub fn encoder_sparsity<T: Scalar>(model: &Model<T>, masks: &MaskSet) -> f64 {
    masks.sparsity_over(model, &[ComponentTag::EncoderLinear])
}
