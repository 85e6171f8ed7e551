//! Distillation loss mixing task cross-entropy with a temperature-softened
//! teacher-to-student KL term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, ForwardConfig, Model};
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

/// Hardness `h` weights the KL term, `1 - h` the cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdConfig {
    pub hardness: f64,
    pub temperature: f64,
    /// Multiply the KL term by `T²`.
    #[serde(default = "yes")]
    pub scale_by_t2: bool,
}

fn yes() -> bool {
    true
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            hardness: 1.0,
            temperature: 5.5,
            scale_by_t2: true,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hardness) {
            return Err(Error::Config(format!("hardness {} not in [0, 1]", self.hardness)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }

    fn kl_weight(&self) -> f64 {
        if self.scale_by_t2 {
            self.temperature * self.temperature
        } else {
            1.0
        }
    }
}

/// `softmax(logits / T)` along the class axis, recorded on the graph.
pub fn soften<T: Scalar>(g: &mut Graph<T>, logits: NodeId, temperature: f64) -> Result<NodeId> {
    let axis = g.shape(logits).len().saturating_sub(1);
    let scaled = g.scale(logits, T::of(1.0 / temperature));
    Ok(g.softmax(scaled, axis)?)
}

/// `softmax(logits / T)` on a plain tensor.
pub fn soften_tensor<T: Scalar>(logits: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let y = soften(&mut g, x, temperature)?;
    Ok(g.value(y).clone())
}

/// Shannon entropy (nats) of each row of a probability tensor.
pub fn entropy<T: Scalar>(probs: &Tensor<T>) -> Vec<f64> {
    let cols = *probs.shape().last().unwrap_or(&1);
    probs
        .data()
        .chunks(cols)
        .map(|row| {
            row.iter()
                .map(|p| p.as_f64())
                .filter(|&p| p > 0.0)
                .map(|p| -p * p.ln())
                .sum()
        })
        .collect()
}

/// `(1-h)·CE(student, labels) + h·T²·KL(soften(teacher) ‖ soften(student))`.
///
/// The teacher enters as a constant, so no gradient reaches it.
pub fn kd_loss<T: Scalar>(
    g: &mut Graph<T>,
    student_logits: NodeId,
    teacher_logits: &Tensor<T>,
    labels: &[usize],
    cfg: &KdConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    if g.shape(student_logits) != teacher_logits.shape() {
        return Err(TensorError::Shape {
            op: "kd_loss",
            lhs: g.shape(student_logits).to_vec(),
            rhs: teacher_logits.shape().to_vec(),
        }
        .into());
    }
    let ce = g.cross_entropy(student_logits, labels)?;
    if cfg.hardness == 0.0 {
        return Ok(ce);
    }
    let teacher_probs = soften_tensor(teacher_logits, cfg.temperature)?;
    let p = g.constant(teacher_probs);
    let q = soften(g, student_logits, cfg.temperature)?;
    let kl = g.kl_divergence(p, q)?;
    let kl = g.scale(kl, T::of(cfg.kl_weight()));
    if cfg.hardness == 1.0 {
        return Ok(kl);
    }
    let ce = g.scale(ce, T::of(1.0 - cfg.hardness));
    let kl = g.scale(kl, T::of(cfg.hardness));
    Ok(g.add(ce, kl)?)
}

/// A frozen copy of a trained model used as distillation target.
#[derive(Debug, Clone)]
pub struct Teacher<T> {
    model: Model<T>,
}

/// Freezes `trained` as a teacher: parameters are copied and dropout is
/// disabled.
pub fn make_teacher<T: Scalar>(trained: &Model<T>) -> Teacher<T> {
    let mut model = trained.clone();
    let cfg = *model.config();
    model.set_config(ForwardConfig { dropout: 0.0, ..cfg });
    Teacher { model }
}

impl<T: Scalar> Teacher<T> {
    pub fn logits(&self, batch: &Batch) -> Result<Tensor<T>> {
        self.model.logits(batch)
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }
}

/// Training objective for a student forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a, T> {
    CrossEntropy,
    Distill { teacher: &'a Teacher<T>, cfg: KdConfig },
}

impl<T: Scalar> Objective<'_, T> {
    pub fn loss(&self, g: &mut Graph<T>, logits: NodeId, batch: &Batch) -> Result<NodeId> {
        match self {
            Objective::CrossEntropy => Ok(g.cross_entropy(logits, &batch.labels)?),
            Objective::Distill { teacher, cfg } => {
                let t = teacher.logits(batch)?;
                kd_loss(g, logits, &t, &batch.labels, cfg)
            }
        }
    }
}
