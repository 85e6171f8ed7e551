use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub encoder_sparsity: f64,
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Number of optimizer steps completed when evaluated.
    pub step: usize,
    pub epoch: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    /// Index `k` into the sparsity schedule.
    pub index: usize,
    /// Applied before this optimizer step.
    pub step: usize,
    pub target: f64,
    pub achieved: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub prune_events: Vec<PruneEvent>,
}

impl RunLog {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.evals.last().map(|e| e.accuracy)
    }

    pub fn final_sparsity(&self) -> f64 {
        self.prune_events.last().map(|e| e.achieved).unwrap_or(0.0)
    }

    /// One row per optimizer step; `eval_accuracy` is filled on the step an
    /// evaluation followed.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,lr,encoder_sparsity,train_loss,eval_accuracy\n");
        let mut evals = self.evals.iter().peekable();
        for r in &self.steps {
            let mut acc = String::new();
            while let Some(e) = evals.peek() {
                if e.step == r.step + 1 {
                    acc = e.accuracy.to_string();
                    evals.next();
                } else if e.step <= r.step {
                    evals.next();
                } else {
                    break;
                }
            }
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.step, r.epoch, r.lr, r.encoder_sparsity, r.train_loss, acc
            );
        }
        out
    }

    pub fn prune_events_csv(&self) -> String {
        let mut out = String::from("index,step,target,achieved\n");
        for e in &self.prune_events {
            let _ = writeln!(out, "{},{},{},{}", e.index, e.step, e.target, e.achieved);
        }
        out
    }
}
