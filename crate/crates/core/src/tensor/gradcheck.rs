use super::{Graph, NodeId, Tensor, TensorError};

/// Central-difference step used when none is given.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Outcome of comparing autodiff gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error per parameter, in input order.
    pub max_rel_err: Vec<f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.iter().all(|&e| e < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }
}

/// Checks the gradient of a scalar function of `params` in double precision.
///
/// `f` rebuilds the computation on a fresh graph from the parameter leaves it
/// is handed and returns the loss node. Relative error per entry is
/// `|a - n| / max(|a|, |n|, floor)` with a floor of `1e-7` so that
/// vanishing gradients are compared absolutely.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], tolerance: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId, TensorError>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.param(p.clone())).collect();
        let loss = f(&mut g, &ids)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &ids)?;
    let grads = g.backward(loss)?;

    let h = DEFAULT_FD_STEP;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads
            .data(*id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; params[pi].numel()]);
        let mut worst: f64 = 0.0;
        for i in 0..params[pi].numel() {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            let denom = a.abs().max(numeric.abs()).max(1e-7);
            worst = worst.max((a - numeric).abs() / denom);
        }
        report.push(worst);
    }
    Ok(GradCheckReport {
        max_rel_err: report,
        tolerance,
    })
}
