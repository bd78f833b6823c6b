//! Central-difference gradient checking.

use crate::graph::{Graph, NodeId};
use crate::tensor::{Result, Tensor, TensorError};

/// Outcome of one gradient or oracle check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub op_name: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub seed: u64,
}

impl CheckReport {
    pub fn line(&self) -> String {
        format!(
            "{} {} max_rel_err={:.3e} max_abs_err={:.3e} tol={:.1e} seed={}",
            if self.passed { "PASS" } else { "FAIL" },
            self.op_name,
            self.max_rel_err,
            self.max_abs_err,
            self.tolerance,
            self.seed
        )
    }
}

/// Denominator floor for relative errors. Central differences in f64 carry
/// an irreducible few-ulp noise of ~3e-11 absolute at eps=1e-5, so
/// gradients below this floor are certified absolutely (to tolerance *
/// floor = 1e-10) rather than relatively. Any real backward-rule defect
/// scales with the gradient itself and lands far above that bound.
pub const REL_ERR_FLOOR: f64 = 1e-5;

/// Relative error with a floored denominator (see [`REL_ERR_FLOOR`]).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// A differentiable function under test: given a graph and leaf ids for each
/// input (in order), build the output node.
pub type TensorFn<'a> = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'a;

/// Compare the analytic gradient of `sum(fn(inputs))` against central
/// differences `(f(x+eps) - f(x-eps)) / 2eps`, elementwise over every input.
pub fn finite_diff_check(
    op_name: &str,
    f: &TensorFn,
    inputs: &[Tensor],
    epsilon: f64,
    tolerance: f64,
    seed: u64,
) -> Result<CheckReport> {
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(TensorError::InvalidEpsilon(epsilon));
    }

    // analytic pass
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs
            .iter()
            .map(|t| g.leaf(t.clone().with_grad()))
            .collect();
        let out = f(&mut g, &ids)?;
        let total = g.sum_all(out)?;
        g.backward(total)?;
        ids.iter().map(|&id| g.grad_or_zeros(id)).collect()
    };

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &ids)?;
        Ok(g.data(out).iter().sum())
    };

    let mut max_abs_err: f64 = 0.0;
    let mut max_rel_err: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for e in 0..t.numel() {
            let orig = t.data()[e];
            work[ti].data_mut()[e] = orig + epsilon;
            let plus = eval(&work)?;
            work[ti].data_mut()[e] = orig - epsilon;
            let minus = eval(&work)?;
            work[ti].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[ti][e];
            max_abs_err = max_abs_err.max((a - numeric).abs());
            max_rel_err = max_rel_err.max(relative_error(a, numeric));
        }
    }

    Ok(CheckReport {
        op_name: op_name.to_string(),
        max_abs_err,
        max_rel_err,
        tolerance,
        passed: max_rel_err <= tolerance,
        seed,
    })
}

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Step used when checking deep compositions (attention, full blocks).
/// eps=1e-6 leaves ~1e-10 of f64 rounding noise in the numeric gradient,
/// which swamps elements whose true gradient is small; 1e-5 cuts that by
/// 10x while keeping the eps^2 truncation term (batch-norm curvature is the
/// worst case) under the 1e-5 tolerance.
pub const COMPOSITE_EPSILON: f64 = 1e-5;
