//! Central finite-difference checks for tape gradients.

use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Graph, ParamStore, TrainMask};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Floor on the relative-error denominator so that entries whose true
/// gradient is ~0 are judged by absolute error instead.
pub const REL_FLOOR: f64 = 1e-4;

/// Worst disagreement found by a check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub entries: usize,
}

impl GradCheck {
    fn merge(&mut self, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.max_rel_error = self.max_rel_error.max((analytic - numeric).abs() / denom);
        self.entries += 1;
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Checks `d loss / d inputs` for a function recorded on a fresh tape.
pub fn check_inputs(
    inputs: &[Matrix],
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let eval = |values: &[Matrix]| -> Result<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| t.constant(m.clone())).collect();
        let loss = f(&mut t, &vars)?;
        t.scalar(loss)
    };

    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| t.leaf(m.clone(), true)).collect();
    let loss = f(&mut t, &vars)?;
    let grads = t.backward(loss)?;

    let mut report = GradCheck { max_rel_error: 0.0, entries: 0 };
    let mut work = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| {
            let (r, c) = inputs[k].shape();
            Matrix::zeros(r, c)
        });
        for e in 0..inputs[k].len() {
            let orig = inputs[k].data()[e];
            work[k].data_mut()[e] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[k].data_mut()[e] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[k].data_mut()[e] = orig;
            report.merge(analytic.data()[e], (plus - minus) / (2.0 * FD_STEP));
        }
    }
    Ok(report)
}

/// Checks the gradients of every trainable parameter in `store` that the
/// loss touches.
pub fn check_params(
    store: &ParamStore,
    mask: &TrainMask,
    f: impl Fn(&mut Graph) -> Result<Var>,
) -> Result<GradCheck> {
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s, mask);
        let loss = f(&mut g)?;
        g.scalar(loss)
    };

    let mut g = Graph::new(store, mask);
    let loss = f(&mut g)?;
    let grads = g.backward(loss)?;
    if grads.params.is_empty() {
        return Err(Error::Empty("check_params: no trainable parameter reached"));
    }

    let mut report = GradCheck { max_rel_error: 0.0, entries: 0 };
    let mut work = store.clone();
    for (name, analytic) in &grads.params {
        let len = analytic.len();
        for e in 0..len {
            let orig = store.get(name)?.data()[e];
            work.get_mut(name)?.data_mut()[e] = orig + FD_STEP;
            let plus = eval(&work)?;
            work.get_mut(name)?.data_mut()[e] = orig - FD_STEP;
            let minus = eval(&work)?;
            work.get_mut(name)?.data_mut()[e] = orig;
            report.merge(analytic.data()[e], (plus - minus) / (2.0 * FD_STEP));
        }
    }
    Ok(report)
}
