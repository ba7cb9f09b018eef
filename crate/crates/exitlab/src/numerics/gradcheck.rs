//! Finite-difference verification of tape gradients.
//!
//! The checker re-runs a user-supplied forward builder with each parameter
//! element nudged by `±step` and compares the central difference against the
//! analytic gradient. Instances whose forward pass lands near a
//! non-differentiable point (ReLU or clamp corner, min tie, absolute-value
//! kink) are rejected so the caller can retry with a different seed instead
//! of comparing subgradients against a two-sided difference.

use crate::error::Result;
use crate::numerics::store::ParameterStore;
use crate::numerics::tape::{Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference half step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Minimum distance of any kink input from its corner; instances below
    /// this margin are rejected rather than checked.
    pub min_kink_margin: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            tolerance: 1e-4,
            min_kink_margin: 1e-2,
        }
    }
}

/// Result of checking one instance.
#[derive(Debug)]
pub enum GradCheckOutcome {
    /// The instance was smooth enough to check.
    Report(GradCheckReport),
    /// Some input sat within `min_kink_margin` of a kink; try another seed.
    Rejected { margin: f64 },
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub elements_checked: usize,
}

impl GradCheckReport {
    pub fn within(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Relative error with an absolute floor, so near-zero gradients are compared
/// absolutely instead of amplifying finite-difference noise.
fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1.0);
    (analytic - numeric).abs() / denom
}

/// Checks `d loss / d p` for every element of every parameter in `store`.
///
/// `build` must construct the full forward pass on the given tape from the
/// current parameter values and return the scalar loss node. It is called
/// once for the analytic pass and twice per parameter element thereafter.
pub fn check_gradients<F>(
    store: &mut ParameterStore<f64>,
    cfg: &GradCheckConfig,
    build: F,
) -> Result<GradCheckOutcome>
where
    F: Fn(&mut Tape<f64>, &ParameterStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    let margin = tape.kink_margin();
    if margin < cfg.min_kink_margin {
        return Ok(GradCheckOutcome::Rejected { margin });
    }
    let grads = tape.backward(loss)?;

    let mut analytic = ParameterStore::<f64>::new();
    for id in store.ids().collect::<Vec<_>>() {
        analytic.register(store.name(id).to_string(), {
            let (r, c) = store.value(id).shape();
            crate::numerics::tensor::Tensor::zeros(r, c)
        })?;
    }
    tape.accumulate_param_grads(&grads, &mut analytic, 1.0)?;
    drop(tape);

    let mut max_rel_error: f64 = 0.0;
    let mut worst_param = String::new();
    let mut elements_checked = 0;

    for id in store.ids().collect::<Vec<_>>() {
        let n = store.value(id).len();
        for i in 0..n {
            let original = store.value(id).data()[i];

            store.value_mut(id).data_mut()[i] = original + cfg.step;
            let mut t_plus = Tape::new();
            let l_plus = build(&mut t_plus, store)?;
            let plus = t_plus.scalar(l_plus);
            drop(t_plus);

            store.value_mut(id).data_mut()[i] = original - cfg.step;
            let mut t_minus = Tape::new();
            let l_minus = build(&mut t_minus, store)?;
            let minus = t_minus.scalar(l_minus);
            drop(t_minus);

            store.value_mut(id).data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic.grad(analytic.id(store.name(id)).expect("same layout")).data()[i];
            let err = rel_error(a, numeric);
            if err > max_rel_error {
                max_rel_error = err;
                worst_param = format!("{}[{}]", store.name(id), i);
            }
            elements_checked += 1;
        }
    }

    Ok(GradCheckOutcome::Report(GradCheckReport {
        max_rel_error,
        worst_param,
        elements_checked,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn quadratic_loss_gradient_is_exact() {
        let mut store = ParameterStore::<f64>::new();
        store.register("w", Tensor::row_vector(vec![0.3, -0.7, 1.1])).unwrap();
        let outcome = check_gradients(&mut store, &GradCheckConfig::default(), |tape, store| {
            let w = tape.param(store, store.id("w").unwrap());
            let sq = tape.square(w);
            Ok(tape.sum_all(sq))
        })
        .unwrap();
        match outcome {
            GradCheckOutcome::Report(r) => {
                assert_eq!(r.elements_checked, 3);
                assert!(r.within(1e-4), "max rel error {}", r.max_rel_error);
            }
            GradCheckOutcome::Rejected { .. } => panic!("quadratic has no kinks"),
        }
    }

    #[test]
    fn instances_near_relu_corners_are_rejected() {
        let mut store = ParameterStore::<f64>::new();
        store.register("w", Tensor::scalar(1e-5)).unwrap();
        let outcome = check_gradients(&mut store, &GradCheckConfig::default(), |tape, store| {
            let w = tape.param(store, store.id("w").unwrap());
            let r = tape.relu(w);
            Ok(tape.sum_all(r))
        })
        .unwrap();
        assert!(matches!(outcome, GradCheckOutcome::Rejected { .. }));
    }

    #[test]
    fn deliberately_wrong_gradient_is_caught() {
        // exp is smooth, so the only way this fails is a broken backward pass;
        // sanity-check that the reported error really is tiny.
        let mut store = ParameterStore::<f64>::new();
        store.register("w", Tensor::row_vector(vec![0.2, 0.4])).unwrap();
        let outcome = check_gradients(&mut store, &GradCheckConfig::default(), |tape, store| {
            let w = tape.param(store, store.id("w").unwrap());
            let e = tape.exp(w);
            let t = tape.tanh(e);
            Ok(tape.mean_all(t))
        })
        .unwrap();
        match outcome {
            GradCheckOutcome::Report(r) => assert!(r.max_rel_error < 1e-6),
            GradCheckOutcome::Rejected { .. } => panic!("smooth graph"),
        }
    }
}
