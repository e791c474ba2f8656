//! Central finite-difference verification of tape gradients.
//!
//! The checker evaluates a user-supplied scalar function twice per parameter
//! element (±step) and compares the quotient against the gradient from one
//! backward pass. The function must be deterministic: build it with dropout
//! disabled and, when it contains stop-gradient branches, hold those branch
//! values fixed so the finite differences probe the same objective the tape
//! differentiates.

use crate::error::{Error, Result};
use crate::num::Element;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Tolerances and step size for a check run.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOpts {
    /// Central-difference half-step.
    pub step: f64,
    /// Elements where both |analytic| and |numeric| fall below this are
    /// counted as matching zeros and excluded from the relative comparison.
    pub atol: f64,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        GradCheckOpts {
            step: 1e-5,
            atol: 1e-6,
        }
    }
}

/// Outcome of one [`grad_check`] run.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over all compared elements.
    pub max_rel_err: f64,
    /// `(parameter index, element index, analytic, numeric)` of the worst
    /// element, if anything was compared.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Elements compared against finite differences.
    pub compared: usize,
    /// Elements excluded because both gradients were ~zero.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare backward gradients of `f` against central finite differences.
///
/// `f` receives a fresh tape plus one leaf per entry of `params` (same order)
/// and must return a scalar loss node. Gradient leaves are used for the
/// analytic pass; constant leaves for the numeric ones.
pub fn grad_check<T, F>(
    mut f: F,
    params: &[Tensor<T>],
    opts: &GradCheckOpts,
) -> Result<GradCheckReport>
where
    T: Element,
    F: FnMut(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::contract(format!(
            "grad_check function must return a scalar, got shape {:?}",
            tape.value(loss).shape()
        )));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            grads
                .get(*v)
                .map(|g| g.to_f64_vec())
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();

    let eval = |f: &mut F, perturbed: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed
            .iter()
            .map(|p| tape.leaf(p.clone(), false))
            .collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.value(loss).scalar_value()?;
        v.to_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| Error::NonFinite {
                context: "grad_check loss evaluation".to_string(),
            })
    };

    let step = T::from_f64(opts.step).expect("step representable");
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        compared: 0,
        skipped: 0,
    };
    let mut work: Vec<Tensor<T>> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for (ei, &original) in param.data().iter().enumerate() {
            work[pi].data_mut()[ei] = original + step;
            let plus = eval(&mut f, &work)?;
            work[pi].data_mut()[ei] = original - step;
            let minus = eval(&mut f, &work)?;
            work[pi].data_mut()[ei] = original;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[pi][ei];
            let denom = a.abs().max(numeric.abs());
            if denom < opts.atol {
                report.skipped += 1;
                continue;
            }
            let rel = (a - numeric).abs() / denom;
            report.compared += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((pi, ei, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradients_are_near_exact() {
        // loss = Σ x², gradient 2x: central differences are exact for
        // quadratics up to rounding.
        let x = Tensor::new(vec![3], vec![0.5, -1.25, 2.0]).unwrap();
        let report = grad_check(
            |tape, vars| {
                let y = tape.mul(vars[0], vars[0])?;
                Ok(tape.sum_all(y))
            },
            &[x],
            &GradCheckOpts::default(),
        )
        .unwrap();
        assert_eq!(report.compared, 3);
        assert!(report.max_rel_err < 1e-9, "{report:?}");
    }

    #[test]
    fn composed_nonlinear_function_passes_at_1e4() {
        // gelu(x·w) summed: exercises matmul, gelu and sum together.
        let x = Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.7, 1.1, -0.2, 0.3]).unwrap();
        let w = Tensor::new(vec![3, 2], vec![0.5, -0.3, 0.8, 0.1, -0.6, 0.9]).unwrap();
        let report = grad_check(
            |tape, vars| {
                let h = tape.matmul(vars[0], vars[1])?;
                let g = tape.gelu(h);
                Ok(tape.sum_all(g))
            },
            &[x, w],
            &GradCheckOpts::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn detached_parameters_report_zero_and_are_skipped() {
        // loss = Σ (x · stop_gradient(y)): y's analytic gradient is zero and
        // its finite differences are nonzero, but the zero-path exclusion
        // only applies where both are ~0 — so verify x passes and y is
        // caught as a genuine mismatch unless it is excluded from params.
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let report = grad_check(
            |tape, vars| {
                let frozen = tape.stop_gradient(vars[0]);
                let prod = tape.mul(vars[0], frozen)?;
                Ok(tape.sum_all(prod))
            },
            &[x],
            &GradCheckOpts::default(),
        )
        .unwrap();
        // d/dx [x·c]|c=x = c = x itself; the stopped branch contributes via
        // FD, so the analytic gradient x must disagree with FD 2x by the
        // detached share. This documents why callers freeze stopped branches
        // *outside* the function: here the mismatch is expected and large.
        assert!(report.max_rel_err > 0.4, "{report:?}");
    }

    #[test]
    fn frozen_stopped_branch_checks_cleanly() {
        // Same function, but the stopped value enters as a fixed constant:
        // this is the pattern model-level checks use.
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let frozen = x.clone();
        let report = grad_check(
            |tape, vars| {
                let c = tape.constant(frozen.clone());
                let prod = tape.mul(vars[0], c)?;
                Ok(tape.sum_all(prod))
            },
            &[x],
            &GradCheckOpts::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "{report:?}");
    }
}
