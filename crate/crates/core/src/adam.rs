//! Adam optimizer with bias correction.
//!
//! State is keyed by parameter name so the update order never depends on map
//! iteration: the caller walks its parameters in a fixed order and calls
//! [`AdamState::update`] per tensor. A training step first validates every
//! gradient with [`AdamState::check_finite`] so a NaN aborts before any
//! parameter has been touched.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::num::{lit, Element};
use crate::params::{ParamKind, Params};
use crate::tape::{Gradients, Var};
use crate::tensor::Tensor;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Slot<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Optimizer state: first/second moments per parameter plus a step counter.
pub struct AdamState<T> {
    cfg: AdamConfig,
    t: u32,
    slots: BTreeMap<String, Slot<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        AdamState {
            cfg,
            t: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u32 {
        self.t
    }

    /// Fail if a gradient contains NaN or infinity, naming the parameter.
    pub fn check_finite(name: &str, grad: &Tensor<T>) -> Result<()> {
        if !grad.all_finite() {
            return Err(Error::NonFinite {
                context: format!("gradient of parameter '{name}'"),
            });
        }
        Ok(())
    }

    /// Start a new optimization step (bumps the shared step counter).
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Apply one Adam update to a single parameter. A missing gradient is
    /// treated as zero (the moments still decay).
    pub fn update(
        &mut self,
        name: &str,
        param: &mut Tensor<T>,
        grad: Option<&Tensor<T>>,
    ) -> Result<()> {
        if self.t == 0 {
            return Err(Error::state("call begin_step before update"));
        }
        if let Some(g) = grad {
            if g.shape() != param.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: param.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            Self::check_finite(name, g)?;
        }
        let n = param.numel();
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        });
        if slot.m.len() != n {
            return Err(Error::state(format!(
                "optimizer state for '{name}' has {} elements but the parameter has {n}",
                slot.m.len()
            )));
        }
        let b1: T = lit(self.cfg.beta1);
        let b2: T = lit(self.cfg.beta2);
        let lr: T = lit(self.cfg.lr);
        let eps: T = lit(self.cfg.eps);
        let bc1 = T::one() - b1.powi(self.t as i32);
        let bc2 = T::one() - b2.powi(self.t as i32);
        let data = param.data_mut();
        for (i, x) in data.iter_mut().enumerate() {
            let g = grad.map_or(T::zero(), |g| g.data()[i]);
            slot.m[i] = b1 * slot.m[i] + (T::one() - b1) * g;
            slot.v[i] = b2 * slot.v[i] + (T::one() - b2) * g * g;
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// One optimizer step over a whole model: walk the parameters in visitor
/// order, look each gradient up via the pass bindings, and update in place.
/// Parameters that never reached the tape (or were frozen) see a missing
/// gradient and stay bit-identical.
pub fn apply_step<T: Element>(
    model: &mut dyn Params<T>,
    bindings: &HashMap<String, Var>,
    grads: &Gradients<T>,
    adam: &mut AdamState<T>,
) -> Result<()> {
    adam.begin_step();
    let mut first_err: Option<Error> = None;
    model.visit_mut(&mut |name, kind, tensor| {
        if first_err.is_some() || kind != ParamKind::Learnable {
            return;
        }
        let grad = bindings.get(name).and_then(|v| grads.get(*v));
        if let Err(e) = adam.update(name, tensor, grad) {
            first_err = Some(e);
        }
    });
    match first_err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn zero_gradient_never_moves_parameters() {
        let mut adam = AdamState::<f64>::new(AdamConfig::default());
        let mut p = vec1(&[1.0, -2.0]);
        let zero = vec1(&[0.0, 0.0]);
        for _ in 0..25 {
            adam.begin_step();
            adam.update("p", &mut p, Some(&zero)).unwrap();
        }
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_about_lr() {
        // With g=1 on the first step, m_hat = v_hat = 1, so the update is
        // lr / (1 + eps).
        let cfg = AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::<f64>::new(cfg);
        let mut p = vec1(&[0.5]);
        adam.begin_step();
        adam.update("p", &mut p, Some(&vec1(&[1.0]))).unwrap();
        let moved = 0.5 - p.data()[0];
        let expect = 1e-3 / (1.0 + 1e-8);
        assert!((moved - expect).abs() < 1e-15, "moved {moved}");
        assert!((moved - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn nan_gradient_is_rejected_by_name() {
        let mut adam = AdamState::<f64>::new(AdamConfig::default());
        let mut p = vec1(&[1.0]);
        adam.begin_step();
        let err = adam
            .update("encoder.w", &mut p, Some(&vec1(&[f64::NAN])))
            .unwrap_err()
            .to_string();
        assert!(err.contains("encoder.w"), "{err}");
    }

    #[test]
    fn identical_parameters_with_identical_gradients_stay_identical() {
        let mut adam = AdamState::<f64>::new(AdamConfig::default());
        let mut a = vec1(&[0.3, -0.7]);
        let mut b = vec1(&[0.3, -0.7]);
        for step in 0..50 {
            let g = vec1(&[(step as f64).sin(), 0.25]);
            adam.begin_step();
            adam.update("a", &mut a, Some(&g)).unwrap();
            adam.update("b", &mut b, Some(&g)).unwrap();
        }
        assert_eq!(a.data(), b.data());
    }
}
