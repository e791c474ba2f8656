//! Parameter bookkeeping and the per-step forward context.
//!
//! Model structs own their tensors and implement [`Params`] to expose them by
//! stable dotted names ("encoder.h0.b0.attn.q0.w"). A [`Pass`] wraps one tape
//! for one forward build: it registers parameters as leaves exactly once (so
//! weight sharing between the student and teacher branches lands on the same
//! node), draws dropout masks, and collects batch-norm statistics updates for
//! the trainer to apply after the step.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::num::{lit, Element};
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::Tensor;

/// Whether a tensor is trained by the optimizer or merely persisted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by Adam and eligible for gradients.
    Learnable,
    /// Persisted state that training updates out-of-band (running statistics).
    Buffer,
}

/// Walk every tensor of a model component in a fixed order.
pub trait Params<T: Element> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>));
}

/// Clone out `(name, tensor)` pairs, optionally including buffers.
pub fn named_tensors<T: Element>(
    p: &dyn Params<T>,
    include_buffers: bool,
) -> Vec<(String, Tensor<T>)> {
    let mut out = Vec::new();
    p.visit(&mut |name, kind, t| {
        if include_buffers || kind == ParamKind::Learnable {
            out.push((name.to_string(), t.clone()));
        }
    });
    out
}

/// Total element count of the learnable tensors.
pub fn learnable_count<T: Element>(p: &dyn Params<T>) -> usize {
    let mut n = 0;
    p.visit(&mut |_, kind, t| {
        if kind == ParamKind::Learnable {
            n += t.numel();
        }
    });
    n
}

/// Overwrite a model's tensors from a name → tensor map. Every visited
/// tensor must appear in `source` unless `missing_ok`; shape mismatches
/// always fail. Extra entries in `source` are ignored, which lets a
/// forecasting model load just the backbone out of a pre-training
/// checkpoint.
pub fn load_named<T: Element>(
    model: &mut dyn Params<T>,
    source: &HashMap<String, Tensor<T>>,
    missing_ok: bool,
) -> Result<()> {
    let mut first_err: Option<crate::error::Error> = None;
    model.visit_mut(&mut |name, _, t| {
        if first_err.is_some() {
            return;
        }
        match source.get(name) {
            Some(src) => {
                if src.shape() != t.shape() {
                    first_err = Some(crate::error::Error::state(format!(
                        "tensor '{name}' has shape {:?} but the stored copy has {:?}",
                        t.shape(),
                        src.shape()
                    )));
                } else {
                    *t = src.clone();
                }
            }
            None if missing_ok => {}
            None => {
                first_err = Some(crate::error::Error::state(format!(
                    "tensor '{name}' is missing from the stored parameters"
                )));
            }
        }
    });
    match first_err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// A batch-norm statistics update queued during a training forward pass.
pub struct StatUpdate<T> {
    /// Base name of the batch-norm layer (buffers are `<name>.running_mean`
    /// and `<name>.running_var`).
    pub name: String,
    pub momentum: T,
    pub stats: BatchStats<T>,
}

/// Fold queued batch statistics into the model's running statistics:
/// `running = (1 − momentum) · running + momentum · batch`.
pub fn apply_stat_updates<T: Element>(model: &mut dyn Params<T>, updates: &[StatUpdate<T>]) {
    if updates.is_empty() {
        return;
    }
    let mut by_name: HashMap<String, (&StatUpdate<T>, bool)> = HashMap::new();
    for u in updates {
        // Later updates of the same layer within a step win, matching
        // execution order.
        by_name.insert(u.name.clone(), (u, true));
    }
    model.visit_mut(&mut |name, kind, t| {
        if kind != ParamKind::Buffer {
            return;
        }
        let (base, is_mean) = if let Some(b) = name.strip_suffix(".running_mean") {
            (b, true)
        } else if let Some(b) = name.strip_suffix(".running_var") {
            (b, false)
        } else {
            return;
        };
        if let Some((u, _)) = by_name.get(base) {
            let batch = if is_mean { &u.stats.mean } else { &u.stats.var };
            let keep = T::one() - u.momentum;
            for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                *r = keep * *r + u.momentum * b;
            }
        }
    });
}

/// One forward build on one tape.
pub struct Pass<'t, T: Element> {
    pub tape: &'t mut Tape<T>,
    bindings: HashMap<String, Var>,
    overrides: HashMap<String, Var>,
    trainable: bool,
    frozen_prefixes: Vec<String>,
    dropout_rng: Option<ChaCha8Rng>,
    pub stat_updates: Vec<StatUpdate<T>>,
}

impl<'t, T: Element> Pass<'t, T> {
    /// Context for a training step: parameters become gradient leaves and
    /// dropout draws from `rng`.
    pub fn train(tape: &'t mut Tape<T>, rng: ChaCha8Rng) -> Self {
        Pass {
            tape,
            bindings: HashMap::new(),
            overrides: HashMap::new(),
            trainable: true,
            frozen_prefixes: Vec::new(),
            dropout_rng: Some(rng),
            stat_updates: Vec::new(),
        }
    }

    /// Context for inference: nothing requires gradients, dropout is off.
    pub fn eval(tape: &'t mut Tape<T>) -> Self {
        Pass {
            tape,
            bindings: HashMap::new(),
            overrides: HashMap::new(),
            trainable: false,
            frozen_prefixes: Vec::new(),
            dropout_rng: None,
            stat_updates: Vec::new(),
        }
    }

    /// Freeze every parameter whose name starts with one of `prefixes`
    /// (used by linear probing).
    pub fn with_frozen(mut self, prefixes: &[&str]) -> Self {
        self.frozen_prefixes = prefixes.iter().map(|s| s.to_string()).collect();
        self
    }

    /// Route named parameters to pre-existing tape nodes instead of binding
    /// fresh leaves. The gradient checker uses this to drive a model forward
    /// from externally controlled leaves.
    pub fn with_bindings(mut self, map: HashMap<String, Var>) -> Self {
        self.overrides = map;
        self
    }

    /// Bind a named parameter, reusing the existing node on repeat calls.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(v) = self.overrides.get(name) {
            return *v;
        }
        if let Some(v) = self.bindings.get(name) {
            return *v;
        }
        let requires_grad = self.trainable
            && !self
                .frozen_prefixes
                .iter()
                .any(|p| name.starts_with(p.as_str()));
        let v = self.tape.leaf(value.clone(), requires_grad);
        self.bindings.insert(name.to_string(), v);
        v
    }

    /// Put a non-learnable value on the tape.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.tape.constant(value)
    }

    /// Node a parameter was bound to during this pass, if it was used.
    pub fn binding(&self, name: &str) -> Option<Var> {
        self.overrides
            .get(name)
            .or_else(|| self.bindings.get(name))
            .copied()
    }

    /// Copy of the name → node map, for use after the pass is dropped
    /// (trainers look gradients up by parameter name).
    pub fn bindings_map(&self) -> HashMap<String, Var> {
        self.bindings.clone()
    }

    /// Whether this pass trains (controls batch-norm statistics pushes).
    pub fn is_train(&self) -> bool {
        self.trainable
    }

    /// Inverted dropout: identity when no RNG is attached or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - p;
        let shape = self.tape.shape(x).to_vec();
        let numel: usize = shape.iter().product();
        let scale = lit::<T>(1.0 / keep);
        let mask_data: Vec<T> = (0..numel)
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        let mask = self.tape.constant(Tensor::new(shape, mask_data)?);
        self.tape.mul(x, mask)
    }

    /// Queue a batch-norm running-statistics update.
    pub fn push_stats(&mut self, name: &str, momentum: T, stats: BatchStats<T>) {
        self.stat_updates.push(StatUpdate {
            name: name.to_string(),
            momentum,
            stats,
        });
    }
}
