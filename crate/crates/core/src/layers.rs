//! Reusable network layers: linear maps, batch norm, multi-head attention
//! and the post-norm transformer block.
//!
//! Each layer owns its tensors and a full dotted name assigned at init
//! ("encoder.h0.b0.attn"); binding onto a tape goes through [`Pass::param`]
//! so repeated forwards (student and teacher) share nodes. Blocks follow the
//! post-norm residual layout: sublayer, add, batch norm.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::num::{lit, Element};
use crate::params::{ParamKind, Params, Pass};
use crate::rng::trunc_normal;
use crate::tape::{Mode, Var};
use crate::tensor::Tensor;

/// Draw a `[rows, cols]` weight with truncated-normal entries (std 0.02).
pub fn init_weight<T: Element>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<T> {
    let data: Vec<T> = (0..rows * cols)
        .map(|_| lit(trunc_normal(rng, 0.02)))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("sized buffer")
}

// ── linear ──────────────────────────────────────────────────────────────────

/// Affine map `x·w + b` with `w: [in, out]`, `b: [out]`.
pub struct Linear<T> {
    pub name: String,
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Element> Linear<T> {
    pub fn init(name: impl Into<String>, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            name: name.into(),
            w: init_weight(rng, d_in, d_out),
            b: Tensor::zeros(&[d_out]),
        }
    }

    pub fn forward(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let w = pass.param(&format!("{}.w", self.name), &self.w);
        let b = pass.param(&format!("{}.b", self.name), &self.b);
        let h = pass.tape.matmul(x, w)?;
        pass.tape.add(h, b)
    }
}

impl<T: Element> Params<T> for Linear<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        f(&format!("{}.w", self.name), ParamKind::Learnable, &self.w);
        f(&format!("{}.b", self.name), ParamKind::Learnable, &self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        f(&format!("{}.w", self.name), ParamKind::Learnable, &mut self.w);
        f(&format!("{}.b", self.name), ParamKind::Learnable, &mut self.b);
    }
}

// ── batch norm ──────────────────────────────────────────────────────────────

/// Batch normalization over (batch, tokens) per channel, with running
/// statistics for eval mode. Train-mode forwards queue a running-stats
/// update on the pass; the trainer applies it after the step.
pub struct BatchNorm<T> {
    pub name: String,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Element> BatchNorm<T> {
    pub fn init(name: impl Into<String>, d: usize) -> Self {
        BatchNorm {
            name: name.into(),
            gamma: Tensor::full(&[d], T::one()),
            beta: Tensor::zeros(&[d]),
            running_mean: Tensor::zeros(&[d]),
            running_var: Tensor::full(&[d], T::one()),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, pass: &mut Pass<'_, T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = pass.param(&format!("{}.gamma", self.name), &self.gamma);
        let beta = pass.param(&format!("{}.beta", self.name), &self.beta);
        let (y, stats) = pass.tape.batch_norm(
            x,
            gamma,
            beta,
            &self.running_mean,
            &self.running_var,
            lit(self.eps),
            mode,
        )?;
        if let Some(stats) = stats {
            pass.push_stats(&self.name, lit(self.momentum), stats);
        }
        Ok(y)
    }
}

impl<T: Element> Params<T> for BatchNorm<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        f(&format!("{}.gamma", self.name), ParamKind::Learnable, &self.gamma);
        f(&format!("{}.beta", self.name), ParamKind::Learnable, &self.beta);
        f(
            &format!("{}.running_mean", self.name),
            ParamKind::Buffer,
            &self.running_mean,
        );
        f(
            &format!("{}.running_var", self.name),
            ParamKind::Buffer,
            &self.running_var,
        );
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        f(
            &format!("{}.gamma", self.name),
            ParamKind::Learnable,
            &mut self.gamma,
        );
        f(
            &format!("{}.beta", self.name),
            ParamKind::Learnable,
            &mut self.beta,
        );
        f(
            &format!("{}.running_mean", self.name),
            ParamKind::Buffer,
            &mut self.running_mean,
        );
        f(
            &format!("{}.running_var", self.name),
            ParamKind::Buffer,
            &mut self.running_var,
        );
    }
}

// ── multi-head attention ────────────────────────────────────────────────────

/// Attention output plus the post-softmax weights per head (kept for
/// inspection in tests; tapes discard them otherwise).
pub struct AttnOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product attention with per-head projections and an
/// output projection. Queries may come from a different source than
/// keys/values, which is how the decoder's cross-attention uses it.
pub struct MultiHeadAttention<T> {
    pub name: String,
    pub heads: usize,
    pub wq: Vec<Linear<T>>,
    pub wk: Vec<Linear<T>>,
    pub wv: Vec<Linear<T>>,
    pub wo: Linear<T>,
    pub dropout: f64,
}

impl<T: Element> MultiHeadAttention<T> {
    pub fn init(
        name: impl Into<String>,
        d: usize,
        heads: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let name = name.into();
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "attention width {d} must divide evenly into {heads} heads"
            )));
        }
        let dk = d / heads;
        let mk = |tag: &str, h: usize, rng: &mut ChaCha8Rng| {
            Linear::init(format!("{name}.{tag}{h}"), d, dk, rng)
        };
        let mut wq = Vec::new();
        let mut wk = Vec::new();
        let mut wv = Vec::new();
        for h in 0..heads {
            wq.push(mk("q", h, rng));
            wk.push(mk("k", h, rng));
            wv.push(mk("v", h, rng));
        }
        let wo = Linear::init(format!("{name}.o"), d, d, rng);
        Ok(MultiHeadAttention {
            name,
            heads,
            wq,
            wk,
            wv,
            wo,
            dropout,
        })
    }

    /// `q_input: [.., n_q, d]`, `kv_input: [.., n_kv, d]` → `[.., n_q, d]`.
    pub fn forward(
        &self,
        pass: &mut Pass<'_, T>,
        q_input: Var,
        kv_input: Var,
        mode: Mode,
    ) -> Result<AttnOutput> {
        let nq = pass.tape.shape(q_input).to_vec();
        let nkv = pass.tape.shape(kv_input).to_vec();
        if nq.len() < 2 || nkv.len() < 2 {
            return Err(Error::contract(format!(
                "attention inputs need rank >= 2, got {:?} and {:?}",
                nq, nkv
            )));
        }
        let d = *nq.last().expect("rank checked");
        let dk = d / self.heads;
        let scale = lit::<T>(1.0 / (dk as f64).sqrt());
        let mut head_outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = self.wq[h].forward(pass, q_input)?;
            let k = self.wk[h].forward(pass, kv_input)?;
            let v = self.wv[h].forward(pass, kv_input)?;
            let kt = pass.tape.transpose_last2(k)?;
            let scores = pass.tape.matmul(q, kt)?;
            let scaled = pass.tape.scale(scores, scale);
            let attn = pass.tape.softmax_rows(scaled)?;
            weights.push(attn);
            let attn = if mode == Mode::Train {
                pass.dropout(attn, self.dropout)?
            } else {
                attn
            };
            head_outs.push(pass.tape.matmul(attn, v)?);
        }
        let cat_axis = nq.len() - 1;
        let cat = pass.tape.concat(&head_outs, cat_axis)?;
        let out = self.wo.forward(pass, cat)?;
        Ok(AttnOutput { out, weights })
    }
}

impl<T: Element> Params<T> for MultiHeadAttention<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        for l in self.wq.iter().chain(&self.wk).chain(&self.wv) {
            l.visit(f);
        }
        self.wo.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        for l in self
            .wq
            .iter_mut()
            .chain(self.wk.iter_mut())
            .chain(self.wv.iter_mut())
        {
            l.visit_mut(f);
        }
        self.wo.visit_mut(f);
    }
}

// ── transformer blocks ──────────────────────────────────────────────────────

/// Post-norm transformer block: `y1 = BN(x + MSA(x))`,
/// `y = BN(y1 + FFN(y1))` with a GELU feed-forward.
pub struct TransformerBlock<T> {
    pub name: String,
    pub attn: MultiHeadAttention<T>,
    pub bn1: BatchNorm<T>,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
    pub bn2: BatchNorm<T>,
    pub dropout: f64,
}

impl<T: Element> TransformerBlock<T> {
    pub fn init(
        name: impl Into<String>,
        d: usize,
        heads: usize,
        d_ff: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let name = name.into();
        Ok(TransformerBlock {
            attn: MultiHeadAttention::init(format!("{name}.attn"), d, heads, dropout, rng)?,
            bn1: BatchNorm::init(format!("{name}.bn1"), d),
            ff1: Linear::init(format!("{name}.ff1"), d, d_ff, rng),
            ff2: Linear::init(format!("{name}.ff2"), d_ff, d, rng),
            bn2: BatchNorm::init(format!("{name}.bn2"), d),
            dropout,
            name,
        })
    }

    pub fn forward(&self, pass: &mut Pass<'_, T>, x: Var, mode: Mode) -> Result<Var> {
        let attn = self.attn.forward(pass, x, x, mode)?.out;
        let r1 = pass.tape.add(x, attn)?;
        let y1 = self.bn1.forward(pass, r1, mode)?;
        let h = self.ff1.forward(pass, y1)?;
        let h = pass.tape.gelu(h);
        let h = self.ff2.forward(pass, h)?;
        let h = if mode == Mode::Train {
            pass.dropout(h, self.dropout)?
        } else {
            h
        };
        let r2 = pass.tape.add(y1, h)?;
        self.bn2.forward(pass, r2, mode)
    }
}

impl<T: Element> Params<T> for TransformerBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        self.attn.visit(f);
        self.bn1.visit(f);
        self.ff1.visit(f);
        self.ff2.visit(f);
        self.bn2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.attn.visit_mut(f);
        self.bn1.visit_mut(f);
        self.ff1.visit_mut(f);
        self.ff2.visit_mut(f);
        self.bn2.visit_mut(f);
    }
}

/// Cross-attention sublayer with its own post-norm: queries attend over a
/// separate key/value sequence, then residual + batch norm.
pub struct CrossAttnBlock<T> {
    pub name: String,
    pub attn: MultiHeadAttention<T>,
    pub bn: BatchNorm<T>,
}

impl<T: Element> CrossAttnBlock<T> {
    pub fn init(
        name: impl Into<String>,
        d: usize,
        heads: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let name = name.into();
        Ok(CrossAttnBlock {
            attn: MultiHeadAttention::init(format!("{name}.attn"), d, heads, dropout, rng)?,
            bn: BatchNorm::init(format!("{name}.bn"), d),
            name,
        })
    }

    pub fn forward(
        &self,
        pass: &mut Pass<'_, T>,
        queries: Var,
        kv: Var,
        mode: Mode,
    ) -> Result<Var> {
        let attn = self.attn.forward(pass, queries, kv, mode)?.out;
        let r = pass.tape.add(queries, attn)?;
        self.bn.forward(pass, r, mode)
    }
}

impl<T: Element> Params<T> for CrossAttnBlock<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        self.attn.visit(f);
        self.bn.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.attn.visit_mut(f);
        self.bn.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tape::Tape;

    fn rng() -> ChaCha8Rng {
        stream(42, "init", 0, 0)
    }

    #[test]
    fn attention_single_kv_row_returns_projected_value() {
        // With one key/value row the softmax is exactly 1, so the output is
        // v·wo + biases regardless of the query values.
        let mut r = rng();
        let mha = MultiHeadAttention::<f64>::init("t.attn", 4, 2, 0.0, &mut r).unwrap();
        let mut tape = Tape::new();
        let (out1, out2) = {
            let mut pass = Pass::eval(&mut tape);
            let q1 = pass.constant(Tensor::new(vec![1, 2, 4], vec![0.3; 8]).unwrap());
            let q2 = pass.constant(Tensor::new(vec![1, 2, 4], vec![-1.7; 8]).unwrap());
            let kv = pass.constant(Tensor::new(vec![1, 1, 4], vec![0.5, -0.25, 1.0, 2.0]).unwrap());
            let o1 = mha.forward(&mut pass, q1, kv, Mode::Eval).unwrap().out;
            let o2 = mha.forward(&mut pass, q2, kv, Mode::Eval).unwrap().out;
            (o1, o2)
        };
        let a = tape.value(out1).data();
        let b = tape.value(out2).data();
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn attention_weights_rows_sum_to_one() {
        let mut r = rng();
        let mha = MultiHeadAttention::<f64>::init("t.attn", 8, 4, 0.0, &mut r).unwrap();
        let mut tape = Tape::new();
        let weights = {
            let mut pass = Pass::eval(&mut tape);
            let x = pass.constant(Tensor::new(vec![2, 5, 8], (0..80).map(|i| (i as f64).sin()).collect()).unwrap());
            mha.forward(&mut pass, x, x, Mode::Eval).unwrap().weights
        };
        for w in weights {
            let t = tape.value(w);
            let n = *t.shape().last().unwrap();
            for row in 0..t.numel() / n {
                let s: f64 = t.data()[row * n..(row + 1) * n].iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
            }
        }
    }

    #[test]
    fn attention_is_invariant_to_duplicated_kv_rows() {
        // Duplicating every key/value row doubles each unnormalized weight
        // and the normalizer, leaving the convex combination unchanged.
        let mut r = rng();
        let mha = MultiHeadAttention::<f64>::init("t.attn", 4, 2, 0.0, &mut r).unwrap();
        let kv_data: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).cos()).collect();
        let doubled: Vec<f64> = kv_data.iter().chain(kv_data.iter()).copied().collect();
        let mut tape = Tape::new();
        let (o1, o2) = {
            let mut pass = Pass::eval(&mut tape);
            let q = pass.constant(Tensor::new(vec![1, 2, 4], (0..8).map(|i| 0.1 * i as f64).collect()).unwrap());
            let kv = pass.constant(Tensor::new(vec![1, 3, 4], kv_data.clone()).unwrap());
            let kv2 = pass.constant(Tensor::new(vec![1, 6, 4], doubled).unwrap());
            let o1 = mha.forward(&mut pass, q, kv, Mode::Eval).unwrap().out;
            let o2 = mha.forward(&mut pass, q, kv2, Mode::Eval).unwrap().out;
            (o1, o2)
        };
        for (a, b) in tape.value(o1).data().iter().zip(tape.value(o2).data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn block_with_zero_weights_and_identity_norm_passes_input_through() {
        // Zero value/output projections kill the attention and FFN branches;
        // with fresh batch-norm state (mean 0, var 1, gamma 1, beta 0) in
        // eval mode the block is the identity up to the 1/sqrt(1+eps) factor.
        let mut r = rng();
        let mut block = TransformerBlock::<f64>::init("t.b", 4, 2, 8, 0.0, &mut r).unwrap();
        for l in block.attn.wv.iter_mut() {
            l.w = Tensor::zeros(&[4, 2]);
        }
        block.attn.wo.w = Tensor::zeros(&[4, 4]);
        block.ff2.w = Tensor::zeros(&[8, 4]);
        let mut tape = Tape::new();
        let y = {
            let mut pass = Pass::eval(&mut tape);
            let x = pass.constant(
                Tensor::new(vec![2, 3, 4], (0..24).map(|i| (i as f64 * 0.21).sin()).collect())
                    .unwrap(),
            );
            let y = block.forward(&mut pass, x, Mode::Eval).unwrap();
            (x, y)
        };
        let (x, yv) = (tape.value(y.0).data(), tape.value(y.1).data());
        for (a, b) in x.iter().zip(yv) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn block_preserves_shape_for_various_token_counts() {
        let mut r = rng();
        let block = TransformerBlock::<f64>::init("t.b", 8, 4, 16, 0.0, &mut r).unwrap();
        for n in [1usize, 4, 84] {
            let mut tape = Tape::new();
            let shape = {
                let mut pass = Pass::eval(&mut tape);
                let x = pass.constant(Tensor::full(&[2, n, 8], 0.5));
                let y = block.forward(&mut pass, x, Mode::Eval).unwrap();
                pass.tape.shape(y).to_vec()
            };
            assert_eq!(shape, vec![2, n, 8]);
        }
    }

    #[test]
    fn attention_rejects_indivisible_head_count() {
        let mut r = rng();
        assert!(MultiHeadAttention::<f64>::init("t", 6, 4, 0.0, &mut r).is_err());
    }
}
