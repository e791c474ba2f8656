//! Masked pre-training with hierarchical self-distillation.
//!
//! Each training window is split at the coarse-patch level into a visible
//! and a masked stream. The student encodes the visible stream in train
//! mode; the teacher is the same backbone run over the masked stream in
//! eval mode, behind a stop-gradient. One decoder per hierarchy turns
//! learnable position queries plus the student's features into masked
//! feature predictions `ẑ` (distilled against the teacher) and value
//! reconstructions `x̂` (regressed against raw window slices). The step
//! loss is `α·Σ_l L_dist + β·Σ_l L_recon`.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::adam::{apply_step, AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::layers::{CrossAttnBlock, Linear, TransformerBlock};
use crate::model::Backbone;
use crate::num::{lit, Element};
use crate::params::{
    apply_stat_updates, ParamKind, Params, Pass, StatUpdate,
};
use crate::patching::{
    make_mask_plan, masked_positions_at_level, segment_series, split_visible_masked, MaskPlan,
    PatchSpec,
};
use crate::rng::{normal, stream};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

/// Distance used for the feature-distillation terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillMetric {
    SmoothL1,
    Cosine,
}

/// Pre-training knobs (geometry lives on the model).
#[derive(Debug, Clone)]
pub struct PretrainSettings {
    pub mask_ratio: f64,
    pub alpha: f64,
    pub beta: f64,
    pub threshold: f64,
    pub distill: DistillMetric,
    pub use_hsd: bool,
    pub detach_kv: bool,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        PretrainSettings {
            mask_ratio: 0.5,
            alpha: 1.0,
            beta: 1.0,
            threshold: 1.0,
            distill: DistillMetric::SmoothL1,
            use_hsd: true,
            detach_kv: false,
        }
    }
}

// ── decoders ────────────────────────────────────────────────────────────────

/// Per-hierarchy decoder: learnable queries for each grid position, one
/// cross-attention block over the student features, one self-attention
/// block among the queries, and a linear readout to the segment values.
pub struct HierDecoder<T> {
    pub name: String,
    pub queries: Tensor<T>,
    pub cross: CrossAttnBlock<T>,
    pub selfb: TransformerBlock<T>,
    pub head: Linear<T>,
}

impl<T: Element> HierDecoder<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        name: impl Into<String>,
        grid: usize,
        d: usize,
        heads: usize,
        d_ff: usize,
        seg_len: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let name = name.into();
        let qdata: Vec<T> = (0..grid * d).map(|_| lit(normal(rng, 0.02))).collect();
        Ok(HierDecoder {
            queries: Tensor::new(vec![grid, d], qdata).expect("sized buffer"),
            cross: CrossAttnBlock::init(format!("{name}.cross"), d, heads, dropout, rng)?,
            selfb: TransformerBlock::init(format!("{name}.self"), d, heads, d_ff, dropout, rng)?,
            head: Linear::init(format!("{name}.head"), d, seg_len, rng),
            name,
        })
    }

    /// `kv: [batch, n_vis, d]`; `positions` holds `batch·m` grid indices.
    /// Returns predicted features `[batch, m, d]` and values `[batch, m, seg]`.
    pub fn decode(
        &self,
        pass: &mut Pass<'_, T>,
        kv: Var,
        positions: &[usize],
        batch: usize,
        mode: Mode,
    ) -> Result<(Var, Var)> {
        if batch == 0 || !positions.len().is_multiple_of(batch) {
            return Err(Error::contract(format!(
                "{} positions do not tile a batch of {batch}",
                positions.len()
            )));
        }
        let m = positions.len() / batch;
        let d = self.queries.shape()[1];
        let table = pass.param(&format!("{}.queries", self.name), &self.queries);
        let q = pass.tape.gather_rows(table, positions)?;
        let q = pass.tape.reshape(q, vec![batch, m, d])?;
        let y = self.cross.forward(pass, q, kv, mode)?;
        let zhat = self.selfb.forward(pass, y, mode)?;
        let xhat = self.head.forward(pass, zhat)?;
        Ok((zhat, xhat))
    }
}

impl<T: Element> Params<T> for HierDecoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        f(
            &format!("{}.queries", self.name),
            ParamKind::Learnable,
            &self.queries,
        );
        self.cross.visit(f);
        self.selfb.visit(f);
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        f(
            &format!("{}.queries", self.name),
            ParamKind::Learnable,
            &mut self.queries,
        );
        self.cross.visit_mut(f);
        self.selfb.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// Position-blind replacement used by the "no decoupled decoder" ablation:
/// mean-pool the student features, map `d → d`, broadcast over the masked
/// slots, and read the values out linearly. Keeps both loss terms defined
/// so ablation metrics stay comparable.
pub struct PooledDecoder<T> {
    pub name: String,
    pub feat: Linear<T>,
    pub head: Linear<T>,
}

impl<T: Element> PooledDecoder<T> {
    pub fn init(
        name: impl Into<String>,
        d: usize,
        seg_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let name = name.into();
        PooledDecoder {
            feat: Linear::init(format!("{name}.feat"), d, d, rng),
            head: Linear::init(format!("{name}.head"), d, seg_len, rng),
            name,
        }
    }

    pub fn decode(&self, pass: &mut Pass<'_, T>, kv: Var, m: usize) -> Result<(Var, Var)> {
        let shape = pass.tape.shape(kv).to_vec();
        if shape.len() != 3 {
            return Err(Error::contract(format!(
                "pooled decoder expects [batch, tokens, d], got {:?}",
                shape
            )));
        }
        let n = shape[1];
        let pool_row = pass.constant(Tensor::full(&[1, n], lit(1.0 / n as f64)));
        let pooled = pass.tape.matmul(pool_row, kv)?;
        let zfeat = self.feat.forward(pass, pooled)?;
        let tile = pass.constant(Tensor::full(&[m, 1], T::one()));
        let zhat = pass.tape.matmul(tile, zfeat)?;
        let xhat = self.head.forward(pass, zhat)?;
        Ok((zhat, xhat))
    }
}

impl<T: Element> Params<T> for PooledDecoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        self.feat.visit(f);
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.feat.visit_mut(f);
        self.head.visit_mut(f);
    }
}

// ── model ───────────────────────────────────────────────────────────────────

/// Backbone plus one decoder per hierarchy (cross-attention decoders, or
/// pooled stand-ins when `use_ded` is off).
pub struct PretrainModel<T> {
    pub backbone: Backbone<T>,
    pub decoders: Vec<HierDecoder<T>>,
    pub pooled: Vec<PooledDecoder<T>>,
    pub use_ded: bool,
}

impl<T: Element> PretrainModel<T> {
    pub fn init(
        backbone: Backbone<T>,
        dec_heads: usize,
        use_ded: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = backbone.d();
        let d_ff = backbone.encoder.cfg.d_ff;
        let dropout = backbone.encoder.cfg.dropout;
        let mut decoders = Vec::new();
        let mut pooled = Vec::new();
        for level in 1..=backbone.levels() {
            let name = format!("dec.l{level}");
            let seg = backbone.spec.seg_len(level);
            if use_ded {
                decoders.push(HierDecoder::init(
                    name,
                    backbone.grid_tokens(level),
                    d,
                    dec_heads,
                    d_ff,
                    seg,
                    dropout,
                    rng,
                )?);
            } else {
                pooled.push(PooledDecoder::init(name, d, seg, rng));
            }
        }
        Ok(PretrainModel {
            backbone,
            decoders,
            pooled,
            use_ded,
        })
    }
}

impl<T: Element> Params<T> for PretrainModel<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        self.backbone.visit(f);
        for d in &self.decoders {
            d.visit(f);
        }
        for p in &self.pooled {
            p.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.backbone.visit_mut(f);
        for d in &mut self.decoders {
            d.visit_mut(f);
        }
        for p in &mut self.pooled {
            p.visit_mut(f);
        }
    }
}

// ── batches ─────────────────────────────────────────────────────────────────

/// A collated masked batch. Every sample shares the window length, the
/// masked count, and therefore every per-level token count.
pub struct PretrainBatch<T> {
    pub batch: usize,
    /// `[batch, n_visible·n_sub, sp]`
    pub visible_tokens: Tensor<T>,
    pub visible_positions: Vec<usize>,
    /// `[batch, n_masked·n_sub, sp]`
    pub masked_tokens: Tensor<T>,
    pub masked_positions: Vec<usize>,
    /// Per level: `batch · m_l` grid indices for the decoder queries.
    pub level_positions: Vec<Vec<usize>>,
    /// Per level: `[batch, m_l, seg_len(l)]` raw-value targets.
    pub targets: Vec<Tensor<T>>,
}

/// Segment and split a batch of windows under their mask plans.
pub fn collate_masked<T: Element>(
    windows: &[&[T]],
    plans: &[MaskPlan],
    spec: PatchSpec,
) -> Result<PretrainBatch<T>> {
    if windows.is_empty() || windows.len() != plans.len() {
        return Err(Error::contract(format!(
            "batch needs one mask plan per window, got {} windows and {} plans",
            windows.len(),
            plans.len()
        )));
    }
    let b = windows.len();
    let levels = spec.levels;
    let n_masked = plans[0].masked.len();
    let n_visible = plans[0].visible.len();
    let mut vis_values = Vec::new();
    let mut vis_positions = Vec::new();
    let mut mask_values = Vec::new();
    let mut mask_positions = Vec::new();
    let mut level_positions: Vec<Vec<usize>> = vec![Vec::new(); levels];
    let mut target_values: Vec<Vec<T>> = vec![Vec::new(); levels];
    for (w, plan) in windows.iter().zip(plans) {
        if plan.masked.len() != n_masked {
            return Err(Error::contract(format!(
                "mask plans in one batch must mask the same count: {} vs {n_masked}",
                plan.masked.len()
            )));
        }
        let set = segment_series(w, spec)?;
        let (vis, masked) = split_visible_masked(&set, plan)?;
        vis_values.extend_from_slice(&vis.values);
        vis_positions.extend_from_slice(&vis.positions);
        mask_values.extend_from_slice(&masked.values);
        mask_positions.extend_from_slice(&masked.positions);
        for level in 1..=levels {
            level_positions[level - 1]
                .extend(masked_positions_at_level(plan, spec, level));
            target_values[level - 1].extend(targets_slices(&set, plan, level)?);
        }
    }
    let targets = (1..=levels)
        .map(|level| {
            let seg = spec.seg_len(level);
            let m = n_masked * spec.groups_per_coarse(level);
            Tensor::new(
                vec![b, m, seg],
                std::mem::take(&mut target_values[level - 1]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PretrainBatch {
        batch: b,
        visible_tokens: Tensor::new(
            vec![b, n_visible * spec.n_sub, spec.sp],
            vis_values,
        )?,
        visible_positions: vis_positions,
        masked_tokens: Tensor::new(vec![b, n_masked * spec.n_sub, spec.sp], mask_values)?,
        masked_positions: mask_positions,
        level_positions,
        targets,
    })
}

fn targets_slices<T: Element>(
    set: &crate::patching::PatchSet<T>,
    plan: &MaskPlan,
    level: usize,
) -> Result<Vec<T>> {
    crate::patching::targets_at_level(set, plan, level)
}

// ── loss ────────────────────────────────────────────────────────────────────

/// Loss nodes from one forward build: the weighted total plus per-level
/// parts. `ld` is empty when distillation is off for this pass.
pub struct LossVars {
    pub total: Var,
    pub ld: Vec<Var>,
    pub lr: Vec<Var>,
    pub ld_sum: Var,
    pub lr_sum: Var,
}

/// Build the pre-training loss on the pass's tape.
///
/// `teacher_override` substitutes fixed per-level teacher features for the
/// on-tape stop-gradient teacher. The stop-gradient makes both forms
/// produce identical gradients; the override form is what finite
/// differencing and parity tests need.
pub fn pretrain_loss<T: Element>(
    model: &PretrainModel<T>,
    pass: &mut Pass<'_, T>,
    batch: &PretrainBatch<T>,
    s: &PretrainSettings,
    mode: Mode,
    teacher_override: Option<&[Tensor<T>]>,
) -> Result<LossVars> {
    let levels = model.backbone.levels();
    let student = model.backbone.forward(
        pass,
        &batch.visible_tokens,
        &batch.visible_positions,
        mode,
    )?;
    let distill_on = s.use_hsd && s.alpha != 0.0;
    let teacher: Option<Vec<Var>> = if distill_on {
        Some(match teacher_override {
            Some(feats) => {
                if feats.len() != levels {
                    return Err(Error::contract(format!(
                        "teacher override has {} levels, model has {levels}",
                        feats.len()
                    )));
                }
                feats.iter().map(|t| pass.constant(t.clone())).collect()
            }
            None => {
                let feats = model.backbone.forward(
                    pass,
                    &batch.masked_tokens,
                    &batch.masked_positions,
                    Mode::Eval,
                )?;
                feats
                    .into_iter()
                    .map(|v| pass.tape.stop_gradient(v))
                    .collect()
            }
        })
    } else {
        None
    };
    let mut ld = Vec::new();
    let mut lr = Vec::new();
    for li in 0..levels {
        let kv = if s.detach_kv {
            pass.tape.stop_gradient(student[li])
        } else {
            student[li]
        };
        let m = batch.level_positions[li].len() / batch.batch;
        let (zhat, xhat) = if model.use_ded {
            model.decoders[li].decode(pass, kv, &batch.level_positions[li], batch.batch, mode)?
        } else {
            model.pooled[li].decode(pass, kv, m)?
        };
        let target = pass.constant(batch.targets[li].clone());
        lr.push(pass.tape.smooth_l1(xhat, target, lit(s.threshold))?);
        if let Some(t) = &teacher {
            let dist = match s.distill {
                DistillMetric::SmoothL1 => {
                    pass.tape.smooth_l1(zhat, t[li], lit(s.threshold))?
                }
                DistillMetric::Cosine => {
                    let c = pass.tape.cosine_distance_rows(zhat, t[li])?;
                    pass.tape.mean_all(c)
                }
            };
            ld.push(dist);
        }
    }
    let mut lr_sum = lr[0];
    for &v in &lr[1..] {
        lr_sum = pass.tape.add(lr_sum, v)?;
    }
    let ld_sum = if ld.is_empty() {
        pass.constant(Tensor::scalar(T::zero()))
    } else {
        let mut acc = ld[0];
        for &v in &ld[1..] {
            acc = pass.tape.add(acc, v)?;
        }
        acc
    };
    let wd = pass.tape.scale(ld_sum, lit(s.alpha));
    let wr = pass.tape.scale(lr_sum, lit(s.beta));
    let total = pass.tape.add(wd, wr)?;
    Ok(LossVars {
        total,
        ld,
        lr,
        ld_sum,
        lr_sum,
    })
}

/// Teacher features for a batch, computed on a throwaway tape at the
/// model's current parameters (eval mode, running statistics).
pub fn teacher_features<T: Element>(
    model: &PretrainModel<T>,
    batch: &PretrainBatch<T>,
) -> Result<Vec<Tensor<T>>> {
    let mut tape = Tape::new();
    let feats = {
        let mut pass = Pass::eval(&mut tape);
        model.backbone.forward(
            &mut pass,
            &batch.masked_tokens,
            &batch.masked_positions,
            Mode::Eval,
        )?
    };
    Ok(feats.iter().map(|&v| tape.value(v).clone()).collect())
}

// ── trainer ─────────────────────────────────────────────────────────────────

/// Loop controls for [`pretrain_run`].
#[derive(Debug, Clone)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

/// Mean per-level and total losses over one epoch.
#[derive(Debug, Clone)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: usize,
    pub ld: Vec<f64>,
    pub lr: Vec<f64>,
    pub ld_sum: f64,
    pub lr_sum: f64,
    pub total: f64,
}

fn scalar_f64<T: Element>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v)
        .scalar_value()
        .ok()
        .and_then(|x| x.to_f64())
        .unwrap_or(f64::NAN)
}

/// Run masked pre-training over fixed-length windows (each one sample; the
/// caller already expanded channels into independent windows). Mask plans,
/// shuffling and dropout all derive from `opts.seed`, so reruns bit-match.
pub fn pretrain_run<T: Element>(
    model: &mut PretrainModel<T>,
    windows: &[Vec<T>],
    s: &PretrainSettings,
    opts: &PretrainOptions,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<Vec<EpochReport>> {
    if windows.is_empty() {
        return Err(Error::contract("pre-training needs at least one window"));
    }
    if opts.batch_size == 0 || opts.epochs == 0 {
        return Err(Error::config(
            "epochs and batch size must both be positive",
        ));
    }
    let lookback = model.backbone.lookback;
    for (i, w) in windows.iter().enumerate() {
        if w.len() != lookback {
            return Err(Error::contract(format!(
                "window {i} has {} points, expected the look-back {lookback}",
                w.len()
            )));
        }
    }
    let spec = model.backbone.spec;
    let n_coarse = model.backbone.n_coarse;
    let levels = model.backbone.levels();
    let mut adam = AdamState::new(opts.adam);
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 1..=opts.epochs {
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut stream(opts.seed, "pretrain-order", epoch as u64, 0));
        let mut mask_rng = stream(opts.seed, "pretrain-mask", epoch as u64, 0);
        let mut acc_ld = vec![0.0f64; levels];
        let mut acc_lr = vec![0.0f64; levels];
        let mut acc = (0.0f64, 0.0f64, 0.0f64);
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(opts.batch_size).enumerate() {
            let plans = chunk
                .iter()
                .map(|_| make_mask_plan(n_coarse, s.mask_ratio, &mut mask_rng))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&[T]> = chunk.iter().map(|&i| windows[i].as_slice()).collect();
            let batch = collate_masked(&refs, &plans, spec)?;
            let mut tape = Tape::new();
            let step_rng = stream(opts.seed, "pretrain-dropout", epoch as u64, step as u64);
            let (loss, bindings, stat_updates): (LossVars, HashMap<String, Var>, Vec<StatUpdate<T>>) = {
                let mut pass = Pass::train(&mut tape, step_rng);
                let loss = pretrain_loss(model, &mut pass, &batch, s, Mode::Train, None)?;
                let bindings = pass.bindings_map();
                let updates = std::mem::take(&mut pass.stat_updates);
                (loss, bindings, updates)
            };
            for (li, &v) in loss.ld.iter().enumerate() {
                acc_ld[li] += scalar_f64(&tape, v);
            }
            for (li, &v) in loss.lr.iter().enumerate() {
                acc_lr[li] += scalar_f64(&tape, v);
            }
            acc.0 += scalar_f64(&tape, loss.ld_sum);
            acc.1 += scalar_f64(&tape, loss.lr_sum);
            acc.2 += scalar_f64(&tape, loss.total);
            let grads = tape.backward(loss.total).map_err(|e| {
                Error::state(format!(
                    "pre-training diverged at epoch {epoch}, step {step}: {e}"
                ))
            })?;
            apply_step(model, &bindings, &grads, &mut adam)?;
            apply_stat_updates(model, &stat_updates);
            steps += 1;
        }
        let n = steps as f64;
        let report = EpochReport {
            epoch,
            steps,
            ld: acc_ld.iter().map(|v| v / n).collect(),
            lr: acc_lr.iter().map(|v| v / n).collect(),
            ld_sum: acc.0 / n,
            lr_sum: acc.1 / n,
            total: acc.2 / n,
        };
        on_epoch(&report);
        history.push(report);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::params::named_tensors;

    fn tiny_model(use_ded: bool, dropout: f64) -> PretrainModel<f64> {
        // p=4, stride=4, sp=2: n_sub=2, two levels; lookback 16 → 4 coarse.
        let spec = PatchSpec::new(4, 4, 2).unwrap();
        let enc = EncoderConfig {
            d: 8,
            heads: 2,
            layers: vec![1, 1],
            d_ff: 16,
            dropout,
        };
        let mut rng = stream(99, "init", 0, 0);
        let backbone = Backbone::init(spec, 16, &enc, &mut rng).unwrap();
        PretrainModel::init(backbone, 2, use_ded, &mut rng).unwrap()
    }

    fn tiny_batch(model: &PretrainModel<f64>, seed: u64) -> PretrainBatch<f64> {
        let spec = model.backbone.spec;
        let w1: Vec<f64> = (0..16).map(|i| (i as f64 * 0.4).sin()).collect();
        let w2: Vec<f64> = (0..16).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut rng = stream(seed, "test-mask", 0, 0);
        let plans: Vec<MaskPlan> = (0..2)
            .map(|_| make_mask_plan(4, 0.5, &mut rng).unwrap())
            .collect();
        collate_masked(&[&w1, &w2], &plans, spec).unwrap()
    }

    fn named_grads(
        model: &PretrainModel<f64>,
        batch: &PretrainBatch<f64>,
        s: &PretrainSettings,
        teacher: Option<&[Tensor<f64>]>,
    ) -> (f64, Vec<(String, Tensor<f64>)>) {
        let mut tape = Tape::new();
        let (loss, bindings) = {
            let mut pass = Pass::train(&mut tape, stream(1, "noop", 0, 0));
            let loss = pretrain_loss(model, &mut pass, batch, s, Mode::Train, teacher).unwrap();
            (loss, pass.bindings_map())
        };
        let total = scalar_f64(&tape, loss.total);
        let grads = tape.backward(loss.total).unwrap();
        let mut names: Vec<(String, Var)> = bindings.into_iter().collect();
        names.sort_by(|a, b| a.0.cmp(&b.0));
        let out = names
            .into_iter()
            .filter_map(|(n, v)| grads.get(v).map(|g| (n, g.clone())))
            .collect();
        (total, out)
    }

    #[test]
    fn collate_shapes_follow_the_mask_plan() {
        let model = tiny_model(true, 0.0);
        let batch = tiny_batch(&model, 3);
        // 4 coarse, ratio 0.5 → 2 masked, 2 visible, n_sub 2.
        assert_eq!(batch.visible_tokens.shape(), &[2, 4, 2]);
        assert_eq!(batch.masked_tokens.shape(), &[2, 4, 2]);
        assert_eq!(batch.visible_positions.len(), 8);
        assert_eq!(batch.level_positions[0].len(), 2 * 4);
        assert_eq!(batch.level_positions[1].len(), 2 * 2);
        assert_eq!(batch.targets[0].shape(), &[2, 4, 2]);
        assert_eq!(batch.targets[1].shape(), &[2, 2, 4]);
    }

    #[test]
    fn loss_decomposes_into_weighted_level_sums() {
        let model = tiny_model(true, 0.0);
        let batch = tiny_batch(&model, 5);
        let s = PretrainSettings {
            alpha: 0.7,
            beta: 1.3,
            ..PretrainSettings::default()
        };
        let mut tape = Tape::new();
        let loss = {
            let mut pass = Pass::eval(&mut tape);
            pretrain_loss(&model, &mut pass, &batch, &s, Mode::Eval, None).unwrap()
        };
        let ld: Vec<f64> = loss.ld.iter().map(|&v| scalar_f64(&tape, v)).collect();
        let lr: Vec<f64> = loss.lr.iter().map(|&v| scalar_f64(&tape, v)).collect();
        let ld_sum = ld.iter().sum::<f64>();
        let lr_sum = lr.iter().sum::<f64>();
        assert_eq!(ld.len(), 2);
        assert_eq!(lr.len(), 2);
        assert!((scalar_f64(&tape, loss.ld_sum) - ld_sum).abs() < 1e-12);
        assert!((scalar_f64(&tape, loss.lr_sum) - lr_sum).abs() < 1e-12);
        let expect = 0.7 * ld_sum + 1.3 * lr_sum;
        assert!(
            (scalar_f64(&tape, loss.total) - expect).abs() < 1e-12,
            "total {} vs {}",
            scalar_f64(&tape, loss.total),
            expect
        );
        assert!(scalar_f64(&tape, loss.total).is_finite());
    }

    #[test]
    fn on_tape_teacher_matches_frozen_teacher_exactly() {
        // The stop-gradient around the on-tape teacher must make its
        // gradients identical to feeding the same features as constants.
        let model = tiny_model(true, 0.0);
        let batch = tiny_batch(&model, 7);
        let s = PretrainSettings::default();
        let frozen = teacher_features(&model, &batch).unwrap();
        let (loss_a, grads_a) = named_grads(&model, &batch, &s, None);
        let (loss_b, grads_b) = named_grads(&model, &batch, &s, Some(&frozen));
        assert_eq!(loss_a, loss_b);
        assert_eq!(grads_a.len(), grads_b.len());
        for ((na, ga), (nb, gb)) in grads_a.iter().zip(&grads_b) {
            assert_eq!(na, nb);
            for (x, y) in ga.data().iter().zip(gb.data()) {
                assert!((x - y).abs() < 1e-12, "{na}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn disabling_distillation_drops_the_teacher_term() {
        let model = tiny_model(true, 0.0);
        let batch = tiny_batch(&model, 9);
        let s_off = PretrainSettings {
            use_hsd: false,
            ..PretrainSettings::default()
        };
        let mut tape = Tape::new();
        let loss = {
            let mut pass = Pass::eval(&mut tape);
            pretrain_loss(&model, &mut pass, &batch, &s_off, Mode::Eval, None).unwrap()
        };
        assert!(loss.ld.is_empty());
        assert_eq!(scalar_f64(&tape, loss.ld_sum), 0.0);
        let total = scalar_f64(&tape, loss.total);
        let lr_sum = scalar_f64(&tape, loss.lr_sum);
        assert!((total - lr_sum).abs() < 1e-15);
    }

    #[test]
    fn pooled_decoder_path_runs_and_differs_from_ded() {
        let ded = tiny_model(true, 0.0);
        let pooled = tiny_model(false, 0.0);
        assert!(named_tensors(&pooled, false).len() < named_tensors(&ded, false).len());
        let batch = tiny_batch(&ded, 11);
        let s = PretrainSettings::default();
        let (la, _) = named_grads(&ded, &batch, &s, None);
        let (lb, _) = named_grads(&pooled, &batch, &s, None);
        assert!(la.is_finite() && lb.is_finite());
        assert!((la - lb).abs() > 1e-9, "ded {la} vs pooled {lb}");
    }

    #[test]
    fn detach_kv_cuts_encoder_gradients() {
        let model = tiny_model(true, 0.0);
        let batch = tiny_batch(&model, 13);
        let attached = PretrainSettings::default();
        let detached = PretrainSettings {
            detach_kv: true,
            ..PretrainSettings::default()
        };
        let (_, ga) = named_grads(&model, &batch, &attached, None);
        let (_, gb) = named_grads(&model, &batch, &detached, None);
        let enc_a = ga.iter().any(|(n, g)| {
            n.starts_with("encoder.") && g.data().iter().any(|v| v.abs() > 1e-12)
        });
        let enc_b = gb.iter().any(|(n, g)| {
            n.starts_with("encoder.") && g.data().iter().any(|v| v.abs() > 1e-12)
        });
        assert!(enc_a, "attached run should reach the encoder");
        assert!(!enc_b, "detached run must not reach the encoder");
        // Decoder gradients survive in both.
        assert!(gb.iter().any(|(n, g)| {
            n.starts_with("dec.") && g.data().iter().any(|v| v.abs() > 1e-12)
        }));
    }

    #[test]
    fn cosine_distill_produces_a_different_finite_loss() {
        let model = tiny_model(true, 0.0);
        let batch = tiny_batch(&model, 15);
        let sl = PretrainSettings::default();
        let cs = PretrainSettings {
            distill: DistillMetric::Cosine,
            ..PretrainSettings::default()
        };
        let (la, _) = named_grads(&model, &batch, &sl, None);
        let (lb, _) = named_grads(&model, &batch, &cs, None);
        assert!(la.is_finite() && lb.is_finite());
        assert!((la - lb).abs() > 1e-9);
    }

    #[test]
    fn run_is_seed_deterministic_and_loss_falls() {
        let windows: Vec<Vec<f64>> = (0..8)
            .map(|k| {
                (0..16)
                    .map(|i| ((i + k) as f64 * 0.39).sin())
                    .collect()
            })
            .collect();
        let s = PretrainSettings::default();
        let opts = PretrainOptions {
            epochs: 12,
            batch_size: 4,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            seed: 21,
        };
        let run = |_: ()| {
            let mut model = tiny_model(true, 0.1);
            let hist = pretrain_run(&mut model, &windows, &s, &opts, |_| {}).unwrap();
            let params: Vec<f64> = named_tensors(&model, true)
                .iter()
                .flat_map(|(_, t)| t.data().to_vec())
                .collect();
            (hist, params)
        };
        let (ha, pa) = run(());
        let (hb, pb) = run(());
        assert_eq!(ha.len(), 12);
        for (a, b) in ha.iter().zip(&hb) {
            assert_eq!(a.total.to_bits(), b.total.to_bits(), "epoch {}", a.epoch);
        }
        assert_eq!(pa.len(), pb.len());
        for (a, b) in pa.iter().zip(&pb) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(
            ha.last().unwrap().total < ha[0].total,
            "loss should fall: {} → {}",
            ha[0].total,
            ha.last().unwrap().total
        );
    }

    #[test]
    fn run_rejects_wrong_window_length() {
        let mut model = tiny_model(true, 0.0);
        let windows = vec![vec![0.0f64; 10]];
        let s = PretrainSettings::default();
        let opts = PretrainOptions {
            epochs: 1,
            batch_size: 1,
            adam: AdamConfig::default(),
            seed: 1,
        };
        assert!(pretrain_run(&mut model, &windows, &s, &opts, |_| {}).is_err());
    }
}
