//! The shared backbone: patch embedding plus hierarchical encoder, wired to
//! a fixed window geometry. Pre-training decoders ([`crate::pretrain`]) and
//! the forecasting head ([`crate::finetune`]) both run on top of it.

use rand_chacha::ChaCha8Rng;

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::num::Element;
use crate::params::{ParamKind, Params, Pass};
use crate::patching::{segment_series, PatchEmbed, PatchSpec};
use crate::tape::{Mode, Var};
use crate::tensor::Tensor;

/// Embedding + encoder bound to one window geometry. The positional table
/// covers the full fine grid of a look-back window, so both the visible and
/// masked streams (and full windows at fine-tune time) index into it.
pub struct Backbone<T> {
    pub spec: PatchSpec,
    pub lookback: usize,
    pub n_coarse: usize,
    pub embed: PatchEmbed<T>,
    pub encoder: Encoder<T>,
}

impl<T: Element> Backbone<T> {
    pub fn init(
        spec: PatchSpec,
        lookback: usize,
        enc: &EncoderConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        enc.validate()?;
        if enc.layers.len() != spec.levels {
            return Err(Error::config(format!(
                "patch grid implies {} hierarchies (p/sp = {}) but the encoder \
                 defines {}",
                spec.levels,
                spec.n_sub,
                enc.layers.len()
            )));
        }
        let n_coarse = spec.n_coarse(lookback)?;
        if n_coarse < 2 {
            return Err(Error::config(format!(
                "look-back {lookback} yields only {n_coarse} coarse patch(es); \
                 masking needs at least 2"
            )));
        }
        let max_fine = n_coarse * spec.n_sub;
        let embed = PatchEmbed::init("embed", spec.sp, enc.d, max_fine, rng);
        let encoder = Encoder::init("encoder", enc, rng)?;
        Ok(Backbone {
            spec,
            lookback,
            n_coarse,
            embed,
            encoder,
        })
    }

    pub fn levels(&self) -> usize {
        self.encoder.levels()
    }

    pub fn d(&self) -> usize {
        self.encoder.cfg.d
    }

    /// Full-grid token count at 1-based level `l`.
    pub fn grid_tokens(&self, level: usize) -> usize {
        self.spec.tokens_at_level(self.n_coarse, level)
    }

    /// Embed a token batch and run the encoder; returns per-level features.
    pub fn forward(
        &self,
        pass: &mut Pass<'_, T>,
        tokens: &Tensor<T>,
        positions: &[usize],
        mode: Mode,
    ) -> Result<Vec<Var>> {
        let z0 = self.embed.forward(pass, tokens, positions)?;
        self.encoder.encode(pass, z0, mode)
    }
}

impl<T: Element> Params<T> for Backbone<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, &Tensor<T>)) {
        self.embed.visit(f);
        self.encoder.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.embed.visit_mut(f);
        self.encoder.visit_mut(f);
    }
}

/// A full-window batch: every fine token of every window, plus the matching
/// grid positions (`0..n_fine` repeated per sample).
pub struct FullBatch<T> {
    pub batch: usize,
    pub tokens: Tensor<T>,
    pub positions: Vec<usize>,
}

/// Segment whole windows (no masking) into one `[batch, n_fine, sp]` batch.
pub fn collate_full<T: Element>(windows: &[&[T]], spec: PatchSpec) -> Result<FullBatch<T>> {
    if windows.is_empty() {
        return Err(Error::contract("cannot collate an empty batch"));
    }
    let first = segment_series(windows[0], spec)?;
    let n_fine = first.n_coarse * spec.n_sub;
    let mut data = Vec::with_capacity(windows.len() * n_fine * spec.sp);
    let mut positions = Vec::with_capacity(windows.len() * n_fine);
    data.extend_from_slice(&first.tokens);
    positions.extend(0..n_fine);
    for w in &windows[1..] {
        let set = segment_series(w, spec)?;
        if set.n_coarse != first.n_coarse {
            return Err(Error::contract(format!(
                "windows in one batch must share a length: {} vs {} coarse patches",
                set.n_coarse, first.n_coarse
            )));
        }
        data.extend_from_slice(&set.tokens);
        positions.extend(0..n_fine);
    }
    Ok(FullBatch {
        batch: windows.len(),
        tokens: Tensor::new(vec![windows.len(), n_fine, spec.sp], data)?,
        positions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tape::Tape;

    fn enc_cfg(d: usize, layers: &[usize]) -> EncoderConfig {
        EncoderConfig {
            d,
            heads: 2,
            layers: layers.to_vec(),
            d_ff: 2 * d,
            dropout: 0.0,
        }
    }

    #[test]
    fn backbone_rejects_mismatched_hierarchy_count() {
        let spec = PatchSpec::new(24, 24, 6).unwrap(); // 3 levels
        let mut rng = stream(1, "init", 0, 0);
        let err = match Backbone::<f64>::init(spec, 512, &enc_cfg(8, &[1, 1]), &mut rng) {
            Err(e) => e,
            Ok(_) => panic!("mismatched hierarchy count must fail"),
        };
        assert!(err.to_string().contains("hierarchies"), "{err}");
    }

    #[test]
    fn backbone_feature_shapes_follow_the_grid() {
        let spec = PatchSpec::new(8, 8, 2).unwrap(); // n_sub 4, 3 levels
        let mut rng = stream(2, "init", 0, 0);
        let bb = Backbone::<f64>::init(spec, 48, &enc_cfg(8, &[1, 1, 1]), &mut rng).unwrap();
        assert_eq!(bb.n_coarse, 6);
        assert_eq!(bb.grid_tokens(1), 24);
        assert_eq!(bb.grid_tokens(2), 12);
        assert_eq!(bb.grid_tokens(3), 6);
        let w1: Vec<f64> = (0..48).map(|i| (i as f64 * 0.1).sin()).collect();
        let w2: Vec<f64> = (0..48).map(|i| (i as f64 * 0.2).cos()).collect();
        let batch = collate_full(&[&w1, &w2], spec).unwrap();
        let mut tape = Tape::new();
        let feats = {
            let mut pass = Pass::eval(&mut tape);
            bb.forward(&mut pass, &batch.tokens, &batch.positions, Mode::Eval)
                .unwrap()
        };
        let shapes: Vec<Vec<usize>> = feats.iter().map(|&v| tape.shape(v).to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 24, 8], vec![2, 12, 8], vec![2, 6, 8]]);
    }

    #[test]
    fn collate_full_lays_out_samples_in_order() {
        let spec = PatchSpec::new(4, 4, 2).unwrap();
        let w1: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let w2: Vec<f64> = (100..108).map(|i| i as f64).collect();
        let batch = collate_full(&[&w1, &w2], spec).unwrap();
        assert_eq!(batch.tokens.shape(), &[2, 4, 2]);
        assert_eq!(&batch.tokens.data()[..8], &[0., 1., 2., 3., 4., 5., 6., 7.]);
        assert_eq!(batch.tokens.data()[8], 100.0);
        assert_eq!(batch.positions, vec![0, 1, 2, 3, 0, 1, 2, 3]);
    }

    #[test]
    fn collate_full_rejects_mixed_lengths() {
        let spec = PatchSpec::new(4, 4, 2).unwrap();
        let w1: Vec<f64> = vec![0.0; 8];
        let w2: Vec<f64> = vec![0.0; 12];
        assert!(collate_full(&[&w1, &w2], spec).is_err());
    }
}
