//! Randomized invariants across the numeric and data layers.

use proptest::prelude::*;

use himtm_core::config::RunConfig;
use himtm_core::data::{split_bounds, standardize, window_starts, Channel, Series, SplitFractions};
use himtm_core::patching::{make_mask_plan, PatchSpec};
use himtm_core::rng::stream;
use himtm_core::tape::Mode;
use himtm_core::tensor::Tensor;
use himtm_core::Tape;

proptest! {
    /// Softmax rows sum to one even for extreme logits.
    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..6,
        cols in 1usize..8,
        seed in any::<u64>(),
        scale in 0.1f64..60.0,
    ) {
        use rand::Rng;
        let mut rng = stream(seed, "prop-softmax", 0, 0);
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| (rng.gen::<f64>() - 0.5) * 2.0 * scale)
            .collect();
        let mut tape: Tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![rows, cols], data).unwrap(), false);
        let s = tape.softmax_rows(x).unwrap();
        let v = tape.value(s);
        for r in 0..rows {
            let sum: f64 = v.data()[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
            prop_assert!(v.data()[r * cols..(r + 1) * cols].iter().all(|&p| p >= 0.0));
        }
    }

    /// Mask plans: half-up count, strict partition of the coarse grid,
    /// sorted and duplicate-free on both sides.
    #[test]
    fn mask_plan_partitions_the_grid(
        n in 2usize..40,
        ratio in 0.05f64..0.95,
        seed in any::<u64>(),
    ) {
        let expect = (ratio * n as f64 + 0.5).floor() as usize;
        prop_assume!(expect >= 1 && expect < n);
        let plan = make_mask_plan(n, ratio, &mut stream(seed, "prop-mask", 0, 0)).unwrap();
        prop_assert_eq!(plan.masked.len(), expect);
        prop_assert_eq!(plan.visible.len(), n - expect);
        let mut all: Vec<usize> = plan.masked.iter().chain(plan.visible.iter()).copied().collect();
        all.sort_unstable();
        let want: Vec<usize> = (0..n).collect();
        prop_assert_eq!(all, want);
        prop_assert!(plan.masked.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(plan.visible.windows(2).all(|w| w[0] < w[1]));
    }

    /// Token counts halve level by level; segment lengths double; every
    /// level covers exactly the same span.
    #[test]
    fn hierarchy_token_counts_halve(
        sp in 1usize..6,
        levels_pow in 0u32..4,
        n_coarse in 2usize..30,
    ) {
        let n_sub = 1usize << levels_pow;
        let p = sp * n_sub;
        let spec = PatchSpec::new(p, p, sp).unwrap();
        prop_assert_eq!(spec.levels, levels_pow as usize + 1);
        let lookback = n_coarse * p;
        prop_assert_eq!(spec.n_coarse(lookback).unwrap(), n_coarse);
        for l in 1..=spec.levels {
            let tokens = spec.tokens_at_level(n_coarse, l);
            prop_assert_eq!(tokens, n_coarse * (n_sub >> (l - 1)));
            if l > 1 {
                prop_assert_eq!(spec.tokens_at_level(n_coarse, l - 1), tokens * 2);
            }
            // Every level tiles the same covered span.
            prop_assert_eq!(tokens * spec.seg_len(l), n_coarse * p);
        }
    }

    /// The smooth-L1 scalar is non-negative and zero only at equality.
    #[test]
    fn smooth_l1_is_a_divergence(
        a in proptest::collection::vec(-10.0f64..10.0, 1..20),
        shift in -3.0f64..3.0,
    ) {
        let n = a.len();
        let b: Vec<f64> = a.iter().map(|x| x + shift).collect();
        let mut tape: Tape = Tape::new();
        let pa = tape.leaf(Tensor::new(vec![n], a).unwrap(), false);
        let pb = tape.leaf(Tensor::new(vec![n], b).unwrap(), false);
        let l = tape.smooth_l1(pa, pb, 1.0).unwrap();
        let v = tape.value(l).data()[0];
        prop_assert!(v >= 0.0);
        if shift == 0.0 {
            prop_assert_eq!(v, 0.0);
        } else {
            prop_assert!(v > 0.0);
        }
        // Closed form: mean over elements of 0.5 d² (|d|<1) else |d|-0.5.
        let d = shift.abs();
        let per = if d < 1.0 { 0.5 * d * d } else { d - 0.5 };
        prop_assert!((v - per).abs() < 1e-12);
    }

    /// Standardization leaves the train span with mean ~0 and variance ~1.
    #[test]
    fn standardize_normalizes_the_train_span(
        data in proptest::collection::vec(-50.0f64..50.0, 8..60),
        frac in 0.3f64..1.0,
    ) {
        let train_len = ((data.len() as f64 * frac) as usize).max(2);
        let spread = data[..train_len]
            .iter()
            .cloned()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        prop_assume!(spread.1 - spread.0 > 1e-3);
        let series = Series {
            channels: vec![Channel { name: "c".into(), data: data.clone() }],
        };
        let (out, std, warnings) = standardize(&series, train_len).unwrap();
        prop_assert!(warnings.is_empty());
        let head = &out.channels[0].data[..train_len];
        let n = train_len as f64;
        let mean: f64 = head.iter().sum::<f64>() / n;
        let var: f64 = head.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9, "mean {mean}");
        prop_assert!((var - 1.0).abs() < 1e-9, "var {var}");
        // Round trip through destandardize restores the raw values.
        for (raw, z) in data.iter().zip(&out.channels[0].data) {
            prop_assert!((std.destandardize(0, *z) - raw).abs() < 1e-9);
        }
    }

    /// Split bounds are monotone and exhaustive; every enumerated window
    /// fits inside its range at the requested stride.
    #[test]
    fn splits_and_windows_stay_in_bounds(
        len in 10usize..2000,
        train in 0.2f64..0.8,
        val_share in 0.0f64..0.9,
        lookback in 1usize..64,
        horizon in 0usize..32,
        stride in 1usize..16,
    ) {
        let val = (1.0 - train) * val_share;
        let f = SplitFractions { train, val, test: 1.0 - train - val };
        prop_assume!(f.validate().is_ok());
        let b = split_bounds(len, f).unwrap();
        prop_assert!(b.train_end >= 1);
        prop_assert!(b.train_end <= b.val_end && b.val_end <= b.len);
        prop_assert_eq!(b.len, len);
        let starts = window_starts(b.train_end, b.val_end, lookback, horizon, stride).unwrap();
        for w in &starts {
            prop_assert!(*w >= b.train_end);
            prop_assert!(w + lookback + horizon <= b.val_end);
        }
        for pair in starts.windows(2) {
            prop_assert_eq!(pair[1] - pair[0], stride);
        }
    }

    /// Any config built from random (valid) knob settings survives the
    /// text round trip unchanged.
    #[test]
    fn config_round_trips_for_random_settings(
        seed in any::<u64>(),
        lookback_patches in 2usize..40,
        horizon in 1usize..200,
        mask in 0.05f64..0.95,
        lr in 1e-6f64..1e-1,
        epochs in 1usize..50,
    ) {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.lookback = lookback_patches * cfg.patch_p;
        cfg.horizon = horizon;
        cfg.pre_mask_ratio = mask;
        cfg.pre_lr = lr;
        cfg.ft_epochs = epochs;
        prop_assume!(cfg.validate().is_ok());
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    /// Batch-norm in train mode maps every channel to mean 0 and variance
    /// `v/(v+eps)` where `v` is the channel's population variance — near 1
    /// for any non-degenerate channel, and exactly this closed form always.
    #[test]
    fn batch_norm_whitens_in_train_mode(
        rows in 2usize..12,
        cols in 1usize..6,
        seed in any::<u64>(),
        spread in 0.5f64..30.0,
    ) {
        use rand::Rng;
        let eps = 1e-5;
        let mut rng = stream(seed, "prop-bn", 0, 0);
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| (rng.gen::<f64>() - 0.5) * spread)
            .collect();
        let mut tape: Tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![rows, cols], data.clone()).unwrap(), false);
        let gamma = tape.leaf(Tensor::new(vec![cols], vec![1.0; cols]).unwrap(), false);
        let beta = tape.leaf(Tensor::new(vec![cols], vec![0.0; cols]).unwrap(), false);
        let rm = Tensor::new(vec![cols], vec![0.0; cols]).unwrap();
        let rv = Tensor::new(vec![cols], vec![1.0; cols]).unwrap();
        let (y, stats) = tape
            .batch_norm(x, gamma, beta, &rm, &rv, eps, Mode::Train)
            .unwrap();
        prop_assert!(stats.is_some());
        let v = tape.value(y);
        for c in 0..cols {
            let col: Vec<f64> = (0..rows).map(|r| v.data()[r * cols + c]).collect();
            let mean: f64 = col.iter().sum::<f64>() / rows as f64;
            let var: f64 = col.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / rows as f64;
            prop_assert!(mean.abs() < 1e-9, "mean {mean}");
            let raw_var = {
                let m: f64 = (0..rows).map(|r| data[r * cols + c]).sum::<f64>() / rows as f64;
                (0..rows).map(|r| (data[r * cols + c] - m).powi(2)).sum::<f64>() / rows as f64
            };
            // (x−μ)/√(v+eps) has variance exactly v/(v+eps).
            let want = raw_var / (raw_var + eps);
            prop_assert!((var - want).abs() < 1e-9, "var {var}, want {want}");
        }
    }
}
