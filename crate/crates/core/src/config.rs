//! Run configuration: a flat `key = value` text format with dotted key
//! prefixes, strict unknown-key rejection, and a canonical serialization
//! that round-trips (checkpoints and metrics files embed it verbatim).
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default, so an empty config is valid.

use crate::data::{Sinusoid, SplitFractions, SynthRecipe};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::finetune::{Aggregation, ForecastSettings};
use crate::patching::PatchSpec;
use crate::pretrain::{DistillMetric, PretrainSettings};

/// Where the series comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Csv,
}

/// Fine-tuning regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneMode {
    Full,
    LinearProbe,
}

/// Everything a run needs, mirroring the config file key for key.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,

    pub data_source: DataSource,
    pub csv_path: String,
    pub lookback: usize,
    pub horizon: usize,
    pub split: SplitFractions,
    pub eval_stride: usize,
    pub synth: SynthRecipe,

    pub patch_p: usize,
    pub patch_stride: usize,
    pub patch_sp: usize,

    pub enc_d: usize,
    pub enc_heads: usize,
    pub enc_layers: Vec<usize>,
    pub enc_d_ff: usize,
    pub enc_dropout: f64,

    pub pre_mask_ratio: f64,
    pub pre_alpha: f64,
    pub pre_beta: f64,
    pub pre_epochs: usize,
    pub pre_batch: usize,
    pub pre_lr: f64,
    pub pre_threshold: f64,
    pub pre_distill: DistillMetric,
    pub pre_use_hsd: bool,
    pub pre_use_ded: bool,
    pub pre_detach_kv: bool,
    pub pre_stride: usize,
    pub pre_dec_heads: usize,

    pub ft_epochs: usize,
    pub ft_batch: usize,
    pub ft_lr: f64,
    pub ft_mode: FinetuneMode,
    pub ft_use_csa: bool,
    pub ft_aggregation: Aggregation,
    pub ft_threshold: f64,
    pub ft_stride: usize,

    pub naive_period: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            out_dir: "runs/out".to_string(),
            data_source: DataSource::Synthetic,
            csv_path: String::new(),
            lookback: 512,
            horizon: 96,
            split: SplitFractions {
                train: 0.6,
                val: 0.2,
                test: 0.2,
            },
            eval_stride: 1,
            synth: SynthRecipe {
                length: 4000,
                channels: 1,
                components: vec![
                    Sinusoid {
                        period: 24.0,
                        amplitude: 1.0,
                        phase: 0.0,
                    },
                    Sinusoid {
                        period: 168.0,
                        amplitude: 0.6,
                        phase: 0.5,
                    },
                ],
                trend: 0.0,
                noise_std: 0.05,
            },
            patch_p: 24,
            patch_stride: 24,
            patch_sp: 6,
            enc_d: 128,
            enc_heads: 4,
            enc_layers: vec![2, 2, 2],
            enc_d_ff: 0,
            enc_dropout: 0.1,
            pre_mask_ratio: 0.5,
            pre_alpha: 1.0,
            pre_beta: 1.0,
            pre_epochs: 10,
            pre_batch: 64,
            pre_lr: 1e-4,
            pre_threshold: 1.0,
            pre_distill: DistillMetric::SmoothL1,
            pre_use_hsd: true,
            pre_use_ded: true,
            pre_detach_kv: false,
            pre_stride: 1,
            pre_dec_heads: 4,
            ft_epochs: 10,
            ft_batch: 64,
            ft_lr: 1e-4,
            ft_mode: FinetuneMode::Full,
            ft_use_csa: true,
            ft_aggregation: Aggregation::Mean,
            ft_threshold: 1.0,
            ft_stride: 1,
            naive_period: 24,
        }
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::parse(format!("key '{key}': '{v}' is not a non-negative integer")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::parse(format!("key '{key}': '{v}' is not a non-negative integer")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::parse(format!("key '{key}': '{v}' is not a number")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::parse(format!(
            "key '{key}': '{v}' must be true or false"
        ))),
    }
}

fn parse_usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| parse_usize(key, s.trim()))
        .collect()
}

fn parse_split(key: &str, v: &str) -> Result<SplitFractions> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::parse(format!(
            "key '{key}': expected three comma-separated fractions, got '{v}'"
        )));
    }
    Ok(SplitFractions {
        train: parse_f64(key, parts[0])?,
        val: parse_f64(key, parts[1])?,
        test: parse_f64(key, parts[2])?,
    })
}

fn parse_components(key: &str, v: &str) -> Result<Vec<Sinusoid>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|item| {
            let parts: Vec<&str> = item.split(':').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(Error::parse(format!(
                    "key '{key}': component '{item}' must be period:amplitude:phase"
                )));
            }
            Ok(Sinusoid {
                period: parse_f64(key, parts[0])?,
                amplitude: parse_f64(key, parts[1])?,
                phase: parse_f64(key, parts[2])?,
            })
        })
        .collect()
}

fn fmt_components(cs: &[Sinusoid]) -> String {
    cs.iter()
        .map(|s| format!("{}:{}:{}", s.period, s.amplitude, s.phase))
        .collect::<Vec<_>>()
        .join(",")
}

fn fmt_usize_list(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Parse config text over the defaults. Unknown and duplicate keys are
    /// errors; the result is validated.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::parse(format!(
                    "config line {}: expected 'key = value', got '{line}'",
                    i + 1
                )));
            };
            let key = k.trim();
            let v = v.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::parse(format!(
                    "config line {}: duplicate key '{key}'",
                    i + 1
                )));
            }
            cfg.set(key, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_u64(key, v)?,
            "out.dir" => self.out_dir = v.to_string(),
            "data.source" => {
                self.data_source = match v {
                    "synthetic" => DataSource::Synthetic,
                    "csv" => DataSource::Csv,
                    _ => {
                        return Err(Error::parse(format!(
                            "key '{key}': '{v}' must be synthetic or csv"
                        )))
                    }
                }
            }
            "data.csv_path" => self.csv_path = v.to_string(),
            "data.lookback" => self.lookback = parse_usize(key, v)?,
            "data.horizon" => self.horizon = parse_usize(key, v)?,
            "data.split" => self.split = parse_split(key, v)?,
            "data.eval_stride" => self.eval_stride = parse_usize(key, v)?,
            "data.synth.length" => self.synth.length = parse_usize(key, v)?,
            "data.synth.channels" => self.synth.channels = parse_usize(key, v)?,
            "data.synth.components" => self.synth.components = parse_components(key, v)?,
            "data.synth.trend" => self.synth.trend = parse_f64(key, v)?,
            "data.synth.noise_std" => self.synth.noise_std = parse_f64(key, v)?,
            "patch.p" => self.patch_p = parse_usize(key, v)?,
            "patch.stride" => self.patch_stride = parse_usize(key, v)?,
            "patch.sp" => self.patch_sp = parse_usize(key, v)?,
            "encoder.d" => self.enc_d = parse_usize(key, v)?,
            "encoder.heads" => self.enc_heads = parse_usize(key, v)?,
            "encoder.layers" => self.enc_layers = parse_usize_list(key, v)?,
            "encoder.d_ff" => self.enc_d_ff = parse_usize(key, v)?,
            "encoder.dropout" => self.enc_dropout = parse_f64(key, v)?,
            "pretrain.mask_ratio" => self.pre_mask_ratio = parse_f64(key, v)?,
            "pretrain.alpha" => self.pre_alpha = parse_f64(key, v)?,
            "pretrain.beta" => self.pre_beta = parse_f64(key, v)?,
            "pretrain.epochs" => self.pre_epochs = parse_usize(key, v)?,
            "pretrain.batch_size" => self.pre_batch = parse_usize(key, v)?,
            "pretrain.lr" => self.pre_lr = parse_f64(key, v)?,
            "pretrain.threshold" => self.pre_threshold = parse_f64(key, v)?,
            "pretrain.distill" => {
                self.pre_distill = match v {
                    "smooth_l1" => DistillMetric::SmoothL1,
                    "cosine" => DistillMetric::Cosine,
                    _ => {
                        return Err(Error::parse(format!(
                            "key '{key}': '{v}' must be smooth_l1 or cosine"
                        )))
                    }
                }
            }
            "pretrain.use_hsd" => self.pre_use_hsd = parse_bool(key, v)?,
            "pretrain.use_ded" => self.pre_use_ded = parse_bool(key, v)?,
            "pretrain.detach_kv" => self.pre_detach_kv = parse_bool(key, v)?,
            "pretrain.stride" => self.pre_stride = parse_usize(key, v)?,
            "pretrain.dec_heads" => self.pre_dec_heads = parse_usize(key, v)?,
            "finetune.epochs" => self.ft_epochs = parse_usize(key, v)?,
            "finetune.batch_size" => self.ft_batch = parse_usize(key, v)?,
            "finetune.lr" => self.ft_lr = parse_f64(key, v)?,
            "finetune.mode" => {
                self.ft_mode = match v {
                    "full" => FinetuneMode::Full,
                    "linear_probe" => FinetuneMode::LinearProbe,
                    _ => {
                        return Err(Error::parse(format!(
                            "key '{key}': '{v}' must be full or linear_probe"
                        )))
                    }
                }
            }
            "finetune.use_csa" => self.ft_use_csa = parse_bool(key, v)?,
            "finetune.aggregation" => {
                self.ft_aggregation = match v {
                    "mean" => Aggregation::Mean,
                    "learned" => Aggregation::Learned,
                    _ => {
                        return Err(Error::parse(format!(
                            "key '{key}': '{v}' must be mean or learned"
                        )))
                    }
                }
            }
            "finetune.threshold" => self.ft_threshold = parse_f64(key, v)?,
            "finetune.stride" => self.ft_stride = parse_usize(key, v)?,
            "eval.naive_period" => self.naive_period = parse_usize(key, v)?,
            _ => {
                return Err(Error::parse(format!("unknown config key '{key}'")));
            }
        }
        Ok(())
    }

    /// Apply `key = value` overrides on top of this config, then re-validate.
    /// Used by sweeps and ablations, where several keys may need to change
    /// together before the result is consistent.
    pub fn with_overrides(&self, pairs: &[(&str, &str)]) -> Result<RunConfig> {
        let mut cfg = self.clone();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form: every key, fixed order. `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let src = match self.data_source {
            DataSource::Synthetic => "synthetic",
            DataSource::Csv => "csv",
        };
        let distill = match self.pre_distill {
            DistillMetric::SmoothL1 => "smooth_l1",
            DistillMetric::Cosine => "cosine",
        };
        let mode = match self.ft_mode {
            FinetuneMode::Full => "full",
            FinetuneMode::LinearProbe => "linear_probe",
        };
        let agg = match self.ft_aggregation {
            Aggregation::Mean => "mean",
            Aggregation::Learned => "learned",
        };
        let mut s = String::new();
        let mut push = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        push("seed", self.seed.to_string());
        push("out.dir", self.out_dir.clone());
        push("data.source", src.to_string());
        push("data.csv_path", self.csv_path.clone());
        push("data.lookback", self.lookback.to_string());
        push("data.horizon", self.horizon.to_string());
        push(
            "data.split",
            format!("{},{},{}", self.split.train, self.split.val, self.split.test),
        );
        push("data.eval_stride", self.eval_stride.to_string());
        push("data.synth.length", self.synth.length.to_string());
        push("data.synth.channels", self.synth.channels.to_string());
        push(
            "data.synth.components",
            fmt_components(&self.synth.components),
        );
        push("data.synth.trend", self.synth.trend.to_string());
        push("data.synth.noise_std", self.synth.noise_std.to_string());
        push("patch.p", self.patch_p.to_string());
        push("patch.stride", self.patch_stride.to_string());
        push("patch.sp", self.patch_sp.to_string());
        push("encoder.d", self.enc_d.to_string());
        push("encoder.heads", self.enc_heads.to_string());
        push("encoder.layers", fmt_usize_list(&self.enc_layers));
        push("encoder.d_ff", self.enc_d_ff.to_string());
        push("encoder.dropout", self.enc_dropout.to_string());
        push("pretrain.mask_ratio", self.pre_mask_ratio.to_string());
        push("pretrain.alpha", self.pre_alpha.to_string());
        push("pretrain.beta", self.pre_beta.to_string());
        push("pretrain.epochs", self.pre_epochs.to_string());
        push("pretrain.batch_size", self.pre_batch.to_string());
        push("pretrain.lr", self.pre_lr.to_string());
        push("pretrain.threshold", self.pre_threshold.to_string());
        push("pretrain.distill", distill.to_string());
        push("pretrain.use_hsd", self.pre_use_hsd.to_string());
        push("pretrain.use_ded", self.pre_use_ded.to_string());
        push("pretrain.detach_kv", self.pre_detach_kv.to_string());
        push("pretrain.stride", self.pre_stride.to_string());
        push("pretrain.dec_heads", self.pre_dec_heads.to_string());
        push("finetune.epochs", self.ft_epochs.to_string());
        push("finetune.batch_size", self.ft_batch.to_string());
        push("finetune.lr", self.ft_lr.to_string());
        push("finetune.mode", mode.to_string());
        push("finetune.use_csa", self.ft_use_csa.to_string());
        push("finetune.aggregation", agg.to_string());
        push("finetune.threshold", self.ft_threshold.to_string());
        push("finetune.stride", self.ft_stride.to_string());
        push("eval.naive_period", self.naive_period.to_string());
        s
    }

    /// Cross-field checks beyond per-key parsing.
    pub fn validate(&self) -> Result<()> {
        let spec = self.patch_spec()?;
        if self.lookback < self.patch_p {
            return Err(Error::config(format!(
                "data.lookback = {} is shorter than patch.p = {}",
                self.lookback, self.patch_p
            )));
        }
        if self.enc_layers.len() != spec.levels {
            return Err(Error::config(format!(
                "patch.p/patch.sp = {} implies {} hierarchies but encoder.layers \
                 has {} entries",
                spec.n_sub,
                spec.levels,
                self.enc_layers.len()
            )));
        }
        self.encoder_config().validate()?;
        self.split.validate()?;
        if self.horizon == 0 {
            return Err(Error::config("data.horizon must be positive"));
        }
        if !(self.pre_mask_ratio > 0.0 && self.pre_mask_ratio < 1.0) {
            return Err(Error::config(format!(
                "pretrain.mask_ratio must lie strictly between 0 and 1, got {}",
                self.pre_mask_ratio
            )));
        }
        if self.pre_alpha < 0.0 || self.pre_beta < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if self.pre_threshold <= 0.0 || self.ft_threshold <= 0.0 {
            return Err(Error::config("smooth-l1 thresholds must be positive"));
        }
        if !(0.0..1.0).contains(&self.enc_dropout) {
            return Err(Error::config(format!(
                "encoder.dropout must lie in [0, 1), got {}",
                self.enc_dropout
            )));
        }
        if self.pre_lr <= 0.0 || self.ft_lr <= 0.0 {
            return Err(Error::config("learning rates must be positive"));
        }
        for (k, v) in [
            ("pretrain.epochs", self.pre_epochs),
            ("pretrain.batch_size", self.pre_batch),
            ("pretrain.stride", self.pre_stride),
            ("pretrain.dec_heads", self.pre_dec_heads),
            ("finetune.epochs", self.ft_epochs),
            ("finetune.batch_size", self.ft_batch),
            ("finetune.stride", self.ft_stride),
            ("data.eval_stride", self.eval_stride),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{k} must be positive")));
            }
        }
        if !self.enc_d.is_multiple_of(self.pre_dec_heads) {
            return Err(Error::config(format!(
                "encoder.d = {} must divide evenly into pretrain.dec_heads = {}",
                self.enc_d, self.pre_dec_heads
            )));
        }
        if self.data_source == DataSource::Csv && self.csv_path.is_empty() {
            return Err(Error::config(
                "data.source = csv requires data.csv_path",
            ));
        }
        Ok(())
    }

    pub fn patch_spec(&self) -> Result<PatchSpec> {
        PatchSpec::new(self.patch_p, self.patch_stride, self.patch_sp)
    }

    /// Feed-forward width, resolving the `0 = twice the model width` default.
    pub fn d_ff(&self) -> usize {
        if self.enc_d_ff == 0 {
            2 * self.enc_d
        } else {
            self.enc_d_ff
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            d: self.enc_d,
            heads: self.enc_heads,
            layers: self.enc_layers.clone(),
            d_ff: self.d_ff(),
            dropout: self.enc_dropout,
        }
    }

    pub fn pretrain_settings(&self) -> PretrainSettings {
        PretrainSettings {
            mask_ratio: self.pre_mask_ratio,
            alpha: self.pre_alpha,
            beta: self.pre_beta,
            threshold: self.pre_threshold,
            distill: self.pre_distill,
            use_hsd: self.pre_use_hsd,
            detach_kv: self.pre_detach_kv,
        }
    }

    pub fn forecast_settings(&self) -> ForecastSettings {
        ForecastSettings {
            horizon: self.horizon,
            use_csa: self.ft_use_csa,
            aggregation: self.ft_aggregation,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = RunConfig {
            seed: 1234,
            enc_layers: vec![1, 2, 3],
            pre_mask_ratio: 0.3,
            ft_mode: FinetuneMode::LinearProbe,
            pre_distill: DistillMetric::Cosine,
            ..RunConfig::default()
        };
        cfg.synth.components = vec![Sinusoid {
            period: 12.5,
            amplitude: 0.75,
            phase: -0.25,
        }];
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
        // And the canonical form is a fixpoint.
        assert_eq!(text, back.to_text());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::parse("# a comment\n\nseed = 99\n  # another\n").unwrap();
        assert_eq!(cfg.seed, 99);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::parse("sed = 7\n").unwrap_err();
        assert!(err.to_string().contains("unknown config key 'sed'"), "{err}");
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let err = RunConfig::parse("seed = 1\nseed = 2\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn type_errors_name_the_key() {
        let err = RunConfig::parse("pretrain.lr = fast\n").unwrap_err();
        assert!(err.to_string().contains("pretrain.lr"), "{err}");
        let err = RunConfig::parse("pretrain.use_hsd = yes\n").unwrap_err();
        assert!(err.to_string().contains("true or false"), "{err}");
    }

    #[test]
    fn cross_field_validation_catches_geometry_conflicts() {
        let err = RunConfig::parse("patch.sp = 12\n").unwrap_err();
        assert!(err.to_string().contains("hierarchies"), "{err}");
        let err = RunConfig::parse("data.lookback = 12\n").unwrap_err();
        assert!(err.to_string().contains("shorter than"), "{err}");
        let err = RunConfig::parse("pretrain.mask_ratio = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("mask_ratio"), "{err}");
        let err = RunConfig::parse("data.source = csv\n").unwrap_err();
        assert!(err.to_string().contains("csv_path"), "{err}");
    }

    #[test]
    fn overrides_apply_together_before_validation() {
        let base = RunConfig::default();
        // Individually inconsistent (sp = p needs a single-entry layer list),
        // together fine.
        let cfg = base
            .with_overrides(&[("patch.sp", "24"), ("encoder.layers", "6")])
            .unwrap();
        assert_eq!(cfg.patch_sp, 24);
        assert_eq!(cfg.enc_layers, vec![6]);
        assert!(base.with_overrides(&[("patch.sp", "24")]).is_err());
        assert!(base.with_overrides(&[("nope", "1")]).is_err());
    }

    #[test]
    fn d_ff_zero_resolves_to_twice_the_width() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.d_ff(), 256);
        let cfg2 = RunConfig::parse("encoder.d_ff = 100\n").unwrap();
        assert_eq!(cfg2.d_ff(), 100);
    }

    #[test]
    fn default_config_is_valid_and_matches_reference_geometry() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let spec = cfg.patch_spec().unwrap();
        assert_eq!(spec.n_sub, 4);
        assert_eq!(spec.levels, 3);
        assert_eq!(spec.n_coarse(cfg.lookback).unwrap(), 21);
    }
}
