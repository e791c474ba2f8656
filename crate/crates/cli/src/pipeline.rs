//! End-to-end runs: data preparation, pre-training, fine-tuning, evaluation
//! and forecasting, each reading a [`RunConfig`] and leaving its artifacts
//! under the configured output directory.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use himtm_core::adam::AdamConfig;
use himtm_core::checkpoint::Checkpoint;
use himtm_core::config::{DataSource, FinetuneMode, RunConfig};
use himtm_core::data::{
    audit_windows, load_csv, materialize_xy, split_bounds, standardize, synth_generate,
    windows_in_range, Series, SplitBounds, Standardizer, WindowRef,
};
use himtm_core::error::{Error, Result};
use himtm_core::finetune::{
    evaluate, finetune_run, predict, EvalStats, FinetuneOptions, ForecastModel,
};
use himtm_core::metrics::{
    mse_mae, naive_repeat_forecast, write_forecasts, write_history, write_metrics, ForecastRow,
    HistoryRow, MetricsRow,
};
use himtm_core::model::Backbone;
use himtm_core::params::{load_named, named_tensors, Params};
use himtm_core::pretrain::{pretrain_run, PretrainModel, PretrainOptions};
use himtm_core::rng::stream;
use himtm_core::tensor::Tensor;

/// A standardized series with its split boundaries, ready for windowing.
pub struct Prepared {
    pub series: Series<f64>,
    pub standardizer: Standardizer,
    pub bounds: SplitBounds,
}

/// Build the series (synthetic or CSV), fix the chronological splits, and
/// standardize every channel on train-span statistics only.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let raw: Series<f64> = match cfg.data_source {
        DataSource::Synthetic => {
            synth_generate(&cfg.synth, &mut stream(cfg.seed, "synth", 0, 0))?
        }
        DataSource::Csv => {
            let (series, warnings) = load_csv(Path::new(&cfg.csv_path))?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            series
        }
    };
    let bounds = split_bounds(raw.len(), cfg.split)?;
    let (series, standardizer, warnings) = standardize(&raw, bounds.train_end)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    Ok(Prepared {
        series,
        standardizer,
        bounds,
    })
}

impl Prepared {
    fn range(&self, split: Split) -> (usize, usize) {
        match split {
            Split::Train => (0, self.bounds.train_end),
            Split::Val => (self.bounds.train_end, self.bounds.val_end),
            Split::Test => (self.bounds.val_end, self.bounds.len),
        }
    }

    /// Window references for one split, leakage-audited.
    pub fn window_refs(
        &self,
        split: Split,
        lookback: usize,
        horizon: usize,
        stride: usize,
    ) -> Result<Vec<WindowRef>> {
        let (a, b) = self.range(split);
        let refs = windows_in_range(&self.series, a, b, lookback, horizon, stride)?;
        audit_windows(&refs, a, b, lookback, horizon)?;
        Ok(refs)
    }

    /// Materialized look-back windows (no targets) for pre-training.
    pub fn x_windows(&self, split: Split, lookback: usize, stride: usize) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .window_refs(split, lookback, 0, stride)?
            .into_iter()
            .map(|r| materialize_xy(&self.series, r, lookback, 0).0)
            .collect())
    }

    /// Materialized supervised pairs for fine-tuning or evaluation.
    pub fn xy_pairs(
        &self,
        split: Split,
        lookback: usize,
        horizon: usize,
        stride: usize,
    ) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        Ok(self
            .window_refs(split, lookback, horizon, stride)?
            .into_iter()
            .map(|r| materialize_xy(&self.series, r, lookback, horizon))
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

fn init_pretrain_model(cfg: &RunConfig) -> Result<PretrainModel<f64>> {
    let mut rng = stream(cfg.seed, "init-pretrain", 0, 0);
    let backbone = Backbone::init(
        cfg.patch_spec()?,
        cfg.lookback,
        &cfg.encoder_config(),
        &mut rng,
    )?;
    PretrainModel::init(backbone, cfg.pre_dec_heads, cfg.pre_use_ded, &mut rng)
}

fn init_forecast_model(cfg: &RunConfig) -> Result<ForecastModel<f64>> {
    let mut rng = stream(cfg.seed, "init-finetune", 0, 0);
    let backbone = Backbone::init(
        cfg.patch_spec()?,
        cfg.lookback,
        &cfg.encoder_config(),
        &mut rng,
    )?;
    ForecastModel::init(backbone, &cfg.forecast_settings(), &mut rng)
}

pub fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    Path::new(&cfg.out_dir).join(name)
}

/// Masked pre-training over the train split. Writes `pretrain.ckpt` and
/// `pretrain_history.csv` into the output directory.
pub fn run_pretrain(cfg: &RunConfig, quiet: bool) -> Result<()> {
    let prepared = prepare(cfg)?;
    let windows = prepared.x_windows(Split::Train, cfg.lookback, cfg.pre_stride)?;
    if !quiet {
        println!(
            "pre-training on {} windows ({} channels x {} starts)",
            windows.len(),
            prepared.series.channel_count(),
            windows.len() / prepared.series.channel_count().max(1)
        );
    }
    let mut model = init_pretrain_model(cfg)?;
    let opts = PretrainOptions {
        epochs: cfg.pre_epochs,
        batch_size: cfg.pre_batch,
        adam: AdamConfig {
            lr: cfg.pre_lr,
            ..AdamConfig::default()
        },
        seed: cfg.seed,
    };
    let history = pretrain_run(&mut model, &windows, &cfg.pretrain_settings(), &opts, |r| {
        if !quiet {
            println!(
                "epoch {:>3}/{} · recon {:.6} · distill {:.6} · total {:.6}",
                r.epoch, cfg.pre_epochs, r.lr_sum, r.ld_sum, r.total
            );
        }
    })?;
    let rows: Vec<HistoryRow> = history
        .iter()
        .map(|r| HistoryRow {
            epoch: r.epoch as u64,
            ld: r.ld.clone(),
            lr: r.lr.clone(),
            ld_sum: r.ld_sum,
            lr_sum: r.lr_sum,
            total: r.total,
        })
        .collect();
    write_history(&out_path(cfg, "pretrain_history.csv"), &cfg.to_text(), &rows)?;
    let ckpt = Checkpoint::capture("pretrain", cfg.seed, cfg.pre_epochs as u64, cfg, &model);
    let ckpt_path = out_path(cfg, "pretrain.ckpt");
    ckpt.save(&ckpt_path)?;
    if !quiet {
        println!("saved {}", ckpt_path.display());
    }
    Ok(())
}

fn tensors_of(model: &dyn Params<f64>) -> HashMap<String, Tensor<f64>> {
    named_tensors(model, true).into_iter().collect()
}

/// Load backbone weights (embedding + encoder) from a checkpoint into a
/// freshly initialized forecasting model. Heads keep their fresh init.
fn adopt_backbone(model: &mut ForecastModel<f64>, ckpt: &Checkpoint) -> Result<()> {
    let map = ckpt.tensors_map();
    // Only adopt backbone tensors; decoder ("dec.") or head ("csa.") entries
    // from the checkpoint must not leak into the fresh heads.
    let backbone_only: HashMap<String, Tensor<f64>> = map
        .into_iter()
        .filter(|(k, _)| k.starts_with("embed.") || k.starts_with("encoder."))
        .collect();
    if backbone_only.is_empty() {
        return Err(Error::contract(
            "checkpoint holds no backbone tensors (embed.* / encoder.*)",
        ));
    }
    load_named(model, &backbone_only, true)
}

/// Supervised fine-tuning. Unless `no_pretrain` is set, the backbone is
/// initialized from `from` (default: `<out.dir>/pretrain.ckpt`). Writes
/// `finetune.ckpt` and `metrics.csv`.
pub fn run_finetune(
    cfg: &RunConfig,
    from: Option<&Path>,
    no_pretrain: bool,
    quiet: bool,
) -> Result<EvalStats> {
    let prepared = prepare(cfg)?;
    let train = prepared.xy_pairs(Split::Train, cfg.lookback, cfg.horizon, cfg.ft_stride)?;
    let val = prepared.xy_pairs(Split::Val, cfg.lookback, cfg.horizon, cfg.eval_stride)?;
    let test = prepared.xy_pairs(Split::Test, cfg.lookback, cfg.horizon, cfg.eval_stride)?;
    let mut model = init_forecast_model(cfg)?;
    if !no_pretrain {
        let default_path = out_path(cfg, "pretrain.ckpt");
        let path = from.unwrap_or(&default_path);
        let ckpt = Checkpoint::load(path)?;
        ckpt.check_geometry(cfg)?;
        adopt_backbone(&mut model, &ckpt)?;
        if !quiet {
            println!(
                "loaded backbone from {} ({} epochs of pre-training)",
                path.display(),
                ckpt.completed_epochs
            );
        }
    } else if !quiet {
        println!("training from scratch (no pre-trained backbone)");
    }
    if !quiet {
        println!(
            "fine-tuning on {} train / {} val / {} test windows",
            train.len(),
            val.len(),
            test.len()
        );
    }
    let opts = FinetuneOptions {
        epochs: cfg.ft_epochs,
        batch_size: cfg.ft_batch,
        adam: AdamConfig {
            lr: cfg.ft_lr,
            ..AdamConfig::default()
        },
        seed: cfg.seed,
        linear_probe: cfg.ft_mode == FinetuneMode::LinearProbe,
        threshold: cfg.ft_threshold,
    };
    let history = finetune_run(&mut model, &train, &val, &opts, |e| {
        if !quiet {
            match &e.val {
                Some(v) => println!(
                    "epoch {:>3}/{} · train loss {:.6} · val mse {:.6} mae {:.6}",
                    e.epoch, cfg.ft_epochs, e.train_loss, v.mse, v.mae
                ),
                None => println!(
                    "epoch {:>3}/{} · train loss {:.6}",
                    e.epoch, cfg.ft_epochs, e.train_loss
                ),
            }
        }
    })?;
    let mut rows = Vec::new();
    for e in &history {
        rows.push(MetricsRow {
            epoch: e.epoch as u64,
            split: "train".into(),
            mse: f64::NAN,
            mae: f64::NAN,
            loss: e.train_loss,
        });
        if let Some(v) = &e.val {
            rows.push(MetricsRow {
                epoch: e.epoch as u64,
                split: "val".into(),
                mse: v.mse,
                mae: v.mae,
                loss: v.loss,
            });
        }
    }
    let stats = if test.is_empty() {
        EvalStats {
            mse: f64::NAN,
            mae: f64::NAN,
            loss: f64::NAN,
            count: 0,
        }
    } else {
        let stats = evaluate(&model, &test, cfg.ft_batch, cfg.ft_threshold)?;
        rows.push(MetricsRow {
            epoch: cfg.ft_epochs as u64,
            split: "test".into(),
            mse: stats.mse,
            mae: stats.mae,
            loss: stats.loss,
        });
        if !quiet {
            println!(
                "test: mse {:.6} · mae {:.6} · loss {:.6} ({} points)",
                stats.mse, stats.mae, stats.loss, stats.count
            );
        }
        stats
    };
    write_metrics(&out_path(cfg, "metrics.csv"), &cfg.to_text(), &rows)?;
    let ckpt = Checkpoint::capture("finetune", cfg.seed, cfg.ft_epochs as u64, cfg, &model);
    let ckpt_path = out_path(cfg, "finetune.ckpt");
    ckpt.save(&ckpt_path)?;
    if !quiet {
        println!("saved {}", ckpt_path.display());
    }
    Ok(stats)
}

/// Rebuild the forecasting model a checkpoint describes. The checkpoint's
/// embedded config is the architecture authority (after the geometry guard
/// against the current config); every model tensor must be present.
fn restore_forecast_model(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<(ForecastModel<f64>, RunConfig)> {
    ckpt.check_geometry(cfg)?;
    let arch = RunConfig::parse(&ckpt.config_text)
        .map_err(|e| Error::parse(format!("checkpoint embeds an unreadable config: {e}")))?;
    let mut model = init_forecast_model(&arch)?;
    load_named(&mut model, &ckpt.tensors_map(), false).map_err(|e| {
        Error::contract(format!(
            "checkpoint does not describe a forecasting model (phase '{}'): {e}",
            ckpt.phase
        ))
    })?;
    Ok((model, arch))
}

/// Evaluate a fine-tuned checkpoint on the test split; optionally compare
/// against the repeat-last-period naive baseline. Writes `eval.csv`.
pub fn run_eval(cfg: &RunConfig, from: Option<&Path>, quiet: bool) -> Result<EvalStats> {
    let default_path = out_path(cfg, "finetune.ckpt");
    let path = from.unwrap_or(&default_path);
    let ckpt = Checkpoint::load(path)?;
    let (model, arch) = restore_forecast_model(&ckpt, cfg)?;
    let prepared = prepare(cfg)?;
    let test = prepared.xy_pairs(Split::Test, arch.lookback, arch.horizon, cfg.eval_stride)?;
    if test.is_empty() {
        return Err(Error::contract(
            "the test split is too short for a single evaluation window",
        ));
    }
    let stats = evaluate(&model, &test, cfg.ft_batch, cfg.ft_threshold)?;
    let mut rows = vec![MetricsRow {
        epoch: ckpt.completed_epochs,
        split: "test".into(),
        mse: stats.mse,
        mae: stats.mae,
        loss: stats.loss,
    }];
    if !quiet {
        println!(
            "test: mse {:.6} · mae {:.6} · loss {:.6} ({} points)",
            stats.mse, stats.mae, stats.loss, stats.count
        );
    }
    if cfg.naive_period > 0 {
        let (nmse, nmae) = naive_eval(&test, arch.horizon, cfg.naive_period)?;
        rows.push(MetricsRow {
            epoch: 0,
            split: "naive".into(),
            mse: nmse,
            mae: nmae,
            loss: f64::NAN,
        });
        if !quiet {
            println!(
                "naive (repeat period {}): mse {:.6} · mae {:.6}",
                cfg.naive_period, nmse, nmae
            );
            if nmse > 0.0 {
                println!(
                    "improvement over naive: {:.1}% mse",
                    100.0 * (1.0 - stats.mse / nmse)
                );
            }
        }
    }
    write_metrics(&out_path(cfg, "eval.csv"), &cfg.to_text(), &rows)?;
    Ok(stats)
}

/// Pooled MSE/MAE of the seasonal-naive baseline over supervised pairs.
pub fn naive_eval(
    pairs: &[(Vec<f64>, Vec<f64>)],
    horizon: usize,
    period: usize,
) -> Result<(f64, f64)> {
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut n = 0usize;
    for (x, y) in pairs {
        let yhat = naive_repeat_forecast(x, horizon, period)?;
        let (mse, mae) = mse_mae(y, &yhat);
        se += mse * y.len() as f64;
        ae += mae * y.len() as f64;
        n += y.len();
    }
    let nf = n.max(1) as f64;
    Ok((se / nf, ae / nf))
}

/// Dump per-step test-split forecasts (in original units) to CSV.
pub fn run_forecast(
    cfg: &RunConfig,
    from: Option<&Path>,
    out: Option<&Path>,
    quiet: bool,
) -> Result<()> {
    let default_path = out_path(cfg, "finetune.ckpt");
    let path = from.unwrap_or(&default_path);
    let ckpt = Checkpoint::load(path)?;
    let (model, arch) = restore_forecast_model(&ckpt, cfg)?;
    let prepared = prepare(cfg)?;
    let refs = prepared.window_refs(Split::Test, arch.lookback, arch.horizon, cfg.eval_stride)?;
    if refs.is_empty() {
        return Err(Error::contract(
            "the test split is too short for a single forecast window",
        ));
    }
    let xs: Vec<Vec<f64>> = refs
        .iter()
        .map(|&r| materialize_xy(&prepared.series, r, arch.lookback, 0).0)
        .collect();
    let preds = predict(&model, xs.iter().map(|x| x.as_slice()), cfg.ft_batch)?;
    let mut rows = Vec::with_capacity(refs.len() * arch.horizon);
    for (r, yhat) in refs.iter().zip(&preds) {
        let name = &prepared.series.channels[r.channel].name;
        let truth = &prepared.series.channels[r.channel].data;
        let first = r.start + arch.lookback;
        for h in 0..arch.horizon {
            rows.push(ForecastRow {
                window_start: first,
                channel: name.clone(),
                h,
                y_true: prepared.standardizer.destandardize(r.channel, truth[first + h]),
                y_pred: prepared.standardizer.destandardize(r.channel, yhat[h]),
            });
        }
    }
    let default_out = out_path(cfg, "forecasts.csv");
    let out = out.unwrap_or(&default_out);
    write_forecasts(out, &rows)?;
    if !quiet {
        println!(
            "wrote {} forecast points ({} windows x horizon {}) to {}",
            rows.len(),
            refs.len(),
            arch.horizon,
            out.display()
        );
    }
    Ok(())
}

/// One full cycle in memory — pre-train, adopt the backbone, fine-tune,
/// evaluate on test — without touching the filesystem. Used by sweeps and
/// ablations.
#[derive(Debug, Clone, Copy)]
pub struct CycleOutcome {
    pub pretrain_total: f64,
    pub test: EvalStats,
}

pub fn run_cycle(cfg: &RunConfig) -> Result<CycleOutcome> {
    let prepared = prepare(cfg)?;
    let windows = prepared.x_windows(Split::Train, cfg.lookback, cfg.pre_stride)?;
    let mut pre = init_pretrain_model(cfg)?;
    let opts = PretrainOptions {
        epochs: cfg.pre_epochs,
        batch_size: cfg.pre_batch,
        adam: AdamConfig {
            lr: cfg.pre_lr,
            ..AdamConfig::default()
        },
        seed: cfg.seed,
    };
    let history = pretrain_run(&mut pre, &windows, &cfg.pretrain_settings(), &opts, |_| {})?;
    let pretrain_total = history.last().map_or(f64::NAN, |r| r.total);

    let train = prepared.xy_pairs(Split::Train, cfg.lookback, cfg.horizon, cfg.ft_stride)?;
    let val = prepared.xy_pairs(Split::Val, cfg.lookback, cfg.horizon, cfg.eval_stride)?;
    let test = prepared.xy_pairs(Split::Test, cfg.lookback, cfg.horizon, cfg.eval_stride)?;
    let mut model = init_forecast_model(cfg)?;
    let map = tensors_of(&pre);
    let backbone_only: HashMap<String, Tensor<f64>> = map
        .into_iter()
        .filter(|(k, _)| k.starts_with("embed.") || k.starts_with("encoder."))
        .collect();
    load_named(&mut model, &backbone_only, true)?;
    let fopts = FinetuneOptions {
        epochs: cfg.ft_epochs,
        batch_size: cfg.ft_batch,
        adam: AdamConfig {
            lr: cfg.ft_lr,
            ..AdamConfig::default()
        },
        seed: cfg.seed,
        linear_probe: cfg.ft_mode == FinetuneMode::LinearProbe,
        threshold: cfg.ft_threshold,
    };
    finetune_run(&mut model, &train, &val, &fopts, |_| {})?;
    let test_stats = evaluate(&model, &test, cfg.ft_batch, cfg.ft_threshold)?;
    Ok(CycleOutcome {
        pretrain_total,
        test: test_stats,
    })
}
