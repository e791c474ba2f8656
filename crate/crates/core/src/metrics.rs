//! Run artifacts: evaluation metrics, forecast dumps, and pre-training
//! history, all as plain CSV so downstream tooling needs nothing special.
//! Metrics files open with the run's config echoed in `#`-prefixed comment
//! lines, making every results file self-describing; two runs with the same
//! seed and config must produce byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// One evaluation (or training) row. Training rows carry only the loss;
/// their mse/mae are written as `nan`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: u64,
    pub split: String,
    pub mse: f64,
    pub mae: f64,
    pub loss: f64,
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| Error::io(format!("cannot create {}", parent.display()), e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)
        .map_err(|e| Error::io(format!("cannot write {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| {
        Error::io(
            format!("cannot rename {} to {}", tmp.display(), path.display()),
            e,
        )
    })
}

fn config_echo(config_text: &str) -> String {
    let mut s = String::from("# config-begin\n");
    for line in config_text.lines() {
        let _ = writeln!(s, "# {line}");
    }
    s.push_str("# config-end\n");
    s
}

/// Write a metrics CSV: config echo, header, one row per record.
pub fn write_metrics(path: &Path, config_text: &str, rows: &[MetricsRow]) -> Result<()> {
    let mut s = config_echo(config_text);
    s.push_str("epoch,split,mse,mae,loss\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.split, r.mse, r.mae, r.loss);
    }
    write_atomic(path, &s)
}

/// Read back a metrics CSV written by [`write_metrics`]; returns the embedded
/// config text and the rows.
pub fn read_metrics(path: &Path) -> Result<(String, Vec<MetricsRow>)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("cannot read {}", path.display()), e))?;
    let mut lines = text.lines().enumerate();
    let mut config = String::new();
    match lines.next() {
        Some((_, "# config-begin")) => {}
        _ => {
            return Err(Error::parse(format!(
                "{}: expected '# config-begin' on line 1",
                path.display()
            )))
        }
    }
    let mut saw_end = false;
    for (_, line) in lines.by_ref() {
        if line == "# config-end" {
            saw_end = true;
            break;
        }
        let body = line.strip_prefix("# ").or_else(|| line.strip_prefix('#'));
        match body {
            Some(b) => {
                config.push_str(b);
                config.push('\n');
            }
            None => {
                return Err(Error::parse(format!(
                    "{}: config echo interrupted by non-comment line",
                    path.display()
                )))
            }
        }
    }
    if !saw_end {
        return Err(Error::parse(format!(
            "{}: missing '# config-end'",
            path.display()
        )));
    }
    match lines.next() {
        Some((_, "epoch,split,mse,mae,loss")) => {}
        other => {
            return Err(Error::parse(format!(
                "{}: expected metrics header, got {:?}",
                path.display(),
                other.map(|(_, l)| l)
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::parse(format!(
                "{} line {}: expected 5 fields, got {}",
                path.display(),
                i + 1,
                parts.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| {
                Error::parse(format!(
                    "{} line {}: '{s}' is not a number",
                    path.display(),
                    i + 1
                ))
            })
        };
        rows.push(MetricsRow {
            epoch: parts[0].parse().map_err(|_| {
                Error::parse(format!(
                    "{} line {}: '{}' is not an epoch",
                    path.display(),
                    i + 1,
                    parts[0]
                ))
            })?,
            split: parts[1].to_string(),
            mse: num(parts[2])?,
            mae: num(parts[3])?,
            loss: num(parts[4])?,
        });
    }
    Ok((config, rows))
}

/// One forecast point: `window_start` is the series index of the first
/// forecast step, so the predicted value lands at index `window_start + h`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRow {
    pub window_start: usize,
    pub channel: String,
    pub h: usize,
    pub y_true: f64,
    pub y_pred: f64,
}

pub fn write_forecasts(path: &Path, rows: &[ForecastRow]) -> Result<()> {
    let mut s = String::from("window_start,channel,h,y_true,y_pred\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.window_start, r.channel, r.h, r.y_true, r.y_pred
        );
    }
    write_atomic(path, &s)
}

pub fn read_forecasts(path: &Path) -> Result<Vec<ForecastRow>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("cannot read {}", path.display()), e))?;
    let mut lines = text.lines();
    if lines.next() != Some("window_start,channel,h,y_true,y_pred") {
        return Err(Error::parse(format!(
            "{}: missing forecast header",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::parse(format!(
                "{} line {}: expected 5 fields",
                path.display(),
                i + 2
            )));
        }
        let bad = |what: &str| {
            Error::parse(format!(
                "{} line {}: cannot parse {what}",
                path.display(),
                i + 2
            ))
        };
        rows.push(ForecastRow {
            window_start: parts[0].parse().map_err(|_| bad("window_start"))?,
            channel: parts[1].to_string(),
            h: parts[2].parse().map_err(|_| bad("h"))?,
            y_true: parts[3].parse().map_err(|_| bad("y_true"))?,
            y_pred: parts[4].parse().map_err(|_| bad("y_pred"))?,
        });
    }
    Ok(rows)
}

/// Per-epoch pre-training history: each hierarchy's distillation and
/// reconstruction terms plus their sums and the weighted total.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: u64,
    pub ld: Vec<f64>,
    pub lr: Vec<f64>,
    pub ld_sum: f64,
    pub lr_sum: f64,
    pub total: f64,
}

pub fn write_history(path: &Path, config_text: &str, rows: &[HistoryRow]) -> Result<()> {
    let levels = rows.first().map_or(0, |r| r.ld.len());
    let mut s = config_echo(config_text);
    s.push_str("epoch");
    for l in 1..=levels {
        let _ = write!(s, ",ld{l}");
    }
    for l in 1..=levels {
        let _ = write!(s, ",lr{l}");
    }
    s.push_str(",ld_sum,lr_sum,total\n");
    for r in rows {
        let _ = write!(s, "{}", r.epoch);
        for v in &r.ld {
            let _ = write!(s, ",{v}");
        }
        for v in &r.lr {
            let _ = write!(s, ",{v}");
        }
        let _ = writeln!(s, ",{},{},{}", r.ld_sum, r.lr_sum, r.total);
    }
    write_atomic(path, &s)
}

/// Seasonal-naive baseline: repeat the last observed period across the
/// horizon, `yhat[h] = x[len - period + (h % period)]`.
pub fn naive_repeat_forecast(x: &[f64], horizon: usize, period: usize) -> Result<Vec<f64>> {
    if period == 0 {
        return Err(Error::config("naive baseline period must be positive"));
    }
    if x.len() < period {
        return Err(Error::config(format!(
            "naive baseline needs at least one full period ({period} points), \
             lookback has {}",
            x.len()
        )));
    }
    let tail = &x[x.len() - period..];
    Ok((0..horizon).map(|h| tail[h % period]).collect())
}

/// Mean squared and absolute error between two equal-length slices.
pub fn mse_mae(y_true: &[f64], y_pred: &[f64]) -> (f64, f64) {
    assert_eq!(y_true.len(), y_pred.len());
    let n = y_true.len().max(1) as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    for (t, p) in y_true.iter().zip(y_pred.iter()) {
        let d = p - t;
        se += d * d;
        ae += d.abs();
    }
    (se / n, ae / n)
}
