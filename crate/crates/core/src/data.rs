//! Data plumbing: CSV loading, synthetic series, per-channel
//! standardization, chronological splits, and window enumeration.
//!
//! Channels are modeled independently: every (channel, window) pair is one
//! training sample. Splits are chronological (train, then validation, then
//! test); standardization statistics come from the train span only, and a
//! window belongs to a split only when its look-back *and* horizon fit
//! inside that split, so no sample straddles a boundary.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::num::{lit, Element};
use crate::rng::normal;

/// One named channel of a multivariate series.
#[derive(Debug, Clone)]
pub struct Channel<T> {
    pub name: String,
    pub data: Vec<T>,
}

/// A multivariate time series, channel-major.
#[derive(Debug, Clone)]
pub struct Series<T> {
    pub channels: Vec<Channel<T>>,
}

impl<T: Element> Series<T> {
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, |c| c.data.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }
}

// ── CSV loading ─────────────────────────────────────────────────────────────

fn parse_timestamp(s: &str) -> Option<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = chrono::NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    if let Ok(d) = chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Some(d.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp());
    }
    None
}

/// Load a CSV whose first column is a timestamp (ISO-8601 or plain integer)
/// and whose remaining columns are value channels. Rows arriving out of
/// chronological order are sorted (stably) with a warning. Line numbers in
/// diagnostics count the header as line 1.
pub fn load_csv<T: Element>(path: &Path) -> Result<(Series<T>, Vec<String>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(format!("cannot open '{}': {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(format!("cannot read the header row: {e}")))?
        .clone();
    if headers.len() < 2 {
        return Err(Error::parse(format!(
            "'{}' needs a timestamp column plus at least one value column, \
             found {} column(s)",
            path.display(),
            headers.len()
        )));
    }
    let names: Vec<String> = headers.iter().skip(1).map(|s| s.to_string()).collect();
    let mut keys: Vec<i64> = Vec::new();
    let mut rows: Vec<Vec<T>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record =
            record.map_err(|e| Error::parse(format!("line {line}: malformed row: {e}")))?;
        if record.len() != headers.len() {
            return Err(Error::parse(format!(
                "line {line}: expected {} fields, found {}",
                headers.len(),
                record.len()
            )));
        }
        let ts_raw = record.get(0).expect("length checked");
        let key = parse_timestamp(ts_raw).ok_or_else(|| {
            Error::parse(format!(
                "line {line}: cannot parse timestamp '{ts_raw}' (expected \
                 ISO-8601 or an integer)"
            ))
        })?;
        let mut row = Vec::with_capacity(names.len());
        for (ci, field) in record.iter().skip(1).enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::parse(format!(
                    "line {line}, column '{}': cannot parse '{field}' as a number",
                    names[ci]
                ))
            })?;
            row.push(lit::<T>(v));
        }
        keys.push(key);
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::parse(format!(
            "'{}' has no data rows",
            path.display()
        )));
    }
    let mut warnings = Vec::new();
    if keys.windows(2).any(|w| w[1] < w[0]) {
        warnings.push(
            "timestamps are not in ascending order; rows were sorted by timestamp".to_string(),
        );
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by_key(|&i| keys[i]);
        rows = order.iter().map(|&i| std::mem::take(&mut rows[i])).collect();
    }
    let channels = names
        .into_iter()
        .enumerate()
        .map(|(ci, name)| Channel {
            name,
            data: rows.iter().map(|r| r[ci]).collect(),
        })
        .collect();
    Ok((Series { channels }, warnings))
}

// ── synthetic series ────────────────────────────────────────────────────────

/// One sinusoidal component of a synthetic series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sinusoid {
    pub period: f64,
    pub amplitude: f64,
    pub phase: f64,
}

/// Recipe for a deterministic synthetic series: a sum of sinusoids plus a
/// linear trend and Gaussian noise. Channel `c` shifts every phase by
/// `0.7·c` so channels are related but not identical.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecipe {
    pub length: usize,
    pub channels: usize,
    pub components: Vec<Sinusoid>,
    pub trend: f64,
    pub noise_std: f64,
}

pub fn synth_generate<T: Element>(
    recipe: &SynthRecipe,
    rng: &mut ChaCha8Rng,
) -> Result<Series<T>> {
    if recipe.length == 0 || recipe.channels == 0 {
        return Err(Error::config(format!(
            "synthetic series needs positive length and channels, got {} and {}",
            recipe.length, recipe.channels
        )));
    }
    if recipe.components.iter().any(|s| s.period <= 0.0) {
        return Err(Error::config("sinusoid periods must be positive"));
    }
    if recipe.noise_std < 0.0 {
        return Err(Error::config("noise level must be non-negative"));
    }
    let mut channels = Vec::with_capacity(recipe.channels);
    for c in 0..recipe.channels {
        let shift = 0.7 * c as f64;
        let data = (0..recipe.length)
            .map(|t| {
                let tt = t as f64;
                let mut v = recipe.trend * tt;
                for s in &recipe.components {
                    v += s.amplitude
                        * (2.0 * std::f64::consts::PI * tt / s.period + s.phase + shift).sin();
                }
                if recipe.noise_std > 0.0 {
                    v += normal(rng, recipe.noise_std);
                }
                lit::<T>(v)
            })
            .collect();
        channels.push(Channel {
            name: format!("ch{}", c + 1),
            data,
        });
    }
    Ok(Series { channels })
}

// ── standardization ─────────────────────────────────────────────────────────

/// Per-channel affine transform fitted on the train span.
#[derive(Debug, Clone)]
pub struct ChannelStats {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone)]
pub struct Standardizer {
    pub channels: Vec<ChannelStats>,
}

impl Standardizer {
    /// Map a standardized value back to the original scale.
    pub fn destandardize(&self, channel: usize, v: f64) -> f64 {
        let s = &self.channels[channel];
        v * s.std + s.mean
    }
}

/// Standardize each channel to zero mean / unit variance using statistics
/// from `[0, train_len)` only. Channels whose train-span standard deviation
/// is (near) zero cannot be standardized and are dropped with a warning.
pub fn standardize<T: Element>(
    series: &Series<T>,
    train_len: usize,
) -> Result<(Series<T>, Standardizer, Vec<String>)> {
    if train_len == 0 || train_len > series.len() {
        return Err(Error::contract(format!(
            "train span of {train_len} points does not fit a series of {}",
            series.len()
        )));
    }
    let mut out = Vec::new();
    let mut stats = Vec::new();
    let mut warnings = Vec::new();
    for ch in &series.channels {
        let head = &ch.data[..train_len];
        let n = train_len as f64;
        let mean = head.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum::<f64>() / n;
        let var = head
            .iter()
            .map(|v| {
                let d = v.to_f64().unwrap_or(f64::NAN) - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        if !std.is_finite() || std < 1e-12 {
            warnings.push(format!(
                "channel '{}' is constant over the train span (std {std:.3e}); \
                 it was excluded from modeling",
                ch.name
            ));
            continue;
        }
        let data = ch
            .data
            .iter()
            .map(|v| lit::<T>((v.to_f64().unwrap_or(f64::NAN) - mean) / std))
            .collect();
        out.push(Channel {
            name: ch.name.clone(),
            data,
        });
        stats.push(ChannelStats {
            name: ch.name.clone(),
            mean,
            std,
        });
    }
    if out.is_empty() {
        return Err(Error::contract(
            "every channel is constant over the train span; nothing to model",
        ));
    }
    Ok((
        Series { channels: out },
        Standardizer { channels: stats },
        warnings,
    ))
}

// ── splits and windows ──────────────────────────────────────────────────────

/// Chronological split fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        if self.train <= 0.0 || self.val < 0.0 || self.test < 0.0 {
            return Err(Error::config(format!(
                "split fractions must be non-negative with a positive train \
                 share, got {},{},{}",
                self.train, self.val, self.test
            )));
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

/// Split boundaries: train `[0, train_end)`, validation
/// `[train_end, val_end)`, test `[val_end, len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitBounds {
    pub train_end: usize,
    pub val_end: usize,
    pub len: usize,
}

pub fn split_bounds(len: usize, f: SplitFractions) -> Result<SplitBounds> {
    f.validate()?;
    let train_end = (len as f64 * f.train).floor() as usize;
    let val_end = (len as f64 * (f.train + f.val)).floor() as usize;
    if train_end == 0 {
        return Err(Error::config(format!(
            "a series of {len} points leaves an empty train split"
        )));
    }
    Ok(SplitBounds {
        train_end,
        val_end,
        len,
    })
}

/// One supervised sample: channel index plus the look-back start. The
/// look-back covers `[start, start+lookback)` and the target
/// `[start+lookback, start+lookback+horizon)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowRef {
    pub channel: usize,
    pub start: usize,
}

/// Starts within `[range_start, range_end)` such that look-back plus
/// horizon fit entirely inside the range.
pub fn window_starts(
    range_start: usize,
    range_end: usize,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(Error::config("window stride must be positive"));
    }
    let need = lookback + horizon;
    if range_end < range_start + need {
        return Ok(Vec::new());
    }
    Ok((range_start..=range_end - need).step_by(stride).collect())
}

/// Enumerate `(channel, start)` samples for one split range, channel-major.
pub fn windows_in_range<T: Element>(
    series: &Series<T>,
    range_start: usize,
    range_end: usize,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<WindowRef>> {
    let starts = window_starts(range_start, range_end, lookback, horizon, stride)?;
    let mut out = Vec::with_capacity(starts.len() * series.channel_count());
    for c in 0..series.channel_count() {
        for &s in &starts {
            out.push(WindowRef {
                channel: c,
                start: s,
            });
        }
    }
    Ok(out)
}

/// Verify no window reaches past `range_end` or before `range_start` — the
/// split-leakage audit.
pub fn audit_windows(
    refs: &[WindowRef],
    range_start: usize,
    range_end: usize,
    lookback: usize,
    horizon: usize,
) -> Result<()> {
    for r in refs {
        if r.start < range_start || r.start + lookback + horizon > range_end {
            return Err(Error::contract(format!(
                "window (channel {}, start {}) leaks outside [{range_start}, {range_end})",
                r.channel, r.start
            )));
        }
    }
    Ok(())
}

/// Copy out the `(x, y)` pair for one window reference.
pub fn materialize_xy<T: Element>(
    series: &Series<T>,
    r: WindowRef,
    lookback: usize,
    horizon: usize,
) -> (Vec<T>, Vec<T>) {
    let d = &series.channels[r.channel].data;
    (
        d[r.start..r.start + lookback].to_vec(),
        d[r.start + lookback..r.start + lookback + horizon].to_vec(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use std::io::Write;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn csv_loads_channels_with_integer_timestamps() {
        let f = write_temp("t,a,b\n0,1.5,-2\n1,2.5,0\n2,3.5,2\n");
        let (s, warnings) = load_csv::<f64>(f.path()).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(s.channel_count(), 2);
        assert_eq!(s.len(), 3);
        assert_eq!(s.channels[0].name, "a");
        assert_eq!(s.channels[0].data, vec![1.5, 2.5, 3.5]);
        assert_eq!(s.channels[1].data, vec![-2.0, 0.0, 2.0]);
    }

    #[test]
    fn csv_accepts_iso_timestamps() {
        let f = write_temp(
            "time,v\n2024-01-01T00:00:00,1\n2024-01-01T01:00:00,2\n2024-01-01T02:00:00,3\n",
        );
        let (s, warnings) = load_csv::<f64>(f.path()).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(s.channels[0].data, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn csv_sorts_out_of_order_rows_with_warning() {
        let f = write_temp("t,v\n2,20\n0,0\n1,10\n");
        let (s, warnings) = load_csv::<f64>(f.path()).unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("sorted"), "{}", warnings[0]);
        assert_eq!(s.channels[0].data, vec![0.0, 10.0, 20.0]);
    }

    #[test]
    fn csv_reports_bad_float_with_line_and_column() {
        let f = write_temp("t,temp\n0,1.0\n1,oops\n");
        let err = load_csv::<f64>(f.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("'temp'"), "{msg}");
        assert!(msg.contains("oops"), "{msg}");
    }

    #[test]
    fn csv_reports_bad_timestamp() {
        let f = write_temp("t,v\nyesterday,1\n");
        let err = load_csv::<f64>(f.path()).unwrap_err();
        assert!(err.to_string().contains("timestamp 'yesterday'"), "{err}");
    }

    #[test]
    fn csv_rejects_empty_and_single_column_files() {
        let f = write_temp("t,v\n");
        assert!(load_csv::<f64>(f.path()).is_err());
        let f2 = write_temp("t\n1\n2\n");
        assert!(load_csv::<f64>(f2.path()).is_err());
    }

    #[test]
    fn synth_is_deterministic_and_periodic_without_noise() {
        let recipe = SynthRecipe {
            length: 100,
            channels: 2,
            components: vec![Sinusoid {
                period: 10.0,
                amplitude: 2.0,
                phase: 0.25,
            }],
            trend: 0.0,
            noise_std: 0.0,
        };
        let a = synth_generate::<f64>(&recipe, &mut stream(5, "synth", 0, 0)).unwrap();
        let b = synth_generate::<f64>(&recipe, &mut stream(5, "synth", 0, 0)).unwrap();
        assert_eq!(a.channels[0].data, b.channels[0].data);
        for t in 0..90 {
            let d = a.channels[0].data[t] - a.channels[0].data[t + 10];
            assert!(d.abs() < 1e-9, "period violated at {t}: {d}");
        }
        // Channels differ by the phase shift.
        assert!(a.channels[0].data != a.channels[1].data);
    }

    #[test]
    fn synth_noise_follows_the_stream() {
        let recipe = SynthRecipe {
            length: 50,
            channels: 1,
            components: vec![],
            trend: 0.0,
            noise_std: 0.5,
        };
        let a = synth_generate::<f64>(&recipe, &mut stream(6, "synth", 0, 0)).unwrap();
        let b = synth_generate::<f64>(&recipe, &mut stream(6, "synth", 0, 0)).unwrap();
        let c = synth_generate::<f64>(&recipe, &mut stream(7, "synth", 0, 0)).unwrap();
        assert_eq!(a.channels[0].data, b.channels[0].data);
        assert!(a.channels[0].data != c.channels[0].data);
    }

    #[test]
    fn standardize_uses_train_span_only() {
        // Train span [0,4): values 0,2,4,6 → mean 3, std sqrt(5).
        let series = Series {
            channels: vec![Channel {
                name: "a".into(),
                data: vec![0.0, 2.0, 4.0, 6.0, 100.0, 200.0],
            }],
        };
        let (out, std, warnings) = standardize(&series, 4).unwrap();
        assert!(warnings.is_empty());
        let s5 = 5.0f64.sqrt();
        assert!((std.channels[0].mean - 3.0).abs() < 1e-12);
        assert!((std.channels[0].std - s5).abs() < 1e-12);
        assert!((out.channels[0].data[0] + 3.0 / s5).abs() < 1e-12);
        // The held-out points use the same transform.
        assert!((out.channels[0].data[4] - (100.0 - 3.0) / s5).abs() < 1e-12);
        // Round trip.
        assert!((std.destandardize(0, out.channels[0].data[5]) - 200.0).abs() < 1e-9);
    }

    #[test]
    fn constant_channel_is_excluded_with_warning() {
        let series = Series {
            channels: vec![
                Channel {
                    name: "flat".into(),
                    data: vec![7.0; 10],
                },
                Channel {
                    name: "live".into(),
                    data: (0..10).map(|i| i as f64).collect(),
                },
            ],
        };
        let (out, _, warnings) = standardize(&series, 8).unwrap();
        assert_eq!(out.channel_count(), 1);
        assert_eq!(out.channels[0].name, "live");
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("'flat'"), "{}", warnings[0]);
    }

    #[test]
    fn split_bounds_follow_fractions() {
        let f = SplitFractions {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        };
        let b = split_bounds(1000, f).unwrap();
        assert_eq!(b.train_end, 600);
        assert_eq!(b.val_end, 800);
        assert!(SplitFractions {
            train: 0.5,
            val: 0.3,
            test: 0.3
        }
        .validate()
        .is_err());
    }

    #[test]
    fn window_count_matches_closed_form() {
        // Range of 700 points, lookback 512, horizon 96, stride 1:
        // 700 − 608 + 1 = 93 windows.
        let starts = window_starts(0, 700, 512, 96, 1).unwrap();
        assert_eq!(starts.len(), 93);
        assert_eq!(*starts.first().unwrap(), 0);
        assert_eq!(*starts.last().unwrap(), 92);
        // Too-short range yields none.
        assert!(window_starts(0, 600, 512, 96, 1).unwrap().is_empty());
    }

    #[test]
    fn windows_never_leak_across_the_range() {
        let series = Series::<f64> {
            channels: vec![Channel {
                name: "a".into(),
                data: (0..300).map(|i| i as f64).collect(),
            }],
        };
        let refs = windows_in_range(&series, 40, 200, 32, 8, 4).unwrap();
        assert!(!refs.is_empty());
        audit_windows(&refs, 40, 200, 32, 8).unwrap();
        assert!(audit_windows(&refs, 50, 200, 32, 8).is_err());
        let (x, y) = materialize_xy(&series, refs[0], 32, 8);
        assert_eq!(x[0], 40.0);
        assert_eq!(x.len(), 32);
        assert_eq!(y[0], 72.0);
        assert_eq!(y.len(), 8);
    }
}
