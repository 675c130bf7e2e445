//! Trajectory CSV exchange, grid resampling, noise injection, and the
//! run-summary format.
//!
//! One canonical CSV layout is used for rotor-speed series: the header
//! `time_s,delta_omega_pu`, then one `time,value` row per sample. Values
//! are written with Rust's shortest round-trip float formatting, so an
//! exported file re-imports to bit-identical numbers and identical runs
//! produce byte-identical files.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub const CSV_HEADER: &str = "time_s,delta_omega_pu";

#[derive(Debug)]
pub enum IoError {
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// Malformed content; message names the row or value.
    Format {
        path: PathBuf,
        message: String,
    },
    /// A resample target lies outside the series' time range.
    OutOfRange {
        t: f64,
        t_first: f64,
        t_last: f64,
    },
}

impl fmt::Display for IoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IoError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            IoError::Format { path, message } => write!(f, "{}: {message}", path.display()),
            IoError::OutOfRange { t, t_first, t_last } => write!(
                f,
                "resample target t = {t} is outside the series range [{t_first}, {t_last}]"
            ),
        }
    }
}

impl std::error::Error for IoError {}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A measured or exported rotor-speed deviation series.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl ReferenceSeries {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Root mean square of a series.
pub fn rms(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

/// Writes a series in the canonical CSV layout.
pub fn write_series_csv(path: &Path, times: &[f64], values: &[f64]) -> Result<(), IoError> {
    assert_eq!(times.len(), values.len(), "times/values length mismatch");
    let mut out = String::with_capacity(32 * (times.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for (t, v) in times.iter().zip(values) {
        out.push_str(&format!("{t},{v}\n"));
    }
    std::fs::write(path, out).map_err(io_err(path))
}

/// Reads a canonical series CSV; rejects bad headers, malformed numbers,
/// and non-increasing times, naming the offending row (1-based, header
/// included, as an editor shows it).
pub fn read_series_csv(path: &Path) -> Result<ReferenceSeries, IoError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let format_err = |message: String| IoError::Format {
        path: path.to_path_buf(),
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == CSV_HEADER => {}
        Some((_, header)) => {
            return Err(format_err(format!(
                "row 1: expected header {CSV_HEADER:?}, found {:?}",
                header.trim()
            )))
        }
        None => return Err(format_err("file is empty".into())),
    }
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (i, line) in lines {
        let row = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (t_str, v_str) = line
            .split_once(',')
            .ok_or_else(|| format_err(format!("row {row}: expected two comma-separated fields")))?;
        let t: f64 = t_str
            .trim()
            .parse()
            .map_err(|_| format_err(format!("row {row}: bad time value {t_str:?}")))?;
        let v: f64 = v_str
            .trim()
            .parse()
            .map_err(|_| format_err(format!("row {row}: bad signal value {v_str:?}")))?;
        if !t.is_finite() || !v.is_finite() {
            return Err(format_err(format!("row {row}: non-finite entry")));
        }
        if let Some(prev) = times.last() {
            if t <= *prev {
                return Err(format_err(format!(
                    "row {row}: time {t} does not increase past {prev}"
                )));
            }
        }
        times.push(t);
        values.push(v);
    }
    if times.is_empty() {
        return Err(format_err("no data rows".into()));
    }
    Ok(ReferenceSeries { times, values })
}

/// Linearly interpolates a series onto `grid` (ascending). Grid points that
/// exactly match a sample time take the sample value unchanged, so a series
/// already on the grid resamples to itself. Targets outside the series'
/// time range fail rather than extrapolate.
pub fn resample(series: &ReferenceSeries, grid: &[f64]) -> Result<Vec<f64>, IoError> {
    let times = &series.times;
    let values = &series.values;
    assert!(!times.is_empty(), "resample of an empty series");
    let (t_first, t_last) = (times[0], times[times.len() - 1]);
    // Slack for grid times produced by k * dt accumulation.
    let tol = 1e-9 * t_last.abs().max(1.0);
    let mut out = Vec::with_capacity(grid.len());
    let mut seg = 0usize;
    for &t in grid {
        if t < t_first - tol || t > t_last + tol {
            return Err(IoError::OutOfRange { t, t_first, t_last });
        }
        let t_clamped = t.clamp(t_first, t_last);
        while seg + 2 < times.len() && times[seg + 1] <= t_clamped {
            seg += 1;
        }
        let next = (seg + 1).min(times.len() - 1);
        let (t0, t1) = (times[seg], times[next]);
        if t_clamped == t0 {
            out.push(values[seg]);
        } else if t_clamped == t1 {
            out.push(values[next]);
        } else {
            let w = (t_clamped - t0) / (t1 - t0);
            out.push(values[seg] * (1.0 - w) + values[next] * w);
        }
    }
    Ok(out)
}

/// Adds i.i.d. zero-mean Gaussian noise with standard deviation
/// `level x RMS(values)`, drawn from a counter-based generator seeded only
/// by `seed`. Level 0 returns the input unchanged (no generator draws).
pub fn add_noise(values: &[f64], level: f64, seed: u64) -> Vec<f64> {
    assert!(level >= 0.0, "noise level must be non-negative");
    if level == 0.0 {
        return values.to_vec();
    }
    let std = level * rms(values);
    if std == 0.0 {
        return values.to_vec();
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("std is finite and positive");
    values.iter().map(|v| v + normal.sample(&mut rng)).collect()
}

/// One run-summary value; formatting keeps the file valid TOML.
#[derive(Debug, Clone)]
pub enum SummaryValue {
    Int(i64),
    Float(f64),
    Text(String),
}

impl fmt::Display for SummaryValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SummaryValue::Int(v) => write!(f, "{v}"),
            SummaryValue::Float(v) => {
                if v.is_nan() {
                    write!(f, "nan")
                } else if v.is_infinite() {
                    write!(f, "{}", if *v > 0.0 { "inf" } else { "-inf" })
                } else {
                    // {:?} keeps a decimal point on integral floats, so the
                    // value reads back as a float.
                    write!(f, "{v:?}")
                }
            }
            SummaryValue::Text(s) => {
                write!(f, "\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
            }
        }
    }
}

/// Writes `key = value` lines in the given order (stable keys, valid TOML).
pub fn write_summary(path: &Path, entries: &[(String, SummaryValue)]) -> Result<(), IoError> {
    let mut out = String::new();
    for (key, value) in entries {
        out.push_str(&format!("{key} = {value}\n"));
    }
    std::fs::write(path, out).map_err(io_err(path))
}

/// Writes a generic CSV: one header line, then pre-formatted rows.
pub fn write_csv<I>(path: &Path, header: &str, rows: I) -> Result<(), IoError>
where
    I: IntoIterator,
    I::Item: AsRef<str>,
{
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    let write = |w: &mut std::io::BufWriter<std::fs::File>, line: &str| {
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(io_err(path))
    };
    write(&mut w, header)?;
    for row in rows {
        write(&mut w, row.as_ref())?;
    }
    w.flush().map_err(io_err(path))
}
