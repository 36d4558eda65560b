//! File formats: trajectories (CSV or binary), sample series, spectra and
//! sampled filters.

use std::fs;
use std::path::Path;

use clap::ValueEnum;
use num_complex::Complex64;
use optosqueeze::dsp::Spectrum;
use optosqueeze::estimate::EllipseReport;
use optosqueeze::wiener::{FilterResponse, FilterSource};
use optosqueeze::Trajectory;
use serde::{Deserialize, Serialize};

use crate::error::{config, CliError, Result};

pub const MAGIC: &[u8; 8] = b"OSQZTRAJ";
pub const BIN_VERSION: u16 = 1;
const BIN_CHANNELS: u16 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Bin,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Bin => "bin",
        }
    }
}

/// Writes through a temporary sibling so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    fs::write(tmp, bytes).map_err(|e| CliError::io(tmp, e))?;
    fs::rename(tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("output serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn csv_bytes<F>(header: &[&str], fill: F) -> Vec<u8>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    fill(&mut w).expect("in-memory write");
    w.into_inner().expect("in-memory flush")
}

fn f(v: f64) -> String {
    // shortest representation that parses back to the same value
    format!("{v:?}")
}

/// Numeric rows of a CSV file with the expected header.
fn read_csv(path: &Path, header: &[&str]) -> Result<Vec<Vec<f64>>> {
    let text = read_text(path)?;
    let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let found: Vec<String> = r
        .headers()
        .map_err(|e| CliError::io(path, e))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if found != header {
        return Err(config(format!(
            "{}: expected header `{}`, found `{}`",
            path.display(),
            header.join(","),
            found.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        let row = rec
            .iter()
            .map(|s| {
                let s = s.trim();
                if s.is_empty() {
                    Ok(f64::NAN)
                } else {
                    s.parse::<f64>().map_err(|e| {
                        config(format!("{}: row {}: `{s}`: {e}", path.display(), i + 2))
                    })
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != header.len() {
            return Err(config(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                i + 2,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

fn column(rows: &[Vec<f64>], k: usize) -> Vec<f64> {
    rows.iter().map(|r| r[k]).collect()
}

/// Sample rate implied by a uniformly spaced time column.
fn sample_rate_from_times(path: &Path, t: &[f64]) -> Result<f64> {
    if t.len() < 2 {
        return Err(config(format!(
            "{}: need at least two samples",
            path.display()
        )));
    }
    let span = t[t.len() - 1] - t[0];
    if !(span > 0.0) {
        return Err(config(format!(
            "{}: time column is not increasing",
            path.display()
        )));
    }
    let fs = (t.len() - 1) as f64 / span;
    let dt = 1.0 / fs;
    let uneven = t.windows(2).any(|w| ((w[1] - w[0]) - dt).abs() > 1e-6 * dt);
    if uneven {
        return Err(config(format!(
            "{}: samples are not uniformly spaced",
            path.display()
        )));
    }
    // times are written as i/fs, so snap to the nearest micro-hertz
    Ok((fs * 1e6).round() / 1e6)
}

/// Readout record with its simulator truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryData {
    pub sample_rate: f64,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub x: Vec<f64>,
}

impl From<&Trajectory> for TrajectoryData {
    fn from(t: &Trajectory) -> Self {
        Self {
            sample_rate: t.sample_rate,
            q: t.q.clone(),
            p: t.p.clone(),
            x: t.x.clone(),
        }
    }
}

pub fn trajectory_bytes(t: &TrajectoryData, format: Format) -> Vec<u8> {
    match format {
        Format::Csv => csv_bytes(&["t", "q", "p", "X"], |w| {
            for i in 0..t.x.len() {
                let time = i as f64 / t.sample_rate;
                w.write_record([f(time), f(t.q[i]), f(t.p[i]), f(t.x[i])])?;
            }
            Ok(())
        }),
        Format::Bin => {
            let n = t.x.len();
            let mut out = Vec::with_capacity(32 + 24 * n);
            out.extend_from_slice(MAGIC);
            out.extend_from_slice(&BIN_VERSION.to_le_bytes());
            out.extend_from_slice(&BIN_CHANNELS.to_le_bytes());
            out.extend_from_slice(&0u32.to_le_bytes());
            out.extend_from_slice(&t.sample_rate.to_le_bytes());
            out.extend_from_slice(&(n as u64).to_le_bytes());
            for i in 0..n {
                for v in [t.q[i], t.p[i], t.x[i]] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            out
        }
    }
}

fn parse_binary(path: &Path, bytes: &[u8]) -> Result<TrajectoryData> {
    let bad = |m: &str| config(format!("{}: {m}", path.display()));
    if bytes.len() < 32 {
        return Err(bad("truncated binary header"));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let f64_at = |i: usize| f64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes"));
    let version = u16_at(8);
    if version != BIN_VERSION {
        return Err(bad(&format!("unsupported binary version {version}")));
    }
    if u16_at(10) != BIN_CHANNELS {
        return Err(bad(&format!(
            "expected {BIN_CHANNELS} channels, found {}",
            u16_at(10)
        )));
    }
    let sample_rate = f64_at(16);
    let n = u64::from_le_bytes(bytes[24..32].try_into().expect("8 bytes")) as usize;
    if bytes.len() != 32 + 24 * n {
        return Err(bad("payload length does not match the sample count"));
    }
    let (mut q, mut p, mut x) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for i in 0..n {
        let base = 32 + 24 * i;
        q.push(f64_at(base));
        p.push(f64_at(base + 8));
        x.push(f64_at(base + 16));
    }
    Ok(TrajectoryData {
        sample_rate,
        q,
        p,
        x,
    })
}

#[cfg(test)]
pub fn write_trajectory(path: &Path, t: &TrajectoryData, format: Format) -> Result<()> {
    write_atomic(path, &trajectory_bytes(t, format))
}

pub fn read_trajectory(path: &Path) -> Result<TrajectoryData> {
    let bytes = read_bytes(path)?;
    if bytes.starts_with(MAGIC) {
        return parse_binary(path, &bytes);
    }
    let rows = read_csv(path, &["t", "q", "p", "X"])?;
    let t = column(&rows, 0);
    Ok(TrajectoryData {
        sample_rate: sample_rate_from_times(path, &t)?,
        q: column(&rows, 1),
        p: column(&rows, 2),
        x: column(&rows, 3),
    })
}

/// Which channel of a trajectory a kernel reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Channel {
    #[default]
    #[value(name = "X")]
    X,
    Q,
    P,
}

/// A uniformly sampled series from a trajectory or a `t,value` file.
pub fn read_series(path: &Path, channel: Channel) -> Result<(f64, Vec<f64>)> {
    let bytes = read_bytes(path)?;
    let header = bytes.split(|&b| b == b'\n').next().unwrap_or_default();
    if bytes.starts_with(MAGIC) || header.starts_with(b"t,q,p,X") {
        let t = read_trajectory(path)?;
        let v = match channel {
            Channel::X => t.x,
            Channel::Q => t.q,
            Channel::P => t.p,
        };
        return Ok((t.sample_rate, v));
    }
    let rows = read_csv(path, &["t", "value"])?;
    let t = column(&rows, 0);
    Ok((sample_rate_from_times(path, &t)?, column(&rows, 1)))
}

pub fn series_bytes(sample_rate: f64, values: &[f64]) -> Vec<u8> {
    csv_bytes(&["t", "value"], |w| {
        for (i, v) in values.iter().enumerate() {
            w.write_record([f(i as f64 / sample_rate), f(*v)])?;
        }
        Ok(())
    })
}

pub fn spectrum_bytes(s: &Spectrum) -> Vec<u8> {
    csv_bytes(&["f_hz", "value_re", "value_im"], |w| {
        for (fr, v) in s.frequencies.iter().zip(&s.values) {
            w.write_record([f(*fr), f(v.re), f(v.im)])?;
        }
        Ok(())
    })
}

pub fn filter_bytes(r: &FilterResponse) -> Vec<u8> {
    csv_bytes(&["f_hz", "Hq_re", "Hq_im", "Hp_re", "Hp_im"], |w| {
        for i in 0..r.frequencies_hz.len() {
            w.write_record([
                f(r.frequencies_hz[i]),
                f(r.h_q[i].re),
                f(r.h_q[i].im),
                f(r.h_p[i].re),
                f(r.h_p[i].im),
            ])?;
        }
        Ok(())
    })
}

/// Reads a sampled filter; the file does not record its source, so the
/// caller supplies it.
pub fn read_filter(path: &Path, source: FilterSource) -> Result<FilterResponse> {
    let rows = read_csv(path, &["f_hz", "Hq_re", "Hq_im", "Hp_re", "Hp_im"])?;
    if rows.len() < 2 {
        return Err(config(format!(
            "{}: filter needs at least two rows",
            path.display()
        )));
    }
    if rows.windows(2).any(|w| !(w[1][0] > w[0][0])) {
        return Err(config(format!(
            "{}: frequencies must increase",
            path.display()
        )));
    }
    Ok(FilterResponse {
        frequencies_hz: column(&rows, 0),
        h_q: rows.iter().map(|r| Complex64::new(r[1], r[2])).collect(),
        h_p: rows.iter().map(|r| Complex64::new(r[3], r[4])).collect(),
        source,
    })
}

/// Linear interpolation of a sampled filter onto a new grid.
pub fn resample_filter(r: &FilterResponse, grid: &[f64]) -> Result<FilterResponse> {
    let f = &r.frequencies_hz;
    let (lo, hi) = (f[0], f[f.len() - 1]);
    if let (Some(&g0), Some(&g1)) = (grid.first(), grid.last()) {
        let slack = 1e-9 * hi.abs().max(1.0);
        if g0 < lo - slack || g1 > hi + slack {
            return Err(config(format!(
                "filter covers [{lo}, {hi}] Hz but [{g0}, {g1}] Hz is needed"
            )));
        }
    }
    let mut h_q = Vec::with_capacity(grid.len());
    let mut h_p = Vec::with_capacity(grid.len());
    let mut j = 0;
    for &g in grid {
        while j + 2 < f.len() && f[j + 1] < g {
            j += 1;
        }
        let w = ((g - f[j]) / (f[j + 1] - f[j])).clamp(0.0, 1.0);
        h_q.push(r.h_q[j] * (1.0 - w) + r.h_q[j + 1] * w);
        h_p.push(r.h_p[j] * (1.0 - w) + r.h_p[j + 1] * w);
    }
    Ok(FilterResponse {
        frequencies_hz: grid.to_vec(),
        h_q,
        h_p,
        source: r.source,
    })
}

pub fn ellipse_bytes(e: &EllipseReport) -> Vec<u8> {
    csv_bytes(&["q", "p"], |w| {
        for pt in &e.boundary {
            w.write_record([f(pt[0]), f(pt[1])])?;
        }
        Ok(())
    })
}

/// Arbitrary numeric table with a given header.
pub fn table_bytes(header: &[&str], rows: &[Vec<f64>]) -> Vec<u8> {
    csv_bytes(header, |w| {
        for r in rows {
            w.write_record(
                r.iter()
                    .map(|v| if v.is_nan() { String::new() } else { f(*v) }),
            )?;
        }
        Ok(())
    })
}

pub fn read_table(path: &Path, header: &[&str]) -> Result<Vec<Vec<f64>>> {
    read_csv(path, header)
}
