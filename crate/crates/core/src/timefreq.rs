//! Ricker-wavelet CWT, STFT, their combination, and the fixed 300x300 grid
//! used as classifier input.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signalio::EcgTrace;

/// Number of wavelet support half-widths kept when sampling the kernel.
const WAVELET_TRUNCATE_SIGMAS: f64 = 5.0;

/// Default scale grid: 300 log-spaced widths from 1 to 128 samples.
pub const DEFAULT_SCALE_MIN: f64 = 1.0;
pub const DEFAULT_SCALE_MAX: f64 = 128.0;
pub const GRID_SIZE: usize = 300;

/// Default STFT parameters for 250 Hz chunks.
pub const DEFAULT_STFT_WINDOW: usize = 256;
pub const DEFAULT_STFT_HOP: usize = 6;

/// Ricker (Mexican hat) wavelet: the second derivative of a Gaussian,
/// normalized to unit energy.
pub fn ricker(t: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("wavelet width must be positive, got {sigma}")));
    }
    let u = t / sigma;
    let norm = 2.0 / ((3.0 * sigma).sqrt() * std::f64::consts::PI.powf(0.25));
    Ok(norm * (1.0 - u * u) * (-0.5 * u * u).exp())
}

/// Wavelet family plus the scale grid, in samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WaveletSpec {
    pub scales: Vec<f64>,
}

impl WaveletSpec {
    pub fn new(scales: Vec<f64>) -> Result<WaveletSpec> {
        if scales.is_empty() {
            return Err(Error::Domain("scale list is empty".into()));
        }
        for pair in scales.windows(2) {
            if !(pair[1] > pair[0]) {
                return Err(Error::Domain(format!(
                    "scales must be strictly increasing ({} then {})",
                    pair[0], pair[1]
                )));
            }
        }
        if !(scales[0] > 0.0) {
            return Err(Error::Domain(format!("scales must be positive, got {}", scales[0])));
        }
        Ok(WaveletSpec { scales })
    }

    /// The default 300-scale log-spaced grid.
    pub fn default_grid() -> WaveletSpec {
        WaveletSpec {
            scales: log_spaced_scales(DEFAULT_SCALE_MIN, DEFAULT_SCALE_MAX, GRID_SIZE),
        }
    }
}

/// `count` log-spaced values from `min` to `max` inclusive.
pub fn log_spaced_scales(min: f64, max: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![min];
    }
    let (lmin, lmax) = (min.ln(), max.ln());
    (0..count)
        .map(|i| (lmin + (lmax - lmin) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// A 2D time-frequency image with axis metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalogramGrid {
    /// Row-major values, `rows x cols`.
    pub values: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    /// Scale (CWT, in samples) or frequency (STFT, in Hz) per row.
    pub scale_axis: Vec<f64>,
    /// Time in seconds per column.
    pub time_axis_s: Vec<f64>,
    pub source_chunk_id: String,
    /// (min, max) removed by the last min-max normalization, if any.
    pub norm_bounds: Option<(f64, f64)>,
}

impl ScalogramGrid {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        let mut best_v = f64::NEG_INFINITY;
        for r in 0..self.rows {
            for c in 0..self.cols {
                let v = self.get(r, c);
                if v > best_v {
                    best_v = v;
                    best = (r, c);
                }
            }
        }
        best
    }
}

fn chunk_id_of(trace: &EcgTrace) -> String {
    match (trace.meta.get("record_id"), trace.meta.get("chunk_index")) {
        (Some(rec), Some(idx)) => format!("{rec}_{idx}"),
        (Some(rec), None) => rec.clone(),
        _ => "trace".into(),
    }
}

/// Continuous wavelet transform sampled on the trace's own time grid.
///
/// Per scale, the signal is convolved (zero-padded, same length) with the
/// time-reversed unit-energy wavelet truncated at +/- 5 sigma.
pub fn cwt(trace: &EcgTrace, spec: &WaveletSpec) -> Result<ScalogramGrid> {
    if !trace.sanitized {
        return Err(Error::Domain("trace contains unsanitized samples".into()));
    }
    let n = trace.samples.len();
    if n == 0 {
        return Err(Error::EmptyInput("cwt of an empty trace".into()));
    }
    let max_scale = *spec.scales.last().unwrap();
    let max_support = 2 * (WAVELET_TRUNCATE_SIGMAS * max_scale).ceil() as usize + 1;
    if max_support > n {
        return Err(Error::Domain(format!(
            "wavelet support {max_support} exceeds signal length {n}"
        )));
    }

    let x = &trace.samples;
    let mut values = Vec::with_capacity(spec.scales.len() * n);
    for &sigma in &spec.scales {
        let half = (WAVELET_TRUNCATE_SIGMAS * sigma).ceil() as isize;
        let kernel: Vec<f64> = (-half..=half)
            .map(|k| ricker(k as f64, sigma).expect("sigma validated"))
            .collect();
        for d in 0..n as isize {
            let lo = (d - half).max(0);
            let hi = (d + half).min(n as isize - 1);
            let mut acc = 0.0;
            for t in lo..=hi {
                acc += x[t as usize] * kernel[(t - d + half) as usize];
            }
            values.push(acc);
        }
    }
    let fs = trace.sample_rate_hz;
    Ok(ScalogramGrid {
        values,
        rows: spec.scales.len(),
        cols: n,
        scale_axis: spec.scales.clone(),
        time_axis_s: (0..n).map(|i| i as f64 / fs).collect(),
        source_chunk_id: chunk_id_of(trace),
        norm_bounds: None,
    })
}

/// Magnitude spectrogram with a periodic Hann window.
///
/// Produces `floor((n - window_len) / hop) + 1` frames and
/// `window_len / 2 + 1` frequency rows, ordered by ascending frequency.
pub fn stft(trace: &EcgTrace, window_len: usize, hop: usize) -> Result<ScalogramGrid> {
    let n = trace.samples.len();
    if window_len == 0 || window_len > n {
        return Err(Error::Domain(format!(
            "window of {window_len} samples must fit the signal length {n}"
        )));
    }
    if hop == 0 {
        return Err(Error::Domain("hop must be at least 1".into()));
    }
    let frames = (n - window_len) / hop + 1;
    let bins = window_len / 2 + 1;
    let window: Vec<f64> = (0..window_len)
        .map(|i| 0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / window_len as f64).cos()))
        .collect();

    let fft = FftPlanner::new().plan_fft_forward(window_len);
    let mut values = vec![0.0; bins * frames];
    let mut buf = vec![Complex64::new(0.0, 0.0); window_len];
    for f in 0..frames {
        let start = f * hop;
        for i in 0..window_len {
            buf[i] = Complex64::new(trace.samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (b, v) in buf.iter().take(bins).enumerate() {
            values[b * frames + f] = v.norm();
        }
    }
    let fs = trace.sample_rate_hz;
    Ok(ScalogramGrid {
        values,
        rows: bins,
        cols: frames,
        scale_axis: (0..bins).map(|b| b as f64 * fs / window_len as f64).collect(),
        time_axis_s: (0..frames)
            .map(|f| (f * hop + window_len / 2) as f64 / fs)
            .collect(),
        source_chunk_id: chunk_id_of(trace),
        norm_bounds: None,
    })
}

/// How to combine the CWT and STFT grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineMode {
    Sum,
    Concat,
}

/// Combined wavelet + Fourier image: both grids are resized to the wavelet
/// grid's shape, then summed or stacked vertically.
pub fn cwft(
    trace: &EcgTrace,
    spec: &WaveletSpec,
    window_len: usize,
    hop: usize,
    mode: CombineMode,
) -> Result<ScalogramGrid> {
    let wavelet = cwt(trace, spec)?;
    let fourier = stft(trace, window_len, hop)?;
    if wavelet.rows == 0 || fourier.rows == 0 {
        return Err(Error::Shape("cannot combine empty grids".into()));
    }
    let fourier = resize_grid(&fourier, wavelet.rows, wavelet.cols);
    match mode {
        CombineMode::Sum => {
            let values = wavelet
                .values
                .iter()
                .zip(&fourier.values)
                .map(|(a, b)| a + b)
                .collect();
            Ok(ScalogramGrid {
                values,
                ..wavelet
            })
        }
        CombineMode::Concat => {
            let mut values = wavelet.values.clone();
            values.extend_from_slice(&fourier.values);
            let mut scale_axis = wavelet.scale_axis.clone();
            scale_axis.extend_from_slice(&fourier.scale_axis);
            Ok(ScalogramGrid {
                values,
                rows: wavelet.rows + fourier.rows,
                cols: wavelet.cols,
                scale_axis,
                time_axis_s: wavelet.time_axis_s.clone(),
                source_chunk_id: wavelet.source_chunk_id.clone(),
                norm_bounds: None,
            })
        }
    }
}

/// Partition `n` source cells into `target` bins. Bins are non-overlapping
/// when shrinking and single-cell (replication) when enlarging.
fn bin_edges(n: usize, target: usize, j: usize) -> (usize, usize) {
    let start = j * n / target;
    let end = ((j + 1) * n / target).max(start + 1).min(n.max(start + 1));
    (start, end.min(n).max(start + 1))
}

fn pool_axis(axis: &[f64], target: usize) -> Vec<f64> {
    (0..target)
        .map(|j| {
            let (s, e) = bin_edges(axis.len(), target, j);
            axis[s..e.min(axis.len())].iter().sum::<f64>() / (e.min(axis.len()) - s) as f64
        })
        .collect()
}

/// Mean-pool (or replicate, when enlarging) a grid to the target shape.
pub fn resize_grid(grid: &ScalogramGrid, target_rows: usize, target_cols: usize) -> ScalogramGrid {
    let mut values = vec![0.0; target_rows * target_cols];
    for r in 0..target_rows {
        let (rs, re) = bin_edges(grid.rows, target_rows, r);
        let re = re.min(grid.rows);
        for c in 0..target_cols {
            let (cs, ce) = bin_edges(grid.cols, target_cols, c);
            let ce = ce.min(grid.cols);
            let mut acc = 0.0;
            for rr in rs..re {
                for cc in cs..ce {
                    acc += grid.get(rr, cc);
                }
            }
            values[r * target_cols + c] = acc / ((re - rs) * (ce - cs)) as f64;
        }
    }
    ScalogramGrid {
        values,
        rows: target_rows,
        cols: target_cols,
        scale_axis: pool_axis(&grid.scale_axis, target_rows),
        time_axis_s: pool_axis(&grid.time_axis_s, target_cols),
        source_chunk_id: grid.source_chunk_id.clone(),
        norm_bounds: None,
    }
}

/// Resize to `GRID_SIZE` x `GRID_SIZE` and min-max normalize into [0, 1].
/// A constant grid normalizes to all 0.5.
pub fn to_grid_300(grid: &ScalogramGrid) -> Result<ScalogramGrid> {
    if grid.rows == 0 || grid.cols == 0 {
        return Err(Error::Shape("cannot resize an empty grid".into()));
    }
    let mut out = resize_grid(grid, GRID_SIZE, GRID_SIZE);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &out.values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    if span > 0.0 && span.is_finite() {
        for v in &mut out.values {
            *v = (*v - lo) / span;
        }
    } else {
        for v in &mut out.values {
            *v = 0.5;
        }
    }
    out.norm_bounds = Some((lo, hi));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Grid files: raw little-endian f32 row-major plus a JSON sidecar
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct GridSidecar {
    rows: usize,
    cols: usize,
    scale_axis: Vec<f64>,
    time_axis_s: Vec<f64>,
    source_chunk_id: String,
    norm_bounds: Option<(f64, f64)>,
}

fn grid_sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_grid(grid: &ScalogramGrid, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut file = fs::File::create(path)?;
    for &v in &grid.values {
        file.write_all(&(v as f32).to_le_bytes())?;
    }
    let side = GridSidecar {
        rows: grid.rows,
        cols: grid.cols,
        scale_axis: grid.scale_axis.clone(),
        time_axis_s: grid.time_axis_s.clone(),
        source_chunk_id: grid.source_chunk_id.clone(),
        norm_bounds: grid.norm_bounds,
    };
    fs::write(grid_sidecar_path(path), serde_json::to_string(&side)?)?;
    Ok(())
}

pub fn load_grid(path: &Path) -> Result<ScalogramGrid> {
    let side: GridSidecar =
        serde_json::from_str(&fs::read_to_string(grid_sidecar_path(path))?)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let bytes = fs::read(path)?;
    if bytes.len() != side.rows * side.cols * 4 {
        return Err(Error::Format(format!(
            "{}: expected {} f32 values, found {} bytes",
            path.display(),
            side.rows * side.cols,
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(ScalogramGrid {
        values,
        rows: side.rows,
        cols: side.cols,
        scale_axis: side.scale_axis,
        time_axis_s: side.time_axis_s,
        source_chunk_id: side.source_chunk_id,
        norm_bounds: side.norm_bounds,
    })
}
