//! Deterministic signal conditioning: resampling, scaling, baseline-wander
//! removal, powerline notch filtering and heart-rate estimation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signalio::EcgTrace;

/// Configuration of a conditioning filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FilterSpec {
    /// Second-order IIR notch, applied forward-backward for zero phase.
    Notch { target_hz: f64, quality_q: f64 },
    /// Two-stage running-median baseline estimator subtracted from the signal.
    HighpassMedian { median_windows_ms: (f64, f64) },
}

impl FilterSpec {
    /// 50 Hz notch with Q = 30.
    pub fn default_notch() -> FilterSpec {
        FilterSpec::Notch {
            target_hz: 50.0,
            quality_q: 30.0,
        }
    }

    /// 200 ms then 600 ms running medians.
    pub fn default_baseline() -> FilterSpec {
        FilterSpec::HighpassMedian {
            median_windows_ms: (200.0, 600.0),
        }
    }
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    let mut k = 1.0;
    loop {
        term *= q / (k * k);
        sum += term;
        if term < 1e-17 * sum {
            return sum;
        }
        k += 1.0;
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

const RESAMPLE_HALF_TAPS: usize = 32;
const RESAMPLE_KAISER_BETA: f64 = 8.0;

/// Band-limited resampling with a Kaiser-windowed sinc kernel.
///
/// Output length is `round(n * target_hz / source_hz)`; when downsampling the
/// kernel cutoff is lowered to the new Nyquist frequency.
pub fn resample(trace: &EcgTrace, target_hz: f64) -> Result<EcgTrace> {
    if target_hz <= 0.0 || !target_hz.is_finite() {
        return Err(Error::Domain(format!("target rate must be positive, got {target_hz}")));
    }
    let n = trace.samples.len();
    let src = trace.sample_rate_hz;
    let out_len = (n as f64 * target_hz / src).round() as usize;
    let ratio = src / target_hz;
    let cutoff = (target_hz / src).min(1.0);
    let half = RESAMPLE_HALF_TAPS as isize;
    let i0_beta = bessel_i0(RESAMPLE_KAISER_BETA);

    let x = &trace.samples;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let pos = i as f64 * ratio;
        let center = pos.floor() as isize;
        let mut acc = 0.0;
        for j in (center - half + 1)..=(center + half) {
            if j < 0 || j >= n as isize {
                continue;
            }
            let u = pos - j as f64;
            let w = u / half as f64;
            if w.abs() > 1.0 {
                continue;
            }
            let window = bessel_i0(RESAMPLE_KAISER_BETA * (1.0 - w * w).sqrt()) / i0_beta;
            acc += x[j as usize] * cutoff * sinc(cutoff * u) * window;
        }
        out.push(acc);
    }
    let mut result = trace.with_samples(out);
    result.sample_rate_hz = target_hz;
    Ok(result)
}

// ---------------------------------------------------------------------------
// Amplitude scaling
// ---------------------------------------------------------------------------

/// Affine map of the sample range onto [0, 1]; a constant signal maps to 0.5.
pub fn normalize01(trace: &EcgTrace) -> EcgTrace {
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &trace.samples {
        min = min.min(v);
        max = max.max(v);
    }
    let span = max - min;
    let out = if !(span > 0.0) || !span.is_finite() {
        vec![0.5; trace.samples.len()]
    } else {
        trace.samples.iter().map(|&v| (v - min) / span).collect()
    };
    trace.with_samples(out)
}

/// Zero mean and unit population standard deviation; a zero-variance signal
/// maps to all zeros.
pub fn standardize(trace: &EcgTrace) -> EcgTrace {
    let n = trace.samples.len();
    if n == 0 {
        return trace.clone();
    }
    let mean = trace.samples.iter().sum::<f64>() / n as f64;
    let var = trace.samples.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let sd = var.sqrt();
    let out = if !(sd > 0.0) || !sd.is_finite() {
        vec![0.0; n]
    } else {
        trace.samples.iter().map(|&v| (v - mean) / sd).collect()
    };
    trace.with_samples(out)
}

/// Append zeros until the trace reaches `target_len` samples.
pub fn zero_pad(trace: &EcgTrace, target_len: usize) -> Result<EcgTrace> {
    if target_len < trace.samples.len() {
        return Err(Error::Domain(format!(
            "target length {target_len} is shorter than the signal ({})",
            trace.samples.len()
        )));
    }
    let mut out = trace.samples.clone();
    out.resize(target_len, 0.0);
    Ok(trace.with_samples(out))
}

/// Replace every NaN sample with zero and mark the trace sanitized.
pub fn fill_empty(trace: &EcgTrace) -> EcgTrace {
    let out = trace
        .samples
        .iter()
        .map(|&v| if v.is_nan() { 0.0 } else { v })
        .collect();
    let mut result = trace.with_samples(out);
    result.sanitized = true;
    result
}

// ---------------------------------------------------------------------------
// Baseline wander removal
// ---------------------------------------------------------------------------

fn median_filter_replicated(x: &[f64], window: usize) -> Vec<f64> {
    let window = window | 1; // force odd
    let h = window / 2;
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let mut buf = Vec::with_capacity(window);
    for i in 0..n {
        buf.clear();
        for k in (i as isize - h as isize)..=(i as isize + h as isize) {
            let idx = k.clamp(0, n as isize - 1) as usize;
            buf.push(x[idx]);
        }
        buf.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out.push(buf[h]);
    }
    out
}

/// Estimate the wander line with two cascaded running medians (default
/// 200 ms then 600 ms, edge-replicated) and subtract it.
pub fn remove_baseline_wander(trace: &EcgTrace, spec: &FilterSpec) -> Result<EcgTrace> {
    let (w1_ms, w2_ms) = match spec {
        FilterSpec::HighpassMedian { median_windows_ms } => *median_windows_ms,
        other => {
            return Err(Error::Domain(format!(
                "remove_baseline_wander needs a highpass-median spec, got {other:?}"
            )))
        }
    };
    let n = trace.samples.len();
    let to_samples = |ms: f64| ((ms * trace.sample_rate_hz / 1000.0).round() as usize).max(1);
    let (w1, w2) = (to_samples(w1_ms) | 1, to_samples(w2_ms) | 1);
    if w1 > n || w2 > n {
        return Err(Error::Domain(format!(
            "median window ({} samples) exceeds signal length {n}",
            w1.max(w2)
        )));
    }
    let baseline = median_filter_replicated(&median_filter_replicated(&trace.samples, w1), w2);
    let out = trace
        .samples
        .iter()
        .zip(&baseline)
        .map(|(&v, &b)| v - b)
        .collect();
    Ok(trace.with_samples(out))
}

// ---------------------------------------------------------------------------
// Notch filtering
// ---------------------------------------------------------------------------

struct Biquad {
    b: [f64; 3],
    a: [f64; 3], // a[0] = 1
}

fn design_notch(target_hz: f64, q: f64, fs: f64) -> Biquad {
    let w0 = 2.0 * std::f64::consts::PI * target_hz / fs;
    let alpha = w0.sin() / (2.0 * q);
    let norm = 1.0 + alpha;
    Biquad {
        b: [1.0 / norm, -2.0 * w0.cos() / norm, 1.0 / norm],
        a: [1.0, -2.0 * w0.cos() / norm, (1.0 - alpha) / norm],
    }
}

impl Biquad {
    /// Direct-form II transposed pass over `x` starting from state `zi`.
    fn filter(&self, x: &[f64], zi: [f64; 2]) -> Vec<f64> {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        let (mut z1, mut z2) = (zi[0], zi[1]);
        let mut y = Vec::with_capacity(x.len());
        for &xi in x {
            let yi = b0 * xi + z1;
            z1 = b1 * xi - a1 * yi + z2;
            z2 = b2 * xi - a2 * yi;
            y.push(yi);
        }
        y
    }

    /// Steady-state DF2T state for a unit constant input.
    fn step_state(&self) -> [f64; 2] {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        let h1 = (b0 + b1 + b2) / (1.0 + a1 + a2);
        [h1 - b0, b2 - a2 * h1]
    }

    /// Pole radius, used to size the settle-in padding.
    fn pole_radius(&self) -> f64 {
        self.a[2].abs().sqrt()
    }
}

/// Burg's method AR coefficients. The prediction is
/// `x[n] = sum_j coef[j] * x[n-1-j]`; reflection coefficients are clamped
/// inside the unit circle so extrapolation cannot diverge.
fn burg_ar(x: &[f64], order: usize) -> Vec<f64> {
    let n = x.len();
    let mut f = x.to_vec();
    let mut b = x.to_vec();
    let mut coef = vec![0.0; order];
    for m in 0..order {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in (m + 1)..n {
            num += f[i] * b[i - 1];
            den += f[i] * f[i] + b[i - 1] * b[i - 1];
        }
        let k = if den > 1e-300 {
            (2.0 * num / den).clamp(-0.999_999_999, 0.999_999_999)
        } else {
            0.0
        };
        let prev = coef.clone();
        coef[m] = k;
        for j in 0..m {
            coef[j] = prev[j] - k * prev[m - 1 - j];
        }
        for i in ((m + 1)..n).rev() {
            let fi = f[i];
            let bi = b[i - 1];
            f[i] = fi - k * bi;
            b[i] = bi - k * fi;
        }
    }
    coef
}

fn ar_predict(history: &[f64], coef: &[f64], count: usize) -> Vec<f64> {
    let p = coef.len();
    let mut ext = history[history.len() - p..].to_vec();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v = 0.0;
        for (j, &c) in coef.iter().enumerate() {
            v += c * ext[ext.len() - 1 - j];
        }
        ext.push(v);
        out.push(v);
    }
    out
}

const AR_PAD_ORDER: usize = 8;

/// Zero-phase (forward-backward) biquad pass.
///
/// Before filtering, the signal is extended on both sides with an
/// autoregressive continuation (Burg, order 8) long enough for the filter
/// transient to decay inside the padding. Plain reflection padding leaves a
/// curvature kink at the boundary that rings a high-Q notch well into the
/// retained samples.
fn filtfilt(biquad: &Biquad, x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let r = biquad.pole_radius().min(0.999_999);
    // decay ln(1e6) within the pad
    let padlen = ((13.8 / (1.0 - r)).ceil() as usize).clamp(16, 8192).min(n - 1);

    let order = AR_PAD_ORDER.min(n.saturating_sub(1)).max(1);
    let spread = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let (pre, post) = if n < 4 || !(spread.1 - spread.0 > 0.0) {
        (vec![x[0]; padlen], vec![x[n - 1]; padlen])
    } else {
        let coef = burg_ar(x, order);
        let post = ar_predict(x, &coef, padlen);
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        let mut pre = ar_predict(&rev, &coef, padlen);
        pre.reverse();
        (pre, post)
    };

    let mut ext = Vec::with_capacity(n + 2 * padlen);
    ext.extend_from_slice(&pre);
    ext.extend_from_slice(x);
    ext.extend_from_slice(&post);

    let zi = biquad.step_state();
    let first = ext[0];
    let fwd = biquad.filter(&ext, [zi[0] * first, zi[1] * first]);
    let mut rev: Vec<f64> = fwd.into_iter().rev().collect();
    let last = rev[0];
    rev = biquad.filter(&rev, [zi[0] * last, zi[1] * last]);
    rev.reverse();
    rev[padlen..padlen + n].to_vec()
}

/// Remove one frequency with a zero-phase second-order IIR notch.
pub fn remove_frequency(trace: &EcgTrace, spec: &FilterSpec) -> Result<EcgTrace> {
    let (target_hz, q) = match spec {
        FilterSpec::Notch { target_hz, quality_q } => (*target_hz, *quality_q),
        other => {
            return Err(Error::Domain(format!(
                "remove_frequency needs a notch spec, got {other:?}"
            )))
        }
    };
    let nyquist = trace.sample_rate_hz / 2.0;
    if !(target_hz > 0.0) || target_hz >= nyquist {
        return Err(Error::Domain(format!(
            "notch target {target_hz} Hz must lie in (0, {nyquist}) Hz"
        )));
    }
    if !(q > 0.0) {
        return Err(Error::Domain(format!("notch quality factor must be positive, got {q}")));
    }
    let biquad = design_notch(target_hz, q, trace.sample_rate_hz);
    Ok(trace.with_samples(filtfilt(&biquad, &trace.samples)))
}

// ---------------------------------------------------------------------------
// Heart rate
// ---------------------------------------------------------------------------

const HR_ENVELOPE_WINDOW_S: f64 = 0.150;
const HR_REFRACTORY_S: f64 = 0.200;

/// Estimate heart rate in beats per minute.
///
/// R peaks are located on a moving-average envelope of the squared first
/// difference with an adaptive threshold (half the envelope's 90th
/// percentile) and a 200 ms refractory period. The rate is
/// `60 / median(RR)`.
pub fn estimate_heart_rate(trace: &EcgTrace) -> Result<f64> {
    let fs = trace.sample_rate_hz;
    if trace.duration_s() < 2.0 {
        return Err(Error::Domain(format!(
            "need at least 2 s of signal, got {:.3} s",
            trace.duration_s()
        )));
    }
    if !trace.sanitized {
        return Err(Error::Domain("trace contains unsanitized samples".into()));
    }

    let diff: Vec<f64> = trace.samples.windows(2).map(|w| w[1] - w[0]).collect();
    let sq: Vec<f64> = diff.iter().map(|&d| d * d).collect();

    let w = ((HR_ENVELOPE_WINDOW_S * fs).round() as usize).max(1);
    let h = w / 2;
    let m = sq.len();
    let mut env = Vec::with_capacity(m);
    for i in 0..m {
        let lo = i.saturating_sub(h);
        let hi = (i + h + 1).min(m);
        env.push(sq[lo..hi].iter().sum::<f64>() / w as f64);
    }

    let mut sorted = env.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((0.9 * m as f64).ceil() as usize).clamp(1, m) - 1;
    let threshold = 0.5 * sorted[rank];
    if !(threshold > 0.0) {
        return Err(Error::NoBeatsDetected);
    }

    let refractory = (HR_REFRACTORY_S * fs).round() as usize;
    let mut peaks: Vec<usize> = Vec::new();
    for i in 0..m {
        let prev = if i > 0 { env[i - 1] } else { f64::NEG_INFINITY };
        let next = if i + 1 < m { env[i + 1] } else { f64::NEG_INFINITY };
        if env[i] >= threshold && env[i] > prev && env[i] >= next {
            match peaks.last().copied() {
                Some(last) if i - last < refractory => {
                    if env[i] > env[last] {
                        *peaks.last_mut().unwrap() = i;
                    }
                }
                _ => peaks.push(i),
            }
        }
    }
    if peaks.len() < 2 {
        return Err(Error::NoBeatsDetected);
    }
    let mut rr: Vec<f64> = peaks.windows(2).map(|p| (p[1] - p[0]) as f64 / fs).collect();
    rr.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if rr.len() % 2 == 1 {
        rr[rr.len() / 2]
    } else {
        0.5 * (rr[rr.len() / 2 - 1] + rr[rr.len() / 2])
    };
    Ok(60.0 / median)
}
