//! Stochastic 1D transforms and the policy that composes them.
//!
//! Every transform takes a magnitude `m` in 0..=10 that linearly scales its
//! effect; `m = 0` turns each one into the identity. The magnitude-to-range
//! mapping lives in [`ranges`] so the whole table can be retuned in one
//! place. All randomness flows through an explicit ChaCha8 generator: the
//! stream feature gives callers cheap per-chunk substreams, so augmentation
//! is reproducible and order-independent across chunks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signalio::EcgTrace;

/// Magnitude-to-parameter table. Every range below is multiplied by `m / 10`.
pub mod ranges {
    /// Vertical offset bound for `rand_shift` (at m = 10).
    pub const SHIFT_DELTA_MAX: f64 = 0.2;
    /// Shifted-region length as a fraction of the signal.
    pub const SHIFT_REGION_FRAC: (f64, f64) = (0.05, 0.30);
    /// Half-width of the scaling factor interval around 1 (at m = 10).
    pub const SCALE_SPAN: f64 = 0.5;
    /// Rolled-region length as a fraction of the signal.
    pub const ROLL_REGION_FRAC: (f64, f64) = (0.10, 0.50);
    /// Dropped-region length cap as a fraction of the signal (at m = 10).
    pub const DROP_MAX_FRAC: f64 = 0.20;
    /// Additive waveform amplitude bound (at m = 10).
    pub const ADD_AMP_MAX: f64 = 0.3;
    /// Additive waveform frequency interval in Hz.
    pub const ADD_FREQ_HZ: (f64, f64) = (0.1, 5.0);
    /// Partial-application region length as a fraction of the signal.
    pub const PARTIAL_REGION_FRAC: (f64, f64) = (0.10, 0.50);
    /// Gaussian noise standard deviation (at m = 10).
    pub const NOISE_SIGMA_MAX: f64 = 0.05;
}

/// Transform magnitude in 0..=10.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Magnitude(u8);

impl Magnitude {
    pub fn new(m: u8) -> Result<Magnitude> {
        if m > 10 {
            return Err(Error::Domain(format!("magnitude must be in 0..=10, got {m}")));
        }
        Ok(Magnitude(m))
    }

    pub fn value(self) -> u8 {
        self.0
    }

    /// Linear scaling factor `m / 10`.
    pub fn fraction(self) -> f64 {
        self.0 as f64 / 10.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }
}

impl TryFrom<u8> for Magnitude {
    type Error = Error;

    fn try_from(m: u8) -> Result<Magnitude> {
        Magnitude::new(m)
    }
}

impl From<Magnitude> for u8 {
    fn from(m: Magnitude) -> u8 {
        m.0
    }
}

/// The seven stochastic transforms eligible for the policy pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformId {
    Shift,
    Scale,
    Roll,
    Drop,
    AddSine,
    AddSquarePulse,
    AddGaussianNoise,
}

impl TransformId {
    pub const ALL: [TransformId; 7] = [
        TransformId::Shift,
        TransformId::Scale,
        TransformId::Roll,
        TransformId::Drop,
        TransformId::AddSine,
        TransformId::AddSquarePulse,
        TransformId::AddGaussianNoise,
    ];
}

/// A contiguous sample range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub start: usize,
    pub len: usize,
}

fn draw_region(n: usize, frac: (f64, f64), rng: &mut ChaCha8Rng) -> Region {
    let lo = ((frac.0 * n as f64).ceil() as usize).max(1).min(n);
    let hi = ((frac.1 * n as f64).floor() as usize).max(lo).min(n);
    let len = rng.random_range(lo..=hi);
    let start = rng.random_range(0..=(n - len));
    Region { start, len }
}

// ---------------------------------------------------------------------------
// Deterministic cores + parameter draws
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftParams {
    pub region: Region,
    pub delta: f64,
}

pub fn draw_shift(n: usize, m: Magnitude, rng: &mut ChaCha8Rng) -> ShiftParams {
    let region = draw_region(n, ranges::SHIFT_REGION_FRAC, rng);
    let bound = ranges::SHIFT_DELTA_MAX * m.fraction();
    let delta = if bound > 0.0 { rng.random_range(-bound..=bound) } else { 0.0 };
    ShiftParams { region, delta }
}

/// Offset one region vertically by `delta`.
pub fn apply_shift(trace: &EcgTrace, params: &ShiftParams) -> EcgTrace {
    let mut out = trace.samples.clone();
    let end = (params.region.start + params.region.len).min(out.len());
    for v in &mut out[params.region.start..end] {
        *v += params.delta;
    }
    trace.with_samples(out)
}

pub fn rand_shift(trace: &EcgTrace, m: Magnitude, rng: &mut ChaCha8Rng) -> EcgTrace {
    if m.is_zero() || trace.is_empty() {
        return trace.clone();
    }
    let params = draw_shift(trace.len(), m, rng);
    apply_shift(trace, &params)
}

pub fn draw_scale(m: Magnitude, rng: &mut ChaCha8Rng) -> f64 {
    let span = ranges::SCALE_SPAN * m.fraction();
    if span > 0.0 {
        rng.random_range((1.0 - span)..=(1.0 + span))
    } else {
        1.0
    }
}

/// Multiply the whole signal by `factor`.
pub fn apply_scale(trace: &EcgTrace, factor: f64) -> EcgTrace {
    trace.with_samples(trace.samples.iter().map(|&v| v * factor).collect())
}

pub fn rand_scale(trace: &EcgTrace, m: Magnitude, rng: &mut ChaCha8Rng) -> EcgTrace {
    if m.is_zero() || trace.is_empty() {
        return trace.clone();
    }
    let factor = draw_scale(m, rng);
    apply_scale(trace, factor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RollParams {
    pub region: Region,
    pub offset: usize,
}

pub fn draw_roll(n: usize, m: Magnitude, rng: &mut ChaCha8Rng) -> RollParams {
    let region = draw_region(n, ranges::ROLL_REGION_FRAC, rng);
    let max_offset = (m.fraction() * region.len as f64).floor() as usize;
    let offset = if max_offset > 0 { rng.random_range(0..=max_offset) } else { 0 };
    RollParams { region, offset }
}

/// Rotate one region circularly (left) by `offset` samples.
pub fn apply_roll(trace: &EcgTrace, params: &RollParams) -> EcgTrace {
    let mut out = trace.samples.clone();
    let end = (params.region.start + params.region.len).min(out.len());
    if params.region.len > 0 {
        out[params.region.start..end].rotate_left(params.offset % params.region.len);
    }
    trace.with_samples(out)
}

pub fn rand_roll(trace: &EcgTrace, m: Magnitude, rng: &mut ChaCha8Rng) -> EcgTrace {
    if m.is_zero() || trace.is_empty() {
        return trace.clone();
    }
    let params = draw_roll(trace.len(), m, rng);
    apply_roll(trace, &params)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropParams {
    pub region: Region,
    pub fill: f64,
}

pub fn draw_drop(n: usize, m: Magnitude, rng: &mut ChaCha8Rng) -> DropParams {
    let max_len = (ranges::DROP_MAX_FRAC * m.fraction() * n as f64).floor() as usize;
    if max_len == 0 {
        return DropParams {
            region: Region { start: 0, len: 0 },
            fill: 0.0,
        };
    }
    let len = rng.random_range(1..=max_len);
    let start = rng.random_range(0..=(n - len));
    DropParams {
        region: Region { start, len },
        fill: 0.0,
    }
}

/// Replace one region with the fill value.
pub fn apply_drop(trace: &EcgTrace, params: &DropParams) -> EcgTrace {
    let mut out = trace.samples.clone();
    let end = (params.region.start + params.region.len).min(out.len());
    for v in &mut out[params.region.start..end] {
        *v = params.fill;
    }
    trace.with_samples(out)
}

pub fn rand_drop(trace: &EcgTrace, m: Magnitude, rng: &mut ChaCha8Rng) -> EcgTrace {
    if m.is_zero() || trace.is_empty() {
        return trace.clone();
    }
    let params = draw_drop(trace.len(), m, rng);
    apply_drop(trace, &params)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaveParams {
    pub amplitude: f64,
    pub freq_hz: f64,
    pub phase: f64,
    pub region: Region,
}

pub fn draw_wave(
    n: usize,
    m: Magnitude,
    partial: bool,
    with_phase: bool,
    rng: &mut ChaCha8Rng,
) -> WaveParams {
    let amp_max = ranges::ADD_AMP_MAX * m.fraction();
    let amplitude = if amp_max > 0.0 { rng.random_range(0.0..=amp_max) } else { 0.0 };
    let freq_hz = rng.random_range(ranges::ADD_FREQ_HZ.0..=ranges::ADD_FREQ_HZ.1);
    let phase = if with_phase {
        rng.random_range(0.0..std::f64::consts::TAU)
    } else {
        0.0
    };
    let region = if partial {
        draw_region(n, ranges::PARTIAL_REGION_FRAC, rng)
    } else {
        Region { start: 0, len: n }
    };
    WaveParams {
        amplitude,
        freq_hz,
        phase,
        region,
    }
}

/// Add `A * sin(2*pi*f*t + phase)` over the region; `t` restarts at the
/// region start.
pub fn apply_add_sine(trace: &EcgTrace, params: &WaveParams) -> EcgTrace {
    let fs = trace.sample_rate_hz;
    let mut out = trace.samples.clone();
    let end = (params.region.start + params.region.len).min(out.len());
    for (k, v) in out[params.region.start..end].iter_mut().enumerate() {
        let t = k as f64 / fs;
        *v += params.amplitude * (std::f64::consts::TAU * params.freq_hz * t + params.phase).sin();
    }
    trace.with_samples(out)
}

pub fn rand_add_sine(trace: &EcgTrace, m: Magnitude, rng: &mut ChaCha8Rng, partial: bool) -> EcgTrace {
    if m.is_zero() || trace.is_empty() {
        return trace.clone();
    }
    let params = draw_wave(trace.len(), m, partial, true, rng);
    apply_add_sine(trace, &params)
}

/// Add `A * square(2*pi*f*t)` over the region, where the square wave is +1
/// while `sin(2*pi*f*t) >= 0` and -1 otherwise.
pub fn apply_add_square_pulse(trace: &EcgTrace, params: &WaveParams) -> EcgTrace {
    let fs = trace.sample_rate_hz;
    let mut out = trace.samples.clone();
    let end = (params.region.start + params.region.len).min(out.len());
    for (k, v) in out[params.region.start..end].iter_mut().enumerate() {
        let t = k as f64 / fs;
        let s = (std::f64::consts::TAU * params.freq_hz * t).sin();
        *v += if s >= 0.0 { params.amplitude } else { -params.amplitude };
    }
    trace.with_samples(out)
}

pub fn rand_add_square_pulse(
    trace: &EcgTrace,
    m: Magnitude,
    rng: &mut ChaCha8Rng,
    partial: bool,
) -> EcgTrace {
    if m.is_zero() || trace.is_empty() {
        return trace.clone();
    }
    let params = draw_wave(trace.len(), m, partial, false, rng);
    apply_add_square_pulse(trace, &params)
}

/// Add i.i.d. zero-mean Gaussian noise with sigma scaled by the magnitude.
pub fn rand_add_gaussian_noise(trace: &EcgTrace, m: Magnitude, rng: &mut ChaCha8Rng) -> EcgTrace {
    if m.is_zero() || trace.is_empty() {
        return trace.clone();
    }
    let sigma = ranges::NOISE_SIGMA_MAX * m.fraction();
    let normal = Normal::new(0.0, sigma).expect("sigma > 0");
    let out = trace
        .samples
        .iter()
        .map(|&v| v + normal.sample(rng))
        .collect();
    trace.with_samples(out)
}

// ---------------------------------------------------------------------------
// Policy
// ---------------------------------------------------------------------------

fn default_pool() -> Vec<TransformId> {
    TransformId::ALL.to_vec()
}

/// The stochastic composition policy: apply up to `n` transforms from the
/// pool, each at magnitude `m`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub n: usize,
    pub m: Magnitude,
    pub seed: u64,
    #[serde(default = "default_pool")]
    pub pool: Vec<TransformId>,
    /// Apply exactly `n` transforms instead of a uniform count in 1..=n.
    #[serde(default)]
    pub fixed_count: bool,
}

impl AugmentPolicy {
    pub fn new(n: usize, m: u8, seed: u64) -> Result<AugmentPolicy> {
        Ok(AugmentPolicy {
            n,
            m: Magnitude::new(m)?,
            seed,
            pool: default_pool(),
            fixed_count: false,
        })
    }

    /// Independent per-chunk generator: same seed, distinct stream.
    pub fn rng_for_chunk(&self, chunk_index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(chunk_index);
        rng
    }
}

fn apply_transform(trace: &EcgTrace, id: TransformId, m: Magnitude, rng: &mut ChaCha8Rng) -> EcgTrace {
    match id {
        TransformId::Shift => rand_shift(trace, m, rng),
        TransformId::Scale => rand_scale(trace, m, rng),
        TransformId::Roll => rand_roll(trace, m, rng),
        TransformId::Drop => rand_drop(trace, m, rng),
        TransformId::AddSine => rand_add_sine(trace, m, rng, false),
        TransformId::AddSquarePulse => rand_add_square_pulse(trace, m, rng, false),
        TransformId::AddGaussianNoise => rand_add_gaussian_noise(trace, m, rng),
    }
}

/// Draw the transforms one application of the policy would run, in order.
/// A count of zero (n = 0) yields an empty selection.
pub fn draw_selection(policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> Result<Vec<TransformId>> {
    if policy.n > policy.pool.len() {
        return Err(Error::Domain(format!(
            "policy n = {} exceeds pool size {}",
            policy.n,
            policy.pool.len()
        )));
    }
    if policy.n == 0 {
        return Ok(Vec::new());
    }
    let k = if policy.fixed_count {
        policy.n
    } else {
        rng.random_range(1..=policy.n)
    };
    // partial Fisher-Yates: uniform ordered sample without replacement
    let mut indices: Vec<usize> = (0..policy.pool.len()).collect();
    for i in 0..k {
        let j = rng.random_range(i..indices.len());
        indices.swap(i, j);
    }
    Ok(indices[..k].iter().map(|&i| policy.pool[i]).collect())
}

/// Apply the policy with a caller-managed generator (e.g. a per-chunk
/// substream).
pub fn rand_augment_with_rng(
    trace: &EcgTrace,
    policy: &AugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<EcgTrace> {
    let selection = draw_selection(policy, rng)?;
    if policy.m.is_zero() {
        return Ok(trace.clone());
    }
    let mut out = trace.clone();
    for id in selection {
        out = apply_transform(&out, id, policy.m, rng);
    }
    Ok(out)
}

/// Apply the policy, seeding a fresh generator from `policy.seed`.
pub fn rand_augment(trace: &EcgTrace, policy: &AugmentPolicy) -> Result<EcgTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    rand_augment_with_rng(trace, policy, &mut rng)
}
