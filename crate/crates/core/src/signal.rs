//! Probe sequences with their BPSK baseband waveforms, plus cross-correlation.

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::splitmix64;

/// Feedback mask for the 31-bit probe generator, recurrence
/// `s[k+31] = s[k] ^ s[k+3]` (characteristic polynomial x^31 + x^3 + 1).
pub const PRBS31_MASK: u64 = 0b1001;
pub const PRBS31_DEGREE: u32 = 31;

/// Correlations whose direct cost (lags x taps) exceeds this go through the FFT path.
const DIRECT_WORK_LIMIT: usize = 32 * 1024;

/// Fibonacci linear-feedback shift register.
///
/// Each step outputs bit 0 of the state and shifts right, inserting the
/// parity of `state & mask` at bit `degree - 1`.
#[derive(Debug, Clone)]
pub struct Lfsr {
    state: u64,
    mask: u64,
    degree: u32,
}

impl Lfsr {
    pub fn new(degree: u32, mask: u64, state: u64) -> Result<Self> {
        if degree == 0 || degree > 63 {
            return Err(Error::invalid(format!(
                "LFSR degree {degree} outside 1..=63"
            )));
        }
        let full = (1u64 << degree) - 1;
        if mask & full == 0 || mask & 1 == 0 {
            return Err(Error::invalid("LFSR mask must include bit 0"));
        }
        if state & full == 0 {
            return Err(Error::invalid("LFSR state must be nonzero"));
        }
        Ok(Lfsr {
            state: state & full,
            mask: mask & full,
            degree,
        })
    }

    pub fn next_bit(&mut self) -> u8 {
        let out = (self.state & 1) as u8;
        let feedback = (self.state & self.mask).count_ones() as u64 & 1;
        self.state = (self.state >> 1) | (feedback << (self.degree - 1));
        out
    }

    pub fn state(&self) -> u64 {
        self.state
    }
}

impl Iterator for Lfsr {
    type Item = u8;

    fn next(&mut self) -> Option<u8> {
        Some(self.next_bit())
    }
}

/// Binary probe sequence; every element is 0 or 1 and the sequence is non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct BitSequence(Vec<u8>);

impl BitSequence {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::invalid("bit sequence must not be empty"));
        }
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::invalid(format!("bit value {b} is not 0 or 1")));
        }
        Ok(BitSequence(bits))
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<u8>> for BitSequence {
    type Error = Error;

    fn try_from(bits: Vec<u8>) -> Result<Self> {
        BitSequence::new(bits)
    }
}

impl From<BitSequence> for Vec<u8> {
    fn from(seq: BitSequence) -> Vec<u8> {
        seq.0
    }
}

/// Complex baseband samples at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct IqBuffer {
    samples: Vec<Complex64>,
    sample_rate: f64,
}

impl IqBuffer {
    pub fn new(samples: Vec<Complex64>, sample_rate: f64) -> Result<Self> {
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(Error::invalid(format!(
                "sample rate must be positive, got {sample_rate}"
            )));
        }
        Ok(IqBuffer {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Complex64> {
        self.samples
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }

    /// Sum of |x[n]|^2.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_sqr()).sum()
    }

    pub fn mean_power(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            self.energy() / self.samples.len() as f64
        }
    }

    /// Copy of `samples[start..end]` at the same rate.
    pub fn slice(&self, start: usize, end: usize) -> IqBuffer {
        IqBuffer {
            samples: self.samples[start..end].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    pub(crate) fn require_non_empty(&self, what: &str) -> Result<()> {
        if self.samples.is_empty() {
            Err(Error::invalid(format!("{what} buffer is empty")))
        } else {
            Ok(())
        }
    }
}

/// How [`crate::sounder::average_window`] combines segment correlations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integration {
    /// Magnitude of the mean complex correlation.
    #[default]
    Coherent,
    /// Mean of the per-segment magnitudes.
    NonCoherent,
}

/// Parameters shared by the probe transmitter and the sounder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SounderParams {
    /// Carrier frequency, Hz.
    pub fc: f64,
    /// Sample rate, Hz.
    pub fs: f64,
    /// Bits per probe sequence.
    pub n_bits: usize,
    pub samples_per_chip: usize,
    pub tx_power_dbm: f64,
    /// Observation window, seconds.
    pub window_s: f64,
    pub seed: u64,
    pub integration: Integration,
}

impl Default for SounderParams {
    fn default() -> Self {
        SounderParams {
            fc: 868e6,
            fs: 10e6,
            n_bits: 456,
            samples_per_chip: 1,
            tx_power_dbm: 9.0,
            window_s: 2e-3,
            seed: 1,
            integration: Integration::Coherent,
        }
    }
}

impl SounderParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.fc.is_finite() && self.fc > 0.0) {
            return Err(Error::invalid(format!(
                "fc must be positive, got {}",
                self.fc
            )));
        }
        if !(self.fs.is_finite() && self.fs > 0.0) {
            return Err(Error::invalid(format!(
                "fs must be positive, got {}",
                self.fs
            )));
        }
        if self.n_bits == 0 {
            return Err(Error::invalid("n_bits must be at least 1"));
        }
        if self.samples_per_chip == 0 {
            return Err(Error::invalid("samples_per_chip must be at least 1"));
        }
        if !self.tx_power_dbm.is_finite() {
            return Err(Error::invalid("tx_power_dbm must be finite"));
        }
        let seq_len = self
            .n_bits
            .checked_mul(self.samples_per_chip)
            .ok_or_else(|| Error::invalid("sequence length overflows"))?;
        if !(self.window_s.is_finite() && self.window_s > 0.0) {
            return Err(Error::invalid("window_s must be positive"));
        }
        // Bounded so a config cannot request an absurd allocation.
        if self.window_s * self.fs > 1e9 {
            return Err(Error::invalid("window_s * fs exceeds 1e9 samples"));
        }
        if self.window_samples() < seq_len {
            return Err(Error::invalid(format!(
                "window of {} samples cannot hold one {}-sample sequence",
                self.window_samples(),
                seq_len
            )));
        }
        Ok(())
    }

    pub fn chip_duration_s(&self) -> f64 {
        self.samples_per_chip as f64 / self.fs
    }

    /// Samples in one modulated probe sequence.
    pub fn sequence_samples(&self) -> usize {
        self.n_bits * self.samples_per_chip
    }

    /// Samples in the observation window, `ceil(W * fs)`.
    pub fn window_samples(&self) -> usize {
        // The epsilon absorbs representation error in products like 2e-3 * 1e7.
        (self.window_s * self.fs - 1e-6).ceil().max(0.0) as usize
    }

    /// Whole sequence repetitions that fit in the window.
    pub fn segments(&self) -> usize {
        self.window_samples() / self.sequence_samples()
    }
}

/// Correlation magnitude per non-negative lag.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationProfile {
    pub magnitudes: Vec<f64>,
    pub lag_resolution_s: f64,
}

impl CorrelationProfile {
    pub fn len(&self) -> usize {
        self.magnitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.magnitudes.is_empty()
    }

    /// Lag of the largest magnitude (first one on ties).
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &m) in self.magnitudes.iter().enumerate() {
            if best.is_none_or(|(_, b)| m > b) {
                best = Some((i, m));
            }
        }
        best.map(|(i, _)| i)
    }

    pub fn peak(&self) -> f64 {
        self.magnitudes.iter().copied().fold(0.0, f64::max)
    }

    /// Lag offset in microseconds, snapped to a picosecond grid so whole
    /// samples print as short decimals (196 lags at 10 MHz is 19.6, not
    /// 19.599999999999998).
    pub fn lag_us(&self, lag: usize) -> f64 {
        (lag as f64 * self.lag_resolution_s * 1e12).round() / 1e6
    }

    /// `lag_us,mean_magnitude_norm` rows, magnitudes divided by `reference_energy`.
    pub fn to_csv(&self, reference_energy: f64) -> String {
        let mut out = String::from("lag_us,mean_magnitude_norm\n");
        for (lag, m) in self.magnitudes.iter().enumerate() {
            out.push_str(&format!("{},{}\n", self.lag_us(lag), m / reference_energy));
        }
        out
    }
}

/// First `length` bits of the PRBS31 stream whose nonzero start state is derived from `seed`.
pub fn generate_sequence(seed: u64, length: usize) -> Result<BitSequence> {
    if length == 0 {
        return Err(Error::invalid("sequence length must be at least 1"));
    }
    let full = (1u64 << PRBS31_DEGREE) - 1;
    let mut state = splitmix64(seed) & full;
    if state == 0 {
        state = 1;
    }
    let lfsr = Lfsr::new(PRBS31_DEGREE, PRBS31_MASK, state)?;
    BitSequence::new(lfsr.take(length).collect())
}

/// Bit 0 maps to +1, bit 1 to -1, each held for `samples_per_chip` samples at `fs`.
pub fn modulate_bpsk(bits: &BitSequence, params: &SounderParams) -> Result<IqBuffer> {
    if params.samples_per_chip == 0 {
        return Err(Error::invalid("samples_per_chip must be at least 1"));
    }
    let spc = params.samples_per_chip;
    let mut samples = Vec::with_capacity(bits.len() * spc);
    for &b in bits.bits() {
        let level = if b == 0 { 1.0 } else { -1.0 };
        samples.extend(std::iter::repeat_n(Complex64::new(level, 0.0), spc));
    }
    IqBuffer::new(samples, params.fs)
}

/// `|sum_n received[n + lag] * conj(reference[n])|` for every lag in
/// `0..=received.len() - reference.len()`.
pub fn cross_correlate(received: &IqBuffer, reference: &IqBuffer) -> Result<CorrelationProfile> {
    let raw = cross_correlate_complex(received, reference)?;
    Ok(CorrelationProfile {
        magnitudes: raw.into_iter().map(|c| c.norm()).collect(),
        lag_resolution_s: 1.0 / received.sample_rate(),
    })
}

/// Complex correlation values before the magnitude is taken.
pub fn cross_correlate_complex(
    received: &IqBuffer,
    reference: &IqBuffer,
) -> Result<Vec<Complex64>> {
    check_correlation_inputs(received, reference)?;
    let lags = received.len() - reference.len() + 1;
    Ok(if lags * reference.len() <= DIRECT_WORK_LIMIT {
        correlate_direct(received.samples(), reference.samples())
    } else {
        correlate_fft(received.samples(), reference.samples())
    })
}

/// Same contract as [`cross_correlate`], always evaluated by the direct sum.
pub fn cross_correlate_direct(
    received: &IqBuffer,
    reference: &IqBuffer,
) -> Result<CorrelationProfile> {
    check_correlation_inputs(received, reference)?;
    Ok(CorrelationProfile {
        magnitudes: correlate_direct(received.samples(), reference.samples())
            .into_iter()
            .map(|c| c.norm())
            .collect(),
        lag_resolution_s: 1.0 / received.sample_rate(),
    })
}

/// Same contract as [`cross_correlate`], always evaluated through the FFT.
pub fn cross_correlate_fft(
    received: &IqBuffer,
    reference: &IqBuffer,
) -> Result<CorrelationProfile> {
    check_correlation_inputs(received, reference)?;
    Ok(CorrelationProfile {
        magnitudes: correlate_fft(received.samples(), reference.samples())
            .into_iter()
            .map(|c| c.norm())
            .collect(),
        lag_resolution_s: 1.0 / received.sample_rate(),
    })
}

fn check_correlation_inputs(received: &IqBuffer, reference: &IqBuffer) -> Result<()> {
    received.require_non_empty("received")?;
    reference.require_non_empty("reference")?;
    if received.sample_rate() != reference.sample_rate() {
        return Err(Error::invalid(format!(
            "sample rates differ: {} Hz vs {} Hz",
            received.sample_rate(),
            reference.sample_rate()
        )));
    }
    if received.len() < reference.len() {
        return Err(Error::invalid(format!(
            "received ({} samples) is shorter than reference ({} samples)",
            received.len(),
            reference.len()
        )));
    }
    Ok(())
}

pub(crate) fn correlate_direct(x: &[Complex64], r: &[Complex64]) -> Vec<Complex64> {
    let lags = x.len() - r.len() + 1;
    (0..lags)
        .map(|lag| {
            x[lag..lag + r.len()]
                .iter()
                .zip(r)
                .map(|(a, b)| a * b.conj())
                .sum()
        })
        .collect()
}

/// Circular correlation over `m >= x.len()` points. With `r` zero-padded to
/// `m`, lags up to `x.len() - r.len()` never wrap.
pub(crate) fn correlate_fft(x: &[Complex64], r: &[Complex64]) -> Vec<Complex64> {
    let lags = x.len() - r.len() + 1;
    let m = x.len().next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(m);
    let inv = planner.plan_fft_inverse(m);

    let mut xf = vec![Complex64::new(0.0, 0.0); m];
    xf[..x.len()].copy_from_slice(x);
    let mut rf = vec![Complex64::new(0.0, 0.0); m];
    rf[..r.len()].copy_from_slice(r);
    fwd.process(&mut xf);
    fwd.process(&mut rf);
    for (a, b) in xf.iter_mut().zip(&rf) {
        *a *= b.conj();
    }
    inv.process(&mut xf);
    let scale = 1.0 / m as f64;
    xf.truncate(lags);
    xf.iter_mut().for_each(|c| *c *= scale);
    xf
}
