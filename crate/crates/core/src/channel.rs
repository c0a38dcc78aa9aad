//! Propagation models. Path loss comes from free space or a two-ray reflection;
//! multipath is a tapped delay line with optional additive white Gaussian noise.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::signal::IqBuffer;
use crate::SPEED_OF_LIGHT;

/// Returned by [`two_ray_gain_db`] when the direct and reflected rays cancel.
pub const TWO_RAY_FLOOR_DB: f64 = -200.0;

/// One multipath component: excess delay and mean gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathTap {
    pub delay_us: f64,
    pub gain_db: f64,
}

impl PathTap {
    pub fn new(delay_us: f64, gain_db: f64) -> Self {
        PathTap { delay_us, gain_db }
    }

    pub fn amplitude(&self) -> f64 {
        10f64.powf(self.gain_db / 20.0)
    }

    pub fn power(&self) -> f64 {
        10f64.powf(self.gain_db / 10.0)
    }
}

/// Built-in measured profiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// d = 20 m, gateway height 1 m.
    Scenario1,
    /// d = 20 m, gateway height 0 m.
    Scenario2,
}

impl Scenario {
    pub fn from_number(n: u8) -> Option<Scenario> {
        match n {
            1 => Some(Scenario::Scenario1),
            2 => Some(Scenario::Scenario2),
            _ => None,
        }
    }
}

/// Ordered taps with delays relative to the first arriving path.
///
/// A profile holds at least one finite tap. The first delay is exactly 0 and
/// delays strictly increase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProfile", into = "RawProfile")]
pub struct ChannelProfile {
    label: String,
    taps: Vec<PathTap>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProfile {
    label: String,
    taps: Vec<PathTap>,
}

impl TryFrom<RawProfile> for ChannelProfile {
    type Error = Error;

    fn try_from(raw: RawProfile) -> Result<Self> {
        ChannelProfile::new(raw.label, raw.taps)
    }
}

impl From<ChannelProfile> for RawProfile {
    fn from(p: ChannelProfile) -> Self {
        RawProfile {
            label: p.label,
            taps: p.taps,
        }
    }
}

impl ChannelProfile {
    pub fn new(label: impl Into<String>, taps: Vec<PathTap>) -> Result<Self> {
        let Some(first) = taps.first() else {
            return Err(Error::invalid("channel profile needs at least one tap"));
        };
        if first.delay_us != 0.0 {
            return Err(Error::invalid(format!(
                "first tap delay must be 0 us, got {}",
                first.delay_us
            )));
        }
        for t in &taps {
            if !t.delay_us.is_finite() || !t.gain_db.is_finite() {
                return Err(Error::invalid("tap delay and gain must be finite"));
            }
        }
        if taps.windows(2).any(|w| w[1].delay_us <= w[0].delay_us) {
            return Err(Error::invalid("tap delays must be strictly increasing"));
        }
        Ok(ChannelProfile {
            label: label.into(),
            taps,
        })
    }

    /// Single 0 us / 0 dB tap.
    pub fn identity() -> Self {
        ChannelProfile {
            label: "identity".into(),
            taps: vec![PathTap::new(0.0, 0.0)],
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn taps(&self) -> &[PathTap] {
        &self.taps
    }

    pub fn main_path(&self) -> PathTap {
        self.taps[0]
    }

    pub fn max_delay_us(&self) -> f64 {
        self.taps.last().map_or(0.0, |t| t.delay_us)
    }

    /// `10 log10(sum of tap powers)`, the incoherent total gain.
    pub fn total_power_db(&self) -> f64 {
        10.0 * self.taps.iter().map(PathTap::power).sum::<f64>().log10()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }
}

/// Delay/gain table measured at d = 20 m.
pub fn builtin_profile(scenario: Scenario) -> ChannelProfile {
    let (label, taps) = match scenario {
        Scenario::Scenario1 => ("scenario-1", [(0.0, -0.38), (18.38, -5.00), (27.19, -4.74)]),
        Scenario::Scenario2 => ("scenario-2", [(0.0, -3.69), (11.73, -5.36), (26.89, -5.14)]),
    };
    ChannelProfile {
        label: label.into(),
        taps: taps.iter().map(|&(d, g)| PathTap::new(d, g)).collect(),
    }
}

/// Tap delay in whole samples at `fs`, nearest-integer rounding.
pub fn tap_delay_samples(tap: &PathTap, fs: f64) -> usize {
    (tap.delay_us * 1e-6 * fs).round() as usize
}

/// `y[n] = sum_k a_k x[n - d_k]`, output length `len(x) + max delay`.
pub fn apply_tapped_delay_line(x: &IqBuffer, profile: &ChannelProfile) -> Result<IqBuffer> {
    x.require_non_empty("input")?;
    let fs = x.sample_rate();
    let limit = 10.0 * x.len() as f64;
    let mut delays = Vec::with_capacity(profile.taps().len());
    for tap in profile.taps() {
        let d = tap.delay_us * 1e-6 * fs;
        if d.round() > limit {
            return Err(Error::invalid(format!(
                "tap delay {} us exceeds 10x the input duration",
                tap.delay_us
            )));
        }
        delays.push((tap_delay_samples(tap, fs), tap.amplitude()));
    }
    let max_delay = delays.iter().map(|&(d, _)| d).max().unwrap_or(0);
    let mut y = vec![Complex64::new(0.0, 0.0); x.len() + max_delay];
    for &(d, a) in &delays {
        for (out, s) in y[d..d + x.len()].iter_mut().zip(x.samples()) {
            *out += s * a;
        }
    }
    IqBuffer::new(y, fs)
}

/// Adds circular complex Gaussian noise at `snr_db` relative to the mean
/// power of `x`. `snr_db = +inf` returns `x` unchanged.
pub fn add_awgn(x: &IqBuffer, snr_db: f64, seed: u64) -> Result<IqBuffer> {
    x.require_non_empty("input")?;
    let power = x.mean_power();
    if power <= 0.0 {
        return Err(Error::invalid("cannot set SNR on a zero-energy buffer"));
    }
    if snr_db == f64::INFINITY {
        return Ok(x.clone());
    }
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::invalid(format!(
            "SNR must be finite or +inf, got {snr_db}"
        )));
    }
    let noise_var = power / 10f64.powf(snr_db / 10.0);
    let normal =
        Normal::new(0.0, (noise_var / 2.0).sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = rng_from_seed(seed);
    let samples = x
        .samples()
        .iter()
        .map(|s| s + Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng)))
        .collect();
    IqBuffer::new(samples, x.sample_rate())
}

/// `20 log10(4 pi d fc / c)`.
pub fn free_space_path_loss_db(distance_m: f64, fc: f64) -> Result<f64> {
    if !(distance_m > 0.0 && distance_m.is_finite()) {
        return Err(Error::invalid(format!(
            "distance must be positive, got {distance_m}"
        )));
    }
    if !(fc > 0.0 && fc.is_finite()) {
        return Err(Error::invalid(format!(
            "carrier must be positive, got {fc}"
        )));
    }
    Ok(20.0 * (4.0 * PI * distance_m * fc / SPEED_OF_LIGHT).log10())
}

/// Ground distance and antenna heights for the two-ray model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkGeometry {
    pub distance_m: f64,
    pub tx_height_m: f64,
    pub rx_height_m: f64,
}

impl LinkGeometry {
    pub fn direct_path_m(&self) -> f64 {
        self.distance_m.hypot(self.tx_height_m - self.rx_height_m)
    }

    /// Path length via the flat-earth image of the transmitter.
    pub fn reflected_path_m(&self) -> f64 {
        self.distance_m.hypot(self.tx_height_m + self.rx_height_m)
    }
}

/// Two-ray gain relative to free space:
/// `20 log10 |1 + G (d_dir / d_ref) exp(-j 2 pi fc (d_ref - d_dir) / c)|`,
/// floored at [`TWO_RAY_FLOOR_DB`].
pub fn two_ray_gain_db(geom: &LinkGeometry, fc: f64, reflection_coeff: Complex64) -> Result<f64> {
    if !(geom.distance_m > 0.0 && geom.distance_m.is_finite()) {
        return Err(Error::invalid(format!(
            "distance must be positive, got {}",
            geom.distance_m
        )));
    }
    if geom.tx_height_m < 0.0 || geom.rx_height_m < 0.0 {
        return Err(Error::invalid("antenna heights must be non-negative"));
    }
    let d_dir = geom.direct_path_m();
    let d_ref = geom.reflected_path_m();
    let phase = -2.0 * PI * fc * (d_ref - d_dir) / SPEED_OF_LIGHT;
    let sum = Complex64::new(1.0, 0.0) + reflection_coeff * (d_dir / d_ref) * Complex64::cis(phase);
    let mag = sum.norm();
    let gain = 20.0 * mag.log10();
    Ok(if gain.is_finite() {
        gain.max(TWO_RAY_FLOOR_DB)
    } else {
        TWO_RAY_FLOOR_DB
    })
}

pub fn received_power_dbm(tx_dbm: f64, path_loss_db: f64, channel_gain_db: f64) -> f64 {
    tx_dbm - path_loss_db + channel_gain_db
}
