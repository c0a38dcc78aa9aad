//! Receiver-side sounding: correlate each sequence repetition inside the
//! observation window, then pick paths from the averaged profile.
//!
//! The transmitter sends the PRBS stream continuously for the whole window.
//! Segment `k` of the window is the `k`-th block of `n_bits` chips; the
//! receiver correlates that block's neighborhood against the same block of
//! the regenerated stream and averages over all segments, either coherently
//! (complex mean, then magnitude) or as a mean of magnitudes. Lags run from 0
//! up to one sequence length, limited by how much received signal follows the
//! last segment.
//!
//! Because every segment uses a different block, cross-terms between paths
//! are independent from segment to segment. Coherent integration shrinks them
//! by the square root of the segment count; a mean of magnitudes keeps their
//! mean and only narrows their spread.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{
    add_awgn, apply_tapped_delay_line, builtin_profile, ChannelProfile, PathTap, Scenario,
};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::signal::{
    cross_correlate_complex, generate_sequence, modulate_bpsk, CorrelationProfile, Integration,
    IqBuffer, SounderParams,
};

/// Seed stream used for sounding noise, relative to `SounderParams::seed`.
const NOISE_STREAM: u64 = 0x6e_6f69_7365;

/// Peak-picking rule for [`detect_paths`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    /// Acceptance level relative to the strongest lag, dB (negative).
    pub threshold_db: f64,
    /// Minimum lag distance between two accepted paths.
    pub min_separation_samples: usize,
    pub max_paths: usize,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            threshold_db: -20.0,
            min_separation_samples: 2,
            max_paths: 8,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_db < 0.0) || !self.threshold_db.is_finite() {
            return Err(Error::invalid(format!(
                "threshold_db must be negative, got {}",
                self.threshold_db
            )));
        }
        if self.min_separation_samples == 0 {
            return Err(Error::invalid("min_separation_samples must be at least 1"));
        }
        if self.max_paths == 0 {
            return Err(Error::invalid("max_paths must be at least 1"));
        }
        Ok(())
    }
}

/// Sounding workflow configuration as read from JSON.
///
/// At most one of `scenario` and `profile` selects the simulated channel;
/// `snr_db` absent means noiseless.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoundConfig {
    pub params: SounderParams,
    pub detection: DetectionConfig,
    pub scenario: Option<u8>,
    pub profile: Option<ChannelProfile>,
    pub snr_db: Option<f64>,
}

impl SoundConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: SoundConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.detection.validate()?;
        if let Some(snr) = self.snr_db {
            if snr.is_nan() {
                return Err(Error::invalid("snr_db must be a number"));
            }
        }
        self.channel().map(|_| ())
    }

    /// The selected channel, `None` when neither field is set.
    pub fn channel(&self) -> Result<Option<ChannelProfile>> {
        match (&self.scenario, &self.profile) {
            (Some(_), Some(_)) => Err(Error::invalid("set either scenario or profile, not both")),
            (Some(n), None) => Scenario::from_number(*n)
                .map(|s| Some(builtin_profile(s)))
                .ok_or_else(|| Error::invalid(format!("unknown scenario {n}, expected 1 or 2"))),
            (None, p) => Ok(p.clone()),
        }
    }
}

/// Everything [`sound_channel`] computes on the way to the profile.
#[derive(Debug, Clone)]
pub struct SoundingReport {
    pub correlation: CorrelationProfile,
    pub reference_energy: f64,
    pub profile: ChannelProfile,
}

/// The modulated PRBS stream transmitted over one observation window.
pub fn probe_waveform(params: &SounderParams) -> Result<IqBuffer> {
    params.validate()?;
    let window = params.window_samples();
    let bits = window.div_ceil(params.samples_per_chip);
    let seq = generate_sequence(params.seed, bits)?;
    let mut wave = modulate_bpsk(&seq, params)?.into_samples();
    wave.truncate(window);
    IqBuffer::new(wave, params.fs)
}

/// Probe through `profile`, plus AWGN at `snr_db` when given.
///
/// Noise is seeded from `params.seed` so a whole sounding run is fixed by its
/// parameters.
pub fn synthesize_received(
    params: &SounderParams,
    profile: &ChannelProfile,
    snr_db: Option<f64>,
) -> Result<IqBuffer> {
    let tx = probe_waveform(params)?;
    let rx = apply_tapped_delay_line(&tx, profile)?;
    match snr_db {
        Some(snr) => add_awgn(&rx, snr, derive_seed(params.seed, NOISE_STREAM)),
        None => Ok(rx),
    }
}

/// Per-lag correlation averaged over the `segments()` sequence repetitions of
/// the window, combined per `params.integration`.
///
/// `reference` is either one modulated sequence (`sequence_samples()` long),
/// used against every segment, or a probe stream covering all segments, in
/// which case segment `k` is correlated against reference block `k`.
pub fn average_window(
    received: &IqBuffer,
    reference: &IqBuffer,
    params: &SounderParams,
) -> Result<CorrelationProfile> {
    params.validate()?;
    if received.sample_rate() != params.fs || reference.sample_rate() != params.fs {
        return Err(Error::invalid(format!(
            "buffers must be sampled at fs = {} Hz",
            params.fs
        )));
    }
    let seg_len = params.sequence_samples();
    let segments = params.segments();
    if received.len() < params.window_samples() {
        return Err(Error::invalid(format!(
            "received has {} samples, window needs {}",
            received.len(),
            params.window_samples()
        )));
    }
    let per_segment_reference = if reference.len() == seg_len {
        false
    } else if reference.len() >= segments * seg_len {
        true
    } else {
        return Err(Error::invalid(format!(
            "reference must hold one sequence ({seg_len} samples) or {segments} of them, got {}",
            reference.len()
        )));
    };

    // Lags available to every segment, capped at one sequence length.
    let last_start = (segments - 1) * seg_len;
    let lags = seg_len.min(received.len() - last_start - seg_len + 1);

    let mut coherent = vec![Complex64::new(0.0, 0.0); lags];
    let mut magnitude = vec![0.0; lags];
    for k in 0..segments {
        let start = k * seg_len;
        let neighborhood = received.slice(start, start + seg_len + lags - 1);
        let corr = if per_segment_reference {
            cross_correlate_complex(&neighborhood, &reference.slice(start, start + seg_len))?
        } else {
            cross_correlate_complex(&neighborhood, reference)?
        };
        for ((c, m), v) in coherent.iter_mut().zip(magnitude.iter_mut()).zip(&corr) {
            *c += v;
            *m += v.norm();
        }
    }
    let n = segments as f64;
    let magnitudes = match params.integration {
        Integration::Coherent => coherent.into_iter().map(|c| c.norm() / n).collect(),
        Integration::NonCoherent => magnitude.into_iter().map(|m| m / n).collect(),
    };
    Ok(CorrelationProfile {
        magnitudes,
        lag_resolution_s: 1.0 / params.fs,
    })
}

/// Greedy local-maximum path picking.
///
/// Candidates are local maxima at or above `peak * 10^(threshold_db / 20)`.
/// They are accepted strongest first, skipping any closer than
/// `min_separation_samples` to an accepted path, until `max_paths`. Delays
/// are re-based to the earliest accepted path and gains are
/// `20 log10(magnitude / reference_energy)`.
pub fn detect_paths(
    profile: &CorrelationProfile,
    cfg: &DetectionConfig,
    reference_energy: f64,
) -> Result<ChannelProfile> {
    cfg.validate()?;
    if profile.is_empty() {
        return Err(Error::invalid("correlation profile is empty"));
    }
    if !(reference_energy > 0.0 && reference_energy.is_finite()) {
        return Err(Error::invalid("reference energy must be positive"));
    }
    let mags = &profile.magnitudes;
    let peak = profile.peak();
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::EmptyProfile);
    }
    let floor = peak * 10f64.powf(cfg.threshold_db / 20.0);

    let mut candidates: Vec<usize> = (0..mags.len())
        .filter(|&i| {
            let m = mags[i];
            m >= floor && (i == 0 || m >= mags[i - 1]) && (i + 1 == mags.len() || m >= mags[i + 1])
        })
        .collect();
    if candidates.is_empty() {
        return Err(Error::EmptyProfile);
    }
    candidates.sort_by(|&a, &b| mags[b].total_cmp(&mags[a]).then(a.cmp(&b)));

    let mut accepted: Vec<usize> = Vec::new();
    for lag in candidates {
        if accepted.len() == cfg.max_paths {
            break;
        }
        if accepted
            .iter()
            .all(|&a| a.abs_diff(lag) >= cfg.min_separation_samples)
        {
            accepted.push(lag);
        }
    }
    accepted.sort_unstable();

    let first = accepted[0];
    let taps = accepted
        .iter()
        .map(|&lag| {
            PathTap::new(
                profile.lag_us(lag - first),
                20.0 * (mags[lag] / reference_energy).log10(),
            )
        })
        .collect();
    ChannelProfile::new("sounded", taps)
}

/// Regenerates the probe from `params.seed`, averages over the window and
/// detects paths.
pub fn sound_channel(
    received: &IqBuffer,
    params: &SounderParams,
    cfg: &DetectionConfig,
) -> Result<ChannelProfile> {
    Ok(sound_channel_report(received, params, cfg)?.profile)
}

pub fn sound_channel_report(
    received: &IqBuffer,
    params: &SounderParams,
    cfg: &DetectionConfig,
) -> Result<SoundingReport> {
    let reference = probe_waveform(params)?;
    let correlation = average_window(received, &reference, params)?;
    let block = reference.slice(0, params.sequence_samples());
    let reference_energy = block.energy();
    let profile = detect_paths(&correlation, cfg, reference_energy)?;
    Ok(SoundingReport {
        correlation,
        reference_energy,
        profile,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::cross_correlate;

    fn params(seed: u64) -> SounderParams {
        SounderParams {
            seed,
            ..SounderParams::default()
        }
    }

    #[test]
    fn probe_covers_window() {
        let p = params(1);
        let w = probe_waveform(&p).unwrap();
        assert_eq!(w.len(), 20_000);
        assert_eq!(p.segments(), 43);
        // First block is the 456-bit sequence itself.
        let seq = modulate_bpsk(&generate_sequence(1, 456).unwrap(), &p).unwrap();
        assert_eq!(&w.samples()[..456], seq.samples());
    }

    #[test]
    fn repeated_sequence_single_tap_equals_single_segment() {
        let p = params(4);
        let seq = modulate_bpsk(&generate_sequence(4, 456).unwrap(), &p).unwrap();
        let reps = p.segments() + 2;
        let tx: Vec<Complex64> = seq
            .samples()
            .iter()
            .copied()
            .cycle()
            .take(reps * 456)
            .collect();
        let rx = IqBuffer::new(tx, p.fs).unwrap();
        let avg = average_window(&rx, &seq, &p).unwrap();
        let single = cross_correlate(&rx.slice(0, 456 + avg.len() - 1), &seq).unwrap();
        assert_eq!(avg.len(), single.len());
        for (a, b) in avg.magnitudes.iter().zip(&single.magnitudes) {
            assert!((a - b).abs() <= 1e-9 * b.max(1.0));
        }
    }

    #[test]
    fn averaging_uses_43_segments() {
        // Only the segment-0 neighborhood carries signal, so the average
        // peak is 456 / 43.
        let p = params(2);
        let probe = probe_waveform(&p).unwrap();
        let mut rx = vec![Complex64::new(0.0, 0.0); p.window_samples()];
        rx[..456].copy_from_slice(&probe.samples()[..456]);
        let avg = average_window(&IqBuffer::new(rx, p.fs).unwrap(), &probe, &p).unwrap();
        assert!((avg.magnitudes[0] - 456.0 / 43.0).abs() < 1e-9);
    }

    #[test]
    fn average_window_rejects_short_input() {
        let p = params(1);
        let probe = probe_waveform(&p).unwrap();
        let short = probe.slice(0, 19_999);
        assert!(matches!(
            average_window(&short, &probe, &p),
            Err(Error::InvalidArgument(_))
        ));
        let odd_ref = probe.slice(0, 1000);
        assert!(average_window(&probe, &odd_ref, &p).is_err());
    }

    #[test]
    fn averaging_shrinks_noise_variance() {
        // Monte-Carlo: variance of the magnitude at a fixed off-path lag,
        // single segment vs the 43-segment mean, noise-only channel at 0 dB.
        let p = params(8);
        let probe = probe_waveform(&p).unwrap();
        let block = probe.slice(0, 456);
        let lag = 200;
        let trials = 120;
        let mut single = Vec::new();
        let mut averaged = Vec::new();
        for t in 0..trials {
            let rx = add_awgn(&probe, 0.0, 1000 + t).unwrap();
            let avg = average_window(&rx, &probe, &p).unwrap();
            averaged.push(avg.magnitudes[lag]);
            let one = cross_correlate(&rx.slice(0, 456 + lag), &block).unwrap();
            single.push(one.magnitudes[lag]);
        }
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        };
        let ratio = var(&single) / var(&averaged);
        // Sample-variance ratio of 120 draws: accept a wide band around 43.
        assert!((20.0..90.0).contains(&ratio), "variance ratio {ratio}");
    }

    #[test]
    fn identity_channel_detects_one_zero_db_path() {
        let p = params(3);
        let rx = synthesize_received(&p, &ChannelProfile::identity(), None).unwrap();
        let sounded = sound_channel(&rx, &p, &DetectionConfig::default()).unwrap();
        assert_eq!(sounded.taps().len(), 1);
        assert_eq!(sounded.taps()[0].delay_us, 0.0);
        assert!(sounded.taps()[0].gain_db.abs() < 0.01);
    }

    #[test]
    fn scenario2_detection_at_30db() {
        let p = params(5);
        let table = builtin_profile(Scenario::Scenario2);
        let rx = synthesize_received(&p, &table, Some(30.0)).unwrap();
        let got = sound_channel(&rx, &p, &DetectionConfig::default()).unwrap();
        assert_eq!(got.taps().len(), 3, "{got:?}");
        for (g, t) in got.taps().iter().zip(table.taps()) {
            let quantized = (t.delay_us * 10.0).round() / 10.0;
            assert!((g.delay_us - quantized).abs() < 0.1);
            assert!((g.gain_db - t.gain_db).abs() < 0.5, "{g:?} vs {t:?}");
        }
    }

    #[test]
    fn sub_sample_taps_merge() {
        let p = params(6);
        let taps = ChannelProfile::new(
            "close",
            vec![PathTap::new(0.0, 0.0), PathTap::new(0.05, 0.0)],
        )
        .unwrap();
        let rx = synthesize_received(&p, &taps, None).unwrap();
        let got = sound_channel(&rx, &p, &DetectionConfig::default()).unwrap();
        assert_eq!(got.taps().len(), 1, "{got:?}");
    }

    #[test]
    fn empty_profile_errors() {
        let flat = CorrelationProfile {
            magnitudes: vec![0.0; 10],
            lag_resolution_s: 1e-7,
        };
        assert!(matches!(
            detect_paths(&flat, &DetectionConfig::default(), 456.0),
            Err(Error::EmptyProfile)
        ));
    }

    #[test]
    fn detection_respects_separation_and_cap() {
        let mut m = vec![0.0; 40];
        m[5] = 10.0;
        m[6] = 9.0; // adjacent, not a local max
        m[10] = 8.0;
        m[11] = 8.5; // within min separation of nothing; local max
        m[30] = 5.0;
        let prof = CorrelationProfile {
            magnitudes: m,
            lag_resolution_s: 1e-7,
        };
        let cfg = DetectionConfig {
            threshold_db: -10.0,
            min_separation_samples: 3,
            max_paths: 2,
        };
        let got = detect_paths(&prof, &cfg, 10.0).unwrap();
        let delays: Vec<f64> = got
            .taps()
            .iter()
            .map(|t| (t.delay_us * 10.0).round())
            .collect();
        assert_eq!(delays, vec![0.0, 6.0]);
        assert_eq!(got.taps()[0].gain_db, 0.0);
    }

    #[test]
    fn lower_threshold_keeps_paths() {
        let p = params(9);
        let rx =
            synthesize_received(&p, &builtin_profile(Scenario::Scenario1), Some(20.0)).unwrap();
        let reference = probe_waveform(&p).unwrap();
        let corr = average_window(&rx, &reference, &p).unwrap();
        let absolute = |prof: &ChannelProfile| -> Vec<i64> {
            // Recover absolute lags from the main path's absolute position (lag 0 here).
            prof.taps()
                .iter()
                .map(|t| (t.delay_us * 10.0).round() as i64)
                .collect()
        };
        let mut prev: Option<Vec<i64>> = None;
        for th in [-6.0, -10.0, -15.0, -20.0, -25.0, -30.0] {
            let cfg = DetectionConfig {
                threshold_db: th,
                ..DetectionConfig::default()
            };
            let got = detect_paths(&corr, &cfg, 456.0).unwrap();
            let lags = absolute(&got);
            if let Some(prev) = &prev {
                for l in prev {
                    assert!(lags.contains(l), "threshold {th} dropped lag {l}");
                }
            }
            prev = Some(lags);
        }
    }

    #[test]
    fn integration_modes_agree_without_noise_in_repeat_mode() {
        let coherent = params(4);
        let incoherent = SounderParams {
            integration: Integration::NonCoherent,
            ..coherent.clone()
        };
        let block = probe_waveform(&coherent).unwrap().slice(0, 456);
        let tx: Vec<_> = (0..44).flat_map(|_| block.samples().to_vec()).collect();
        let rx = IqBuffer::new(tx, 10e6).unwrap();
        let a = average_window(&rx, &block, &coherent).unwrap();
        let b = average_window(&rx, &block, &incoherent).unwrap();
        for (x, y) in a.magnitudes.iter().zip(&b.magnitudes) {
            assert!((x - y).abs() < 1e-9 * x.max(1.0));
        }
    }

    #[test]
    fn sound_config_parsing() {
        let cfg = SoundConfig::from_json(r#"{"scenario": 2, "snr_db": 30, "params": {"seed": 7}}"#)
            .unwrap();
        assert_eq!(cfg.params.seed, 7);
        assert_eq!(cfg.params.n_bits, 456);
        assert_eq!(
            cfg.channel().unwrap().unwrap(),
            builtin_profile(Scenario::Scenario2)
        );
        assert_eq!(
            SoundConfig::from_json("{}").unwrap().channel().unwrap(),
            None
        );
        let both = r#"{"scenario": 1, "profile": {"label": "x", "taps": [{"delay_us": 0, "gain_db": 0}]}}"#;
        assert!(SoundConfig::from_json(both).is_err());
        assert!(SoundConfig::from_json(r#"{"scenario": 3}"#).is_err());
        assert!(SoundConfig::from_json(r#"{"snr": 3}"#).is_err());
        assert!(SoundConfig::from_json(r#"{"params": {"integration": "non_coherent"}}"#).is_ok());
    }
}
