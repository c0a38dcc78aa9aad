//! Localization experiments over simulated turtle tracks.
//!
//! One beacon is sent per surfacing, at the interval midpoint. Every gateway
//! turns it into a measurement through the configured channel, the chosen
//! algorithm estimates the position, and the error against the true track
//! position is recorded. Random draws for surfacing `i`, gateway `j` come from
//! a stream keyed by `(seed, i, j)`, so results do not depend on evaluation
//! order and two runs differing only in channel see the same noise.

use num_complex::Complex64;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::channel::{
    builtin_profile, free_space_path_loss_db, received_power_dbm, two_ray_gain_db, ChannelProfile,
    LinkGeometry, Scenario,
};
use crate::error::{Error, Result};
use crate::locate::{
    centroid, gauss_newton_solve, poa_residuals, tdoa_from_arrivals, tdoa_residuals, toa_residuals,
    Gateway, Measurement, PoaModel, Point2, PositionEstimate, SolverOptions,
};
use crate::mobility::{generate_track, Bounds, MobilityParams, TurtleTrack};
use crate::rng::{derive_seed, rng_from_seed};
use crate::SPEED_OF_LIGHT;

const TRACK_STREAM: u64 = 0x74_7261_636b;

/// Horizontal distances are clamped to this so a turtle right under a
/// gateway still has a finite path loss.
const MIN_DISTANCE_M: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[serde(alias = "POA")]
    Poa,
    #[serde(alias = "TOA")]
    Toa,
    #[serde(alias = "TDOA")]
    Tdoa,
}

impl Algorithm {
    pub fn min_gateways(&self) -> usize {
        match self {
            Algorithm::Poa | Algorithm::Toa => 3,
            Algorithm::Tdoa => 4,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Poa => "POA",
            Algorithm::Toa => "TOA",
            Algorithm::Tdoa => "TDOA",
        }
    }
}

/// Propagation seen by the localization measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ChannelModel {
    /// Free-space loss only.
    IdealFspl,
    /// Built-in measured profile, 1 or 2.
    Scenario(u8),
    Profile(ChannelProfile),
    TwoRay {
        /// Transmitter antenna height above the surface, meters.
        #[serde(default = "default_tag_height")]
        tx_height_m: f64,
        /// Complex reflection coefficient as `[re, im]`.
        #[serde(default = "default_reflection")]
        reflection_coeff: [f64; 2],
    },
}

fn default_tag_height() -> f64 {
    0.1
}

fn default_reflection() -> [f64; 2] {
    [-1.0, 0.0]
}

impl ChannelModel {
    pub fn resolve_profile(&self) -> Result<Option<ChannelProfile>> {
        match self {
            ChannelModel::Scenario(n) => Scenario::from_number(*n)
                .map(|s| Some(builtin_profile(s)))
                .ok_or_else(|| Error::invalid(format!("unknown scenario {n}, expected 1 or 2"))),
            ChannelModel::Profile(p) => Ok(Some(p.clone())),
            _ => Ok(None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub gateways: Vec<Gateway>,
    pub channel: ChannelModel,
    pub algorithm: Algorithm,
    /// Gaussian RSSI jitter, dB.
    pub rssi_sigma_db: f64,
    /// Gaussian arrival-time jitter, seconds.
    pub toa_sigma_s: f64,
    pub mobility: MobilityParams,
    pub duration_s: f64,
    pub seed: u64,
    pub tx_dbm: f64,
    pub fc: f64,
    /// Path-loss exponent assumed by the POA inversion.
    pub poa_exponent: f64,
    /// TDOA reference; the first gateway when absent.
    pub tdoa_reference: Option<String>,
}

impl Default for ExperimentConfig {
    /// Four gateways on a 2 km square running POA over the ideal channel.
    /// The ten-hour track stays inside the square.
    fn default() -> Self {
        let gw = |id: &str, x: f64, y: f64| Gateway {
            id: id.into(),
            position: Point2::new(x, y),
            height_m: 5.0,
        };
        ExperimentConfig {
            gateways: vec![
                gw("gw0", 0.0, 0.0),
                gw("gw1", 2000.0, 0.0),
                gw("gw2", 0.0, 2000.0),
                gw("gw3", 2000.0, 2000.0),
            ],
            channel: ChannelModel::IdealFspl,
            algorithm: Algorithm::Poa,
            rssi_sigma_db: 1.0,
            toa_sigma_s: 10e-9,
            mobility: MobilityParams {
                start: Point2::new(1000.0, 1000.0),
                bounds: Some(Bounds {
                    min: Point2::new(100.0, 100.0),
                    max: Point2::new(1900.0, 1900.0),
                }),
                ..MobilityParams::default()
            },
            duration_s: 36_000.0,
            seed: 1,
            tx_dbm: 9.0,
            fc: 868e6,
            poa_exponent: 2.0,
            tdoa_reference: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let need = self.algorithm.min_gateways();
        if self.gateways.len() < need {
            return Err(Error::InsufficientMeasurements {
                algorithm: self.algorithm.name(),
                needed: need,
                got: self.gateways.len(),
            });
        }
        let mut ids = std::collections::HashSet::new();
        for g in &self.gateways {
            if !ids.insert(g.id.as_str()) {
                return Err(Error::invalid(format!("duplicate gateway id {:?}", g.id)));
            }
            if !g.position.is_finite() || !(g.height_m >= 0.0 && g.height_m.is_finite()) {
                return Err(Error::invalid(format!(
                    "gateway {:?} has invalid geometry",
                    g.id
                )));
            }
        }
        if !(self.rssi_sigma_db >= 0.0 && self.rssi_sigma_db.is_finite()) {
            return Err(Error::invalid(
                "rssi_sigma_db must be a non-negative number",
            ));
        }
        if !(self.toa_sigma_s >= 0.0 && self.toa_sigma_s.is_finite()) {
            return Err(Error::invalid("toa_sigma_s must be a non-negative number"));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::invalid("duration_s must be positive"));
        }
        if !self.tx_dbm.is_finite() || !(self.fc > 0.0 && self.fc.is_finite()) {
            return Err(Error::invalid("tx_dbm must be finite and fc positive"));
        }
        if !(self.poa_exponent > 0.0 && self.poa_exponent.is_finite()) {
            return Err(Error::invalid("poa_exponent must be positive"));
        }
        if let Some(r) = &self.tdoa_reference {
            if !self.gateways.iter().any(|g| &g.id == r) {
                return Err(Error::invalid(format!(
                    "tdoa_reference {r:?} is not a gateway"
                )));
            }
        }
        if let ChannelModel::TwoRay {
            tx_height_m,
            reflection_coeff,
        } = &self.channel
        {
            if !(*tx_height_m >= 0.0 && tx_height_m.is_finite())
                || !reflection_coeff.iter().all(|v| v.is_finite())
            {
                return Err(Error::invalid(
                    "two-ray parameters must be finite, height >= 0",
                ));
            }
        }
        self.channel.resolve_profile()?;
        self.mobility.validate()
    }

    fn tdoa_reference_id(&self) -> &str {
        self.tdoa_reference
            .as_deref()
            .unwrap_or(self.gateways[0].id.as_str())
    }

    fn track_seed(&self) -> u64 {
        derive_seed(derive_seed(self.seed, TRACK_STREAM), self.mobility.seed)
    }
}

/// Channel gain added to free-space loss for the RSSI path, dB.
///
/// Profiles contribute the main-path gain plus the incoherent power sum
/// `10 log10(sum 10^(g_k / 10))` of all taps.
pub fn channel_gain_db(
    channel: &ChannelModel,
    distance_m: f64,
    gateway: &Gateway,
    fc: f64,
) -> Result<f64> {
    match channel {
        ChannelModel::IdealFspl => Ok(0.0),
        ChannelModel::Scenario(_) | ChannelModel::Profile(_) => {
            let profile = channel.resolve_profile()?.expect("profile channel");
            Ok(profile.main_path().gain_db + profile.total_power_db())
        }
        ChannelModel::TwoRay {
            tx_height_m,
            reflection_coeff,
        } => two_ray_gain_db(
            &LinkGeometry {
                distance_m,
                tx_height_m: *tx_height_m,
                rx_height_m: gateway.height_m,
            },
            fc,
            Complex64::new(reflection_coeff[0], reflection_coeff[1]),
        ),
    }
}

/// Excess delay of the first arriving path, seconds.
fn first_path_delay_s(channel: &ChannelModel) -> Result<f64> {
    Ok(channel
        .resolve_profile()?
        .map_or(0.0, |p| p.taps()[0].delay_us * 1e-6))
}

/// One gateway's view of a beacon from `true_position`.
///
/// POA yields RSSI; TOA and TDOA both yield absolute arrival times (TDOA
/// differencing happens once all gateways have reported).
pub fn simulate_measurement(
    true_position: Point2,
    gateway: &Gateway,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<Measurement> {
    let distance = true_position
        .distance(&gateway.position)
        .max(MIN_DISTANCE_M);
    let mut rng = rng_from_seed(seed);
    let jitter = |sigma: f64, rng: &mut rand_chacha::ChaCha8Rng| -> Result<f64> {
        if sigma == 0.0 {
            return Ok(0.0);
        }
        Ok(Normal::new(0.0, sigma)
            .map_err(|e| Error::invalid(e.to_string()))?
            .sample(rng))
    };
    match config.algorithm {
        Algorithm::Poa => {
            let loss = free_space_path_loss_db(distance, config.fc)?;
            let gain = channel_gain_db(&config.channel, distance, gateway, config.fc)?;
            let rssi = received_power_dbm(config.tx_dbm, loss, gain)
                + jitter(config.rssi_sigma_db, &mut rng)?;
            Ok(Measurement::rssi(&gateway.id, rssi))
        }
        Algorithm::Toa | Algorithm::Tdoa => {
            let t = distance / SPEED_OF_LIGHT
                + first_path_delay_s(&config.channel)?
                + jitter(config.toa_sigma_s, &mut rng)?;
            Ok(Measurement::toa(&gateway.id, t))
        }
    }
}

fn localize(config: &ExperimentConfig, measurements: &[Measurement]) -> Result<PositionEstimate> {
    let model = match config.algorithm {
        Algorithm::Poa => poa_residuals(
            &config.gateways,
            measurements,
            &PoaModel {
                tx_dbm: config.tx_dbm,
                fc: config.fc,
                exponent: config.poa_exponent,
            },
        )?,
        Algorithm::Toa => toa_residuals(&config.gateways, measurements)?,
        Algorithm::Tdoa => {
            let reference = config.tdoa_reference_id();
            let arrivals: Vec<(String, f64)> = measurements
                .iter()
                .map(|m| match m.kind {
                    crate::locate::MeasurementKind::Toa(t) => Ok((m.gateway_id.clone(), t)),
                    _ => Err(Error::invalid("TDOA simulation expects arrival times")),
                })
                .collect::<Result<_>>()?;
            let diffs = tdoa_from_arrivals(&arrivals, reference)?;
            tdoa_residuals(&config.gateways, &diffs, reference)?
        }
    };
    gauss_newton_solve(
        &model,
        centroid(&config.gateways),
        &SolverOptions::default(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurfacingRecord {
    pub t: f64,
    pub true_position: Point2,
    /// Position is NaN when the solve itself failed.
    pub estimate: PositionEstimate,
    /// Distance from truth; NaN when the solve failed.
    pub error_m: f64,
    /// Why the solve failed, if it did.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub surfacings: usize,
    pub converged: usize,
    pub converged_fraction: f64,
    /// Statistics over converged records; NaN (`null` in JSON) when there are none.
    pub rmse_m: f64,
    pub median_m: f64,
    pub p95_m: f64,
}

/// Linear-interpolation quantile of sorted data (`q` in [0, 1]).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

impl Summary {
    pub fn from_records(records: &[SurfacingRecord]) -> Summary {
        let mut errs: Vec<f64> = records
            .iter()
            .filter(|r| r.estimate.converged)
            .map(|r| r.error_m)
            .collect();
        errs.sort_by(f64::total_cmp);
        let n = errs.len();
        let rmse = if n == 0 {
            f64::NAN
        } else {
            (errs.iter().map(|e| e * e).sum::<f64>() / n as f64).sqrt()
        };
        Summary {
            surfacings: records.len(),
            converged: n,
            converged_fraction: if records.is_empty() {
                0.0
            } else {
                n as f64 / records.len() as f64
            },
            rmse_m: rmse,
            median_m: quantile_sorted(&errs, 0.5),
            p95_m: quantile_sorted(&errs, 0.95),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultSet {
    pub records: Vec<SurfacingRecord>,
    pub summary: Summary,
}

impl ResultSet {
    /// `t,true_x,true_y,est_x,est_y,error_m,converged`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,true_x,true_y,est_x,est_y,error_m,converged\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.t,
                r.true_position.x,
                r.true_position.y,
                r.estimate.position.x,
                r.estimate.position.y,
                r.error_m,
                r.estimate.converged
            ));
        }
        out
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary serializes")
    }
}

/// Track for a config, as used by [`run_experiment`].
pub fn experiment_track(config: &ExperimentConfig) -> Result<TurtleTrack> {
    generate_track(&config.mobility, config.duration_s, config.track_seed())
}

/// Localizes the turtle at every surfacing of the generated track.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ResultSet> {
    config.validate()?;
    let track = experiment_track(config)?;
    let mut records = Vec::new();
    for (i, surfacing) in track.surfacings().iter().enumerate() {
        let t = surfacing.midpoint_s();
        let truth = track
            .position_at(t)
            .expect("surfacing midpoint lies inside the track");
        let surfacing_seed = derive_seed(config.seed, i as u64);
        let measurements: Result<Vec<Measurement>> = config
            .gateways
            .iter()
            .enumerate()
            .map(|(j, g)| {
                simulate_measurement(truth, g, config, derive_seed(surfacing_seed, j as u64))
            })
            .collect();
        let outcome = measurements.and_then(|ms| localize(config, &ms));
        let record = match outcome {
            Ok(est) => SurfacingRecord {
                t,
                true_position: truth,
                error_m: est.position.distance(&truth),
                estimate: est,
                failure: None,
            },
            Err(e) => SurfacingRecord {
                t,
                true_position: truth,
                estimate: PositionEstimate {
                    position: Point2::new(f64::NAN, f64::NAN),
                    residual_norm: f64::NAN,
                    iterations: 0,
                    converged: false,
                },
                error_m: f64::NAN,
                failure: Some(e.to_string()),
            },
        };
        records.push(record);
    }
    let summary = Summary::from_records(&records);
    Ok(ResultSet { records, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDelta {
    pub t: f64,
    pub err_ideal_m: f64,
    pub err_real_m: f64,
    /// `err_real_m - err_ideal_m`.
    pub delta_m: f64,
}

/// One-sided paired sign test of "realistic errors exceed ideal errors".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub positives: usize,
    pub negatives: usize,
    pub ties: usize,
    /// `P(X >= positives)` for `X ~ Binomial(positives + negatives, 1/2)`.
    pub p_value: f64,
}

impl SignTest {
    pub fn from_deltas(deltas: &[f64]) -> SignTest {
        let positives = deltas.iter().filter(|&&d| d > 0.0).count();
        let negatives = deltas.iter().filter(|&&d| d < 0.0).count();
        let ties = deltas.len() - positives - negatives;
        let n = (positives + negatives) as u64;
        let p_value = if n == 0 || positives == 0 {
            1.0
        } else {
            let b = Binomial::new(0.5, n).expect("valid binomial");
            b.sf(positives as u64 - 1)
        };
        SignTest {
            positives,
            negatives,
            ties,
            p_value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub ideal: Summary,
    pub realistic: Summary,
    /// Surfacings where both runs converged.
    pub paired: usize,
    pub delta_median_m: f64,
    pub sign_test: SignTest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub ideal: ResultSet,
    pub realistic: ResultSet,
    pub deltas: Vec<ErrorDelta>,
    pub summary: ComparisonSummary,
}

impl Comparison {
    /// `t,err_ideal_m,err_real_m,delta_m`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,err_ideal_m,err_real_m,delta_m\n");
        for d in &self.deltas {
            out.push_str(&format!(
                "{},{},{},{}\n",
                d.t, d.err_ideal_m, d.err_real_m, d.delta_m
            ));
        }
        out
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("comparison serializes")
    }
}

/// Runs `base` once over the ideal channel and once over its own channel,
/// with identical track and noise seeds, and pairs the errors per surfacing.
pub fn compare_channels(base: &ExperimentConfig) -> Result<Comparison> {
    let ideal_cfg = ExperimentConfig {
        channel: ChannelModel::IdealFspl,
        ..base.clone()
    };
    let ideal = run_experiment(&ideal_cfg)?;
    let realistic = run_experiment(base)?;
    debug_assert_eq!(ideal.records.len(), realistic.records.len());

    let deltas: Vec<ErrorDelta> = ideal
        .records
        .iter()
        .zip(&realistic.records)
        .filter(|(a, b)| a.estimate.converged && b.estimate.converged)
        .map(|(a, b)| ErrorDelta {
            t: a.t,
            err_ideal_m: a.error_m,
            err_real_m: b.error_m,
            delta_m: b.error_m - a.error_m,
        })
        .collect();
    let raw: Vec<f64> = deltas.iter().map(|d| d.delta_m).collect();
    let summary = ComparisonSummary {
        ideal: ideal.summary.clone(),
        realistic: realistic.summary.clone(),
        paired: deltas.len(),
        delta_median_m: median(&raw),
        sign_test: SignTest::from_deltas(&raw),
    };
    Ok(Comparison {
        ideal,
        realistic,
        deltas,
        summary,
    })
}
