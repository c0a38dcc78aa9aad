//! Planar position estimation from gateway observations.
//!
//! Power of arrival (POA) inverts free-space loss into ranges, time of arrival
//! (TOA) scales arrival times by c, and time difference of arrival (TDOA)
//! works on range differences against a reference gateway. All three become a
//! small nonlinear least-squares problem in (x, y) solved by damped
//! Gauss-Newton with analytic Jacobians.

use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::SPEED_OF_LIGHT;

pub const DEFAULT_TOL_M: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 100;

/// Ratio det(H) / trace(H)^2 below which the normal equations count as singular.
const SINGULAR_RATIO: f64 = 1e-12;
const MAX_DAMPING: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Fixed receiver. Height feeds the two-ray channel only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gateway {
    pub id: String,
    pub position: Point2,
    #[serde(default)]
    pub height_m: f64,
}

impl Gateway {
    pub fn new(id: impl Into<String>, x: f64, y: f64) -> Self {
        Gateway {
            id: id.into(),
            position: Point2::new(x, y),
            height_m: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MeasurementKind {
    /// Received power, dBm.
    Rssi(f64),
    /// Absolute arrival time, seconds.
    Toa(f64),
    /// Arrival time minus the reference gateway's, seconds.
    Tdoa { seconds: f64, reference: String },
}

impl MeasurementKind {
    fn name(&self) -> &'static str {
        match self {
            MeasurementKind::Rssi(_) => "rssi",
            MeasurementKind::Toa(_) => "toa",
            MeasurementKind::Tdoa { .. } => "tdoa",
        }
    }
}

/// One gateway's observation of a transmission.
///
/// JSON form: `{"gateway_id": "...", "kind": "rssi"|"toa"|"tdoa", "value": x, "ref": "..."}`
/// with `ref` required for (and only allowed on) `tdoa`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeasurementRecord", into = "MeasurementRecord")]
pub struct Measurement {
    pub gateway_id: String,
    pub kind: MeasurementKind,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MeasurementRecord {
    gateway_id: String,
    kind: String,
    value: f64,
    #[serde(rename = "ref", default, skip_serializing_if = "Option::is_none")]
    reference: Option<String>,
}

impl TryFrom<MeasurementRecord> for Measurement {
    type Error = Error;

    fn try_from(r: MeasurementRecord) -> Result<Self> {
        if !r.value.is_finite() {
            return Err(Error::invalid("measurement value must be finite"));
        }
        let kind = match (r.kind.as_str(), r.reference) {
            ("rssi", None) => MeasurementKind::Rssi(r.value),
            ("toa", None) => MeasurementKind::Toa(r.value),
            ("tdoa", Some(reference)) => MeasurementKind::Tdoa {
                seconds: r.value,
                reference,
            },
            ("tdoa", None) => return Err(Error::invalid("tdoa measurement needs \"ref\"")),
            ("rssi" | "toa", Some(_)) => {
                return Err(Error::invalid("\"ref\" is only valid on tdoa measurements"))
            }
            (other, _) => {
                return Err(Error::invalid(format!(
                    "unknown measurement kind {other:?}"
                )))
            }
        };
        Ok(Measurement {
            gateway_id: r.gateway_id,
            kind,
        })
    }
}

impl From<Measurement> for MeasurementRecord {
    fn from(m: Measurement) -> Self {
        let (kind, value, reference) = match m.kind {
            MeasurementKind::Rssi(v) => ("rssi", v, None),
            MeasurementKind::Toa(v) => ("toa", v, None),
            MeasurementKind::Tdoa { seconds, reference } => ("tdoa", seconds, Some(reference)),
        };
        MeasurementRecord {
            gateway_id: m.gateway_id,
            kind: kind.into(),
            value,
            reference,
        }
    }
}

impl Measurement {
    pub fn rssi(gateway_id: impl Into<String>, dbm: f64) -> Self {
        Measurement {
            gateway_id: gateway_id.into(),
            kind: MeasurementKind::Rssi(dbm),
        }
    }

    pub fn toa(gateway_id: impl Into<String>, seconds: f64) -> Self {
        Measurement {
            gateway_id: gateway_id.into(),
            kind: MeasurementKind::Toa(seconds),
        }
    }

    pub fn tdoa(gateway_id: impl Into<String>, seconds: f64, reference: impl Into<String>) -> Self {
        Measurement {
            gateway_id: gateway_id.into(),
            kind: MeasurementKind::Tdoa {
                seconds,
                reference: reference.into(),
            },
        }
    }
}

/// Parses a JSON array of measurements.
pub fn parse_measurements(json: &str) -> Result<Vec<Measurement>> {
    Ok(serde_json::from_str(json)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionEstimate {
    pub position: Point2,
    /// Euclidean norm of the residual vector at `position`, meters.
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Serialize, Deserialize)]
struct EstimateRecord {
    x: f64,
    y: f64,
    residual_m: f64,
    converged: bool,
    iterations: usize,
}

impl PositionEstimate {
    /// `{"x":..,"y":..,"residual_m":..,"converged":..,"iterations":..}`
    pub fn to_json(&self) -> String {
        serde_json::to_string(&EstimateRecord {
            x: self.position.x,
            y: self.position.y,
            residual_m: self.residual_norm,
            converged: self.converged,
            iterations: self.iterations,
        })
        .expect("estimate serializes")
    }
}

/// One scalar residual term, in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Residual {
    /// `|p - anchor| - range`
    Range { anchor: Point2, range: f64 },
    /// `(|p - anchor| - |p - reference|) - difference`
    RangeDifference {
        anchor: Point2,
        reference: Point2,
        difference: f64,
    },
}

/// Unit vector from `anchor` towards `p`; zero when they coincide.
fn unit_from(anchor: &Point2, p: &Point2) -> [f64; 2] {
    let d = p.distance(anchor);
    if d == 0.0 {
        [0.0, 0.0]
    } else {
        [(p.x - anchor.x) / d, (p.y - anchor.y) / d]
    }
}

impl Residual {
    pub fn value(&self, p: &Point2) -> f64 {
        match self {
            Residual::Range { anchor, range } => p.distance(anchor) - range,
            Residual::RangeDifference {
                anchor,
                reference,
                difference,
            } => (p.distance(anchor) - p.distance(reference)) - difference,
        }
    }

    pub fn gradient(&self, p: &Point2) -> [f64; 2] {
        match self {
            Residual::Range { anchor, .. } => unit_from(anchor, p),
            Residual::RangeDifference {
                anchor, reference, ..
            } => {
                let a = unit_from(anchor, p);
                let r = unit_from(reference, p);
                [a[0] - r[0], a[1] - r[1]]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResidualModel {
    pub terms: Vec<Residual>,
}

impl ResidualModel {
    pub fn residuals(&self, p: &Point2) -> Vec<f64> {
        self.terms.iter().map(|t| t.value(p)).collect()
    }

    /// Analytic Jacobian, one row per term.
    pub fn jacobian(&self, p: &Point2) -> Vec<[f64; 2]> {
        self.terms.iter().map(|t| t.gradient(p)).collect()
    }

    /// Sum of squared residuals.
    pub fn cost(&self, p: &Point2) -> f64 {
        self.terms.iter().map(|t| t.value(p).powi(2)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tol_m: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol_m: DEFAULT_TOL_M,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

/// Damped Gauss-Newton. See [`gauss_newton_trace`].
pub fn gauss_newton_solve(
    model: &ResidualModel,
    initial: Point2,
    opts: &SolverOptions,
) -> Result<PositionEstimate> {
    gauss_newton_trace(model, initial, opts).map(|(est, _)| est)
}

/// Damped Gauss-Newton that also returns the cost after every accepted step
/// (starting with the initial cost).
///
/// Each iteration solves `(H + lambda diag(H)) step = -g` with `H = J^T J`,
/// `g = J^T r`. Lambda starts at zero (a pure Gauss-Newton step) and grows
/// tenfold whenever a trial step would raise the cost. Converges when the
/// step is shorter than `tol_m` or `|g| < 1e-3 tol_m`.
pub fn gauss_newton_trace(
    model: &ResidualModel,
    initial: Point2,
    opts: &SolverOptions,
) -> Result<(PositionEstimate, Vec<f64>)> {
    if !(opts.tol_m > 0.0) {
        return Err(Error::invalid("solver tolerance must be positive"));
    }
    if model.terms.is_empty() {
        return Err(Error::invalid("no residual terms"));
    }
    if !initial.is_finite() {
        return Err(Error::invalid("initial guess must be finite"));
    }
    let mut p = initial;
    let mut cost = model.cost(&p);
    if !cost.is_finite() {
        return Err(Error::invalid(
            "residuals are not finite at the initial guess",
        ));
    }
    let mut costs = vec![cost];
    let mut lambda = 0.0;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let r = model.residuals(&p);
        let jac = model.jacobian(&p);
        let (mut h00, mut h01, mut h11, mut g0, mut g1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (ri, row) in r.iter().zip(&jac) {
            h00 += row[0] * row[0];
            h01 += row[0] * row[1];
            h11 += row[1] * row[1];
            g0 += row[0] * ri;
            g1 += row[1] * ri;
        }
        let trace = h00 + h11;
        let det = h00 * h11 - h01 * h01;
        if !(trace > 0.0) || det <= SINGULAR_RATIO * trace * trace {
            return Err(Error::DegenerateGeometry);
        }
        if g0.hypot(g1) < opts.tol_m * 1e-3 {
            converged = true;
            break;
        }

        let mut accepted = None;
        loop {
            let a00 = h00 * (1.0 + lambda);
            let a11 = h11 * (1.0 + lambda);
            let d = a00 * a11 - h01 * h01;
            let sx = (-g0 * a11 + g1 * h01) / d;
            let sy = (-g1 * a00 + g0 * h01) / d;
            let trial = Point2::new(p.x + sx, p.y + sy);
            let trial_cost = model.cost(&trial);
            if trial_cost <= cost {
                accepted = Some((trial, trial_cost, sx.hypot(sy)));
                lambda = if lambda < 1e-9 { 0.0 } else { lambda / 10.0 };
                break;
            }
            lambda = if lambda == 0.0 { 1e-3 } else { lambda * 10.0 };
            if lambda > MAX_DAMPING {
                break;
            }
        }

        let Some((next, next_cost, step)) = accepted else {
            // No descent direction survives damping: we sit at a numerical minimum.
            converged = g0.hypot(g1) < opts.tol_m * 1e-3;
            break;
        };
        p = next;
        cost = next_cost;
        costs.push(cost);
        if step < opts.tol_m {
            converged = true;
            break;
        }
    }

    Ok((
        PositionEstimate {
            position: p,
            residual_norm: cost.sqrt(),
            iterations,
            converged,
        },
        costs,
    ))
}

/// Range at which free-space loss equals `tx_dbm - rssi_dbm`.
pub fn range_from_rssi(rssi_dbm: f64, tx_dbm: f64, fc: f64) -> f64 {
    range_from_rssi_with_exponent(rssi_dbm, tx_dbm, fc, 2.0)
}

/// Log-distance inversion `d = (c / 4 pi fc) 10^((tx - rssi) / (10 n))`.
/// `n = 2` is free space.
pub fn range_from_rssi_with_exponent(rssi_dbm: f64, tx_dbm: f64, fc: f64, exponent: f64) -> f64 {
    let d0 = SPEED_OF_LIGHT / (4.0 * PI * fc);
    d0 * 10f64.powf((tx_dbm - rssi_dbm) / (10.0 * exponent))
}

/// Path-loss model assumed when turning RSSI into range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoaModel {
    pub tx_dbm: f64,
    pub fc: f64,
    /// Path-loss exponent; 2 is free space.
    pub exponent: f64,
}

impl Default for PoaModel {
    fn default() -> Self {
        PoaModel {
            tx_dbm: 9.0,
            fc: 868e6,
            exponent: 2.0,
        }
    }
}

pub fn centroid(gateways: &[Gateway]) -> Point2 {
    let n = gateways.len().max(1) as f64;
    Point2::new(
        gateways.iter().map(|g| g.position.x).sum::<f64>() / n,
        gateways.iter().map(|g| g.position.y).sum::<f64>() / n,
    )
}

fn gateway_index(gateways: &[Gateway]) -> Result<HashMap<&str, &Gateway>> {
    let mut index = HashMap::with_capacity(gateways.len());
    for g in gateways {
        if !g.position.is_finite() {
            return Err(Error::invalid(format!(
                "gateway {} has a non-finite position",
                g.id
            )));
        }
        if index.insert(g.id.as_str(), g).is_some() {
            return Err(Error::invalid(format!("duplicate gateway id {:?}", g.id)));
        }
    }
    Ok(index)
}

/// Resolves each measurement's gateway, checking uniform kind and distinct gateways.
fn pair_measurements<'a>(
    gateways: &'a [Gateway],
    measurements: &'a [Measurement],
    expected: &'static str,
) -> Result<Vec<(&'a Gateway, &'a MeasurementKind)>> {
    let index = gateway_index(gateways)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(measurements.len());
    for m in measurements {
        if m.kind.name() != expected {
            return Err(Error::invalid(format!(
                "expected only {expected} measurements, found {}",
                m.kind.name()
            )));
        }
        let g = index
            .get(m.gateway_id.as_str())
            .ok_or_else(|| Error::invalid(format!("unknown gateway {:?}", m.gateway_id)))?;
        if !seen.insert(m.gateway_id.as_str()) {
            return Err(Error::invalid(format!(
                "gateway {:?} measured twice",
                m.gateway_id
            )));
        }
        out.push((*g, &m.kind));
    }
    Ok(out)
}

fn initial_or_centroid(initial: Option<Point2>, gateways: &[Gateway]) -> Point2 {
    initial.unwrap_or_else(|| centroid(gateways))
}

/// POA with free-space inversion and default solver options.
pub fn poa_trilaterate(
    gateways: &[Gateway],
    measurements: &[Measurement],
    tx_dbm: f64,
    fc: f64,
    initial: Option<Point2>,
) -> Result<PositionEstimate> {
    let model = PoaModel {
        tx_dbm,
        fc,
        exponent: 2.0,
    };
    poa_trilaterate_with(
        gateways,
        measurements,
        &model,
        initial,
        &SolverOptions::default(),
    )
}

pub fn poa_residuals(
    gateways: &[Gateway],
    measurements: &[Measurement],
    model: &PoaModel,
) -> Result<ResidualModel> {
    if !(model.fc > 0.0) || !(model.exponent > 0.0) {
        return Err(Error::invalid("POA model needs positive fc and exponent"));
    }
    let pairs = pair_measurements(gateways, measurements, "rssi")?;
    if pairs.len() < 3 {
        return Err(Error::InsufficientMeasurements {
            algorithm: "POA",
            needed: 3,
            got: pairs.len(),
        });
    }
    let terms = pairs
        .into_iter()
        .map(|(g, kind)| {
            let MeasurementKind::Rssi(dbm) = kind else {
                unreachable!("kinds checked by pair_measurements")
            };
            Residual::Range {
                anchor: g.position,
                range: range_from_rssi_with_exponent(*dbm, model.tx_dbm, model.fc, model.exponent),
            }
        })
        .collect();
    Ok(ResidualModel { terms })
}

pub fn poa_trilaterate_with(
    gateways: &[Gateway],
    measurements: &[Measurement],
    model: &PoaModel,
    initial: Option<Point2>,
    opts: &SolverOptions,
) -> Result<PositionEstimate> {
    let residuals = poa_residuals(gateways, measurements, model)?;
    gauss_newton_solve(&residuals, initial_or_centroid(initial, gateways), opts)
}

pub fn toa_residuals(gateways: &[Gateway], measurements: &[Measurement]) -> Result<ResidualModel> {
    let pairs = pair_measurements(gateways, measurements, "toa")?;
    if pairs.len() < 3 {
        return Err(Error::InsufficientMeasurements {
            algorithm: "TOA",
            needed: 3,
            got: pairs.len(),
        });
    }
    let terms = pairs
        .into_iter()
        .map(|(g, kind)| {
            let MeasurementKind::Toa(t) = kind else {
                unreachable!("kinds checked by pair_measurements")
            };
            Residual::Range {
                anchor: g.position,
                range: SPEED_OF_LIGHT * t,
            }
        })
        .collect();
    Ok(ResidualModel { terms })
}

/// TOA with transmitter and gateways on a common clock.
pub fn toa_trilaterate(
    gateways: &[Gateway],
    measurements: &[Measurement],
    initial: Option<Point2>,
) -> Result<PositionEstimate> {
    let residuals = toa_residuals(gateways, measurements)?;
    gauss_newton_solve(
        &residuals,
        initial_or_centroid(initial, gateways),
        &SolverOptions::default(),
    )
}

pub fn tdoa_residuals(
    gateways: &[Gateway],
    measurements: &[Measurement],
    reference_gateway: &str,
) -> Result<ResidualModel> {
    let index = gateway_index(gateways)?;
    let reference = index.get(reference_gateway).ok_or_else(|| {
        Error::invalid(format!(
            "reference gateway {reference_gateway:?} not in the set"
        ))
    })?;
    for m in measurements {
        if let MeasurementKind::Tdoa { reference: r, .. } = &m.kind {
            if r != reference_gateway {
                return Err(Error::invalid(format!(
                    "measurement for {:?} is relative to {r:?}, expected {reference_gateway:?}",
                    m.gateway_id
                )));
            }
        }
    }
    // The reference's own (identically zero) difference carries no information.
    let others: Vec<Measurement> = measurements
        .iter()
        .filter(|m| m.gateway_id != reference_gateway)
        .cloned()
        .collect();
    let pairs = pair_measurements(gateways, &others, "tdoa")?;
    if pairs.len() < 3 {
        return Err(Error::InsufficientMeasurements {
            algorithm: "TDOA",
            needed: 3,
            got: pairs.len(),
        });
    }
    let terms = pairs
        .into_iter()
        .map(|(g, kind)| {
            let MeasurementKind::Tdoa { seconds, .. } = kind else {
                unreachable!("kinds checked by pair_measurements")
            };
            Residual::RangeDifference {
                anchor: g.position,
                reference: reference.position,
                difference: SPEED_OF_LIGHT * seconds,
            }
        })
        .collect();
    Ok(ResidualModel { terms })
}

pub fn tdoa_locate(
    gateways: &[Gateway],
    measurements: &[Measurement],
    reference_gateway: &str,
    initial: Option<Point2>,
) -> Result<PositionEstimate> {
    let residuals = tdoa_residuals(gateways, measurements, reference_gateway)?;
    gauss_newton_solve(
        &residuals,
        initial_or_centroid(initial, gateways),
        &SolverOptions::default(),
    )
}

/// Differences absolute arrival times against `reference_gateway`.
pub fn tdoa_from_arrivals(
    arrivals: &[(String, f64)],
    reference_gateway: &str,
) -> Result<Vec<Measurement>> {
    let t_ref = arrivals
        .iter()
        .find(|(id, _)| id == reference_gateway)
        .map(|(_, t)| *t)
        .ok_or_else(|| Error::invalid(format!("no arrival for reference {reference_gateway:?}")))?;
    Ok(arrivals
        .iter()
        .filter(|(id, _)| id != reference_gateway)
        .map(|(id, t)| Measurement::tdoa(id.clone(), t - t_ref, reference_gateway))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::free_space_path_loss_db;
    use proptest::prelude::*;

    fn triangle() -> Vec<Gateway> {
        vec![
            Gateway::new("a", 0.0, 0.0),
            Gateway::new("b", 100.0, 0.0),
            Gateway::new("c", 0.0, 100.0),
        ]
    }

    fn square() -> Vec<Gateway> {
        vec![
            Gateway::new("a", 0.0, 0.0),
            Gateway::new("b", 100.0, 0.0),
            Gateway::new("c", 0.0, 100.0),
            Gateway::new("d", 100.0, 100.0),
        ]
    }

    fn rssi_for(gws: &[Gateway], target: Point2) -> Vec<Measurement> {
        gws.iter()
            .map(|g| {
                let d = g.position.distance(&target);
                Measurement::rssi(&g.id, 9.0 - free_space_path_loss_db(d, 868e6).unwrap())
            })
            .collect()
    }

    fn arrivals(gws: &[Gateway], target: Point2, offset: f64) -> Vec<(String, f64)> {
        gws.iter()
            .map(|g| {
                (
                    g.id.clone(),
                    g.position.distance(&target) / SPEED_OF_LIGHT + offset,
                )
            })
            .collect()
    }

    fn close(p: Point2, q: Point2, tol: f64) -> bool {
        p.distance(&q) <= tol
    }

    #[test]
    fn rssi_range_inversion() {
        assert!((range_from_rssi(-48.24, 9.0, 868e6) - 20.0).abs() < 0.01);
        assert!((range_from_rssi(9.0, 9.0, 868e6) - 0.027_484_707).abs() < 1e-8);
        let r1 = range_from_rssi(-60.0, 9.0, 868e6);
        let r2 = range_from_rssi(-60.0 - 6.020_599_913_279_624, 9.0, 868e6);
        assert!((r2 / r1 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn poa_exact_recovery() {
        let target = Point2::new(30.0, 40.0);
        let est = poa_trilaterate(
            &triangle(),
            &rssi_for(&triangle(), target),
            9.0,
            868e6,
            None,
        )
        .unwrap();
        assert!(est.converged);
        assert!(close(est.position, target, 1e-6), "{est:?}");
    }

    #[test]
    fn toa_exact_recovery() {
        let target = Point2::new(30.0, 40.0);
        let ms: Vec<_> = arrivals(&triangle(), target, 0.0)
            .into_iter()
            .map(|(id, t)| Measurement::toa(id, t))
            .collect();
        let est = toa_trilaterate(&triangle(), &ms, None).unwrap();
        assert!(est.converged);
        assert!(close(est.position, target, 1e-6), "{est:?}");
        assert!((20.0 / SPEED_OF_LIGHT - 66.71e-9).abs() < 0.01e-9);
    }

    #[test]
    fn tdoa_exact_recovery() {
        let target = Point2::new(30.0, 40.0);
        let ms = tdoa_from_arrivals(&arrivals(&square(), target, 0.0), "a").unwrap();
        let est = tdoa_locate(&square(), &ms, "a", None).unwrap();
        assert!(est.converged);
        assert!(close(est.position, target, 1e-6), "{est:?}");
    }

    #[test]
    fn tdoa_target_at_reference() {
        let target = Point2::new(0.0, 0.0);
        let ms = tdoa_from_arrivals(&arrivals(&square(), target, 0.0), "a").unwrap();
        let est = tdoa_locate(&square(), &ms, "a", None).unwrap();
        assert!(close(est.position, target, 1e-6), "{est:?}");
    }

    #[test]
    fn tdoa_missing_reference() {
        let ms = tdoa_from_arrivals(&arrivals(&square(), Point2::new(1.0, 2.0), 0.0), "a").unwrap();
        assert!(matches!(
            tdoa_locate(&square(), &ms, "zz", None),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn poa_needs_three() {
        let gws = triangle();
        let ms = rssi_for(&gws, Point2::new(1.0, 1.0));
        assert!(matches!(
            poa_trilaterate(&gws, &ms[..2], 9.0, 868e6, None),
            Err(Error::InsufficientMeasurements {
                needed: 3,
                got: 2,
                ..
            })
        ));
        let tdoa = tdoa_from_arrivals(&arrivals(&gws, Point2::new(5.0, 5.0), 0.0), "a").unwrap();
        assert!(matches!(
            tdoa_locate(&gws, &tdoa, "a", None),
            Err(Error::InsufficientMeasurements {
                needed: 3,
                got: 2,
                ..
            })
        ));
    }

    #[test]
    fn mixed_kinds_and_duplicates_rejected() {
        let gws = triangle();
        let ms = vec![
            Measurement::rssi("a", -50.0),
            Measurement::toa("b", 1e-7),
            Measurement::rssi("c", -50.0),
        ];
        assert!(poa_trilaterate(&gws, &ms, 9.0, 868e6, None).is_err());
        let dup = vec![
            Measurement::rssi("a", -50.0),
            Measurement::rssi("a", -51.0),
            Measurement::rssi("c", -50.0),
        ];
        assert!(poa_trilaterate(&gws, &dup, 9.0, 868e6, None).is_err());
    }

    #[test]
    fn collinear_gateways_are_degenerate() {
        let gws = vec![
            Gateway::new("a", 0.0, 0.0),
            Gateway::new("b", 50.0, 0.0),
            Gateway::new("c", 100.0, 0.0),
        ];
        let target = Point2::new(40.0, 30.0);
        let res = poa_trilaterate(&gws, &rssi_for(&gws, target), 9.0, 868e6, None);
        match res {
            Err(Error::DegenerateGeometry) => {}
            Ok(est) => {
                // Off the line the solver can only find one of the two mirror images.
                assert!(!est.converged || (est.position.y.abs() - 30.0).abs() < 1e-3);
            }
            Err(e) => panic!("unexpected {e}"),
        }
        // Starting on the gateway line (the centroid) the Jacobian is rank one.
        assert!(matches!(res, Err(Error::DegenerateGeometry)));
    }

    #[test]
    fn biased_rssi_inflates_ranges() {
        // Scenario-2 main-path attenuation applied everywhere.
        let gws = square();
        let target = Point2::new(30.0, 40.0);
        let biased: Vec<Measurement> = rssi_for(&gws, target)
            .into_iter()
            .map(|m| match m.kind {
                MeasurementKind::Rssi(v) => Measurement::rssi(m.gateway_id, v - 3.69),
                _ => unreachable!(),
            })
            .collect();
        let model = poa_residuals(&gws, &biased, &PoaModel::default()).unwrap();
        for (term, g) in model.terms.iter().zip(&gws) {
            let Residual::Range { range, .. } = term else {
                unreachable!()
            };
            let ratio = range / g.position.distance(&target);
            assert!((ratio - 10f64.powf(3.69 / 20.0)).abs() < 1e-9);
            assert!((ratio - 1.529).abs() < 1e-3);
        }
        let est = poa_trilaterate(&gws, &biased, 9.0, 868e6, None).unwrap();
        assert!(est.residual_norm > 1.0);
        let err = est.position.distance(&target);
        assert!((err - POA_BIAS_ERROR_REGRESSION).abs() < 1e-5, "{err}");
    }

    /// Position error for the biased-RSSI case above, from the forward
    /// simulation and cross-checked with an independent least-squares solver.
    const POA_BIAS_ERROR_REGRESSION: f64 = 70.213_933;

    #[test]
    fn toa_common_offset_biases_fit() {
        let gws = square();
        let target = Point2::new(30.0, 40.0);
        let mut last = 0.0;
        for delta in [0.0, 50e-9, 100e-9] {
            let ms: Vec<_> = arrivals(&gws, target, delta)
                .into_iter()
                .map(|(id, t)| Measurement::toa(id, t))
                .collect();
            let model = toa_residuals(&gws, &ms).unwrap();
            // Every range is inflated by c * delta.
            for (term, g) in model.terms.iter().zip(&gws) {
                let Residual::Range { range, .. } = term else {
                    unreachable!()
                };
                let bias = range - g.position.distance(&target);
                assert!((bias - SPEED_OF_LIGHT * delta).abs() < 1e-6);
            }
            let est = toa_trilaterate(&gws, &ms, None).unwrap();
            assert!(est.residual_norm >= last);
            last = est.residual_norm;
        }
        assert!(last > 1.0);
    }

    #[test]
    fn estimate_json_fields() {
        let est = PositionEstimate {
            position: Point2::new(1.5, -2.0),
            residual_norm: 0.25,
            iterations: 4,
            converged: true,
        };
        let v: serde_json::Value = serde_json::from_str(&est.to_json()).unwrap();
        assert_eq!(v["x"], 1.5);
        assert_eq!(v["y"], -2.0);
        assert_eq!(v["residual_m"], 0.25);
        assert_eq!(v["converged"], true);
        assert_eq!(v["iterations"], 4);
    }

    #[test]
    fn measurement_json() {
        let ms = parse_measurements(
            r#"[{"gateway_id":"a","kind":"rssi","value":-50.5},
                {"gateway_id":"b","kind":"tdoa","value":1e-7,"ref":"a"}]"#,
        )
        .unwrap();
        assert_eq!(ms[0], Measurement::rssi("a", -50.5));
        assert_eq!(ms[1], Measurement::tdoa("b", 1e-7, "a"));
        assert!(parse_measurements(r#"[{"gateway_id":"a","kind":"tdoa","value":1}]"#).is_err());
        assert!(
            parse_measurements(r#"[{"gateway_id":"a","kind":"rssi","value":1,"ref":"b"}]"#)
                .is_err()
        );
        assert!(parse_measurements(r#"[{"gateway_id":"a","kind":"gps","value":1}]"#).is_err());
        let back: Vec<Measurement> =
            serde_json::from_str(&serde_json::to_string(&ms).unwrap()).unwrap();
        assert_eq!(back, ms);
    }

    /// Central differences, step 1e-6 m: the Jacobian oracle.
    fn numeric_gradient(term: &Residual, p: &Point2) -> [f64; 2] {
        let h = 1e-6;
        let fx = (term.value(&Point2::new(p.x + h, p.y)) - term.value(&Point2::new(p.x - h, p.y)))
            / (2.0 * h);
        let fy = (term.value(&Point2::new(p.x, p.y + h)) - term.value(&Point2::new(p.x, p.y - h)))
            / (2.0 * h);
        [fx, fy]
    }

    fn point() -> impl Strategy<Value = Point2> {
        (-500.0f64..500.0, -500.0f64..500.0).prop_map(|(x, y)| Point2::new(x, y))
    }

    proptest! {
        #[test]
        fn jacobian_matches_finite_differences(
            p in point(), a in point(), r in point(), d in -100.0f64..100.0,
        ) {
            prop_assume!(p.distance(&a) > 1.0 && p.distance(&r) > 1.0);
            for term in [
                Residual::Range { anchor: a, range: d.abs() },
                Residual::RangeDifference { anchor: a, reference: r, difference: d },
            ] {
                let an = term.gradient(&p);
                let nu = numeric_gradient(&term, &p);
                let scale = an[0].hypot(an[1]).max(1e-3);
                prop_assert!((an[0] - nu[0]).hypot(an[1] - nu[1]) / scale < 1e-4);
            }
        }

        #[test]
        fn accepted_costs_never_increase(target in point(), start in point(), noise in 0.0f64..30.0) {
            let gws = square();
            let mut model = ResidualModel::default();
            for (i, g) in gws.iter().enumerate() {
                let wobble = if i % 2 == 0 { noise } else { -noise };
                model.terms.push(Residual::Range {
                    anchor: g.position,
                    range: (g.position.distance(&target) + wobble).abs(),
                });
            }
            if let Ok((_, costs)) = gauss_newton_trace(&model, start, &SolverOptions::default()) {
                for w in costs.windows(2) {
                    prop_assert!(w[1] <= w[0]);
                }
            }
        }

        #[test]
        fn tdoa_clock_offset_is_invisible(
            tx in 5.0f64..95.0, ty in 5.0f64..95.0, offset_ticks in -1_000_000i64..1_000_000,
        ) {
            // Arrival times on a 2^-60 s grid so every sum and difference is exact.
            let tick = 2f64.powi(-60);
            let target = Point2::new(tx, ty);
            let quantize = |t: f64| (t / tick).round() * tick;
            let base: Vec<(String, f64)> = arrivals(&square(), target, 0.0)
                .into_iter()
                .map(|(id, t)| (id, quantize(t)))
                .collect();
            let shifted: Vec<(String, f64)> = base
                .iter()
                .map(|(id, t)| (id.clone(), t + offset_ticks as f64 * tick))
                .collect();
            let a = tdoa_locate(&square(), &tdoa_from_arrivals(&base, "a").unwrap(), "a", None).unwrap();
            let b = tdoa_locate(&square(), &tdoa_from_arrivals(&shifted, "a").unwrap(), "a", None).unwrap();
            prop_assert_eq!(a.position.x.to_bits(), b.position.x.to_bits());
            prop_assert_eq!(a.position.y.to_bits(), b.position.y.to_bits());
        }

        #[test]
        fn poa_scale_law(tx in 10.0f64..90.0, ty in 10.0f64..90.0, k in 0.5f64..20.0) {
            let gws: Vec<Gateway> = square()
                .into_iter()
                .map(|g| Gateway::new(g.id, g.position.x * k, g.position.y * k))
                .collect();
            let target = Point2::new(tx * k, ty * k);
            let est = poa_trilaterate(&gws, &rssi_for(&gws, target), 9.0, 868e6, None).unwrap();
            prop_assert!(est.position.distance(&target) < 1e-6 * k.max(1.0));
        }
    }
}
