//! Turtle tracks: alternating dives and short breathing surfacings, moving as
//! a correlated random walk.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::locate::Point2;
use crate::rng::rng_from_seed;

/// 35 km/h.
pub const PEAK_SPEED_MPS: f64 = 35.0 / 3.6;

/// Axis-aligned rectangle the track reflects off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub min: Point2,
    pub max: Point2,
}

impl Bounds {
    pub fn contains(&self, p: &Point2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    fn reflect(&self, p: Point2) -> Point2 {
        Point2::new(
            reflect_1d(p.x, self.min.x, self.max.x),
            reflect_1d(p.y, self.min.y, self.max.y),
        )
    }
}

/// Folds `v` into `[lo, hi]` by mirroring at the walls.
fn reflect_1d(v: f64, lo: f64, hi: f64) -> f64 {
    let width = hi - lo;
    if width <= 0.0 {
        return lo;
    }
    let period = 2.0 * width;
    let m = (v - lo).rem_euclid(period);
    if m <= width {
        lo + m
    } else {
        lo + period - m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MobilityParams {
    pub max_speed_mps: f64,
    pub surface_min_s: f64,
    pub surface_max_s: f64,
    pub dive_min_s: f64,
    pub dive_max_s: f64,
    /// 1 keeps the heading fixed, 0 turns uniformly at random every step.
    pub heading_persistence: f64,
    pub seed: u64,
    pub start: Point2,
    pub bounds: Option<Bounds>,
    /// Spacing of intermediate samples inside an interval, seconds.
    pub step_s: f64,
}

impl Default for MobilityParams {
    fn default() -> Self {
        MobilityParams {
            max_speed_mps: PEAK_SPEED_MPS,
            surface_min_s: 0.1,
            surface_max_s: 0.5,
            dive_min_s: 120.0,
            dive_max_s: 180.0,
            heading_persistence: 0.9,
            seed: 0,
            start: Point2::new(0.0, 0.0),
            bounds: None,
            step_s: 1.0,
        }
    }
}

impl MobilityParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.max_speed_mps) {
            return Err(Error::invalid("max_speed_mps must be positive"));
        }
        if !(positive(self.surface_min_s) && self.surface_min_s <= self.surface_max_s)
            || !self.surface_max_s.is_finite()
        {
            return Err(Error::invalid("need 0 < surface_min_s <= surface_max_s"));
        }
        if !(positive(self.dive_min_s) && self.dive_min_s <= self.dive_max_s)
            || !self.dive_max_s.is_finite()
        {
            return Err(Error::invalid("need 0 < dive_min_s <= dive_max_s"));
        }
        if !(0.0..=1.0).contains(&self.heading_persistence) {
            return Err(Error::invalid("heading_persistence must lie in [0, 1]"));
        }
        if !positive(self.step_s) {
            return Err(Error::invalid("step_s must be positive"));
        }
        if !self.start.is_finite() {
            return Err(Error::invalid("start must be finite"));
        }
        if let Some(b) = &self.bounds {
            if !(b.min.is_finite() && b.max.is_finite() && b.min.x < b.max.x && b.min.y < b.max.y) {
                return Err(Error::invalid("bounds must have min < max on both axes"));
            }
            if !b.contains(&self.start) {
                return Err(Error::invalid("start lies outside bounds"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackSample {
    pub t: f64,
    pub position: Point2,
    /// State of the interval that starts at this sample.
    pub surfaced: bool,
}

/// A contiguous run of one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub start_s: f64,
    pub end_s: f64,
    pub surfaced: bool,
}

impl Interval {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn midpoint_s(&self) -> f64 {
        0.5 * (self.start_s + self.end_s)
    }
}

/// Timestamped positions. Every state change is sampled, and the final
/// sample closes the last interval (it repeats the last state).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurtleTrack {
    pub samples: Vec<TrackSample>,
}

impl TurtleTrack {
    pub fn intervals(&self) -> Vec<Interval> {
        let mut out = Vec::new();
        let Some(first) = self.samples.first() else {
            return out;
        };
        let mut start = first.t;
        let mut state = first.surfaced;
        for s in &self.samples[1..] {
            if s.surfaced != state {
                out.push(Interval {
                    start_s: start,
                    end_s: s.t,
                    surfaced: state,
                });
                start = s.t;
                state = s.surfaced;
            }
        }
        let last = self.samples[self.samples.len() - 1].t;
        if last > start {
            out.push(Interval {
                start_s: start,
                end_s: last,
                surfaced: state,
            });
        }
        out
    }

    pub fn surfacings(&self) -> Vec<Interval> {
        self.intervals()
            .into_iter()
            .filter(|i| i.surfaced)
            .collect()
    }

    /// Linear interpolation between the bracketing samples; `None` outside the track.
    pub fn position_at(&self, t: f64) -> Option<Point2> {
        let first = self.samples.first()?;
        let last = self.samples.last()?;
        if t < first.t || t > last.t {
            return None;
        }
        let i = self.samples.partition_point(|s| s.t <= t);
        if i == 0 {
            return Some(first.position);
        }
        if i == self.samples.len() {
            return Some(last.position);
        }
        let (a, b) = (&self.samples[i - 1], &self.samples[i]);
        let w = (t - a.t) / (b.t - a.t);
        Some(Point2::new(
            a.position.x + w * (b.position.x - a.position.x),
            a.position.y + w * (b.position.y - a.position.y),
        ))
    }

    pub fn max_speed_mps(&self) -> f64 {
        self.samples
            .windows(2)
            .map(|w| w[1].position.distance(&w[0].position) / (w[1].t - w[0].t))
            .fold(0.0, f64::max)
    }

    /// Checks time order and the speed cap, then each interval's duration.
    pub fn validate(&self, params: &MobilityParams) -> Result<()> {
        // Interval ends are sums of many steps; allow rounding slack.
        const EPS: f64 = 1e-9;
        if self.samples.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(Error::invalid("timestamps are not strictly increasing"));
        }
        let speed = self.max_speed_mps();
        if speed > params.max_speed_mps * (1.0 + EPS) {
            return Err(Error::invalid(format!("speed {speed} m/s exceeds the cap")));
        }
        for iv in self.intervals() {
            let (lo, hi) = if iv.surfaced {
                (params.surface_min_s, params.surface_max_s)
            } else {
                (params.dive_min_s, params.dive_max_s)
            };
            let d = iv.duration_s();
            if d < lo - EPS || d > hi + EPS {
                return Err(Error::invalid(format!(
                    "{} interval at t = {} lasts {d} s, outside [{lo}, {hi}]",
                    if iv.surfaced { "surface" } else { "dive" },
                    iv.start_s
                )));
            }
        }
        Ok(())
    }

    /// `t,x,y,surfaced` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x,y,surfaced\n");
        for s in &self.samples {
            out.push_str(&format!(
                "{},{},{},{}\n",
                s.t,
                s.position.x,
                s.position.y,
                u8::from(s.surfaced)
            ));
        }
        out
    }
}

/// Dive/surface cycles starting with a dive, keeping only whole intervals
/// that end by `duration_s`.
///
/// Each interval draws its duration uniformly from the configured range and a
/// speed from `(0, max_speed]`. Inside an interval the heading takes a
/// Gaussian turn every `step_s` with standard deviation
/// `(1 - heading_persistence) * pi`.
pub fn generate_track(params: &MobilityParams, duration_s: f64, seed: u64) -> Result<TurtleTrack> {
    params.validate()?;
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::invalid("duration_s must be positive"));
    }
    let mut rng = rng_from_seed(seed);
    let turn_sigma = (1.0 - params.heading_persistence) * PI;
    let turn = Normal::new(0.0, turn_sigma).map_err(|e| Error::invalid(e.to_string()))?;

    let mut heading: f64 = rng.random_range(0.0..2.0 * PI);
    let mut pos = params.start;
    let mut t = 0.0;
    let mut surfaced = false;
    let mut samples = vec![TrackSample {
        t,
        position: pos,
        surfaced,
    }];

    loop {
        let (lo, hi) = if surfaced {
            (params.surface_min_s, params.surface_max_s)
        } else {
            (params.dive_min_s, params.dive_max_s)
        };
        let length = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        let speed = params.max_speed_mps * (1.0 - rng.random::<f64>());
        if t + length > duration_s {
            break;
        }
        let steps = (length / params.step_s).ceil().max(1.0) as usize;
        let dt = length / steps as f64;
        let end = t + length;
        for k in 1..=steps {
            if turn_sigma > 0.0 {
                heading += turn.sample(&mut rng);
            }
            let mut next = Point2::new(
                pos.x + speed * dt * heading.cos(),
                pos.y + speed * dt * heading.sin(),
            );
            if let Some(b) = &params.bounds {
                let folded = b.reflect(next);
                if folded.x != next.x {
                    heading = PI - heading;
                }
                if folded.y != next.y {
                    heading = -heading;
                }
                next = folded;
            }
            pos = next;
            // The last step lands exactly on the interval end.
            let ts = if k == steps { end } else { t + dt * k as f64 };
            let state = if k == steps { !surfaced } else { surfaced };
            samples.push(TrackSample {
                t: ts,
                position: pos,
                surfaced: state,
            });
        }
        t = end;
        surfaced = !surfaced;
    }

    // Close the last interval with a sample carrying its own state.
    if let Some(last) = samples.last_mut() {
        last.surfaced = !last.surfaced;
    }
    if samples.len() < 2 {
        return Err(Error::invalid(format!(
            "duration {duration_s} s is shorter than the first dive"
        )));
    }
    Ok(TurtleTrack { samples })
}
