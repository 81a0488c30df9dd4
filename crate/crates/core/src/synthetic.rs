//! Synthetic fleets built by exact forward integration on the sphere.
//!
//! Each vessel runs a sequence of legs (straight, constant turn, stop and
//! go, or a combined speed change and turn). Point `n` stores the speed and
//! course used to move from point `n-1` to point `n`, which is the same
//! convention preprocessing derives from positions, so a generated track
//! and its re-derived kinematics agree to rounding error.

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesy::{propagate, wrap_360, GeoPoint};
use crate::trajectory::{Trajectory, TrajectoryPoint};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManeuverMix {
    pub straight: f64,
    pub turn: f64,
    pub stop_go: f64,
    pub composite: f64,
}

impl Default for ManeuverMix {
    fn default() -> Self {
        Self { straight: 0.35, turn: 0.3, stop_go: 0.05, composite: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LegKind {
    Straight,
    Turn,
    StopGo,
    Composite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FleetSpec {
    pub n_vessels: usize,
    pub duration_s: i64,
    pub interval_s: i64,
    /// Cruise speed range, knots.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Turn-rate magnitude range, degrees per minute.
    pub turn_rate_min: f64,
    pub turn_rate_max: f64,
    /// Leg duration range, minutes.
    pub leg_min_minutes: f64,
    pub leg_max_minutes: f64,
    pub mix: ManeuverMix,
    /// Region for starting positions: lon_min, lon_max, lat_min, lat_max.
    pub region: [f64; 4],
    pub seed: u64,
}

impl Default for FleetSpec {
    fn default() -> Self {
        Self {
            n_vessels: 40,
            duration_s: 3 * 3600,
            interval_s: 60,
            speed_min: 6.0,
            speed_max: 18.0,
            turn_rate_min: 1.0,
            turn_rate_max: 6.0,
            leg_min_minutes: 15.0,
            leg_max_minutes: 45.0,
            mix: ManeuverMix::default(),
            region: [-95.0, -85.0, 20.0, 28.0],
            seed: 0,
        }
    }
}

impl FleetSpec {
    pub fn validate(&self) -> Result<()> {
        let m = &self.mix;
        let parts = [m.straight, m.turn, m.stop_go, m.composite];
        if parts.iter().any(|&f| !(f >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("maneuver fractions must be non-negative and sum to 1: {m:?}")));
        }
        let positive_range = |lo: f64, hi: f64| lo > 0.0 && hi >= lo;
        if self.interval_s <= 0 || self.duration_s < self.interval_s {
            return Err(Error::Config("duration must cover at least one interval".into()));
        }
        if !positive_range(self.speed_min, self.speed_max)
            || !positive_range(self.turn_rate_min, self.turn_rate_max)
            || !positive_range(self.leg_min_minutes, self.leg_max_minutes)
        {
            return Err(Error::Config("speed, turn-rate and leg ranges must be positive".into()));
        }
        let [lon0, lon1, lat0, lat1] = self.region;
        if !(lon0 <= lon1 && lat0 <= lat1 && lat0 >= -80.0 && lat1 <= 80.0) {
            return Err(Error::Config(format!("bad region {:?}", self.region)));
        }
        Ok(())
    }

    fn draw_kind(&self, rng: &mut ChaCha8Rng) -> LegKind {
        let u: f64 = rng.gen();
        let m = &self.mix;
        if u < m.straight {
            LegKind::Straight
        } else if u < m.straight + m.turn {
            LegKind::Turn
        } else if u < m.straight + m.turn + m.stop_go {
            LegKind::StopGo
        } else {
            LegKind::Composite
        }
    }
}

/// Per-step plan of one leg: speed and course for each of its steps.
fn plan_leg(kind: LegKind, steps: usize, sog0: f64, cog0: f64, spec: &FleetSpec, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let dt_min = spec.interval_s as f64 / 60.0;
    let mut rate = || {
        let r = rng.gen_range(spec.turn_rate_min..=spec.turn_rate_max);
        if rng.gen_bool(0.5) { r } else { -r }
    };
    match kind {
        LegKind::Straight => vec![(sog0, cog0); steps],
        LegKind::Turn => {
            let r = rate();
            (1..=steps).map(|k| (sog0, wrap_360(cog0 + r * dt_min * k as f64))).collect()
        }
        LegKind::Composite => {
            let r = rate();
            let target = rng.gen_range(spec.speed_min..=spec.speed_max);
            (1..=steps)
                .map(|k| {
                    let f = k as f64 / steps as f64;
                    (sog0 + (target - sog0) * f, wrap_360(cog0 + r * dt_min * k as f64))
                })
                .collect()
        }
        LegKind::StopGo => {
            let ramp = (steps / 3).max(1);
            (1..=steps)
                .map(|k| {
                    let f = if k <= ramp {
                        1.0 - k as f64 / ramp as f64
                    } else if k + ramp > steps {
                        1.0 - (steps - k) as f64 / ramp as f64
                    } else {
                        0.0
                    };
                    (sog0 * f, cog0)
                })
                .collect()
        }
    }
}

fn vessel(index: usize, spec: &FleetSpec) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);

    let [lon0, lon1, lat0, lat1] = spec.region;
    let mut pos = GeoPoint::new(rng.gen_range(lon0..=lon1), rng.gen_range(lat0..=lat1))?;
    let mut sog = rng.gen_range(spec.speed_min..=spec.speed_max);
    let mut cog = rng.gen_range(0.0..360.0);
    let drift: f64 = rng.gen_range(-3.0..=3.0);
    let base: DateTime<Utc> = Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).single().expect("valid date");
    let t0 = base + Duration::minutes(rng.gen_range(0..365 * 24 * 60));

    let n_steps = (spec.duration_s / spec.interval_s) as usize;
    let mut plan: Vec<(f64, f64)> = Vec::with_capacity(n_steps);
    while plan.len() < n_steps {
        let minutes = rng.gen_range(spec.leg_min_minutes..=spec.leg_max_minutes);
        let steps = ((minutes * 60.0 / spec.interval_s as f64).round() as usize).max(1);
        let kind = spec.draw_kind(&mut rng);
        let leg = plan_leg(kind, steps, sog, cog, spec, &mut rng);
        (sog, cog) = *leg.last().expect("leg has steps");
        plan.extend(leg);
    }
    plan.truncate(n_steps);

    let dt = spec.interval_s as f64;
    let point = |k: usize, pos: GeoPoint, sog: f64, cog: f64| TrajectoryPoint {
        t: t0 + Duration::seconds(k as i64 * spec.interval_s),
        lon: pos.lon,
        lat: pos.lat,
        sog,
        cog,
        heading: wrap_360(cog + drift),
    };
    let mut points = Vec::with_capacity(n_steps + 1);
    let (s1, c1) = plan[0];
    points.push(point(0, pos, s1, c1));
    for (k, &(s, c)) in plan.iter().enumerate() {
        pos = propagate(pos, s, c, dt)?;
        points.push(point(k + 1, pos, s, c));
    }
    Ok(Trajectory::new(format!("SYN{:06}", index), points, spec.interval_s))
}

/// Generates the fleet; vessel `i` depends only on the seed and `i`.
pub fn generate(spec: &FleetSpec) -> Result<Vec<Trajectory>> {
    use rayon::prelude::*;
    spec.validate()?;
    (0..spec.n_vessels).into_par_iter().map(|i| vessel(i, spec)).collect()
}
