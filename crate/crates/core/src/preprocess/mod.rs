//! Resampling, kinematics, differencing and normalization.
//!
//! Kinematics are backward-looking: the speed and course stored on point
//! `n` describe the step from `p[n-1]` to `p[n]`. With that convention the
//! state of every point, applied to its predecessor through the motion
//! model, reproduces the point itself, so differencing and the cumulative
//! recovery used by the loss are exact inverses and a window never sees
//! information from beyond its last encoder point.

mod dataset;
mod spline;
mod window;

use chrono::Duration;
use serde::{Deserialize, Serialize};

pub(crate) use dataset::hex_sha256;
pub use dataset::{
    build_dataset, load_dataset, save_dataset, Dataset, Manifest, SplitCounts, SplitFractions, TrajectoryWindows, MANIFEST_FILE,
    SAMPLES_FILE,
};
pub use spline::NaturalCubicSpline;
pub use window::{corner_filter, corner_thresholds, make_windows, window_count, CornerMode, DatasetSpec, Sample};

use crate::error::{Error, Result};
use crate::geodesy::{haversine_km, initial_bearing, signed_angle_diff, KNOT_MS};
use crate::trajectory::{Trajectory, TrajectoryPoint};

/// Below this step length (metres) the course is carried over.
const STATIONARY_M: f64 = 1e-6;

/// Resamples onto a uniform grid starting at the first fix.
///
/// Longitude and latitude are interpolated independently by natural cubic
/// splines over time. Speed and course are recomputed from the new
/// positions; heading is forward-filled from the raw fixes.
pub fn resample(traj: &Trajectory, interval_s: i64) -> Result<Trajectory> {
    if interval_s <= 0 {
        return Err(Error::Domain(format!("interval must be positive, got {interval_s}")));
    }
    let pts = &traj.points;
    if pts.len() < 4 {
        return Err(Error::TooShort { needed: 4, got: pts.len() });
    }
    if !traj.is_strictly_increasing() {
        return Err(Error::Domain(format!("vessel {}: timestamps not strictly increasing", traj.vessel_id)));
    }
    let t0 = pts[0].t;
    let secs: Vec<f64> = pts.iter().map(|p| (p.t - t0).num_seconds() as f64).collect();
    let lon = NaturalCubicSpline::new(&secs, &pts.iter().map(|p| p.lon).collect::<Vec<_>>())?;
    let lat = NaturalCubicSpline::new(&secs, &pts.iter().map(|p| p.lat).collect::<Vec<_>>())?;

    let span = (pts[pts.len() - 1].t - t0).num_seconds();
    let n = (span / interval_s) as usize + 1;
    let mut out = Vec::with_capacity(n);
    let mut raw = 0;
    for k in 0..n {
        let s = k as i64 * interval_s;
        while raw + 1 < pts.len() && secs[raw + 1] <= s as f64 {
            raw += 1;
        }
        out.push(TrajectoryPoint {
            t: t0 + Duration::seconds(s),
            lon: lon.eval(s as f64),
            lat: lat.eval(s as f64),
            sog: 0.0,
            cog: 0.0,
            heading: pts[raw].heading,
        });
    }
    derive_kinematics(&Trajectory::new(traj.vessel_id.clone(), out, interval_s))
}

/// Recomputes speed and course from consecutive positions.
///
/// `sog[n]` is the great-circle distance from `p[n-1]` to `p[n]` in knots
/// over the interval and `cog[n]` the initial bearing of that step. The
/// first point copies the second. A zero-length step keeps the previous
/// course (0 when there is none).
pub fn derive_kinematics(traj: &Trajectory) -> Result<Trajectory> {
    if !traj.is_uniform() {
        return Err(Error::Domain(format!("vessel {}: trajectory is not uniformly sampled", traj.vessel_id)));
    }
    let dt = traj.interval_s as f64;
    let mut points = traj.points.clone();
    let mut prev_cog = None::<f64>;
    for n in 1..points.len() {
        let a = points[n - 1].position();
        let b = points[n].position();
        let dist_m = haversine_km(a, b) * 1000.0;
        points[n].sog = dist_m / dt / KNOT_MS;
        points[n].cog = if dist_m < STATIONARY_M { prev_cog.unwrap_or(0.0) } else { initial_bearing(a, b) };
        prev_cog = Some(points[n].cog);
    }
    if points.len() >= 2 {
        points[0].sog = points[1].sog;
        points[0].cog = points[1].cog;
    } else if let Some(p) = points.first_mut() {
        p.sog = 0.0;
        p.cog = 0.0;
    }
    Ok(Trajectory::new(traj.vessel_id.clone(), points, traj.interval_s))
}

/// Per-step changes of speed (knots) and course (signed degrees).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DeltaSeries {
    pub d_sog: Vec<f64>,
    pub d_cog: Vec<f64>,
}

impl DeltaSeries {
    pub fn len(&self) -> usize {
        self.d_sog.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_sog.is_empty()
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> DeltaSeries {
        DeltaSeries { d_sog: self.d_sog[range.clone()].to_vec(), d_cog: self.d_cog[range].to_vec() }
    }
}

pub fn difference(traj: &Trajectory) -> Result<DeltaSeries> {
    difference_points(&traj.points)
}

pub fn difference_points(points: &[TrajectoryPoint]) -> Result<DeltaSeries> {
    if points.len() < 2 {
        return Err(Error::TooShort { needed: 2, got: points.len() });
    }
    Ok(DeltaSeries {
        d_sog: points.windows(2).map(|w| w[1].sog - w[0].sog).collect(),
        d_cog: points.windows(2).map(|w| signed_angle_diff(w[0].cog, w[1].cog)).collect(),
    })
}

/// Z-score statistics of the two delta channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean_dsog: f64,
    pub std_dsog: f64,
    pub mean_dcog: f64,
    pub std_dcog: f64,
}

impl NormStats {
    pub const IDENTITY: NormStats = NormStats { mean_dsog: 0.0, std_dsog: 1.0, mean_dcog: 0.0, std_dcog: 1.0 };

    pub fn apply(&self, d_sog: f64, d_cog: f64) -> (f64, f64) {
        ((d_sog - self.mean_dsog) / self.std_dsog, (d_cog - self.mean_dcog) / self.std_dcog)
    }

    pub fn invert(&self, z_sog: f64, z_cog: f64) -> (f64, f64) {
        (z_sog * self.std_dsog + self.mean_dsog, z_cog * self.std_dcog + self.mean_dcog)
    }

    pub fn apply_series(&self, d: &DeltaSeries) -> DeltaSeries {
        let (d_sog, d_cog) = d.d_sog.iter().zip(&d.d_cog).map(|(&s, &c)| self.apply(s, c)).unzip();
        DeltaSeries { d_sog, d_cog }
    }

    pub fn invert_series(&self, z: &DeltaSeries) -> DeltaSeries {
        let (d_sog, d_cog) = z.d_sog.iter().zip(&z.d_cog).map(|(&s, &c)| self.invert(s, c)).unzip();
        DeltaSeries { d_sog, d_cog }
    }
}

/// Population mean and standard deviation over every value of every series.
pub fn fit_norm(train: &[DeltaSeries]) -> Result<NormStats> {
    let (mean_dsog, std_dsog) = mean_std(train.iter().flat_map(|d| d.d_sog.iter().copied()))
        .ok_or(Error::TooShort { needed: 1, got: 0 })?;
    let (mean_dcog, std_dcog) = mean_std(train.iter().flat_map(|d| d.d_cog.iter().copied()))
        .ok_or(Error::TooShort { needed: 1, got: 0 })?;
    if !(std_dsog > 0.0) {
        return Err(Error::DegenerateVariance("d_sog"));
    }
    if !(std_dcog > 0.0) {
        return Err(Error::DegenerateVariance("d_cog"));
    }
    Ok(NormStats { mean_dsog, std_dsog, mean_dcog, std_dcog })
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> Option<(f64, f64)> {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        return None;
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    Some((mean, var.sqrt()))
}
