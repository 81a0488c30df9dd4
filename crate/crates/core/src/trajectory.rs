//! Trajectory types and the per-vessel trajectory store.
//!
//! Store layout: one UTF-8 text file per vessel named `<vessel_id>.csv`
//! with header `vessel_id,timestamp,lon,lat,sog,cog,heading`. Timestamps
//! are UTC `YYYY-MM-DDTHH:MM:SS`; floats are written in shortest
//! round-trip form so a read after write is exact.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesy::GeoPoint;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";
const STORE_HEADER: [&str; 7] = ["vessel_id", "timestamp", "lon", "lat", "sog", "cog", "heading"];

/// One kinematic AIS fix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: DateTime<Utc>,
    pub lon: f64,
    pub lat: f64,
    /// Knots.
    pub sog: f64,
    /// Degrees in [0, 360).
    pub cog: f64,
    /// Degrees in [0, 360).
    pub heading: f64,
}

impl TrajectoryPoint {
    pub fn position(&self) -> GeoPoint {
        GeoPoint { lon: self.lon, lat: self.lat }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub vessel_id: String,
    pub points: Vec<TrajectoryPoint>,
    /// Uniform spacing in seconds, or 0 for raw irregular data.
    pub interval_s: i64,
}

impl Trajectory {
    pub fn new(vessel_id: impl Into<String>, points: Vec<TrajectoryPoint>, interval_s: i64) -> Self {
        Self { vessel_id: vessel_id.into(), points, interval_s }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.points.windows(2).all(|w| w[0].t < w[1].t)
    }

    pub fn is_uniform(&self) -> bool {
        self.interval_s > 0
            && self.points.windows(2).all(|w| (w[1].t - w[0].t).num_seconds() == self.interval_s)
    }
}

pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim().trim_end_matches('Z');
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT).ok().map(|n| n.and_utc())
}

pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.format(TIMESTAMP_FORMAT).to_string()
}

fn store_file_name(vessel_id: &str) -> String {
    let safe: String = vessel_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}.csv")
}

/// Writes one trajectory in the store's columnar format.
pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut buf = Vec::with_capacity(traj.len() * 80);
    writeln!(buf, "{}", STORE_HEADER.join(",")).expect("write to Vec");
    for p in &traj.points {
        writeln!(
            buf,
            "{},{},{},{},{},{},{}",
            traj.vessel_id,
            format_timestamp(&p.t),
            p.lon,
            p.lat,
            p.sog,
            p.cog,
            p.heading
        )
        .expect("write to Vec");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    for (i, name) in STORE_HEADER.iter().enumerate() {
        if headers.get(i) != Some(*name) {
            return Err(Error::MissingColumn((*name).to_string()));
        }
    }
    let mut vessel_id = String::new();
    let mut points = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let bad = || Error::Format(format!("{}: bad row {}", path.display(), line + 2));
        if vessel_id.is_empty() {
            vessel_id = rec[0].to_string();
        }
        let t = parse_timestamp(&rec[1]).ok_or_else(bad)?;
        let num = |i: usize| rec[i].trim().parse::<f64>().map_err(|_| bad());
        points.push(TrajectoryPoint {
            t,
            lon: num(2)?,
            lat: num(3)?,
            sog: num(4)?,
            cog: num(5)?,
            heading: num(6)?,
        });
    }
    let interval_s = uniform_interval(&points);
    Ok(Trajectory { vessel_id, points, interval_s })
}

fn uniform_interval(points: &[TrajectoryPoint]) -> i64 {
    if points.len() < 2 {
        return 0;
    }
    let dt = (points[1].t - points[0].t).num_seconds();
    if dt > 0 && points.windows(2).all(|w| (w[1].t - w[0].t).num_seconds() == dt) {
        dt
    } else {
        0
    }
}

/// Writes every trajectory into `dir`, one file per vessel.
///
/// Trajectories sharing a vessel id are concatenated into the same file.
pub fn write_store(dir: &Path, trajs: &[Trajectory]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut by_vessel: std::collections::BTreeMap<&str, Vec<TrajectoryPoint>> = Default::default();
    for t in trajs {
        by_vessel.entry(&t.vessel_id).or_default().extend_from_slice(&t.points);
    }
    let mut written = Vec::new();
    for (id, mut points) in by_vessel {
        points.sort_by_key(|p| p.t);
        let interval_s = uniform_interval(&points);
        let path = dir.join(store_file_name(id));
        write_trajectory(&path, &Trajectory::new(id, points, interval_s))?;
        written.push(path);
    }
    Ok(written)
}

/// Reads every `*.csv` file in `dir`, sorted by file name.
pub fn read_store(dir: &Path) -> Result<Vec<Trajectory>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    files.iter().map(|p| read_trajectory(p)).collect()
}
