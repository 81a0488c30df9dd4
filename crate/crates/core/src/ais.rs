//! NOAA AIS CSV ingest: parsing, anomaly cleaning and voyage segmentation.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesy::{haversine_km, wrap_360, GeoPoint};
use crate::trajectory::{parse_timestamp, Trajectory, TrajectoryPoint};

/// Heading value broadcast when the gyro is not connected.
pub const HEADING_UNAVAILABLE: f64 = 511.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawAisRecord {
    pub mmsi: String,
    pub timestamp: DateTime<Utc>,
    pub lon: f64,
    pub lat: f64,
    pub sog: f64,
    pub cog: f64,
    pub heading: f64,
    pub vessel_type: i32,
}

/// Column names of the source export.
///
/// The default matches the NOAA 2021 schema. Other exports can be read by
/// substituting their header names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub mmsi: String,
    pub timestamp: String,
    pub lat: String,
    pub lon: String,
    pub sog: String,
    pub cog: String,
    pub heading: String,
    pub vessel_type: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            mmsi: "MMSI".into(),
            timestamp: "BaseDateTime".into(),
            lat: "LAT".into(),
            lon: "LON".into(),
            sog: "SOG".into(),
            cog: "COG".into(),
            heading: "Heading".into(),
            vessel_type: "VesselType".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundingBox {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
}

impl Default for BoundingBox {
    /// Gulf of Mexico.
    fn default() -> Self {
        Self { lon_min: -98.5, lon_max: -80.0, lat_min: 17.0, lat_max: 31.0 }
    }
}

impl BoundingBox {
    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        (self.lon_min..=self.lon_max).contains(&lon) && (self.lat_min..=self.lat_max).contains(&lat)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParseOutcome {
    pub records: Vec<RawAisRecord>,
    /// Rows that could not be parsed.
    pub skipped: usize,
    /// Well-formed rows outside the bounding box.
    pub out_of_bounds: usize,
}

pub fn parse_csv(path: &Path, bbox: &BoundingBox, columns: &ColumnMap) -> Result<ParseOutcome> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_reader(file, bbox, columns)
}

pub fn parse_reader<R: std::io::Read>(reader: R, bbox: &BoundingBox, columns: &ColumnMap) -> Result<ParseOutcome> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let idx = [
        find(&columns.mmsi)?,
        find(&columns.timestamp)?,
        find(&columns.lon)?,
        find(&columns.lat)?,
        find(&columns.sog)?,
        find(&columns.cog)?,
        find(&columns.heading)?,
        find(&columns.vessel_type)?,
    ];

    let mut out = ParseOutcome { records: Vec::new(), skipped: 0, out_of_bounds: 0 };
    for row in rdr.records() {
        let Ok(row) = row else {
            out.skipped += 1;
            continue;
        };
        match parse_row(&row, &idx) {
            Some(rec) if bbox.contains(rec.lon, rec.lat) => out.records.push(rec),
            Some(_) => out.out_of_bounds += 1,
            None => out.skipped += 1,
        }
    }
    Ok(out)
}

fn parse_row(row: &csv::StringRecord, idx: &[usize; 8]) -> Option<RawAisRecord> {
    let field = |i: usize| row.get(idx[i]).map(str::trim);
    let num = |i: usize| field(i).and_then(|s| s.parse::<f64>().ok()).filter(|v| v.is_finite());
    let mmsi = field(0).filter(|s| !s.is_empty())?.to_string();
    let timestamp = parse_timestamp(field(1)?)?;
    // Vessel type is often blank in the export; unknown maps to 0.
    let vessel_type = field(7).and_then(|s| s.parse::<f64>().ok()).map_or(0, |v| v as i32);
    Some(RawAisRecord {
        mmsi,
        timestamp,
        lon: num(2)?,
        lat: num(3)?,
        sog: num(4)?,
        cog: num(5)?,
        heading: num(6)?,
        vessel_type,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleaningLimits {
    pub max_sog: f64,
    /// Vessels whose position bounding box diagonal is shorter are dropped.
    pub min_travel_km: f64,
}

impl Default for CleaningLimits {
    fn default() -> Self {
        Self { max_sog: 40.0, min_travel_km: 1.0 }
    }
}

/// Removes speed outliers, missing headings, duplicate fixes and vessels
/// that never leave port. Output is sorted by (mmsi, timestamp).
pub fn clean(records: &[RawAisRecord], limits: &CleaningLimits) -> Vec<RawAisRecord> {
    let mut kept: Vec<RawAisRecord> = records
        .iter()
        .filter(|r| r.sog >= 0.0 && r.sog <= limits.max_sog && r.heading != HEADING_UNAVAILABLE)
        .cloned()
        .collect();
    kept.sort_by(|a, b| a.mmsi.cmp(&b.mmsi).then(a.timestamp.cmp(&b.timestamp)));
    kept.dedup_by(|b, a| a.mmsi == b.mmsi && a.timestamp == b.timestamp);

    let mut extent: BTreeMap<&str, (f64, f64, f64, f64)> = BTreeMap::new();
    for r in &kept {
        let e = extent.entry(&r.mmsi).or_insert((r.lon, r.lon, r.lat, r.lat));
        e.0 = e.0.min(r.lon);
        e.1 = e.1.max(r.lon);
        e.2 = e.2.min(r.lat);
        e.3 = e.3.max(r.lat);
    }
    let stationary: HashSet<String> = extent
        .into_iter()
        .filter(|(_, (lon0, lon1, lat0, lat1))| {
            let diag = haversine_km(GeoPoint { lon: *lon0, lat: *lat0 }, GeoPoint { lon: *lon1, lat: *lat1 });
            diag < limits.min_travel_km
        })
        .map(|(id, _)| id.to_string())
        .collect();
    kept.retain(|r| !stationary.contains(&r.mmsi));
    kept
}

/// Keeps at most `cap` vessels per vessel type, chosen by a seeded shuffle.
pub fn cap_per_type(records: &[RawAisRecord], cap: usize, seed: u64) -> Vec<RawAisRecord> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let mut by_type: BTreeMap<i32, Vec<&str>> = BTreeMap::new();
    let mut seen = HashSet::new();
    for r in records {
        if seen.insert(r.mmsi.as_str()) {
            by_type.entry(r.vessel_type).or_default().push(&r.mmsi);
        }
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut keep = HashSet::new();
    for ids in by_type.values_mut() {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        keep.extend(ids.iter().take(cap).map(|s| s.to_string()));
    }
    records.iter().filter(|r| keep.contains(&r.mmsi)).cloned().collect()
}

/// Groups records into one raw trajectory per vessel, ordered by mmsi.
pub fn group_by_vessel(records: &[RawAisRecord]) -> Vec<Trajectory> {
    let mut by_vessel: BTreeMap<&str, Vec<TrajectoryPoint>> = BTreeMap::new();
    for r in records {
        by_vessel.entry(&r.mmsi).or_default().push(TrajectoryPoint {
            t: r.timestamp,
            lon: r.lon,
            lat: r.lat,
            sog: r.sog,
            cog: wrap_360(r.cog),
            heading: wrap_360(r.heading),
        });
    }
    by_vessel
        .into_iter()
        .map(|(id, mut points)| {
            points.sort_by_key(|p| p.t);
            points.dedup_by_key(|p| p.t);
            Trajectory::new(id, points, 0)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentLimits {
    pub max_gap_s: i64,
    pub min_points: usize,
    pub min_duration_s: i64,
}

impl Default for SegmentLimits {
    /// The minimum covers the longest window in use (72 encoder plus 48
    /// predicted steps at one minute).
    fn default() -> Self {
        Self { max_gap_s: 3600, min_points: 121, min_duration_s: 120 * 60 }
    }
}

/// Splits at every gap longer than `max_gap_s`, without length filtering.
pub fn split_at_gaps(traj: &Trajectory, max_gap_s: i64) -> Vec<Trajectory> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=traj.points.len() {
        let cut = i == traj.points.len() || (traj.points[i].t - traj.points[i - 1].t).num_seconds() > max_gap_s;
        if cut && i > start {
            out.push(Trajectory::new(traj.vessel_id.clone(), traj.points[start..i].to_vec(), traj.interval_s));
            start = i;
        }
    }
    out
}

pub fn segment(traj: &Trajectory, limits: &SegmentLimits) -> Vec<Trajectory> {
    split_at_gaps(traj, limits.max_gap_s)
        .into_iter()
        .filter(|s| {
            let span = match (s.points.first(), s.points.last()) {
                (Some(a), Some(b)) => (b.t - a.t).num_seconds(),
                _ => 0,
            };
            s.len() >= limits.min_points && span >= limits.min_duration_s
        })
        .collect()
}
