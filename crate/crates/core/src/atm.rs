//! Augmented trajectory matrices.
//!
//! Each matrix is a north-up grid centred on the current position: row 0
//! is the northern edge and column 0 the western edge. It marks the
//! current position, one cell in the bow direction, a short speed trail
//! behind the vessel along its course, and a Gaussian bump where the next
//! fix lies.

use std::fmt::Write as _;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesy::{haversine_km, GeoPoint};
use crate::preprocess::Sample;
use crate::trajectory::TrajectoryPoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadingSource {
    /// Bow marker from the reported heading.
    #[default]
    Heading,
    /// Bow marker from the course over ground.
    Cog,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AtmConfig {
    pub size: usize,
    pub center_weight: f64,
    pub heading_weight: f64,
    pub speed_weight: f64,
    pub sog_line: usize,
    pub grid_km: f64,
    pub gaussian_size: usize,
    pub gaussian_sigma: f64,
    /// Fraction of window steps that get a matrix.
    pub proportion: f64,
    pub heading_source: HeadingSource,
    /// Speeds above this are clipped before weighting, in knots.
    pub max_sog: f64,
}

impl Default for AtmConfig {
    fn default() -> Self {
        Self {
            size: 33,
            center_weight: 0.8,
            heading_weight: 0.2,
            speed_weight: 0.02,
            sog_line: 3,
            grid_km: 0.25,
            gaussian_size: 5,
            gaussian_sigma: 1.0,
            proportion: 0.25,
            heading_source: HeadingSource::Heading,
            max_sog: 50.0,
        }
    }
}

impl AtmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size % 2 == 0 || self.size < 2 * self.sog_line + 3 {
            return Err(Error::Config(format!("ATM size {} must be odd and >= 2*sog_line+3", self.size)));
        }
        if self.gaussian_size % 2 == 0 {
            return Err(Error::Config("gaussian_size must be odd".into()));
        }
        if !(self.grid_km > 0.0) || !(self.gaussian_sigma > 0.0) {
            return Err(Error::Config("grid_km and gaussian_sigma must be positive".into()));
        }
        if !(self.proportion > 0.0 && self.proportion <= 1.0) {
            return Err(Error::Config(format!("ATM proportion {} outside (0, 1]", self.proportion)));
        }
        Ok(())
    }

    pub fn center(&self) -> usize {
        (self.size - 1) / 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atm {
    pub cells: Array2<f64>,
    /// Number of marker positions that fell outside and were clamped.
    pub clamped: usize,
}

impl Atm {
    pub fn center(&self) -> (usize, usize) {
        let c = (self.cells.nrows() - 1) / 2;
        (c, c)
    }
}

struct Canvas<'a> {
    cells: Array2<f64>,
    center: i64,
    clamped: usize,
    cfg: &'a AtmConfig,
}

impl Canvas<'_> {
    /// Cell at `center + offset`, with fractional offsets rounded half away
    /// from the centre, clamped into the grid.
    fn locate(&mut self, d_row: f64, d_col: f64) -> (usize, usize) {
        let max = self.cfg.size as i64 - 1;
        let mut clamp = |v: i64| {
            if v < 0 || v > max {
                self.clamped += 1;
            }
            v.clamp(0, max) as usize
        };
        let r = clamp(self.center + d_row.round() as i64);
        let c = clamp(self.center + d_col.round() as i64);
        (r, c)
    }
}

pub fn build_atm(p: &TrajectoryPoint, next: &TrajectoryPoint, cfg: &AtmConfig) -> Atm {
    let size = cfg.size;
    let c = cfg.center() as i64;
    let mut cv = Canvas { cells: Array2::zeros((size, size)), center: c, clamped: 0, cfg };
    cv.cells[[c as usize, c as usize]] = cfg.center_weight;

    let bow = match cfg.heading_source {
        HeadingSource::Heading => p.heading,
        HeadingSource::Cog => p.cog,
    }
    .to_radians();
    let cell = cv.locate(-bow.cos(), bow.sin());
    cv.cells[cell] = cv.cells[cell].max(cfg.heading_weight);

    let course = p.cog.to_radians();
    let trail = cfg.speed_weight * p.sog.clamp(0.0, cfg.max_sog);
    for a in 1..=cfg.sog_line {
        let a = a as f64;
        let cell = cv.locate(a * course.cos(), -a * course.sin());
        cv.cells[cell] = cv.cells[cell].max(trail);
    }

    let dis_x = haversine_km(GeoPoint { lon: p.lon, lat: next.lat }, GeoPoint { lon: p.lon, lat: p.lat });
    let dis_y = haversine_km(GeoPoint { lon: next.lon, lat: p.lat }, GeoPoint { lon: p.lon, lat: p.lat });
    let sign = |v: f64| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
    let d_row = -sign(next.lat - p.lat) * dis_x / cfg.grid_km;
    let d_col = sign(next.lon - p.lon) * dis_y / cfg.grid_km;
    let (nr, nc) = cv.locate(d_row, d_col);

    let half = (cfg.gaussian_size / 2) as i64;
    let two_var = 2.0 * cfg.gaussian_sigma * cfg.gaussian_sigma;
    for dr in -half..=half {
        for dc in -half..=half {
            let (r, col) = (nr as i64 + dr, nc as i64 + dc);
            if r < 0 || col < 0 || r >= size as i64 || col >= size as i64 {
                continue;
            }
            let v = (-((dr * dr + dc * dc) as f64) / two_var).exp();
            let cell = &mut cv.cells[[r as usize, col as usize]];
            *cell = cell.max(v);
        }
    }
    Atm { cells: cv.cells, clamped: cv.clamped }
}

/// Evenly spaced step indices that receive a matrix.
///
/// `ceil(len * proportion)` indices from 0 at spacing `round(1/proportion)`.
/// When that spacing would run past the end, indices fall back to
/// `floor(k * len / count)`.
pub fn select_atm_steps(len: usize, proportion: f64) -> Vec<usize> {
    if len == 0 {
        return Vec::new();
    }
    // The tolerance keeps products such as 0.3 * 10 from rounding up a step.
    let count = ((len as f64 * proportion - 1e-9).ceil() as usize).clamp(1, len);
    let spacing = ((1.0 / proportion).round() as usize).max(1);
    if (count - 1) * spacing < len {
        (0..count).map(|k| k * spacing).collect()
    } else {
        (0..count).map(|k| k * len / count).collect()
    }
}

/// One matrix per `(p[n], p[n+1])` pair, stacked as `depth x size x size`.
pub fn build_atm_stack<'a>(
    pairs: impl IntoIterator<Item = (&'a TrajectoryPoint, &'a TrajectoryPoint)>,
    cfg: &AtmConfig,
) -> Array3<f64> {
    let mats: Vec<Atm> = pairs.into_iter().map(|(a, b)| build_atm(a, b, cfg)).collect();
    let mut out = Array3::zeros((mats.len(), cfg.size, cfg.size));
    for (i, m) in mats.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(&m.cells);
    }
    out
}

/// Stack over a point window, one matrix per selected step.
pub fn window_atm_stack(points: &[TrajectoryPoint], cfg: &AtmConfig) -> Result<Array3<f64>> {
    if points.len() < 2 {
        return Err(Error::TooShort { needed: 2, got: points.len() });
    }
    let steps = select_atm_steps(points.len() - 1, cfg.proportion);
    Ok(build_atm_stack(steps.iter().map(|&n| (&points[n], &points[n + 1])), cfg))
}

/// Encoder stack over the encoder rows and decoder stack over the label rows.
pub fn sample_atm_stacks(sample: &Sample, cfg: &AtmConfig) -> (Array3<f64>, Array3<f64>) {
    let enc = select_atm_steps(sample.spec.enc_len, cfg.proportion);
    let dec = select_atm_steps(sample.spec.label_len, cfg.proportion);
    (
        build_atm_stack(enc.iter().map(|&j| sample.enc_pair(j)), cfg),
        build_atm_stack(dec.iter().map(|&j| sample.dec_pair(j)), cfg),
    )
}

/// Renders a matrix as CSV, one grid row per line, shortest round-trip floats.
pub fn atm_to_csv(cells: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in cells.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(out, "{}", line.join(","));
    }
    out
}

pub fn atm_from_csv(text: &str) -> Result<Array2<f64>> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Format(format!("bad ATM cell {v:?}"))))
                .collect()
        })
        .collect::<Result<_>>()?;
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Shape("ATM grid must be square".into()));
    }
    Ok(Array2::from_shape_vec((n, n), rows.concat()).expect("square grid"))
}
