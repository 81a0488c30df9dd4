use chrono::{DateTime, Duration, Utc};
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::{difference_points, DeltaSeries, NormStats};
use crate::error::{Error, Result};
use crate::trajectory::{Trajectory, TrajectoryPoint};

/// Window geometry, in steps of `interval_s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub enc_len: usize,
    pub label_len: usize,
    pub pred_len: usize,
    pub interval_s: i64,
    pub stride: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { enc_len: 72, label_len: 48, pred_len: 24, interval_s: 60, stride: 1 }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.enc_len == 0 || self.label_len == 0 || self.pred_len == 0 || self.stride == 0 {
            return Err(Error::Config("window lengths and stride must be positive".into()));
        }
        if self.label_len > self.enc_len {
            return Err(Error::Config(format!(
                "label_len {} exceeds enc_len {}",
                self.label_len, self.enc_len
            )));
        }
        if self.interval_s <= 0 {
            return Err(Error::Config("interval_s must be positive".into()));
        }
        Ok(())
    }

    pub fn dec_len(&self) -> usize {
        self.label_len + self.pred_len
    }

    /// Points spanned by one window: encoder deltas plus future deltas,
    /// plus the point the first delta starts from.
    pub fn window_points(&self) -> usize {
        self.enc_len + self.pred_len + 1
    }
}

/// Number of windows a series of `n_deltas` deltas yields.
pub fn window_count(n_deltas: usize, enc_len: usize, pred_len: usize, stride: usize) -> usize {
    let span = enc_len + pred_len;
    if n_deltas < span {
        0
    } else {
        (n_deltas - span) / stride + 1
    }
}

/// One training window.
///
/// A window starting at delta index `s` covers points `p[s] ..= p[s+enc+pred]`.
/// Encoder row `j` is the delta from `p[s+j]` to `p[s+j+1]` and carries that
/// second point's timestamp, so the last encoder row lands on the prediction
/// point `p[s+enc]`. Targets are the positions of the following `pred_len`
/// points.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub vessel_id: String,
    /// Delta index of the first encoder row within the source trajectory.
    pub start: usize,
    pub spec: DatasetSpec,
    pub points: Vec<TrajectoryPoint>,
    /// `enc_len x 2` normalized (d_sog, d_cog).
    pub x_enc: Array2<f64>,
    /// `(label_len + pred_len) x 2`; the trailing rows are zero.
    pub x_dec: Array2<f64>,
    /// `(enc_len + pred_len) x 2` raw deltas, encoder rows then future rows.
    pub raw_deltas: Array2<f64>,
    /// `pred_len x 2` true (lon, lat).
    pub y: Array2<f64>,
    /// (lon, lat, sog, cog) of the prediction point.
    pub pred_point: [f64; 4],
}

impl Sample {
    pub fn new(vessel_id: &str, start: usize, points: Vec<TrajectoryPoint>, spec: DatasetSpec, stats: &NormStats) -> Result<Self> {
        if points.len() != spec.window_points() {
            return Err(Error::Shape(format!(
                "window needs {} points, got {}",
                spec.window_points(),
                points.len()
            )));
        }
        let deltas = difference_points(&points)?;
        let (enc, label, pred) = (spec.enc_len, spec.label_len, spec.pred_len);

        let mut raw_deltas = Array2::zeros((enc + pred, 2));
        let mut normed = Array2::zeros((enc, 2));
        for i in 0..enc + pred {
            raw_deltas[[i, 0]] = deltas.d_sog[i];
            raw_deltas[[i, 1]] = deltas.d_cog[i];
            if i < enc {
                let (a, b) = stats.apply(deltas.d_sog[i], deltas.d_cog[i]);
                normed[[i, 0]] = a;
                normed[[i, 1]] = b;
            }
        }
        let mut x_dec = Array2::zeros((label + pred, 2));
        x_dec.slice_mut(s![..label, ..]).assign(&normed.slice(s![enc - label.., ..]));

        let mut y = Array2::zeros((pred, 2));
        for i in 0..pred {
            let p = &points[enc + 1 + i];
            y[[i, 0]] = p.lon;
            y[[i, 1]] = p.lat;
        }
        let pp = &points[enc];
        Ok(Self {
            vessel_id: vessel_id.to_string(),
            start,
            spec,
            pred_point: [pp.lon, pp.lat, pp.sog, pp.cog],
            points,
            x_enc: normed,
            x_dec,
            raw_deltas,
            y,
        })
    }

    /// Timestamps of the encoder rows.
    pub fn enc_times(&self) -> Vec<DateTime<Utc>> {
        self.points[1..=self.spec.enc_len].iter().map(|p| p.t).collect()
    }

    /// Timestamps of the decoder rows: the label span then the horizon.
    pub fn dec_times(&self) -> Vec<DateTime<Utc>> {
        let first = self.spec.enc_len - self.spec.label_len + 1;
        self.points[first..].iter().map(|p| p.t).collect()
    }

    /// Timestamps of the predicted positions.
    pub fn target_times(&self) -> Vec<DateTime<Utc>> {
        self.points[self.spec.enc_len + 1..].iter().map(|p| p.t).collect()
    }

    /// Point pair that encoder row `j` was differenced from.
    pub fn enc_pair(&self, j: usize) -> (&TrajectoryPoint, &TrajectoryPoint) {
        (&self.points[j], &self.points[j + 1])
    }

    /// Point pair behind decoder label row `j`.
    pub fn dec_pair(&self, j: usize) -> (&TrajectoryPoint, &TrajectoryPoint) {
        self.enc_pair(self.spec.enc_len - self.spec.label_len + j)
    }

    pub fn future_deltas(&self) -> DeltaSeries {
        let tail = self.raw_deltas.slice(s![self.spec.enc_len.., ..]);
        DeltaSeries { d_sog: tail.column(0).to_vec(), d_cog: tail.column(1).to_vec() }
    }

    pub fn prediction_time(&self) -> DateTime<Utc> {
        self.points[self.spec.enc_len].t
    }

    pub fn step(&self) -> Duration {
        Duration::seconds(self.spec.interval_s)
    }

    /// Mean absolute (d_sog, d_cog) over the whole window.
    pub fn mean_abs_deltas(&self) -> (f64, f64) {
        let n = self.raw_deltas.nrows() as f64;
        let s = self.raw_deltas.column(0).iter().map(|v| v.abs()).sum::<f64>() / n;
        let c = self.raw_deltas.column(1).iter().map(|v| v.abs()).sum::<f64>() / n;
        (s, c)
    }
}

/// Cuts a uniform trajectory into windows at the spec's stride.
///
/// `deltas` must be `difference(traj)`; it is used only to check lengths.
pub fn make_windows(traj: &Trajectory, deltas: &DeltaSeries, spec: &DatasetSpec, stats: &NormStats) -> Result<Vec<Sample>> {
    spec.validate()?;
    if traj.interval_s != spec.interval_s {
        return Err(Error::Domain(format!(
            "vessel {}: sampled at {} s, spec wants {} s",
            traj.vessel_id, traj.interval_s, spec.interval_s
        )));
    }
    if deltas.len() + 1 != traj.len() {
        return Err(Error::Shape(format!("{} deltas for {} points", deltas.len(), traj.len())));
    }
    let count = window_count(deltas.len(), spec.enc_len, spec.pred_len, spec.stride);
    (0..count)
        .map(|w| {
            let s = w * spec.stride;
            Sample::new(&traj.vessel_id, s, traj.points[s..s + spec.window_points()].to_vec(), *spec, stats)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CornerMode {
    /// Both channel means must exceed their thresholds.
    #[default]
    And,
    /// Either channel suffices.
    Or,
}

/// Differences at the level of floating-point noise do not count as
/// exceeding a threshold.
const CORNER_MARGIN: f64 = 1e-9;

/// Dataset-wide means of the per-window mean |d_sog| and mean |d_cog|.
pub fn corner_thresholds<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> (f64, f64) {
    let (mut n, mut s, mut c) = (0usize, 0.0, 0.0);
    for sample in samples {
        let (a, b) = sample.mean_abs_deltas();
        n += 1;
        s += a;
        c += b;
    }
    if n == 0 {
        (0.0, 0.0)
    } else {
        (s / n as f64, c / n as f64)
    }
}

/// Indices of the samples whose window means exceed the thresholds.
pub fn corner_filter(samples: &[Sample], thresholds: (f64, f64), mode: CornerMode) -> Vec<usize> {
    samples
        .iter()
        .enumerate()
        .filter(|(_, sample)| {
            let (s, c) = sample.mean_abs_deltas();
            let hs = s > thresholds.0 + CORNER_MARGIN;
            let hc = c > thresholds.1 + CORNER_MARGIN;
            match mode {
                CornerMode::And => hs && hc,
                CornerMode::Or => hs || hc,
            }
        })
        .map(|(i, _)| i)
        .collect()
}
