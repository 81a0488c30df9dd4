//! Training losses.
//!
//! The knowledge loss turns predicted deltas back into absolute speed and
//! course, rolls positions forward through the motion model and scores the
//! mean great-circle distance to the true track in kilometres. Every step is
//! recorded on the tape so the network receives gradients through the
//! geometry. Plain `f64` versions of the same pipeline are used for
//! evaluation.

use std::f64::consts::PI;

use crate::autodiff::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::geodesy::{haversine_km, propagate, wrap_360, GeoPoint, KNOT_MS, WGS84};
use crate::preprocess::{DeltaSeries, NormStats, Sample};

/// Keeps the haversine square root differentiable when a prediction is exact.
const SQRT_EPS: f64 = 1e-30;

/// Everything the loss needs about one window besides the network output.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTarget {
    pub origin: GeoPoint,
    pub sog0: f64,
    pub cog0: f64,
    /// `pred_len x 2` true (lon, lat).
    pub truth: Mat,
    pub stats: NormStats,
    pub interval_s: f64,
    /// When false the first predicted delta is ignored.
    pub correction: bool,
}

impl LossTarget {
    pub fn from_sample(sample: &Sample, stats: &NormStats, correction: bool) -> Self {
        let [lon, lat, sog, cog] = sample.pred_point;
        Self {
            origin: GeoPoint { lon, lat },
            sog0: sog,
            cog0: cog,
            truth: sample.y.clone(),
            stats: *stats,
            interval_s: sample.spec.interval_s as f64,
            correction,
        }
    }

    pub fn pred_len(&self) -> usize {
        self.truth.nrows()
    }
}

/// Absolute states and positions recovered from predicted deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveredTrack {
    pub sog: Vec<f64>,
    pub cog: Vec<f64>,
    pub lon: Vec<f64>,
    pub lat: Vec<f64>,
}

impl RecoveredTrack {
    pub fn positions(&self) -> Mat {
        Mat::from_shape_fn((self.lon.len(), 2), |(i, c)| if c == 0 { self.lon[i] } else { self.lat[i] })
    }
}

/// Cumulative speed and course from the prediction point.
///
/// Speed is floored at zero after summing; course is wrapped into [0, 360)
/// after every step. Without correction the first delta is skipped.
pub fn recover_states(deltas: &DeltaSeries, sog0: f64, cog0: f64, correction: bool) -> (Vec<f64>, Vec<f64>) {
    let mut s = sog0;
    let mut c = cog0;
    let mut sog = Vec::with_capacity(deltas.len());
    let mut cog = Vec::with_capacity(deltas.len());
    for (i, (&ds, &dc)) in deltas.d_sog.iter().zip(&deltas.d_cog).enumerate() {
        if correction || i > 0 {
            s += ds;
            c = wrap_360(c + dc);
        }
        sog.push(s.max(0.0));
        cog.push(wrap_360(c));
    }
    (sog, cog)
}

/// Positions reached by holding each recovered state for one interval.
pub fn rollout(sog: &[f64], cog: &[f64], origin: GeoPoint, interval_s: f64) -> Result<Vec<GeoPoint>> {
    if sog.len() != cog.len() {
        return Err(Error::Shape(format!("{} speeds for {} courses", sog.len(), cog.len())));
    }
    let mut at = origin;
    let mut out = Vec::with_capacity(sog.len());
    for (&s, &c) in sog.iter().zip(cog) {
        at = propagate(at, s, c, interval_s)?;
        out.push(at);
    }
    Ok(out)
}

/// Rollout that starts from the prediction point's own speed and course.
pub fn no_correction_rollout(deltas: &DeltaSeries, origin: GeoPoint, sog0: f64, cog0: f64, interval_s: f64) -> Result<Vec<GeoPoint>> {
    let (sog, cog) = recover_states(deltas, sog0, cog0, false);
    rollout(&sog, &cog, origin, interval_s)
}

fn denormalize(z: &Mat, stats: &NormStats) -> Result<DeltaSeries> {
    if z.ncols() != 2 {
        return Err(Error::Shape(format!("deltas need 2 columns, got {}", z.ncols())));
    }
    let (d_sog, d_cog) = z.rows().into_iter().map(|r| stats.invert(r[0], r[1])).unzip();
    Ok(DeltaSeries { d_sog, d_cog })
}

/// Track implied by normalized network output.
pub fn predict_track(z: &Mat, target: &LossTarget) -> Result<RecoveredTrack> {
    let deltas = denormalize(z, &target.stats)?;
    let (sog, cog) = recover_states(&deltas, target.sog0, target.cog0, target.correction);
    let pts = rollout(&sog, &cog, target.origin, target.interval_s)?;
    Ok(RecoveredTrack {
        lon: pts.iter().map(|p| p.lon).collect(),
        lat: pts.iter().map(|p| p.lat).collect(),
        sog,
        cog,
    })
}

/// Mean haversine distance in km, radius at the predicted latitude.
pub fn mean_distance_km(pred: &Mat, truth: &Mat) -> Result<f64> {
    if pred.dim() != truth.dim() || pred.ncols() != 2 {
        return Err(Error::Shape(format!("prediction {:?} vs truth {:?}", pred.dim(), truth.dim())));
    }
    let n = pred.nrows();
    let total: f64 = (0..n)
        .map(|i| {
            haversine_km(
                GeoPoint { lon: pred[[i, 0]], lat: pred[[i, 1]] },
                GeoPoint { lon: truth[[i, 0]], lat: truth[[i, 1]] },
            )
        })
        .sum();
    Ok(total / n as f64)
}

/// Knowledge loss without a tape.
pub fn knowledge_loss_value(z: &Mat, target: &LossTarget) -> Result<f64> {
    let track = predict_track(z, target)?;
    mean_distance_km(&track.positions(), &target.truth)
}

/// Mean squared error over normalized deltas.
pub fn plain_loss_value(z: &Mat, truth: &Mat) -> Result<f64> {
    if z.dim() != truth.dim() {
        return Err(Error::Shape(format!("prediction {:?} vs truth {:?}", z.dim(), truth.dim())));
    }
    Ok((z - truth).mapv(|e| e * e).mean().unwrap_or(0.0))
}

pub fn plain_loss(g: &mut Graph, z: Var, truth: &Mat) -> Result<Var> {
    if g.shape(z) != truth.dim() {
        return Err(Error::Shape(format!("prediction {:?} vs truth {:?}", g.shape(z), truth.dim())));
    }
    let t = g.constant(truth.clone());
    let e = g.sub(z, t);
    let sq = g.mul(e, e);
    Ok(g.mean(sq))
}

/// Normalized true future deltas of a window, the plain loss target.
pub fn normalized_future(sample: &Sample, stats: &NormStats) -> Mat {
    let f = stats.apply_series(&sample.future_deltas());
    Mat::from_shape_fn((f.len(), 2), |(i, c)| if c == 0 { f.d_sog[i] } else { f.d_cog[i] })
}

/// Geocentric radius, elementwise over a column of latitudes in radians.
fn radius_tape(g: &mut Graph, lat: Var) -> Var {
    let a2 = WGS84.equatorial_radius_m.powi(2);
    let b2 = WGS84.polar_radius_m.powi(2);
    let c = g.cos(lat);
    let s = g.sin(lat);
    let c2 = g.mul(c, c);
    let s2 = g.mul(s, s);
    let n1 = g.scale(c2, a2 * a2);
    let n2 = g.scale(s2, b2 * b2);
    let num = g.add(n1, n2);
    let d1 = g.scale(c2, a2);
    let d2 = g.scale(s2, b2);
    let den = g.add(d1, d2);
    let q = g.div(num, den);
    g.sqrt(q)
}

/// Recovered (sog, cog) columns on the tape.
fn recover_tape(g: &mut Graph, z: Var, t: &LossTarget) -> (Var, Var) {
    let n = t.pred_len();
    let std = g.constant(Mat::from_shape_vec((1, 2), vec![t.stats.std_dsog, t.stats.std_dcog]).expect("1x2"));
    let mean = g.constant(Mat::from_shape_vec((1, 2), vec![t.stats.mean_dsog, t.stats.mean_dcog]).expect("1x2"));
    let d = g.mul_row(z, std);
    let d = g.add_row(d, mean);
    let first = usize::from(!t.correction);
    let tri = g.constant(Mat::from_shape_fn((n, n), |(i, j)| if j <= i && j >= first { 1.0 } else { 0.0 }));
    let cum = g.matmul(tri, d);
    let start = Mat::from_shape_fn((n, 2), |(_, c)| if c == 0 { t.sog0 } else { t.cog0 });
    let states = g.shift(cum, &start);
    let s = g.slice_cols(states, 0, 1);
    let sog = g.relu(s);
    let c = g.slice_cols(states, 1, 1);
    // The wrap is a constant shift, so its gradient is the identity.
    let wrap = g.value(c).mapv(|v| wrap_360(v) - v);
    let cog = g.shift(c, &wrap);
    (sog, cog)
}

/// Differentiable knowledge loss for one window, in km.
pub fn knowledge_loss(g: &mut Graph, z: Var, t: &LossTarget) -> Result<Var> {
    let n = t.pred_len();
    if g.shape(z) != (n, 2) {
        return Err(Error::Shape(format!("prediction {:?}, expected ({n}, 2)", g.shape(z))));
    }
    let (sog, cog) = recover_tape(g, z, t);
    let mut lat = g.scalar_constant(t.origin.lat.to_radians());
    let mut lon = g.scalar_constant(t.origin.lon.to_radians());
    let mut lats = Vec::with_capacity(n);
    let mut lons = Vec::with_capacity(n);
    for i in 0..n {
        let s = g.slice_rows(sog, i, 1);
        let c = g.slice_rows(cog, i, 1);
        let course = g.scale(c, PI / 180.0);
        let dist = g.scale(s, KNOT_MS * t.interval_s);
        let r = radius_tape(g, lat);
        let delta = g.div(dist, r);
        let (sin_lat, cos_lat) = (g.sin(lat), g.cos(lat));
        let (sin_d, cos_d) = (g.sin(delta), g.cos(delta));
        let (sin_c, cos_c) = (g.sin(course), g.cos(course));
        let a = g.mul(sin_lat, cos_d);
        let b = g.mul(cos_lat, sin_d);
        let b = g.mul(b, cos_c);
        let sin_lat2 = g.add(a, b);
        let lat2 = g.asin(sin_lat2);
        let y = g.mul(sin_c, sin_d);
        let y = g.mul(y, cos_lat);
        let x = g.mul(sin_lat, sin_lat2);
        let x = g.sub(cos_d, x);
        let dlon = g.atan2(y, x);
        lon = g.add(lon, dlon);
        lat = lat2;
        lats.push(lat);
        lons.push(lon);
    }
    let lat_p = g.concat_rows(&lats);
    let lon_p = g.concat_rows(&lons);
    let true_lat = t.truth.column(1).mapv(f64::to_radians).insert_axis(ndarray::Axis(1));
    let true_lon = t.truth.column(0).mapv(f64::to_radians).insert_axis(ndarray::Axis(1));

    let tl = g.constant(true_lat.clone());
    let dlat = g.sub(tl, lat_p);
    let half = g.scale(dlat, 0.5);
    let sh = g.sin(half);
    let term1 = g.mul(sh, sh);
    let tn = g.constant(true_lon);
    let dlon = g.sub(tn, lon_p);
    let half = g.scale(dlon, 0.5);
    let sh = g.sin(half);
    let sq = g.mul(sh, sh);
    let cos_p = g.cos(lat_p);
    let term2 = g.mul(cos_p, sq);
    let term2 = g.mul_const(term2, true_lat.mapv(f64::cos));
    let h = g.add(term1, term2);
    let h = g.shift_scalar(h, SQRT_EPS);
    let root = g.sqrt(h);
    let arc = g.asin(root);
    let r = radius_tape(g, lat_p);
    let d = g.mul(r, arc);
    let d = g.scale(d, 2.0 / 1000.0);
    Ok(g.mean(d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use crate::preprocess::difference_points;
    use crate::trajectory::TrajectoryPoint;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn track(origin: GeoPoint, sog: &[f64], cog: &[f64], dt: f64) -> Vec<GeoPoint> {
        rollout(sog, cog, origin, dt).unwrap()
    }

    fn target_for(origin: GeoPoint, sog0: f64, cog0: f64, truth: &[GeoPoint], stats: NormStats) -> LossTarget {
        LossTarget {
            origin,
            sog0,
            cog0,
            truth: Mat::from_shape_fn((truth.len(), 2), |(i, c)| if c == 0 { truth[i].lon } else { truth[i].lat }),
            stats,
            interval_s: 60.0,
            correction: true,
        }
    }

    fn normalized(d: &DeltaSeries, stats: &NormStats) -> Mat {
        let z = stats.apply_series(d);
        Mat::from_shape_fn((z.len(), 2), |(i, c)| if c == 0 { z.d_sog[i] } else { z.d_cog[i] })
    }

    #[test]
    fn recover_examples() {
        let zero = DeltaSeries { d_sog: vec![0.0; 3], d_cog: vec![0.0; 3] };
        assert_eq!(recover_states(&zero, 7.0, 33.0, true), (vec![7.0; 3], vec![33.0; 3]));
        let wrap = DeltaSeries { d_sog: vec![0.0], d_cog: vec![-15.0] };
        assert_eq!(recover_states(&wrap, 1.0, 5.0, true).1, vec![350.0]);
        let d = DeltaSeries { d_sog: vec![1.0, 1.0], d_cog: vec![10.0, 10.0] };
        let (s, c) = recover_states(&d, 5.0, 350.0, true);
        assert_eq!(s, vec![6.0, 7.0]);
        assert_abs_diff_eq!(c[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c[1], 10.0, epsilon = 1e-12);
        let neg = DeltaSeries { d_sog: vec![-8.0], d_cog: vec![0.0] };
        assert_eq!(recover_states(&neg, 5.0, 0.0, true).0, vec![0.0]);
    }

    #[test]
    fn rollout_examples() {
        let o = GeoPoint { lon: 0.0, lat: 0.0 };
        assert!(track(o, &[0.0; 3], &[90.0; 3], 60.0).iter().all(|&p| p == o));
        assert_eq!(track(o, &[10.0], &[0.0], 60.0)[0], propagate(o, 10.0, 0.0, 60.0).unwrap());
        let two = track(o, &[10.0, 12.0], &[90.0, 0.0], 60.0);
        let mid = propagate(o, 10.0, 90.0, 60.0).unwrap();
        assert_eq!(two[1], propagate(mid, 12.0, 0.0, 60.0).unwrap());
    }

    #[test]
    fn no_correction_skips_first_delta() {
        let o = GeoPoint { lon: -90.0, lat: 25.0 };
        let zero = DeltaSeries { d_sog: vec![0.0; 3], d_cog: vec![0.0; 3] };
        let (s, c) = recover_states(&zero, 8.0, 45.0, true);
        assert_eq!(no_correction_rollout(&zero, o, 8.0, 45.0, 60.0).unwrap(), rollout(&s, &c, o, 60.0).unwrap());
        let d = DeltaSeries { d_sog: vec![2.0, 0.0, 0.0], d_cog: vec![0.0; 3] };
        let a = no_correction_rollout(&d, o, 8.0, 45.0, 60.0).unwrap();
        let b = rollout(&recover_states(&d, 8.0, 45.0, true).0, &[45.0; 3], o, 60.0).unwrap();
        assert_eq!(a[0], propagate(o, 8.0, 45.0, 60.0).unwrap());
        assert_eq!(b[0], propagate(o, 10.0, 45.0, 60.0).unwrap());
        let gap: Vec<f64> = (0..3).map(|i| haversine_km(a[i], b[i])).collect();
        assert!(gap[0] > 0.0 && gap[1] > gap[0] && gap[2] > gap[1]);
    }

    fn constant_velocity_fixture() -> (LossTarget, Mat) {
        let o = GeoPoint { lon: -88.0, lat: 27.0 };
        let sog = [10.0, 10.5, 11.0, 11.5];
        let cog = [30.0, 33.0, 36.0, 39.0];
        let pts = track(o, &sog, &cog, 60.0);
        let stats = NormStats { mean_dsog: 0.1, std_dsog: 0.4, mean_dcog: -0.5, std_dcog: 2.5 };
        let d = DeltaSeries { d_sog: vec![0.5; 4], d_cog: vec![3.0; 4] };
        (target_for(o, 9.5, 27.0, &pts, stats), normalized(&d, &stats))
    }

    #[test]
    fn exact_deltas_give_zero_loss() {
        let (t, z) = constant_velocity_fixture();
        assert!(knowledge_loss_value(&z, &t).unwrap() < 1e-9);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let zv = g.constant(z);
        let l = knowledge_loss(&mut g, zv, &t).unwrap();
        assert!(g.scalar(l) < 1e-6);
    }

    #[test]
    fn one_km_offset() {
        let o = GeoPoint { lon: 10.0, lat: 40.0 };
        let truth = track(o, &[12.0; 4], &[70.0; 4], 60.0);
        let moved: Vec<GeoPoint> = truth.iter().map(|&p| propagate(p, 1000.0 / (KNOT_MS * 60.0), 180.0, 60.0).unwrap()).collect();
        let t = target_for(o, 12.0, 70.0, &truth, NormStats::IDENTITY);
        let pred = Mat::from_shape_fn((4, 2), |(i, c)| if c == 0 { moved[i].lon } else { moved[i].lat });
        // the radius is taken at the predicted point; propagate used the truth's
        let got = mean_distance_km(&pred, &t.truth).unwrap();
        assert_abs_diff_eq!(got, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn tape_matches_plain() {
        let (t, z) = constant_velocity_fixture();
        let z = z.mapv(|v| v * 1.3 + 0.2);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let zv = g.constant(z.clone());
        let l = knowledge_loss(&mut g, zv, &t).unwrap();
        assert_abs_diff_eq!(g.scalar(l), knowledge_loss_value(&z, &t).unwrap(), epsilon = 1e-9);
        let nc = LossTarget { correction: false, ..t };
        let l = knowledge_loss(&mut g, zv, &nc).unwrap();
        assert_abs_diff_eq!(g.scalar(l), knowledge_loss_value(&z, &nc).unwrap(), epsilon = 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (t, z) = constant_velocity_fixture();
        let mut store = ParamStore::new();
        let id = store.add("z", z.mapv(|v| v * 0.7 - 0.3));
        crate::autodiff::tests::check_gradients(
            &store,
            |g| {
                let zv = g.param(id);
                knowledge_loss(g, zv, &t).unwrap()
            },
            1e-3,
        );
    }

    #[test]
    fn plain_loss_examples() {
        let a = Mat::from_shape_fn((4, 2), |(i, j)| (i + j) as f64);
        assert_eq!(plain_loss_value(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b[[2, 1]] += 1.0;
        assert_eq!(plain_loss_value(&a, &b).unwrap(), 1.0 / 8.0);
        assert_eq!(plain_loss_value(&b, &a).unwrap(), 1.0 / 8.0);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let av = g.constant(a.clone());
        let l = plain_loss(&mut g, av, &b).unwrap();
        assert_eq!(g.scalar(l), 1.0 / 8.0);
        assert!(plain_loss_value(&a, &Mat::zeros((3, 2))).is_err());
    }

    fn points_from(sog: &[f64], cog: &[f64]) -> Vec<TrajectoryPoint> {
        let t0 = crate::trajectory::parse_timestamp("2021-01-01T00:00:00").unwrap();
        sog.iter()
            .zip(cog)
            .enumerate()
            .map(|(i, (&s, &c))| TrajectoryPoint {
                t: t0 + chrono::Duration::minutes(i as i64),
                lon: 0.0,
                lat: 0.0,
                sog: s,
                cog: c,
                heading: c,
            })
            .collect()
    }

    proptest! {
        #[test]
        fn difference_then_recover_round_trips(
            sog in proptest::collection::vec(0.0f64..30.0, 2..40),
            cog_seed in proptest::collection::vec(0.0f64..360.0, 40),
        ) {
            let cog: Vec<f64> = cog_seed[..sog.len()].to_vec();
            let pts = points_from(&sog, &cog);
            let d = difference_points(&pts).unwrap();
            let (s, c) = recover_states(&d, sog[0], cog[0], true);
            for i in 0..d.len() {
                prop_assert!((s[i] - sog[i + 1]).abs() < 1e-9);
                let diff = (c[i] - cog[i + 1]).abs();
                prop_assert!(diff < 1e-9 || (360.0 - diff) < 1e-9);
            }
        }

        #[test]
        fn course_stays_in_range(d_cog in proptest::collection::vec(-720.0f64..720.0, 1..50), cog0 in 0.0f64..360.0) {
            let d = DeltaSeries { d_sog: vec![0.0; d_cog.len()], d_cog };
            let (_, c) = recover_states(&d, 5.0, cog0, true);
            prop_assert!(c.iter().all(|v| (0.0..360.0).contains(v)));
        }
    }
}
