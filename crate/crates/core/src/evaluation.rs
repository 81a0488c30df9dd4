//! Metrics, the constant-velocity baseline, corner-subset evaluation,
//! the ablation grid and the two hyperparameter sweeps.

use std::fmt::Write as _;

use chrono::Duration;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, ParamStore};
use crate::error::{Error, Result};
use crate::geodesy::{haversine_km, GeoPoint};
use crate::loss::{predict_track, rollout, LossTarget};
use crate::network::{ModelConfig, Mstformer};
use crate::preprocess::{corner_filter, CornerMode, Dataset, DatasetSpec, NormStats, Sample};
use crate::trajectory::TrajectoryPoint;
use crate::training::{predict_all, train, TrainConfig, TrainLog};

/// True values closer to zero than this are left out of MAPE and MSPE.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub n_samples: usize,
    /// Squared degrees over (lon, lat).
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    pub mspe: f64,
    /// Entries skipped by the relative metrics.
    pub relative_excluded: usize,
    pub dis_km: f64,
}

/// Metrics over matching lists of `pred_len x 2` (lon, lat) tracks.
pub fn compute_metrics(label: &str, preds: &[Mat], truths: &[Mat]) -> Result<MetricsReport> {
    if preds.len() != truths.len() {
        return Err(Error::Shape(format!("{} predictions for {} truths", preds.len(), truths.len())));
    }
    let (mut se, mut ae, mut ape, mut spe) = (0.0, 0.0, 0.0, 0.0);
    let (mut n, mut n_rel, mut excluded) = (0usize, 0usize, 0usize);
    let (mut dis, mut n_pts) = (0.0, 0usize);
    for (p, t) in preds.iter().zip(truths) {
        if p.dim() != t.dim() || p.ncols() != 2 {
            return Err(Error::Shape(format!("prediction {:?} vs truth {:?}", p.dim(), t.dim())));
        }
        for (&pv, &tv) in p.iter().zip(t.iter()) {
            let e = pv - tv;
            se += e * e;
            ae += e.abs();
            n += 1;
            if tv.abs() < RELATIVE_FLOOR {
                excluded += 1;
            } else {
                ape += (e / tv).abs();
                spe += (e / tv).powi(2);
                n_rel += 1;
            }
        }
        for i in 0..p.nrows() {
            dis += haversine_km(
                GeoPoint { lon: p[[i, 0]], lat: p[[i, 1]] },
                GeoPoint { lon: t[[i, 0]], lat: t[[i, 1]] },
            );
            n_pts += 1;
        }
    }
    let avg = |v: f64, k: usize| if k == 0 { 0.0 } else { v / k as f64 };
    let mse = avg(se, n);
    Ok(MetricsReport {
        label: label.to_string(),
        n_samples: preds.len(),
        mse,
        mae: avg(ae, n),
        rmse: mse.sqrt(),
        mape: avg(ape, n_rel),
        mspe: avg(spe, n_rel),
        relative_excluded: excluded,
        dis_km: avg(dis, n_pts),
    })
}

/// Holds the prediction point's speed and course for the whole horizon.
pub fn constant_velocity_baseline(sample: &Sample) -> Result<Mat> {
    let [lon, lat, sog, cog] = sample.pred_point;
    let n = sample.spec.pred_len;
    let pts = rollout(&vec![sog; n], &vec![cog; n], GeoPoint { lon, lat }, sample.spec.interval_s as f64)?;
    Ok(Mat::from_shape_fn((n, 2), |(i, c)| if c == 0 { pts[i].lon } else { pts[i].lat }))
}

/// Predicted (lon, lat) tracks of the trained network.
pub fn predict_positions(net: &Mstformer, params: &ParamStore, samples: &[Sample], stats: &NormStats, seed: u64) -> Result<Vec<Mat>> {
    let deltas = predict_all(net, params, samples, seed)?;
    deltas
        .iter()
        .zip(samples)
        .map(|(z, s)| Ok(predict_track(z, &LossTarget::from_sample(s, stats, net.cfg.loss_correction))?.positions()))
        .collect()
}

/// Forecast from an observed history alone.
///
/// `history` holds the last `enc_len + 1` fixes, oldest first, evenly spaced
/// in time. The horizon is padded with the final fix at later timestamps; the
/// network never reads those rows except for their times.
pub fn forecast(net: &Mstformer, params: &ParamStore, stats: &NormStats, history: &[TrajectoryPoint], seed: u64) -> Result<Mat> {
    let enc_len = net.cfg.enc_len;
    if history.len() != enc_len + 1 {
        return Err(Error::Shape(format!("history needs {} fixes, got {}", enc_len + 1, history.len())));
    }
    let interval_s = (history[1].t - history[0].t).num_seconds();
    if interval_s <= 0 || history.windows(2).any(|w| (w[1].t - w[0].t).num_seconds() != interval_s) {
        return Err(Error::Domain("history fixes must be evenly spaced in time".into()));
    }
    let spec = DatasetSpec {
        enc_len,
        label_len: net.cfg.label_len,
        pred_len: net.cfg.pred_len,
        interval_s,
        ..DatasetSpec::default()
    };
    let last = history[history.len() - 1];
    let mut points = history.to_vec();
    for k in 1..=spec.pred_len {
        points.push(TrajectoryPoint { t: last.t + Duration::seconds(spec.interval_s * k as i64), ..last });
    }
    let sample = Sample::new("forecast", 0, points, spec, stats)?;
    Ok(predict_positions(net, params, std::slice::from_ref(&sample), stats, seed)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub overall: MetricsReport,
    pub corner: MetricsReport,
    pub baseline_overall: MetricsReport,
    pub baseline_corner: MetricsReport,
    pub corner_thresholds: (f64, f64),
    pub corner_mode: CornerMode,
}

fn pick(items: &[Mat], idx: &[usize]) -> Vec<Mat> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

/// Test-split metrics for the model and the baseline, overall and on corners.
pub fn evaluate(net: &Mstformer, params: &ParamStore, ds: &Dataset, mode: CornerMode, seed: u64) -> Result<EvaluationReport> {
    if ds.test.is_empty() {
        return Err(Error::Config("dataset has no test windows".into()));
    }
    let preds = predict_positions(net, params, &ds.test, &ds.stats, seed)?;
    let base: Vec<Mat> = ds.test.iter().map(constant_velocity_baseline).collect::<Result<_>>()?;
    let truth: Vec<Mat> = ds.test.iter().map(|s| s.y.clone()).collect();
    let thresholds = ds.corner_thresholds();
    let corner = corner_filter(&ds.test, thresholds, mode);
    Ok(EvaluationReport {
        overall: compute_metrics("model", &preds, &truth)?,
        corner: compute_metrics("model/corner", &pick(&preds, &corner), &pick(&truth, &corner))?,
        baseline_overall: compute_metrics("constant-velocity", &base, &truth)?,
        baseline_corner: compute_metrics("constant-velocity/corner", &pick(&base, &corner), &pick(&truth, &corner))?,
        corner_thresholds: thresholds,
        corner_mode: mode,
    })
}

const HEADER: &str = "label                          n        MSE        MAE       RMSE       MAPE       MSPE    DIS(km)";

fn row(out: &mut String, m: &MetricsReport) {
    let _ = writeln!(
        out,
        "{:<28} {:>5} {:>10.6} {:>10.6} {:>10.6} {:>10.6} {:>10.6} {:>10.4}",
        m.label, m.n_samples, m.mse, m.mae, m.rmse, m.mape, m.mspe, m.dis_km
    );
}

/// Aligned-column text rendering of a set of metric rows.
pub fn metrics_table(rows: &[&MetricsReport]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for m in rows {
        row(&mut out, m);
    }
    out
}

impl EvaluationReport {
    pub fn to_text(&self) -> String {
        let mut out = metrics_table(&[&self.overall, &self.baseline_overall, &self.corner, &self.baseline_corner]);
        let _ = writeln!(
            out,
            "corner thresholds: |d_sog| > {:.4}, |d_cog| > {:.4} ({:?})",
            self.corner_thresholds.0, self.corner_thresholds.1, self.corner_mode
        );
        out
    }
}

/// One row of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: &'static str,
    pub use_cnn: bool,
    pub use_dynamic_attention: bool,
    pub use_knowledge_loss: bool,
    pub loss_correction: bool,
}

pub const ABLATIONS: [AblationVariant; 6] = [
    AblationVariant { name: "backbone", use_cnn: false, use_dynamic_attention: false, use_knowledge_loss: false, loss_correction: true },
    AblationVariant { name: "+cnn", use_cnn: true, use_dynamic_attention: false, use_knowledge_loss: false, loss_correction: true },
    AblationVariant { name: "+cnn+dyn", use_cnn: true, use_dynamic_attention: true, use_knowledge_loss: false, loss_correction: true },
    AblationVariant { name: "full", use_cnn: true, use_dynamic_attention: true, use_knowledge_loss: true, loss_correction: true },
    AblationVariant { name: "+dyn+kl", use_cnn: false, use_dynamic_attention: true, use_knowledge_loss: true, loss_correction: true },
    AblationVariant { name: "full/no-correction", use_cnn: true, use_dynamic_attention: true, use_knowledge_loss: true, loss_correction: false },
];

impl AblationVariant {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            use_cnn: self.use_cnn,
            use_dynamic_attention: self.use_dynamic_attention,
            use_knowledge_loss: self.use_knowledge_loss,
            loss_correction: self.loss_correction,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub name: String,
    /// Swept parameter value; `None` for ablation rows.
    pub value: Option<f64>,
    pub model: ModelConfig,
    pub log: TrainLog,
    pub report: EvaluationReport,
}

fn train_and_evaluate(name: String, value: Option<f64>, ds: &Dataset, model: ModelConfig, cfg: &TrainConfig, mode: CornerMode) -> Result<GridRow> {
    let out = train(ds, &model, cfg, None)?;
    let report = evaluate(&out.net, &out.params, ds, mode, cfg.seed)?;
    Ok(GridRow { name, value, model: out.net.cfg, log: out.log, report })
}

/// Trains and evaluates every ablation variant with the same seeds.
pub fn ablation_grid(ds: &Dataset, base: &ModelConfig, cfg: &TrainConfig, mode: CornerMode) -> Result<Vec<GridRow>> {
    ABLATIONS
        .iter()
        .map(|v| train_and_evaluate(v.name.to_string(), None, ds, v.apply(base), cfg, mode))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    AtmProportion,
    CFactor,
}

impl SweepParam {
    pub fn values(&self) -> Vec<f64> {
        match self {
            SweepParam::AtmProportion => vec![1.0, 1.0 / 2.0, 1.0 / 3.0, 1.0 / 4.0, 1.0 / 5.0],
            SweepParam::CFactor => vec![1.0, 2.0, 3.0, 5.0, 8.0, 11.0, 15.0],
        }
    }

    pub fn apply(&self, base: &ModelConfig, value: f64) -> ModelConfig {
        let mut cfg = base.clone();
        match self {
            SweepParam::AtmProportion => cfg.atm.proportion = value,
            SweepParam::CFactor => cfg.attention.c_factor = value,
        }
        cfg
    }
}

/// One trained-and-evaluated row per sweep value.
pub fn sweep(ds: &Dataset, param: SweepParam, base: &ModelConfig, cfg: &TrainConfig, mode: CornerMode) -> Result<Vec<GridRow>> {
    param
        .values()
        .into_iter()
        .map(|v| train_and_evaluate(format!("{param:?}={v:.4}"), Some(v), ds, param.apply(base, v), cfg, mode))
        .collect()
}

/// Text table of grid or sweep rows: test metrics, then corner DIS.
pub fn grid_table(rows: &[GridRow]) -> String {
    let mut out = format!("{HEADER} corner DIS  epochs\n");
    for r in rows {
        let mut m = r.report.overall.clone();
        m.label = r.name.clone();
        let mut line = String::new();
        row(&mut line, &m);
        let _ = writeln!(out, "{} {:>10.4} {:>7}", line.trim_end(), r.report.corner.dis_km, r.log.epochs.len());
    }
    out.push_str("desk-scale results; not comparable to full-corpus numbers\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesy::propagate;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn track(pts: &[(f64, f64)]) -> Mat {
        Mat::from_shape_fn((pts.len(), 2), |(i, c)| if c == 0 { pts[i].0 } else { pts[i].1 })
    }

    #[test]
    fn metric_examples() {
        let t = track(&[(-90.0, 25.0), (-90.1, 25.1)]);
        let m = compute_metrics("x", &[t.clone()], &[t.clone()]).unwrap();
        assert_eq!((m.mse, m.mae, m.rmse, m.mape, m.mspe, m.dis_km), (0.0, 0.0, 0.0, 0.0, 0.0, 0.0));
        let p = track(&[(-90.0, 25.01), (-90.1, 25.11)]);
        let m = compute_metrics("x", &[p], &[t]).unwrap();
        assert_abs_diff_eq!(m.mae, 0.005, epsilon = 1e-12);
        assert_abs_diff_eq!(m.mse, 5e-5, epsilon = 1e-12);

        let truth: Vec<GeoPoint> = (0..4).map(|i| GeoPoint { lon: 3.0 + i as f64 * 0.01, lat: 40.0 }).collect();
        let north: Vec<(f64, f64)> = truth
            .iter()
            .map(|&g| {
                let q = propagate(g, 1000.0 / (crate::geodesy::KNOT_MS * 60.0), 0.0, 60.0).unwrap();
                (q.lon, q.lat)
            })
            .collect();
        let tt: Vec<(f64, f64)> = truth.iter().map(|g| (g.lon, g.lat)).collect();
        let m = compute_metrics("x", &[track(&north)], &[track(&tt)]).unwrap();
        assert_abs_diff_eq!(m.dis_km, 1.0, epsilon = 1e-3);
    }

    #[test]
    fn relative_metrics_skip_zero_truth() {
        let t = track(&[(0.0, 10.0)]);
        let p = track(&[(0.5, 11.0)]);
        let m = compute_metrics("x", &[p], &[t]).unwrap();
        assert_eq!(m.relative_excluded, 1);
        assert_abs_diff_eq!(m.mape, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(m.mspe, 0.01, epsilon = 1e-12);
    }

    #[test]
    fn sweep_and_grid_shapes() {
        assert_eq!(SweepParam::AtmProportion.values().len(), 5);
        assert_eq!(SweepParam::CFactor.values().len(), 7);
        assert_eq!(ABLATIONS.len(), 6);
        let base = ModelConfig::desk();
        let backbone = ABLATIONS[0].apply(&base);
        assert!(!backbone.use_cnn && !backbone.use_dynamic_attention && !backbone.use_knowledge_loss);
        // c = 15 keeps 65 of 72 queries; full selection needs c >= 72 / ln 72
        assert_eq!(crate::attention::query_count(72, 15.0), 65);
        assert_eq!(crate::attention::query_count(72, 16.9), 72);
        assert!(SweepParam::AtmProportion.values().iter().all(|&p| {
            ModelConfig { atm: crate::atm::AtmConfig { proportion: p, ..Default::default() }, ..ModelConfig::desk() }
                .validate()
                .is_ok()
        }));
    }

    #[test]
    fn forecast_ignores_the_future() {
        let fleet = crate::synthetic::generate(&crate::synthetic::FleetSpec { n_vessels: 2, seed: 5, ..Default::default() }).unwrap();
        let spec = DatasetSpec { stride: 16, ..DatasetSpec::default() };
        let ds = crate::preprocess::build_dataset(fleet, &spec, &Default::default()).unwrap();
        let (net, params) = Mstformer::new(ModelConfig::desk().with_spec(&spec), 3).unwrap();
        let s = &ds.test[0];
        let want = predict_positions(&net, &params, std::slice::from_ref(s), &ds.stats, 9).unwrap().remove(0);
        let got = forecast(&net, &params, &ds.stats, &s.points[..=spec.enc_len], 9).unwrap();
        assert_eq!(got, want);
        assert!(matches!(forecast(&net, &params, &ds.stats, &s.points[..5], 9), Err(Error::Shape(_))));
        let mut uneven = s.points[..=spec.enc_len].to_vec();
        uneven[3].t += chrono::Duration::seconds(1);
        assert!(matches!(forecast(&net, &params, &ds.stats, &uneven, 9), Err(Error::Domain(_))));
    }

    proptest! {
        #[test]
        fn rmse_identity_and_translation(
            vals in proptest::collection::vec((-0.5f64..0.5, -0.5f64..0.5), 1..20),
            shift in -30.0f64..30.0,
        ) {
            let truth: Vec<(f64, f64)> = (0..vals.len()).map(|i| (-90.0 + i as f64 * 0.01, 25.0 + i as f64 * 0.005)).collect();
            let pred: Vec<(f64, f64)> = truth.iter().zip(&vals).map(|(t, v)| (t.0 + v.0, t.1 + v.1)).collect();
            let m = compute_metrics("p", &[track(&pred)], &[track(&truth)]).unwrap();
            prop_assert!((m.rmse - m.mse.sqrt()).abs() < 1e-12);
            prop_assert!(m.mse >= 0.0 && m.mae >= 0.0 && m.mape >= 0.0 && m.mspe >= 0.0 && m.dis_km >= 0.0);
            let sp: Vec<(f64, f64)> = pred.iter().map(|p| (p.0 + shift, p.1)).collect();
            let st: Vec<(f64, f64)> = truth.iter().map(|p| (p.0 + shift, p.1)).collect();
            let shifted = compute_metrics("p", &[track(&sp)], &[track(&st)]).unwrap();
            prop_assert!((shifted.dis_km - m.dis_km).abs() < 1e-9);
        }
    }
}
