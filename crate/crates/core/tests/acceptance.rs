//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line per criterion, then fails if any criterion failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use chrono::{Duration, TimeZone, Utc};
use mstformer::atm::{atm_from_csv, build_atm, AtmConfig};
use mstformer::attention::{
    importance_scores, query_count, select_queries, AttentionConfig, ImportanceFloor, IndexOrigin, MultiHead,
    QuerySelection,
};
use mstformer::autodiff::{Graph, Mat, ParamStore};
use mstformer::evaluation::{ablation_grid, evaluate, ABLATIONS};
use mstformer::geodesy::{earth_radius, haversine_km, propagate, wrap_360, GeoPoint};
use mstformer::loss::{knowledge_loss, knowledge_loss_value, normalized_future, recover_states, LossTarget};
use mstformer::network::{ModelConfig, Mstformer};
use mstformer::preprocess::{
    build_dataset, difference_points, make_windows, window_count, CornerMode, DatasetSpec, NormStats,
    SplitFractions,
};
use mstformer::synthetic::{generate, FleetSpec};
use mstformer::training::{mix_seed, train, TrainConfig};
use mstformer::trajectory::{Trajectory, TrajectoryPoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| r.gen_range(-1.0..1.0))
}

fn c01_geodesy_round_trip() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let o = GeoPoint::new(r.gen_range(-180.0..180.0), r.gen_range(-60.0..=60.0)).unwrap();
        let sog = r.gen_range(0.5..40.0);
        let cog = r.gen_range(0.0..360.0);
        let dt = r.gen_range(1.0..3600.0);
        let p = propagate(o, sog, cog, dt).unwrap();
        let expect_km = sog * 0.514444 * dt / 1000.0;
        worst = worst.max((haversine_km(o, p) - expect_km).abs() / expect_km);
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst < 1e-6 && secs < 5.0, format!("max relative error {worst:.2e}, {secs:.2} s"))
}

fn c02_earth_radius_endpoints() -> Outcome {
    let (eq, pole) = (earth_radius(0.0).unwrap(), earth_radius(90.0).unwrap());
    check(eq == 6378137.0 && pole == 6356752.3142, format!("R(0) = {eq:?}, R(90) = {pole:?}"))
}

fn c03_atm_golden_files() -> Outcome {
    let t0 = Utc.timestamp_opt(1_620_000_000, 0).unwrap();
    let pt = |lon, lat, sog, cog, heading, sec| TrajectoryPoint { t: t0 + Duration::seconds(sec), lon, lat, sog, cog, heading };
    let cases = [
        ("atm_center.csv", pt(-90.0, 25.0, 12.0, 45.0, 50.0, 0), pt(-89.9975, 25.00225, 12.0, 45.0, 50.0, 60)),
        ("atm_zero_speed.csv", pt(-90.0, 25.0, 0.0, 180.0, 90.0, 0), pt(-89.9878, 25.0, 0.0, 180.0, 90.0, 60)),
        ("atm_east_half_km.csv", pt(0.0, 0.0, 10.0, 90.0, 90.0, 0), pt(0.0044915764205976, 0.0, 10.0, 90.0, 90.0, 60)),
    ];
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let cfg = AtmConfig::default();
    let mut notes = Vec::new();
    let mut ok = true;
    for (file, p, next) in &cases {
        let golden = atm_from_csv(&std::fs::read_to_string(dir.join(file)).unwrap()).unwrap();
        let got = build_atm(p, next, &cfg).cells;
        let same = got.dim() == golden.dim() && got.iter().zip(golden.iter()).all(|(a, b)| (a - b).abs() <= 1e-12);
        ok &= same;
        notes.push(format!("{file} {}", if same { "match" } else { "DIFFER" }));
    }
    let c = cfg.center();
    let center = build_atm(&cases[0].1, &cases[0].2, &cfg).cells[[c, c]];
    let east = build_atm(&cases[2].1, &cases[2].2, &cfg).cells;
    let peak = east.row(c).iter().cloned().fold(f64::MIN, f64::max);
    ok &= center == 0.8 && east[[c, c + 2]] == 1.0 && peak == 1.0;
    notes.push(format!("center {center}, east peak at +2 = {}", east[[c, c + 2]]));
    check(ok, notes.join("; "))
}

/// Multi-head attention computed directly from the layer's weights.
fn vanilla_mha(store: &ParamStore, mh: &MultiHead, x: &Mat) -> Mat {
    let proj = |l: &mstformer::nn::Linear| x.dot(store.get(l.w)) + store.get(l.b.unwrap());
    let (q, k, v) = (proj(&mh.q), proj(&mh.k), proj(&mh.v));
    let dk = q.ncols() / mh.n_heads;
    let mut cat = Mat::zeros(q.dim());
    for h in 0..mh.n_heads {
        let cols = ndarray::s![.., h * dk..(h + 1) * dk];
        let (qh, kh, vh) = (q.slice(cols), k.slice(cols), v.slice(cols));
        let mut s = qh.dot(&kh.t()) / (dk as f64).sqrt();
        for mut row in s.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|z| (z - m).exp());
            let sum = row.sum();
            row /= sum;
        }
        cat.slice_mut(cols).assign(&s.dot(&vh));
    }
    cat.dot(store.get(mh.o.w)) + store.get(mh.o.b.unwrap())
}

fn c04_attention_equivalence() -> Outcome {
    let start = Instant::now();
    let (mut worst_dyn, mut worst_prob) = (0.0f64, 0.0f64);
    let cfg = AttentionConfig { n_heads: 4, ..AttentionConfig::default() };
    for seed in 0..20u64 {
        let mut r = rng(100 + seed);
        let len = r.gen_range(8..=72);
        let mut store = ParamStore::new();
        let mh = MultiHead::new(&mut store, "a", 16, 4, &mut r);
        let x = random_mat(&mut r, len, 16);
        let d_sog: Vec<f64> = (0..len).map(|_| r.gen_range(-1.0..1.0)).collect();
        let d_cog: Vec<f64> = (0..len).map(|_| r.gen_range(-20.0..20.0)).collect();
        let scores: Vec<Vec<f64>> = cfg
            .weights()
            .iter()
            .map(|&(ws, wc)| importance_scores(&d_sog, &d_cog, ws, wc, cfg.d_constant, cfg.floor, cfg.index_origin))
            .collect();
        // A factor this large keeps every query (and every sampled key).
        let full_c = len as f64;
        assert_eq!(query_count(len, full_c), len);
        let expect = vanilla_mha(&store, &mh, &x);
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let dy = mh.forward(&mut g, xv, xv, QuerySelection::Scores(&scores, full_c), false);
        let mut sampler = rng(seed);
        let pr = mh.forward(&mut g, xv, xv, QuerySelection::ProbSparse { c: full_c, rng: &mut sampler }, false);
        let diff = |a: &Mat| (a - &expect).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        worst_dyn = worst_dyn.max(diff(g.value(dy)));
        worst_prob = worst_prob.max(diff(g.value(pr)));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst_dyn < 1e-5 && worst_prob < 1e-5 && secs < 30.0,
        format!("max |dynamic - vanilla| {worst_dyn:.1e}, max |probsparse - vanilla| {worst_prob:.1e}, {secs:.2} s"),
    )
}

fn c05_selection_cardinality() -> Outcome {
    let mut r = rng(5);
    let mut bad = Vec::new();
    let mut checked = 0;
    for c in [1.0, 2.0, 3.0, 5.0, 8.0, 11.0, 15.0] {
        for len in 2..512usize {
            let expect = ((c * (len as f64).ln()).ceil() as usize).min(len);
            let scores: Vec<f64> = (0..len).map(|_| r.gen()).collect();
            let picked = select_queries(&scores, c);
            let distinct = picked.windows(2).all(|w| w[0] < w[1]);
            if query_count(len, c) != expect || picked.len() != expect || !distinct {
                bad.push((len, c));
            }
            checked += 1;
        }
    }
    check(bad.is_empty(), format!("{checked} (L, c) pairs, {} mismatches {:?}", bad.len(), &bad[..bad.len().min(5)]))
}

/// Scalar restatement of the importance score, one step at a time.
fn importance_oracle(d_sog: &[f64], d_cog: &[f64], w_s: f64, w_c: f64) -> Vec<f64> {
    let n = d_sog.len();
    let mut mean_s = 0.0;
    let mut mean_c = 0.0;
    for i in 0..n {
        mean_s += d_sog[i].abs();
        mean_c += d_cog[i].abs();
    }
    mean_s /= n as f64;
    mean_c /= n as f64;
    let g = |v: f64| {
        let clipped = if v < 0.0 {
            0.0
        } else if v > 1.0 {
            1.0
        } else {
            v
        };
        (clipped + (-6.0f64).exp()).ln()
    };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        // Steps are counted back from the most recent one.
        let ind = (n - 1 - i) as f64;
        let pos = 1.0 / (ind + std::f64::consts::E).ln();
        out.push(pos + w_s * g(d_sog[i].abs() - mean_s) + w_c * g(d_cog[i].abs() - mean_c));
    }
    out
}

fn c06_importance_oracle() -> Outcome {
    let mut r = rng(6);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d_sog: Vec<f64> = (0..72).map(|_| r.gen_range(-1.5..1.5)).collect();
        let d_cog: Vec<f64> = (0..72).map(|_| r.gen_range(-4.0..4.0)).collect();
        for (ws, wc) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
            let got = importance_scores(&d_sog, &d_cog, ws, wc, std::f64::consts::E, ImportanceFloor::Epsilon, IndexOrigin::Latest);
            let want = importance_oracle(&d_sog, &d_cog, ws, wc);
            for (a, b) in got.iter().zip(&want) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    check(worst <= 1e-12, format!("100 windows x 4 head weightings, max abs diff {worst:.1e}"))
}

fn c07_loss_gradient_check() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut r = rng(700 + seed);
        let origin = GeoPoint::new(r.gen_range(-170.0..170.0), r.gen_range(-60.0..60.0)).unwrap();
        let (sog0, cog0) = (r.gen_range(5.0..20.0), r.gen_range(0.0..360.0));
        let stats = NormStats {
            mean_dsog: r.gen_range(-0.2..0.2),
            std_dsog: r.gen_range(0.1..0.6),
            mean_dcog: r.gen_range(-1.0..1.0),
            std_dcog: r.gen_range(0.5..4.0),
        };
        let mut truth = Mat::zeros((4, 2));
        let mut p = origin;
        let (mut s, mut c) = (sog0, cog0);
        for i in 0..4 {
            s += r.gen_range(-0.5..0.5);
            c = wrap_360(c + r.gen_range(-8.0..8.0));
            p = propagate(p, s, c, 60.0).unwrap();
            truth[[i, 0]] = p.lon;
            truth[[i, 1]] = p.lat;
        }
        let target = LossTarget { origin, sog0, cog0, truth, stats, interval_s: 60.0, correction: true };
        let z = random_mat(&mut r, 4, 2);
        let mut store = ParamStore::new();
        let id = store.add("z", z.clone());
        let mut g = Graph::new(&store);
        let zv = g.param(id);
        let loss = knowledge_loss(&mut g, zv, &target).unwrap();
        let grad = g.backward(loss).into_params().remove(0).unwrap();
        // Positions near 0.5 rad differ by ~1e-5 rad, so each loss value carries
        // a relative rounding error near 1e-12; a smaller step drowns in it.
        let h = 1e-4;
        for i in 0..4 {
            for j in 0..2 {
                let (mut zp, mut zm) = (z.clone(), z.clone());
                zp[[i, j]] += h;
                zm[[i, j]] -= h;
                let fd = (knowledge_loss_value(&zp, &target).unwrap() - knowledge_loss_value(&zm, &target).unwrap()) / (2.0 * h);
                let scale = fd.abs().max(grad[[i, j]].abs()).max(1e-6);
                let rel = (fd - grad[[i, j]]).abs() / scale;
                worst = worst.max(rel);
            }
        }
    }
    check(worst < 1e-3, format!("50 cases x 8 partials, max relative error {worst:.2e}"))
}

fn c08_recovery_round_trip() -> Outcome {
    let mut r = rng(8);
    let t0 = Utc.timestamp_opt(1_609_459_200, 0).unwrap();
    let (mut worst, mut wraps, mut out_of_range) = (0.0f64, 0usize, 0usize);
    for case in 0..1000 {
        let n = r.gen_range(2..60);
        // Half the cases start just below north so the course crosses 0/360.
        let mut c = if case % 2 == 0 { r.gen_range(340.0..360.0) } else { r.gen_range(0.0..360.0) };
        let mut s = r.gen_range(0.0..25.0);
        let mut pts = Vec::with_capacity(n);
        for k in 0..n {
            if k > 0 {
                s = (s + r.gen_range(-2.0..2.0f64)).max(0.0);
                let turn = if case % 2 == 0 { r.gen_range(-5.0..25.0) } else { r.gen_range(-40.0..40.0) };
                let next = wrap_360(c + turn);
                if (next - c).abs() > 180.0 {
                    wraps += 1;
                }
                c = next;
            }
            pts.push(TrajectoryPoint { t: t0 + Duration::minutes(k as i64), lon: 0.0, lat: 0.0, sog: s, cog: c, heading: c });
        }
        let d = difference_points(&pts).unwrap();
        let (sog, cog) = recover_states(&d, pts[0].sog, pts[0].cog, true);
        for i in 0..d.len() {
            let want = &pts[i + 1];
            let dc = (cog[i] - want.cog).abs();
            worst = worst.max((sog[i] - want.sog).abs()).max(dc.min(360.0 - dc));
            if !(0.0..360.0).contains(&cog[i]) {
                out_of_range += 1;
            }
        }
    }
    check(
        worst < 1e-9 && out_of_range == 0 && wraps > 0,
        format!("1000 series, {wraps} wrap crossings, max error {worst:.1e}, {out_of_range} courses outside [0, 360)"),
    )
}

fn c09_zero_loss_fixture() -> Outcome {
    let fleet = generate(&FleetSpec { n_vessels: 4, seed: 9, ..FleetSpec::default() }).unwrap();
    let ds = build_dataset(fleet, &DatasetSpec { stride: 8, ..DatasetSpec::default() }, &SplitFractions::default()).unwrap();
    let mut worst = 0.0f64;
    let mut n = 0;
    for s in ds.all_samples() {
        let target = LossTarget::from_sample(s, &ds.stats, true);
        let z = normalized_future(s, &ds.stats);
        worst = worst.max(knowledge_loss_value(&z, &target).unwrap());
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let zv = g.constant(z);
        let l = knowledge_loss(&mut g, zv, &target).unwrap();
        worst = worst.max(g.scalar(l));
        n += 1;
    }
    check(worst < 1e-6, format!("{n} windows, max loss {worst:.2e} km"))
}

fn c10_desk_scale_learning() -> Outcome {
    let start = Instant::now();
    // Legs of one to two hours: with shorter legs most future manoeuvres start
    // after the prediction point and are unknowable from the history.
    let fleet = generate(&FleetSpec {
        n_vessels: 80,
        seed: 7,
        leg_min_minutes: 60.0,
        leg_max_minutes: 120.0,
        ..FleetSpec::default()
    })
    .unwrap();
    let ds = build_dataset(fleet, &DatasetSpec::default(), &SplitFractions::default()).unwrap();
    let model = ModelConfig::desk().with_spec(&ds.spec);
    let tc = TrainConfig { batch_size: 16, base_lr: 1e-3, epochs: Some(5), seed: 0, ..TrainConfig::default() };
    // Same initialisation the trainer starts from.
    let (net0, p0) = Mstformer::new(model.clone(), mix_seed(tc.seed, 1)).unwrap();
    let before = evaluate(&net0, &p0, &ds, CornerMode::And, tc.seed).unwrap();
    let out = train(&ds, &model, &tc, None).unwrap();
    let after = evaluate(&out.net, &out.params, &ds, CornerMode::And, tc.seed).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let a = after.corner.dis_km < after.baseline_corner.dis_km;
    let b = after.overall.dis_km * 5.0 <= before.overall.dis_km;
    check(
        a && b && ds.len() >= 2000 && secs < 1200.0,
        format!(
            "{} windows, {} epochs; corner DIS {:.4} vs constant velocity {:.4} ({}); DIS {:.4} vs untrained {:.4}, ratio {:.2} ({}); {:.0} s",
            ds.len(),
            out.log.epochs.len(),
            after.corner.dis_km,
            after.baseline_corner.dis_km,
            if a { "a ok" } else { "a FAIL" },
            after.overall.dis_km,
            before.overall.dis_km,
            before.overall.dis_km / after.overall.dis_km,
            if b { "b ok" } else { "b FAIL" },
            secs
        ),
    )
}

fn c11_ablation_grid() -> Outcome {
    let fleet = generate(&FleetSpec { n_vessels: 10, seed: 11, ..FleetSpec::default() }).unwrap();
    let ds = build_dataset(fleet, &DatasetSpec { stride: 2, ..DatasetSpec::default() }, &SplitFractions::default()).unwrap();
    let tc = TrainConfig { batch_size: 16, base_lr: 1e-3, epochs: Some(2), seed: 0, ..TrainConfig::default() };
    let rows = match ablation_grid(&ds, &ModelConfig::desk().with_spec(&ds.spec), &tc, CornerMode::And) {
        Ok(r) => r,
        Err(e) => return Err(format!("grid failed: {e}")),
    };
    let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
    let expected: Vec<&str> = ABLATIONS.iter().map(|v| v.name).collect();
    let finite = rows.iter().all(|r| r.report.overall.dis_km.is_finite() && r.log.epochs.iter().all(|e| e.val_loss.is_finite()));
    let backbone = &rows[0];
    let full = rows.iter().find(|r| r.name == "full").unwrap();
    let flags_off = !backbone.model.use_cnn
        && !backbone.model.use_dynamic_attention
        && !backbone.model.use_knowledge_loss;
    let differs = backbone.report.overall.dis_km != full.report.overall.dis_km;
    let table: Vec<String> = rows.iter().map(|r| format!("{} {:.4}", r.name, r.report.overall.dis_km)).collect();
    check(
        rows.len() == 6 && names == expected && finite && flags_off && differs,
        format!("{} rows, DIS km: {}", rows.len(), table.join(", ")),
    )
}

fn c12_window_counts() -> Outcome {
    let spec_fleet = FleetSpec { n_vessels: 1, duration_s: 200 * 60, seed: 12, ..FleetSpec::default() };
    let traj = generate(&spec_fleet).unwrap().remove(0);
    let stats = NormStats::IDENTITY;
    let mut checked = 0;
    let mut bad = Vec::new();
    for enc in [48usize, 72] {
        for pred in [24usize, 48] {
            for stride in [1usize, 4] {
                let spec = DatasetSpec { enc_len: enc, label_len: 24, pred_len: pred, interval_s: 60, stride };
                for n in 0..=200usize {
                    let enumerated = (0..=n).step_by(stride).filter(|&s| s + enc + pred <= n).count();
                    let built = if n == 0 {
                        0
                    } else {
                        let t = Trajectory::new(traj.vessel_id.clone(), traj.points[..=n].to_vec(), 60);
                        let d = difference_points(&t.points).unwrap();
                        make_windows(&t, &d, &spec, &stats).unwrap().len()
                    };
                    let formula = window_count(n, enc, pred, stride);
                    if formula != enumerated || built != enumerated {
                        bad.push((n, enc, pred, stride));
                    }
                    checked += 1;
                }
            }
        }
    }
    check(bad.is_empty(), format!("{checked} cases, {} mismatches {:?}", bad.len(), &bad[..bad.len().min(5)]))
}

fn pipeline_report(dir: &Path) -> Vec<u8> {
    let common = [
        "--seed",
        "13",
        "--override",
        "fleet.n_vessels=4",
        "--override",
        "dataset.stride=4",
        "--override",
        "train.epochs=2",
        "--override",
        "train.batch_size=8",
        "--override",
        "train.base_lr=1e-3",
    ];
    let steps: [Vec<String>; 4] = [
        vec!["synth".into(), "--out".into(), "store".into()],
        vec!["preprocess".into(), "--input".into(), "store".into(), "--out".into(), "ds".into()],
        vec!["train".into(), "--dataset".into(), "ds".into(), "--out".into(), "run".into()],
        vec![
            "evaluate".into(),
            "--dataset".into(),
            "ds".into(),
            "--checkpoint".into(),
            "run/model.mstf".into(),
            "--out".into(),
            "rep".into(),
        ],
    ];
    for step in steps {
        let out = std::process::Command::new(env!("CARGO_BIN_EXE_mstformer"))
            .current_dir(dir)
            .args(step.iter().map(String::as_str).chain(common))
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{step:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let mut bytes = std::fs::read(dir.join("rep/report.json")).unwrap();
    bytes.extend(std::fs::read(dir.join("rep/report.txt")).unwrap());
    bytes
}

fn c13_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (pipeline_report(a.path()), pipeline_report(b.path()));
    check(ra == rb, format!("two synth-train-evaluate runs, {} report bytes, identical = {}", ra.len(), ra == rb))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 13] = [
        ("geodesy round-trip", c01_geodesy_round_trip),
        ("earth-radius endpoints", c02_earth_radius_endpoints),
        ("ATM golden files", c03_atm_golden_files),
        ("attention equivalence limit", c04_attention_equivalence),
        ("selection cardinality", c05_selection_cardinality),
        ("importance-score oracle", c06_importance_oracle),
        ("loss gradient check", c07_loss_gradient_check),
        ("recovery round-trip", c08_recovery_round_trip),
        ("zero-loss fixture", c09_zero_loss_fixture),
        ("desk-scale learning", c10_desk_scale_learning),
        ("ablation grid shape", c11_ablation_grid),
        ("windowing count formula", c12_window_counts),
        ("determinism", c13_determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {:>2} {:<28} {tag}  {detail}", i + 1, name);
        if outcome.is_err() {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
