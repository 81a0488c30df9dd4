use std::fmt::Write as _;
use std::path::Path;
use std::process::{Command, Output};

fn mstformer(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mstformer")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = mstformer(dir, args);
    assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

const SMALL: [&str; 10] = [
    "--seed",
    "3",
    "--override",
    "fleet.n_vessels=3",
    "--override",
    "dataset.stride=4",
    "--override",
    "train.epochs=1",
    "--override",
    "train.batch_size=8",
];

fn with<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL).collect()
}

#[test]
fn synth_to_evaluate_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &with(&["synth", "--out", "store"]));
    ok(d, &with(&["preprocess", "--input", "store", "--out", "ds"]));
    ok(d, &with(&["train", "--dataset", "ds", "--out", "run"]));
    let out = ok(d, &with(&["evaluate", "--dataset", "ds", "--checkpoint", "run/model.mstf", "--out", "rep"]));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("model/corner") && text.contains("constant-velocity"));
    assert_eq!(std::fs::read_to_string(d.join("rep/report.txt")).unwrap(), text);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("rep/report.json")).unwrap()).unwrap();
    assert!(json["report"]["overall"]["dis_km"].as_f64().unwrap() > 0.0);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("run/train_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["dataset_manifest_sha256"], json["dataset_manifest_sha256"]);
    assert_eq!(manifest["checkpoint_sha256"], json["checkpoint_sha256"]);

    // Replotting the stored prediction matches plotting a fresh one byte for byte.
    ok(d, &with(&["predict", "--dataset", "ds", "--checkpoint", "run/model.mstf", "--window", "2", "--out", "p.csv"]));
    ok(d, &with(&["plot", "track", "--dataset", "ds", "--window", "2", "--prediction", "p.csv", "--out", "a.svg"]));
    ok(d, &with(&["plot", "track", "--dataset", "ds", "--window", "2", "--checkpoint", "run/model.mstf", "--out", "b.svg"]));
    assert_eq!(std::fs::read(d.join("a.svg")).unwrap(), std::fs::read(d.join("b.svg")).unwrap());
    ok(d, &with(&["plot", "atm", "--dataset", "ds", "--step", "5", "--out", "atm.csv"]));
    assert_eq!(std::fs::read_to_string(d.join("atm.csv")).unwrap().lines().count(), 33);
    ok(d, &with(&["plot", "loss", "--manifest", "run/train_manifest.json", "--out", "loss.svg"]));
}

#[test]
fn missing_checkpoint_is_a_data_error_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mstformer(tmp.path(), &["evaluate", "--dataset", "ds", "--checkpoint", "nowhere/model.mstf", "--out", "r"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere/model.mstf"));
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(mstformer(tmp.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(mstformer(tmp.path(), &["synth"]).status.code(), Some(2));
    let bad = mstformer(tmp.path(), &["synth", "--out", "s", "--override", "fleet.vessels=3"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("vessels"));
    assert!(!tmp.path().join("s").exists());
    assert_eq!(mstformer(tmp.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn divergence_exits_with_four_and_dumps_the_batch() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &with(&["synth", "--out", "store"]));
    ok(d, &with(&["preprocess", "--input", "store", "--out", "ds"]));
    let mut args = with(&["train", "--dataset", "ds", "--out", "run"]);
    args.extend(["--override", "train.base_lr=1e308", "--override", "train.epochs=3"]);
    let out = mstformer(d, &args);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let dumps: Vec<_> = std::fs::read_dir(d.join("run"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("divergence_"))
        .collect();
    assert_eq!(dumps.len(), 1);
    assert!(!d.join("run/model.mstf").exists());
}

#[test]
fn ingest_builds_segments_from_ais_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut csv = String::from(
        "MMSI,BaseDateTime,LAT,LON,SOG,COG,Heading,VesselName,IMO,CallSign,VesselType,Status,Length,Width,Draft,Cargo,TranscieverClass\n",
    );
    for (mmsi, lon0) in [("367000001", -90.0), ("367000002", -88.0)] {
        let mut t = 0i64;
        for k in 0..150 {
            t += if k % 3 == 0 { 55 } else { 62 };
            let (h, m, s) = (t / 3600, (t / 60) % 60, t % 60);
            let lon = lon0 + 0.003 * k as f64;
            writeln!(csv, "{mmsi},2021-01-01T{h:02}:{m:02}:{s:02},25.0,{lon},10.0,90.0,91.0,X,,,70,0,,,,,A").unwrap();
        }
    }
    csv.push_str("367000003,2021-01-01T00:00:00,60.0,10.0,10.0,90.0,91.0,X,,,70,0,,,,,A\n");
    csv.push_str("garbage\n");
    std::fs::write(d.join("ais.csv"), csv).unwrap();
    let small_windows = [
        "--override",
        "dataset.enc_len=48",
        "--override",
        "dataset.label_len=36",
        "--override",
        "dataset.pred_len=12",
    ];
    let mut args = vec!["ingest", "ais.csv", "--out", "store"];
    args.extend(small_windows);
    ok(d, &args);
    let files = std::fs::read_dir(d.join("store")).unwrap().count();
    assert_eq!(files, 2);
    let mut args = vec!["preprocess", "--input", "store", "--out", "ds"];
    args.extend(small_windows);
    ok(d, &args);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("ds/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["trajectories"].as_array().unwrap().len(), 2);
    assert!(m["train_windows"].as_u64().unwrap() > 0);
}
