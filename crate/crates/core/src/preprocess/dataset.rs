//! Dataset assembly and its on-disk form.
//!
//! A dataset directory holds two files:
//!
//! * `samples.bin`: the resampled trajectories and their split counts.
//!   Little-endian; `b"MSTD"`, `u32` version, `u64` trajectory count, then
//!   per trajectory a `u32`-prefixed UTF-8 vessel id, `i64` interval,
//!   `u64` point count, three `u64` split counts (train, val, test) and
//!   the points as `i64` unix seconds followed by lon, lat, sog, cog,
//!   heading as `f64`.
//! * `manifest.json`: window spec, normalization statistics, per-vessel
//!   split counts, sources, seed and the SHA-256 of `samples.bin`.
//!
//! Windows are rebuilt from the stored points on load using the recorded
//! statistics, so a loaded dataset is identical to the one saved.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use chrono::{TimeZone, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::window::{corner_thresholds, make_windows, window_count, DatasetSpec, Sample};
use super::{difference, fit_norm, NormStats};
use crate::error::{Error, Result};
use crate::trajectory::{Trajectory, TrajectoryPoint};

const MAGIC: &[u8; 4] = b"MSTD";
const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.bin";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.7, val: 0.1 }
    }
}

impl SplitFractions {
    /// Windows per split for one trajectory; test takes the remainder.
    pub fn counts(&self, windows: usize) -> SplitCounts {
        let train = (windows as f64 * self.train).floor() as usize;
        let val = ((windows as f64 * self.val).floor() as usize).min(windows - train);
        SplitCounts { train, val, test: windows - train - val }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryWindows {
    pub traj: Trajectory,
    pub counts: SplitCounts,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub stats: NormStats,
    pub trajectories: Vec<TrajectoryWindows>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub sources: Vec<String>,
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn all_samples(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Corner thresholds over every window of the dataset.
    pub fn corner_thresholds(&self) -> (f64, f64) {
        corner_thresholds(self.all_samples())
    }
}

/// Windows uniform trajectories, splits them in time order per vessel and
/// fits normalization on the spans covered by training windows only.
pub fn build_dataset(trajs: Vec<Trajectory>, spec: &DatasetSpec, fractions: &SplitFractions) -> Result<Dataset> {
    spec.validate()?;
    if !(fractions.train > 0.0 && fractions.val >= 0.0 && fractions.train + fractions.val <= 1.0) {
        return Err(Error::Config(format!("bad split fractions {fractions:?}")));
    }
    let mut windows = Vec::with_capacity(trajs.len());
    let mut train_spans = Vec::new();
    for traj in trajs {
        if traj.len() < 2 {
            continue;
        }
        if !traj.is_uniform() || traj.interval_s != spec.interval_s {
            return Err(Error::Domain(format!(
                "vessel {}: not uniformly sampled at {} s",
                traj.vessel_id, spec.interval_s
            )));
        }
        let n = window_count(traj.len() - 1, spec.enc_len, spec.pred_len, spec.stride);
        if n == 0 {
            continue;
        }
        let counts = fractions.counts(n);
        if counts.train > 0 {
            let end = (counts.train - 1) * spec.stride + spec.enc_len + spec.pred_len;
            train_spans.push(difference(&traj)?.slice(0..end));
        }
        windows.push(TrajectoryWindows { traj, counts });
    }
    if train_spans.is_empty() {
        return Err(Error::TooShort { needed: spec.window_points(), got: 0 });
    }
    let stats = fit_norm(&train_spans)?;
    assemble(*spec, stats, windows, Vec::new(), None)
}

fn assemble(
    spec: DatasetSpec,
    stats: NormStats,
    trajectories: Vec<TrajectoryWindows>,
    sources: Vec<String>,
    seed: Option<u64>,
) -> Result<Dataset> {
    use rayon::prelude::*;

    let per_traj: Vec<Vec<Sample>> = trajectories
        .par_iter()
        .map(|tw| {
            let deltas = difference(&tw.traj)?;
            let mut all = make_windows(&tw.traj, &deltas, &spec, &stats)?;
            all.truncate(tw.counts.total());
            Ok(all)
        })
        .collect::<Result<_>>()?;
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (tw, mut all) in trajectories.iter().zip(per_traj) {
        if all.len() != tw.counts.total() {
            return Err(Error::Format(format!("vessel {}: split counts exceed windows", tw.traj.vessel_id)));
        }
        let rest = all.split_off(tw.counts.train);
        train.extend(all);
        let mut rest = rest;
        let tail = rest.split_off(tw.counts.val);
        val.extend(rest);
        test.extend(tail);
    }
    Ok(Dataset { spec, stats, trajectories, train, val, test, sources, seed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub vessel_id: String,
    pub points: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: DatasetSpec,
    pub stats: NormStats,
    pub seed: Option<u64>,
    pub sources: Vec<String>,
    pub train_windows: usize,
    pub val_windows: usize,
    pub test_windows: usize,
    pub corner_thresholds: (f64, f64),
    pub trajectories: Vec<ManifestEntry>,
    pub samples_sha256: String,
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes = encode_trajectories(&ds.trajectories);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        spec: ds.spec,
        stats: ds.stats,
        seed: ds.seed,
        sources: ds.sources.clone(),
        train_windows: ds.train.len(),
        val_windows: ds.val.len(),
        test_windows: ds.test.len(),
        corner_thresholds: ds.corner_thresholds(),
        trajectories: ds
            .trajectories
            .iter()
            .map(|tw| ManifestEntry {
                vessel_id: tw.traj.vessel_id.clone(),
                points: tw.traj.len(),
                train: tw.counts.train,
                val: tw.counts.val,
                test: tw.counts.test,
            })
            .collect(),
        samples_sha256: hex_sha256(&bytes),
    };
    crate::io_util::write_atomic(&dir.join(SAMPLES_FILE), &bytes)?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    crate::io_util::write_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {}", manifest.format_version)));
    }
    let spath = dir.join(SAMPLES_FILE);
    let bytes = fs::read(&spath).map_err(|e| Error::io(&spath, e))?;
    if hex_sha256(&bytes) != manifest.samples_sha256 {
        return Err(Error::Format(format!("{}: checksum does not match manifest", spath.display())));
    }
    let trajectories = decode_trajectories(&bytes)?;
    manifest.spec.validate()?;
    assemble(manifest.spec, manifest.stats, trajectories, manifest.sources, manifest.seed)
}

pub(crate) fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn encode_trajectories(trajs: &[TrajectoryWindows]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(trajs.len() as u64).to_le_bytes());
    for tw in trajs {
        let id = tw.traj.vessel_id.as_bytes();
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&tw.traj.interval_s.to_le_bytes());
        out.extend_from_slice(&(tw.traj.len() as u64).to_le_bytes());
        for c in [tw.counts.train, tw.counts.val, tw.counts.test] {
            out.extend_from_slice(&(c as u64).to_le_bytes());
        }
        for p in &tw.traj.points {
            out.extend_from_slice(&p.t.timestamp().to_le_bytes());
            for v in [p.lon, p.lat, p.sog, p.cog, p.heading] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

fn decode_trajectories(bytes: &[u8]) -> Result<Vec<TrajectoryWindows>> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a dataset container".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let n = u64::from_le_bytes(read_array(&mut r)?) as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let id_len = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut id = vec![0u8; id_len];
        read_exact(&mut r, &mut id)?;
        let vessel_id = String::from_utf8(id).map_err(|_| Error::Format("vessel id is not UTF-8".into()))?;
        let interval_s = i64::from_le_bytes(read_array(&mut r)?);
        let len = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let mut c = [0usize; 3];
        for v in &mut c {
            *v = u64::from_le_bytes(read_array(&mut r)?) as usize;
        }
        let mut points = Vec::with_capacity(len.min(1 << 20));
        for _ in 0..len {
            let secs = i64::from_le_bytes(read_array(&mut r)?);
            let t = Utc
                .timestamp_opt(secs, 0)
                .single()
                .ok_or_else(|| Error::Format(format!("bad timestamp {secs}")))?;
            let mut v = [0.0; 5];
            for x in &mut v {
                *x = f64::from_le_bytes(read_array(&mut r)?);
            }
            points.push(TrajectoryPoint { t, lon: v[0], lat: v[1], sog: v[2], cog: v[3], heading: v[4] });
        }
        out.push(TrajectoryWindows {
            traj: Trajectory::new(vessel_id, points, interval_s),
            counts: SplitCounts { train: c[0], val: c[1], test: c[2] },
        });
    }
    if (r.position() as usize) != bytes.len() {
        return Err(Error::Format("trailing bytes in dataset container".into()));
    }
    Ok(out)
}

fn read_exact(r: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format("truncated dataset container".into()))
}

fn read_array<const N: usize>(r: &mut Cursor<&[u8]>) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}
