//! C interface: geodesy helpers, single ATM rendering and checkpoint forecasting.
//!
//! Every fallible call returns an [`MstfStatus`]. On failure the message is kept
//! per thread and can be read with [`mstf_last_error`] until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use chrono::DateTime;
use mstformer::atm::{build_atm, AtmConfig};
use mstformer::checkpoint::{self, Checkpoint};
use mstformer::error::Error;
use mstformer::evaluation::forecast;
use mstformer::geodesy::{self, GeoPoint};
use mstformer::trajectory::TrajectoryPoint;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MstfStatus {
    Ok = 0,
    NullPointer = 1,
    /// Output buffer too small, bad UTF-8 path or similar caller error.
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Domain = 6,
    Config = 7,
    Internal = 8,
    Panic = 9,
}

/// One AIS fix. `t_unix` is seconds since the Unix epoch; speed in knots,
/// course and heading in degrees.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MstfPoint {
    pub t_unix: i64,
    pub lon: f64,
    pub lat: f64,
    pub sog: f64,
    pub cog: f64,
    pub heading: f64,
}

/// Loaded checkpoint. Opaque to C.
pub struct MstfModel {
    ck: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn fail(status: MstfStatus, msg: impl Into<String>) -> MstfStatus {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
    status
}

fn from_error(e: Error) -> MstfStatus {
    let status = match &e {
        Error::Io { .. } => MstfStatus::Io,
        Error::Format(_) | Error::MissingColumn(_) => MstfStatus::Format,
        Error::Shape(_) | Error::TooShort { .. } | Error::StackTooShallow { .. } => MstfStatus::Shape,
        Error::Domain(_) | Error::DegenerateVariance(_) => MstfStatus::Domain,
        Error::Config(_) => MstfStatus::Config,
        Error::Divergence { .. } => MstfStatus::Internal,
    };
    fail(status, e.to_string())
}

/// Runs `f`, turning panics into [`MstfStatus::Panic`].
fn guard(f: impl FnOnce() -> MstfStatus) -> MstfStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        fail(MstfStatus::Panic, msg)
    })
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(MstfStatus::NullPointer, concat!("`", stringify!($p), "` is null"));
        })+
    };
}

fn to_point(p: &MstfPoint) -> Result<TrajectoryPoint, MstfStatus> {
    let t = DateTime::from_timestamp(p.t_unix, 0)
        .ok_or_else(|| fail(MstfStatus::InvalidArgument, format!("timestamp {} out of range", p.t_unix)))?;
    Ok(TrajectoryPoint { t, lon: p.lon, lat: p.lat, sog: p.sog, cog: p.cog, heading: p.heading })
}

fn geo(lon: f64, lat: f64) -> Result<GeoPoint, MstfStatus> {
    GeoPoint::new(lon, lat).map_err(from_error)
}

/// Message of the last failing call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mstf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Meridional-plane earth radius in metres at `lat_deg`.
///
/// # Safety
/// `out` must be null or valid for one write.
#[no_mangle]
pub unsafe extern "C" fn mstf_earth_radius(lat_deg: f64, out: *mut f64) -> MstfStatus {
    non_null!(out);
    guard(|| match geodesy::earth_radius(lat_deg) {
        Ok(r) => {
            *out = r;
            MstfStatus::Ok
        }
        Err(e) => from_error(e),
    })
}

/// Great-circle distance in km.
///
/// # Safety
/// `out_km` must be null or valid for one write.
#[no_mangle]
pub unsafe extern "C" fn mstf_haversine_km(lon1: f64, lat1: f64, lon2: f64, lat2: f64, out_km: *mut f64) -> MstfStatus {
    non_null!(out_km);
    guard(|| {
        let (a, b) = match (geo(lon1, lat1), geo(lon2, lat2)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        *out_km = geodesy::haversine_km(a, b);
        MstfStatus::Ok
    })
}

/// Position after `dt_s` seconds at speed `sog` knots on course `cog` degrees.
///
/// # Safety
/// `out_lon` and `out_lat` must be null or valid for one write each.
#[no_mangle]
pub unsafe extern "C" fn mstf_propagate(
    lon: f64,
    lat: f64,
    sog: f64,
    cog: f64,
    dt_s: f64,
    out_lon: *mut f64,
    out_lat: *mut f64,
) -> MstfStatus {
    non_null!(out_lon, out_lat);
    guard(|| {
        let o = match geo(lon, lat) {
            Ok(o) => o,
            Err(s) => return s,
        };
        match geodesy::propagate(o, sog, cog, dt_s) {
            Ok(p) => {
                *out_lon = p.lon;
                *out_lat = p.lat;
                MstfStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Side length of the ATM grid rendered by [`mstf_atm`].
#[no_mangle]
pub extern "C" fn mstf_atm_size() -> usize {
    AtmConfig::default().size
}

/// Renders the ATM for one step with the default settings, row-major into
/// `out`, which must hold `mstf_atm_size()` squared values.
///
/// # Safety
/// `point` and `next` must be null or point to valid fixes; `out` must be null
/// or valid for `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn mstf_atm(point: *const MstfPoint, next: *const MstfPoint, out: *mut f64, out_len: usize) -> MstfStatus {
    non_null!(point, next, out);
    guard(|| {
        let cfg = AtmConfig::default();
        if out_len < cfg.size * cfg.size {
            return fail(MstfStatus::InvalidArgument, format!("ATM needs {} cells, buffer holds {out_len}", cfg.size * cfg.size));
        }
        let (p, n) = match (to_point(&*point), to_point(&*next)) {
            (Ok(p), Ok(n)) => (p, n),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let atm = build_atm(&p, &n, &cfg);
        let dst = std::slice::from_raw_parts_mut(out, out_len);
        for (d, v) in dst.iter_mut().zip(atm.cells.iter()) {
            *d = *v;
        }
        MstfStatus::Ok
    })
}

/// Loads a checkpoint written by `mstformer train`.
///
/// # Safety
/// `path` must be null or a NUL-terminated string; `out` must be null or valid
/// for one write. Release the model with [`mstf_model_free`].
#[no_mangle]
pub unsafe extern "C" fn mstf_model_load(path: *const c_char, out: *mut *mut MstfModel) -> MstfStatus {
    non_null!(path, out);
    guard(|| {
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            return fail(MstfStatus::InvalidArgument, "path is not UTF-8");
        };
        match checkpoint::load(Path::new(path)) {
            Ok(ck) => {
                *out = Box::into_raw(Box::new(MstfModel { ck }));
                MstfStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or come from [`mstf_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mstf_model_free(model: *mut MstfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Fixes a forecast needs: encoder length plus one.
///
/// # Safety
/// `model` must be null or a live model; null yields 0.
#[no_mangle]
pub unsafe extern "C" fn mstf_model_history_len(model: *const MstfModel) -> usize {
    model.as_ref().map_or(0, |m| m.ck.config.enc_len + 1)
}

/// Forecast steps produced per call; null yields 0.
///
/// # Safety
/// `model` must be null or a live model.
#[no_mangle]
pub unsafe extern "C" fn mstf_model_horizon_len(model: *const MstfModel) -> usize {
    model.as_ref().map_or(0, |m| m.ck.config.pred_len)
}

/// Forecasts (lon, lat) pairs from `history_len` evenly spaced fixes.
///
/// Writes `2 * mstf_model_horizon_len(model)` values to `out_lonlat`,
/// interleaved lon, lat. `seed` drives the sparse attention key sampling.
///
/// # Safety
/// `model` must be null or a live model, `history` null or valid for
/// `history_len` reads, `out_lonlat` null or valid for `out_len` writes.
#[no_mangle]
pub unsafe extern "C" fn mstf_model_forecast(
    model: *const MstfModel,
    history: *const MstfPoint,
    history_len: usize,
    seed: u64,
    out_lonlat: *mut f64,
    out_len: usize,
) -> MstfStatus {
    non_null!(model, history, out_lonlat);
    guard(|| {
        let m = &*model;
        let need = 2 * m.ck.config.pred_len;
        if out_len < need {
            return fail(MstfStatus::InvalidArgument, format!("forecast needs {need} values, buffer holds {out_len}"));
        }
        let pts: Result<Vec<_>, _> = std::slice::from_raw_parts(history, history_len).iter().map(to_point).collect();
        let pts = match pts {
            Ok(p) => p,
            Err(s) => return s,
        };
        match forecast(&m.ck.net, &m.ck.params, &m.ck.stats, &pts, seed) {
            Ok(track) => {
                let dst = std::slice::from_raw_parts_mut(out_lonlat, out_len);
                for (d, v) in dst.iter_mut().zip(track.iter()) {
                    *d = *v;
                }
                MstfStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}
