//! Spherical geodesy with a latitude-dependent WGS-84 radius.
//!
//! The Earth is treated as a sphere whose radius is re-evaluated at the
//! latitude of interest. Distances use the haversine form and the motion
//! model solves the great-circle forward problem. Angles are degrees at
//! the API boundary and radians internally.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Metres per second in one knot.
pub const KNOT_MS: f64 = 0.514444;

/// WGS-84 equatorial and polar radii in metres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wgs84Constants {
    pub equatorial_radius_m: f64,
    pub polar_radius_m: f64,
}

pub const WGS84: Wgs84Constants = Wgs84Constants {
    equatorial_radius_m: 6378137.0,
    polar_radius_m: 6356752.3142,
};

/// A position on the sphere in degrees, longitude east-positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
}

impl GeoPoint {
    /// Validates latitude and wraps longitude into [-180, 180].
    pub fn new(lon: f64, lat: f64) -> Result<Self> {
        if !lon.is_finite() || !lat.is_finite() {
            return Err(Error::Domain(format!("non-finite coordinate ({lon}, {lat})")));
        }
        check_lat(lat)?;
        Ok(Self { lon: normalize_lon(lon), lat })
    }
}

fn check_lat(lat: f64) -> Result<()> {
    if (-90.0..=90.0).contains(&lat) {
        Ok(())
    } else {
        Err(Error::Domain(format!("latitude {lat} outside [-90, 90]")))
    }
}

/// Wraps a longitude in degrees into [-180, 180].
pub fn normalize_lon(lon: f64) -> f64 {
    if (-180.0..=180.0).contains(&lon) {
        return lon;
    }
    let wrapped = (lon + 180.0).rem_euclid(360.0) - 180.0;
    if wrapped == -180.0 && lon > 0.0 {
        180.0
    } else {
        wrapped
    }
}

/// Wraps an angle in degrees into [0, 360).
pub fn wrap_360(deg: f64) -> f64 {
    let w = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

/// Shortest signed angular difference `to - from`, in (-180, 180].
pub fn signed_angle_diff(from: f64, to: f64) -> f64 {
    let d = (to - from).rem_euclid(360.0);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

/// Geocentric radius of the WGS-84 ellipsoid at `lat` degrees, in metres.
pub fn earth_radius(lat: f64) -> Result<f64> {
    check_lat(lat)?;
    Ok(earth_radius_rad(lat.to_radians()))
}

pub(crate) fn earth_radius_rad(lat: f64) -> f64 {
    let a = WGS84.equatorial_radius_m;
    let b = WGS84.polar_radius_m;
    let (s, c) = lat.sin_cos();
    let num = (a * a * c).hypot(b * b * s);
    let den = (a * c).hypot(b * s);
    num / den
}

/// Great-circle distance in kilometres, with the radius taken at `a.lat`.
pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let lat1 = a.lat.to_radians();
    let lat2 = b.lat.to_radians();
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    let h = h.clamp(0.0, 1.0);
    2.0 * earth_radius_rad(lat1) * h.sqrt().asin() / 1000.0
}

/// Initial great-circle bearing from `a` to `b`, degrees in [0, 360).
///
/// Coincident points have no defined bearing and return 0.
pub fn initial_bearing(a: GeoPoint, b: GeoPoint) -> f64 {
    let lat1 = a.lat.to_radians();
    let lat2 = b.lat.to_radians();
    let dlon = (b.lon - a.lon).to_radians();
    let y = dlon.sin() * lat2.cos();
    let x = lat1.cos() * lat2.sin() - lat1.sin() * lat2.cos() * dlon.cos();
    if y == 0.0 && x == 0.0 {
        return 0.0;
    }
    wrap_360(y.atan2(x).to_degrees())
}

/// Moves `origin` along course `cog` at `sog` knots for `duration` seconds.
///
/// The angular distance uses the radius at the origin latitude.
pub fn propagate(origin: GeoPoint, sog: f64, cog: f64, duration: f64) -> Result<GeoPoint> {
    if !(sog >= 0.0) || !sog.is_finite() {
        return Err(Error::Domain(format!("speed over ground must be >= 0, got {sog}")));
    }
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(Error::Domain(format!("duration must be > 0, got {duration}")));
    }
    if !cog.is_finite() {
        return Err(Error::Domain(format!("non-finite course {cog}")));
    }
    if sog == 0.0 {
        return Ok(origin);
    }
    let (lon, lat) = destination_rad(
        origin.lon.to_radians(),
        origin.lat.to_radians(),
        sog * KNOT_MS * duration,
        cog.to_radians(),
    );
    Ok(GeoPoint { lon: normalize_lon(lon.to_degrees()), lat: lat.to_degrees() })
}

/// Forward problem in radians; `distance_m` is divided by R(lat).
pub(crate) fn destination_rad(lon: f64, lat: f64, distance_m: f64, course: f64) -> (f64, f64) {
    let delta = distance_m / earth_radius_rad(lat);
    let (sin_lat, cos_lat) = lat.sin_cos();
    let (sin_d, cos_d) = delta.sin_cos();
    let sin_lat2 = (sin_lat * cos_d + cos_lat * sin_d * course.cos()).clamp(-1.0, 1.0);
    let lat2 = sin_lat2.asin();
    let lon2 = lon + (course.sin() * sin_d * cos_lat).atan2(cos_d - sin_lat * sin_lat2);
    (lon2, lat2)
}
