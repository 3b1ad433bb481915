//! Spherical and toroidal geometry.
//!
//! Coordinates live in two spaces: the sphere (GPS latitude/longitude in
//! degrees) and the flat unit torus (year fraction, day fraction). This module
//! provides the great-circle metric, an equal-area pixelization of the sphere
//! (RING scheme, `12 * nside^2` cells on isolatitude rings), the
//! timestamp-to-torus mapping, the torus geodesic, and the 288 month-hour time
//! bins.

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Mean Earth radius in kilometers.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Number of month bins along the year axis.
pub const N_MONTH_BINS: usize = 12;
/// Number of hour bins along the day axis.
pub const N_HOUR_BINS: usize = 24;
/// Total number of time bins.
pub const N_TIME_BINS: usize = N_MONTH_BINS * N_HOUR_BINS;

/// A point on the sphere in degrees. Latitude is clamped nowhere: out-of-range
/// input is an error. Longitude is normalized into `[-180, 180)` on
/// construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoCoord {
    lat: f64,
    lon: f64,
}

impl GeoCoord {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(Error::Config(format!(
                "latitude {lat} outside [-90, 90]"
            )));
        }
        if !lon.is_finite() {
            return Err(Error::Config(format!("longitude {lon} is not finite")));
        }
        Ok(Self {
            lat,
            lon: wrap_lon(lon),
        })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

fn wrap_lon(lon: f64) -> f64 {
    // already-canonical values pass through untouched so round trips are exact
    if (-180.0..180.0).contains(&lon) {
        return lon;
    }
    let w = (lon + 180.0).rem_euclid(360.0) - 180.0;
    if w >= 180.0 {
        -180.0
    } else {
        w
    }
}

/// A point on the flat unit torus: `theta` is the year fraction, `phi` the day
/// fraction, both in `[0, 1)` with wrap-around (0 and 1 identified).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TorusTime {
    theta: f64,
    phi: f64,
}

impl TorusTime {
    /// Wraps both coordinates into `[0, 1)`.
    pub fn new(theta: f64, phi: f64) -> Result<Self> {
        if !theta.is_finite() || !phi.is_finite() {
            return Err(Error::Config(format!(
                "torus coordinates must be finite, got ({theta}, {phi})"
            )));
        }
        Ok(Self {
            theta: wrap_unit(theta),
            phi: wrap_unit(phi),
        })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }
}

fn wrap_unit(x: f64) -> f64 {
    let w = x.rem_euclid(1.0);
    // rem_euclid of a tiny negative can round up to exactly 1.0
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

/// Identifier of one equal-area sphere cell at resolution `nside`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellId {
    nside: u32,
    index: u64,
}

impl CellId {
    pub fn new(nside: u32, index: u64) -> Result<Self> {
        check_nside(nside)?;
        let n = n_cells(nside);
        if index >= n {
            return Err(Error::Config(format!(
                "cell index {index} out of range for nside {nside} ({n} cells)"
            )));
        }
        Ok(Self { nside, index })
    }

    pub fn nside(&self) -> u32 {
        self.nside
    }

    pub fn index(&self) -> u64 {
        self.index
    }
}

fn check_nside(nside: u32) -> Result<()> {
    if !nside.is_power_of_two() || nside > 64 {
        return Err(Error::Config(format!(
            "nside must be a power of two in [1, 64], got {nside}"
        )));
    }
    Ok(())
}

/// Number of cells at a given resolution: `12 * nside^2`.
pub fn n_cells(nside: u32) -> u64 {
    12 * nside as u64 * nside as u64
}

/// One of the 288 month-hour time bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TimeBinId {
    month: u8,
    hour: u8,
}

impl TimeBinId {
    pub fn new(month: u8, hour: u8) -> Result<Self> {
        if month >= N_MONTH_BINS as u8 || hour >= N_HOUR_BINS as u8 {
            return Err(Error::Config(format!(
                "time bin ({month}, {hour}) out of range"
            )));
        }
        Ok(Self { month, hour })
    }

    pub fn from_flat(index: usize) -> Result<Self> {
        if index >= N_TIME_BINS {
            return Err(Error::Config(format!("flat bin index {index} >= 288")));
        }
        Ok(Self {
            month: (index % N_MONTH_BINS) as u8,
            hour: (index / N_MONTH_BINS) as u8,
        })
    }

    pub fn month(&self) -> u8 {
        self.month
    }

    pub fn hour(&self) -> u8 {
        self.hour
    }

    /// Flat index `hour * 12 + month` in `[0, 288)`.
    pub fn flat(&self) -> usize {
        self.hour as usize * N_MONTH_BINS + self.month as usize
    }
}

/// A civil date-time with seconds resolution, interpreted as camera-local
/// time. Round-trips losslessly through `YYYY-MM-DDTHH:MM:SS`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Timestamp(NaiveDateTime);

impl Timestamp {
    pub fn from_ymd_hms(y: i32, mo: u32, d: u32, h: u32, mi: u32, s: u32) -> Result<Self> {
        NaiveDate::from_ymd_opt(y, mo, d)
            .and_then(|date| date.and_hms_opt(h, mi, s))
            .map(Timestamp)
            .ok_or_else(|| {
                Error::Config(format!(
                    "invalid date-time {y:04}-{mo:02}-{d:02}T{h:02}:{mi:02}:{s:02}"
                ))
            })
    }

    /// Builds a timestamp from a zero-based day of year and a second of day.
    pub fn from_day_and_second(year: i32, day: u32, second: u32) -> Result<Self> {
        let date = NaiveDate::from_yo_opt(year, day + 1)
            .ok_or_else(|| Error::Config(format!("day {day} out of range for year {year}")))?;
        let dt = date
            .and_hms_opt(second / 3600, (second / 60) % 60, second % 60)
            .ok_or_else(|| Error::Config(format!("second-of-day {second} out of range")))?;
        Ok(Timestamp(dt))
    }

    pub fn parse_iso(s: &str) -> Result<Self> {
        NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
            .map(Timestamp)
            .map_err(|e| Error::Config(format!("invalid timestamp {s:?}: {e}")))
    }

    pub fn to_iso(&self) -> String {
        self.0.format("%Y-%m-%dT%H:%M:%S").to_string()
    }

    pub fn year(&self) -> i32 {
        self.0.year()
    }

    /// Calendar month in `[1, 12]` (for human-readable reports; the torus bin
    /// month axis uses uniform twelfths of the year instead).
    pub fn calendar_month(&self) -> u32 {
        self.0.month()
    }
}

impl TryFrom<String> for Timestamp {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Timestamp::parse_iso(&s)
    }
}

impl From<Timestamp> for String {
    fn from(ts: Timestamp) -> String {
        ts.to_iso()
    }
}

impl std::fmt::Display for Timestamp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_iso())
    }
}

fn days_in_year(year: i32) -> u64 {
    if NaiveDate::from_ymd_opt(year, 2, 29).is_some() {
        366
    } else {
        365
    }
}

/// Great-circle distance in kilometers on a sphere of radius
/// [`EARTH_RADIUS_KM`].
pub fn haversine_km(a: GeoCoord, b: GeoCoord) -> f64 {
    let la = a.lat.to_radians();
    let lb = b.lat.to_radians();
    let dlat = lb - la;
    let dlon = (b.lon - a.lon).to_radians();
    let s = (dlat / 2.0).sin().powi(2) + la.cos() * lb.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * s.sqrt().min(1.0).asin()
}

/// Maps a timestamp to the unit torus: `theta` is the leap-aware fraction of
/// the year elapsed, `phi` the fraction of the day elapsed.
pub fn timestamp_to_torus(ts: Timestamp) -> TorusTime {
    let year_start = NaiveDate::from_ymd_opt(ts.0.year(), 1, 1)
        .expect("January 1 exists")
        .and_hms_opt(0, 0, 0)
        .expect("midnight exists");
    let elapsed = (ts.0 - year_start).num_seconds() as f64;
    let year_secs = (days_in_year(ts.0.year()) * 86_400) as f64;
    let theta = elapsed / year_secs;
    let phi = ts.0.num_seconds_from_midnight() as f64 / 86_400.0;
    TorusTime { theta, phi }
}

fn circular_delta(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    d.min(1.0 - d)
}

/// Geodesic distance on the flat unit torus:
/// `sqrt(sum over axes of min(1 - |delta|, |delta|)^2)`. Range `[0, sqrt(0.5)]`.
pub fn torus_distance(a: TorusTime, b: TorusTime) -> f64 {
    let dt = circular_delta(a.theta, b.theta);
    let dp = circular_delta(a.phi, b.phi);
    (dt * dt + dp * dp).sqrt()
}

/// Assigns a point to its equal-area cell (RING scheme).
pub fn geo_to_cell(c: GeoCoord, nside: u32) -> Result<CellId> {
    check_nside(nside)?;
    let z = c.lat.to_radians().sin();
    let mut phi = c.lon.to_radians();
    if phi < 0.0 {
        phi += std::f64::consts::TAU;
    }
    Ok(CellId {
        nside,
        index: ang2pix_ring(nside as u64, z, phi),
    })
}

/// Center of a cell (RING scheme). Inverse of [`geo_to_cell`] in the sense
/// that every center maps back to its own cell.
pub fn cell_center(id: CellId) -> GeoCoord {
    let (z, phi) = pix2ang_ring(id.nside as u64, id.index);
    let lat = z.clamp(-1.0, 1.0).asin().to_degrees();
    let lon = wrap_lon(phi.to_degrees());
    GeoCoord { lat, lon }
}

/// Assigns a torus point to its month-hour bin: `month = floor(theta * 12)`,
/// `hour = floor(phi * 24)`.
pub fn torus_to_bin(t: TorusTime) -> TimeBinId {
    let month = ((t.theta * N_MONTH_BINS as f64) as usize).min(N_MONTH_BINS - 1);
    let hour = ((t.phi * N_HOUR_BINS as f64) as usize).min(N_HOUR_BINS - 1);
    TimeBinId {
        month: month as u8,
        hour: hour as u8,
    }
}

/// Center of a time bin on the torus.
pub fn bin_center(b: TimeBinId) -> TorusTime {
    TorusTime {
        theta: (b.month as f64 + 0.5) / N_MONTH_BINS as f64,
        phi: (b.hour as f64 + 0.5) / N_HOUR_BINS as f64,
    }
}

// Equal-area pixelization on isolatitude rings, RING indexing. The sphere
// splits at |z| = 2/3 into two polar caps and an equatorial belt; cell
// boundaries are straight lines in the (phi, z) cylindrical projection for the
// belt and in the (phi, sqrt(1-|z|)) projection for the caps.

fn isqrt(n: u64) -> u64 {
    let mut r = (n as f64).sqrt() as u64;
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    while r * r > n {
        r -= 1;
    }
    r
}

fn ang2pix_ring(nside: u64, z: f64, phi: f64) -> u64 {
    let za = z.abs();
    // scaled azimuth in [0, 4)
    let tt = (phi.rem_euclid(std::f64::consts::TAU)) * 2.0 / std::f64::consts::PI;
    let tt = if tt >= 4.0 { 0.0 } else { tt };
    if za <= 2.0 / 3.0 {
        // equatorial belt
        let temp1 = nside as f64 * (0.5 + tt);
        let temp2 = nside as f64 * z * 0.75;
        let jp = (temp1 - temp2).floor() as i64;
        let jm = (temp1 + temp2).floor() as i64;
        let ir = nside as i64 + 1 + jp - jm;
        let kshift = 1 - (ir & 1);
        let nl4 = 4 * nside as i64;
        let ip = ((jp + jm - nside as i64 + kshift + 1) / 2).rem_euclid(nl4);
        let ncap = 2 * nside * (nside - 1);
        (ncap as i64 + (ir - 1) * nl4 + ip) as u64
    } else {
        // polar caps
        let tp = tt.fract();
        let tmp = nside as f64 * (3.0 * (1.0 - za)).sqrt();
        let jp = (tp * tmp).floor() as i64;
        let jm = ((1.0 - tp) * tmp).floor() as i64;
        let ir = (jp + jm + 1) as u64;
        let ip = ((tt * ir as f64).floor() as i64).rem_euclid(4 * ir as i64) as u64;
        if z > 0.0 {
            2 * ir * (ir - 1) + ip
        } else {
            12 * nside * nside - 2 * ir * (ir + 1) + ip
        }
    }
}

fn pix2ang_ring(nside: u64, pix: u64) -> (f64, f64) {
    use std::f64::consts::PI;
    let ncap = 2 * nside * (nside - 1);
    let npix = 12 * nside * nside;
    let fact2 = 4.0 / npix as f64;
    if pix < ncap {
        // north polar cap
        let iring = (1 + isqrt(1 + 2 * pix)) >> 1;
        let iphi = pix + 1 - 2 * iring * (iring - 1);
        let z = 1.0 - (iring * iring) as f64 * fact2;
        let phi = (iphi as f64 - 0.5) * PI / (2.0 * iring as f64);
        (z, phi)
    } else if pix < npix - ncap {
        // equatorial belt
        let fact1 = 2.0 * nside as f64 * fact2;
        let ip = pix - ncap;
        let iring = ip / (4 * nside) + nside;
        let iphi = ip % (4 * nside) + 1;
        let fodd = if (iring + nside) & 1 == 0 { 0.5 } else { 1.0 };
        let z = (2 * nside) as f64 * fact1 - iring as f64 * fact1;
        let phi = (iphi as f64 - fodd) * PI / (2.0 * nside as f64);
        (z, phi)
    } else {
        // south polar cap
        let ip = npix - pix;
        let iring = (1 + isqrt(2 * ip - 1)) >> 1;
        let iphi = 4 * iring + 1 - (ip - 2 * iring * (iring - 1));
        let z = -1.0 + (iring * iring) as f64 * fact2;
        let phi = (iphi as f64 - 0.5) * PI / (2.0 * iring as f64);
        (z, phi)
    }
}
