//! WGS84 geodetic/ECEF conversions, the local east-north-up frame of a
//! scene, and the offset/scale normalization that maps the scene volume
//! into `[-1, 1]^3`.

pub mod utm;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{self, Mat3, Vec3};

/// WGS84 semi-major axis in meters.
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
/// WGS84 semi-minor axis in meters.
pub const WGS84_B: f64 = WGS84_A * (1.0 - WGS84_F);
/// First eccentricity squared.
pub const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);

const LAT_TOLERANCE_RAD: f64 = 1e-12;
const MAX_ITERATIONS: usize = 50;
/// Scale floor applied per axis when the fitted point set has no extent.
pub const SCALE_FLOOR_M: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeodesyError {
    #[error("geodetic inversion did not converge after {0} iterations")]
    NonConvergence(usize),
    #[error("invalid point: {0}")]
    InvalidPoint(String),
    #[error("cannot fit a normalization to an empty point set")]
    DegenerateExtent,
}

/// Latitude/longitude in degrees, altitude in meters above the ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeodeticPoint {
    pub lat: f64,
    pub lon: f64,
    pub alt: f64,
}

impl GeodeticPoint {
    pub fn new(lat: f64, lon: f64, alt: f64) -> Self {
        Self { lat, lon, alt }
    }

    pub fn validate(&self) -> Result<(), GeodesyError> {
        if !(self.lat.is_finite() && self.lon.is_finite() && self.alt.is_finite()) {
            return Err(GeodesyError::InvalidPoint(format!("{self:?} is not finite")));
        }
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return Err(GeodesyError::InvalidPoint(format!("{self:?} outside lat/lon range")));
        }
        Ok(())
    }
}

/// Earth-centered, Earth-fixed Cartesian coordinates in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcefPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl EcefPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_array(self) -> Vec3 {
        [self.x, self.y, self.z]
    }

    pub fn from_array(v: Vec3) -> Self {
        Self { x: v[0], y: v[1], z: v[2] }
    }
}

/// Closed-form WGS84 forward conversion.
pub fn geodetic_to_ecef(g: GeodeticPoint) -> EcefPoint {
    let lat = g.lat.to_radians();
    let lon = g.lon.to_radians();
    let (slat, clat) = lat.sin_cos();
    let (slon, clon) = lon.sin_cos();
    let n = WGS84_A / (1.0 - WGS84_E2 * slat * slat).sqrt();
    EcefPoint {
        x: (n + g.alt) * clat * clon,
        y: (n + g.alt) * clat * slon,
        z: (n * (1.0 - WGS84_E2) + g.alt) * slat,
    }
}

/// Iterative inverse by latitude refinement.
///
/// Longitude is reported as 0 on the polar axis, where it is undefined.
pub fn ecef_to_geodetic(e: EcefPoint) -> Result<GeodeticPoint, GeodesyError> {
    if !(e.x.is_finite() && e.y.is_finite() && e.z.is_finite()) {
        return Err(GeodesyError::InvalidPoint(format!("{e:?} is not finite")));
    }
    let p = e.x.hypot(e.y);
    let lon = if p == 0.0 { 0.0 } else { e.y.atan2(e.x) };
    if p == 0.0 {
        let lat: f64 = if e.z >= 0.0 { 90.0 } else { -90.0 };
        return Ok(GeodeticPoint {
            lat,
            lon: 0.0,
            alt: e.z.abs() - WGS84_B,
        });
    }

    let mut lat = e.z.atan2(p * (1.0 - WGS84_E2));
    for _ in 0..MAX_ITERATIONS {
        let slat = lat.sin();
        let n = WGS84_A / (1.0 - WGS84_E2 * slat * slat).sqrt();
        let alt = altitude_at(p, e.z, lat, n);
        let next = e.z.atan2(p * (1.0 - WGS84_E2 * n / (n + alt)));
        let step = (next - lat).abs();
        lat = next;
        if step < LAT_TOLERANCE_RAD {
            let slat = lat.sin();
            let n = WGS84_A / (1.0 - WGS84_E2 * slat * slat).sqrt();
            return Ok(GeodeticPoint {
                lat: lat.to_degrees(),
                lon: lon.to_degrees(),
                alt: altitude_at(p, e.z, lat, n),
            });
        }
    }
    Err(GeodesyError::NonConvergence(MAX_ITERATIONS))
}

// Altitude from whichever of cos/sin is better conditioned.
fn altitude_at(p: f64, z: f64, lat: f64, n: f64) -> f64 {
    let (slat, clat) = lat.sin_cos();
    if clat.abs() > std::f64::consts::FRAC_1_SQRT_2 {
        p / clat - n
    } else {
        z / slat - n * (1.0 - WGS84_E2)
    }
}

/// Rotation whose rows are the east, north and up unit vectors at `(lat, lon)`.
pub fn ecef_to_enu_rotation(lat_deg: f64, lon_deg: f64) -> Mat3 {
    let (slat, clat) = lat_deg.to_radians().sin_cos();
    let (slon, clon) = lon_deg.to_radians().sin_cos();
    [
        [-slon, clon, 0.0],
        [-slat * clon, -slat * slon, clat],
        [clat * clon, clat * slon, slat],
    ]
}

/// Offset subtraction and scaling into the normalized scene volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneNormalization {
    pub offset: Vec3,
    pub scale: Vec3,
    pub h_min: f64,
    pub h_max: f64,
}

impl SceneNormalization {
    pub fn normalize(&self, p: EcefPoint) -> Vec3 {
        let v = p.to_array();
        [
            (v[0] - self.offset[0]) / self.scale[0],
            (v[1] - self.offset[1]) / self.scale[1],
            (v[2] - self.offset[2]) / self.scale[2],
        ]
    }

    pub fn denormalize(&self, v: Vec3) -> EcefPoint {
        EcefPoint {
            x: v[0] * self.scale[0] + self.offset[0],
            y: v[1] * self.scale[1] + self.offset[1],
            z: v[2] * self.scale[2] + self.offset[2],
        }
    }

    /// Length in meters of a normalized length (the scale is isotropic).
    pub fn to_meters(&self, len: f64) -> f64 {
        len * self.scale[0]
    }

    pub fn to_normalized_length(&self, meters: f64) -> f64 {
        meters / self.scale[0]
    }
}

/// Fit offset and scale so that every input point lands in `[-1, 1]^3`.
///
/// The offset is the per-axis midpoint of the bounding box; the scale is the
/// largest half-extent, shared by all three axes so that directions survive
/// the mapping unchanged. A point set with no extent gets `SCALE_FLOOR_M`.
pub fn fit_normalization(
    points: &[EcefPoint],
    h_min: f64,
    h_max: f64,
) -> Result<SceneNormalization, GeodesyError> {
    if points.is_empty() {
        return Err(GeodesyError::DegenerateExtent);
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        let v = p.to_array();
        for k in 0..3 {
            lo[k] = lo[k].min(v[k]);
            hi[k] = hi[k].max(v[k]);
        }
    }
    let offset = [
        0.5 * (lo[0] + hi[0]),
        0.5 * (lo[1] + hi[1]),
        0.5 * (lo[2] + hi[2]),
    ];
    let half = (0..3)
        .map(|k| 0.5 * (hi[k] - lo[k]))
        .fold(0.0_f64, f64::max)
        .max(SCALE_FLOOR_M);
    // Guard against the midpoint rounding pushing an extreme point past 1.
    let mut scale = half;
    for p in points {
        let v = p.to_array();
        for k in 0..3 {
            let r = (v[k] - offset[k]).abs();
            if r / scale > 1.0 {
                scale = r;
            }
        }
    }
    Ok(SceneNormalization {
        offset,
        scale: [scale; 3],
        h_min,
        h_max,
    })
}

/// Local east-north-up frame anchored at the scene footprint center,
/// together with the normalization and the scene box.
///
/// ENU "up" coordinates are measured from the ellipsoid at the anchor, so
/// they match ellipsoidal altitude to within `r^2 / 2R` (sub-millimeter
/// over a few hundred meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneFrame {
    pub origin: GeodeticPoint,
    pub normalization: SceneNormalization,
    /// East/north bounds of the footprint in meters: `[e_min, e_max, n_min, n_max]`.
    pub footprint: [f64; 4],
    ecef_to_enu: Mat3,
    origin_ecef: Vec3,
}

impl SceneFrame {
    /// `origin.alt` is ignored; the frame sits on the ellipsoid.
    pub fn new(origin: GeodeticPoint, normalization: SceneNormalization, footprint: [f64; 4]) -> Self {
        let origin = GeodeticPoint { alt: 0.0, ..origin };
        Self {
            origin,
            normalization,
            footprint,
            ecef_to_enu: ecef_to_enu_rotation(origin.lat, origin.lon),
            origin_ecef: geodetic_to_ecef(origin).to_array(),
        }
    }

    /// Build the frame from the ECEF boundary points the normalization was
    /// fitted on: anchor under the normalization center, footprint from
    /// their east/north extent.
    pub fn from_boundary_points(
        normalization: SceneNormalization,
        points: &[EcefPoint],
    ) -> Result<Self, GeodesyError> {
        let center = ecef_to_geodetic(EcefPoint::from_array(normalization.offset))?;
        let mut frame = Self::new(center, normalization, [0.0; 4]);
        let mut fp = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
        for p in points {
            let enu = frame.ecef_to_enu(*p);
            fp[0] = fp[0].min(enu[0]);
            fp[1] = fp[1].max(enu[0]);
            fp[2] = fp[2].min(enu[1]);
            fp[3] = fp[3].max(enu[1]);
        }
        frame.footprint = fp;
        Ok(frame)
    }

    pub fn ecef_to_enu(&self, p: EcefPoint) -> Vec3 {
        math::mat_vec(&self.ecef_to_enu, math::sub(p.to_array(), self.origin_ecef))
    }

    pub fn enu_to_ecef(&self, enu: Vec3) -> EcefPoint {
        let r = math::transpose(&self.ecef_to_enu);
        EcefPoint::from_array(math::add(self.origin_ecef, math::mat_vec(&r, enu)))
    }

    /// Rotate an ENU direction into the (isotropically scaled) normalized frame.
    pub fn enu_dir_to_normalized(&self, v: Vec3) -> Vec3 {
        math::mat_vec(&math::transpose(&self.ecef_to_enu), v)
    }

    pub fn normalized_dir_to_enu(&self, v: Vec3) -> Vec3 {
        math::mat_vec(&self.ecef_to_enu, v)
    }

    pub fn enu_to_normalized(&self, enu: Vec3) -> Vec3 {
        self.normalization.normalize(self.enu_to_ecef(enu))
    }

    pub fn normalized_to_enu(&self, v: Vec3) -> Vec3 {
        self.ecef_to_enu(self.normalization.denormalize(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equator_and_pole() {
        let e = geodetic_to_ecef(GeodeticPoint::new(0.0, 0.0, 0.0));
        assert_eq!(e, EcefPoint::new(6_378_137.0, 0.0, 0.0));
        let p = geodetic_to_ecef(GeodeticPoint::new(90.0, 0.0, 0.0));
        assert!(p.x.abs() < 1e-9 && p.y.abs() < 1e-9);
        assert!((p.z - 6_356_752.314245).abs() < 1e-6);
    }

    #[test]
    fn forward_reference_point() {
        // Frozen from an independent evaluation of the closed form with
        // N = a / sqrt(1 - e2 sin^2(lat)) in extended precision.
        let e = geodetic_to_ecef(GeodeticPoint::new(45.0, 45.0, 100.0));
        assert!((e.x - 3_194_469.145_060_574).abs() < 1e-6, "{}", e.x);
        assert!((e.y - 3_194_469.145_060_574).abs() < 1e-6, "{}", e.y);
        assert!((e.z - 4_487_419.119_544_039).abs() < 1e-6, "{}", e.z);
    }

    #[test]
    fn pole_inverse_defines_longitude_zero() {
        let g = ecef_to_geodetic(EcefPoint::new(0.0, 0.0, 6_356_752.314245)).unwrap();
        assert_eq!(g.lat, 90.0);
        assert_eq!(g.lon, 0.0);
        assert!(g.alt.abs() < 1e-6);
    }

    #[test]
    fn equator_round_trip() {
        let g = ecef_to_geodetic(geodetic_to_ecef(GeodeticPoint::new(0.0, 0.0, 0.0))).unwrap();
        assert!(g.lat.abs() < 1e-12 && g.lon.abs() < 1e-12 && g.alt.abs() < 1e-6);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            ecef_to_geodetic(EcefPoint::new(f64::NAN, 0.0, 0.0)),
            Err(GeodesyError::InvalidPoint(_))
        ));
    }

    #[test]
    fn normalization_examples() {
        let pts = [EcefPoint::new(0.0, 0.0, 0.0), EcefPoint::new(2.0, 2.0, 2.0)];
        let n = fit_normalization(&pts, 0.0, 1.0).unwrap();
        assert_eq!(n.offset, [1.0, 1.0, 1.0]);
        assert_eq!(n.scale, [1.0, 1.0, 1.0]);
        assert_eq!(n.normalize(EcefPoint::new(1.0, 1.0, 1.0)), [0.0, 0.0, 0.0]);
        assert_eq!(n.normalize(EcefPoint::new(2.0, 2.0, 2.0)), [1.0, 1.0, 1.0]);

        let one = [EcefPoint::new(5.0, -3.0, 7.0); 3];
        let n = fit_normalization(&one, 0.0, 1.0).unwrap();
        assert_eq!(n.scale, [SCALE_FLOOR_M; 3]);
        assert_eq!(n.offset, [5.0, -3.0, 7.0]);

        assert_eq!(fit_normalization(&[], 0.0, 1.0), Err(GeodesyError::DegenerateExtent));
    }

    #[test]
    fn isotropic_scale_uses_largest_axis() {
        let pts = [EcefPoint::new(0.0, 0.0, 0.0), EcefPoint::new(10.0, 4.0, 2.0)];
        let n = fit_normalization(&pts, 0.0, 1.0).unwrap();
        assert_eq!(n.scale, [5.0; 3]);
        assert_eq!(n.normalize(pts[1]), [1.0, 0.4, 0.2]);
    }

    #[test]
    fn enu_frame_axes() {
        let origin = GeodeticPoint::new(30.0, -81.0, 0.0);
        let ecef = geodetic_to_ecef(origin);
        let norm = fit_normalization(&[ecef], 0.0, 1.0).unwrap();
        let frame = SceneFrame::new(origin, norm, [0.0; 4]);
        let up = frame.enu_to_ecef([0.0, 0.0, 10.0]);
        let g = ecef_to_geodetic(up).unwrap();
        assert!((g.alt - 10.0).abs() < 1e-8);
        assert!((g.lat - 30.0).abs() < 1e-12 && (g.lon + 81.0).abs() < 1e-12);
        let north = ecef_to_geodetic(frame.enu_to_ecef([0.0, 100.0, 0.0])).unwrap();
        assert!(north.lat > 30.0 && (north.lon + 81.0).abs() < 1e-12);
        let back = frame.ecef_to_enu(frame.enu_to_ecef([3.0, -4.0, 5.0]));
        for (a, b) in back.iter().zip([3.0, -4.0, 5.0]) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}
