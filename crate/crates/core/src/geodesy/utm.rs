//! Universal Transverse Mercator forward projection on WGS84.
//!
//! Uses the sixth-order Krüger series in the third flattening, accurate to
//! well below a millimeter inside a zone.

use serde::{Deserialize, Serialize};

use super::{GeodeticPoint, WGS84_A, WGS84_F};

const K0: f64 = 0.9996;
const FALSE_EASTING: f64 = 500_000.0;
const FALSE_NORTHING_SOUTH: f64 = 10_000_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtmZone {
    pub number: u8,
    pub north: bool,
}

impl UtmZone {
    /// Standard 6° zone containing `(lat, lon)`; no Norway/Svalbard exceptions.
    pub fn containing(lat: f64, lon: f64) -> Self {
        let number = (((lon + 180.0) / 6.0).floor() as i64 + 1).clamp(1, 60) as u8;
        Self { number, north: lat >= 0.0 }
    }

    pub fn central_meridian(&self) -> f64 {
        f64::from(self.number) * 6.0 - 183.0
    }
}

impl std::fmt::Display for UtmZone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}{}", self.number, if self.north { 'N' } else { 'S' })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtmPoint {
    pub easting: f64,
    pub northing: f64,
}

struct Series {
    a_rect: f64,
    alpha: [f64; 6],
    ecc: f64,
}

fn series() -> Series {
    let n = WGS84_F / (2.0 - WGS84_F);
    let n2 = n * n;
    let n3 = n2 * n;
    let n4 = n3 * n;
    let n5 = n4 * n;
    let n6 = n5 * n;
    let a_rect = WGS84_A / (1.0 + n) * (1.0 + n2 / 4.0 + n4 / 64.0 + n6 / 256.0);
    let alpha = [
        n / 2.0 - 2.0 * n2 / 3.0 + 5.0 * n3 / 16.0 + 41.0 * n4 / 180.0 - 127.0 * n5 / 288.0
            + 7891.0 * n6 / 37800.0,
        13.0 * n2 / 48.0 - 3.0 * n3 / 5.0 + 557.0 * n4 / 1440.0 + 281.0 * n5 / 630.0
            - 1_983_433.0 * n6 / 1_935_360.0,
        61.0 * n3 / 240.0 - 103.0 * n4 / 140.0 + 15061.0 * n5 / 26880.0 + 167_603.0 * n6 / 181_440.0,
        49561.0 * n4 / 161_280.0 - 179.0 * n5 / 168.0 + 6_601_661.0 * n6 / 7_257_600.0,
        34729.0 * n5 / 80640.0 - 3_418_889.0 * n6 / 1_995_840.0,
        212_378_941.0 * n6 / 319_334_400.0,
    ];
    Series {
        a_rect,
        alpha,
        ecc: 2.0 * n.sqrt() / (1.0 + n),
    }
}

/// Project `g` into the given zone (which need not be the one containing it).
pub fn to_utm(g: GeodeticPoint, zone: UtmZone) -> UtmPoint {
    let s = series();
    let phi = g.lat.to_radians();
    let lam = (g.lon - zone.central_meridian()).to_radians();
    let sphi = phi.sin();
    let t = (sphi.atanh() - s.ecc * (s.ecc * sphi).atanh()).sinh();
    let xi_p = t.atan2(lam.cos());
    let eta_p = (lam.sin() / (1.0 + t * t).sqrt()).atanh();
    let mut xi = xi_p;
    let mut eta = eta_p;
    for (j, a) in s.alpha.iter().enumerate() {
        let k = 2.0 * (j as f64 + 1.0);
        xi += a * (k * xi_p).sin() * (k * eta_p).cosh();
        eta += a * (k * xi_p).cos() * (k * eta_p).sinh();
    }
    let false_northing = if zone.north { 0.0 } else { FALSE_NORTHING_SOUTH };
    UtmPoint {
        easting: FALSE_EASTING + K0 * s.a_rect * eta,
        northing: false_northing + K0 * s.a_rect * xi,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesy::WGS84_E2;

    // Snyder's USGS series (Map Projections, p. 61), an independent route.
    fn snyder(g: GeodeticPoint, zone: UtmZone) -> UtmPoint {
        let a = WGS84_A;
        let e2 = WGS84_E2;
        let ep2 = e2 / (1.0 - e2);
        let phi = g.lat.to_radians();
        let lam = (g.lon - zone.central_meridian()).to_radians();
        let n = a / (1.0 - e2 * phi.sin().powi(2)).sqrt();
        let t = phi.tan().powi(2);
        let c = ep2 * phi.cos().powi(2);
        let aa = lam * phi.cos();
        let e4 = e2 * e2;
        let e6 = e4 * e2;
        let m = a
            * ((1.0 - e2 / 4.0 - 3.0 * e4 / 64.0 - 5.0 * e6 / 256.0) * phi
                - (3.0 * e2 / 8.0 + 3.0 * e4 / 32.0 + 45.0 * e6 / 1024.0) * (2.0 * phi).sin()
                + (15.0 * e4 / 256.0 + 45.0 * e6 / 1024.0) * (4.0 * phi).sin()
                - (35.0 * e6 / 3072.0) * (6.0 * phi).sin());
        let x = K0
            * n
            * (aa + (1.0 - t + c) * aa.powi(3) / 6.0
                + (5.0 - 18.0 * t + t * t + 72.0 * c - 58.0 * ep2) * aa.powi(5) / 120.0);
        let y = K0
            * (m + n
                * phi.tan()
                * (aa * aa / 2.0
                    + (5.0 - t + 9.0 * c + 4.0 * c * c) * aa.powi(4) / 24.0
                    + (61.0 - 58.0 * t + t * t + 600.0 * c - 330.0 * ep2) * aa.powi(6) / 720.0));
        UtmPoint {
            easting: FALSE_EASTING + x,
            northing: if zone.north { y } else { y + FALSE_NORTHING_SOUTH },
        }
    }

    #[test]
    fn central_meridian_on_equator() {
        let zone = UtmZone::containing(0.0, 3.0);
        assert_eq!(zone.number, 31);
        let p = to_utm(GeodeticPoint::new(0.0, 3.0, 0.0), zone);
        assert!((p.easting - 500_000.0).abs() < 1e-9);
        assert!(p.northing.abs() < 1e-9);
    }

    #[test]
    fn matches_snyder_series() {
        for &(lat, lon) in &[(30.3, -81.66), (45.0, 9.2), (-33.9, 18.4), (60.1, 24.9), (5.0, -74.0)] {
            let zone = UtmZone::containing(lat, lon);
            let g = GeodeticPoint::new(lat, lon, 0.0);
            let a = to_utm(g, zone);
            let b = snyder(g, zone);
            assert!((a.easting - b.easting).abs() < 2e-3, "{lat},{lon}: {a:?} vs {b:?}");
            assert!((a.northing - b.northing).abs() < 2e-3, "{lat},{lon}: {a:?} vs {b:?}");
        }
    }

    #[test]
    fn zone_numbers() {
        assert_eq!(UtmZone::containing(30.3, -81.66).number, 17);
        assert_eq!(UtmZone::containing(-10.0, 179.9).number, 60);
        assert!(!UtmZone::containing(-10.0, 179.9).north);
        assert_eq!(UtmZone::containing(10.0, -180.0).number, 1);
    }
}
