//! Geodesy, RPC cameras and ray construction against closed-form oracles.

mod common;

use proptest::prelude::*;
use rand::Rng;
use satnerf_core::data::{fit_scene_frame, sun_direction_enu};
use satnerf_core::geodesy::utm::{to_utm, UtmZone};
use satnerf_core::geodesy::{ecef_to_geodetic, fit_normalization, geodetic_to_ecef, EcefPoint, GeodeticPoint, WGS84_A, WGS84_E2};
use satnerf_core::math;
use satnerf_core::ray::{build_ray, sample_points_seeded};
use satnerf_core::rpc::{PixelCoord, RpcModel};
use satnerf_core::synth::{fabricate_rpc, SceneSpec};

/// Textbook geodetic to ECEF.
fn ecef_oracle(lat: f64, lon: f64, h: f64) -> [f64; 3] {
    let (p, l) = (lat.to_radians(), lon.to_radians());
    let n = WGS84_A / (1.0 - WGS84_E2 * p.sin() * p.sin()).sqrt();
    [(n + h) * p.cos() * l.cos(), (n + h) * p.cos() * l.sin(), (n * (1.0 - WGS84_E2) + h) * p.sin()]
}

proptest! {
    #[test]
    fn ecef_matches_closed_form(lat in -89.9f64..89.9, lon in -180.0f64..180.0, h in -500.0f64..9000.0) {
        let e = geodetic_to_ecef(GeodeticPoint::new(lat, lon, h)).to_array();
        let o = ecef_oracle(lat, lon, h);
        for k in 0..3 {
            prop_assert!((e[k] - o[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn geodetic_round_trip(lat in -89.9f64..89.9, lon in -180.0f64..180.0, h in -500.0f64..9000.0) {
        let g = ecef_to_geodetic(geodetic_to_ecef(GeodeticPoint::new(lat, lon, h))).unwrap();
        prop_assert!((g.lat - lat).abs() < 1e-9);
        prop_assert!((g.lon - lon).abs() < 1e-9);
        prop_assert!((g.alt - h).abs() < 1e-6);
    }

    #[test]
    fn normalization_contains_and_inverts(
        pts in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3, -1e3f64..1e3), 1..40),
    ) {
        let base = [4.2e6, -9.1e5, 4.7e6];
        let ecef: Vec<EcefPoint> = pts.iter().map(|&(x, y, z)| EcefPoint::new(base[0] + x, base[1] + y, base[2] + z)).collect();
        let n = fit_normalization(&ecef, 0.0, 1.0).unwrap();
        for p in &ecef {
            let v = n.normalize(*p);
            prop_assert!(v.iter().all(|c| c.abs() <= 1.0));
            let back = n.denormalize(v).to_array();
            let orig = p.to_array();
            for k in 0..3 {
                prop_assert!((back[k] - orig[k]).abs() <= 1e-12 * orig[k].abs());
            }
        }
    }

    #[test]
    fn cubic_rpc_round_trip(view in 0usize..10, seed in 0u64..1000, row in 0.0f64..63.0, col in 0.0f64..63.0, alt in 96.0f64..118.0) {
        let rpc = common::cubic_rpc(view, seed);
        let g = rpc.localize(PixelCoord::new(row, col), alt).unwrap();
        let px = rpc.project(g).unwrap();
        prop_assert!((px.row - row).abs() < 1e-6 && (px.col - col).abs() < 1e-6);
    }

    #[test]
    fn projection_is_cubic(seed in 0u64..1000, p in -0.5f64..0.5, l in -0.5f64..0.5, h in -0.5f64..0.5, axis in 0usize..3) {
        // With unit denominators the ratio is the numerator, a cubic: its
        // fourth forward difference vanishes.
        let mut rpc = common::cubic_rpc(3, seed);
        rpc.line_den = [0.0; 20];
        rpc.line_den[0] = 1.0;
        let step = 0.1;
        let at = |k: f64| {
            let mut x = [p, l, h];
            x[axis] += k * step;
            rpc.project_normalized(x[0], x[1], x[2]).unwrap().0
        };
        let d4 = at(4.0) - 4.0 * at(3.0) + 6.0 * at(2.0) - 4.0 * at(1.0) + at(0.0);
        prop_assert!(d4.abs() < 1e-9, "{d4:e}");
    }

    #[test]
    fn rpc_text_is_lossless(seed in 0u64..1000) {
        let rpc = common::cubic_rpc(5, seed);
        let back = RpcModel::parse(&rpc.to_text()).unwrap();
        prop_assert_eq!(&rpc.line_num, &back.line_num);
        prop_assert_eq!(&rpc.samp_den, &back.samp_den);
        prop_assert_eq!(rpc.lat_off, back.lat_off);
        prop_assert_eq!(rpc.alt_scale, back.alt_scale);
    }

    #[test]
    fn unjittered_samples_ignore_seed(view in 0usize..10, row in 0.0f64..63.0, col in 0.0f64..63.0, a in any::<u64>(), b in any::<u64>()) {
        let (frame, rpcs) = desk_frame();
        let ray = build_ray(&rpcs[view], PixelCoord::new(row, col), &frame, [0.0, 0.0, -1.0], view, [0.0; 3]).unwrap();
        let s = sample_points_seeded(&ray, 32, false, a);
        prop_assert_eq!(&s, &sample_points_seeded(&ray, 32, false, b));
        prop_assert_eq!(&s, &sample_points_seeded(&ray, 32, false, a));
    }
}

fn desk_frame() -> (satnerf_core::SceneFrame, Vec<RpcModel>) {
    let spec = SceneSpec::default();
    let rpcs: Vec<RpcModel> = spec.views.iter().map(|v| fabricate_rpc(&spec, v)).collect();
    let cams: Vec<_> = rpcs.iter().map(|r| (r, spec.image_size, spec.image_size)).collect();
    (fit_scene_frame(&cams, spec.h_min(), spec.h_max()).unwrap(), rpcs)
}

#[test]
fn ray_endpoints_are_the_localized_pixel() {
    let (frame, rpcs) = desk_frame();
    let n = &frame.normalization;
    let mut rng = common::rng(4);
    let mut worst: f64 = 0.0;
    for _ in 0..2000 {
        let j = rng.random_range(0..rpcs.len());
        let px = PixelCoord::new(rng.random_range(0.0..63.0), rng.random_range(0.0..63.0));
        let ray = build_ray(&rpcs[j], px, &frame, [0.0, 0.0, -1.0], j, [0.0; 3]).unwrap();
        let top = n.normalize(geodetic_to_ecef(rpcs[j].localize(px, n.h_max).unwrap()));
        let bottom = n.normalize(geodetic_to_ecef(rpcs[j].localize(px, n.h_min).unwrap()));
        worst = worst.max(math::norm(math::sub(ray.origin, top))).max(math::norm(math::sub(ray.end(), bottom)));
        assert!((math::norm(ray.dir) - 1.0).abs() < 1e-12);
    }
    assert!(worst < 1e-12, "{worst:e}");
}

#[test]
fn samples_stay_in_the_unit_cube_and_reproject() {
    let (frame, rpcs) = desk_frame();
    let n = &frame.normalization;
    let mut rng = common::rng(5);
    let mut worst_px: f64 = 0.0;
    for _ in 0..300 {
        let j = rng.random_range(0..rpcs.len());
        let px = PixelCoord::new(rng.random_range(0.0..63.0), rng.random_range(0.0..63.0));
        let ray = build_ray(&rpcs[j], px, &frame, [0.0, 0.0, -1.0], j, [0.0; 3]).unwrap();
        let s = sample_points_seeded(&ray, 16, true, rng.random());
        for p in &s.points {
            assert!(p.iter().all(|c| c.abs() <= 1.0 + 1e-12), "{p:?}");
            let g = ecef_to_geodetic(n.denormalize(*p)).unwrap();
            let back = rpcs[j].project(g).unwrap();
            worst_px = worst_px.max((back.row - px.row).abs()).max((back.col - px.col).abs());
        }
    }
    // The camera rays are straight in ECEF while the affine cameras are
    // straight in geodetic coordinates; the gap stays far below a pixel.
    assert!(worst_px < 1e-4, "{worst_px:e}");
}

#[test]
fn nadir_rays_reproject_exactly() {
    let (frame, rpcs) = desk_frame();
    let n = &frame.normalization;
    let mut worst: f64 = 0.0;
    for row in 0..8 {
        for col in 0..8 {
            let px = PixelCoord::new(row as f64 * 9.0, col as f64 * 9.0);
            let ray = build_ray(&rpcs[0], px, &frame, [0.0, 0.0, -1.0], 0, [0.0; 3]).unwrap();
            for t in sample_points_seeded(&ray, 8, false, 0).points {
                let back = rpcs[0].project(ecef_to_geodetic(n.denormalize(t)).unwrap()).unwrap();
                worst = worst.max((back.row - px.row).abs()).max((back.col - px.col).abs());
            }
        }
    }
    assert!(worst < 1e-8, "{worst:e}");
}

#[test]
fn utm_reference_points() {
    // On the central meridian at the equator: false easting, zero northing.
    let zone = UtmZone { number: 31, north: true };
    let p = to_utm(GeodeticPoint::new(0.0, 3.0, 0.0), zone);
    assert!((p.easting - 500_000.0).abs() < 1e-6 && p.northing.abs() < 1e-6);
    // Meridian arc to 45N scaled by k0 = 0.9996.
    let p = to_utm(GeodeticPoint::new(45.0, 3.0, 0.0), zone);
    assert!((p.northing - 0.9996 * 4_984_944.378).abs() < 1e-2, "{}", p.northing);
    // A degree east of the meridian at 45N: easting from the closed-form
    // series to first order, 500 km + k0 * N cos(lat) * dlon ~ 578.8 km.
    let p = to_utm(GeodeticPoint::new(45.0, 4.0, 0.0), zone);
    assert!((p.easting - 578_815.0).abs() < 5.0, "{}", p.easting);
}

#[test]
fn sun_azimuth_is_clockwise_from_north() {
    // Sun in the east at 30 degrees: light travels west and down.
    let d = sun_direction_enu(90.0, 30.0).unwrap();
    assert!((d[0] + 30f64.to_radians().cos()).abs() < 1e-12);
    assert!(d[1].abs() < 1e-12);
    assert!((d[2] + 0.5).abs() < 1e-12);
    assert!(sun_direction_enu(10.0, 0.0).is_err());
}
