//! Volume rendering and network heads against naive loop oracles.

mod common;

use proptest::prelude::*;
use rand::Rng;
use satnerf_core::exec::Execution;
use satnerf_core::math::normalize;
use satnerf_core::network::{NetworkConfig, NetworkParams, PointBatch};
use satnerf_core::ray::{sample_points_seeded, Ray};
use satnerf_core::render::{
    alpha_transmittance, composite_color, composite_depth, composite_heads, composite_uncertainty, irradiance, ray_heads,
    render_ray, render_rays, weights,
};
use satnerf_core::rpc::PixelCoord;
use satnerf_core::Vec3;

fn net(width: usize, n_images: usize, seed: u64) -> NetworkParams {
    let cfg = NetworkConfig { width, depth_main: 4, n_images, seed, embedding_std: 0.3, ..Default::default() };
    NetworkParams::init(&cfg).unwrap()
}

fn random_ray(rng: &mut impl Rng, image: usize) -> Ray {
    Ray {
        origin: [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), 0.9],
        dir: normalize([rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), -1.0]).unwrap(),
        t_min: 0.0,
        t_max: 1.6,
        sun_dir: normalize([rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), -1.0]).unwrap(),
        image_index: image,
        pixel: PixelCoord::new(0.0, 0.0),
        gt_color: [0.5; 3],
    }
}

fn unit_dir(rng: &mut impl Rng) -> Vec3 {
    normalize([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..-0.1)]).unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

#[test]
fn compositing_matches_naive_loops() {
    let mut rng = common::rng(1);
    for _ in 0..2000 {
        let n = rng.random_range(1..48);
        let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..60.0)).collect();
        let delta: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.1)).collect();
        let colors: Vec<Vec3> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let t_vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.03).collect();
        let beta: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
        let (alpha, t) = alpha_transmittance(&sigma, &delta);

        let mut rgb = [0.0; 3];
        let (mut depth, mut b) = (0.0, 0.0);
        for i in 0..n {
            let a = 1.0 - (-sigma[i] * delta[i]).exp();
            let mut optical = 0.0;
            for j in 0..i {
                optical += sigma[j] * delta[j];
            }
            let ti = (-optical).exp();
            assert!(close(alpha[i], a) && close(t[i], ti));
            for k in 0..3 {
                rgb[k] += ti * a * colors[i][k];
            }
            depth += ti * a * t_vals[i];
            b += ti * a * beta[i];
        }
        let c = composite_color(&t, &alpha, &colors);
        assert!((0..3).all(|k| close(c[k], rgb[k])));
        assert!(close(composite_depth(&t, &alpha, &t_vals), depth));
        assert!(close(composite_uncertainty(&t, &alpha, &beta), b));
    }
}

#[test]
fn irradiance_matches_formula() {
    let mut rng = common::rng(2);
    for _ in 0..10_000 {
        let ca: Vec3 = [rng.random(), rng.random(), rng.random()];
        let amb: Vec3 = [rng.random(), rng.random(), rng.random()];
        let s: f64 = rng.random();
        let c = irradiance(ca, s, amb);
        for k in 0..3 {
            assert!(close(c[k], ca[k] * s + ca[k] * (1.0 - s) * amb[k]));
        }
    }
}

#[test]
fn transmittance_is_monotone_and_weights_sum_below_one() {
    let mut rng = common::rng(3);
    for _ in 0..100_000 {
        let n = rng.random_range(1..32);
        let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..100.0) * rng.random::<f64>().powi(3)).collect();
        let delta: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.2)).collect();
        let (alpha, t) = alpha_transmittance(&sigma, &delta);
        assert!(t.windows(2).all(|w| w[1] <= w[0]));
        let total: f64 = weights(&t, &alpha).iter().sum();
        let closed = 1.0 - alpha.iter().map(|a| 1.0 - a).product::<f64>();
        assert!(total <= 1.0 + 1e-12);
        assert!((total - closed).abs() <= 1e-12);
    }
}

proptest! {
    #[test]
    fn raising_density_never_raises_later_transmittance(
        sigma in prop::collection::vec(0.0f64..50.0, 2..24),
        pick in any::<prop::sample::Index>(),
        bump in 0.0f64..50.0,
    ) {
        let delta = vec![0.05; sigma.len()];
        let i = pick.index(sigma.len());
        let (_, t0) = alpha_transmittance(&sigma, &delta);
        let mut raised = sigma.clone();
        raised[i] += bump;
        let (_, t1) = alpha_transmittance(&raised, &delta);
        for k in i + 1..sigma.len() {
            prop_assert!(t1[k] <= t0[k]);
        }
    }
}

#[test]
fn tape_render_equals_piecewise_composition() {
    let p = net(16, 3, 4);
    let mut rng = common::rng(4);
    for shading in [true, false] {
        for i in 0..50 {
            let ray = random_ray(&mut rng, i % 3);
            let s = sample_points_seeded(&ray, 24, true, i as u64);
            let a = render_ray(&p, &ray, &s, shading).unwrap();
            let b = composite_heads(&s, &ray_heads(&p, &ray, &s).unwrap(), shading);
            assert!((0..3).all(|k| close(a.color[k], b.color[k])));
            assert!(close(a.depth, b.depth) && close(a.beta, b.beta) && close(a.sun_vis, b.sun_vis));
            for k in 0..24 {
                assert!(close(a.transmittance[k], b.transmittance[k]) && close(a.weights[k], b.weights[k]));
            }
        }
    }
}

#[test]
fn chunked_render_is_bit_identical_to_single_rays() {
    let p = net(16, 2, 5);
    let mut rng = common::rng(5);
    let rays: Vec<Ray> = (0..40).map(|i| random_ray(&mut rng, i % 2)).collect();
    let samples: Vec<_> = rays.iter().enumerate().map(|(i, r)| sample_points_seeded(r, 16, true, i as u64)).collect();
    for exec in [Execution::Sequential, Execution::Parallel] {
        let batch = render_rays(&p, &rays, &samples, true, 7, exec).unwrap();
        for (i, r) in rays.iter().enumerate() {
            let single = render_ray(&p, r, &samples[i], true).unwrap();
            assert_eq!(single, batch[i]);
        }
    }
}

#[test]
fn batched_heads_match_point_loop_to_zero_ulp() {
    let p = net(32, 4, 6);
    let mut rng = common::rng(6);
    let mut batch = PointBatch::default();
    let mut pts = Vec::new();
    for i in 0..1024 * 4 {
        let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let w = unit_dir(&mut rng);
        batch.push(x, w, i % 4);
        pts.push((x, w, i % 4));
    }
    let all = p.forward_batch(&batch).unwrap();
    for (k, &(x, w, j)) in pts.iter().enumerate() {
        assert_eq!(p.forward(x, w, j).unwrap(), all[k]);
    }
    // Permuting the batch permutes the outputs.
    let mut rev = PointBatch::default();
    for &(x, w, j) in pts.iter().rev() {
        rev.push(x, w, j);
    }
    let back = p.forward_batch(&rev).unwrap();
    assert!(back.iter().rev().eq(all.iter()));
}

#[test]
fn heads_stay_in_range() {
    let p = net(32, 4, 7);
    let mut rng = common::rng(7);
    let mut batch = PointBatch::default();
    for i in 0..1024 * 64 {
        let x = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
        batch.push(x, unit_dir(&mut rng), i % 4);
    }
    let unit = |v: f64| v > 0.0 && v < 1.0;
    for h in p.forward_batch(&batch).unwrap() {
        assert!(h.sigma >= 0.0 && h.beta >= 0.0);
        assert!(h.albedo.iter().all(|&c| unit(c)) && h.ambient.iter().all(|&c| unit(c)));
        assert!(unit(h.shading));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn heads_depend_on_declared_inputs(
        x in prop::array::uniform3(-1.0f64..1.0),
        y in prop::array::uniform3(-1.0f64..1.0),
        w in prop::array::uniform3(-1.0f64..1.0),
        v in prop::array::uniform3(-1.0f64..1.0),
        i in 0usize..3,
        j in 0usize..3,
    ) {
        let p = net(16, 3, 8);
        let w = normalize([w[0], w[1], -1.0 - w[2].abs()]).unwrap();
        let v = normalize([v[0], v[1], -1.0 - v[2].abs()]).unwrap();
        let base = p.forward(x, w, i).unwrap();

        // Sun direction: sigma, albedo and beta are untouched.
        let sun = p.forward(x, v, i).unwrap();
        prop_assert_eq!(base.sigma, sun.sigma);
        prop_assert_eq!(base.albedo, sun.albedo);
        prop_assert_eq!(base.beta, sun.beta);

        // Image index: only beta may move.
        let img = p.forward(x, w, j).unwrap();
        prop_assert_eq!(base.sigma, img.sigma);
        prop_assert_eq!(base.albedo, img.albedo);
        prop_assert_eq!(base.shading, img.shading);
        prop_assert_eq!(base.ambient, img.ambient);

        // Position: ambient depends on the sun alone.
        let pos = p.forward(y, w, i).unwrap();
        prop_assert_eq!(base.ambient, pos.ambient);
    }
}
