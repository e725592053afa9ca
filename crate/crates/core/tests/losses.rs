//! Loss terms: analytic optima, sign constraints and tape agreement.

mod common;

use proptest::prelude::*;
use rand::Rng;
use satnerf_core::autodiff::{Tape, Tensor};
use satnerf_core::loss::{
    compute_ds_weights, loss_rgb_uncertainty, loss_solar, solar_term, tape_rgb_uncertainty, tape_solar, total_loss,
    uncertainty_term, LossConfig, LossParts,
};
use satnerf_core::render::{alpha_transmittance, weights, RenderedRay};

fn ray_from(sigma: &[f64], delta: &[f64], shading: Vec<f64>, color: [f64; 3], beta: f64) -> RenderedRay {
    let (alpha, t) = alpha_transmittance(sigma, delta);
    let w = weights(&t, &alpha);
    RenderedRay {
        color,
        depth: 0.0,
        beta,
        sun_vis: w.iter().zip(&shading).map(|(w, s)| w * s).sum(),
        weight_sum: w.iter().sum(),
        weights: w,
        transmittance: t,
        alpha,
        shading,
    }
}

/// Minimizer of a unimodal `f` on `[lo, hi]`.
fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - g * (hi - lo);
    let mut b = lo + g * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..200 {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - g * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + g * (hi - lo);
            fb = f(b);
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn uncertainty_optimum_is_root_two_residual() {
    let cfg = LossConfig::default();
    let mut rng = common::rng(1);
    for _ in 0..500 {
        // Keep the optimum above beta_min so it is reachable with beta >= 0.
        let r2: f64 = rng.random_range(0.002..3.0);
        let beta = golden_section(|b| uncertainty_term(r2, b, &cfg), 0.0, 10.0);
        let b = beta + cfg.beta_min;
        assert!((b * b - 2.0 * r2).abs() < 1e-6, "r2 {r2}: b^2 {}", b * b);
    }
}

#[test]
fn solar_loss_vanishes_on_ideal_rays() {
    let mut rng = common::rng(2);
    for _ in 0..1000 {
        let n = rng.random_range(2..40);
        let hit = rng.random_range(0..n);
        // Empty space, then an opaque sample; lit down to the surface, dark after.
        let sigma: Vec<f64> = (0..n).map(|i| if i == hit { f64::INFINITY } else if i < hit { 0.0 } else { rng.random_range(0.0..10.0) }).collect();
        let delta = vec![0.05; n];
        let shading: Vec<f64> = (0..n).map(|i| if i <= hit { 1.0 } else { 0.0 }).collect();
        let r = ray_from(&sigma, &delta, shading, [0.0; 3], 0.0);
        assert_eq!(solar_term(&r), 0.0);
    }
}

#[test]
fn solar_loss_is_non_negative() {
    let mut rng = common::rng(3);
    let mut rays = Vec::new();
    for _ in 0..100_000 {
        let n = rng.random_range(1..24);
        let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..80.0) * rng.random::<f64>().powi(2)).collect();
        let delta: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.2)).collect();
        let shading: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let r = ray_from(&sigma, &delta, shading, [0.0; 3], 0.0);
        assert!(solar_term(&r) >= 0.0);
        if rays.len() < 64 {
            rays.push(r);
        }
    }
    assert!(loss_solar(&rays) >= 0.0);
}

proptest! {
    #[test]
    fn log_barrier_stays_positive(beta in 0.0f64..1e6, r2 in 0.0f64..3.0) {
        let cfg = LossConfig::default();
        prop_assert!((beta + cfg.beta_min).ln() + cfg.eta > 0.0);
        prop_assert!(uncertainty_term(r2, beta, &cfg).is_finite());
    }

    #[test]
    fn ds_weights_are_clipped_and_ordered(errs in prop::collection::vec(0.0f64..5.0, 1..50)) {
        let w = compute_ds_weights(&errs);
        prop_assert!(w.iter().all(|w| (0.05..=1.0).contains(w)));
        for i in 0..errs.len() {
            for j in 0..errs.len() {
                if errs[i] < errs[j] {
                    prop_assert!(w[i] >= w[j]);
                }
            }
        }
    }
}

#[test]
fn ds_weight_hand_values() {
    let w = compute_ds_weights(&[0.0, 1.0, 2.0]);
    assert_eq!(w[0], 1.0);
    assert!((w[1] - (1.0 - 1.0 / (2.0 + 1e-6))).abs() < 1e-15);
    assert_eq!(w[2], 0.05);
}

#[test]
fn tape_losses_agree_with_direct_sums() {
    let cfg = LossConfig::default();
    let mut rng = common::rng(4);
    let n = 12;
    let rays: Vec<RenderedRay> = (0..9)
        .map(|_| {
            let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..20.0)).collect();
            let shading: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            ray_from(&sigma, &[0.07; 12], shading, [rng.random(), rng.random(), rng.random()], rng.random_range(0.0..1.0))
        })
        .collect();
    let targets: Vec<[f64; 3]> = (0..9).map(|_| [rng.random(), rng.random(), rng.random()]).collect();

    let mut tape = Tape::new();
    let flat = |f: &dyn Fn(&RenderedRay) -> Vec<f64>| rays.iter().flat_map(f).collect::<Vec<f64>>();
    let color = tape.constant(Tensor::new(9, 3, flat(&|r| r.color.to_vec())));
    let beta = tape.constant(Tensor::new(9, 1, flat(&|r| vec![r.beta])));
    let gt = tape.constant(Tensor::new(9, 3, targets.iter().flatten().copied().collect()));
    let t = tape.constant(Tensor::new(9, n, flat(&|r| r.transmittance.clone())));
    let w = tape.constant(Tensor::new(9, n, flat(&|r| r.weights.clone())));
    let s = tape.constant(Tensor::new(9, n, flat(&|r| r.shading.clone())));

    let u = tape_rgb_uncertainty(&mut tape, color, beta, gt, &cfg, 9.0).unwrap();
    let direct = loss_rgb_uncertainty(&rays, &targets, &cfg).unwrap();
    assert!((tape.value(u).data[0] - direct).abs() < 1e-12);
    let sc = tape_solar(&mut tape, t, w, s, 9.0).unwrap();
    assert!((tape.value(sc).data[0] - loss_solar(&rays)).abs() < 1e-12);
}

#[test]
fn schedules_gate_the_terms() {
    let cfg = LossConfig::default();
    let parts = LossParts { mse: 1.0, uncertainty: Some(2.0), solar: Some(3.0), depth: Some(4.0) };
    let warm = total_loss(&parts, &cfg, 1, 0, 100);
    assert_eq!(warm.l_rgb, 1.0);
    assert_eq!(warm.l_ds, 4.0);
    let late = total_loss(&parts, &cfg, 2, 25, 100);
    assert_eq!(late.l_rgb, 2.0);
    assert_eq!(late.l_ds, 0.0);
    assert!((late.total - (2.0 + 3.0 * 0.1 / 3.0)).abs() < 1e-15);
}
