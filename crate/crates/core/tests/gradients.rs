//! Reverse-mode gradients against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use satnerf_core::autodiff::{finite_diff_check, Tape, Tensor, Var};
use satnerf_core::loss::{self, LossConfig};
use satnerf_core::math::normalize;
use satnerf_core::network::{NetworkConfig, NetworkParams};
use satnerf_core::ray::{sample_points_seeded, Ray, SampledRay};
use satnerf_core::render::render_tape;
use satnerf_core::rpc::PixelCoord;

fn rays(n: usize, seed: u64) -> Vec<Ray> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| Ray {
            origin: [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 0.3],
            dir: normalize([rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), -1.0]).unwrap(),
            t_min: 0.0,
            t_max: 0.6,
            sun_dir: normalize([0.3, -0.2, -0.9]).unwrap(),
            image_index: i % 2,
            pixel: PixelCoord::new(0.0, i as f64),
            gt_color: [rng.random(), rng.random(), rng.random()],
        })
        .collect()
}

fn net(width: usize) -> NetworkParams {
    let cfg = NetworkConfig { width, depth_main: 3, n_images: 2, seed: 3, embedding_std: 0.3, ..Default::default() };
    NetworkParams::init(&cfg).unwrap()
}

/// Full training objective of one chunk as a function of the parameters.
fn objective(p: &NetworkParams, rays: &[Ray], samples: &[SampledRay], grad: bool) -> (f64, Vec<f64>) {
    let cfg = LossConfig::default();
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, grad);
    let v = render_tape(p, &mut tape, &bound, rays, samples, true).unwrap();
    let gt = tape.constant(Tensor::new(rays.len(), 3, rays.iter().flat_map(|r| r.gt_color).collect()));
    let l_rgb = loss::tape_rgb_uncertainty(&mut tape, v.color, v.beta, gt, &cfg, 4.0).unwrap();
    let l_sc = loss::tape_solar(&mut tape, v.transmittance, v.weights, v.shading, 4.0).unwrap();
    let l_sc = tape.scale(l_sc, 0.5).unwrap();
    let target: Vec<f64> = (0..rays.len()).map(|i| 0.2 + 0.05 * i as f64).collect();
    let l_ds = loss::tape_depth(&mut tape, v.depth, &target, &[1.0, 0.5, 0.8, 0.3], 4.0).unwrap();
    let a = tape.add(l_rgb, l_sc).unwrap();
    let total = tape.add(a, l_ds).unwrap();
    let value = tape.value(total).data[0];
    if !grad {
        return (value, vec![]);
    }
    let mut g = tape.backward(total).unwrap();
    let flat = bound.vars.iter().flat_map(|&v| g.take(v).data).collect();
    (value, flat)
}

#[test]
fn end_to_end_loss_gradient_matches_central_differences() {
    let p = net(8);
    let rays = rays(4, 11);
    let samples: Vec<SampledRay> = rays.iter().enumerate().map(|(i, r)| sample_points_seeded(r, 8, true, i as u64)).collect();
    let (_, analytic) = objective(&p, &rays, &samples, true);
    let x0 = p.flat();
    let mut q = p.clone();
    let err = finite_diff_check(
        |x| {
            q.set_flat(x);
            objective(&q, &rays, &samples, false).0
        },
        &x0,
        &analytic,
        1e-6,
        1e-6,
    );
    assert!(err < 1e-4, "worst relative error {err:e}");
}

type Build = fn(&mut Tape, &[Var]) -> Var;

/// Value and gradient of `sum(w * build(inputs))` with fixed random weights.
fn weighted(build: Build, shapes: &[(usize, usize)], x: &[f64], grad: bool) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let mut vars = Vec::new();
    let mut at = 0;
    for &(r, c) in shapes {
        let t = Tensor::new(r, c, x[at..at + r * c].to_vec());
        at += r * c;
        vars.push(if grad { tape.param(t) } else { tape.constant(t) });
    }
    let out = build(&mut tape, &vars);
    let (r, c) = tape.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = tape.constant(Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()));
    let m = tape.mul(out, w).unwrap();
    let s = tape.sum(m).unwrap();
    let value = tape.value(s).data[0];
    if !grad {
        return (value, vec![]);
    }
    let mut g = tape.backward(s).unwrap();
    (value, vars.iter().flat_map(|&v| g.take(v).data).collect())
}

fn check_primitive(name: &str, build: Build, shapes: &[(usize, usize)], lo: f64, hi: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64);
    let n: usize = shapes.iter().map(|(r, c)| r * c).sum();
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    let (_, analytic) = weighted(build, shapes, &x, true);
    let err = finite_diff_check(|y| weighted(build, shapes, y, false).0, &x, &analytic, 1e-5, 1e-3);
    assert!(err < 1e-6, "{name}: worst relative error {err:e}");
}

#[test]
fn every_primitive_matches_central_differences() {
    let cases: &[(&str, Build, &[(usize, usize)], f64, f64)] = &[
        ("matmul", |t, v| t.matmul(v[0], v[1]).unwrap(), &[(3, 4), (4, 2)], -1.0, 1.0),
        ("add_bias", |t, v| t.add_bias(v[0], v[1]).unwrap(), &[(3, 4), (1, 4)], -1.0, 1.0),
        ("add", |t, v| t.add(v[0], v[1]).unwrap(), &[(2, 3), (2, 3)], -1.0, 1.0),
        ("sub", |t, v| t.sub(v[0], v[1]).unwrap(), &[(2, 3), (2, 3)], -1.0, 1.0),
        ("mul", |t, v| t.mul(v[0], v[1]).unwrap(), &[(2, 3), (2, 3)], -1.0, 1.0),
        ("div", |t, v| t.div(v[0], v[1]).unwrap(), &[(2, 3), (2, 3)], 0.5, 2.0),
        ("mul_col", |t, v| t.mul_col(v[0], v[1]).unwrap(), &[(3, 3), (3, 1)], -1.0, 1.0),
        ("add_col", |t, v| t.add_col(v[0], v[1]).unwrap(), &[(3, 3), (3, 1)], -1.0, 1.0),
        ("scale", |t, v| t.scale(v[0], -2.5).unwrap(), &[(2, 2)], -1.0, 1.0),
        ("add_scalar", |t, v| t.add_scalar(v[0], 0.7).unwrap(), &[(2, 2)], -1.0, 1.0),
        ("rsub_scalar", |t, v| t.rsub_scalar(1.0, v[0]).unwrap(), &[(2, 2)], -1.0, 1.0),
        ("sin", |t, v| t.sin(v[0]).unwrap(), &[(3, 3)], -40.0, 40.0),
        ("exp", |t, v| t.exp(v[0]).unwrap(), &[(3, 3)], -2.0, 2.0),
        ("log", |t, v| t.log(v[0]).unwrap(), &[(3, 3)], 0.2, 3.0),
        ("sigmoid", |t, v| t.sigmoid(v[0]).unwrap(), &[(3, 3)], -4.0, 4.0),
        ("softplus", |t, v| t.softplus(v[0]).unwrap(), &[(3, 3)], -4.0, 4.0),
        ("square", |t, v| t.square(v[0]).unwrap(), &[(3, 3)], -2.0, 2.0),
        ("sum", |t, v| t.sum(v[0]).unwrap(), &[(3, 3)], -1.0, 1.0),
        ("mean", |t, v| t.mean(v[0]).unwrap(), &[(3, 3)], -1.0, 1.0),
        ("row_sum", |t, v| t.row_sum(v[0]).unwrap(), &[(3, 4)], -1.0, 1.0),
        ("group_sum", |t, v| t.group_sum(v[0], 3).unwrap(), &[(6, 2)], -1.0, 1.0),
        ("reshape", |t, v| t.reshape(v[0], 2, 6).unwrap(), &[(3, 4)], -1.0, 1.0),
        ("concat", |t, v| t.concat(&[v[0], v[1]]).unwrap(), &[(3, 2), (3, 1)], -1.0, 1.0),
        ("slice", |t, v| t.slice(v[0], 1, 3).unwrap(), &[(3, 4)], -1.0, 1.0),
        ("gather", |t, v| t.gather(v[0], &[2, 0, 2, 1]).unwrap(), &[(3, 2)], -1.0, 1.0),
        ("exclusive_cumsum", |t, v| t.exclusive_cumsum(v[0]).unwrap(), &[(2, 5)], -1.0, 1.0),
    ];
    for &(name, build, shapes, lo, hi) in cases {
        check_primitive(name, build, shapes, lo, hi);
    }
}

#[test]
fn backward_is_deterministic() {
    let p = net(8);
    let rays = rays(4, 12);
    let samples: Vec<SampledRay> = rays.iter().enumerate().map(|(i, r)| sample_points_seeded(r, 8, true, i as u64)).collect();
    let (a, ga) = objective(&p, &rays, &samples, true);
    let (b, gb) = objective(&p, &rays, &samples, true);
    assert_eq!(a.to_bits(), b.to_bits());
    assert!(ga.iter().zip(&gb).all(|(x, y)| x.to_bits() == y.to_bits()));
}
