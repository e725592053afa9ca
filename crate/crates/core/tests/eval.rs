//! Image and DSM metrics against direct definitions.

mod common;

use proptest::prelude::*;
use rand::Rng;
use satnerf_core::data::ImageData;
use satnerf_core::eval::{dsm_mae, psnr, ssim, Dsm, DsmGrid};
use satnerf_core::geodesy::utm::UtmZone;

fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> ImageData {
    let mut img = ImageData::new(w, h);
    img.pixels.iter_mut().for_each(|v| *v = rng.random());
    img
}

/// SSIM with the 2-D Gaussian window applied at every valid offset.
fn ssim_oracle(a: &ImageData, b: &ImageData) -> f64 {
    let (c1, c2) = (1e-4, 9e-4);
    let mut k = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (x, y) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(x * x + y * y) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let mut sum = 0.0;
    let mut n = 0;
    for ch in 0..3 {
        for r in 0..=a.height - 11 {
            for c in 0..=a.width - 11 {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let w = k[i][j] / total;
                        let x = a.get(r + i, c + j)[ch];
                        let y = b.get(r + i, c + j)[ch];
                        mx += w * x;
                        my += w * y;
                        xx += w * x * x;
                        yy += w * y * y;
                        xy += w * x * y;
                    }
                }
                let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
                sum += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                n += 1;
            }
        }
    }
    sum / n as f64
}

#[test]
fn ssim_matches_windowed_oracle() {
    let mut rng = common::rng(1);
    for (w, h) in [(11, 11), (16, 13), (24, 24)] {
        let a = random_image(&mut rng, w, h);
        let mut b = a.clone();
        b.pixels.iter_mut().for_each(|v| *v = (*v + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0));
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-12);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }
    assert!(ssim(&ImageData::new(8, 8), &ImageData::new(8, 8)).is_err());
}

#[test]
fn psnr_matches_definition() {
    let mut rng = common::rng(2);
    let a = random_image(&mut rng, 9, 7);
    let b = random_image(&mut rng, 9, 7);
    let mse = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / (9.0 * 7.0 * 3.0);
    assert!((psnr(&a, &b).unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-12);
    assert!(psnr(&a, &ImageData::new(7, 9)).is_err());
}

fn grid(n: usize) -> DsmGrid {
    DsmGrid { zone: UtmZone { number: 11, north: true }, xll: 500_000.0, yll: 3_600_000.0, resolution: 0.5, ncols: n, nrows: n + 1 }
}

fn random_dsm(rng: &mut impl Rng, n: usize, holes: f64) -> Dsm {
    let mut d = Dsm::empty(grid(n));
    for v in &mut d.data {
        *v = if rng.random::<f64>() < holes { f64::NAN } else { rng.random_range(90.0..130.0) };
    }
    d
}

#[test]
fn dsm_file_round_trip() {
    let mut rng = common::rng(3);
    let dir = tempfile::tempdir().unwrap();
    let d = random_dsm(&mut rng, 7, 0.2);
    for name in ["a.asc", "a.bin"] {
        let p = dir.path().join(name);
        d.write(&p).unwrap();
        let back = Dsm::read(&p).unwrap();
        assert_eq!(back.grid, d.grid);
        assert!(back.data.iter().zip(&d.data).all(|(x, y)| x.to_bits() == y.to_bits() || (x.is_nan() && y.is_nan())));
    }
}

proptest! {
    #[test]
    fn mae_is_symmetric(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let a = random_dsm(&mut rng, 6, 0.15);
        let b = random_dsm(&mut rng, 6, 0.15);
        if let (Ok(ab), Ok(ba)) = (dsm_mae(&a, &b, false), dsm_mae(&b, &a, false)) {
            prop_assert!((ab.mae - ba.mae).abs() < 1e-12);
            let (sab, sba) = (dsm_mae(&a, &b, true).unwrap(), dsm_mae(&b, &a, true).unwrap());
            prop_assert!((sab.mae - sba.mae).abs() < 1e-12);
            prop_assert!((sab.shift + sba.shift).abs() < 1e-12);
        }
    }
}
