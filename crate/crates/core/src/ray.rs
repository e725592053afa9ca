//! Camera and solar rays in the normalized scene volume, and point sampling
//! along them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesy::{geodetic_to_ecef, GeodesyError, SceneFrame};
use crate::math::{self, Vec3};
use crate::rpc::{PixelCoord, RpcError, RpcModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RayError {
    #[error(transparent)]
    Rpc(#[from] RpcError),
    #[error(transparent)]
    Geodesy(#[from] GeodesyError),
    #[error("sun direction {0:?} does not point down into the scene volume")]
    SunBelowHorizon(Vec3),
    #[error("solar anchor {0:?} is outside the scene footprint")]
    InvalidAnchor(Vec3),
    #[error("ray endpoints coincide")]
    DegenerateRay,
}

/// A ray `o + t d` for `t` in `[t_min, t_max]`, in normalized units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_min: f64,
    pub t_max: f64,
    /// Direction of solar rays (from the sun toward the scene).
    pub sun_dir: Vec3,
    pub image_index: usize,
    pub pixel: PixelCoord,
    /// Observed color in `[0, 1]`; zeros for solar rays.
    pub gt_color: [f64; 3],
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        math::along(self.origin, self.dir, t)
    }

    pub fn end(&self) -> Vec3 {
        self.at(self.t_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledRay {
    pub t: Vec<f64>,
    pub points: Vec<Vec3>,
    pub delta: Vec<f64>,
}

impl SampledRay {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Cast the ray through `pixel`: from the pixel localized at `h_max` (the
/// origin, closest to the camera) to the pixel localized at `h_min`.
pub fn build_ray(
    rpc: &RpcModel,
    pixel: PixelCoord,
    frame: &SceneFrame,
    sun_dir: Vec3,
    image_index: usize,
    gt_color: [f64; 3],
) -> Result<Ray, RayError> {
    let n = &frame.normalization;
    let start = n.normalize(geodetic_to_ecef(rpc.localize(pixel, n.h_max)?));
    let end = n.normalize(geodetic_to_ecef(rpc.localize(pixel, n.h_min)?));
    let chord = math::sub(end, start);
    let t_max = math::norm(chord);
    let dir = math::normalize(chord).ok_or(RayError::DegenerateRay)?;
    Ok(Ray {
        origin: start,
        dir,
        t_min: 0.0,
        t_max,
        sun_dir,
        image_index,
        pixel,
        gt_color,
    })
}

/// `n` samples along `ray`: evenly spaced from `t_min` to `t_max`
/// inclusive, or one uniform draw inside each of `n` equal bins when a
/// jitter RNG is given. The last interval repeats the one before it.
pub fn sample_points<R: Rng + ?Sized>(ray: &Ray, n: usize, jitter: Option<&mut R>) -> SampledRay {
    assert!(n >= 2, "at least two samples per ray");
    let span = ray.t_max - ray.t_min;
    let t: Vec<f64> = match jitter {
        None => (0..n)
            .map(|i| ray.t_min + (i as f64 / (n - 1) as f64) * span)
            .collect(),
        Some(rng) => {
            let bin = span / n as f64;
            (0..n)
                .map(|i| ray.t_min + (i as f64 + rng.random::<f64>()) * bin)
                .collect()
        }
    };
    let points = t.iter().map(|&ti| ray.at(ti)).collect();
    let mut delta: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    delta.push(*delta.last().expect("n >= 2"));
    SampledRay { t, points, delta }
}

/// [`sample_points`] with a jitter RNG seeded from `seed`.
pub fn sample_points_seeded(ray: &Ray, n: usize, jitter: bool, seed: u64) -> SampledRay {
    if jitter {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_points(ray, n, Some(&mut rng))
    } else {
        sample_points::<ChaCha8Rng>(ray, n, None)
    }
}

/// Normalized point on the `h_max` plane whose ray along `sun_dir` reaches
/// the `h_min` plane at ENU `(east, north)`.
pub fn solar_anchor(frame: &SceneFrame, sun_dir: Vec3, east: f64, north: f64) -> Result<Vec3, RayError> {
    let w = frame.normalized_dir_to_enu(sun_dir);
    if !(w[2] < 0.0) {
        return Err(RayError::SunBelowHorizon(sun_dir));
    }
    let norm = &frame.normalization;
    let t = (norm.h_min - norm.h_max) / w[2];
    Ok(frame.enu_to_normalized([east - t * w[0], north - t * w[1], norm.h_max]))
}

/// Anchors whose solar rays land uniformly over the footprint.
pub fn sample_solar_anchors<R: Rng + ?Sized>(
    frame: &SceneFrame,
    sun_dir: Vec3,
    rng: &mut R,
    count: usize,
) -> Result<Vec<Vec3>, RayError> {
    let [e0, e1, n0, n1] = frame.footprint;
    (0..count)
        .map(|_| {
            let e = e0 + rng.random::<f64>() * (e1 - e0);
            let n = n0 + rng.random::<f64>() * (n1 - n0);
            solar_anchor(frame, sun_dir, e, n)
        })
        .collect()
}

/// Rays that start at each anchor and travel along `sun_dir` (normalized
/// frame) down to the `h_min` plane.
pub fn build_solar_rays(
    anchors: &[Vec3],
    sun_dir: Vec3,
    image_index: usize,
    frame: &SceneFrame,
) -> Result<Vec<Ray>, RayError> {
    let w = frame.normalized_dir_to_enu(sun_dir);
    if !(w[2] < 0.0) {
        return Err(RayError::SunBelowHorizon(sun_dir));
    }
    let norm = &frame.normalization;
    anchors
        .iter()
        .map(|&anchor| {
            let a = frame.normalized_to_enu(anchor);
            let t_exit = (norm.h_min - a[2]) / w[2];
            if !(t_exit > 0.0) || !t_exit.is_finite() {
                return Err(RayError::InvalidAnchor(anchor));
            }
            Ok(Ray {
                origin: anchor,
                dir: sun_dir,
                t_min: 0.0,
                t_max: norm.to_normalized_length(t_exit),
                sun_dir,
                image_index,
                pixel: PixelCoord::new(-1.0, -1.0),
                gt_color: [0.0; 3],
            })
        })
        .collect()
}
