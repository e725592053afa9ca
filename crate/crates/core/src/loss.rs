//! Training objectives, in plain form over rendered rays and in tape form
//! over a chunk of a batch.
//!
//! Every loss is a mean over its batch. The tape forms take the batch size
//! as `norm` so that chunk contributions add up to the batch mean.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::math::{self, Vec3};
use crate::ray::Ray;
use crate::render::RenderedRay;
use crate::rpc::PixelCoord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("batch sizes differ: {0} vs {1}")]
    MismatchedBatch(usize, usize),
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub beta_min: f64,
    pub eta: f64,
    pub lambda_sc: f64,
    pub lambda_ds: f64,
    pub beta_warmup_epochs: usize,
    pub ds_fraction: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta_min: 0.05,
            eta: 3.0,
            lambda_sc: 0.1 / 3.0,
            lambda_ds: 1000.0 / 3.0,
            beta_warmup_epochs: 2,
            ds_fraction: 0.25,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.beta_min > (-self.eta).exp()) {
            return Err(LossError::InvalidConfig(format!(
                "beta_min {} must exceed exp(-eta) = {}",
                self.beta_min,
                (-self.eta).exp()
            )));
        }
        if !(self.lambda_sc >= 0.0 && self.lambda_ds >= 0.0) {
            return Err(LossError::InvalidConfig("loss weights must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.ds_fraction) {
            return Err(LossError::InvalidConfig(format!("ds_fraction {} outside [0, 1]", self.ds_fraction)));
        }
        Ok(())
    }

    /// Uncertainty-weighted color loss is active from this epoch on.
    pub fn uses_uncertainty(&self, epoch: usize, use_beta: bool) -> bool {
        use_beta && epoch >= self.beta_warmup_epochs
    }

    pub fn ds_active(&self, iter: usize, total_iters: usize) -> bool {
        (iter as f64) < self.ds_fraction * total_iters as f64
    }
}

/// A sparse surface point observed at `pixel` of image `image_index`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthPoint {
    pub image_index: usize,
    pub pixel: PixelCoord,
    /// Normalized scene coordinates.
    pub point: Vec3,
    pub weight: f64,
    pub reproj_err: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rgb: f64,
    pub l_sc: f64,
    pub l_ds: f64,
    pub total: f64,
}

/// Raw loss values before scheduling.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub mse: f64,
    pub uncertainty: Option<f64>,
    pub solar: Option<f64>,
    pub depth: Option<f64>,
}

pub fn loss_rgb_mse(rendered: &[RenderedRay], targets: &[Vec3]) -> Result<f64, LossError> {
    check_len(rendered.len(), targets.len())?;
    let s: f64 = rendered.iter().zip(targets).map(|(r, t)| residual_sq(r.color, *t)).sum();
    Ok(s / rendered.len() as f64)
}

/// Per-ray term `r^2 / (2 b^2) + (ln b + eta) / 2` with `b = beta + beta_min`.
pub fn uncertainty_term(residual_sq: f64, beta: f64, cfg: &LossConfig) -> f64 {
    let b = beta + cfg.beta_min;
    let barrier = b.ln() + cfg.eta;
    assert!(barrier > 0.0, "log barrier went non-positive: {barrier}");
    residual_sq / (2.0 * b * b) + 0.5 * barrier
}

pub fn loss_rgb_uncertainty(rendered: &[RenderedRay], targets: &[Vec3], cfg: &LossConfig) -> Result<f64, LossError> {
    check_len(rendered.len(), targets.len())?;
    let s: f64 = rendered
        .iter()
        .zip(targets)
        .map(|(r, t)| uncertainty_term(residual_sq(r.color, *t), r.beta, cfg))
        .sum();
    Ok(s / rendered.len() as f64)
}

/// `sum_i (T_i - s_i)^2 + 1 - sum_i T_i alpha_i s_i` for one solar ray.
pub fn solar_term(r: &RenderedRay) -> f64 {
    let fit: f64 = r.transmittance.iter().zip(&r.shading).map(|(t, s)| (t - s) * (t - s)).sum();
    let lit: f64 = r
        .transmittance
        .iter()
        .zip(&r.alpha)
        .zip(&r.shading)
        .map(|((t, a), s)| t * a * s)
        .sum();
    fit + 1.0 - lit
}

pub fn loss_solar(rendered: &[RenderedRay]) -> f64 {
    if rendered.is_empty() {
        return 0.0;
    }
    rendered.iter().map(solar_term).sum::<f64>() / rendered.len() as f64
}

/// Distance from the ray origin to the sparse point, in ray units.
pub fn depth_target(ray: &Ray, point: &DepthPoint) -> f64 {
    math::norm(math::sub(point.point, ray.origin))
}

pub fn loss_depth(rendered: &[RenderedRay], points: &[DepthPoint], rays: &[Ray]) -> Result<f64, LossError> {
    check_len(rendered.len(), points.len())?;
    check_len(rendered.len(), rays.len())?;
    if rendered.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = rendered
        .iter()
        .zip(points)
        .zip(rays)
        .map(|((r, p), ray)| {
            let e = r.depth - depth_target(ray, p);
            p.weight * e * e
        })
        .sum();
    Ok(s / rendered.len() as f64)
}

/// Apply the warm-up and depth schedules and the loss weights.
pub fn total_loss(parts: &LossParts, cfg: &LossConfig, epoch: usize, iter: usize, total_iters: usize) -> LossBreakdown {
    let l_rgb = match parts.uncertainty {
        Some(u) if epoch >= cfg.beta_warmup_epochs => u,
        _ => parts.mse,
    };
    let l_sc = parts.solar.unwrap_or(0.0);
    let l_ds = if cfg.ds_active(iter, total_iters) { parts.depth.unwrap_or(0.0) } else { 0.0 };
    LossBreakdown { l_rgb, l_sc, l_ds, total: l_rgb + cfg.lambda_sc * l_sc + cfg.lambda_ds * l_ds }
}

/// `w = 1 - e / (max_e + eps)`, clipped to `[0.05, 1]`.
pub fn compute_ds_weights(reproj_errs: &[f64]) -> Vec<f64> {
    const EPS: f64 = 1e-6;
    let max_e = reproj_errs.iter().copied().fold(0.0, f64::max);
    reproj_errs.iter().map(|e| (1.0 - e / (max_e + EPS)).clamp(0.05, 1.0)).collect()
}

fn residual_sq(c: Vec3, t: Vec3) -> f64 {
    (0..3).map(|k| (c[k] - t[k]) * (c[k] - t[k])).sum()
}

fn check_len(a: usize, b: usize) -> Result<(), LossError> {
    if a == b {
        Ok(())
    } else {
        Err(LossError::MismatchedBatch(a, b))
    }
}

/// `sum_r ||c_r - gt_r||^2 / norm`; `color` and `gt` are `[R, 3]`.
pub fn tape_rgb_mse(tape: &mut Tape, color: Var, gt: Var, norm: f64) -> Result<Var, LossError> {
    let d = tape.sub(color, gt)?;
    let sq = tape.square(d)?;
    let s = tape.sum(sq)?;
    Ok(tape.scale(s, 1.0 / norm)?)
}

/// Uncertainty-weighted color loss; `beta` is `[R, 1]`.
pub fn tape_rgb_uncertainty(tape: &mut Tape, color: Var, beta: Var, gt: Var, cfg: &LossConfig, norm: f64) -> Result<Var, LossError> {
    let d = tape.sub(color, gt)?;
    let sq = tape.square(d)?;
    let r2 = tape.row_sum(sq)?;
    let b = tape.add_scalar(beta, cfg.beta_min)?;
    let b2 = tape.square(b)?;
    let b2x2 = tape.scale(b2, 2.0)?;
    let fit = tape.div(r2, b2x2)?;
    let lb = tape.log(b)?;
    let barrier = tape.add_scalar(lb, cfg.eta)?;
    if let Some(v) = tape.value(barrier).data.iter().find(|v| !(**v > 0.0)) {
        return Err(LossError::InvalidConfig(format!("log barrier went non-positive: {v}")));
    }
    let half = tape.scale(barrier, 0.5)?;
    let per_ray = tape.add(fit, half)?;
    let s = tape.sum(per_ray)?;
    Ok(tape.scale(s, 1.0 / norm)?)
}

/// Solar correction over `[R, N]` transmittance, weights and shading.
pub fn tape_solar(tape: &mut Tape, transmittance: Var, weights: Var, shading: Var, norm: f64) -> Result<Var, LossError> {
    let rays = tape.shape(transmittance).0 as f64;
    let d = tape.sub(transmittance, shading)?;
    let sq = tape.square(d)?;
    let fit = tape.sum(sq)?;
    let ws = tape.mul(weights, shading)?;
    let lit = tape.sum(ws)?;
    let diff = tape.sub(fit, lit)?;
    let s = tape.add_scalar(diff, rays)?;
    Ok(tape.scale(s, 1.0 / norm)?)
}

/// `sum_r w_r (d_r - target_r)^2 / norm`; all inputs `[R, 1]`.
pub fn tape_depth(tape: &mut Tape, depth: Var, target: &[f64], weight: &[f64], norm: f64) -> Result<Var, LossError> {
    let r = tape.shape(depth).0;
    check_len(r, target.len())?;
    check_len(r, weight.len())?;
    let t = tape.constant(Tensor::new(r, 1, target.to_vec()));
    let w = tape.constant(Tensor::new(r, 1, weight.to_vec()));
    let e = tape.sub(depth, t)?;
    let e2 = tape.square(e)?;
    let we = tape.mul(e2, w)?;
    let s = tape.sum(we)?;
    Ok(tape.scale(s, 1.0 / norm)?)
}
