//! Volume compositing of per-point network outputs along rays.
//!
//! The slice functions are the reference arithmetic. [`render_tape`] records
//! the same quantities on an autodiff tape for a chunk of rays that share a
//! sample count.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::exec::{self, Execution};
use crate::math::Vec3;
use crate::network::{collect_heads, BoundParams, HeadOutputs, NetworkError, NetworkParams, PointBatch};
use crate::ray::{Ray, SampledRay};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("rays carry different sample counts ({0} vs {1})")]
    RaggedSamples(usize, usize),
    #[error("{rays} rays but {samples} sample sets")]
    MismatchedBatch { rays: usize, samples: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedRay {
    pub color: Vec3,
    pub depth: f64,
    pub beta: f64,
    pub weights: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Per-point shading scalar `s`.
    pub shading: Vec<f64>,
    /// `sum_i w_i s_i`
    pub sun_vis: f64,
    pub weight_sum: f64,
}

/// `alpha_i = 1 - exp(-sigma_i delta_i)`, `T_i = prod_{j<i} (1 - alpha_j)`.
pub fn alpha_transmittance(sigma: &[f64], delta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(sigma.len(), delta.len());
    let alpha: Vec<f64> = sigma.iter().zip(delta).map(|(s, d)| 1.0 - (-s * d).exp()).collect();
    let mut t = Vec::with_capacity(alpha.len());
    let mut acc = 1.0;
    for a in &alpha {
        t.push(acc);
        acc *= 1.0 - a;
    }
    (alpha, t)
}

pub fn weights(t: &[f64], alpha: &[f64]) -> Vec<f64> {
    t.iter().zip(alpha).map(|(t, a)| t * a).collect()
}

pub fn composite_color(t: &[f64], alpha: &[f64], colors: &[Vec3]) -> Vec3 {
    let mut out = [0.0; 3];
    for ((t, a), c) in t.iter().zip(alpha).zip(colors) {
        let w = t * a;
        for k in 0..3 {
            out[k] += w * c[k];
        }
    }
    out
}

fn composite_scalar(t: &[f64], alpha: &[f64], v: &[f64]) -> f64 {
    t.iter().zip(alpha).zip(v).map(|((t, a), v)| t * a * v).sum()
}

pub fn composite_depth(t: &[f64], alpha: &[f64], depth: &[f64]) -> f64 {
    composite_scalar(t, alpha, depth)
}

pub fn composite_uncertainty(t: &[f64], alpha: &[f64], beta: &[f64]) -> f64 {
    composite_scalar(t, alpha, beta)
}

/// `c_a * (s + (1 - s) a)`
pub fn irradiance(albedo: Vec3, s: f64, ambient: Vec3) -> Vec3 {
    let mut c = [0.0; 3];
    for k in 0..3 {
        c[k] = albedo[k] * (s + (1.0 - s) * ambient[k]);
    }
    c
}

/// Composite a ray from already evaluated heads.
pub fn composite_heads(sampled: &SampledRay, heads: &[HeadOutputs], shading_model: bool) -> RenderedRay {
    let sigma: Vec<f64> = heads.iter().map(|h| h.sigma).collect();
    let (alpha, transmittance) = alpha_transmittance(&sigma, &sampled.delta);
    let colors: Vec<Vec3> = heads
        .iter()
        .map(|h| if shading_model { irradiance(h.albedo, h.shading, h.ambient) } else { h.albedo })
        .collect();
    let beta: Vec<f64> = heads.iter().map(|h| h.beta).collect();
    let shading: Vec<f64> = heads.iter().map(|h| h.shading).collect();
    let w = weights(&transmittance, &alpha);
    RenderedRay {
        color: composite_color(&transmittance, &alpha, &colors),
        depth: composite_depth(&transmittance, &alpha, &sampled.t),
        beta: composite_uncertainty(&transmittance, &alpha, &beta),
        sun_vis: composite_scalar(&transmittance, &alpha, &shading),
        weight_sum: w.iter().sum(),
        weights: w,
        transmittance,
        alpha,
        shading,
    }
}

/// Tape handles for a chunk of `R` rays with `N` samples each.
#[derive(Debug, Clone, Copy)]
pub struct RenderVars {
    /// `[R, 3]`
    pub color: Var,
    /// `[R, 1]`
    pub depth: Var,
    /// `[R, 1]`
    pub beta: Var,
    /// `[R, N]`
    pub weights: Var,
    /// `[R, N]`
    pub transmittance: Var,
    /// `[R, N]`
    pub alpha: Var,
    /// `[R, N]`
    pub shading: Var,
    /// `[R, 1]`
    pub sun_vis: Var,
    pub rays: usize,
    pub samples: usize,
}

fn check_chunk(rays: &[Ray], samples: &[SampledRay]) -> Result<usize, RenderError> {
    if rays.len() != samples.len() {
        return Err(RenderError::MismatchedBatch { rays: rays.len(), samples: samples.len() });
    }
    let n = samples.first().map_or(0, SampledRay::len);
    if let Some(s) = samples.iter().find(|s| s.len() != n) {
        return Err(RenderError::RaggedSamples(n, s.len()));
    }
    Ok(n)
}

pub fn point_batch(rays: &[Ray], samples: &[SampledRay]) -> PointBatch {
    let mut batch = PointBatch::default();
    for (r, s) in rays.iter().zip(samples) {
        for p in &s.points {
            batch.push(*p, r.sun_dir, r.image_index);
        }
    }
    batch
}

/// Record network evaluation and compositing for a chunk of rays.
pub fn render_tape(
    params: &NetworkParams,
    tape: &mut Tape,
    bound: &BoundParams,
    rays: &[Ray],
    samples: &[SampledRay],
    shading_model: bool,
) -> Result<RenderVars, RenderError> {
    let n = check_chunk(rays, samples)?;
    let r = rays.len();
    let heads = params.forward_tape(tape, bound, &point_batch(rays, samples))?;

    let delta = tape.constant(Tensor::new(r, n, samples.iter().flat_map(|s| s.delta.iter().copied()).collect()));
    let t_vals = tape.constant(Tensor::new(r, n, samples.iter().flat_map(|s| s.t.iter().copied()).collect()));

    let sigma = tape.reshape(heads.sigma, r, n)?;
    let optical = tape.mul(sigma, delta)?;
    let neg = tape.scale(optical, -1.0)?;
    let keep = tape.exp(neg)?;
    let alpha = tape.rsub_scalar(1.0, keep)?;
    let cum = tape.exclusive_cumsum(optical)?;
    let neg_cum = tape.scale(cum, -1.0)?;
    let transmittance = tape.exp(neg_cum)?;
    let weights = tape.mul(transmittance, alpha)?;

    let color_pts = if shading_model {
        let shade_gap = tape.rsub_scalar(1.0, heads.shading)?;
        let amb = tape.mul_col(heads.ambient, shade_gap)?;
        let light = tape.add_col(amb, heads.shading)?;
        tape.mul(heads.albedo, light)?
    } else {
        heads.albedo
    };
    let w_col = tape.reshape(weights, r * n, 1)?;
    let weighted = tape.mul_col(color_pts, w_col)?;
    let color = tape.group_sum(weighted, n)?;

    let wd = tape.mul(weights, t_vals)?;
    let depth = tape.row_sum(wd)?;
    let beta_pts = tape.reshape(heads.beta, r, n)?;
    let wb = tape.mul(weights, beta_pts)?;
    let beta = tape.row_sum(wb)?;
    let shading = tape.reshape(heads.shading, r, n)?;
    let ws = tape.mul(weights, shading)?;
    let sun_vis = tape.row_sum(ws)?;

    Ok(RenderVars { color, depth, beta, weights, transmittance, alpha, shading, sun_vis, rays: r, samples: n })
}

/// Read a chunk's rendered rays back from the tape.
pub fn collect_rendered(tape: &Tape, v: &RenderVars) -> Vec<RenderedRay> {
    let n = v.samples;
    let row = |var: Var, i: usize| tape.value(var).data[i * n..(i + 1) * n].to_vec();
    (0..v.rays)
        .map(|i| {
            let c = tape.value(v.color).row(i);
            let weights = row(v.weights, i);
            RenderedRay {
                color: [c[0], c[1], c[2]],
                depth: tape.value(v.depth).data[i],
                beta: tape.value(v.beta).data[i],
                weight_sum: weights.iter().sum(),
                weights,
                transmittance: row(v.transmittance, i),
                alpha: row(v.alpha, i),
                shading: row(v.shading, i),
                sun_vis: tape.value(v.sun_vis).data[i],
            }
        })
        .collect()
}

/// Render rays without gradients, `chunk` rays per tape.
pub fn render_rays(
    params: &NetworkParams,
    rays: &[Ray],
    samples: &[SampledRay],
    shading_model: bool,
    chunk: usize,
    exec: Execution,
) -> Result<Vec<RenderedRay>, RenderError> {
    if rays.len() != samples.len() {
        return Err(RenderError::MismatchedBatch { rays: rays.len(), samples: samples.len() });
    }
    let chunk = chunk.max(1);
    let n_chunks = rays.len().div_ceil(chunk);
    let parts = exec::map_indexed(exec, n_chunks, |c| {
        let lo = c * chunk;
        let hi = (lo + chunk).min(rays.len());
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let v = render_tape(params, &mut tape, &bound, &rays[lo..hi], &samples[lo..hi], shading_model)?;
        Ok::<_, RenderError>(collect_rendered(&tape, &v))
    });
    let mut out = Vec::with_capacity(rays.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn render_ray(params: &NetworkParams, ray: &Ray, sampled: &SampledRay, shading_model: bool) -> Result<RenderedRay, RenderError> {
    let mut out = render_rays(params, std::slice::from_ref(ray), std::slice::from_ref(sampled), shading_model, 1, Execution::Sequential)?;
    Ok(out.pop().expect("one ray"))
}

/// Per-point heads for one sampled ray.
pub fn ray_heads(params: &NetworkParams, ray: &Ray, sampled: &SampledRay) -> Result<Vec<HeadOutputs>, RenderError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let heads = params.forward_tape(&mut tape, &bound, &point_batch(std::slice::from_ref(ray), std::slice::from_ref(sampled)))?;
    Ok(collect_heads(&tape, &heads))
}
