//! The radiance network `F(x, ω, t_j) -> (σ, c_a, s, a, β)`.
//!
//! Layer layout (`h` = width, `d` = `depth_main`):
//!
//! * main block: `d` sine layers of width `h`; the first takes `x`, the last
//!   takes the previous activations concatenated with `x` again.
//! * `sigma`: linear `h -> 1`, softplus. Depends on `x` only.
//! * `feature`: linear `h -> h`, the geometry features shared by the heads.
//! * `albedo`: sine `h -> h/2`, linear `h/2 -> 3`, sigmoid. `x` only.
//! * `shading`: sine `(h + 3) -> h/2` on `feature ⊕ ω`, sine `h/2 -> h/2`,
//!   linear `h/2 -> 1`, sigmoid.
//! * `ambient`: sine `3 -> h/2` on `ω`, linear `h/2 -> 3`, sigmoid. `ω` only.
//! * `beta`: sine `(h + N_t) -> h/2` on `feature ⊕ t_j`, linear `h/2 -> 1`,
//!   softplus.
//! * `embedding`: `n_images x N_t` transient embedding table.
//!
//! Sine layers compute `sin(ω0 · (z W + b))`. Parameters are stored in the
//! order listed by [`NetworkParams::layout`], each weight before its bias;
//! that order is also the checkpoint blob order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::math::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("image index {index} out of range for {n_images} embeddings")]
    IndexOutOfRange { index: usize, n_images: usize },
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("parameter blob has {got} values, layout needs {want}")]
    BlobSize { got: usize, want: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub width: usize,
    pub depth_main: usize,
    pub n_transient: usize,
    pub n_images: usize,
    pub omega0: f64,
    pub embedding_std: f64,
    /// Initial bias of the density output; negative values start the
    /// field close to empty space.
    pub sigma_bias: f64,
    /// Multiplier on the softplus density output.
    pub density_scale: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            width: 64,
            depth_main: 8,
            n_transient: 4,
            n_images: 1,
            omega0: 30.0,
            embedding_std: 0.01,
            sigma_bias: 0.0,
            density_scale: 1.0,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: &str| Err(NetworkError::InvalidConfig(m.to_string()));
        if self.width < 2 || self.width % 2 != 0 {
            return bad("width must be even and at least 2");
        }
        if self.depth_main < 2 {
            return bad("depth_main must be at least 2");
        }
        if self.n_transient < 1 {
            return bad("n_transient must be at least 1");
        }
        if self.n_images < 1 {
            return bad("n_images must be at least 1");
        }
        if !(self.omega0 > 0.0) {
            return bad("omega0 must be positive");
        }
        if !(self.density_scale > 0.0) {
            return bad("density_scale must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    SineFirst,
    SineHidden,
    Linear,
    Embedding,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub config: NetworkConfig,
    pub tensors: Vec<Tensor>,
}

// Indices of a dense layer's weight and bias in `tensors`.
#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
}

struct Layout {
    specs: Vec<(ParamSpec, Init)>,
    main: Vec<Dense>,
    sigma: Dense,
    feature: Dense,
    albedo: [Dense; 2],
    shading: [Dense; 3],
    ambient: [Dense; 2],
    beta: [Dense; 2],
    embedding: usize,
}

impl Layout {
    fn new(cfg: &NetworkConfig) -> Self {
        let h = cfg.width;
        let half = h / 2;
        let mut specs = Vec::new();
        let mut dense = |name: String, fan_in: usize, fan_out: usize, init: Init| {
            let w = specs.len();
            specs.push((ParamSpec { name: format!("{name}.weight"), rows: fan_in, cols: fan_out }, init));
            specs.push((ParamSpec { name: format!("{name}.bias"), rows: 1, cols: fan_out }, init));
            Dense { w, b: w + 1 }
        };
        let mut main = Vec::new();
        for i in 0..cfg.depth_main {
            let (fan_in, init) = if i == 0 {
                (3, Init::SineFirst)
            } else if i + 1 == cfg.depth_main {
                (h + 3, Init::SineHidden)
            } else {
                (h, Init::SineHidden)
            };
            main.push(dense(format!("main.{i}"), fan_in, h, init));
        }
        let sigma = dense("sigma".into(), h, 1, Init::Linear);
        let feature = dense("feature".into(), h, h, Init::Linear);
        let albedo = [
            dense("albedo.0".into(), h, half, Init::SineHidden),
            dense("albedo.1".into(), half, 3, Init::Linear),
        ];
        let shading = [
            dense("shading.0".into(), h + 3, half, Init::SineHidden),
            dense("shading.1".into(), half, half, Init::SineHidden),
            dense("shading.2".into(), half, 1, Init::Linear),
        ];
        let ambient = [
            dense("ambient.0".into(), 3, half, Init::SineHidden),
            dense("ambient.1".into(), half, 3, Init::Linear),
        ];
        let beta = [
            dense("beta.0".into(), h + cfg.n_transient, half, Init::SineHidden),
            dense("beta.1".into(), half, 1, Init::Linear),
        ];
        let embedding = specs.len();
        specs.push((
            ParamSpec { name: "embedding".into(), rows: cfg.n_images, cols: cfg.n_transient },
            Init::Embedding,
        ));
        Self { specs, main, sigma, feature, albedo, shading, ambient, beta, embedding }
    }
}

/// Per-point outputs of the radiance network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadOutputs {
    pub sigma: f64,
    pub albedo: Vec3,
    pub shading: f64,
    pub ambient: Vec3,
    pub beta: f64,
}

/// Tape handles of a batched forward pass, one row per point.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub sigma: Var,
    pub albedo: Var,
    pub shading: Var,
    pub ambient: Var,
    pub beta: Var,
}

/// Parameter leaves placed on a tape, in layout order.
pub struct BoundParams {
    pub vars: Vec<Var>,
}

/// Network inputs for `M` points.
#[derive(Debug, Clone, Default)]
pub struct PointBatch {
    /// `M x 3` row-major positions.
    pub xyz: Vec<f64>,
    /// `M x 3` sun directions.
    pub sun: Vec<f64>,
    /// Image index per point.
    pub image: Vec<usize>,
}

impl PointBatch {
    pub fn len(&self) -> usize {
        self.image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image.is_empty()
    }

    pub fn push(&mut self, x: Vec3, sun: Vec3, image: usize) {
        self.xyz.extend_from_slice(&x);
        self.sun.extend_from_slice(&sun);
        self.image.push(image);
    }
}

impl NetworkParams {
    pub fn layout(cfg: &NetworkConfig) -> Vec<ParamSpec> {
        Layout::new(cfg).specs.into_iter().map(|(s, _)| s).collect()
    }

    /// SIREN initialization, deterministic in `cfg.seed`.
    pub fn init(cfg: &NetworkConfig) -> Result<Self, NetworkError> {
        cfg.validate()?;
        let layout = Layout::new(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, cfg.embedding_std)
            .map_err(|e| NetworkError::InvalidConfig(e.to_string()))?;
        let mut tensors = Vec::with_capacity(layout.specs.len());
        for (spec, init) in &layout.specs {
            let n = spec.rows * spec.cols;
            let is_bias = spec.name.ends_with(".bias");
            // Weights are [fan_in, fan_out]; a bias shares its weight's fan-in.
            let fan_in = if is_bias {
                tensors.last().map(|w: &Tensor| w.rows).unwrap_or(1)
            } else {
                spec.rows
            } as f64;
            let data: Vec<f64> = match (init, is_bias) {
                (Init::Embedding, _) => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                (Init::Linear, true) => {
                    let v = if spec.name == "sigma.bias" { cfg.sigma_bias } else { 0.0 };
                    vec![v; n]
                }
                (_, true) => uniform(&mut rng, n, 1.0 / fan_in.sqrt()),
                (Init::SineFirst, false) => uniform(&mut rng, n, 1.0 / fan_in),
                (Init::SineHidden, false) => uniform(&mut rng, n, (6.0 / fan_in).sqrt() / cfg.omega0),
                (Init::Linear, false) => uniform(&mut rng, n, (6.0 / fan_in).sqrt()),
            };
            tensors.push(Tensor::new(spec.rows, spec.cols, data));
        }
        Ok(Self { config: cfg.clone(), tensors })
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// All parameters concatenated in layout order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_values());
        for t in &self.tensors {
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn from_flat(cfg: &NetworkConfig, blob: &[f64]) -> Result<Self, NetworkError> {
        cfg.validate()?;
        let specs = Self::layout(cfg);
        let want: usize = specs.iter().map(|s| s.rows * s.cols).sum();
        if blob.len() != want {
            return Err(NetworkError::BlobSize { got: blob.len(), want });
        }
        let mut offset = 0;
        let tensors = specs
            .iter()
            .map(|s| {
                let n = s.rows * s.cols;
                let t = Tensor::new(s.rows, s.cols, blob[offset..offset + n].to_vec());
                offset += n;
                t
            })
            .collect();
        Ok(Self { config: cfg.clone(), tensors })
    }

    pub fn set_flat(&mut self, blob: &[f64]) {
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data.copy_from_slice(&blob[offset..offset + n]);
            offset += n;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Put every parameter on the tape, tracked or constant.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| if track { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        BoundParams { vars }
    }

    /// Record the batched forward pass on `tape`.
    pub fn forward_tape(&self, tape: &mut Tape, bound: &BoundParams, batch: &PointBatch) -> Result<HeadVars, NetworkError> {
        let cfg = &self.config;
        if let Some(&bad) = batch.image.iter().find(|&&j| j >= cfg.n_images) {
            return Err(NetworkError::IndexOutOfRange { index: bad, n_images: cfg.n_images });
        }
        let layout = Layout::new(cfg);
        let m = batch.len();
        let p = |d: Dense| (bound.vars[d.w], bound.vars[d.b]);
        let omega0 = cfg.omega0;

        let sine = |tape: &mut Tape, input: Var, d: Dense| -> Result<Var, AutodiffError> {
            let (w, b) = p(d);
            let z = tape.matmul(input, w)?;
            let z = tape.add_bias(z, b)?;
            let z = tape.scale(z, omega0)?;
            tape.sin(z)
        };
        let linear = |tape: &mut Tape, input: Var, d: Dense| -> Result<Var, AutodiffError> {
            let (w, b) = p(d);
            let z = tape.matmul(input, w)?;
            tape.add_bias(z, b)
        };

        let x = tape.constant(Tensor::new(m, 3, batch.xyz.clone()));
        let sun = tape.constant(Tensor::new(m, 3, batch.sun.clone()));

        let mut hidden = x;
        let last = layout.main.len() - 1;
        for (i, d) in layout.main.iter().enumerate() {
            let input = if i == last && i > 0 { tape.concat(&[hidden, x])? } else { hidden };
            hidden = sine(tape, input, *d)?;
        }

        let sigma_raw = linear(tape, hidden, layout.sigma)?;
        let mut sigma = tape.softplus(sigma_raw)?;
        if cfg.density_scale != 1.0 {
            sigma = tape.scale(sigma, cfg.density_scale)?;
        }
        let feature = linear(tape, hidden, layout.feature)?;

        let a0 = sine(tape, feature, layout.albedo[0])?;
        let a1 = linear(tape, a0, layout.albedo[1])?;
        let albedo = tape.sigmoid(a1)?;

        let shade_in = tape.concat(&[feature, sun])?;
        let s0 = sine(tape, shade_in, layout.shading[0])?;
        let s1 = sine(tape, s0, layout.shading[1])?;
        let s2 = linear(tape, s1, layout.shading[2])?;
        let shading = tape.sigmoid(s2)?;

        let amb0 = sine(tape, sun, layout.ambient[0])?;
        let amb1 = linear(tape, amb0, layout.ambient[1])?;
        let ambient = tape.sigmoid(amb1)?;

        let t_j = tape.gather(bound.vars[layout.embedding], &batch.image)?;
        let beta_in = tape.concat(&[feature, t_j])?;
        let b0 = sine(tape, beta_in, layout.beta[0])?;
        let b1 = linear(tape, b0, layout.beta[1])?;
        let beta = tape.softplus(b1)?;

        Ok(HeadVars { sigma, albedo, shading, ambient, beta })
    }

    /// Evaluate a batch without recording gradients.
    pub fn forward_batch(&self, batch: &PointBatch) -> Result<Vec<HeadOutputs>, NetworkError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let heads = self.forward_tape(&mut tape, &bound, batch)?;
        Ok(collect_heads(&tape, &heads))
    }

    /// Single-point evaluation.
    pub fn forward(&self, x: Vec3, sun: Vec3, image: usize) -> Result<HeadOutputs, NetworkError> {
        let mut batch = PointBatch::default();
        batch.push(x, sun, image);
        Ok(self.forward_batch(&batch)?[0])
    }

    /// Index of the transient embedding table in `tensors`.
    pub fn embedding_index(&self) -> usize {
        Layout::new(&self.config).embedding
    }
}

/// Read head values back from a tape.
pub fn collect_heads(tape: &Tape, heads: &HeadVars) -> Vec<HeadOutputs> {
    let sigma = &tape.value(heads.sigma).data;
    let albedo = &tape.value(heads.albedo).data;
    let shading = &tape.value(heads.shading).data;
    let ambient = &tape.value(heads.ambient).data;
    let beta = &tape.value(heads.beta).data;
    (0..sigma.len())
        .map(|i| HeadOutputs {
            sigma: sigma[i],
            albedo: [albedo[3 * i], albedo[3 * i + 1], albedo[3 * i + 2]],
            shading: shading[i],
            ambient: [ambient[3 * i], ambient[3 * i + 1], ambient[3 * i + 2]],
            beta: beta[i],
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}
