//! Optimization loop: Adam, per-epoch learning-rate decay, loss schedules,
//! checkpoints and the JSON-lines metrics log.
//!
//! Each iteration splits its ray batches into fixed-size chunks. Every chunk
//! records its own tape and gradient; the chunk gradients are summed in chunk
//! order, so results do not depend on how many workers ran them. All
//! randomness of iteration `i` comes from a generator keyed by `(seed, i)`,
//! which makes resuming from a checkpoint exact.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::data::{self, DataError, Dataset, RaySampler, RayStore};
use crate::exec::{self, Execution};
use crate::loss::{self, depth_target, LossConfig, LossError};
use crate::math::Vec3;
use crate::network::{NetworkConfig, NetworkError, NetworkParams};
use crate::ray::{sample_points, Ray, SampledRay};
use crate::render::{render_tape, RenderError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("non-finite gradient in {tensor} at iteration {iter}")]
    NonFiniteGradient { tensor: String, iter: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub gamma: f64,
    pub batch: usize,
    pub samples_per_ray: usize,
    pub max_iters: usize,
    pub use_shading: bool,
    pub use_sc: bool,
    pub use_ds: bool,
    pub use_beta: bool,
    pub seed: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Rays per tape.
    pub chunk: usize,
    pub jitter: bool,
    /// Global-norm gradient clipping; off when absent.
    pub grad_clip: Option<f64>,
    /// Emulate unrefined cameras by shifting each training RPC by this many
    /// pixels in a seeded random direction.
    pub rpc_jitter_px: f64,
    /// Anchor solar rays at main-batch ray origins instead of uniformly.
    pub solar_from_main: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-4,
            gamma: 0.9,
            batch: 1024,
            samples_per_ray: 64,
            max_iters: 30_000,
            use_shading: true,
            use_sc: true,
            use_ds: false,
            use_beta: true,
            seed: 0,
            checkpoint_every: 0,
            chunk: 64,
            jitter: true,
            grad_clip: None,
            rpc_jitter_px: 0.0,
            solar_from_main: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.lr0 > 0.0) {
            return bad("lr0 must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if self.batch == 0 || self.chunk == 0 {
            return bad("batch and chunk must be at least 1");
        }
        if self.samples_per_ray < 2 {
            return bad("samples_per_ray must be at least 2");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(self.lr0, self.gamma, epoch)
    }
}

/// `lr0 * gamma^epoch`
pub fn lr_at(lr0: f64, gamma: f64, epoch: usize) -> f64 {
    lr0 * gamma.powi(epoch as i32)
}

/// Everything that determines a training run besides the data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub network: NetworkConfig,
}

impl Config {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.train.validate()?;
        self.loss.validate()?;
        self.network.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + state.eps);
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l_rgb: f64,
    pub l_sc: f64,
    pub l_ds: f64,
    pub total: f64,
    pub wall_ms: f64,
}

const CKPT_MAGIC: &[u8; 8] = b"SNRFCKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Stream of the next iteration's generator.
    pub stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: u32,
    pub config: Config,
    /// Iterations completed.
    pub iteration: usize,
    pub rng: RngState,
    pub adam_step: u64,
    pub n_values: usize,
    pub layout: Vec<(String, usize, usize)>,
}

/// Parameters, optimizer moments and the position in the run.
///
/// On disk: `SNRFCKPT`, a little-endian `u64` header length, the JSON
/// header, then `3 * n_values` little-endian `f64`: parameters, first
/// moments, second moments, each in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub iteration: usize,
    pub params: NetworkParams,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let layout = NetworkParams::layout(&self.params.config)
            .into_iter()
            .map(|s| (s.name, s.rows, s.cols))
            .collect();
        let header = CheckpointHeader {
            format: 1,
            config: self.config.clone(),
            iteration: self.iteration,
            rng: RngState { seed: self.config.train.seed, stream: self.iteration as u64 },
            adam_step: self.adam.step,
            n_values: self.params.n_values(),
            layout,
        };
        let json = serde_json::to_vec(&header).expect("serializable");
        let mut b = Vec::with_capacity(16 + json.len() + 24 * header.n_values);
        b.extend_from_slice(CKPT_MAGIC);
        b.extend_from_slice(&(json.len() as u64).to_le_bytes());
        b.extend_from_slice(&json);
        for v in self.params.flat().iter().chain(&self.adam.m).chain(&self.adam.v) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(path: &Path, b: &[u8]) -> Result<Self, TrainError> {
        let bad = |msg: &str| TrainError::Checkpoint { path: path.to_path_buf(), msg: msg.into() };
        if b.len() < 16 || &b[..8] != CKPT_MAGIC {
            return Err(bad("bad magic"));
        }
        let hlen = u64::from_le_bytes(b[8..16].try_into().unwrap()) as usize;
        let json = b.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| bad(&e.to_string()))?;
        let n = header.n_values;
        let body = &b[16 + hlen..];
        if body.len() != 24 * n {
            return Err(bad("blob size does not match header"));
        }
        let vals: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let params = NetworkParams::from_flat(&header.config.network, &vals[..n])?;
        let mut adam = AdamState::new(n);
        adam.m.copy_from_slice(&vals[n..2 * n]);
        adam.v.copy_from_slice(&vals[2 * n..]);
        adam.step = header.adam_step;
        Ok(Self { config: header.config, iteration: header.iteration, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let mut b = Vec::new();
        fs::File::open(path).and_then(|mut f| f.read_to_end(&mut b)).map_err(io_err(path))?;
        Self::from_bytes(path, &b)
    }
}

/// A depth-supervised ray with its target depth and weight.
#[derive(Debug, Clone, Copy)]
struct DepthRay {
    ray: Ray,
    target: f64,
    weight: f64,
}

#[derive(Clone, Copy)]
enum ChunkKind {
    Main { uncertainty: bool },
    Solar,
    Depth,
}

struct Chunk {
    kind: ChunkKind,
    rays: Vec<Ray>,
    samples: Vec<SampledRay>,
    depth: Vec<(f64, f64)>,
}

#[derive(Default)]
struct ChunkResult {
    grads: Vec<Tensor>,
    l_rgb: f64,
    l_sc: f64,
    l_ds: f64,
}

pub struct Trainer<'a> {
    pub config: Config,
    pub params: NetworkParams,
    pub adam: AdamState,
    /// Iterations completed.
    pub iteration: usize,
    pub exec: Execution,
    ds: &'a Dataset,
    store: RayStore,
    sampler: RaySampler,
    depth_rays: Vec<DepthRay>,
    suns: Vec<(Vec3, usize)>,
}

impl<'a> Trainer<'a> {
    /// Fresh run; `config.network.n_images` is set from the dataset.
    pub fn new(mut config: Config, ds: &'a Dataset, store: RayStore, exec: Execution) -> Result<Self, TrainError> {
        config.network.n_images = ds.records.len();
        config.network.seed = config.train.seed;
        config.validate()?;
        let params = NetworkParams::init(&config.network)?;
        let adam = AdamState::new(params.n_values());
        Self::assemble(config, params, adam, 0, ds, store, exec)
    }

    pub fn resume(ck: Checkpoint, ds: &'a Dataset, store: RayStore, exec: Execution) -> Result<Self, TrainError> {
        if ck.config.network.n_images != ds.records.len() {
            return Err(TrainError::InvalidConfig(format!(
                "checkpoint expects {} images, dataset has {}",
                ck.config.network.n_images,
                ds.records.len()
            )));
        }
        Self::assemble(ck.config, ck.params, ck.adam, ck.iteration, ds, store, exec)
    }

    fn assemble(
        config: Config,
        params: NetworkParams,
        adam: AdamState,
        iteration: usize,
        ds: &'a Dataset,
        store: RayStore,
        exec: Execution,
    ) -> Result<Self, TrainError> {
        if store.is_empty() {
            return Err(TrainError::InvalidConfig("no training rays".into()));
        }
        let sampler = RaySampler::new(store.len(), config.train.batch, config.train.seed);
        let suns = ds
            .train_indices()
            .into_iter()
            .map(|j| Ok((ds.sun_dir(j)?, j)))
            .collect::<Result<Vec<_>, DataError>>()?;
        let mut depth_rays = Vec::new();
        if config.train.use_ds {
            if ds.depth_points.is_empty() {
                return Err(TrainError::InvalidConfig("use_ds needs depth points".into()));
            }
            for p in &ds.depth_points {
                let ray = ds.ray(p.image_index, p.pixel, [0.0; 3])?;
                depth_rays.push(DepthRay { ray, target: depth_target(&ray, p), weight: p.weight });
            }
        }
        Ok(Self { config, params, adam, iteration, exec, ds, store, sampler, depth_rays, suns })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { config: self.config.clone(), iteration: self.iteration, params: self.params.clone(), adam: self.adam.clone() }
    }

    pub fn epoch(&self) -> usize {
        self.sampler.epoch_of(self.iteration)
    }

    fn iteration_rng(&self, iter: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.train.seed ^ 0x5EED_0F_17E2_A710);
        rng.set_stream(iter as u64);
        rng
    }

    fn sample<R: Rng>(&self, rays: &[Ray], rng: &mut R) -> Vec<SampledRay> {
        let n = self.config.train.samples_per_ray;
        rays.iter()
            .map(|r| if self.config.train.jitter { sample_points(r, n, Some(&mut *rng)) } else { sample_points::<R>(r, n, None) })
            .collect()
    }

    fn build_chunks(&mut self, iter: usize) -> Result<(usize, Vec<Chunk>), TrainError> {
        let tc = self.config.train.clone();
        let (epoch, idx) = self.sampler.batch_at(iter);
        let mut rng = self.iteration_rng(iter);
        let main: Vec<Ray> = idx.iter().map(|&i| self.store.rays[i]).collect();
        let main_samples = self.sample(&main, &mut rng);
        let uncertainty = self.config.loss.uses_uncertainty(epoch, tc.use_beta);
        let mut chunks = Vec::new();
        let mut push = |kind, rays: Vec<Ray>, samples: Vec<SampledRay>, depth: Vec<(f64, f64)>| {
            for start in (0..rays.len()).step_by(tc.chunk) {
                let end = (start + tc.chunk).min(rays.len());
                chunks.push(Chunk {
                    kind,
                    rays: rays[start..end].to_vec(),
                    samples: samples[start..end].to_vec(),
                    depth: if depth.is_empty() { Vec::new() } else { depth[start..end].to_vec() },
                });
            }
        };
        if tc.use_sc {
            let solar = if tc.solar_from_main {
                let mut out = Vec::with_capacity(main.len());
                for r in &main {
                    let (sun, j) = self.suns[rng.random_range(0..self.suns.len())];
                    out.extend(crate::ray::build_solar_rays(&[r.origin], sun, j, &self.ds.frame).map_err(DataError::from)?);
                }
                out
            } else {
                data::solar_batch(&self.ds.frame, &self.suns, &mut rng, main.len())?
            };
            let solar_samples = self.sample(&solar, &mut rng);
            push(ChunkKind::Solar, solar, solar_samples, Vec::new());
        }
        if tc.use_ds && self.config.loss.ds_active(iter, tc.max_iters) {
            let pick = data::depth_batch(self.depth_rays.len(), &mut rng, main.len());
            let rays: Vec<Ray> = pick.iter().map(|&i| self.depth_rays[i].ray).collect();
            let depth = pick.iter().map(|&i| (self.depth_rays[i].target, self.depth_rays[i].weight)).collect();
            let samples = self.sample(&rays, &mut rng);
            push(ChunkKind::Depth, rays, samples, depth);
        }
        push(ChunkKind::Main { uncertainty }, main, main_samples, Vec::new());
        Ok((epoch, chunks))
    }

    fn run_chunk(&self, chunk: &Chunk, norm: f64) -> Result<ChunkResult, TrainError> {
        let cfg = &self.config;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let v = render_tape(&self.params, &mut tape, &bound, &chunk.rays, &chunk.samples, cfg.train.use_shading)?;
        let mut out = ChunkResult::default();
        let loss = match chunk.kind {
            ChunkKind::Main { uncertainty } => {
                let gt: Vec<f64> = chunk.rays.iter().flat_map(|r| r.gt_color).collect();
                let gt = tape.constant(Tensor::new(chunk.rays.len(), 3, gt));
                let l = if uncertainty {
                    loss::tape_rgb_uncertainty(&mut tape, v.color, v.beta, gt, &cfg.loss, norm)?
                } else {
                    loss::tape_rgb_mse(&mut tape, v.color, gt, norm)?
                };
                out.l_rgb = tape.value(l).data[0];
                l
            }
            ChunkKind::Solar => {
                let l = loss::tape_solar(&mut tape, v.transmittance, v.weights, v.shading, norm)?;
                out.l_sc = tape.value(l).data[0];
                tape.scale(l, cfg.loss.lambda_sc)?
            }
            ChunkKind::Depth => {
                let (t, w): (Vec<f64>, Vec<f64>) = chunk.depth.iter().copied().unzip();
                let l = loss::tape_depth(&mut tape, v.depth, &t, &w, norm)?;
                out.l_ds = tape.value(l).data[0];
                tape.scale(l, cfg.loss.lambda_ds)?
            }
        };
        let mut g = tape.backward(loss)?;
        out.grads = bound.vars.iter().map(|&var| g.take(var)).collect();
        Ok(out)
    }

    /// Run one iteration and return its metrics record.
    pub fn step(&mut self) -> Result<StepRecord, TrainError> {
        let t0 = Instant::now();
        let iter = self.iteration;
        let (epoch, chunks) = self.build_chunks(iter)?;
        let batch = self.config.train.batch.min(self.store.len()) as f64;
        let norms: Vec<f64> = chunks
            .iter()
            .map(|c| match c.kind {
                ChunkKind::Main { .. } => {
                    let main: usize = chunks.iter().filter(|c| matches!(c.kind, ChunkKind::Main { .. })).map(|c| c.rays.len()).sum();
                    main as f64
                }
                _ => batch,
            })
            .collect();
        let this = &*self;
        let results = exec::map_indexed(self.exec, chunks.len(), |k| this.run_chunk(&chunks[k], norms[k]));

        let mut grads: Vec<Tensor> = self.params.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
        let (mut l_rgb, mut l_sc, mut l_ds) = (0.0, 0.0, 0.0);
        for r in results {
            let r = r?;
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                for (a, b) in acc.data.iter_mut().zip(&g.data) {
                    *a += b;
                }
            }
            l_rgb += r.l_rgb;
            l_sc += r.l_sc;
            l_ds += r.l_ds;
        }
        let specs = NetworkParams::layout(&self.params.config);
        for (g, s) in grads.iter().zip(&specs) {
            if g.data.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteGradient { tensor: s.name.clone(), iter });
            }
        }
        let mut flat: Vec<f64> = grads.iter().flat_map(|g| g.data.iter().copied()).collect();
        if let Some(clip) = self.config.train.grad_clip {
            let norm = flat.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip {
                flat.iter_mut().for_each(|g| *g *= clip / norm);
            }
        }
        let lr = self.config.train.lr_at(epoch);
        let mut p = self.params.flat();
        adam_step(&mut p, &flat, &mut self.adam, lr);
        self.params.set_flat(&p);
        self.iteration += 1;
        let cfg = &self.config.loss;
        Ok(StepRecord {
            iter,
            epoch,
            lr,
            l_rgb,
            l_sc,
            l_ds,
            total: l_rgb + cfg.lambda_sc * l_sc + cfg.lambda_ds * l_ds,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Files written by [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub records: Vec<StepRecord>,
}

pub fn checkpoint_name(iteration: usize) -> String {
    format!("ckpt_{iteration:08}.bin")
}

/// Run (or continue) training up to `config.train.max_iters`, appending to
/// `out/metrics.jsonl` and writing checkpoints into `out`. `stop_at` ends
/// the run early at that iteration count.
pub fn train(trainer: &mut Trainer<'_>, out: &Path, stop_at: Option<usize>) -> Result<TrainOutput, TrainError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let metrics = out.join("metrics.jsonl");
    let file = fs::OpenOptions::new()
        .create(true)
        .append(trainer.iteration > 0)
        .write(true)
        .truncate(trainer.iteration == 0)
        .open(&metrics)
        .map_err(io_err(&metrics))?;
    let mut log = BufWriter::new(file);
    let end = stop_at.unwrap_or(usize::MAX).min(trainer.config.train.max_iters);
    let every = trainer.config.train.checkpoint_every;
    let mut records = Vec::new();
    while trainer.iteration < end {
        let rec = match trainer.step() {
            Ok(r) => r,
            Err(e @ TrainError::NonFiniteGradient { .. }) => {
                let dump = out.join("abort.ckpt");
                trainer.checkpoint().save(&dump)?;
                log::error!("{e}; parameters before the step saved to {}", dump.display());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let line = serde_json::to_string(&rec).expect("serializable");
        writeln!(log, "{line}").map_err(io_err(&metrics))?;
        if rec.iter % 100 == 0 {
            log::info!("iter {} epoch {} lr {:.3e} l_rgb {:.5} l_sc {:.4} l_ds {:.6}", rec.iter, rec.epoch, rec.lr, rec.l_rgb, rec.l_sc, rec.l_ds);
        }
        records.push(rec);
        if every > 0 && trainer.iteration % every == 0 && trainer.iteration < end {
            trainer.checkpoint().save(&out.join(checkpoint_name(trainer.iteration)))?;
        }
    }
    log.flush().map_err(io_err(&metrics))?;
    let final_checkpoint = out.join(checkpoint_name(trainer.iteration));
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(TrainOutput { final_checkpoint, metrics, records })
}

/// Shift every training RPC by `px` pixels in a direction drawn from `seed`.
pub fn perturb_rpcs(ds: &mut Dataset, px: f64, seed: u64) {
    if px == 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB0A_D_CA3E_5A);
    for r in ds.records.iter_mut().filter(|r| r.split == data::Split::Train) {
        let a = rng.random::<f64>() * std::f64::consts::TAU;
        r.rpc.row_off += px * a.sin();
        r.rpc.col_off += px * a.cos();
    }
}
