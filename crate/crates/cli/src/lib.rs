//! Subcommands of the `satnerf` binary, callable in-process.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use satnerf_core::data::{self, Dataset};
use satnerf_core::eval::{self, Dsm, EvalReport, RenderOptions};
use satnerf_core::exec::{self, Execution};
use satnerf_core::synth::{self, SceneSpec};
use satnerf_core::trainer::{self, Checkpoint, Config, Trainer};

#[derive(Debug, Parser)]
#[command(name = "satnerf", version, about = "Shadow-aware NeRF for RPC satellite imagery")]
pub struct Cli {
    /// Cap on worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene with exact cameras and ground truth.
    Synth(SynthArgs),
    /// Train a model on a dataset manifest.
    Train(TrainArgs),
    /// Render one view (optionally under another sun) from a checkpoint.
    Render(RenderArgs),
    /// Score a checkpoint on the test split and against the reference DSM.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene spec (JSON); the built-in desk scene when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Transient rectangles per view.
    #[arg(long)]
    pub transients: Option<usize>,
    #[arg(long)]
    pub noise_std: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub samples_per_ray: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub use_sc: Option<bool>,
    #[arg(long)]
    pub use_ds: Option<bool>,
    #[arg(long)]
    pub use_beta: Option<bool>,
    #[arg(long)]
    pub use_shading: Option<bool>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub chunk: Option<usize>,
    #[arg(long)]
    pub rpc_jitter_px: Option<f64>,
    #[arg(long)]
    pub lambda_sc: Option<f64>,
    #[arg(long)]
    pub lambda_ds: Option<f64>,
    #[arg(long)]
    pub beta_min: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Hidden width of the network.
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub depth_main: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from this checkpoint; its configuration wins over the
    /// config file, flags may still raise `--max-iters`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Directory for the ray cache.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Stop after this many total iterations even if `max_iters` is larger.
    #[arg(long)]
    pub stop_at: Option<usize>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Image id or manifest position.
    #[arg(long)]
    pub view: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, requires = "sun_azimuth")]
    pub sun_elevation: Option<f64>,
    #[arg(long, requires = "sun_elevation")]
    pub sun_azimuth: Option<f64>,
    /// Transient embedding row to use.
    #[arg(long)]
    pub embedding: Option<usize>,
    #[arg(long)]
    pub samples_per_ray: Option<usize>,
    /// Accepted for uniformity; rendering is deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for the report and predicted DSM.
    #[arg(long)]
    pub out: PathBuf,
    /// Reference DSM; the manifest's when absent.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub samples_per_ray: Option<usize>,
    /// Minimum ray weight sum for a pixel to enter the DSM.
    #[arg(long, default_value_t = eval::DEFAULT_MASK_THRESHOLD)]
    pub mask_threshold: f64,
    /// Accepted for uniformity; evaluation is deterministic.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunPaths {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
}

/// Training configuration file: model, loss and optimizer sections plus
/// paths. Relative paths are resolved against the file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub config: Config,
    pub paths: RunPaths,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut rc: RunConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut rc.paths.manifest, &mut rc.paths.out, &mut rc.paths.cache_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(rc)
    }

    /// Flags override the file, which overrides the defaults.
    pub fn apply(&mut self, seed: Option<u64>, o: &TrainOverrides) {
        let t = &mut self.config.train;
        let l = &mut self.config.loss;
        let n = &mut self.config.network;
        macro_rules! set {
            ($($dst:expr => $src:expr),* $(,)?) => {$(if let Some(v) = $src { $dst = v; })*};
        }
        set!(
            t.seed => seed,
            t.lr0 => o.lr0,
            t.gamma => o.gamma,
            t.batch => o.batch,
            t.samples_per_ray => o.samples_per_ray,
            t.max_iters => o.max_iters,
            t.use_sc => o.use_sc,
            t.use_ds => o.use_ds,
            t.use_beta => o.use_beta,
            t.use_shading => o.use_shading,
            t.checkpoint_every => o.checkpoint_every,
            t.chunk => o.chunk,
            t.rpc_jitter_px => o.rpc_jitter_px,
            l.lambda_sc => o.lambda_sc,
            l.lambda_ds => o.lambda_ds,
            l.beta_min => o.beta_min,
            l.eta => o.eta,
            n.width => o.width,
            n.depth_main => o.depth_main,
        );
    }
}

fn execution(cli: &Cli) -> Execution {
    if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let workers = cli.workers;
    exec::with_workers(workers, move || match &cli.command {
        Command::Synth(a) => cmd_synth(a, execution(&cli)),
        Command::Train(a) => cmd_train(a, execution(&cli)).map(|_| ()),
        Command::Render(a) => cmd_render(a, execution(&cli)),
        Command::Eval(a) => cmd_eval(a, execution(&cli)).map(|_| ()),
    })
}

pub fn cmd_synth(a: &SynthArgs, exec: Execution) -> Result<()> {
    let mut spec: SceneSpec = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SceneSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.image_size {
        spec.image_size = n;
    }
    if let Some(k) = a.transients {
        let mut t = spec.transients.unwrap_or(synth::TransientSpec { per_view: 0, min_frac: 0.1, max_frac: 0.25 });
        t.per_view = k;
        spec.transients = Some(t);
    }
    if let Some(s) = a.noise_std {
        spec.noise_std = s;
    }
    spec.validate()?;
    let out = synth::make_dataset(&spec, &a.out, exec)?;
    log::info!("wrote {}", out.manifest_path.display());
    println!("{}", out.manifest_path.display());
    Ok(())
}

/// Returns the final checkpoint path.
pub fn cmd_train(a: &TrainArgs, exec: Execution) -> Result<PathBuf> {
    let mut rc = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = &a.manifest {
        rc.paths.manifest = Some(m.clone());
    }
    if let Some(o) = &a.out {
        rc.paths.out = Some(o.clone());
    }
    if let Some(c) = &a.cache_dir {
        rc.paths.cache_dir = Some(c.clone());
    }
    let resume = match &a.resume {
        Some(p) => {
            ensure!(a.seed.is_none(), "--seed cannot be combined with --resume");
            Some(Checkpoint::load(p)?)
        }
        None => None,
    };
    if let Some(ck) = &resume {
        rc.config = ck.config.clone();
        rc.config.train.max_iters = a.overrides.max_iters.unwrap_or(rc.config.train.max_iters);
    } else {
        rc.apply(a.seed, &a.overrides);
    }
    let Some(manifest) = rc.paths.manifest.clone() else { bail!("no manifest given (--manifest or paths.manifest)") };
    let Some(out) = rc.paths.out.clone() else { bail!("no output directory given (--out or paths.out)") };
    ensure!(manifest.exists(), "manifest {} does not exist", manifest.display());
    rc.config.validate()?;

    let mut ds = data::load_dataset(&manifest)?;
    trainer::perturb_rpcs(&mut ds, rc.config.train.rpc_jitter_px, rc.config.train.seed);
    let store = data::cache_rays(&ds, rc.paths.cache_dir.as_deref(), exec)?;
    let mut t = match resume {
        Some(ck) => Trainer::resume(ck, &ds, store, exec)?,
        None => Trainer::new(rc.config.clone(), &ds, store, exec)?,
    };
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let resolved = RunConfig { config: t.config.clone(), paths: rc.paths.clone() };
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&resolved)?)?;
    let res = trainer::train(&mut t, &out, a.stop_at)?;
    log::info!("finished at iteration {}", t.iteration);
    println!("{}", res.final_checkpoint.display());
    Ok(res.final_checkpoint)
}

fn view_index(ds: &Dataset, view: &str) -> Result<usize> {
    if let Some(r) = ds.records.iter().find(|r| r.id == view) {
        return Ok(r.index);
    }
    match view.parse::<usize>() {
        Ok(i) if i < ds.records.len() => Ok(i),
        _ => bail!("no view {view:?} in the dataset"),
    }
}

fn render_options(ck: &Checkpoint, samples: Option<usize>, exec: Execution) -> RenderOptions {
    RenderOptions {
        n_samples: samples.unwrap_or(ck.config.train.samples_per_ray),
        shading_model: ck.config.train.use_shading,
        exec,
        ..Default::default()
    }
}

/// Per-pixel buffers written next to the rendered image.
#[derive(Debug, Serialize, Deserialize)]
pub struct RenderDump {
    pub view: String,
    pub width: usize,
    pub height: usize,
    /// Meters along the ray from its top point.
    pub depth: Vec<f64>,
    pub sun_vis: Vec<f64>,
    pub beta: Vec<f64>,
    pub weight_sum: Vec<f64>,
}

pub fn cmd_render(a: &RenderArgs, exec: Execution) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let ds = data::load_dataset(&a.manifest)?;
    ensure!(
        ck.config.network.n_images == ds.records.len(),
        "checkpoint was trained on {} images, manifest has {}",
        ck.config.network.n_images,
        ds.records.len()
    );
    let idx = view_index(&ds, &a.view)?;
    let mut opts = render_options(&ck, a.samples_per_ray, exec);
    opts.embedding = a.embedding;
    if let (Some(el), Some(az)) = (a.sun_elevation, a.sun_azimuth) {
        opts.sun = Some(data::sun_direction(az, el, &ds.frame)?);
    }
    let view = eval::render_view(&ck.params, &ds, idx, &opts)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    view.image.save_png(&a.out.join("image.png"))?;
    let mut shade = data::ImageData::new(view.width, view.height);
    for (i, s) in view.sun_vis.iter().enumerate() {
        shade.set(i / view.width, i % view.width, [*s; 3]);
    }
    shade.save_png(&a.out.join("shading.png"))?;
    let scale = ds.frame.normalization.to_meters(1.0);
    let dump = RenderDump {
        view: ds.records[idx].id.clone(),
        width: view.width,
        height: view.height,
        depth: view.depth.iter().map(|d| d * scale).collect(),
        sun_vis: view.sun_vis,
        beta: view.beta,
        weight_sum: view.weight_sum,
    };
    fs::write(a.out.join("render.json"), serde_json::to_string(&dump)?)?;
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs, exec: Execution) -> Result<EvalReport> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let ds = data::load_dataset(&a.manifest)?;
    ensure!(
        ck.config.network.n_images == ds.records.len(),
        "checkpoint was trained on {} images, manifest has {}",
        ck.config.network.n_images,
        ds.records.len()
    );
    let ref_path = a.reference.clone().or_else(|| ds.reference_dsm_path());
    let reference = match &ref_path {
        Some(p) => Some(Dsm::read(p)?),
        None => None,
    };
    let opts = render_options(&ck, a.samples_per_ray, exec);
    let (report, dsm) = eval::evaluate(&ck.params, &ds, reference.as_ref(), &opts, a.mask_threshold)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    if let Some(d) = dsm {
        d.write(&a.out.join("dsm.asc"))?;
    }
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(a.out.join("report.json"), &json)?;
    println!("{json}");
    Ok(report)
}
