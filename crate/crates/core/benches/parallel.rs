use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use satnerf_core::data::{self, Dataset};
use satnerf_core::exec::Execution;
use satnerf_core::network::{NetworkConfig, NetworkParams};
use satnerf_core::ray::sample_points_seeded;
use satnerf_core::render::render_rays;
use satnerf_core::synth::{self, SceneSpec};
use satnerf_core::trainer::{Config, Trainer};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn dataset() -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec { image_size: 32, ..Default::default() };
    let s = synth::make_dataset(&spec, dir.path(), Execution::Parallel).unwrap();
    let ds = data::load_dataset(&s.manifest_path).unwrap();
    (dir, ds)
}

fn render(c: &mut Criterion) {
    let (_dir, ds) = dataset();
    let params = NetworkParams::init(&NetworkConfig { width: 64, n_images: ds.records.len(), ..Default::default() }).unwrap();
    let rays = ds.image_rays(0).unwrap();
    let samples: Vec<_> = rays.iter().map(|r| sample_points_seeded(r, 32, false, 0)).collect();
    let mut g = c.benchmark_group("render_rays_1024");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| render_rays(&params, &rays, &samples, true, 64, exec).unwrap()));
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let (_dir, ds) = dataset();
    let store = data::cache_rays(&ds, None, Execution::Parallel).unwrap();
    let mut g = c.benchmark_group("train_step_256");
    g.sample_size(10);
    for (name, exec) in MODES {
        let mut cfg = Config::default();
        cfg.train.batch = 256;
        cfg.network.width = 64;
        g.bench_function(name, |b| {
            b.iter_batched(
                || Trainer::new(cfg.clone(), &ds, store.clone(), exec).unwrap(),
                |mut t| t.step().unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    g.finish();
}

criterion_group!(benches, render, train_step);
criterion_main!(benches);
