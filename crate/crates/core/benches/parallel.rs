use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mmforge::data::{chronological_split, normalize, synth_generate, MtsDataset, SplitKind, SynthSpec};
use mmforge::eval::{evaluate, EvalOptions};
use mmforge::meta::{meta_step, sample_tasks, MetaConfig, TaskPool};
use mmforge::model::{ForwardMode, Model, ModelConfig, ParamSet, Variant};
use mmforge::par;
use mmforge::rng::Rng;
use mmforge::tensor::Tensor;

fn setup() -> (MtsDataset, Model, ParamSet) {
    let raw = synth_generate(8, 200, &SynthSpec::benchmark(3), 7).unwrap();
    let ds = normalize(&chronological_split(&raw, 120, 40, 40).unwrap()).unwrap();
    let mut c = ModelConfig::new(Variant::Mmformer, 32, 8, 3);
    c.mc_passes = 16;
    let model = Model::new(c).unwrap();
    let params = model.init_params(&mut Rng::new(1));
    (ds, model, params)
}

fn threads() -> usize {
    std::env::var("MMFORGE_THREADS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn bench(c: &mut Criterion) {
    let (ds, model, params) = setup();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads()).build().unwrap();
    let x = Tensor::zeros(&[32, 3]);
    let tasks = {
        let tp = TaskPool::new(&ds, 32, 8, 1).unwrap();
        sample_tasks(&tp, 4, 4, 4, &mut Rng::new(2)).unwrap()
    };
    let meta = MetaConfig::default();
    let eval_opts = EvalOptions {
        seed: 3,
        ..EvalOptions::default()
    };

    let mut group = c.benchmark_group("parallel");
    group.sample_size(10);
    for mode in ["sequential", "rayon"] {
        let run = |f: &mut (dyn FnMut() + Send)| {
            if mode == "sequential" {
                par::sequential(f)
            } else {
                pool.install(f)
            }
        };
        group.bench_function(BenchmarkId::new("mc_forecast", mode), |b| {
            b.iter(|| run(&mut || {
                model.forecast(&params, &x, ForwardMode::McInfer, &Rng::new(4)).unwrap();
            }))
        });
        group.bench_function(BenchmarkId::new("evaluate", mode), |b| {
            b.iter(|| run(&mut || {
                evaluate(&model, &params, &ds, SplitKind::Test, &eval_opts).unwrap();
            }))
        });
        group.bench_function(BenchmarkId::new("meta_step", mode), |b| {
            b.iter(|| run(&mut || {
                meta_step(&model, &params, &tasks, &meta, &Rng::new(5)).unwrap();
            }))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
