use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use metasampler::data::{generate_synthetic, Dataset, SynthSpec};
use metasampler::eval::{evaluate_retrieval, Protocol};
use metasampler::losses::Metric;
use metasampler::meta::{sampler_meta_step, MetaOptions, MetaProblem, UpdateUnits};
use metasampler::models::{ModelDims, ModelParams, SamplerParams};
use metasampler::parallel;
use metasampler::rng::seeded;
use metasampler::trainer::refresh_policy;

fn setup() -> (Dataset, ModelParams, SamplerParams) {
    let spec = SynthSpec {
        identities: 100,
        per_id: 20,
        input_dim: 32,
        ..SynthSpec::default()
    };
    let dataset = generate_synthetic(&spec, 1).unwrap();
    let mut rng = seeded(2);
    let dims = ModelDims {
        input_dim: 32,
        hidden_dim: 64,
        embed_dim: 16,
        num_identities: 100,
    };
    let model = ModelParams::init(dims, &mut rng);
    let sampler = SamplerParams::new(16, Some(16), &mut rng);
    (dataset, model, sampler)
}

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn bench(c: &mut Criterion) {
    let (dataset, model, sampler) = setup();
    let train = dataset.train_set().unwrap();

    let mut group = c.benchmark_group("refresh_policy");
    for (name, on) in MODES {
        parallel::set_enabled(on);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| refresh_policy(&train, &model, &sampler).unwrap())
        });
    }
    group.finish();

    let units = UpdateUnits::Single((0..64).map(|k| k * 7 % train.len()).collect());
    let eval: Vec<usize> = (0..64).map(|k| k * 11 % train.len()).collect();
    let problem = MetaProblem {
        train: &train,
        model: &model,
        units: &units,
        eval: &eval,
        beta: 0.1,
        weight_decay: 5e-4,
        margin: 0.3,
        metric: Metric::Euclidean,
    };
    let mut group = c.benchmark_group("per_sample_gradients");
    for (name, on) in MODES {
        parallel::set_enabled(on);
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| problem.unit_gradients().unwrap()));
    }
    group.finish();

    let mut group = c.benchmark_group("sampler_meta_step");
    for (name, on) in MODES {
        parallel::set_enabled(on);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| sampler_meta_step(&problem, &sampler, 1e-3, MetaOptions::default()).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("evaluate_retrieval");
    for (name, on) in MODES {
        parallel::set_enabled(on);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate_retrieval(&model, &dataset, Metric::Euclidean, Protocol::Standard).unwrap())
        });
    }
    group.finish();
    parallel::set_enabled(true);
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench
}
criterion_main!(benches);
