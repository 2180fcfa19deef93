use std::collections::BTreeSet;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use dsae_bench::{corpus, model_config};
use dsae_core::model::{ModelParams, Network, ParamVars};
use dsae_core::objective::{compute_loss, LossSpec};
use dsae_core::tensor::normal_sample;
use dsae_core::training::{TrainConfig, TrainState};
use dsae_core::{Rng, Tape};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32usize, 64, 128] {
        let mut rng = Rng::seed_from_u64(0);
        let a = normal_sample(&mut rng, &[n, n]);
        let b = normal_sample(&mut rng, &[n, n]);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let a = tape.param(a.clone());
                let b = tape.param(b.clone());
                let y = tape.matmul(a, b).unwrap();
                let s = tape.sum(y, None).unwrap();
                black_box(tape.backward(s).unwrap());
            })
        });
    }
    group.finish();
}

fn loss_step(c: &mut Criterion) {
    let data = corpus(40);
    let batch = data.batch(&(0..32).collect::<Vec<_>>());
    let mut group = c.benchmark_group("loss_forward_backward");
    group.sample_size(20);
    for enriched in [false, true] {
        let config = model_config(enriched);
        let params = ModelParams::init(&config, &mut Rng::seed_from_u64(1)).unwrap();
        let spec = LossSpec::informed(params.tensors.clone(), true);
        let label = if enriched { "enriched" } else { "factorised" };
        group.bench_function(label, |bench| {
            let mut rng = Rng::seed_from_u64(2);
            bench.iter(|| {
                let mut tape = Tape::new();
                let vars = ParamVars::bind(&mut tape, &params.tensors, |_| true);
                let net = Network::new(&config, &vars);
                let x = tape.constant(batch.x.clone());
                let out = compute_loss(&mut tape, &net, x, &spec, &mut rng, None).unwrap();
                black_box(tape.backward(out.total).unwrap());
            })
        });
    }
    group.finish();
}

fn train_epoch(c: &mut Criterion) {
    let data = corpus(80);
    let mut group = c.benchmark_group("train_epoch");
    group.sample_size(10);
    group.bench_function("stage2_64_sequences", |bench| {
        let state = TrainState::new(TrainConfig::default()).unwrap();
        let spec = LossSpec::informed(state.params.tensors.clone(), true);
        bench.iter_batched(
            || state.clone(),
            |mut s| black_box(s.run_epoch(&data, &spec, &BTreeSet::new()).unwrap()),
            criterion::BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, matmul, loss_step, train_epoch);
criterion_main!(benches);
