use autofis::ingest::{generate_synthetic, SyntheticOptions, SyntheticSpec};
use autofis::interaction::LayerMode;
use autofis::network::{Head, Model, ModelConfig, Phase};
use autofis::par::Execution;
use autofis::rng::{substream, Stream};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn model(head: Head) -> (Model, autofis::data::Dataset) {
    let spec = SyntheticSpec::sample(&SyntheticOptions::default(), 1).unwrap();
    let (train, _) = generate_synthetic(&spec, 2000, 0).unwrap();
    let config = ModelConfig {
        head,
        mlp_layers: if head.uses_mlp() { vec![64, 64, 1] } else { Vec::new() },
        pair_mode: LayerMode::Search,
        ..ModelConfig::default()
    };
    let model = Model::new(train.schema(), &config, &mut substream(1, Stream::Init)).unwrap();
    (model, train)
}

fn batch_eval(c: &mut Criterion) {
    for head in [Head::Fm, Head::DeepFm, Head::Ipnn] {
        let (model, data) = model(head);
        let rows: Vec<usize> = (0..data.len()).collect();
        let batch = data.batch(&rows);
        let mut group = c.benchmark_group(format!("{head:?}/2000"));
        for exec in [Execution::Sequential, Execution::Parallel] {
            group.bench_with_input(BenchmarkId::new("forward", format!("{exec:?}")), &exec, |b, &exec| {
                b.iter(|| black_box(model.forward(&batch, Phase::Train, exec).unwrap()))
            });
            group.bench_with_input(
                BenchmarkId::new("loss_and_grad", format!("{exec:?}")),
                &exec,
                |b, &exec| b.iter(|| black_box(model.loss_and_grad(&batch, exec).unwrap())),
            );
        }
        group.finish();
    }
}

criterion_group!(benches, batch_eval);
criterion_main!(benches);
