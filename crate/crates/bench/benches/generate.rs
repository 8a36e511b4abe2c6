use criterion::{criterion_group, criterion_main, Criterion};
use rvq_bench::random_stream;
use rvq_core::arnar::{generate_ar, support_streams, train_ngram_ar, GenConfig};
use rvq_core::mlm::{generate_parallel, DecodeSchedule, OracleScoreModel};
use rvq_core::TokenStream;
use std::hint::black_box;

fn masked(c: &mut Criterion) {
    let truth = random_stream(150, 8, 1024, 1);
    let model = OracleScoreModel::new(truth, 5.0, 2);
    let prompt = TokenStream::new("p", 50.0, 8, 1024, vec![]).unwrap();
    let schedule = DecodeSchedule::default();
    c.bench_function("generate_parallel/T150/N8/K1024", |b| {
        b.iter(|| generate_parallel(&model, &[], black_box(&prompt), 150, &schedule).unwrap())
    });
}

fn autoregressive(c: &mut Criterion) {
    let (streams, _) = support_streams(200, 100, 1, 1024, 700, 3).unwrap();
    let model = train_ngram_ar(&streams, 2, 0.01).unwrap();
    let config = GenConfig::new(1.0, 200, 4);
    c.bench_function("generate_ar/ngram2/K1024/200", |b| {
        b.iter(|| generate_ar(&model, &[], black_box(&[]), &config).unwrap())
    });
}

criterion_group!(benches, masked, autoregressive);
criterion_main!(benches);
