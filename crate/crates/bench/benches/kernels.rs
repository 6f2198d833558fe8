use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use fedsdr_bench::{batch, matrix, model, updates};
use fedsdr_core::federation::{aggregate, ServerState, Strategy};
use fedsdr_core::metrics::{js_divergence, CorpusStats};
use fedsdr_core::model::LayerId;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [16, 32, 128] {
        let a = matrix(32, n, 0.0);
        let b = matrix(n, 32, 1.0);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn forward_backward(c: &mut Criterion) {
    let m = model();
    let cfg = *m.backbone().config();
    let one = batch(&cfg, 1);
    let many = batch(&cfg, 32);
    let h = matrix(cfg.input_dim(), 1, 2.0);
    c.bench_function("dual_lora_forward/hidden", |b| {
        b.iter(|| m.dual_lora_forward(black_box(&h), LayerId::Hidden).unwrap())
    });
    c.bench_function("logits", |b| {
        b.iter(|| m.logits(black_box(&one[0].context)).unwrap())
    });
    c.bench_function("batch_nll/32", |b| {
        b.iter(|| m.batch_nll(black_box(&many)).unwrap())
    });
}

fn aggregation(c: &mut Criterion) {
    let len = model().stream_len();
    let ups = updates(8, len);
    let mut group = c.benchmark_group("aggregate");
    for strategy in [Strategy::FedAvg, Strategy::fedavgm(), Strategy::fedadam()] {
        let state = ServerState::new(vec![0.0; len], None, &strategy);
        group.bench_function(strategy.name(), |b| {
            b.iter(|| aggregate(black_box(&state), black_box(&ups), &strategy).unwrap())
        });
    }
    group.finish();
}

fn corpus_metrics(c: &mut Criterion) {
    let a: Vec<u32> = (0..4096).map(|i| (i * 7 % 32) as u32).collect();
    let b: Vec<u32> = (0..4096).map(|i| (i * 11 % 29) as u32).collect();
    let (da, db) = (
        CorpusStats::from_sequences(32, [a.as_slice()]).unwrap(),
        CorpusStats::from_sequences(32, [b.as_slice()]).unwrap(),
    );
    c.bench_function("js_divergence", |bench| {
        bench.iter(|| js_divergence(black_box(&da), black_box(&db)).unwrap())
    });
}

criterion_group!(
    benches,
    matmul,
    forward_backward,
    aggregation,
    corpus_metrics
);
criterion_main!(benches);
