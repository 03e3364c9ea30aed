use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use netml_bench::capture;
use netml_core::baselines::knn_fit;
use netml_core::eval::macro_f1_indices;
use netml_core::flow::FlowConfig;
use netml_core::matrix::{flatten, Scaler};
use netml_core::mthl::{build_model, MthlConfig};
use netml_core::nn::Tensor;
use netml_core::pipeline::extract_capture;
use netml_core::synthetic::{hierarchical, SyntheticSpec};
use std::hint::black_box;

fn extraction(c: &mut Criterion) {
    let mut g = c.benchmark_group("extract");
    for flows in [100, 1000] {
        let bytes = capture(flows, 20);
        g.throughput(Throughput::Bytes(bytes.len() as u64));
        g.bench_with_input(BenchmarkId::from_parameter(flows), &bytes, |b, bytes| {
            b.iter(|| extract_capture(black_box(bytes), "bench.pcap", FlowConfig::default()).unwrap())
        });
    }
    g.finish();
}

fn matrix(c: &mut Criterion) {
    let (recs, _) = extract_capture(&capture(2000, 20), "bench.pcap", FlowConfig::default()).unwrap();
    c.bench_function("flatten+standardize 2000", |b| {
        b.iter(|| {
            let mut m = flatten(black_box(&recs)).unwrap();
            Scaler::fit(&m, "bench").apply(&mut m).unwrap();
            m
        })
    });
}

fn mthl_step(c: &mut Criterion) {
    let mut net = build_model::<f32>(&MthlConfig { n_mid: 8, n_top: 3, ..Default::default() }, 0).unwrap();
    let x = Tensor::new(vec![200, 121, 1], (0..200 * 121).map(|i| ((i % 97) as f32 - 48.0) / 30.0).collect()).unwrap();
    c.bench_function("mthl forward+backward batch 200", |b| {
        b.iter(|| {
            let (mid, top) = net.forward_heads(black_box(&x), true).unwrap();
            net.backward_heads(&mid, &top).unwrap()
        })
    });
}

fn knn(c: &mut Criterion) {
    let train = hierarchical(&SyntheticSpec { rows: 2000, ..Default::default() });
    let query = hierarchical(&SyntheticSpec { rows: 200, seed: 1, ..Default::default() });
    let model = knn_fit(&train, "mid", 5).unwrap();
    c.bench_function("knn k=5 200 queries over 2000 rows", |b| b.iter(|| model.predict_matrix(black_box(&query)).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let truth: Vec<usize> = (0..100_000).map(|i| i % 17).collect();
    let pred: Vec<usize> = (0..100_000).map(|i| (i * 7) % 17).collect();
    c.bench_function("macro_f1 100k rows 17 classes", |b| b.iter(|| macro_f1_indices(black_box(&truth), black_box(&pred), 17)));
}

criterion_group!(benches, extraction, matrix, mthl_step, knn, metrics);
criterion_main!(benches);
