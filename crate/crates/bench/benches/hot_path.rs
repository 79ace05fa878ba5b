use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use wsc_core::policy::{DetectorState, PolicyConfig};
use wsc_core::probe::{auroc, ProbeModel};
use wsc_core::protocol::Frame;
use wsc_core::synthetic::{salad_corpus, two_gaussians, SaladCorpusSpec};
use wsc_core::{label_salad_chunks, LabelerConfig};

criterion_group!(benches, bench_predict, bench_decision, bench_labeler, bench_auroc, bench_codec);
criterion_main!(benches);

fn bench_predict(c: &mut Criterion) {
    let mut group = c.benchmark_group("predict");
    // hidden sizes of the 1.5B, 7B and 8B distills
    for dim in [1536usize, 3584, 4096] {
        let data = two_gaussians(1, dim, 6.0, 1).unwrap();
        let h = data.vectors.row(0).unwrap().to_vec();
        let model = ProbeModel::new((0..dim).map(|i| (i as f64).sin()).collect(), 0.1).unwrap();
        group.throughput(Throughput::Elements(dim as u64));
        group.bench_with_input(BenchmarkId::from_parameter(dim), &h, |b, h| {
            b.iter(|| model.predict(black_box(h)).unwrap())
        });
    }
    group.finish();
}

fn bench_decision(c: &mut Criterion) {
    let cfg = PolicyConfig {
        single_chop: false,
        ..Default::default()
    };
    c.bench_function("on_chunk_boundary", |b| {
        let mut st = DetectorState::new();
        let mut i = 0usize;
        b.iter(|| {
            i += 1;
            st.on_chunk_boundary(black_box(if i.is_multiple_of(3) { 0.2 } else { 0.8 }), i % 25, &cfg)
                .unwrap()
        })
    });
}

fn bench_labeler(c: &mut Criterion) {
    let corpus = salad_corpus(&SaladCorpusSpec {
        traces: 1,
        benign_chunks: (60, 60),
        salad_chunks: (60, 60),
        embed_dim: 384,
        ..Default::default()
    })
    .unwrap();
    let rows: Vec<&[f32]> = corpus.embed.rows().collect();
    c.bench_function("label_salad_chunks/120x384", |b| {
        b.iter(|| label_salad_chunks(black_box(&rows), &LabelerConfig::default()).unwrap())
    });
}

fn bench_auroc(c: &mut Criterion) {
    let scores: Vec<f64> = (0..10_000).map(|i| ((i * 7919) % 1000) as f64 / 1000.0).collect();
    let labels: Vec<bool> = (0..10_000).map(|i| (i * 31) % 7 < 3).collect();
    c.bench_function("auroc/10k", |b| b.iter(|| auroc(black_box(&scores), &labels).unwrap()));
}

fn bench_codec(c: &mut Criterion) {
    let frame = Frame::ChunkEvent {
        stream_id: 7,
        chunk_len: 32,
        hidden: vec![0.25; 3584],
    };
    let bytes = frame.encode();
    c.bench_function("chunk_event/encode/3584", |b| b.iter(|| black_box(&frame).encode()));
    c.bench_function("chunk_event/decode/3584", |b| {
        b.iter(|| Frame::decode(black_box(&bytes)).unwrap())
    });
}
