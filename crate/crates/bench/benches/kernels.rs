use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use mnmt_bench::{batch, desk_model, filled};
use mnmt_core::decoding::beam_search;
use mnmt_core::model::{train_step, Optimizer};
use mnmt_core::numerics::{AdamConfig, AttentionSpec, Graph, LrSchedule};

const VOCAB: usize = 4000;

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for (m, k, n) in [(64, 64, 64), (512, 64, 256), (512, 64, VOCAB)] {
        let (a, b) = (filled(&[m, k], 1), filled(&[k, n], 2));
        g.bench_with_input(BenchmarkId::from_parameter(format!("{m}x{k}x{n}")), &(a, b), |bench, (a, b)| {
            bench.iter(|| a.matmul(b).unwrap())
        });
    }
    g.finish();
}

fn attention(c: &mut Criterion) {
    let (batch, len, d) = (16, 32, 64);
    let spec =
        AttentionSpec { batch, q_len: len, k_len: len, heads: 4, causal: true, key_padding: vec![false; batch * len] };
    let (q, k, v) = (filled(&[batch * len, d], 3), filled(&[batch * len, d], 4), filled(&[batch * len, d], 5));
    c.bench_function("attention forward+backward 16x32 d64", |bench| {
        bench.iter(|| {
            let mut gr = Graph::<f32>::new();
            let (qv, kv, vv) = (gr.param(q.clone()), gr.param(k.clone()), gr.param(v.clone()));
            let out = gr.attention(qv, kv, vv, spec.clone()).unwrap();
            let loss = gr.sum(out).unwrap();
            black_box(gr.backward(loss).unwrap())
        })
    });
}

fn training(c: &mut Criterion) {
    let b = batch(64, 20, VOCAB);
    let mut g = c.benchmark_group("train_step");
    g.sample_size(20);
    g.bench_function("desk model, 64 x 20 tokens", |bench| {
        let mut state = desk_model(VOCAB);
        let mut opt = Optimizer::new(&state, AdamConfig::default(), LrSchedule::Constant { lr: 1e-4 }).unwrap();
        let mut seed = 0;
        bench.iter(|| {
            seed += 1;
            train_step(&mut state, &b, &mut opt, 0.1, seed).unwrap()
        })
    });
    g.finish();
}

fn decoding(c: &mut Criterion) {
    let state = desk_model(VOCAB);
    let src: Vec<u32> = (0..15).map(|i| 10 + i * 13).collect();
    let mut g = c.benchmark_group("beam_search");
    g.sample_size(20);
    for beam in [1, 4] {
        g.bench_with_input(BenchmarkId::from_parameter(beam), &beam, |bench, &beam| {
            bench.iter(|| beam_search(&state, &src, &[], beam, 30, 0.6, &[]).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, matmul, attention, training, decoding);
criterion_main!(benches);
