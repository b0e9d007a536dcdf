use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lisa_core::lisa::{lisa_multihead_with, CircularEmbeddings, LiSAAttentionParams, LiSAConfig, TokenLayout};
use lisa_core::ndtensor::{contract_with, Contraction};
use lisa_core::random::{normal_tensor, rng_from_seed};
use lisa_core::Exec;
use std::hint::black_box;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn multihead(c: &mut Criterion) {
    let mut group = c.benchmark_group("lisa_multihead");
    group.sample_size(10);
    for side in [14usize, 32] {
        let cfg = LiSAConfig::new(TokenLayout::Grid(side, side), 96, 3, 16).unwrap();
        let mut rng = rng_from_seed(7);
        let params = LiSAAttentionParams {
            qkv_w: normal_tensor(&[96, 288], 0.02, &mut rng),
            qkv_b: normal_tensor(&[288], 0.02, &mut rng),
            out_w: normal_tensor(&[96, 96], 0.02, &mut rng),
            out_b: normal_tensor(&[96], 0.02, &mut rng),
            emb: vec![CircularEmbeddings::random(&cfg, 0.02, &mut rng)],
        };
        let x = normal_tensor(&[side * side, 96], 1.0, &mut rng);
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, side * side), &exec, |b, &exec| {
                b.iter(|| black_box(lisa_multihead_with(&x, &params, &cfg, exec).unwrap()))
            });
        }
    }
    group.finish();
}

fn batched_scores(c: &mut Criterion) {
    let mut group = c.benchmark_group("batched_scores");
    group.sample_size(10);
    let mut rng = rng_from_seed(8);
    let q = normal_tensor(&[12, 256, 32], 1.0, &mut rng);
    let k = normal_tensor(&[12, 256, 32], 1.0, &mut rng);
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| black_box(contract_with(&q, &k, Contraction::BatchedBt, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, multihead, batched_scores);
criterion_main!(benches);
