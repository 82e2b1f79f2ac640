use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use odefuse::diffcore::{Tape, Tensor};
use odefuse::explain::Explainer;
use odefuse::graph::adjacency_from_columns;
use odefuse::model::{bind, forward, predict};
use odefuse_bench::{columns, fixture};
use rand_chacha::ChaCha8Rng;

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("network");
    for hidden in [16usize, 32, 64] {
        let f = fixture(8, hidden, 1, 1);
        let x = f.rows[0].clone();
        group.bench_with_input(BenchmarkId::new("predict", hidden), &hidden, |b, _| {
            b.iter(|| predict(&f.params, &f.adj, black_box(&x)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", hidden), &hidden, |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let p = bind(&mut tape, &f.params, true);
                let xv = tape.constant(Tensor::row(x.clone()));
                let out = forward::<ChaCha8Rng>(&mut tape, xv, &f.adj, &f.params, &p, None).unwrap();
                let t = tape.constant(Tensor::row(vec![f.targets[0]]));
                let diff = tape.sub(out, t).unwrap();
                let sq = tape.mul(diff, diff).unwrap();
                let loss = tape.sum_all(sq);
                black_box(tape.backward(loss).unwrap())
            })
        });
    }
    group.finish();
}

fn adjacency(c: &mut Criterion) {
    let mut group = c.benchmark_group("adjacency");
    for d in [8usize, 51] {
        let cols = columns(2000, d, 2);
        group.bench_with_input(BenchmarkId::from_parameter(d), &d, |b, _| {
            b.iter(|| adjacency_from_columns(black_box(&cols), 0.3).unwrap())
        });
    }
    group.finish();
}

fn shapley(c: &mut Criterion) {
    let f = fixture(8, 16, 40, 3);
    let names: Vec<String> = (0..8).map(|j| format!("x{j}")).collect();
    let background = f.rows[..20].to_vec();
    let model = |x: &[f64]| predict(&f.params, &f.adj, x);
    let explainer = Explainer::new(names, background, model).unwrap();
    let x = f.rows[30].clone();
    let mut group = c.benchmark_group("shapley");
    group.sample_size(10);
    group.bench_function("exact_d8", |b| b.iter(|| explainer.exact(black_box(&x)).unwrap()));
    group.bench_function("sampled_d8_512", |b| b.iter(|| explainer.sampled(black_box(&x), 512, 0).unwrap()));
    group.finish();
}

criterion_group!(benches, forward_backward, adjacency, shapley);
criterion_main!(benches);
