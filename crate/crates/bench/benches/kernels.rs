use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use m2ort_core::rng::{stream, Stream};
use m2ort_core::{Graph, Tensor};
use rand::Rng;

fn random(shape: [usize; 2], seed: u64) -> Tensor<f32> {
    let mut rng = stream(seed, Stream::Probe);
    let n = shape[0] * shape[1];
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 197, 768] {
        let a = random([n, 256], 0);
        let b = random([256, 256], 1);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let x = g.constant(a.clone());
                let w = g.constant(b.clone());
                g.matmul(x, w).unwrap()
            })
        });
    }
    group.finish();
}

fn attention_backward(c: &mut Criterion) {
    let q = random([197, 64], 2);
    c.bench_function("softmax_attention_backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let x = g.param(q.clone());
            let xt = g.transpose(x).unwrap();
            let s = g.matmul(x, xt).unwrap();
            let p = g.softmax(s).unwrap();
            let o = g.matmul(p, x).unwrap();
            let l = g.mean(o);
            g.backward(l).unwrap()
        })
    });
}

criterion_group!(benches, matmul, attention_backward);
criterion_main!(benches);
