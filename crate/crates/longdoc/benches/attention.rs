//! Full vs sliding+global attention across sequence lengths, plus a
//! thread-count sweep over the parallel kernel.
//!
//! Run `cargo bench -p longdoc` for the parallel build and
//! `cargo bench -p longdoc --no-default-features` for the sequential
//! fallback; criterion baselines make the two directly comparable.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use longdoc::attention::{full_attention, sliding_global_attention, AttentionSpec, SlidingInputs};
use longdoc::numerics::Tensor;
use longdoc::rng::Rng;

const N_HEADS: usize = 4;
const HEAD_DIM: usize = 16;
const WINDOW: usize = 128;

fn random_tensor(n: usize, rng: &mut Rng) -> Tensor<f32> {
    let hidden = N_HEADS * HEAD_DIM;
    let data: Vec<f32> = (0..n * hidden).map(|_| (rng.next_f64() * 2.0 - 1.0) as f32).collect();
    Tensor::new(vec![n, hidden], data).unwrap()
}

fn patterns(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    let mut rng = Rng::new(7);
    for n in [256usize, 512, 1024, 2048] {
        let q = random_tensor(n, &mut rng);
        let k = random_tensor(n, &mut rng);
        let v = random_tensor(n, &mut rng);
        let mask = vec![true; n];
        let spec = AttentionSpec::new(N_HEADS, HEAD_DIM, WINDOW, vec![0]).unwrap();
        let inputs = SlidingInputs { q: &q, k: &k, v: &v, qg: &q, kg: &k, vg: &v };

        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::new("sliding_global", n), &n, |b, _| {
            b.iter(|| sliding_global_attention(&inputs, &spec, &mask).unwrap())
        });
        if n <= 1024 {
            group.bench_with_input(BenchmarkId::new("full", n), &n, |b, _| {
                b.iter(|| full_attention(&q, &k, &v, N_HEADS, &mask, None).unwrap())
            });
        }
    }
    group.finish();
}

#[cfg(feature = "parallel")]
fn threads(c: &mut Criterion) {
    let mut group = c.benchmark_group("threads");
    let n = 2048usize;
    let mut rng = Rng::new(7);
    let q = random_tensor(n, &mut rng);
    let k = random_tensor(n, &mut rng);
    let v = random_tensor(n, &mut rng);
    let mask = vec![true; n];
    let spec = AttentionSpec::new(N_HEADS, HEAD_DIM, WINDOW, vec![0]).unwrap();
    let inputs = SlidingInputs { q: &q, k: &k, v: &v, qg: &q, kg: &k, vg: &v };

    let cores = std::thread::available_parallelism().map_or(4, |c| c.get()).max(2);
    for threads in [1usize, cores] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        group.bench_with_input(BenchmarkId::new("sliding_global_n2048", threads), &threads, |b, _| {
            b.iter(|| pool.install(|| sliding_global_attention(&inputs, &spec, &mask).unwrap()))
        });
    }
    group.finish();
}

#[cfg(not(feature = "parallel"))]
fn threads(_c: &mut Criterion) {}

criterion_group!(benches, patterns, threads);
criterion_main!(benches);
