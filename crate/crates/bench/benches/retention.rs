use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rpop_core::bench::{random_trajectory, seeded_bundle, BenchConfig};
use rpop_core::init::gaussian;
use rpop_core::kernel::{retention_chunkwise, retention_parallel, retention_recurrent_step, HeadState};
use rpop_core::world_model::train_forward;

const ETA: f64 = 1.0 - 1.0 / 32.0;

fn kernel_forms(c: &mut Criterion) {
    let mut group = c.benchmark_group("retention_kernel");
    for n in [64usize, 256] {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let q = gaussian::<f64, _>(n, 64, 1.0, &mut rng);
        let k = gaussian::<f64, _>(n, 64, 1.0, &mut rng);
        let v = gaussian::<f64, _>(n, 64, 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |b, _| {
            b.iter(|| retention_parallel(q.view(), k.view(), v.view(), ETA).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("recurrent", n), &n, |b, _| {
            b.iter(|| {
                let mut s = HeadState::zeros(64, 64);
                for i in 0..n {
                    s = retention_recurrent_step(&s, q.row(i), k.row(i), v.row(i), ETA).unwrap().1;
                }
                s
            })
        });
        group.bench_with_input(BenchmarkId::new("chunkwise_32", n), &n, |b, _| {
            b.iter(|| {
                let mut s = HeadState::zeros(64, 64);
                for start in (0..n).step_by(32) {
                    let rows = ndarray::s![start..start + 32, ..];
                    s = retention_chunkwise(q.slice(rows), k.slice(rows), v.slice(rows), &s, ETA).unwrap().1;
                }
                s
            })
        });
    }
    group.finish();
}

fn pop_training_forward(c: &mut Criterion) {
    let config = BenchConfig { d_model: 128, d_ffn: 512, layers: 2, heads: 4, ..BenchConfig::paper() };
    let bundle = seeded_bundle::<f64>(&config).unwrap();
    let segment = random_trajectory(&config.model_config(), 10, 1);
    let mut group = c.benchmark_group("pop_train_forward");
    group.sample_size(10);
    for blocks_per_chunk in [1usize, 3, 10] {
        group.bench_with_input(BenchmarkId::from_parameter(blocks_per_chunk), &blocks_per_chunk, |b, &bpc| {
            b.iter(|| train_forward(&bundle, &segment, bpc).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, kernel_forms, pop_training_forward);
criterion_main!(benches);
