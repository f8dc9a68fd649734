use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use r2p_core::config::RunConfig;
use r2p_core::eval::configured_bank;
use r2p_core::par::Exec;
use r2p_core::scene::generate_dataset;
use r2p_core::train::Session;

fn batch_gradients(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let pool = generate_dataset(7, 200, &cfg.data.mix, cfg.data.dims).unwrap();
    let bank = configured_bank(&cfg, &pool).unwrap();
    let scenes = &pool[..cfg.train.batch_size];
    let session = Session::new(&cfg, &bank).unwrap();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for (name, exec) in [("parallel", Exec::Parallel), ("sequential", Exec::Sequential)] {
        group.bench_with_input(BenchmarkId::new(name, scenes.len()), &exec, |b, &exec| {
            b.iter(|| session.batch_gradients(scenes, 1.0, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, batch_gradients);
criterion_main!(benches);
