use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

use sbrl_bench::short_config;
use sbrl_core::orchestrator::{self, Trainer};

fn outer_iteration(c: &mut Criterion) {
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    let warm = orchestrator::train_loop(&short_config(3), None, |_| Ok(())).unwrap();
    group.bench_function("outer_iteration_2d", |b| {
        b.iter_batched(
            || Trainer::from_checkpoint(warm.clone()).unwrap(),
            |mut t| {
                t.step().unwrap();
                black_box(t)
            },
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, outer_iteration);
criterion_main!(benches);
