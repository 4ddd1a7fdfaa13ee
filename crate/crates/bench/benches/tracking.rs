use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use mlt_bench::Fixture;
use mlt_core::tracker::{TrackerSession, Variant};

fn step(c: &mut Criterion) {
    let f = Fixture::desk(2, 5).unwrap();
    let seq = &f.sequence;
    for variant in [Variant::MatchOnly, Variant::Meta] {
        let name = format!("tracker step {}", variant.label());
        c.bench_function(&name, |b| {
            b.iter_batched_ref(
                || {
                    TrackerSession::init(
                        &seq.frames[0],
                        &seq.boxes[0],
                        &f.matcher,
                        Some(&f.meta),
                        &f.params,
                        variant,
                    )
                    .unwrap()
                },
                |s| s.step(&seq.frames[1]).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
}

criterion_group!(benches, step);
criterion_main!(benches);
