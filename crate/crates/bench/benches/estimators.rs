use std::hint::black_box;
use std::sync::Arc;

use branchmc::harness::{fd_oracle_1d, load_preset, FdGrid};
use branchmc::{
    evaluate, grow_skeleton, run_interacting, BranchingLaw, EstimatorQuery, Scheme, Selection, StreamKey,
};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

fn query(preset: &str, scheme: Scheme) -> EstimatorQuery {
    let p = load_preset(preset).unwrap();
    let mut law = BranchingLaw::for_generator(p.model.generator(), 0.5, 2.5).unwrap();
    if scheme == Scheme::B {
        law = law.with_default_drift_mark().unwrap();
    }
    EstimatorQuery::new(p.model.clone(), Arc::new(law), 0.0, p.x0.clone(), scheme).unwrap()
}

fn samples(c: &mut Criterion) {
    let mut group = c.benchmark_group("sample");
    for (preset, scheme) in [
        ("cosine-d5", Scheme::A),
        ("cosine-d20", Scheme::A),
        ("ou1d-burgers015", Scheme::A),
        ("ou1d-burgers015", Scheme::B),
        ("ou2d-zsq004", Scheme::A),
    ] {
        let q = query(preset, scheme);
        let mut i = 0u64;
        group.bench_function(format!("{preset}/{scheme:?}"), |b| {
            b.iter(|| {
                i += 1;
                black_box(evaluate(&q, StreamKey::root(i)).unwrap())
            })
        });
    }
    group.finish();
}

fn skeleton(c: &mut Criterion) {
    let q = query("ou1d-poly", Scheme::A);
    let mut i = 0u64;
    c.bench_function("skeleton/ou1d-poly", |b| {
        b.iter(|| {
            i += 1;
            black_box(grow_skeleton(&q.law, 0.0, 1.0, StreamKey::root(i), 1_000_000).unwrap())
        })
    });
}

fn resampling(c: &mut Criterion) {
    let q = query("ou1d-zsq02", Scheme::A);
    let mut i = 0u64;
    c.bench_function("interacting/ou1d-zsq02/N=100", |b| {
        b.iter_batched(
            || {
                i += 1;
                let base = StreamKey::root(i);
                let keys = (0..100).map(|k| base.child(k)).collect::<Vec<_>>();
                (keys, base.child(u64::MAX))
            },
            |(keys, selection)| black_box(run_interacting(&q, &keys, selection, Selection::Multinomial).unwrap()),
            BatchSize::SmallInput,
        )
    });
}

fn finite_difference(c: &mut Criterion) {
    let p = load_preset("ou1d-burgers015").unwrap();
    let grid = FdGrid { space_points: 401, time_steps: 200, half_width: None };
    c.bench_function("fd_oracle/ou1d-burgers015/401x200", |b| {
        b.iter(|| black_box(fd_oracle_1d(&p.model, 1.0, grid).unwrap().value(0.0, 1.0)))
    });
}

criterion_group!(benches, samples, skeleton, resampling, finite_difference);
criterion_main!(benches);
