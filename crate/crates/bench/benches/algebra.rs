use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use dynpset_core::pset;
use dynpset_core::ProcessId;

fn members(start: u64, len: u64) -> Vec<ProcessId> {
    (start..start + len).map(ProcessId).collect()
}

fn algebra(c: &mut Criterion) {
    let mut group = c.benchmark_group("algebra");
    for size in [16u64, 256, 4096] {
        let inputs = [members(0, size), members(size / 2, size)];
        group.bench_with_input(BenchmarkId::new("union", size), &inputs, |b, i| {
            b.iter(|| pset::union(black_box(i)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("difference", size), &inputs, |b, i| {
            b.iter(|| pset::difference(black_box(i)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("intersection", size), &inputs, |b, i| {
            b.iter(|| pset::intersection(black_box(i)).unwrap())
        });
        let counts = vec![size as usize / 4; 4];
        group.bench_with_input(BenchmarkId::new("split", size), &inputs[0], |b, i| {
            b.iter(|| pset::split(black_box(i), &counts).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, algebra);
criterion_main!(benches);
