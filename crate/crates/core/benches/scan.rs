use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ris_core::retrieval::scan::{scan, scan_sequential, top_k, unit, Direction};

fn unit_rows(n: usize, dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let row: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        out.extend(unit(&row).unwrap());
    }
    out
}

fn bench_scan(c: &mut Criterion) {
    let dim = 9216;
    let mut group = c.benchmark_group("scan");
    group.sample_size(10);
    for n in [3_000usize, 30_000] {
        let matrix = unit_rows(n, dim, 1);
        let zero = vec![false; n];
        let query = matrix[..dim].to_vec();
        let mut out = vec![0.0; n];
        group.throughput(Throughput::Bytes((n * dim * 4) as u64));
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |b, _| {
            b.iter(|| scan_sequential(black_box(&matrix), dim, &zero, Some(&query), &mut out))
        });
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |b, _| {
            b.iter(|| scan(black_box(&matrix), dim, &zero, Some(&query), &mut out))
        });
        group.bench_with_input(BenchmarkId::new("top10", n), &n, |b, _| {
            b.iter(|| top_k(black_box(&out), 10, Direction::Nearest, None))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_scan);
criterion_main!(benches);
