use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use procdiff::metrics::{frechet_distance, procedure_consistency_from_embeddings, FeatureStats};

fn vectors(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

fn consistency(c: &mut Criterion) {
    let mut group = c.benchmark_group("procedure_consistency");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in [4usize, 16, 64] {
        let texts = vectors(&mut rng, n, 512);
        let images = vectors(&mut rng, n, 512);
        group.bench_with_input(BenchmarkId::from_parameter(n), &(texts, images), |b, (t, i)| {
            b.iter(|| procedure_consistency_from_embeddings(black_box(t), black_box(i)).unwrap())
        });
    }
    group.finish();
}

fn frechet(c: &mut Criterion) {
    let mut group = c.benchmark_group("frechet_distance");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for dim in [16usize, 64, 256] {
        let stats = |rng: &mut ChaCha8Rng| {
            let rows: Vec<Vec<f64>> = (0..2 * dim)
                .map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect())
                .collect();
            FeatureStats::from_features(dim, rows.iter().map(|r| r.as_slice())).unwrap()
        };
        let (a, b) = (stats(&mut rng), stats(&mut rng));
        group.bench_with_input(BenchmarkId::from_parameter(dim), &(a, b), |bench, (a, b)| {
            bench.iter(|| frechet_distance(black_box(a), black_box(b)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, consistency, frechet);
criterion_main!(benches);
