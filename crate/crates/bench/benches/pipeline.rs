use std::collections::HashSet;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refine_core::trainer::Objective;
use refine_core::{
    generate_corpus, triple_loss, Embedder, EmbeddingVector, FrozenFeaturizer, MetricValues,
    SynthSpec, TrainableHead, VectorStore,
};

fn random_store(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> VectorStore {
    let mut store = VectorStore::new(dim);
    for i in 0..n {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        store
            .insert(format!("d{i:06}"), EmbeddingVector::new(v).unwrap())
            .unwrap();
    }
    store
}

fn search(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("search");
    for n in [1_000, 10_000] {
        let store = random_store(&mut rng, n, 256);
        let q: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q = EmbeddingVector::new(q).unwrap();
        group.bench_with_input(BenchmarkId::new("top10_d256", n), &n, |b, _| {
            b.iter(|| store.search(black_box(&q), 10).unwrap())
        });
    }
    group.finish();
}

fn featurize(c: &mut Criterion) {
    let (docs, _) = generate_corpus(&SynthSpec::default()).unwrap();
    let f = FrozenFeaturizer::default();
    let text = &docs[0].text;
    c.bench_function("featurize_doc", |b| {
        b.iter(|| f.embed(black_box(text)).unwrap())
    });
}

fn loss(c: &mut Criterion) {
    let (docs, queries) = generate_corpus(&SynthSpec::default()).unwrap();
    let f = FrozenFeaturizer::default();
    let mut head = TrainableHead::identity(f.dimension);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for w in head.weight.iter_mut() {
        *w += rng.random_range(-0.01..0.01);
    }
    let negatives: Vec<String> = docs[1..6].iter().map(|d| d.text.clone()).collect();
    let objective = Objective {
        lambda: 0.35,
        temperature: 0.05,
    };
    c.bench_function("triple_loss_d256_m5", |b| {
        b.iter(|| {
            triple_loss(
                black_box(&queries[0].text),
                &docs[0].text,
                &negatives,
                &head,
                &f,
                objective,
            )
            .unwrap()
        })
    });
}

fn metrics(c: &mut Criterion) {
    let ranked: Vec<String> = (0..100).map(|i| format!("d{i}")).collect();
    let relevant: HashSet<String> = ["d3", "d17", "d42"].iter().map(|s| s.to_string()).collect();
    c.bench_function("metrics_at_10", |b| {
        b.iter(|| MetricValues::compute(black_box(&ranked), &relevant, 10).unwrap())
    });
}

criterion_group!(benches, search, featurize, loss, metrics);
criterion_main!(benches);
