use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use topicfuse::agreement::{bootstrap_ci, gwet_ac1, rating_matrix_from_labels, Coefficient};
use topicfuse::annotator::parse::{parse_response, render_canonical};
use topicfuse::corpus::{Topic, TopicSet};
use topicfuse::ensemble::{optimal_threshold, pca_first_component, ScoreMatrix};

fn labels(raters: usize, items: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<bool>> {
    (0..raters)
        .map(|_| (0..items).map(|_| rng.random_bool(0.3)).collect())
        .collect()
}

fn agreement(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("agreement");
    for items in [1_000, 10_000] {
        let m = rating_matrix_from_labels(&labels(5, items, &mut rng)).unwrap();
        group.bench_with_input(BenchmarkId::new("ac1", items), &m, |b, m| {
            b.iter(|| gwet_ac1(black_box(m)).unwrap())
        });
    }
    let m = rating_matrix_from_labels(&labels(5, 2_000, &mut rng)).unwrap();
    group.sample_size(10);
    group.bench_function("bootstrap_1000x2000", |b| {
        b.iter(|| bootstrap_ci(Coefficient::Ac1, black_box(&m), 1000, 0).unwrap())
    });
    group.finish();
}

fn ensemble(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut group = c.benchmark_group("ensemble");
    for n in [1_000, 20_000] {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..5).map(|_| rng.random::<f64>()).collect())
            .collect();
        let m = ScoreMatrix::new(rows).unwrap();
        group.bench_with_input(BenchmarkId::new("pca", n), &m, |b, m| {
            b.iter(|| pca_first_component(black_box(m)).unwrap())
        });
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let reference: Vec<bool> = (0..n).map(|_| rng.random_bool(0.2)).collect();
        group.bench_with_input(BenchmarkId::new("threshold", n), &(scores, reference), |b, (s, r)| {
            b.iter(|| optimal_threshold(black_box(s), black_box(r)).unwrap())
        });
    }
    group.finish();
}

fn parse(c: &mut Criterion) {
    let topics = TopicSet::new(
        (0..12)
            .map(|i| Topic::new(format!("topic{i}"), format!("Description of topic {i}")))
            .collect(),
    )
    .unwrap();
    let answers: Vec<(String, bool, Vec<String>)> = (0..12)
        .map(|i| (format!("topic{i}"), i % 3 == 0, vec![format!("phrase {i}")]))
        .collect();
    let borrowed: Vec<(&str, bool, Vec<String>)> =
        answers.iter().map(|(n, l, p)| (n.as_str(), *l, p.clone())).collect();
    let content = render_canonical(&borrowed);
    c.bench_function("parse_response_12_topics", |b| {
        b.iter(|| parse_response(black_box(&content), &topics).unwrap())
    });
}

criterion_group!(benches, agreement, ensemble, parse);
criterion_main!(benches);
