//! Batch gradient evaluation with one worker against the full pool.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lsd_core::harness::{generate_dataset, DatasetSpec, InputEncoder};
use lsd_core::lattice::{exact_gradient, DEFAULT_ENUMERATION_LIMIT};
use lsd_core::model::{Model, ModelConfig};
use lsd_core::par;
use lsd_core::token::{symbols, BaseAlphabet};
use lsd_core::train::{TrainConfig, TrainMode, Trainer};
use lsd_core::vocab::{build_vocab, count_ngrams};
use lsd_core::Vocabulary;

fn thread_counts() -> Vec<usize> {
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());
    if all > 1 {
        vec![1, all]
    } else {
        vec![1]
    }
}

fn setup() -> (Vocabulary, Vec<lsd_core::train::Example<f32>>) {
    let spec = DatasetSpec {
        train_size: 64,
        dev_size: 1,
        test_size: 1,
        ..DatasetSpec::default()
    };
    let data = generate_dataset(&spec).unwrap();
    let targets: Vec<&str> = data.train.iter().map(|r| r.target.as_str()).collect();
    let alphabet = BaseAlphabet::from_corpus(targets.iter().copied());
    let vocab = build_vocab(&count_ngrams(&targets, 3).unwrap(), &alphabet, 3, 40).unwrap();
    let encoder = InputEncoder::fit(&data.train).unwrap();
    (vocab, encoder.examples(&data.train).unwrap())
}

fn train_step(c: &mut Criterion) {
    let (vocab, data) = setup();
    let config = ModelConfig::desk(data[0].input.cols(), vocab.len());
    let batch: Vec<usize> = (0..32).collect();
    let mut group = c.benchmark_group("train_step_batch32");
    group.sample_size(10);
    for threads in thread_counts() {
        group.bench_with_input(BenchmarkId::from_parameter(threads), &threads, |b, &threads| {
            let model = Model::<f32>::new(config.clone(), 0).unwrap();
            let mut trainer = Trainer::new(model, &vocab, TrainConfig::new(TrainMode::Lsd, 1_000_000)).unwrap();
            b.iter(|| par::with_threads(threads, || trainer.train_step(&data, &batch).unwrap()));
        });
    }
    group.finish();
}

fn exact_gradient_paths(c: &mut Criterion) {
    let pieces = ["a", "b", "ab", "ba", "aa", "bb", "aba", "bab"];
    let vocab = Vocabulary::from_pieces(&pieces).unwrap();
    let model = Model::<f64>::new(ModelConfig::desk(4, vocab.len()), 1).unwrap();
    let x = lsd_core::Tensor::from_vec(&[16, 4], (0..64).map(|i| ((i * 7) % 11) as f64 / 11.0).collect()).unwrap();
    let y = symbols("abababab");
    let mut group = c.benchmark_group("exact_gradient_abababab");
    group.sample_size(10);
    for threads in thread_counts() {
        group.bench_with_input(BenchmarkId::from_parameter(threads), &threads, |b, &threads| {
            b.iter(|| {
                par::with_threads(threads, || {
                    exact_gradient(&model, &x, &y, &vocab, DEFAULT_ENUMERATION_LIMIT).unwrap()
                })
            });
        });
    }
    group.finish();
}

criterion_group!(benches, train_step, exact_gradient_paths);
criterion_main!(benches);
