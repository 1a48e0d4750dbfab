use criterion::{black_box, criterion_group, criterion_main, Criterion};
use mpath_bench::{default_model, inputs};
use mpath_core::metrics::{bleu4, rouge_l_f1, Scorer};
use mpath_core::model::{forward_loss, generate_ids, Decoding, TruncationCounter};
use mpath_core::reports::fixtures::PAIRS;
use mpath_core::rng::{normal, seeded};
use mpath_core::tensor::kernels;
use mpath_core::training::{adamw_step, OptState, TrainConfig};

fn randv(n: usize, seed: u64) -> Vec<f32> {
    let mut r = seeded(seed);
    (0..n).map(|_| normal(&mut r) as f32).collect()
}

fn tensor_kernels(c: &mut Criterion) {
    let (m, k, n) = (64, 64, 128);
    let a = randv(m * k, 1);
    let b = randv(k * n, 2);
    c.bench_function("matmul_64x64x128", |bench| {
        bench.iter(|| {
            let mut out = vec![0f32; m * n];
            kernels::matmul_acc(black_box(&a), black_box(&b), &mut out, m, k, n);
            out
        })
    });
    let x = randv(96 * 64, 3);
    let (g, beta) = (vec![1f32; 64], vec![0f32; 64]);
    c.bench_function("layer_norm_96x64", |bench| {
        bench.iter(|| {
            let mut out = vec![0f32; x.len()];
            kernels::layer_norm_rows(black_box(&x), &g, &beta, &mut out, 64, None);
            out
        })
    });
}

fn metrics(c: &mut Criterion) {
    let scorer = Scorer::default();
    c.bench_function("bleu4_fixture_pairs", |b| {
        b.iter(|| PAIRS.iter().map(|(r, g)| bleu4(black_box(g), r)).sum::<f64>())
    });
    c.bench_function("rouge_l_fixture_pairs", |b| {
        b.iter(|| PAIRS.iter().map(|(r, g)| rouge_l_f1(black_box(g), r)).sum::<f64>())
    });
    c.bench_function("composite_fixture_pairs", |b| {
        b.iter(|| PAIRS.iter().map(|(r, g)| scorer.score(black_box(g), r).composite).sum::<f64>())
    });
}

fn model(c: &mut Criterion) {
    let (mut state, samples) = default_model(16);
    let batch_samples = samples[..8].to_vec();
    let cfg = TrainConfig::default();
    let mut opt = OptState::new(cfg.adam(), state.tensors().len());
    let trunc = TruncationCounter::default();
    let prompt = state.config.prompt_text.clone();
    c.bench_function("train_step_batch8", |b| {
        b.iter(|| {
            let batch = inputs(&batch_samples, &prompt);
            let loss = forward_loss(&mut state, &batch, true, &trunc).unwrap();
            adamw_step(&mut state, &mut opt, 1e-4).unwrap();
            loss.total
        })
    });
    c.bench_function("greedy_generate_32_tokens", |b| {
        b.iter(|| generate_ids(&state, black_box(&samples[0].features), &prompt, Decoding::Greedy, 32).unwrap())
    });
}

criterion_group!(benches, tensor_kernels, metrics, model);
criterion_main!(benches);
