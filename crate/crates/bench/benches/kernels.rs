use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use cslr_core::config::RunConfig;
use cslr_core::ctc::{beam_decode, ctc_loss_and_grad, greedy_decode, LogitsSeq};
use cslr_core::data::{synth_generate, Split};
use cslr_core::model::{BatchItem, Model};
use cslr_core::train::Trainer;
use cslr_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_logits(t: usize, c: usize, seed: u64) -> LogitsSeq {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LogitsSeq::new(t, c, (0..t * c).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
}

fn ctc(c: &mut Criterion) {
    let mut group = c.benchmark_group("ctc_loss");
    for t in [32, 128] {
        let logits = random_logits(t, 21, 1);
        let label: Vec<usize> = (0..t / 8).map(|i| 1 + i % 20).collect();
        group.bench_with_input(BenchmarkId::from_parameter(t), &t, |b, _| {
            b.iter(|| ctc_loss_and_grad(&logits, &label).unwrap())
        });
    }
    group.finish();
}

fn decoding(c: &mut Criterion) {
    let logits = random_logits(64, 21, 2);
    c.bench_function("greedy_decode", |b| b.iter(|| greedy_decode(&logits)));
    let mut group = c.benchmark_group("beam_decode");
    for w in [1, 10] {
        group.bench_with_input(BenchmarkId::from_parameter(w), &w, |b, &w| {
            b.iter(|| beam_decode(&logits, w).unwrap())
        });
    }
    group.finish();
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::from_fn(&[8, 16, 16, 16], |_| rng.random_range(-1.0..1.0));
    let w = Tensor::from_fn(&[32, 16, 3, 3], |_| rng.random_range(-0.1..0.1));
    c.bench_function("conv2d_fwd_bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.leaf(&x.clone().with_grad());
            let wv = g.leaf(&w.clone().with_grad());
            let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap()
        })
    });
}

fn train_step(c: &mut Criterion) {
    let ds = synth_generate(&Default::default()).unwrap();
    let run = RunConfig::default();
    let model = Model::new(run.model_for(&ds).unwrap()).unwrap();
    let mut trainer = Trainer::new(model, run.train).unwrap();
    let items: Vec<BatchItem> = ds.split(Split::Train)[..2]
        .iter()
        .map(|s| BatchItem {
            clip: s.clip.clone(),
            glosses: s.glosses.clone(),
            signer: s.signer,
        })
        .collect();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    group.bench_function("default_model_batch2", |b| b.iter(|| trainer.train_step(&items).unwrap()));
    group.finish();
}

criterion_group!(benches, ctc, decoding, conv, train_step);
criterion_main!(benches);
