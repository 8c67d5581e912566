use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trimodal_core::config::RunConfig;
use trimodal_core::encoders::WindowBlock;
use trimodal_core::label_head::NUM_CLASSES;
use trimodal_core::losses::two_way_loss;
use trimodal_core::nn::{Activation, Ctx, ParamStore};
use trimodal_core::train::{plain_batch, synthetic_splits, Trainer};
use trimodal_core::{Tape, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn matmul(c: &mut Criterion) {
    let a = random(&[512, 128], 1);
    let w = random(&[128, 128], 2);
    c.bench_function("matmul_512x128x128_fwd_bwd", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let (va, vw) = (tape.leaf(a.clone(), true), tape.leaf(w.clone(), true));
            let y = tape.matmul(va, vw).unwrap();
            let s = tape.sum(y).unwrap();
            tape.backward(s).unwrap();
        })
    });
}

fn window_attention(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let block = WindowBlock::new(
        &mut store,
        &mut ChaCha8Rng::seed_from_u64(3),
        "w",
        16,
        2,
        4,
        2,
        Activation::Gelu,
    )
    .unwrap();
    let x = random(&[8, 64, 16], 4);
    c.bench_function("shifted_window_block_8x8x8_fwd_bwd", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &store);
            let v = ctx.tape.leaf(x.clone(), true);
            let y = block.forward(&mut ctx, v, 8, 4).unwrap();
            let s = ctx.tape.sum(y).unwrap();
            tape.backward(s).unwrap();
        })
    });
}

fn twl(c: &mut Criterion) {
    let logits = random(&[32, NUM_CLASSES], 5);
    let targets = Tensor::from_fn(&[32, NUM_CLASSES], |i| f64::from(i % 3 == 0));
    c.bench_function("two_way_loss_32_fwd_bwd", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let l = tape.leaf(logits.clone(), true);
            let y = two_way_loss(&mut tape, l, &targets, 4.0).unwrap();
            tape.backward(y).unwrap();
        })
    });
}

fn train_step(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let splits = synthetic_splits(&cfg).unwrap();
    let batch = plain_batch(&splits.train, &(0..8).collect::<Vec<_>>()).unwrap();
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    g.bench_function("default_model_step_batch8", |b| {
        b.iter_batched(
            || Trainer::new(&cfg).unwrap(),
            |mut t| t.step(&batch, 1e-4).unwrap(),
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

criterion_group!(benches, matmul, window_attention, twl, train_step);
criterion_main!(benches);
