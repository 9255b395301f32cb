use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ppea::autodiff::{Conv2dOpts, Padding, Tape};
use ppea::data::{Dataset, SynthConfig, Variant};
use ppea::geometry::{build_cost_volume, build_depth_bins, Intrinsics, Pose};
use ppea::losses::LossWeights;
use ppea::metrics::{compute_metrics, DEFAULT_CLAMP};
use ppea::networks::{Model, ModelConfig};
use ppea::training::{build_freeze_plan, train_step, AdamState, PlanKind, PlanOptions, StepOptions};
use ppea::Tensor;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&[4, 32, 32, 48], &mut rng);
    let w = random(&[32, 32, 3, 3], &mut rng);
    c.bench_function("conv2d_3x3_fwd_bwd", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let (xv, wv) = (tape.var(x.clone()), tape.var(w.clone()));
            let y = xv.conv2d(wv, None, Conv2dOpts::same(3)).unwrap();
            black_box(tape.backward(y.sum().unwrap()).unwrap());
        })
    });
}

fn sampling(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = random(&[4, 3, 64, 192], &mut rng);
    let grid = random(&[4, 64, 192, 2], &mut rng);
    c.bench_function("grid_sample_fwd_bwd", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let (iv, gv) = (tape.var(img.clone()), tape.var(grid.clone()));
            let y = iv.grid_sample(gv, Padding::Border).unwrap();
            black_box(tape.backward(y.sum().unwrap()).unwrap());
        })
    });

    let ft = random(&[4, 16, 16, 48], &mut rng);
    let fm = random(&[4, 16, 16, 48], &mut rng);
    let bins = build_depth_bins(0.1, 100.0, 32).unwrap();
    let k = Intrinsics::new(27.84, 30.72, 24.0, 8.0).unwrap();
    let poses = vec![Pose::from_translation([0.0, 0.0, 0.5]); 4];
    c.bench_function("cost_volume_32_bins", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let v = build_cost_volume(tape.constant(ft.clone()), tape.constant(fm.clone()), &poses, &k, &bins).unwrap();
            black_box(v.value());
        })
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gt: Vec<f64> = (0..64 * 192).map(|_| rng.gen_range(1.0..60.0)).collect();
    let pred: Vec<f64> = gt.iter().map(|g| g * rng.gen_range(0.7..1.3)).collect();
    c.bench_function("compute_metrics_64x192", |b| {
        b.iter(|| black_box(compute_metrics(&pred, &gt, DEFAULT_CLAMP, None).unwrap()))
    });
}

fn training(c: &mut Criterion) {
    let ds = Dataset::from_memory(&SynthConfig::default(), Variant::Static, 4, 3).unwrap();
    let batch = ds.batch::<f32>(&[0, 1, 2, 3]).unwrap();
    let mut model: Model<f32> = Model::new(ModelConfig::default(), 0).unwrap();
    build_freeze_plan(PlanKind::Stage1, PlanOptions::default()).apply(&mut model.params).unwrap();
    let opts = StepOptions {
        weights: LossWeights::default(),
        lr: 1e-4,
        update_bn_stats: true,
        exclude_motion: false,
        grad_clip: Some(10.0),
        intrinsics: ds.intrinsics(),
    };
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("train_step_b4_64x192", |b| {
        b.iter_batched(
            || (model.clone(), AdamState::new()),
            |(mut m, mut adam)| black_box(train_step(&mut m, &mut adam, &batch, &opts, (0, 0)).unwrap()),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, conv, sampling, metrics, training);
criterion_main!(benches);
