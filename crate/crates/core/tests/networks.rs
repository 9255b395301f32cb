use ppea::adapters::{
    decoder_adapter_param_count, encoder_adapter_param_count, AdapterConfig, AttachPoint, BnDesign, Projector,
};
use ppea::autodiff::{BnMode, Tape};
use ppea::geometry::{Intrinsics, Pose};
use ppea::networks::model::{student_forward, teacher_forward};
use ppea::networks::{update_depth_range, EncoderConfig, Model, ModelConfig, StudentState};
use ppea::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(b: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(&[b, 3, h, w], (0..b * 3 * h * w).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

fn base_config() -> ModelConfig {
    ModelConfig { adapter: None, decoder_adapter: false, ..ModelConfig::default() }
}

fn intrinsics(h: usize, w: usize) -> Intrinsics {
    Intrinsics::new(0.58 * w as f64, 1.92 * h as f64, 0.5 * w as f64, 0.5 * h as f64).unwrap()
}

fn teacher_depth(model: &mut Model<f32>, img: &Tensor<f32>, mode: BnMode) -> Vec<f32> {
    let tape = Tape::new();
    let cfg = model.config.clone();
    let mut ctx = model.params.bind(&tape, mode, false);
    let x = tape.constant(img.clone());
    teacher_forward(&mut ctx, &cfg, x).unwrap().depth.value().to_vec()
}

fn student_depth(model: &mut Model<f32>, a: &Tensor<f32>, b: &Tensor<f32>, mode: BnMode) -> Vec<f32> {
    let tape = Tape::new();
    let cfg = model.config.clone();
    let state = model.student.clone();
    let mut ctx = model.params.bind(&tape, mode, false);
    let (xa, xb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let poses = vec![Pose::from_translation([0.1, 0.0, 0.2]); a.shape()[0]];
    let k = intrinsics(a.shape()[2], a.shape()[3]);
    student_forward(&mut ctx, &cfg, &state, xa, xb, &poses, &k).unwrap().depth.value().to_vec()
}

#[test]
fn zero_initialized_adapters_leave_outputs_unchanged() {
    let designs = [BnDesign::A, BnDesign::B, BnDesign::D];
    let scales: [&[usize]; 3] = [&[3], &[0, 3], &[0, 1, 2, 3]];
    let img = image(2, 32, 64, 1);
    let prev = image(2, 32, 64, 2);
    let mut base = Model::<f32>::new(base_config(), 5).unwrap();
    for (i, design) in designs.iter().enumerate() {
        let adapter = AdapterConfig {
            ratio: 0.0625,
            down_projector: if i % 2 == 0 { Projector::Conv3x3 } else { Projector::Linear },
            bn_design: *design,
            decoder_input_scales: scales[i].to_vec(),
            ..AdapterConfig::default()
        };
        let cfg = ModelConfig { adapter: Some(adapter), decoder_adapter: true, ..ModelConfig::default() };
        let mut adapted = Model::<f32>::new(cfg, 5).unwrap();
        for mode in [BnMode::Eval, BnMode::Train] {
            assert_eq!(teacher_depth(&mut base, &img, mode), teacher_depth(&mut adapted, &img, mode));
            assert_eq!(student_depth(&mut base, &img, &prev, mode), student_depth(&mut adapted, &img, &prev, mode));
        }
    }
}

#[test]
fn adapter_parameter_count_matches_enumeration() {
    let enc = EncoderConfig::default();
    for (ratio, down, design) in [
        (0.25, Projector::Conv3x3, BnDesign::A),
        (0.0625, Projector::Linear, BnDesign::B),
        (0.125, Projector::Conv3x3, BnDesign::D),
    ] {
        let adapter = AdapterConfig { ratio, down_projector: down, bn_design: design, ..AdapterConfig::default() };
        let base = Model::<f64>::new(base_config(), 0).unwrap();
        let cfg = ModelConfig { adapter: Some(adapter.clone()), decoder_adapter: true, ..ModelConfig::default() };
        let adapted = Model::<f64>::new(cfg, 0).unwrap();
        let enumerated = adapted.params.total_count() - base.params.total_count();
        let per_net: usize = enc
            .stage_channels
            .iter()
            .zip(enc.blocks_per_stage)
            .map(|(&c, n)| {
                n * (encoder_adapter_param_count(c, &adapter, AttachPoint::ReplkBlock)
                    + encoder_adapter_param_count(c, &adapter, AttachPoint::Convffn))
            })
            .sum::<usize>()
            + decoder_adapter_param_count(enc.stage_channels, &adapter);
        assert_eq!(enumerated, 2 * per_net);
    }
}

#[test]
fn base_parameters_do_not_depend_on_adapters() {
    let base = Model::<f64>::new(base_config(), 9).unwrap();
    let adapted = Model::<f64>::new(ModelConfig::default(), 9).unwrap();
    for (name, p) in base.params.iter() {
        assert_eq!(adapted.params.get(name).unwrap().tensor, p.tensor, "{name}");
    }
}

#[test]
fn pyramid_and_output_shapes() {
    let cfg = ModelConfig::default();
    let mut model = Model::<f32>::new(cfg.clone(), 0).unwrap();
    let tape = Tape::new();
    let mut ctx = model.params.bind(&tape, BnMode::Train, false);
    let x = tape.constant(image(1, 64, 64, 0));
    let pyr = ppea::networks::encoder::encoder_forward(&mut ctx, "teacher", &cfg.encoder, x, None).unwrap();
    let sides: Vec<usize> = pyr.iter().map(|f| f.shape()[2]).collect();
    assert_eq!(sides, [16, 8, 4, 2]);
    let out = teacher_forward(&mut ctx, &cfg, x).unwrap();
    assert_eq!(out.depth.shape(), [1, 1, 64, 64]);
    assert!(out.depth.value().iter().all(|&d| (0.1..=100.0).contains(&(d as f64 * (1.0 - 1e-6)))));
}

#[test]
fn rejects_bad_input_sizes() {
    let mut model = Model::<f32>::new(base_config(), 0).unwrap();
    assert!(model.predict_teacher(&image(1, 48, 64, 0)).is_err());
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let mut model = Model::<f64>::new(ModelConfig::default(), 3).unwrap();
    for (name, p) in model.params.iter_mut() {
        p.trainable = name.contains(".adapter.");
    }
    let cfg = model.config.clone();
    let tape = Tape::new();
    let mut ctx = model.params.bind(&tape, BnMode::Train, false);
    let x = tape.constant(image(2, 32, 32, 4).cast());
    let loss = teacher_forward(&mut ctx, &cfg, x).unwrap().disparity.mean().unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = ctx.collect_grads(&grads);
    assert!(!g.is_empty());
    assert!(g.keys().all(|n| n.contains(".adapter.")));
    // up projectors start at zero, so only they get a nonzero gradient
    let nonzero: Vec<&String> = g.iter().filter(|(_, t)| t.data().iter().any(|v| *v != 0.0)).map(|(n, _)| n).collect();
    assert!(nonzero.iter().any(|n| n.ends_with(".up.weight")));
}

#[test]
fn depth_range_moving_average() {
    let mut s = StudentState::new(0.1, 100.0, 8).unwrap();
    let depths: Vec<f64> = (0..=100).map(|i| 1.0 + i as f64 * 0.1).collect();
    // percentiles of 1.0..=11.0 in 0.1 steps, linear interpolation
    let (p5, p95) = (1.5, 10.5);
    let (mut lo, mut hi) = (0.1, 100.0);
    for _ in 0..50 {
        update_depth_range(&mut s, &depths);
        lo = 0.99 * lo + 0.01 * p5;
        hi = 0.99 * hi + 0.01 * p95;
        assert!((s.d_min_ema - lo).abs() < 1e-12 && (s.d_max_ema - hi).abs() < 1e-12);
    }
    s.rebuild_bins().unwrap();
    assert_eq!(s.bins.values[0], s.d_min_ema);
    assert_eq!(*s.bins.values.last().unwrap(), s.d_max_ema);
}

#[test]
fn depth_range_keeps_minimum_separation() {
    let mut s = StudentState::new(5.0, 5.2, 4).unwrap();
    update_depth_range(&mut s, &[5.1; 10]);
    assert!((s.d_max_ema - s.d_min_ema - 0.5).abs() < 1e-12);
    assert!(s.d_min_ema > 0.0);
    update_depth_range(&mut s, &[]);
    assert!((s.d_max_ema - s.d_min_ema - 0.5).abs() < 1e-12);
}

#[test]
fn student_prediction_uses_pose_network() {
    let mut model = Model::<f32>::new(ModelConfig::default(), 2).unwrap();
    let a = image(1, 32, 64, 7);
    let b = image(1, 32, 64, 8);
    let d = model.predict_student(&a, &b, &intrinsics(32, 64)).unwrap();
    assert_eq!(d.shape(), [1, 1, 32, 64]);
    assert!(d.all_finite());
}
