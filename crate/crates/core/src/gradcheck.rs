//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only ever calls forward passes, so it stays independent
//! of the backward code it verifies. Errors are reported relative to the
//! largest numeric gradient magnitude: `max|analytic - numeric| / max|numeric|`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Fault, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Step size, pass threshold and randomness for one comparison.
#[derive(Clone, Copy, Debug)]
pub struct CheckOpts {
    pub eps: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Fault injected into the analytic (backward) side only.
    pub fault: Option<Fault>,
}

impl CheckOpts {
    pub fn new(eps: f64, tolerance: f64, seed: u64) -> Self {
        Self { eps, tolerance, seed, fault: None }
    }
}

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug, serde::Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < self.tolerance
    }
}

/// Relative error of `analytic` against `numeric`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric
        .iter()
        .chain(analytic)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

/// Compares the tape gradient of `sum(f(inputs) * r)` (random fixed `r`)
/// against central differences with step `eps`, over every input entry.
pub fn check_op<Fun>(
    name: &str,
    inputs: &[Tensor<f64>],
    opts: &CheckOpts,
    f: Fun,
) -> Result<CheckResult>
where
    Fun: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.len()).collect()).collect();
    check_op_entries(name, inputs, &all, opts, f)
}

/// Like [`check_op`] but only perturbs the listed entries of each input.
pub fn check_op_entries<Fun>(
    name: &str,
    inputs: &[Tensor<f64>],
    entries: &[Vec<usize>],
    opts: &CheckOpts,
    f: Fun,
) -> Result<CheckResult>
where
    Fun: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let weights = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
        let n = out.numel();
        Tensor::new(&out.shape(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?
    };
    let loss_of = |ins: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        Ok(out.value().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };

    let eps = opts.eps;
    let tape = Tape::new().with_fault(opts.fault);
    let vars: Vec<_> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let w = tape.constant(weights.clone());
    let loss = out.mul(w)?.sum()?;
    let grads = tape.backward(loss)?;

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, idx) in entries.iter().enumerate() {
        let g = grads.wrt(vars[k]);
        for &i in idx {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let up = loss_of(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let down = loss_of(&work)?;
            work[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * eps));
            analytic.push(g.data()[i]);
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: relative_error(&analytic, &numeric),
        tolerance: opts.tolerance,
        checked: analytic.len(),
    })
}

/// Uniform random tensor in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Random values bounded away from zero (kinks of abs/relu/min).
pub fn random_away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| {
                let m = rng.gen_range(0.05..1.5);
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect(),
    )
    .expect("shape")
}

/// Tolerance for individual primitives.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;

/// Finite-difference checks of every differentiable primitive on small random shapes.
pub fn primitive_suite(seed: u64, fault: Option<Fault>) -> Result<Vec<CheckResult>> {
    use crate::autodiff::{BatchNormState, BnMode, Conv2dOpts, Padding};
    use crate::geometry::{build_cost_volume, build_depth_bins, Intrinsics, Pose};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = CheckOpts { eps: 1e-6, tolerance: PRIMITIVE_TOLERANCE, seed, fault };
    let mut out = Vec::new();

    let a = random_away_from_zero(&[2, 3, 4], &mut rng);
    let b = random_away_from_zero(&[3, 4], &mut rng);
    let pos = random_tensor(&[2, 3, 4], 0.2, 2.0, &mut rng);
    let binary: [(&str, for<'a> fn(Var<'a, f64>, Var<'a, f64>) -> Result<Var<'a, f64>>); 5] = [
        ("add", |x, y| x.add(y)),
        ("sub", |x, y| x.sub(y)),
        ("mul", |x, y| x.mul(y)),
        ("min2", |x, y| x.min2(y)),
        ("max2", |x, y| x.max2(y)),
    ];
    for (name, op) in binary {
        out.push(check_op(name, &[a.clone(), b.clone()], &opts, |_, v| op(v[0], v[1]))?);
    }
    out.push(check_op("div", &[a.clone(), pos.clone()], &opts, |_, v| v[0].div(v[1]))?);
    let unary: [(&str, for<'a> fn(Var<'a, f64>) -> Result<Var<'a, f64>>); 7] = [
        ("abs", |x| x.abs()),
        ("exp", |x| x.exp()),
        ("sigmoid", |x| x.sigmoid()),
        ("gelu", |x| x.gelu()),
        ("relu", |x| x.relu()),
        ("clamp", |x| x.clamp(-0.5, 0.6)),
        ("square", |x| x.square()),
    ];
    for (name, op) in unary {
        out.push(check_op(name, &[a.clone()], &opts, |_, v| op(v[0]))?);
    }
    out.push(check_op("log", &[pos.clone()], &opts, |_, v| v[0].log())?);
    out.push(check_op("sqrt", &[pos.clone()], &opts, |_, v| v[0].sqrt())?);
    out.push(check_op("recip", &[pos.clone()], &opts, |_, v| v[0].recip())?);

    out.push(check_op("sum_dim", &[a.clone()], &opts, |_, v| v[0].sum_dim(1))?);
    out.push(check_op("mean", &[a.clone()], &opts, |_, v| v[0].mean())?);
    out.push(check_op("min_dim", &[a.clone()], &opts, |_, v| Ok(v[0].min_dim(2)?.0))?);
    out.push(check_op("concat_narrow", &[a.clone(), a.map(|x| x * 0.5)], &opts, |_, v| {
        Var::concat(&[v[0], v[1]], 1)?.narrow(1, 2, 3)
    })?);

    let x = random_tensor(&[2, 3, 8, 8], -1.0, 1.0, &mut rng);
    let w = random_tensor(&[4, 3, 3, 3], -0.5, 0.5, &mut rng);
    let bias = random_tensor(&[4], -0.5, 0.5, &mut rng);
    out.push(check_op("conv2d", &[x.clone(), w, bias], &opts, |_, v| {
        v[0].conv2d(v[1], Some(v[2]), Conv2dOpts::same(3))
    })?);
    let w = random_tensor(&[4, 3, 3, 3], -0.5, 0.5, &mut rng);
    out.push(check_op("conv2d_stride2", &[x.clone(), w], &opts, |_, v| {
        v[0].conv2d(v[1], None, Conv2dOpts::same(3).stride(2))
    })?);
    let w = random_tensor(&[3, 1, 5, 5], -0.5, 0.5, &mut rng);
    out.push(check_op("conv2d_depthwise", &[x.clone(), w], &opts, |_, v| {
        v[0].conv2d(v[1], None, Conv2dOpts::same(5).groups(3))
    })?);
    let w = random_tensor(&[5, 3, 1, 1], -0.5, 0.5, &mut rng);
    out.push(check_op("conv2d_pointwise", &[x.clone(), w], &opts, |_, v| {
        v[0].conv2d(v[1], None, Conv2dOpts::default())
    })?);

    let xb = random_tensor(&[2, 4, 5, 5], -1.0, 1.0, &mut rng);
    let gamma = random_tensor(&[4], 0.5, 1.5, &mut rng);
    let beta = random_tensor(&[4], -0.5, 0.5, &mut rng);
    out.push(check_op("batchnorm2d_train", &[xb.clone(), gamma.clone(), beta.clone()], &opts, |_, v| {
        let mut st = BatchNormState::new(4);
        v[0].batchnorm2d(v[1], v[2], &mut st, BnMode::Train, false)
    })?);
    out.push(check_op("batchnorm2d_eval", &[xb, gamma, beta], &opts, |_, v| {
        let mut st = BatchNormState::new(4);
        st.running_mean = vec![0.1, -0.2, 0.3, 0.0];
        st.running_var = vec![0.5, 1.5, 2.0, 1.0];
        v[0].batchnorm2d(v[1], v[2], &mut st, BnMode::Eval, false)
    })?);

    let img = random_tensor(&[1, 2, 6, 6], 0.0, 1.0, &mut rng);
    let grid = random_tensor(&[1, 5, 4, 2], -0.95, 0.95, &mut rng);
    out.push(check_op("grid_sample_border", &[img.clone(), grid.clone()], &opts, |_, v| {
        v[0].grid_sample(v[1], Padding::Border)
    })?);
    let grid_wide = random_tensor(&[1, 5, 4, 2], -1.2, 1.2, &mut rng);
    out.push(check_op("grid_sample_zeros", &[img.clone(), grid_wide], &opts, |_, v| {
        v[0].grid_sample(v[1], Padding::Zeros)
    })?);
    out.push(check_op("upsample_bilinear", &[img.clone()], &opts, |_, v| v[0].upsample_bilinear(11, 9))?);
    out.push(check_op("avg_pool3_reflect", &[img], &opts, |_, v| v[0].avg_pool3_reflect())?);

    let pv = random_tensor(&[2, 6], -3.0, 3.0, &mut rng);
    for invert in [false, true] {
        let name = if invert { "pose_exp_inverted" } else { "pose_exp" };
        out.push(check_op(name, &[pv.clone()], &opts, |_, v| v[0].pose_from_axis_angle(invert))?);
    }
    // larger angles take the closed-form branch
    let pv_big = pv.map(|x| x * 40.0);
    out.push(check_op("pose_exp_large_angle", &[pv_big], &opts, |_, v| v[0].pose_from_axis_angle(true))?);

    let k = Intrinsics::new(7.0, 6.0, 4.5, 3.0)?;
    let depth = random_tensor(&[2, 1, 6, 8], 2.0, 10.0, &mut rng);
    out.push(check_op("projection_grid", &[depth.clone(), pv.clone()], &opts, |_, v| {
        let pose = v[1].pose_from_axis_angle(false)?;
        Ok(v[0].projection_grid(pose, &k)?.0)
    })?);
    let src = random_tensor(&[2, 3, 6, 8], 0.0, 1.0, &mut rng);
    out.push(check_op("warp_image", &[src, depth, pv], &opts, |_, v| {
        let pose = v[2].pose_from_axis_angle(true)?;
        Ok(crate::geometry::warp_image(v[0], v[1], pose, &k)?.0)
    })?);

    let ft = random_tensor(&[1, 3, 4, 6], -1.0, 1.0, &mut rng);
    let fm = random_tensor(&[1, 3, 4, 6], -1.0, 1.0, &mut rng);
    let bins = build_depth_bins(1.0, 20.0, 4)?;
    let kq = Intrinsics::new(4.0, 4.0, 2.5, 1.5)?;
    let pose = [Pose::from_translation([0.3, 0.0, 0.2])];
    out.push(check_op("cost_volume", &[ft, fm], &opts, |_, v| {
        build_cost_volume(v[0], v[1], &pose, &kq, &bins)
    })?);
    Ok(out)
}

/// Tolerance for the end-to-end teacher objective.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

fn loss_intrinsics(h: usize, w: usize) -> crate::geometry::Intrinsics {
    crate::geometry::Intrinsics { fx: 0.58 * w as f64, fy: 1.92 * h as f64, cx: 0.5 * w as f64, cy: 0.5 * h as f64 }
}

fn sample_entries(len: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    rand::seq::index::sample(rng, len, count).into_vec()
}

/// The teacher objective on 8×8 frames, differentiated with respect to the
/// disparity logits, both raw pose vectors and all three frames.
pub fn teacher_loss_check(seed: u64, fault: Option<Fault>) -> Result<CheckResult> {
    use crate::losses::{photometric_error, teacher_total_loss, LossWeights, PhotometricInputs};
    use crate::networks::disparity_to_depth;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (h, w) = (8, 8);
    let k = loss_intrinsics(h, w);
    let weights = LossWeights::default();
    let inputs = vec![
        random_tensor(&[1, 1, h, w], -2.0, 2.0, &mut rng),
        random_tensor(&[1, 6], -8.0, 8.0, &mut rng),
        random_tensor(&[1, 6], -8.0, 8.0, &mut rng),
        random_tensor(&[1, 3, h, w], 0.0, 1.0, &mut rng),
        random_tensor(&[1, 3, h, w], 0.0, 1.0, &mut rng),
        random_tensor(&[1, 3, h, w], 0.0, 1.0, &mut rng),
    ];
    let opts = CheckOpts { eps: 1e-6, tolerance: END_TO_END_TOLERANCE, seed, fault };
    check_op("teacher_loss_8x8", &inputs, &opts, |_, v| {
        let (disp, depth) = disparity_to_depth(v[0], 0.1, 100.0)?;
        let poses = [v[1].pose_from_axis_angle(true)?, v[2].pose_from_axis_angle(false)?];
        let (tm1, t, tp1) = (v[3], v[4], v[5]);
        let mut warped = Vec::new();
        for (src, pose) in [tm1, tp1].into_iter().zip(poses) {
            let (rec, _) = crate::geometry::warp_image(src, depth, pose, &k)?;
            warped.push(photometric_error(rec, t, weights.ssim_alpha)?);
        }
        let identity =
            vec![photometric_error(tm1, t, weights.ssim_alpha)?, photometric_error(tp1, t, weights.ssim_alpha)?];
        let photo = PhotometricInputs { warped, identity };
        Ok(teacher_total_loss(&photo, None, disp, t, &weights)?.total)
    })
}

/// Narrow teacher and pose networks at the smallest admissible input size.
pub fn tiny_model_config() -> crate::networks::ModelConfig {
    use crate::networks::{EncoderConfig, ModelConfig};
    ModelConfig {
        encoder: EncoderConfig { stage_channels: [4, 4, 8, 8], blocks_per_stage: [1; 4], large_kernel: 5, ffn_expansion: 2 },
        decoder_adapter: true,
        decoder_channels: [8, 8, 4, 4, 4],
        pose_channels: [4, 4, 8, 8],
        cost_volume_bins: 4,
        ..ModelConfig::default()
    }
}

/// The full teacher objective (pose network, teacher network with adapters,
/// warping and loss) on 32×32 frames, differentiated with respect to sampled
/// entries of every teacher and pose parameter and of the frames.
pub fn teacher_network_check(seed: u64, fault: Option<Fault>) -> Result<CheckResult> {
    use crate::autodiff::BnMode;
    use crate::losses::{photometric_error, teacher_total_loss, LossWeights, PhotometricInputs};
    use crate::networks::pose::pose_forward;
    use crate::networks::{teacher_forward, Model};

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe2e);
    let (h, w) = (32, 32);
    let k = loss_intrinsics(h, w);
    let mut model: Model<f64> = Model::new(tiny_model_config(), seed)?;
    // zero-initialized tensors (adapter up-projections, pose head) would hide
    // whole branches from the check
    for (_, p) in model.params.iter_mut() {
        if p.tensor.data().iter().all(|&v| v == 0.0) {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.05..0.05));
        }
    }
    let names: Vec<String> =
        model.params.names().filter(|n| n.starts_with("teacher.") || n.starts_with("pose.")).cloned().collect();
    let mut inputs: Vec<Tensor<f64>> = (0..3).map(|_| random_tensor(&[2, 3, h, w], 0.0, 1.0, &mut rng)).collect();
    inputs.extend(names.iter().map(|n| model.params.get(n).expect("listed").tensor.clone()));
    let entries: Vec<Vec<usize>> = inputs.iter().map(|t| sample_entries(t.len(), 2, &mut rng)).collect();
    let weights = LossWeights::default();
    let model = std::cell::RefCell::new(model);
    let opts = CheckOpts { eps: 1e-6, tolerance: END_TO_END_TOLERANCE, seed, fault };
    check_op_entries("teacher_network_32x32", &inputs, &entries, &opts, |tape, v| {
        let mut m = model.borrow_mut();
        let cfg = m.config.clone();
        let mut ctx = m.params.bind(tape, BnMode::Train, false);
        for (name, var) in names.iter().zip(&v[3..]) {
            ctx.substitute(name, *var)?;
        }
        let (tm1, t, tp1) = (v[0], v[1], v[2]);
        let raw = pose_forward(&mut ctx, Var::concat(&[tm1, t], 0)?, Var::concat(&[t, tp1], 0)?)?;
        let poses = [raw.narrow(0, 0, 2)?.pose_from_axis_angle(true)?, raw.narrow(0, 2, 2)?.pose_from_axis_angle(false)?];
        let out = teacher_forward(&mut ctx, &cfg, t)?;
        let mut warped = Vec::new();
        for (src, pose) in [tm1, tp1].into_iter().zip(poses) {
            let (rec, _) = crate::geometry::warp_image(src, out.depth, pose, &k)?;
            warped.push(photometric_error(rec, t, weights.ssim_alpha)?);
        }
        let identity =
            vec![photometric_error(tm1, t, weights.ssim_alpha)?, photometric_error(tp1, t, weights.ssim_alpha)?];
        let photo = PhotometricInputs { warped, identity };
        Ok(teacher_total_loss(&photo, None, out.disparity, t, &weights)?.total)
    })
}

/// Every primitive plus both end-to-end checks.
pub fn full_suite(seed: u64, fault: Option<Fault>) -> Result<Vec<CheckResult>> {
    let mut out = primitive_suite(seed, fault)?;
    out.push(teacher_loss_check(seed, fault)?);
    out.push(teacher_network_check(seed, fault)?);
    Ok(out)
}
