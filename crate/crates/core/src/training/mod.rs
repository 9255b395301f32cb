//! Two-stage training: freeze plans, the joint teacher/student step, stage
//! orchestration, optimizer state and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod freeze;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, clip_grad_norm, grad_norm, AdamState};
pub use checkpoint::{Checkpoint, LoadReport};
pub use freeze::{build_freeze_plan, FreezePlan, PlanKind, PlanOptions};

use crate::autodiff::{BnMode, Tape, Var};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate_dataset, EvalOutput};
use crate::geometry::{warp_image, Intrinsics};
use crate::losses::{photometric_error, student_total_loss, teacher_total_loss, LossWeights, PhotometricInputs};
use crate::metrics::Aggregation;
use crate::networks::pose::pose_forward;
use crate::networks::{
    poses_from_output, student_forward, teacher_forward, update_depth_range, Model, ModelConfig, Network, ParamStore,
};
use crate::tensor::Scalar;

/// Decoder adapters are new in stage 2, so a stage-1 file lacks them.
pub const STAGE2_NEW_MODULES: &str = "*.decoder_adapter.*";

/// Options of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    pub epochs: usize,
    pub batch_size: usize,
    /// `(first epoch, lr)` pairs with strictly increasing epochs, starting at 0.
    pub lr_schedule: Vec<(usize, f64)>,
    pub dataset_path: PathBuf,
    /// Held-out set for the per-epoch evaluation; defaults to `dataset_path`.
    #[serde(default)]
    pub eval_path: Option<PathBuf>,
    #[serde(default)]
    pub init_from: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to the plan of `stage`.
    #[serde(default)]
    pub plan: Option<PlanKind>,
    #[serde(default)]
    pub plan_options: PlanOptions,
    #[serde(default = "yes")]
    pub update_bn_stats: bool,
    /// Drop ground-truth moving pixels from the reprojection loss.
    #[serde(default)]
    pub exclude_motion: bool,
    /// Global gradient-norm bound; `None` disables clipping.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: Option<f64>,
    /// Stage 2 only: add fresh decoder adapters before training.
    #[serde(default = "yes")]
    pub attach_decoder_adapter: bool,
    #[serde(default = "default_eval_network")]
    pub eval_network: Network,
}

fn yes() -> bool {
    true
}

fn default_grad_clip() -> Option<f64> {
    Some(10.0)
}

fn default_eval_network() -> Network {
    Network::Teacher
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stage, 1 | 2) {
            return Err(Error::Config(format!("unknown stage {}", self.stage)));
        }
        if self.stage == 2 && self.init_from.is_none() {
            return Err(Error::Config("stage 2 needs init_from".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 (batch norm)".into()));
        }
        match self.lr_schedule.first() {
            Some((0, _)) => {}
            _ => return Err(Error::Config("lr_schedule must start at epoch 0".into())),
        }
        if self.lr_schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Config("lr_schedule epochs must be strictly increasing".into()));
        }
        if self.lr_schedule.iter().any(|(_, lr)| !(lr.is_finite() && *lr >= 0.0)) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    pub fn plan_kind(&self) -> PlanKind {
        self.plan.unwrap_or(if self.stage == 1 { PlanKind::Stage1 } else { PlanKind::Stage2 })
    }

    /// Learning rate of the last schedule entry starting at or before `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule.iter().take_while(|(e, _)| *e <= epoch).last().map_or(0.0, |(_, lr)| *lr)
    }
}

/// Per-parameter content hashes (FNV-1a over the little-endian bytes).
pub fn param_hashes<F: Scalar>(store: &ParamStore<F>) -> BTreeMap<String, u64> {
    store
        .iter()
        .map(|(name, p)| {
            let mut bytes = Vec::with_capacity(p.tensor.len() * F::DTYPE.size());
            F::to_le_bytes_vec(p.tensor.data(), &mut bytes);
            let h = bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
            (name.clone(), h)
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IntegrityReport {
    pub frozen_checked: usize,
    pub modified: Vec<String>,
}

impl IntegrityReport {
    pub fn into_result(self) -> Result<Self> {
        if self.modified.is_empty() {
            Ok(self)
        } else {
            Err(Error::FrozenModified(self.modified))
        }
    }
}

/// Compares the current hashes of every parameter frozen under `plan` with
/// `before`. Parameters absent from `before` are new and not checked.
pub fn integrity_check<F: Scalar>(
    store: &ParamStore<F>,
    plan: &FreezePlan,
    before: &BTreeMap<String, u64>,
) -> IntegrityReport {
    let now = param_hashes(store);
    let mut report = IntegrityReport::default();
    for (name, h) in &now {
        if plan.decide(name) != Some(false) {
            continue;
        }
        if let Some(old) = before.get(name) {
            report.frozen_checked += 1;
            if old != h {
                report.modified.push(name.clone());
            }
        }
    }
    report
}

/// Loss values of one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub teacher_reprojection: f64,
    pub teacher_smoothness: f64,
    pub student_reprojection: f64,
    pub student_distillation: f64,
    pub student_smoothness: f64,
    pub masked_fraction: f64,
    pub grad_norm: f64,
}

/// Everything a training step needs besides the model and the batch.
#[derive(Clone, Debug)]
pub struct StepOptions {
    pub weights: LossWeights,
    pub lr: f64,
    pub update_bn_stats: bool,
    pub exclude_motion: bool,
    pub grad_clip: Option<f64>,
    pub intrinsics: Intrinsics,
}

fn photometric<'t, F: Scalar>(
    sources: [Var<'t, F>; 2],
    poses: [Var<'t, F>; 2],
    identity: &[Var<'t, F>],
    depth: Var<'t, F>,
    target: Var<'t, F>,
    opts: &StepOptions,
) -> Result<PhotometricInputs<'t, F>> {
    let alpha = opts.weights.ssim_alpha;
    let warped = sources
        .iter()
        .zip(poses)
        .map(|(&src, pose)| photometric_error(warp_image(src, depth, pose, &opts.intrinsics)?.0, target, alpha))
        .collect::<Result<Vec<_>>>()?;
    Ok(PhotometricInputs { warped, identity: identity.to_vec() })
}

/// One joint teacher/student update: the pose network runs once and its
/// output is shared by both depth networks; the student's cost volume sees
/// it as a constant.
pub fn train_step<F: Scalar>(
    model: &mut Model<F>,
    adam: &mut AdamState<F>,
    batch: &Batch<F>,
    opts: &StepOptions,
    position: (usize, usize),
) -> Result<StepLosses> {
    let b = batch.size();
    if b < 2 {
        return Err(Error::InsufficientBatch);
    }
    let tape = Tape::new();
    let cfg = model.config.clone();
    let mut ctx = model.params.bind(&tape, BnMode::Train, opts.update_bn_stats);
    let [tm1, t, tp1] = batch.frames.clone().map(|f| tape.constant(f));

    let raw = pose_forward(&mut ctx, Var::concat(&[tm1, t], 0)?, Var::concat(&[t, tp1], 0)?)?;
    let raw_prev = raw.narrow(0, 0, b)?;
    let pose_prev = raw_prev.pose_from_axis_angle(true)?;
    let pose_next = raw.narrow(0, b, b)?.pose_from_axis_angle(false)?;
    let alpha = opts.weights.ssim_alpha;
    let identity = [photometric_error(tm1, t, alpha)?, photometric_error(tp1, t, alpha)?];
    let exclude = opts.exclude_motion.then_some(batch.motion.as_slice());

    let non_finite = |what: &str| Error::NonFiniteLoss {
        epoch: position.0,
        step: position.1,
        detail: format!("non-finite {what}"),
    };
    let finite = |v: Var<'_, F>| v.value().iter().all(|x| x.is_finite());
    if !finite(raw) {
        return Err(non_finite("pose output"));
    }
    let teacher = teacher_forward(&mut ctx, &cfg, t)?;
    if !finite(teacher.depth) {
        return Err(non_finite("teacher depth"));
    }
    let photo = photometric([tm1, tp1], [pose_prev, pose_next], &identity, teacher.depth, t, opts)?;
    let lt = teacher_total_loss(&photo, exclude, teacher.disparity, t, &opts.weights)?;

    let poses = poses_from_output(&raw_prev.to_tensor(), true);
    let student = student_forward(&mut ctx, &cfg, &model.student, t, tm1, &poses, &opts.intrinsics)?;
    if !finite(student.depth) {
        return Err(non_finite("student depth"));
    }
    let photo = photometric([tm1, tp1], [pose_prev, pose_next], &identity, student.depth, t, opts)?;
    let ls = student_total_loss(&photo, exclude, student.depth, teacher.depth, student.disparity, t, &opts.weights)?;

    let total = lt.total.add(ls.total)?;
    let value = total.item().f64();
    let mut losses = StepLosses {
        total: value,
        teacher_reprojection: lt.reprojection,
        teacher_smoothness: lt.smoothness,
        student_reprojection: ls.reprojection,
        student_distillation: ls.distillation,
        student_smoothness: ls.smoothness,
        masked_fraction: ls.masked_fraction,
        grad_norm: 0.0,
    };
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: position.0, step: position.1, detail: format!("{losses:?}") });
    }
    let grads = tape.backward(total)?;
    let mut grads = ctx.collect_grads(&grads);
    drop(ctx);
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(non_finite(&format!("gradient for `{name}`")));
    }
    losses.grad_norm = match opts.grad_clip {
        Some(c) => clip_grad_norm(&mut grads, c),
        None => grad_norm(&grads),
    };
    let teacher_depth = teacher.depth.value();
    adam_step(&mut model.params, &grads, adam, opts.lr);
    let depths: Vec<f64> = teacher_depth.iter().map(|d| d.f64()).collect();
    update_depth_range(&mut model.student, &depths);
    Ok(losses)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: StepLosses,
}

/// Evaluation after `epoch` epochs (epoch 0 is before any update).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub mean_loss: Option<f64>,
    pub eval: crate::metrics::MetricsReport,
}

pub struct StageOutcome<F> {
    pub model: Model<F>,
    pub adam: AdamState<F>,
    pub history: Vec<EpochRecord>,
    pub integrity: IntegrityReport,
    pub load: Option<LoadReport>,
}

impl<F: Scalar> StageOutcome<F> {
    pub fn checkpoint(&self, stage: u8) -> Result<Checkpoint> {
        Checkpoint::from_model(&self.model, Some(&self.adam), stage)
    }
}

/// Builds the model a stage starts from. Stage 1 starts fresh unless
/// `init_from` is set; stage 2 restores the stage-1 file into a model with
/// new zero-initialized decoder adapters.
pub fn prepare_model<F: Scalar>(cfg: &StageConfig, model_cfg: &ModelConfig) -> Result<(Model<F>, Option<LoadReport>)> {
    let Some(path) = &cfg.init_from else {
        return Ok((Model::new(model_cfg.clone(), cfg.seed)?, None));
    };
    let ckpt = Checkpoint::load(path)?;
    let mut config = ckpt.model_config()?;
    if cfg.stage == 2 && cfg.attach_decoder_adapter {
        config.decoder_adapter = true;
    }
    let mut model = Model::new(config, cfg.seed)?;
    let report = ckpt.load_into(&mut model, &[STAGE2_NEW_MODULES])?;
    Ok((model, Some(report)))
}

fn batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order.chunks(batch_size).filter(|c| c.len() >= 2).map(<[usize]>::to_vec).collect()
}

/// Runs one stage on already loaded data, appending step records to `log`.
pub fn run_stage<F: Scalar>(
    cfg: &StageConfig,
    mut model: Model<F>,
    weights: &LossWeights,
    train: &Dataset,
    eval: &Dataset,
    log: &mut dyn Write,
) -> Result<StageOutcome<F>> {
    cfg.validate()?;
    weights.validate()?;
    let plan = build_freeze_plan(cfg.plan_kind(), cfg.plan_options);
    plan.apply(&mut model.params)?;
    let before = param_hashes(&model.params);
    let mut adam = AdamState::new();
    let evaluate = |m: &mut Model<F>| -> Result<EvalOutput> {
        evaluate_dataset(m, eval, cfg.eval_network, cfg.batch_size, Aggregation::PixelWeighted)
    };
    let mut history = vec![EpochRecord { epoch: 0, lr: cfg.lr_at(0), steps: 0, mean_loss: None, eval: evaluate(&mut model)?.report }];
    let mut opts = StepOptions {
        weights: weights.clone(),
        lr: 0.0,
        update_bn_stats: cfg.update_bn_stats,
        exclude_motion: cfg.exclude_motion,
        grad_clip: cfg.grad_clip,
        intrinsics: train.intrinsics(),
    };
    for epoch in 0..cfg.epochs {
        opts.lr = cfg.lr_at(epoch);
        let mut sum = 0.0;
        let plan_batches = batches(train.len(), cfg.batch_size, cfg.seed, epoch);
        for (step, idx) in plan_batches.iter().enumerate() {
            let batch = train.batch::<F>(idx)?;
            let losses = train_step(&mut model, &mut adam, &batch, &opts, (epoch, step))?;
            sum += losses.total;
            let record = LogRecord { epoch, step, lr: opts.lr, losses };
            writeln!(log, "{}", serde_json::to_string(&record)?)?;
        }
        model.student.rebuild_bins()?;
        let steps = plan_batches.len();
        history.push(EpochRecord {
            epoch: epoch + 1,
            lr: opts.lr,
            steps,
            mean_loss: (steps > 0).then(|| sum / steps as f64),
            eval: evaluate(&mut model)?.report,
        });
    }
    let integrity = integrity_check(&model.params, &plan, &before).into_result()?;
    Ok(StageOutcome { model, adam, history, integrity, load: None })
}

/// Loads the datasets and the starting model named in `cfg`, then trains.
pub fn run_stage_from_config<F: Scalar>(
    cfg: &StageConfig,
    model_cfg: &ModelConfig,
    weights: &LossWeights,
    log: &mut dyn Write,
) -> Result<StageOutcome<F>> {
    cfg.validate()?;
    let (model, load) = prepare_model::<F>(cfg, model_cfg)?;
    let train = Dataset::open(&cfg.dataset_path)?;
    let eval = match &cfg.eval_path {
        Some(p) => Dataset::open(p)?,
        None => train.clone(),
    };
    let mut out = run_stage(cfg, model, weights, &train, &eval, log)?;
    out.load = load;
    Ok(out)
}
