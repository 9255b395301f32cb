//! Teacher, student and pose networks bundled with their configuration.

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterConfig;
use crate::autodiff::{BnMode, Conv2dOpts, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{build_cost_volume, build_depth_bins, DepthBins, Intrinsics, Pose};
use crate::networks::decoder::{
    decoder_adapter_forward, decoder_forward, register_decoder, register_decoder_adapter,
    DEFAULT_DECODER_CHANNELS,
};
use crate::networks::encoder::{encode_level0, encode_upper, encoder_forward, register_encoder};
use crate::networks::params::{Ctx, Init, ParamStore};
use crate::networks::pose::{pose_forward, register_pose, DEFAULT_POSE_CHANNELS};
use crate::networks::{disparity_to_depth, sigma_to_disp_depth, DecoderAdapterMode, EncoderConfig};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Network {
    Teacher,
    Student,
}

impl Network {
    pub fn prefix(self) -> &'static str {
        match self {
            Network::Teacher => "teacher",
            Network::Student => "student",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Encoder adapters (and the decoder adapter's shape) when present.
    pub adapter: Option<AdapterConfig>,
    pub decoder_adapter: bool,
    pub decoder_adapter_mode: DecoderAdapterMode,
    pub decoder_channels: [usize; 5],
    pub pose_channels: [usize; 4],
    pub cost_volume_bins: usize,
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            adapter: Some(AdapterConfig::default()),
            decoder_adapter: false,
            decoder_adapter_mode: DecoderAdapterMode::PreSigmoid,
            decoder_channels: DEFAULT_DECODER_CHANNELS,
            pose_channels: DEFAULT_POSE_CHANNELS,
            cost_volume_bins: 32,
            min_depth: 0.1,
            max_depth: 100.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if let Some(a) = &self.adapter {
            a.validate()?;
        }
        if self.decoder_adapter && self.adapter.is_none() {
            return Err(Error::Config("decoder adapter needs an adapter config".into()));
        }
        if !(self.min_depth > 0.0 && self.max_depth > self.min_depth) {
            return Err(Error::Config("need 0 < min_depth < max_depth".into()));
        }
        if self.cost_volume_bins < 2 || self.decoder_channels.contains(&0) || self.pose_channels.contains(&0) {
            return Err(Error::Config("bin count must be >= 2 and widths positive".into()));
        }
        Ok(())
    }
}

/// Student-only state: the cost-volume depth hypotheses and the running
/// depth range they are rebuilt from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentState {
    pub bins: DepthBins,
    pub d_min_ema: f64,
    pub d_max_ema: f64,
}

/// Momentum of the depth-range moving average.
pub const DEPTH_RANGE_MOMENTUM: f64 = 0.99;
/// Smallest allowed gap between the tracked depth bounds (meters).
pub const DEPTH_RANGE_MIN_SEPARATION: f64 = 0.5;

impl StudentState {
    pub fn new(d_min: f64, d_max: f64, count: usize) -> Result<Self> {
        Ok(Self { bins: build_depth_bins(d_min, d_max, count)?, d_min_ema: d_min, d_max_ema: d_max })
    }

    /// Rebuilds the bins from the tracked range (done once per epoch).
    pub fn rebuild_bins(&mut self) -> Result<()> {
        self.bins = build_depth_bins(self.d_min_ema, self.d_max_ema, self.bins.count())?;
        Ok(())
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Moves the tracked bounds toward the 5th/95th percentiles of `depths`.
pub fn update_depth_range(state: &mut StudentState, depths: &[f64]) {
    let mut v: Vec<f64> = depths.iter().copied().filter(|d| d.is_finite() && *d > 0.0).collect();
    if v.is_empty() {
        return;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let (p5, p95) = (percentile(&v, 0.05), percentile(&v, 0.95));
    let m = DEPTH_RANGE_MOMENTUM;
    let mut lo = m * state.d_min_ema + (1.0 - m) * p5;
    let mut hi = m * state.d_max_ema + (1.0 - m) * p95;
    if hi - lo < DEPTH_RANGE_MIN_SEPARATION {
        let mid = 0.5 * (lo + hi);
        lo = (mid - 0.5 * DEPTH_RANGE_MIN_SEPARATION).max(1e-3);
        hi = lo + DEPTH_RANGE_MIN_SEPARATION;
    }
    state.d_min_ema = lo;
    state.d_max_ema = hi;
}

/// Teacher, student and pose network parameters plus student state.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    pub student: StudentState,
}

/// Depth-network output of one forward pass.
pub struct DepthOutput<'t, F: Scalar> {
    pub disparity: Var<'t, F>,
    pub depth: Var<'t, F>,
}

impl<F: Scalar> Model<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(seed);
        let pyramid = config.encoder.stage_channels;
        for net in [Network::Teacher, Network::Student] {
            let p = net.prefix();
            register_encoder(&mut params, p, &config.encoder, config.adapter.as_ref())?;
            register_decoder(&mut params, p, pyramid, config.decoder_channels)?;
            if config.decoder_adapter {
                register_decoder_adapter(&mut params, p, pyramid, config.adapter.as_ref().expect("validated"))?;
            }
        }
        let c0 = pyramid[0];
        params.add_conv(
            "student.reduce_conv",
            c0,
            c0 + config.cost_volume_bins,
            3,
            true,
            Init::Uniform { fan_in: 0, gain: 1.0 },
        )?;
        register_pose(&mut params, config.pose_channels)?;
        let student = StudentState::new(config.min_depth, config.max_depth, config.cost_volume_bins)?;
        Ok(Self { config, params, student })
    }

    /// Adds zero-initialized decoder adapters to both depth networks.
    pub fn attach_decoder_adapters(&mut self) -> Result<()> {
        if self.config.decoder_adapter {
            return Ok(());
        }
        let adapter = self
            .config
            .adapter
            .clone()
            .ok_or_else(|| Error::Config("decoder adapter needs an adapter config".into()))?;
        for net in [Network::Teacher, Network::Student] {
            register_decoder_adapter(&mut self.params, net.prefix(), self.config.encoder.stage_channels, &adapter)?;
        }
        self.config.decoder_adapter = true;
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model { config: self.config.clone(), params: self.params.cast(), student: self.student.clone() }
    }
}

/// Applies the decoder (and decoder adapter) and maps to depth.
fn decode<'t, F: Scalar>(
    ctx: &mut Ctx<'t, '_, F>,
    cfg: &ModelConfig,
    net: Network,
    pyramid: &[Var<'t, F>; 4],
    out_hw: (usize, usize),
) -> Result<DepthOutput<'t, F>> {
    let p = net.prefix();
    let logits = decoder_forward(ctx, p, pyramid, out_hw)?;
    let adapter = cfg.adapter.as_ref().filter(|_| cfg.decoder_adapter);
    let (disparity, depth) = match adapter {
        None => disparity_to_depth(logits, cfg.min_depth, cfg.max_depth)?,
        Some(a) => {
            let delta = decoder_adapter_forward(ctx, p, pyramid, &a.decoder_input_scales, out_hw)?;
            match cfg.decoder_adapter_mode {
                DecoderAdapterMode::PreSigmoid => disparity_to_depth(logits.add(delta)?, cfg.min_depth, cfg.max_depth)?,
                DecoderAdapterMode::PostSigmoid => {
                    let sigma = logits.sigmoid()?.add(delta)?.clamp(0.0, 1.0)?;
                    sigma_to_disp_depth(sigma, cfg.min_depth, cfg.max_depth)?
                }
            }
        }
    };
    Ok(DepthOutput { disparity, depth })
}

/// Single-frame depth network.
pub fn teacher_forward<'t, F: Scalar>(
    ctx: &mut Ctx<'t, '_, F>,
    cfg: &ModelConfig,
    image: Var<'t, F>,
) -> Result<DepthOutput<'t, F>> {
    let [_, _, h, w] = image.dims4()?;
    let pyramid = encoder_forward(ctx, "teacher", &cfg.encoder, image, cfg.adapter.as_ref())?;
    decode(ctx, cfg, Network::Teacher, &pyramid, (h, w))
}

/// Stage-0 features of the current and previous frame, computed as one batch.
pub fn student_level0<'t, F: Scalar>(
    ctx: &mut Ctx<'t, '_, F>,
    cfg: &ModelConfig,
    image_t: Var<'t, F>,
    image_tm1: Var<'t, F>,
) -> Result<(Var<'t, F>, Var<'t, F>)> {
    let b = image_t.shape()[0];
    if image_tm1.shape() != image_t.shape() {
        return Err(Error::Shape(format!("student frames {:?} vs {:?}", image_t.shape(), image_tm1.shape())));
    }
    let both = Var::concat(&[image_t, image_tm1], 0)?;
    let f = encode_level0(ctx, "student", &cfg.encoder, both, cfg.adapter.as_ref())?;
    Ok((f.narrow(0, 0, b)?, f.narrow(0, b, b)?))
}

/// Student depth from level-0 features of frame t and a cost volume.
pub fn student_from_cost<'t, F: Scalar>(
    ctx: &mut Ctx<'t, '_, F>,
    cfg: &ModelConfig,
    f0_t: Var<'t, F>,
    cost: Var<'t, F>,
    out_hw: (usize, usize),
) -> Result<DepthOutput<'t, F>> {
    let x = Var::concat(&[f0_t, cost], 1)?;
    let f0 = ctx.conv("student.reduce_conv", x, Conv2dOpts::same(3))?;
    let [f1, f2, f3] = encode_upper(ctx, "student", &cfg.encoder, f0, cfg.adapter.as_ref())?;
    decode(ctx, cfg, Network::Student, &[f0, f1, f2, f3], out_hw)
}

/// Two-frame depth network. `poses` are `T_{t->t-1}` per batch item and are
/// treated as constants (no gradient reaches the pose network from here).
pub fn student_forward<'t, F: Scalar>(
    ctx: &mut Ctx<'t, '_, F>,
    cfg: &ModelConfig,
    state: &StudentState,
    image_t: Var<'t, F>,
    image_tm1: Var<'t, F>,
    poses: &[Pose],
    k: &Intrinsics,
) -> Result<DepthOutput<'t, F>> {
    let [_, _, h, w] = image_t.dims4()?;
    let (f_t, f_tm1) = student_level0(ctx, cfg, image_t, image_tm1)?;
    let cost = build_cost_volume(f_t, f_tm1, poses, &k.scaled(0.25), &state.bins)?;
    student_from_cost(ctx, cfg, f_t, cost, (h, w))
}

/// Raw pose outputs to per-item poses (value level).
pub fn poses_from_output<F: Scalar>(raw: &Tensor<F>, invert: bool) -> Vec<Pose> {
    raw.data()
        .chunks(6)
        .map(|c| Pose::from_axis_angle(std::array::from_fn(|i| c[i].f64()), invert))
        .collect()
}

impl<F: Scalar> Model<F> {
    /// Eval-mode teacher depth `[B,1,H,W]`.
    pub fn predict_teacher(&mut self, image: &Tensor<F>) -> Result<Tensor<F>> {
        let tape = Tape::new();
        let mut ctx = self.params.bind(&tape, BnMode::Eval, false);
        let img = tape.constant(image.clone());
        Ok(teacher_forward(&mut ctx, &self.config, img)?.depth.to_tensor())
    }

    /// Eval-mode student depth from `(I_t, I_{t-1})`, using the pose network
    /// for `T_{t->t-1}`.
    pub fn predict_student(&mut self, image_t: &Tensor<F>, image_tm1: &Tensor<F>, k: &Intrinsics) -> Result<Tensor<F>> {
        let tape = Tape::new();
        let mut ctx = self.params.bind(&tape, BnMode::Eval, false);
        let it = tape.constant(image_t.clone());
        let itm1 = tape.constant(image_tm1.clone());
        let raw = pose_forward(&mut ctx, itm1, it)?;
        let poses = poses_from_output(&raw.to_tensor(), true);
        Ok(student_forward(&mut ctx, &self.config, &self.student, it, itm1, &poses, k)?.depth.to_tensor())
    }
}
