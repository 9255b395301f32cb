//! Bottleneck adapters for the encoder blocks and the depth decoder.
//!
//! An adapter computes `up(GELU(down(x)))`. The up projector starts at
//! exactly zero, so an adapted network is initially identical to its host;
//! the down projector gets a small random init so the first gradient step
//! can move the up projector off zero.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dOpts, Var};
use crate::error::{Error, Result};
use crate::networks::params::{Ctx, Init, ParamStore};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projector {
    Conv3x3,
    Linear,
}

impl Projector {
    pub fn kernel(self) -> usize {
        match self {
            Projector::Conv3x3 => 3,
            Projector::Linear => 1,
        }
    }
}

/// Where the adapter's input normalization comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnDesign {
    /// The adapter owns a trainable batch norm.
    A,
    /// No normalization in front of the adapter.
    B,
    /// The adapter reuses the host block's batch norm output.
    D,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttachPoint {
    ReplkBlock,
    Convffn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub ratio: f64,
    /// Down projector of RepLK-block adapters; ConvFFN adapters are always linear.
    pub down_projector: Projector,
    pub up_projector: Projector,
    pub attach_to: Vec<AttachPoint>,
    pub bn_design: BnDesign,
    pub decoder_input_scales: Vec<usize>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            ratio: 0.25,
            down_projector: Projector::Conv3x3,
            up_projector: Projector::Linear,
            attach_to: vec![AttachPoint::ReplkBlock, AttachPoint::Convffn],
            bn_design: BnDesign::A,
            decoder_input_scales: vec![0, 3],
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::Config(format!("adapter ratio must be in (0, 1], got {}", self.ratio)));
        }
        if self.decoder_input_scales.is_empty() {
            return Err(Error::Config("decoder adapter needs at least one input scale".into()));
        }
        let mut seen = [false; 4];
        for &s in &self.decoder_input_scales {
            if s > 3 || seen[s] {
                return Err(Error::Config(format!(
                    "decoder input scales must be distinct values in 0..=3, got {:?}",
                    self.decoder_input_scales
                )));
            }
            seen[s] = true;
        }
        Ok(())
    }

    /// Bottleneck width for `channels` input channels.
    pub fn hidden(&self, channels: usize) -> usize {
        ((self.ratio * channels as f64).ceil() as usize).max(1)
    }

    pub fn attaches(&self, point: AttachPoint) -> bool {
        self.attach_to.contains(&point)
    }

    /// Down projector used on a given host block.
    pub fn down_for(&self, host: AttachPoint) -> Projector {
        match host {
            AttachPoint::ReplkBlock => self.down_projector,
            AttachPoint::Convffn => Projector::Linear,
        }
    }
}

/// Registers the parameters of an encoder adapter under `prefix`.
pub fn make_encoder_adapter<F: Scalar>(
    store: &mut ParamStore<F>,
    prefix: &str,
    channels: usize,
    config: &AdapterConfig,
    host: AttachPoint,
) -> Result<()> {
    if channels < 1 {
        return Err(Error::InvalidArgument("adapter needs at least one channel".into()));
    }
    let hidden = config.hidden(channels);
    if config.bn_design == BnDesign::A {
        store.add_bn(&format!("{prefix}.bn"), channels)?;
    }
    let down = config.down_for(host).kernel();
    store.add_conv(&format!("{prefix}.down"), hidden, channels, down, true, Init::Uniform { fan_in: 0, gain: 1.0 })?;
    store.add_conv(&format!("{prefix}.up"), channels, hidden, config.up_projector.kernel(), true, Init::Zeros)
}

/// Closed-form parameter count of [`make_encoder_adapter`].
pub fn encoder_adapter_param_count(channels: usize, config: &AdapterConfig, host: AttachPoint) -> usize {
    let h = config.hidden(channels);
    let kd = config.down_for(host).kernel();
    let ku = config.up_projector.kernel();
    let bn = if config.bn_design == BnDesign::A { 2 * channels } else { 0 };
    kd * kd * channels * h + h + ku * ku * h * channels + channels + bn
}

/// Bottleneck width of the decoder adapter, tied to the deepest level so the
/// choice of input scales only changes the down projector's input rows.
pub fn decoder_adapter_hidden(config: &AdapterConfig, channels_f3: usize) -> usize {
    config.hidden(channels_f3)
}

/// Registers the decoder adapter under `prefix`; input channels are the sum
/// of the selected pyramid levels.
pub fn make_decoder_adapter<F: Scalar>(
    store: &mut ParamStore<F>,
    prefix: &str,
    pyramid_channels: [usize; 4],
    config: &AdapterConfig,
) -> Result<()> {
    config.validate()?;
    let cin: usize = config.decoder_input_scales.iter().map(|&s| pyramid_channels[s]).sum();
    let hidden = decoder_adapter_hidden(config, pyramid_channels[3]);
    store.add_conv(&format!("{prefix}.down"), hidden, cin, 1, true, Init::Uniform { fan_in: 0, gain: 1.0 })?;
    store.add_conv(&format!("{prefix}.up"), 1, hidden, 1, true, Init::Zeros)
}

pub fn decoder_adapter_param_count(pyramid_channels: [usize; 4], config: &AdapterConfig) -> usize {
    let cin: usize = config.decoder_input_scales.iter().map(|&s| pyramid_channels[s]).sum();
    let h = decoder_adapter_hidden(config, pyramid_channels[3]);
    cin * h + h + h + 1
}

/// `up(GELU(down(x)))` for the adapter stored under `prefix`.
pub fn adapter_forward<'t, F: Scalar>(ctx: &mut Ctx<'t, '_, F>, prefix: &str, x: Var<'t, F>) -> Result<Var<'t, F>> {
    let down_k = kernel_of(ctx, &format!("{prefix}.down"))?;
    let up_k = kernel_of(ctx, &format!("{prefix}.up"))?;
    let h = ctx.conv(&format!("{prefix}.down"), x, Conv2dOpts::same(down_k))?.gelu()?;
    ctx.conv(&format!("{prefix}.up"), h, Conv2dOpts::same(up_k))
}

fn kernel_of<F: Scalar>(ctx: &mut Ctx<'_, '_, F>, prefix: &str) -> Result<usize> {
    Ok(ctx.param(&format!("{prefix}.weight"))?.shape()[3])
}
