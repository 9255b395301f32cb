//! Depth and pose networks.
//!
//! The depth encoder is a small staged backbone with the RepLKNet block
//! layout (a large-kernel block and a ConvFFN per stage, each behind a batch
//! norm and a residual skip). Teacher and student each own an encoder and a
//! U-Net decoder; the student also builds a cost volume after stage 0.

pub mod decoder;
pub mod encoder;
pub mod model;
pub mod params;
pub mod pose;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub use model::{
    poses_from_output, student_forward, teacher_forward, update_depth_range, DepthOutput, Model, ModelConfig, Network,
    StudentState,
};
pub use params::{Ctx, Init, ParamStore, Parameter};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub stage_channels: [usize; 4],
    /// RepLK-block + ConvFFN pairs per stage.
    pub blocks_per_stage: [usize; 4],
    pub large_kernel: usize,
    /// Hidden width of a ConvFFN relative to its channels.
    pub ffn_expansion: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { stage_channels: [16, 32, 64, 128], blocks_per_stage: [1; 4], large_kernel: 7, ffn_expansion: 2 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0) || self.blocks_per_stage.contains(&0) {
            return Err(Error::Config("encoder channels and block counts must be positive".into()));
        }
        if self.large_kernel % 2 == 0 || self.ffn_expansion == 0 {
            return Err(Error::Config(format!(
                "large kernel must be odd and expansion positive, got {} / {}",
                self.large_kernel, self.ffn_expansion
            )));
        }
        Ok(())
    }
}

/// Where the decoder adapter's delta enters the depth head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecoderAdapterMode {
    /// Added to the logits before the sigmoid.
    #[default]
    PreSigmoid,
    /// Added to the sigmoid output, clamped back into `[0, 1]`.
    PostSigmoid,
}

/// `depth = 1 / (1/d_max + σ·(1/d_min − 1/d_max))` for scalars.
pub fn sigmoid_to_depth(sigma: f64, d_min: f64, d_max: f64) -> f64 {
    1.0 / (1.0 / d_max + sigma * (1.0 / d_min - 1.0 / d_max))
}

/// Maps a normalized inverse depth `σ ∈ [0,1]` to `(disparity, depth)`.
pub fn sigma_to_disp_depth<'t, F: Scalar>(
    sigma: Var<'t, F>,
    d_min: f64,
    d_max: f64,
) -> Result<(Var<'t, F>, Var<'t, F>)> {
    let disp = sigma.mul_scalar(1.0 / d_min - 1.0 / d_max)?.add_scalar(1.0 / d_max)?;
    let depth = disp.recip()?;
    Ok((disp, depth))
}

/// Logits to `(disparity, depth)`; depth lies in `[d_min, d_max]`.
pub fn disparity_to_depth<'t, F: Scalar>(
    logits: Var<'t, F>,
    d_min: f64,
    d_max: f64,
) -> Result<(Var<'t, F>, Var<'t, F>)> {
    sigma_to_disp_depth(logits.sigmoid()?, d_min, d_max)
}

/// Images in `[0,1]` are centred before entering any network.
pub(crate) fn normalize_image<'t, F: Scalar>(img: Var<'t, F>) -> Result<Var<'t, F>> {
    img.add_scalar(-0.45)?.mul_scalar(1.0 / 0.225)
}
