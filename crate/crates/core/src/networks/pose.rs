//! Pose network: strided convs over a channel-concatenated image pair,
//! global average pooling and a zero-initialized 6-way head.

use crate::autodiff::{Conv2dOpts, Var};
use crate::error::{Error, Result};
use crate::networks::normalize_image;
use crate::networks::params::{Ctx, Init, ParamStore};
use crate::tensor::Scalar;

pub const DEFAULT_POSE_CHANNELS: [usize; 4] = [16, 32, 64, 64];

pub fn register_pose<F: Scalar>(store: &mut ParamStore<F>, channels: [usize; 4]) -> Result<()> {
    let init = Init::Uniform { fan_in: 0, gain: std::f64::consts::SQRT_2 };
    let mut cin = 6;
    for (i, &c) in channels.iter().enumerate() {
        store.add_conv(&format!("pose.conv{}", i + 1), c, cin, 3, true, init)?;
        cin = c;
    }
    store.add_conv("pose.conv5", cin, cin, 3, true, init)?;
    store.add_conv("pose.head", 6, cin, 1, true, Init::Zeros)
}

/// Raw 6-vector `[B,6]` (axis-angle, translation) for the pair `(a, b)`.
pub fn pose_forward<'t, F: Scalar>(ctx: &mut Ctx<'t, '_, F>, a: Var<'t, F>, b: Var<'t, F>) -> Result<Var<'t, F>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("pose pair {:?} vs {:?}", a.shape(), b.shape())));
    }
    let batch = a.shape()[0];
    let mut x = normalize_image(Var::concat(&[a, b], 1)?)?;
    for i in 1..=4 {
        x = ctx.conv(&format!("pose.conv{i}"), x, Conv2dOpts::same(3).stride(2))?.relu()?;
    }
    x = ctx.conv("pose.conv5", x, Conv2dOpts::same(3))?.relu()?;
    let pooled = x.mean_dim(3)?.mean_dim(2)?;
    let out = ctx.conv("pose.head", pooled, Conv2dOpts::default())?;
    out.reshape(&[batch, 6])
}
