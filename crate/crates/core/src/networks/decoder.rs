//! U-Net depth decoder and the decoder adapter.

use crate::adapters::{adapter_forward, make_decoder_adapter, AdapterConfig};
use crate::autodiff::{Conv2dOpts, Var};
use crate::error::{Error, Result};
use crate::networks::params::{Ctx, Init, ParamStore};
use crate::tensor::Scalar;

/// Decoder widths, from the deepest level (1/32) to the half-resolution block.
pub const DEFAULT_DECODER_CHANNELS: [usize; 5] = [64, 32, 24, 16, 8];

pub fn register_decoder<F: Scalar>(
    store: &mut ParamStore<F>,
    net: &str,
    pyramid: [usize; 4],
    widths: [usize; 5],
) -> Result<()> {
    let dec = format!("{net}.decoder");
    let init = Init::Uniform { fan_in: 0, gain: 1.0 };
    // level 3 -> 0: conv on the running map, then upsample and concat the skip
    store.add_conv(&format!("{dec}.conv3"), widths[0], pyramid[3], 3, true, init)?;
    store.add_conv(&format!("{dec}.conv2"), widths[1], widths[0] + pyramid[2], 3, true, init)?;
    store.add_conv(&format!("{dec}.conv1"), widths[2], widths[1] + pyramid[1], 3, true, init)?;
    store.add_conv(&format!("{dec}.conv0"), widths[3], widths[2] + pyramid[0], 3, true, init)?;
    store.add_conv(&format!("{dec}.conv_half"), widths[4], widths[3], 3, true, init)?;
    store.add_conv(&format!("{dec}.head"), 1, widths[4], 3, true, init)
}

pub fn register_decoder_adapter<F: Scalar>(
    store: &mut ParamStore<F>,
    net: &str,
    pyramid: [usize; 4],
    config: &AdapterConfig,
) -> Result<()> {
    make_decoder_adapter(store, &format!("{net}.decoder_adapter"), pyramid, config)
}

/// Disparity logits `[B,1,H,W]` from the feature pyramid.
pub fn decoder_forward<'t, F: Scalar>(
    ctx: &mut Ctx<'t, '_, F>,
    net: &str,
    pyramid: &[Var<'t, F>; 4],
    out_hw: (usize, usize),
) -> Result<Var<'t, F>> {
    let dec = format!("{net}.decoder");
    let c3 = Conv2dOpts::same(3);
    let mut x = pyramid[3];
    for lvl in (0..3).rev() {
        x = ctx.conv(&format!("{dec}.conv{}", lvl + 1), x, c3)?.gelu()?;
        let [_, _, h, w] = pyramid[lvl].dims4()?;
        x = x.upsample_bilinear(h, w)?;
        x = Var::concat(&[x, pyramid[lvl]], 1)?;
    }
    x = ctx.conv(&format!("{dec}.conv0"), x, c3)?.gelu()?;
    let [_, _, h0, w0] = x.dims4()?;
    if out_hw.0 != h0 * 4 || out_hw.1 != w0 * 4 {
        return Err(Error::Shape(format!("decoder: F0 {h0}x{w0} does not match output {out_hw:?}")));
    }
    x = x.upsample_bilinear(h0 * 2, w0 * 2)?;
    x = ctx.conv(&format!("{dec}.conv_half"), x, c3)?.gelu()?;
    x = x.upsample_bilinear(out_hw.0, out_hw.1)?;
    ctx.conv(&format!("{dec}.head"), x, c3)
}

/// Decoder-adapter delta at full resolution: the selected pyramid levels are
/// resized to the `F0` grid, concatenated, projected, and interpolated up.
pub fn decoder_adapter_forward<'t, F: Scalar>(
    ctx: &mut Ctx<'t, '_, F>,
    net: &str,
    pyramid: &[Var<'t, F>; 4],
    scales: &[usize],
    out_hw: (usize, usize),
) -> Result<Var<'t, F>> {
    let [_, _, h0, w0] = pyramid[0].dims4()?;
    let mut parts = Vec::with_capacity(scales.len());
    for &s in scales {
        let f = *pyramid.get(s).ok_or_else(|| Error::InvalidArgument(format!("pyramid scale {s}")))?;
        parts.push(f.upsample_bilinear(h0, w0)?);
    }
    let input = if parts.len() == 1 { parts[0] } else { Var::concat(&parts, 1)? };
    let delta = adapter_forward(ctx, &format!("{net}.decoder_adapter"), input)?;
    delta.upsample_bilinear(out_hw.0, out_hw.1)
}
