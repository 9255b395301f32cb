//! Staged encoder: stem (x4 downsample), then four stages of RepLK block +
//! ConvFFN pairs joined by stride-2 transitions.

use crate::adapters::{adapter_forward, make_encoder_adapter, AdapterConfig, AttachPoint, BnDesign};
use crate::autodiff::{Conv2dOpts, Var};
use crate::error::{Error, Result};
use crate::networks::params::{Ctx, Init, ParamStore};
use crate::networks::{normalize_image, EncoderConfig};
use crate::tensor::Scalar;

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

fn block_prefix(net: &str, stage: usize, block: usize, kind: &str) -> String {
    format!("{net}.encoder.stage{stage}.block{block}.{kind}")
}

/// Registers all encoder parameters (and encoder adapters when configured).
pub fn register_encoder<F: Scalar>(
    store: &mut ParamStore<F>,
    net: &str,
    cfg: &EncoderConfig,
    adapter: Option<&AdapterConfig>,
) -> Result<()> {
    cfg.validate()?;
    let c = cfg.stage_channels;
    let enc = format!("{net}.encoder");
    let conv_init = Init::Uniform { fan_in: 0, gain: RELU_GAIN };
    store.add_conv(&format!("{enc}.stem.conv1"), c[0], 3, 3, false, conv_init)?;
    store.add_bn(&format!("{enc}.stem.bn1"), c[0])?;
    store.add_conv(&format!("{enc}.stem.conv2"), c[0], c[0], 3, false, conv_init)?;
    store.add_bn(&format!("{enc}.stem.bn2"), c[0])?;
    for s in 0..4 {
        let ch = c[s];
        if s > 0 {
            store.add_conv(&format!("{enc}.trans{s}.conv"), ch, c[s - 1], 3, false, conv_init)?;
            store.add_bn(&format!("{enc}.trans{s}.bn"), ch)?;
        }
        // residual branches start small so the untrained backbone stays well scaled
        let branch = Init::Uniform { fan_in: 0, gain: 0.5 };
        for b in 0..cfg.blocks_per_stage[s] {
            let p = block_prefix(net, s, b, "replk");
            store.add_bn(&format!("{p}.bn"), ch)?;
            store.add_conv(&format!("{p}.pw1"), ch, ch, 1, true, branch)?;
            store.add_conv(&format!("{p}.dw"), ch, 1, cfg.large_kernel, true, branch)?;
            store.add_conv(&format!("{p}.pw2"), ch, ch, 1, true, branch)?;
            if let Some(a) = adapter.filter(|a| a.attaches(AttachPoint::ReplkBlock)) {
                make_encoder_adapter(store, &format!("{p}.adapter"), ch, a, AttachPoint::ReplkBlock)?;
            }
            let p = block_prefix(net, s, b, "ffn");
            let hidden = ch * cfg.ffn_expansion;
            store.add_bn(&format!("{p}.bn"), ch)?;
            store.add_conv(&format!("{p}.pw1"), hidden, ch, 1, true, branch)?;
            store.add_conv(&format!("{p}.pw2"), ch, hidden, 1, true, branch)?;
            if let Some(a) = adapter.filter(|a| a.attaches(AttachPoint::Convffn)) {
                make_encoder_adapter(store, &format!("{p}.adapter"), ch, a, AttachPoint::Convffn)?;
            }
        }
    }
    Ok(())
}

/// Adapter branch input for a block whose own normalized input is `normed`.
fn adapter_branch<'t, F: Scalar>(
    ctx: &mut Ctx<'t, '_, F>,
    prefix: &str,
    x: Var<'t, F>,
    normed: Var<'t, F>,
    adapter: Option<&AdapterConfig>,
) -> Result<Option<Var<'t, F>>> {
    let a_prefix = format!("{prefix}.adapter");
    if !ctx.has(&format!("{a_prefix}.up.weight")) {
        return Ok(None);
    }
    let design = adapter.map(|a| a.bn_design).unwrap_or(BnDesign::A);
    let input = match design {
        BnDesign::A => ctx.bn(&format!("{a_prefix}.bn"), x)?,
        BnDesign::B => x,
        BnDesign::D => normed,
    };
    Ok(Some(adapter_forward(ctx, &a_prefix, input)?))
}

/// `x + M(N(x)) [+ A(·)]` with `M` = 1x1 → depthwise large kernel → GELU → 1x1.
pub fn replk_block_forward<'t, F: Scalar>(
    ctx: &mut Ctx<'t, '_, F>,
    prefix: &str,
    x: Var<'t, F>,
    adapter: Option<&AdapterConfig>,
) -> Result<Var<'t, F>> {
    let [_, c, _, _] = x.dims4()?;
    let n = ctx.bn(&format!("{prefix}.bn"), x)?;
    let k = ctx.param(&format!("{prefix}.dw.weight"))?.shape()[3];
    let m = ctx.conv(&format!("{prefix}.pw1"), n, Conv2dOpts::default())?;
    let m = ctx.conv(&format!("{prefix}.dw"), m, Conv2dOpts::same(k).groups(c))?.gelu()?;
    let m = ctx.conv(&format!("{prefix}.pw2"), m, Conv2dOpts::default())?;
    let mut out = x.add(m)?;
    if let Some(a) = adapter_branch(ctx, prefix, x, n, adapter)? {
        out = out.add(a)?;
    }
    Ok(out)
}

/// `x + M(N(x)) [+ A(·)]` with `M` = 1x1 expand → GELU → 1x1.
pub fn convffn_forward<'t, F: Scalar>(
    ctx: &mut Ctx<'t, '_, F>,
    prefix: &str,
    x: Var<'t, F>,
    adapter: Option<&AdapterConfig>,
) -> Result<Var<'t, F>> {
    let n = ctx.bn(&format!("{prefix}.bn"), x)?;
    let m = ctx.conv(&format!("{prefix}.pw1"), n, Conv2dOpts::default())?.gelu()?;
    let m = ctx.conv(&format!("{prefix}.pw2"), m, Conv2dOpts::default())?;
    let mut out = x.add(m)?;
    if let Some(a) = adapter_branch(ctx, prefix, x, n, adapter)? {
        out = out.add(a)?;
    }
    Ok(out)
}

fn conv_bn_relu<'t, F: Scalar>(
    ctx: &mut Ctx<'t, '_, F>,
    conv: &str,
    bn: &str,
    x: Var<'t, F>,
) -> Result<Var<'t, F>> {
    let y = ctx.conv(conv, x, Conv2dOpts::same(3).stride(2))?;
    ctx.bn(bn, y)?.relu()
}

fn run_stage_blocks<'t, F: Scalar>(
    ctx: &mut Ctx<'t, '_, F>,
    net: &str,
    cfg: &EncoderConfig,
    stage: usize,
    mut x: Var<'t, F>,
    adapter: Option<&AdapterConfig>,
) -> Result<Var<'t, F>> {
    for b in 0..cfg.blocks_per_stage[stage] {
        x = replk_block_forward(ctx, &block_prefix(net, stage, b, "replk"), x, adapter)?;
        x = convffn_forward(ctx, &block_prefix(net, stage, b, "ffn"), x, adapter)?;
    }
    Ok(x)
}

/// Stem plus stage 0: the 1/4-scale features `F0`.
pub fn encode_level0<'t, F: Scalar>(
    ctx: &mut Ctx<'t, '_, F>,
    net: &str,
    cfg: &EncoderConfig,
    image: Var<'t, F>,
    adapter: Option<&AdapterConfig>,
) -> Result<Var<'t, F>> {
    let [_, c, h, w] = image.dims4()?;
    if c != 3 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Shape(format!(
            "encoder expects [B,3,H,W] with H, W divisible by 32, got {:?}",
            image.shape()
        )));
    }
    let enc = format!("{net}.encoder");
    let x = normalize_image(image)?;
    let x = conv_bn_relu(ctx, &format!("{enc}.stem.conv1"), &format!("{enc}.stem.bn1"), x)?;
    let x = conv_bn_relu(ctx, &format!("{enc}.stem.conv2"), &format!("{enc}.stem.bn2"), x)?;
    run_stage_blocks(ctx, net, cfg, 0, x, adapter)
}

/// Stages 1..3 from (possibly modified) level-0 features: `[F1, F2, F3]`.
pub fn encode_upper<'t, F: Scalar>(
    ctx: &mut Ctx<'t, '_, F>,
    net: &str,
    cfg: &EncoderConfig,
    f0: Var<'t, F>,
    adapter: Option<&AdapterConfig>,
) -> Result<[Var<'t, F>; 3]> {
    let enc = format!("{net}.encoder");
    let mut x = f0;
    let mut out = Vec::with_capacity(3);
    for s in 1..4 {
        x = conv_bn_relu(ctx, &format!("{enc}.trans{s}.conv"), &format!("{enc}.trans{s}.bn"), x)?;
        x = run_stage_blocks(ctx, net, cfg, s, x, adapter)?;
        out.push(x);
    }
    Ok([out[0], out[1], out[2]])
}

/// Full pyramid `[F0, F1, F2, F3]` at scales 1/4 .. 1/32.
pub fn encoder_forward<'t, F: Scalar>(
    ctx: &mut Ctx<'t, '_, F>,
    net: &str,
    cfg: &EncoderConfig,
    image: Var<'t, F>,
    adapter: Option<&AdapterConfig>,
) -> Result<[Var<'t, F>; 4]> {
    let f0 = encode_level0(ctx, net, cfg, image, adapter)?;
    let [f1, f2, f3] = encode_upper(ctx, net, cfg, f0, adapter)?;
    Ok([f0, f1, f2, f3])
}
