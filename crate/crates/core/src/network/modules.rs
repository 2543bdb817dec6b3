//! Building blocks of the encoder, decoder and heads.

use super::config::Block;
use super::params::{ParamVars, SWIN_DEPTH};
use crate::autograd::{
    add, affine_field, conv3d, gelu, global_avg_pool, layer_norm, leaky_relu, linear, pixel_shuffle,
    window_attention, Graph, Var,
};
use crate::error::{Error, Result};
use crate::volumes::Shape3;

pub const LEAKY_SLOPE: f32 = 0.2;

fn check_channels(x: &Var, p: &ParamVars, weight: &str, kernel: usize) -> Result<()> {
    let expected = p.get(weight).shape()[0] / kernel.pow(3);
    let found = x.value().channels();
    if expected != found {
        return Err(Error::Channels { expected, found });
    }
    Ok(())
}

/// Two 3³ convolutions, each followed by LeakyReLU(0.2).
pub fn conv_module(g: &Graph, p: &ParamVars, prefix: &str, x: &Var) -> Result<Var> {
    check_channels(x, p, &format!("{prefix}.conv1.w"), 3)?;
    let h = conv3d(g, x, p.get(&format!("{prefix}.conv1.w")), p.get(&format!("{prefix}.conv1.b")), 3);
    let h = leaky_relu(g, &h, LEAKY_SLOPE);
    let h = conv3d(g, &h, p.get(&format!("{prefix}.conv2.w")), p.get(&format!("{prefix}.conv2.b")), 3);
    Ok(leaky_relu(g, &h, LEAKY_SLOPE))
}

fn dense(g: &Graph, p: &ParamVars, prefix: &str, x: &Var) -> Var {
    linear(g, x, p.get(&format!("{prefix}.w")), p.get(&format!("{prefix}.b")))
}

fn norm(g: &Graph, p: &ParamVars, prefix: &str, x: &Var) -> Var {
    layer_norm(g, x, p.get(&format!("{prefix}.g")), p.get(&format!("{prefix}.b")))
}

/// 1×1×1 channel reduction followed by blocks alternating regular and
/// shifted window attention.
pub fn swin_module(
    g: &Graph,
    p: &ParamVars,
    prefix: &str,
    x: &Var,
    heads: usize,
    window: Shape3,
    shift: Shape3,
) -> Result<Var> {
    check_channels(x, p, &format!("{prefix}.reduce.w"), 1)?;
    let mut x = dense(g, p, &format!("{prefix}.reduce"), x);
    let c = x.value().channels();
    if heads == 0 || c % heads != 0 {
        return Err(Error::Divisibility { channels: c, by: heads });
    }
    for j in 0..SWIN_DEPTH {
        let b = format!("{prefix}.block{j}");
        let s = if j % 2 == 1 { shift } else { [0, 0, 0] };
        let h = norm(g, p, &format!("{b}.ln1"), &x);
        let qkv = dense(g, p, &format!("{b}.qkv"), &h);
        let a = window_attention(g, &qkv, p.get(&format!("{b}.rel_bias")), heads, window, s);
        let a = dense(g, p, &format!("{b}.proj"), &a);
        x = add(g, &x, &a);
        let h = norm(g, p, &format!("{b}.ln2"), &x);
        let h = dense(g, p, &format!("{b}.fc1"), &h);
        let h = gelu(g, &h);
        let h = dense(g, p, &format!("{b}.fc2"), &h);
        x = add(g, &x, &h);
    }
    Ok(x)
}

pub fn level_module(
    g: &Graph,
    p: &ParamVars,
    prefix: &str,
    block: Block,
    x: &Var,
    window: Shape3,
    shift: Shape3,
) -> Result<Var> {
    match block {
        Block::Conv => conv_module(g, p, prefix, x),
        Block::Swin { heads } => swin_module(g, p, prefix, x, heads, window, shift),
    }
}

/// Linear `C → 4C`, then each voxel's channels are spread over a 2×2×2
/// block, giving `C/2` channels at twice the resolution (cropped to
/// `target`).
pub fn patch_expand(g: &Graph, p: &ParamVars, prefix: &str, x: &Var, target: Shape3) -> Result<Var> {
    let c = x.value().channels();
    if c % 2 != 0 {
        return Err(Error::Divisibility { channels: c, by: 2 });
    }
    check_channels(x, p, &format!("{prefix}.w"), 1)?;
    let e = dense(g, p, prefix, x);
    Ok(pixel_shuffle(g, &e, target))
}

/// Global average pool and two fully-connected layers giving the 12
/// residuals `[ΔA | b]` (row-major 3×4).
pub fn affine_head(g: &Graph, p: &ParamVars, prefix: &str, x: &Var) -> Result<Var> {
    check_channels(x, p, &format!("{prefix}.fc1.w"), 1)?;
    let pooled = global_avg_pool(g, x);
    let h = dense(g, p, &format!("{prefix}.fc1"), &pooled);
    let h = leaky_relu(g, &h, LEAKY_SLOPE);
    Ok(dense(g, p, &format!("{prefix}.fc2"), &h))
}

/// Affine head output sampled as a dense field on the level grid.
pub fn affine_head_field(g: &Graph, p: &ParamVars, prefix: &str, x: &Var) -> Result<(Var, Var)> {
    let residual = affine_head(g, p, prefix, x)?;
    let field = affine_field(g, &residual, x.value().spatial());
    Ok((residual, field))
}

/// One 3³ convolution to a 3-channel displacement field.
pub fn deform_head(g: &Graph, p: &ParamVars, prefix: &str, x: &Var) -> Result<Var> {
    check_channels(x, p, &format!("{prefix}.conv.w"), 3)?;
    Ok(conv3d(g, x, p.get(&format!("{prefix}.conv.w")), p.get(&format!("{prefix}.conv.b")), 3))
}
