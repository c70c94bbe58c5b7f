//! Position-sensitive single-axis attention.

use super::Ctx;
use crate::error::{Error, Result};
use crate::tensor::tape::BnStats;
use crate::tensor::{Mode, Scalar, Tensor};

/// Which spatial axis the 1-D attention runs along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Height,
    Width,
}

/// Borrowed batch-norm layer: parameters plus running statistics.
pub struct BnView<'a, S> {
    pub key: String,
    pub gamma: &'a Tensor<S>,
    pub beta: &'a Tensor<S>,
    pub stats: &'a BnStats<S>,
}

/// Borrowed parameter set of one axial-attention layer.
///
/// `wq`, `wk`, `wv` are `[C, C, 1]` channel projections; `rq`, `rk`, `rv` are
/// `[C/heads, 2L−1]` relative positional tables covering offsets
/// −(L−1)…(L−1) along the attended axis.
pub struct AxialView<'a, S> {
    pub heads: usize,
    pub wq: &'a Tensor<S>,
    pub wk: &'a Tensor<S>,
    pub wv: &'a Tensor<S>,
    pub rq: &'a Tensor<S>,
    pub rk: &'a Tensor<S>,
    pub rv: &'a Tensor<S>,
    pub bn_logits: BnView<'a, S>,
    pub bn_output: BnView<'a, S>,
    /// Name prefix for tape parameter interning.
    pub prefix: String,
}

/// Rearrange `[B,C,H,W]` into per-line layout `[N, C, L]` for the given axis
/// (N = B·W lines of length H, or B·H lines of length W).
pub fn to_lines<S: Scalar, C: Ctx<S>>(ctx: &mut C, x: &C::Val, axis: Axis) -> Result<C::Val> {
    let s = ctx.shape_of(x);
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    match axis {
        Axis::Height => {
            let p = ctx.permute(x, vec![0, 3, 1, 2])?; // [B,W,C,H]
            ctx.reshape(&p, vec![b * w, c, h])
        }
        Axis::Width => {
            let p = ctx.permute(x, vec![0, 2, 1, 3])?; // [B,H,C,W]
            ctx.reshape(&p, vec![b * h, c, w])
        }
    }
}

/// Inverse of [`to_lines`].
pub fn from_lines<S: Scalar, C: Ctx<S>>(
    ctx: &mut C,
    lines: &C::Val,
    axis: Axis,
    b: usize,
    h: usize,
    w: usize,
) -> Result<C::Val> {
    let s = ctx.shape_of(lines);
    let c = s[1];
    match axis {
        Axis::Height => {
            let r = ctx.reshape(lines, vec![b, w, c, h])?;
            ctx.permute(&r, vec![0, 2, 3, 1])
        }
        Axis::Width => {
            let r = ctx.reshape(lines, vec![b, h, c, w])?;
            ctx.permute(&r, vec![0, 2, 1, 3])
        }
    }
}

/// Single-axis position-sensitive attention over `[B,C,H,W]`.
///
/// Per line along `axis`: logits combine content similarity with query and
/// key positional terms, are batch-normalized, softmaxed over the axis, and
/// aggregate positional values; the aggregated output is batch-normalized
/// again. Returns a tensor of the input shape.
pub fn axial_attention_1d<S: Scalar, C: Ctx<S>>(
    ctx: &mut C,
    x: &C::Val,
    axis: Axis,
    p: &AxialView<'_, S>,
    mode: Mode,
) -> Result<C::Val> {
    let s = ctx.shape_of(x);
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if c % p.heads != 0 {
        return Err(Error::Config(format!(
            "axial attention: {c} channels not divisible by {} heads",
            p.heads
        )));
    }
    let l = match axis {
        Axis::Height => h,
        Axis::Width => w,
    };
    if p.rq.shape() != [c / p.heads, 2 * l - 1] {
        return Err(Error::Config(format!(
            "axial attention: positional table {:?} does not cover axis length {l}",
            p.rq.shape()
        )));
    }
    let head_dim = c / p.heads;
    let lines = to_lines(ctx, x, axis)?;
    let n = ctx.shape_of(&lines)[0];

    let wq = ctx.param(&format!("{}.wq", p.prefix), p.wq);
    let wk = ctx.param(&format!("{}.wk", p.prefix), p.wk);
    let wv = ctx.param(&format!("{}.wv", p.prefix), p.wv);
    let rq = ctx.param(&format!("{}.rq", p.prefix), p.rq);
    let rk = ctx.param(&format!("{}.rk", p.prefix), p.rk);
    let rv = ctx.param(&format!("{}.rv", p.prefix), p.rv);

    let q = ctx.conv1d(&lines, &wq, 1, 0)?;
    let k = ctx.conv1d(&lines, &wk, 1, 0)?;
    let v = ctx.conv1d(&lines, &wv, 1, 0)?;
    let qh = ctx.reshape(&q, vec![n, p.heads, head_dim, l])?;
    let kh = ctx.reshape(&k, vec![n, p.heads, head_dim, l])?;
    let vh = ctx.reshape(&v, vec![n, p.heads, head_dim, l])?;

    let logits = ctx.attn_logits(&qh, &kh, &rq, &rk)?;
    let logits = bn(ctx, &logits, &p.bn_logits, mode)?;
    let attn = ctx.softmax(&logits, 3)?;
    let out = ctx.attn_apply(&attn, &vh, &rv)?;
    let out = ctx.reshape(&out, vec![n, c, l])?;
    let out = bn(ctx, &out, &p.bn_output, mode)?;
    from_lines(ctx, &out, axis, b, h, w)
}

/// Apply a batch-norm layer through the context.
pub fn bn<S: Scalar, C: Ctx<S>>(
    ctx: &mut C,
    x: &C::Val,
    layer: &BnView<'_, S>,
    mode: Mode,
) -> Result<C::Val> {
    let gamma = ctx.param(&format!("{}.gamma", layer.key), layer.gamma);
    let beta = ctx.param(&format!("{}.beta", layer.key), layer.beta);
    ctx.batch_norm(x, &gamma, &beta, layer.stats, mode, &layer.key)
}
