//! The parallel axial-attention residual block.
//!
//! A 1×1 reduction feeds two independent branches over the same tensor —
//! height-axis attention and width-axis attention, each followed by a Conv1D
//! feature shuffle — which concatenate on the channel axis, pass a 1×1 mixing
//! convolution and rejoin the residual path. Strided blocks downsample by
//! average pooling after the merge, with a strided 1×1 projection shortcut.

use super::axial::{axial_attention_1d, bn, from_lines, to_lines, Axis, AxialView, BnView};
use super::Ctx;
use crate::error::{Error, Result};
use crate::tensor::{Mode, Scalar, Tensor};

/// How the two branches of a block execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchMode {
    Sequential,
    Concurrent,
}

/// Geometry of one PAA block.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PaaBlockConfig {
    pub in_channels: usize,
    pub bottleneck_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
}

impl PaaBlockConfig {
    pub fn validate(&self, heads: usize) -> Result<()> {
        if self.out_channels != 4 * self.bottleneck_channels {
            return Err(Error::Config(format!(
                "paa block: out_channels {} must be 4 × bottleneck {}",
                self.out_channels, self.bottleneck_channels
            )));
        }
        if self.bottleneck_channels % heads != 0 {
            return Err(Error::Config(format!(
                "paa block: bottleneck {} not divisible by {heads} heads",
                self.bottleneck_channels
            )));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::Config(format!("paa block: stride {} not in {{1,2}}", self.stride)));
        }
        Ok(())
    }
}

/// Borrowed parameters of one PAA block.
pub struct BlockView<'a, S> {
    pub cfg: &'a PaaBlockConfig,
    pub prefix: String,
    pub reduce_w: &'a Tensor<S>,
    pub reduce_bn: BnView<'a, S>,
    pub h_attn: AxialView<'a, S>,
    pub w_attn: AxialView<'a, S>,
    pub h_shuffle_w: &'a Tensor<S>,
    pub h_shuffle_bn: BnView<'a, S>,
    pub w_shuffle_w: &'a Tensor<S>,
    pub w_shuffle_bn: BnView<'a, S>,
    pub mix_w: &'a Tensor<S>,
    pub mix_bn: BnView<'a, S>,
    pub shortcut: Option<(&'a Tensor<S>, BnView<'a, S>)>,
}

/// One attention branch: axial attention, then a Conv1D shuffle along the
/// attended axis, batch norm and ReLU.
fn branch<S: Scalar, C: Ctx<S>>(
    ctx: &mut C,
    t: &C::Val,
    axis: Axis,
    attn: &AxialView<'_, S>,
    shuffle_name: &str,
    shuffle_w: &Tensor<S>,
    shuffle_bn: &BnView<'_, S>,
    mode: Mode,
) -> Result<C::Val> {
    let s = ctx.shape_of(t);
    let a = axial_attention_1d(ctx, t, axis, attn, mode)?;
    let lines = to_lines(ctx, &a, axis)?;
    let w = ctx.param(shuffle_name, shuffle_w);
    let o = ctx.conv1d(&lines, &w, 1, 0)?;
    let o = bn(ctx, &o, shuffle_bn, mode)?;
    let o = ctx.relu(&o);
    from_lines(ctx, &o, axis, s[0], s[2], s[3])
}

/// Forward one PAA block.
pub fn paa_block<S: Scalar, C: Ctx<S>>(
    ctx: &mut C,
    x: &C::Val,
    v: &BlockView<'_, S>,
    mode: Mode,
) -> Result<C::Val> {
    let in_shape = ctx.shape_of(x);
    if in_shape[1] != v.cfg.in_channels || in_shape[2] != v.cfg.height || in_shape[3] != v.cfg.width {
        return Err(Error::Dimension {
            op: "paa_block",
            detail: format!(
                "input {:?} does not match block config {}x{}x{}",
                in_shape, v.cfg.in_channels, v.cfg.height, v.cfg.width
            ),
        });
    }
    let needs_projection = v.cfg.stride != 1 || v.cfg.in_channels != v.cfg.out_channels;
    if needs_projection && v.shortcut.is_none() {
        return Err(Error::Config(format!(
            "paa_block {}: residual shape change without projection shortcut",
            v.prefix
        )));
    }

    let rw = ctx.param(&format!("{}.reduce.w", v.prefix), v.reduce_w);
    let t = ctx.conv2d(x, &rw, 1, 0)?;
    let t = bn(ctx, &t, &v.reduce_bn, mode)?;
    let t = ctx.relu(&t);

    let (hb, wb) = ctx.join(
        |c| {
            branch(
                c,
                &t,
                Axis::Height,
                &v.h_attn,
                &format!("{}.h_shuffle.w", v.prefix),
                v.h_shuffle_w,
                &v.h_shuffle_bn,
                mode,
            )
        },
        |c| {
            branch(
                c,
                &t,
                Axis::Width,
                &v.w_attn,
                &format!("{}.w_shuffle.w", v.prefix),
                v.w_shuffle_w,
                &v.w_shuffle_bn,
                mode,
            )
        },
    )?;

    let u = ctx.concat(&hb, &wb, 1)?;
    let u = if v.cfg.stride > 1 {
        ctx.avg_pool2d(&u, v.cfg.stride, v.cfg.stride)?
    } else {
        u
    };
    let mw = ctx.param(&format!("{}.mix.w", v.prefix), v.mix_w);
    let y = ctx.conv2d(&u, &mw, 1, 0)?;
    let y = bn(ctx, &y, &v.mix_bn, mode)?;

    let shortcut = match &v.shortcut {
        Some((w, bnv)) => {
            let wid = ctx.param(&format!("{}.shortcut.w", v.prefix), w);
            let s = ctx.conv2d(x, &wid, v.cfg.stride, 0)?;
            bn(ctx, &s, bnv, mode)?
        }
        None => x.clone(),
    };
    let sum = ctx.add(&y, &shortcut)?;
    Ok(ctx.relu(&sum))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::net::{Encoder, EncoderVariant};
    use crate::encoder::{EvalCtx, TapeCtx};
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_input(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f32> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn concurrent_equals_sequential_bitwise() {
        let enc: Encoder<f32> = Encoder::new(EncoderVariant::Xs, 32, None, 5).unwrap();
        let view = enc.block_view(0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let x = rand_input(&mut rng, vec![2, 16, 16, 16]);
            let mut seq = EvalCtx::sequential();
            let mut conc = EvalCtx::concurrent();
            let a = paa_block(&mut seq, &x, &view, Mode::Train).unwrap();
            let b = paa_block(&mut conc, &x, &view, Mode::Train).unwrap();
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn tape_records_same_values_as_eval() {
        let enc: Encoder<f32> = Encoder::new(EncoderVariant::Xs, 32, None, 5).unwrap();
        let view = enc.block_view(0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let x = rand_input(&mut rng, vec![1, 16, 16, 16]);
        let mut seq = EvalCtx::sequential();
        let a = paa_block(&mut seq, &x, &view, Mode::Eval).unwrap();
        let mut tape = Tape::without_grads();
        let mut ctx = TapeCtx::new(&mut tape, false);
        let xid = crate::encoder::Ctx::<f32>::input(&mut ctx, &x);
        let bid = paa_block(&mut ctx, &xid, &view, Mode::Eval).unwrap();
        for (x, y) in a.data().iter().zip(tape.value(bid).data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn zero_attention_params_reduce_to_residual_identity() {
        let mut enc: Encoder<f32> = Encoder::new(EncoderVariant::Xs, 32, None, 5).unwrap();
        // stage0 block1: in == out == 16, stride 1, identity shortcut
        for name in [
            "stage0.block1.h_attn.wv",
            "stage0.block1.w_attn.wv",
            "stage0.block1.h_attn.rv",
            "stage0.block1.w_attn.rv",
        ] {
            let t = enc.store.tensors.get_mut(name).unwrap();
            *t = Tensor::zeros(t.shape().to_vec());
        }
        let view = enc.block_view(0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        // non-negative input so relu(x) == x on the residual path
        let x = Tensor::from_vec(
            vec![1, 16, 8, 8],
            (0..16 * 64).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let mut ctx = EvalCtx::sequential();
        let y = paa_block(&mut ctx, &x, &view, Mode::Train).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn missing_projection_is_a_configuration_error() {
        let enc: Encoder<f32> = Encoder::new(EncoderVariant::Xs, 32, None, 5).unwrap();
        let mut view = enc.block_view(0, 0); // stride 2 block requires projection
        view.shortcut = None;
        let x = Tensor::zeros(vec![1, 16, 16, 16]);
        let mut ctx = EvalCtx::sequential();
        assert!(matches!(
            paa_block(&mut ctx, &x, &view, Mode::Eval),
            Err(Error::Config(_))
        ));
    }
}
