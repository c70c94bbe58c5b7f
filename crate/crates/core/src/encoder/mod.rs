//! Parallel axial-attention encoder.
//!
//! The forward pass is written once against the [`Ctx`] trait and runs in two
//! modes: [`TapeCtx`] records every primitive on an autodiff tape (training,
//! attacks), while [`EvalCtx`] computes values directly and may execute the
//! two axial branches of a PAA block on independent workers. Both paths call
//! the same kernels, so their outputs are bit-identical.

pub mod axial;
pub mod checkpoint;
pub mod momentum;
pub mod net;
pub mod paa;
pub mod reference;

pub use axial::{axial_attention_1d, AxialView, Axis, BnView};
pub use net::{Encoder, EncoderConfig, EncoderVariant, ParamStore, EMBED_DIM};
pub use paa::{paa_block, BlockView, BranchMode};

use crate::error::{Error, Result};
use crate::tensor::tape::BnStats;
use crate::tensor::{kernels as kn, sc, Mode, Scalar, Tape, Tensor, ValId};
use std::collections::HashMap;

/// Forward-execution context: either an autodiff tape or a plain evaluator.
pub trait Ctx<S: Scalar> {
    type Val: Clone + Send + Sync;

    /// Introduce an input tensor (no gradient tracking).
    fn input(&mut self, t: &Tensor<S>) -> Self::Val;
    /// Introduce a named parameter.
    fn param(&mut self, name: &str, t: &Tensor<S>) -> Self::Val;
    fn shape_of(&self, v: &Self::Val) -> Vec<usize>;

    fn add(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val>;
    fn relu(&mut self, x: &Self::Val) -> Self::Val;
    fn matmul(&mut self, a: &Self::Val, b: &Self::Val) -> Result<Self::Val>;
    fn add_bias(&mut self, x: &Self::Val, bias: &Self::Val) -> Result<Self::Val>;
    fn conv1d(&mut self, x: &Self::Val, w: &Self::Val, stride: usize, pad: usize) -> Result<Self::Val>;
    fn conv2d(&mut self, x: &Self::Val, w: &Self::Val, stride: usize, pad: usize) -> Result<Self::Val>;
    fn max_pool2d(&mut self, x: &Self::Val, k: usize, stride: usize, pad: usize) -> Result<Self::Val>;
    fn avg_pool2d(&mut self, x: &Self::Val, k: usize, stride: usize) -> Result<Self::Val>;
    fn global_avg_pool(&mut self, x: &Self::Val) -> Result<Self::Val>;
    fn batch_norm(
        &mut self,
        x: &Self::Val,
        gamma: &Self::Val,
        beta: &Self::Val,
        stats: &BnStats<S>,
        mode: Mode,
        key: &str,
    ) -> Result<Self::Val>;
    fn softmax(&mut self, x: &Self::Val, axis: usize) -> Result<Self::Val>;
    fn l2_normalize(&mut self, x: &Self::Val) -> Result<Self::Val>;
    fn reshape(&mut self, x: &Self::Val, shape: Vec<usize>) -> Result<Self::Val>;
    fn permute(&mut self, x: &Self::Val, perm: Vec<usize>) -> Result<Self::Val>;
    fn concat(&mut self, a: &Self::Val, b: &Self::Val, axis: usize) -> Result<Self::Val>;
    fn attn_logits(
        &mut self,
        q: &Self::Val,
        k: &Self::Val,
        rq: &Self::Val,
        rk: &Self::Val,
    ) -> Result<Self::Val>;
    fn attn_apply(&mut self, attn: &Self::Val, v: &Self::Val, rv: &Self::Val) -> Result<Self::Val>;

    /// Run the two PAA branches. A tape context records them one after the
    /// other (a single tape has a single writer); the eval context may hand
    /// them to independent workers. Outputs must not depend on the choice.
    fn join<A, B, F, G>(&mut self, f: F, g: G) -> Result<(A, B)>
    where
        A: Send,
        B: Send,
        F: FnOnce(&mut Self) -> Result<A> + Send,
        G: FnOnce(&mut Self) -> Result<B> + Send;
}

/// Recording context over a [`Tape`].
pub struct TapeCtx<'t, S: Scalar> {
    pub tape: &'t mut Tape<S>,
    /// Leaf cache so a parameter used twice maps to one tape node.
    interned: HashMap<String, ValId>,
    /// Whether parameters are recorded as gradient-tracked leaves.
    pub train_params: bool,
}

impl<'t, S: Scalar> TapeCtx<'t, S> {
    pub fn new(tape: &'t mut Tape<S>, train_params: bool) -> Self {
        TapeCtx {
            tape,
            interned: HashMap::new(),
            train_params,
        }
    }

    /// Tape leaf recorded for a parameter name, if the forward touched it.
    pub fn param_id(&self, name: &str) -> Option<ValId> {
        self.interned.get(name).copied()
    }

    /// Pre-bind a parameter name to an existing tape value, so the forward
    /// reads (and gradients flow to) a caller-controlled leaf. Used by the
    /// finite-difference suites to probe parameter gradients.
    pub fn intern(&mut self, name: &str, id: ValId) {
        self.interned.insert(name.to_string(), id);
    }

    /// All interned parameter leaves.
    pub fn param_ids(&self) -> impl Iterator<Item = (&String, ValId)> {
        self.interned.iter().map(|(k, v)| (k, *v))
    }
}

impl<S: Scalar> Ctx<S> for TapeCtx<'_, S> {
    type Val = ValId;

    fn input(&mut self, t: &Tensor<S>) -> ValId {
        self.tape.constant(t.clone())
    }

    fn param(&mut self, name: &str, t: &Tensor<S>) -> ValId {
        if let Some(&id) = self.interned.get(name) {
            return id;
        }
        let id = self.tape.leaf(t.clone(), self.train_params);
        self.interned.insert(name.to_string(), id);
        id
    }

    fn shape_of(&self, v: &ValId) -> Vec<usize> {
        self.tape.shape(*v).to_vec()
    }

    fn add(&mut self, a: &ValId, b: &ValId) -> Result<ValId> {
        self.tape.add(*a, *b)
    }
    fn relu(&mut self, x: &ValId) -> ValId {
        self.tape.relu(*x)
    }
    fn matmul(&mut self, a: &ValId, b: &ValId) -> Result<ValId> {
        self.tape.matmul(*a, *b)
    }
    fn add_bias(&mut self, x: &ValId, bias: &ValId) -> Result<ValId> {
        self.tape.add_bias(*x, *bias)
    }
    fn conv1d(&mut self, x: &ValId, w: &ValId, stride: usize, pad: usize) -> Result<ValId> {
        self.tape.conv1d(*x, *w, stride, pad)
    }
    fn conv2d(&mut self, x: &ValId, w: &ValId, stride: usize, pad: usize) -> Result<ValId> {
        self.tape.conv2d(*x, *w, stride, pad)
    }
    fn max_pool2d(&mut self, x: &ValId, k: usize, stride: usize, pad: usize) -> Result<ValId> {
        self.tape.max_pool2d(*x, k, stride, pad)
    }
    fn avg_pool2d(&mut self, x: &ValId, k: usize, stride: usize) -> Result<ValId> {
        self.tape.avg_pool2d(*x, k, stride)
    }
    fn global_avg_pool(&mut self, x: &ValId) -> Result<ValId> {
        self.tape.global_avg_pool(*x)
    }
    fn batch_norm(
        &mut self,
        x: &ValId,
        gamma: &ValId,
        beta: &ValId,
        stats: &BnStats<S>,
        mode: Mode,
        key: &str,
    ) -> Result<ValId> {
        self.tape.batch_norm(*x, *gamma, *beta, stats, mode, key)
    }
    fn softmax(&mut self, x: &ValId, axis: usize) -> Result<ValId> {
        self.tape.softmax(*x, axis)
    }
    fn l2_normalize(&mut self, x: &ValId) -> Result<ValId> {
        self.tape.l2_normalize(*x)
    }
    fn reshape(&mut self, x: &ValId, shape: Vec<usize>) -> Result<ValId> {
        self.tape.reshape(*x, shape)
    }
    fn permute(&mut self, x: &ValId, perm: Vec<usize>) -> Result<ValId> {
        self.tape.permute(*x, perm)
    }
    fn concat(&mut self, a: &ValId, b: &ValId, axis: usize) -> Result<ValId> {
        self.tape.concat(*a, *b, axis)
    }
    fn attn_logits(&mut self, q: &ValId, k: &ValId, rq: &ValId, rk: &ValId) -> Result<ValId> {
        self.tape.attn_logits(*q, *k, *rq, *rk)
    }
    fn attn_apply(&mut self, attn: &ValId, v: &ValId, rv: &ValId) -> Result<ValId> {
        self.tape.attn_apply(*attn, *v, *rv)
    }

    fn join<A, B, F, G>(&mut self, f: F, g: G) -> Result<(A, B)>
    where
        A: Send,
        B: Send,
        F: FnOnce(&mut Self) -> Result<A> + Send,
        G: FnOnce(&mut Self) -> Result<B> + Send,
    {
        let a = f(self)?;
        let b = g(self)?;
        Ok((a, b))
    }
}

/// Direct evaluator. [`BranchMode::Concurrent`] runs `join` closures through
/// `rayon::join`; outputs are bit-identical to sequential execution because
/// branches touch disjoint values and kernels reduce deterministically.
#[derive(Clone, Copy, Debug)]
pub struct EvalCtx {
    pub branch_mode: BranchMode,
}

impl EvalCtx {
    pub fn sequential() -> Self {
        EvalCtx {
            branch_mode: BranchMode::Sequential,
        }
    }

    pub fn concurrent() -> Self {
        EvalCtx {
            branch_mode: BranchMode::Concurrent,
        }
    }
}

impl<S: Scalar> Ctx<S> for EvalCtx {
    type Val = Tensor<S>;

    fn input(&mut self, t: &Tensor<S>) -> Tensor<S> {
        t.clone()
    }
    fn param(&mut self, _name: &str, t: &Tensor<S>) -> Tensor<S> {
        t.clone()
    }
    fn shape_of(&self, v: &Tensor<S>) -> Vec<usize> {
        v.shape().to_vec()
    }

    fn add(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        Tensor::from_vec(a.shape().to_vec(), data)
    }

    fn relu(&mut self, x: &Tensor<S>) -> Tensor<S> {
        Tensor::from_vec(x.shape().to_vec(), kn::relu(x.data())).unwrap()
    }

    fn matmul(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Tensor::from_vec(
            vec![sa[0], sb[1]],
            kn::matmul(a.data(), b.data(), sa[0], sa[1], sb[1]),
        )
    }

    fn add_bias(&mut self, x: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
        let c = *x.shape().last().unwrap();
        if bias.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: x.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        let bd = bias.data();
        let data = x
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(bd).map(|(&v, &b)| v + b).collect::<Vec<_>>())
            .collect();
        Tensor::from_vec(x.shape().to_vec(), data)
    }

    fn conv1d(&mut self, x: &Tensor<S>, w: &Tensor<S>, stride: usize, pad: usize) -> Result<Tensor<S>> {
        let (sx, sw) = (x.shape(), w.shape());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                left: sx.to_vec(),
                right: sw.to_vec(),
            });
        }
        let y = kn::conv1d(x.data(), w.data(), sx[0], sx[1], sx[2], sw[0], sw[2], stride, pad);
        let lo = kn::conv_out_len(sx[2], sw[2], stride, pad);
        Tensor::from_vec(vec![sx[0], sw[0], lo], y)
    }

    fn conv2d(&mut self, x: &Tensor<S>, w: &Tensor<S>, stride: usize, pad: usize) -> Result<Tensor<S>> {
        let (sx, sw) = (x.shape(), w.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: sx.to_vec(),
                right: sw.to_vec(),
            });
        }
        let y = kn::conv2d(
            x.data(),
            w.data(),
            sx[0],
            sx[1],
            sx[2],
            sx[3],
            sw[0],
            sw[2],
            sw[3],
            stride,
            pad,
        );
        let ho = kn::conv_out_len(sx[2], sw[2], stride, pad);
        let wo = kn::conv_out_len(sx[3], sw[3], stride, pad);
        Tensor::from_vec(vec![sx[0], sw[0], ho, wo], y)
    }

    fn max_pool2d(&mut self, x: &Tensor<S>, k: usize, stride: usize, pad: usize) -> Result<Tensor<S>> {
        let s = x.shape();
        let (y, _) = kn::max_pool2d(x.data(), s[0], s[1], s[2], s[3], k, stride, pad);
        let ho = kn::conv_out_len(s[2], k, stride, pad);
        let wo = kn::conv_out_len(s[3], k, stride, pad);
        Tensor::from_vec(vec![s[0], s[1], ho, wo], y)
    }

    fn avg_pool2d(&mut self, x: &Tensor<S>, k: usize, stride: usize) -> Result<Tensor<S>> {
        let s = x.shape();
        let y = kn::avg_pool2d(x.data(), s[0], s[1], s[2], s[3], k, stride);
        let ho = (s[2] - k) / stride + 1;
        let wo = (s[3] - k) / stride + 1;
        Tensor::from_vec(vec![s[0], s[1], ho, wo], y)
    }

    fn global_avg_pool(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let s = x.shape();
        let y = kn::global_avg_pool(x.data(), s[0], s[1], s[2] * s[3]);
        Tensor::from_vec(vec![s[0], s[1]], y)
    }

    fn batch_norm(
        &mut self,
        x: &Tensor<S>,
        gamma: &Tensor<S>,
        beta: &Tensor<S>,
        stats: &BnStats<S>,
        mode: Mode,
        _key: &str,
    ) -> Result<Tensor<S>> {
        let s = x.shape();
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let eps = sc::<S>(crate::tensor::tape::EPS_BN);
        let use_batch = mode == Mode::Train && n * inner > 1;
        let (mean, var) = if use_batch {
            kn::bn_stats(x.data(), n, c, inner)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let invstd: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let y = kn::bn_apply(x.data(), n, c, inner, &mean, &invstd, gamma.data(), beta.data());
        Tensor::from_vec(s.to_vec(), y)
    }

    fn softmax(&mut self, x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
        Tensor::from_vec(
            x.shape().to_vec(),
            kn::softmax_axis(x.data(), x.shape(), axis),
        )
    }

    fn l2_normalize(&mut self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let d = *x.shape().last().unwrap();
        let (y, _) = kn::l2_normalize_rows(x.data(), d).map_err(|row| {
            Error::DegenerateInput(format!("l2_normalize: row {row} has norm below {}", kn::EPS_NORM))
        })?;
        Tensor::from_vec(x.shape().to_vec(), y)
    }

    fn reshape(&mut self, x: &Tensor<S>, shape: Vec<usize>) -> Result<Tensor<S>> {
        x.reshaped(shape)
    }

    fn permute(&mut self, x: &Tensor<S>, perm: Vec<usize>) -> Result<Tensor<S>> {
        let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
        Tensor::from_vec(out_shape, kn::permute(x.data(), x.shape(), &perm))
    }

    fn concat(&mut self, a: &Tensor<S>, b: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
        let mut out_shape = a.shape().to_vec();
        out_shape[axis] += b.shape()[axis];
        Tensor::from_vec(
            out_shape,
            kn::concat(a.data(), b.data(), a.shape(), b.shape(), axis),
        )
    }

    fn attn_logits(
        &mut self,
        q: &Tensor<S>,
        k: &Tensor<S>,
        rq: &Tensor<S>,
        rk: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        let s = q.shape();
        let y = kn::attn_logits(q.data(), k.data(), rq.data(), rk.data(), s[0], s[1], s[2], s[3]);
        Tensor::from_vec(vec![s[0], s[1], s[3], s[3]], y)
    }

    fn attn_apply(&mut self, attn: &Tensor<S>, v: &Tensor<S>, rv: &Tensor<S>) -> Result<Tensor<S>> {
        let s = v.shape();
        let y = kn::attn_apply(attn.data(), v.data(), rv.data(), s[0], s[1], s[2], s[3]);
        Tensor::from_vec(s.to_vec(), y)
    }

    fn join<A, B, F, G>(&mut self, f: F, g: G) -> Result<(A, B)>
    where
        A: Send,
        B: Send,
        F: FnOnce(&mut Self) -> Result<A> + Send,
        G: FnOnce(&mut Self) -> Result<B> + Send,
    {
        match self.branch_mode {
            BranchMode::Sequential => {
                let a = f(self)?;
                let b = g(self)?;
                Ok((a, b))
            }
            BranchMode::Concurrent => {
                let mut c1 = *self;
                let mut c2 = *self;
                let (ra, rb) = rayon::join(move || f(&mut c1), move || g(&mut c2));
                Ok((ra?, rb?))
            }
        }
    }
}
