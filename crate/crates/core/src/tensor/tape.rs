//! Wengert-list reverse-mode differentiation.
//!
//! Every primitive application appends a node holding the op id, input refs
//! and whatever the backward pass needs. `backward` walks the list in
//! reverse; `replay_forward` recomputes every node from the leaves, which
//! must reproduce the recorded values bit-identically.

use super::kernels as kn;
use super::scalar::{sc, Scalar};
use super::Tensor;
use crate::error::{Error, Result};
use crate::parallel::det_sum;

/// Variance floor inside batch norm.
pub const EPS_BN: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValId(pub(crate) usize);

/// Forward mode for statistics-bearing layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running batch-norm statistics owned by the model, not the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

impl<S: Scalar> BnStats<S> {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![S::zero(); channels],
            var: vec![S::one(); channels],
        }
    }
}

/// Batch statistics observed by a train-mode batch-norm node, reported so the
/// training loop can fold them into the running stats after the step.
#[derive(Debug, Clone)]
pub struct BnUpdate<S> {
    pub key: String,
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

enum Op<S> {
    Leaf,
    Add(ValId, ValId),
    Sub(ValId, ValId),
    Mul(ValId, ValId),
    Scale(ValId, S),
    AddScalar(ValId, S),
    Relu(ValId),
    Tanh(ValId),
    MatMul(ValId, ValId),
    AddBias(ValId, ValId),
    Conv1d {
        x: ValId,
        w: ValId,
        stride: usize,
        pad: usize,
    },
    Conv2d {
        x: ValId,
        w: ValId,
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        x: ValId,
        k: usize,
        stride: usize,
        pad: usize,
        arg: Vec<u32>,
    },
    AvgPool2d {
        x: ValId,
        k: usize,
        stride: usize,
    },
    GlobalAvgPool(ValId),
    BatchNorm {
        x: ValId,
        gamma: ValId,
        beta: ValId,
        train_stats: bool,
        mean: Vec<S>,
        invstd: Vec<S>,
        update: Option<BnUpdate<S>>,
    },
    Softmax {
        x: ValId,
        axis: usize,
    },
    L2NormRows {
        x: ValId,
        norms: Vec<S>,
    },
    CrossEntropyRows {
        logits: ValId,
        targets: Vec<usize>,
        mask: Option<Vec<u8>>,
        probs: Vec<S>,
    },
    LseRows {
        x: ValId,
        mask: Option<Vec<u8>>,
        probs: Vec<S>,
    },
    Reshape(ValId),
    Permute {
        x: ValId,
        perm: Vec<usize>,
    },
    Concat {
        a: ValId,
        b: ValId,
        axis: usize,
    },
    SumAll(ValId),
    MeanAll(ValId),
    RowDot(ValId, ValId),
    BmmVec {
        z: ValId,
        v: ValId,
    },
    MulCol {
        x: ValId,
        c: ValId,
    },
    MulRow {
        x: ValId,
        r: ValId,
    },
    GatherRows {
        x: ValId,
        idx: Vec<usize>,
    },
    GatherCols {
        x: ValId,
        idx: Vec<usize>,
    },
    MaxExcludeCols {
        x: ValId,
        exclude: Vec<usize>,
        arg: Vec<usize>,
    },
    AttnLogits {
        q: ValId,
        k: ValId,
        rq: ValId,
        rk: ValId,
    },
    AttnApply {
        attn: ValId,
        v: ValId,
        rv: ValId,
    },
}

struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    requires_grad: bool,
}

/// Ordered record of primitive applications with gradient accumulation.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    grads_enabled: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            grads_enabled: true,
        }
    }

    /// Tape that records values (so replay works) but never tracks gradients.
    pub fn without_grads() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            grads_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: ValId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of a node after `backward`; zeros if the node tracks
    /// gradients but was not on the path to the loss.
    pub fn grad(&self, id: ValId) -> Option<&[S]> {
        self.grads[id.0].as_deref()
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, requires_grad: bool) -> ValId {
        let rg = requires_grad && self.grads_enabled;
        self.nodes.push(Node {
            op,
            value,
            requires_grad: rg,
        });
        self.grads.push(None);
        ValId(self.nodes.len() - 1)
    }

    fn rg(&self, id: ValId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn rg2(&self, a: ValId, b: ValId) -> bool {
        self.rg(a) || self.rg(b)
    }

    // ── construction ─────────────────────────────────────────────

    pub fn leaf(&mut self, t: Tensor<S>, requires_grad: bool) -> ValId {
        self.push(Op::Leaf, t, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> ValId {
        self.push(Op::Leaf, t, false)
    }

    // ── elementwise ──────────────────────────────────────────────

    fn check_same_shape(&self, op: &'static str, a: ValId, b: ValId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        self.check_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), t, self.rg2(a, b)))
    }

    pub fn sub(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        self.check_same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let t = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        Ok(self.push(Op::Sub(a, b), t, self.rg2(a, b)))
    }

    pub fn mul(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        self.check_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), t, self.rg2(a, b)))
    }

    pub fn scale(&mut self, a: ValId, c: S) -> ValId {
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let t = Tensor::from_vec(self.shape(a).to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), t, rg)
    }

    pub fn add_scalar(&mut self, a: ValId, c: S) -> ValId {
        let data = self.value(a).data().iter().map(|&x| x + c).collect();
        let t = Tensor::from_vec(self.shape(a).to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(Op::AddScalar(a, c), t, rg)
    }

    pub fn relu(&mut self, a: ValId) -> ValId {
        let t = Tensor::from_vec(self.shape(a).to_vec(), kn::relu(self.value(a).data())).unwrap();
        let rg = self.rg(a);
        self.push(Op::Relu(a), t, rg)
    }

    pub fn tanh(&mut self, a: ValId) -> ValId {
        let t = Tensor::from_vec(self.shape(a).to_vec(), kn::tanh(self.value(a).data())).unwrap();
        let rg = self.rg(a);
        self.push(Op::Tanh(a), t, rg)
    }

    // ── linear algebra ───────────────────────────────────────────

    pub fn matmul(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let y = kn::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::from_vec(vec![m, n], y)?;
        Ok(self.push(Op::MatMul(a, b), t, self.rg2(a, b)))
    }

    /// Broadcast-add `bias[C]` over the last axis of `x[..., C]`.
    pub fn add_bias(&mut self, x: ValId, bias: ValId) -> Result<ValId> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(bias) != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let bd = self.value(bias).data();
        let data: Vec<S> = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(bd).map(|(&v, &b)| v + b).collect::<Vec<_>>())
            .collect();
        let t = Tensor::from_vec(self.shape(x).to_vec(), data)?;
        Ok(self.push(Op::AddBias(x, bias), t, self.rg2(x, bias)))
    }

    // ── convolution & pooling ────────────────────────────────────

    pub fn conv1d(&mut self, x: ValId, w: ValId, stride: usize, pad: usize) -> Result<ValId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                left: sx,
                right: sw,
            });
        }
        let (b, c, l) = (sx[0], sx[1], sx[2]);
        let (co, k) = (sw[0], sw[2]);
        if k > l + 2 * pad || stride == 0 {
            return Err(Error::Dimension {
                op: "conv1d",
                detail: format!("kernel {k} exceeds padded length {} or stride 0", l + 2 * pad),
            });
        }
        let y = kn::conv1d(self.value(x).data(), self.value(w).data(), b, c, l, co, k, stride, pad);
        let lo = kn::conv_out_len(l, k, stride, pad);
        let t = Tensor::from_vec(vec![b, co, lo], y)?;
        Ok(self.push(Op::Conv1d { x, w, stride, pad }, t, self.rg2(x, w)))
    }

    pub fn conv2d(&mut self, x: ValId, w: ValId, stride: usize, pad: usize) -> Result<ValId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: sx,
                right: sw,
            });
        }
        let (b, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, kh, kw) = (sw[0], sw[2], sw[3]);
        if kh > h + 2 * pad || kw > wd + 2 * pad || stride == 0 {
            return Err(Error::Dimension {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} does not fit {h}x{wd} with pad {pad}"),
            });
        }
        let y = kn::conv2d(
            self.value(x).data(),
            self.value(w).data(),
            b,
            c,
            h,
            wd,
            co,
            kh,
            kw,
            stride,
            pad,
        );
        let ho = kn::conv_out_len(h, kh, stride, pad);
        let wo = kn::conv_out_len(wd, kw, stride, pad);
        let t = Tensor::from_vec(vec![b, co, ho, wo], y)?;
        Ok(self.push(Op::Conv2d { x, w, stride, pad }, t, self.rg2(x, w)))
    }

    pub fn max_pool2d(&mut self, x: ValId, k: usize, stride: usize, pad: usize) -> Result<ValId> {
        let s = self.shape(x).to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (y, arg) = kn::max_pool2d(self.value(x).data(), b, c, h, w, k, stride, pad);
        let ho = kn::conv_out_len(h, k, stride, pad);
        let wo = kn::conv_out_len(w, k, stride, pad);
        let t = Tensor::from_vec(vec![b, c, ho, wo], y)?;
        let rg = self.rg(x);
        Ok(self.push(Op::MaxPool2d { x, k, stride, pad, arg }, t, rg))
    }

    pub fn avg_pool2d(&mut self, x: ValId, k: usize, stride: usize) -> Result<ValId> {
        let s = self.shape(x).to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if k > h || k > w {
            return Err(Error::Dimension {
                op: "avg_pool2d",
                detail: format!("window {k} larger than {h}x{w}"),
            });
        }
        let y = kn::avg_pool2d(self.value(x).data(), b, c, h, w, k, stride);
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let t = Tensor::from_vec(vec![b, c, ho, wo], y)?;
        let rg = self.rg(x);
        Ok(self.push(Op::AvgPool2d { x, k, stride }, t, rg))
    }

    pub fn global_avg_pool(&mut self, x: ValId) -> Result<ValId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Dimension {
                op: "global_avg_pool",
                detail: format!("expected rank 4, got {s:?}"),
            });
        }
        let y = kn::global_avg_pool(self.value(x).data(), s[0], s[1], s[2] * s[3]);
        let t = Tensor::from_vec(vec![s[0], s[1]], y)?;
        let rg = self.rg(x);
        Ok(self.push(Op::GlobalAvgPool(x), t, rg))
    }

    // ── batch norm ───────────────────────────────────────────────

    /// Normalize channel axis 1 of `x[N, C, ...]`. Train mode uses batch
    /// statistics and reports them via [`Tape::bn_updates`]; eval mode (and a
    /// train-mode batch whose per-channel count is 1, the documented
    /// fallback) uses the supplied running statistics.
    pub fn batch_norm(
        &mut self,
        x: ValId,
        gamma: ValId,
        beta: ValId,
        stats: &BnStats<S>,
        mode: Mode,
        key: &str,
    ) -> Result<ValId> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::Dimension {
                op: "batch_norm",
                detail: format!("rank must be ≥ 2, got {s:?}"),
            });
        }
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.mean.len() != c {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                left: s,
                right: vec![c],
            });
        }
        let eps = sc::<S>(EPS_BN);
        let use_batch = mode == Mode::Train && n * inner > 1;
        let (mean, var, update) = if use_batch {
            let (m, v) = kn::bn_stats(self.value(x).data(), n, c, inner);
            let update = BnUpdate {
                key: key.to_string(),
                mean: m.clone(),
                var: v.clone(),
            };
            (m, v, Some(update))
        } else {
            (stats.mean.clone(), stats.var.clone(), None)
        };
        let invstd: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let y = kn::bn_apply(
            self.value(x).data(),
            n,
            c,
            inner,
            &mean,
            &invstd,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let t = Tensor::from_vec(self.shape(x).to_vec(), y)?;
        let rg = self.rg(x) || self.rg2(gamma, beta);
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                train_stats: use_batch,
                mean,
                invstd,
                update,
            },
            t,
            rg,
        ))
    }

    /// Batch statistics recorded by train-mode batch-norm nodes, in
    /// application order.
    pub fn bn_updates(&self) -> Vec<&BnUpdate<S>> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::BatchNorm { update: Some(u), .. } => Some(u),
                _ => None,
            })
            .collect()
    }

    // ── normalization / softmax ──────────────────────────────────

    pub fn softmax(&mut self, x: ValId, axis: usize) -> Result<ValId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Dimension {
                op: "softmax",
                detail: format!("axis {axis} out of range for {s:?}"),
            });
        }
        let y = kn::softmax_axis(self.value(x).data(), &s, axis);
        let t = Tensor::from_vec(s, y)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Softmax { x, axis }, t, rg))
    }

    /// Unit-normalize the last axis.
    pub fn l2_normalize(&mut self, x: ValId) -> Result<ValId> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or(Error::Dimension {
            op: "l2_normalize",
            detail: "rank 0".into(),
        })?;
        let (y, norms) = kn::l2_normalize_rows(self.value(x).data(), d).map_err(|row| {
            Error::DegenerateInput(format!("l2_normalize: row {row} has norm below {}", kn::EPS_NORM))
        })?;
        let t = Tensor::from_vec(s, y)?;
        let rg = self.rg(x);
        Ok(self.push(Op::L2NormRows { x, norms }, t, rg))
    }

    /// Mean over rows of −log softmax(logits)[target]; `mask` marks valid
    /// columns per row (1 = participates in the denominator).
    pub fn cross_entropy_rows(
        &mut self,
        logits: ValId,
        targets: Vec<usize>,
        mask: Option<Vec<u8>>,
    ) -> Result<ValId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.len() != s[0] {
            return Err(Error::Dimension {
                op: "cross_entropy_rows",
                detail: format!("logits {s:?} vs {} targets", targets.len()),
            });
        }
        if let Some(m) = &mask {
            if m.len() != s[0] * s[1] {
                return Err(Error::Dimension {
                    op: "cross_entropy_rows",
                    detail: "mask size mismatch".into(),
                });
            }
        }
        if targets.iter().any(|&t| t >= s[1]) {
            return Err(Error::Contract("cross_entropy_rows: target out of range".into()));
        }
        let (loss, probs) =
            kn::cross_entropy_rows(self.value(logits).data(), s[0], s[1], &targets, mask.as_deref());
        let t = Tensor::scalar(loss);
        let rg = self.rg(logits);
        Ok(self.push(
            Op::CrossEntropyRows {
                logits,
                targets,
                mask,
                probs,
            },
            t,
            rg,
        ))
    }

    /// Per-row log-sum-exp over valid columns → `[N]`.
    pub fn lse_rows(&mut self, x: ValId, mask: Option<Vec<u8>>) -> Result<ValId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Dimension {
                op: "lse_rows",
                detail: format!("expected rank 2, got {s:?}"),
            });
        }
        if let Some(m) = &mask {
            if m.len() != s[0] * s[1] {
                return Err(Error::Dimension {
                    op: "lse_rows",
                    detail: "mask size mismatch".into(),
                });
            }
            if m.chunks(s[1]).any(|row| row.iter().all(|&b| b == 0)) {
                return Err(Error::Contract("lse_rows: fully masked row".into()));
            }
        }
        let (n, c) = (s[0], s[1]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n);
        let mut probs = vec![S::zero(); n * c];
        for r in 0..n {
            let valid = |j: usize| mask.as_ref().map_or(true, |m| m[r * c + j] != 0);
            let mut mx = S::neg_infinity();
            for j in 0..c {
                if valid(j) && xd[r * c + j] > mx {
                    mx = xd[r * c + j];
                }
            }
            let mut denom = S::zero();
            for j in 0..c {
                if valid(j) {
                    let e = (xd[r * c + j] - mx).exp();
                    probs[r * c + j] = e;
                    denom = denom + e;
                }
            }
            let inv = S::one() / denom;
            for j in 0..c {
                probs[r * c + j] = probs[r * c + j] * inv;
            }
            out.push(denom.ln() + mx);
        }
        let t = Tensor::from_vec(vec![n], out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::LseRows { x, mask, probs }, t, rg))
    }

    // ── shape ────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: ValId, shape: Vec<usize>) -> Result<ValId> {
        let t = self.value(x).reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape(x), t, rg))
    }

    pub fn permute(&mut self, x: ValId, perm: Vec<usize>) -> Result<ValId> {
        let s = self.shape(x).to_vec();
        if perm.len() != s.len() {
            return Err(Error::Dimension {
                op: "permute",
                detail: format!("perm {perm:?} vs shape {s:?}"),
            });
        }
        let y = kn::permute(self.value(x).data(), &s, &perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let t = Tensor::from_vec(out_shape, y)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Permute { x, perm }, t, rg))
    }

    pub fn concat(&mut self, a: ValId, b: ValId, axis: usize) -> Result<ValId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::ShapeMismatch {
                op: "concat",
                left: sa,
                right: sb,
            });
        }
        let y = kn::concat(self.value(a).data(), self.value(b).data(), &sa, &sb, axis);
        let mut out_shape = sa.clone();
        out_shape[axis] += sb[axis];
        let t = Tensor::from_vec(out_shape, y)?;
        Ok(self.push(Op::Concat { a, b, axis }, t, self.rg2(a, b)))
    }

    // ── reductions & gathers ─────────────────────────────────────

    pub fn sum_all(&mut self, x: ValId) -> ValId {
        let t = Tensor::scalar(det_sum(self.value(x).data()));
        let rg = self.rg(x);
        self.push(Op::SumAll(x), t, rg)
    }

    pub fn mean_all(&mut self, x: ValId) -> ValId {
        let n = self.value(x).numel();
        let t = Tensor::scalar(det_sum(self.value(x).data()) / S::from_usize(n).unwrap());
        let rg = self.rg(x);
        self.push(Op::MeanAll(x), t, rg)
    }

    /// Row-wise dot product of two `[N, D]` tensors → `[N]`.
    pub fn row_dot(&mut self, a: ValId, b: ValId) -> Result<ValId> {
        self.check_same_shape("row_dot", a, b)?;
        let s = self.shape(a).to_vec();
        let d = *s.last().unwrap();
        let n = self.value(a).numel() / d;
        let data: Vec<S> = (0..n)
            .map(|r| {
                let ar = &self.value(a).data()[r * d..(r + 1) * d];
                let br = &self.value(b).data()[r * d..(r + 1) * d];
                let mut acc = S::zero();
                for (&x, &y) in ar.iter().zip(br) {
                    acc = acc + x * y;
                }
                acc
            })
            .collect();
        let t = Tensor::from_vec(vec![n], data)?;
        Ok(self.push(Op::RowDot(a, b), t, self.rg2(a, b)))
    }

    /// Batched matrix–vector product: z `[N,J,D]` · v `[N,D]` → `[N,J]`.
    pub fn bmm_vec(&mut self, z: ValId, v: ValId) -> Result<ValId> {
        let (sz, sv) = (self.shape(z).to_vec(), self.shape(v).to_vec());
        if sz.len() != 3 || sv.len() != 2 || sz[0] != sv[0] || sz[2] != sv[1] {
            return Err(Error::ShapeMismatch {
                op: "bmm_vec",
                left: sz,
                right: sv,
            });
        }
        let (n, j, d) = (sz[0], sz[1], sz[2]);
        let zd = self.value(z).data();
        let vd = self.value(v).data();
        let mut y = vec![S::zero(); n * j];
        for ni in 0..n {
            let vr = &vd[ni * d..(ni + 1) * d];
            for ji in 0..j {
                let zr = &zd[(ni * j + ji) * d..(ni * j + ji + 1) * d];
                let mut acc = S::zero();
                for (&zv, &vv) in zr.iter().zip(vr) {
                    acc = acc + zv * vv;
                }
                y[ni * j + ji] = acc;
            }
        }
        let t = Tensor::from_vec(vec![n, j], y)?;
        Ok(self.push(Op::BmmVec { z, v }, t, self.rg2(z, v)))
    }

    /// Multiply each row of x `[N,J]` by c `[N]`.
    pub fn mul_col(&mut self, x: ValId, c: ValId) -> Result<ValId> {
        let (sx, sci) = (self.shape(x).to_vec(), self.shape(c).to_vec());
        if sx.len() != 2 || sci != [sx[0]] {
            return Err(Error::ShapeMismatch {
                op: "mul_col",
                left: sx,
                right: sci,
            });
        }
        let (n, j) = (sx[0], sx[1]);
        let cd = self.value(c).data();
        let data: Vec<S> = self
            .value(x)
            .data()
            .chunks(j)
            .enumerate()
            .flat_map(|(r, row)| row.iter().map(|&v| v * cd[r]).collect::<Vec<_>>())
            .collect();
        let t = Tensor::from_vec(vec![n, j], data)?;
        Ok(self.push(Op::MulCol { x, c }, t, self.rg2(x, c)))
    }

    /// Multiply each column of x `[N,M]` by r `[M]`.
    pub fn mul_row(&mut self, x: ValId, r: ValId) -> Result<ValId> {
        let (sx, sr) = (self.shape(x).to_vec(), self.shape(r).to_vec());
        if sx.len() != 2 || sr != [sx[1]] {
            return Err(Error::ShapeMismatch {
                op: "mul_row",
                left: sx,
                right: sr,
            });
        }
        let rd = self.value(r).data();
        let data: Vec<S> = self
            .value(x)
            .data()
            .chunks(sx[1])
            .flat_map(|row| row.iter().zip(rd).map(|(&v, &rv)| v * rv).collect::<Vec<_>>())
            .collect();
        let t = Tensor::from_vec(sx, data)?;
        Ok(self.push(Op::MulRow { x, r }, t, self.rg2(x, r)))
    }

    pub fn gather_rows(&mut self, x: ValId, idx: Vec<usize>) -> Result<ValId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Dimension {
                op: "gather_rows",
                detail: format!("expected rank 2, got {s:?}"),
            });
        }
        if idx.iter().any(|&i| i >= s[0]) {
            return Err(Error::Contract("gather_rows: index out of range".into()));
        }
        let d = s[1];
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            data.extend_from_slice(&xd[i * d..(i + 1) * d]);
        }
        let t = Tensor::from_vec(vec![idx.len(), d], data)?;
        let rg = self.rg(x);
        Ok(self.push(Op::GatherRows { x, idx }, t, rg))
    }

    /// Pick one column per row: x `[N,C]`, idx `[N]` → `[N]`.
    pub fn gather_cols(&mut self, x: ValId, idx: Vec<usize>) -> Result<ValId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || idx.len() != s[0] || idx.iter().any(|&i| i >= s[1]) {
            return Err(Error::Contract("gather_cols: bad index vector".into()));
        }
        let xd = self.value(x).data();
        let data: Vec<S> = idx.iter().enumerate().map(|(r, &ci)| xd[r * s[1] + ci]).collect();
        let t = Tensor::from_vec(vec![s[0]], data)?;
        let rg = self.rg(x);
        Ok(self.push(Op::GatherCols { x, idx }, t, rg))
    }

    /// Per-row maximum over all columns except `exclude[r]` → `[N]`.
    pub fn max_exclude_cols(&mut self, x: ValId, exclude: Vec<usize>) -> Result<ValId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || exclude.len() != s[0] || s[1] < 2 {
            return Err(Error::Contract("max_exclude_cols: need ≥2 columns".into()));
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(s[0]);
        let mut arg = Vec::with_capacity(s[0]);
        for r in 0..s[0] {
            let mut best = S::neg_infinity();
            let mut bi = usize::MAX;
            for c in 0..s[1] {
                if c != exclude[r] && xd[r * s[1] + c] > best {
                    best = xd[r * s[1] + c];
                    bi = c;
                }
            }
            data.push(best);
            arg.push(bi);
        }
        let t = Tensor::from_vec(vec![s[0]], data)?;
        let rg = self.rg(x);
        Ok(self.push(Op::MaxExcludeCols { x, exclude, arg }, t, rg))
    }

    // ── attention primitives ─────────────────────────────────────

    /// Position-sensitive attention logits.
    /// q, k: `[N, heads, d, L]`; rq, rk: `[d, 2L−1]` → `[N, heads, L, L]`.
    pub fn attn_logits(&mut self, q: ValId, k: ValId, rq: ValId, rk: ValId) -> Result<ValId> {
        let sq = self.shape(q).to_vec();
        self.check_same_shape("attn_logits", q, k)?;
        if sq.len() != 4 {
            return Err(Error::Dimension {
                op: "attn_logits",
                detail: format!("q must be rank 4, got {sq:?}"),
            });
        }
        let (n, heads, d, l) = (sq[0], sq[1], sq[2], sq[3]);
        let table = [d, 2 * l - 1];
        if self.shape(rq) != table || self.shape(rk) != table {
            return Err(Error::ShapeMismatch {
                op: "attn_logits",
                left: self.shape(rq).to_vec(),
                right: table.to_vec(),
            });
        }
        let y = kn::attn_logits(
            self.value(q).data(),
            self.value(k).data(),
            self.value(rq).data(),
            self.value(rk).data(),
            n,
            heads,
            d,
            l,
        );
        let t = Tensor::from_vec(vec![n, heads, l, l], y)?;
        let rg = self.rg2(q, k) || self.rg2(rq, rk);
        Ok(self.push(Op::AttnLogits { q, k, rq, rk }, t, rg))
    }

    /// Weighted value aggregation with positional values.
    /// attn: `[N, heads, L, L]`; v: `[N, heads, d, L]`; rv: `[d, 2L−1]`.
    pub fn attn_apply(&mut self, attn: ValId, v: ValId, rv: ValId) -> Result<ValId> {
        let (sa, sv) = (self.shape(attn).to_vec(), self.shape(v).to_vec());
        if sa.len() != 4 || sv.len() != 4 || sa[0] != sv[0] || sa[1] != sv[1] || sa[2] != sv[3] || sa[3] != sv[3]
        {
            return Err(Error::ShapeMismatch {
                op: "attn_apply",
                left: sa,
                right: sv,
            });
        }
        let (n, heads, d, l) = (sv[0], sv[1], sv[2], sv[3]);
        if self.shape(rv) != [d, 2 * l - 1] {
            return Err(Error::ShapeMismatch {
                op: "attn_apply",
                left: self.shape(rv).to_vec(),
                right: vec![d, 2 * l - 1],
            });
        }
        let y = kn::attn_apply(
            self.value(attn).data(),
            self.value(v).data(),
            self.value(rv).data(),
            n,
            heads,
            d,
            l,
        );
        let t = Tensor::from_vec(vec![n, heads, d, l], y)?;
        let rg = self.rg2(attn, v) || self.rg(rv);
        Ok(self.push(Op::AttnApply { attn, v, rv }, t, rg))
    }

    // ── backward ─────────────────────────────────────────────────

    fn accumulate(&mut self, id: ValId, contribution: &[S]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let numel = self.nodes[id.0].value.numel();
        let slot = &mut self.grads[id.0];
        let buf = slot.get_or_insert_with(|| vec![S::zero(); numel]);
        kn::axpy(S::one(), contribution, buf);
    }

    /// Reverse sweep from a scalar loss. Populates gradients of every node
    /// with `requires_grad`; tracked leaves off the path keep zero grads.
    pub fn backward(&mut self, loss: ValId) -> Result<()> {
        if !self.grads_enabled {
            return Err(Error::Contract("backward on a gradient-free tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for (g, node) in self.grads.iter_mut().zip(&self.nodes) {
            *g = if node.requires_grad {
                Some(vec![S::zero(); node.value.numel()])
            } else {
                None
            };
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(()); // loss does not depend on any tracked leaf
        }
        self.grads[loss.0] = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match &self.grads[idx] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.backward_node(idx, &g);
        }
        Ok(())
    }

    fn backward_node(&mut self, idx: usize, g: &[S]) {
        // Values may be read freely; gradient writes go through accumulate.
        macro_rules! val {
            ($id:expr) => {
                self.nodes[$id.0].value.data()
            };
        }
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g);
                let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da: Vec<S> = g.iter().zip(val!(b)).map(|(&gv, &bv)| gv * bv).collect();
                let db: Vec<S> = g.iter().zip(val!(a)).map(|(&gv, &av)| gv * av).collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                let da: Vec<S> = g.iter().map(|&v| v * c).collect();
                self.accumulate(a, &da);
            }
            Op::AddScalar(a, _) => {
                let a = *a;
                self.accumulate(a, g);
            }
            Op::Relu(a) => {
                let a = *a;
                let da = kn::relu_backward(g, self.nodes[idx].value.data());
                self.accumulate(a, &da);
            }
            Op::Tanh(a) => {
                let a = *a;
                let da = kn::tanh_backward(g, self.nodes[idx].value.data());
                self.accumulate(a, &da);
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let da = kn::matmul_nt(g, val!(b), m, n, k);
                let db = kn::matmul_tn(val!(a), g, m, k, n);
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::AddBias(x, bias) => {
                let (x, bias) = (*x, *bias);
                let c = self.shape(bias)[0];
                self.accumulate(x, g);
                let rows = g.len() / c;
                let mut db = vec![S::zero(); c];
                for r in 0..rows {
                    for (i, dv) in db.iter_mut().enumerate() {
                        *dv = *dv + g[r * c + i];
                    }
                }
                self.accumulate(bias, &db);
            }
            Op::Conv1d { x, w, stride, pad } => {
                let (x, w, stride, pad) = (*x, *w, *stride, *pad);
                let sx = self.shape(x).to_vec();
                let sw = self.shape(w).to_vec();
                let (dx, dw) = kn::conv1d_backward(
                    g, val!(x), val!(w), sx[0], sx[1], sx[2], sw[0], sw[2], stride, pad,
                );
                self.accumulate(x, &dx);
                self.accumulate(w, &dw);
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (x, w, stride, pad) = (*x, *w, *stride, *pad);
                let sx = self.shape(x).to_vec();
                let sw = self.shape(w).to_vec();
                let (dx, dw) = kn::conv2d_backward(
                    g, val!(x), val!(w), sx[0], sx[1], sx[2], sx[3], sw[0], sw[2], sw[3], stride, pad,
                );
                self.accumulate(x, &dx);
                self.accumulate(w, &dw);
            }
            Op::MaxPool2d { x, arg, .. } => {
                let x = *x;
                let arg = arg.clone();
                let sx = self.shape(x).to_vec();
                let out_plane: usize = self.nodes[idx].value.shape()[2..].iter().product();
                let dx = kn::max_pool2d_backward(g, &arg, sx[0], sx[1], sx[2], sx[3], out_plane);
                self.accumulate(x, &dx);
            }
            Op::AvgPool2d { x, k, stride } => {
                let (x, k, stride) = (*x, *k, *stride);
                let sx = self.shape(x).to_vec();
                let dx = kn::avg_pool2d_backward(g, sx[0], sx[1], sx[2], sx[3], k, stride);
                self.accumulate(x, &dx);
            }
            Op::GlobalAvgPool(x) => {
                let x = *x;
                let sx = self.shape(x).to_vec();
                let spatial = sx[2] * sx[3];
                let inv = S::one() / S::from_usize(spatial).unwrap();
                let mut dx = vec![S::zero(); sx.iter().product()];
                for (bc, chunk) in dx.chunks_mut(spatial).enumerate() {
                    let gv = g[bc] * inv;
                    for o in chunk.iter_mut() {
                        *o = gv;
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                train_stats,
                mean,
                invstd,
                ..
            } => {
                let (x, gamma, beta, train_stats) = (*x, *gamma, *beta, *train_stats);
                let (mean, invstd) = (mean.clone(), invstd.clone());
                let sx = self.shape(x).to_vec();
                let (n, c) = (sx[0], sx[1]);
                let inner: usize = sx[2..].iter().product();
                let (dx, dgamma, dbeta) = if train_stats {
                    kn::bn_backward_train(g, val!(x), n, c, inner, &mean, &invstd, val!(gamma))
                } else {
                    kn::bn_backward_eval(g, val!(x), c, inner, &mean, &invstd, val!(gamma))
                };
                self.accumulate(x, &dx);
                self.accumulate(gamma, &dgamma);
                self.accumulate(beta, &dbeta);
            }
            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                let s = self.nodes[idx].value.shape().to_vec();
                let dx = kn::softmax_backward(g, self.nodes[idx].value.data(), &s, axis);
                self.accumulate(x, &dx);
            }
            Op::L2NormRows { x, norms } => {
                let x = *x;
                let norms = norms.clone();
                let d = *self.shape(x).last().unwrap();
                let dx = kn::l2_normalize_backward(g, self.nodes[idx].value.data(), &norms, d);
                self.accumulate(x, &dx);
            }
            Op::CrossEntropyRows {
                logits, targets, probs, ..
            } => {
                let logits = *logits;
                let targets = targets.clone();
                let probs = probs.clone();
                let s = self.shape(logits).to_vec();
                let dx = kn::cross_entropy_backward(g[0], &probs, s[0], s[1], &targets);
                self.accumulate(logits, &dx);
            }
            Op::LseRows { x, probs, .. } => {
                let x = *x;
                let probs = probs.clone();
                let c = self.shape(x)[1];
                let dx: Vec<S> = probs
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| p * g[i / c])
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Reshape(x) => {
                let x = *x;
                self.accumulate(x, g);
            }
            Op::Permute { x, perm } => {
                let x = *x;
                let perm = perm.clone();
                let out_shape = self.nodes[idx].value.shape().to_vec();
                let dx = kn::permute(g, &out_shape, &kn::inverse_perm(&perm));
                self.accumulate(x, &dx);
            }
            Op::Concat { a, b, axis } => {
                let (a, b, axis) = (*a, *b, *axis);
                let (da, db) = kn::concat_backward(g, self.shape(a), self.shape(b), axis);
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::SumAll(x) => {
                let x = *x;
                let dx = vec![g[0]; self.nodes[x.0].value.numel()];
                self.accumulate(x, &dx);
            }
            Op::MeanAll(x) => {
                let x = *x;
                let n = self.nodes[x.0].value.numel();
                let dx = vec![g[0] / S::from_usize(n).unwrap(); n];
                self.accumulate(x, &dx);
            }
            Op::RowDot(a, b) => {
                let (a, b) = (*a, *b);
                let d = *self.shape(a).last().unwrap();
                let n = self.nodes[a.0].value.numel() / d;
                let mut da = vec![S::zero(); n * d];
                let mut db = vec![S::zero(); n * d];
                for r in 0..n {
                    let gv = g[r];
                    for i in 0..d {
                        da[r * d + i] = gv * val!(b)[r * d + i];
                        db[r * d + i] = gv * val!(a)[r * d + i];
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::BmmVec { z, v } => {
                let (z, v) = (*z, *v);
                let sz = self.shape(z).to_vec();
                let (n, j, d) = (sz[0], sz[1], sz[2]);
                let mut dz = vec![S::zero(); n * j * d];
                let mut dv = vec![S::zero(); n * d];
                for ni in 0..n {
                    for ji in 0..j {
                        let gv = g[ni * j + ji];
                        let base = (ni * j + ji) * d;
                        for di in 0..d {
                            dz[base + di] = gv * val!(v)[ni * d + di];
                            dv[ni * d + di] = dv[ni * d + di] + gv * val!(z)[base + di];
                        }
                    }
                }
                self.accumulate(z, &dz);
                self.accumulate(v, &dv);
            }
            Op::MulCol { x, c } => {
                let (x, c) = (*x, *c);
                let s = self.shape(x).to_vec();
                let (n, j) = (s[0], s[1]);
                let mut dx = vec![S::zero(); n * j];
                let mut dc = vec![S::zero(); n];
                for r in 0..n {
                    let cv = val!(c)[r];
                    let mut acc = S::zero();
                    for i in 0..j {
                        dx[r * j + i] = g[r * j + i] * cv;
                        acc = acc + g[r * j + i] * val!(x)[r * j + i];
                    }
                    dc[r] = acc;
                }
                self.accumulate(x, &dx);
                self.accumulate(c, &dc);
            }
            Op::MulRow { x, r } => {
                let (x, r) = (*x, *r);
                let s = self.shape(x).to_vec();
                let (n, m) = (s[0], s[1]);
                let mut dx = vec![S::zero(); n * m];
                let mut dr = vec![S::zero(); m];
                for row in 0..n {
                    for col in 0..m {
                        let gi = g[row * m + col];
                        dx[row * m + col] = gi * val!(r)[col];
                        dr[col] = dr[col] + gi * val!(x)[row * m + col];
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(r, &dr);
            }
            Op::GatherRows { x, idx: rows } => {
                let x = *x;
                let rows = rows.clone();
                let d = self.shape(x)[1];
                let mut dx = vec![S::zero(); self.nodes[x.0].value.numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for i in 0..d {
                        dx[r * d + i] = dx[r * d + i] + g[k * d + i];
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::GatherCols { x, idx: cols } => {
                let x = *x;
                let cols = cols.clone();
                let c = self.shape(x)[1];
                let mut dx = vec![S::zero(); self.nodes[x.0].value.numel()];
                for (r, &ci) in cols.iter().enumerate() {
                    dx[r * c + ci] = dx[r * c + ci] + g[r];
                }
                self.accumulate(x, &dx);
            }
            Op::MaxExcludeCols { x, arg, .. } => {
                let x = *x;
                let arg = arg.clone();
                let c = self.shape(x)[1];
                let mut dx = vec![S::zero(); self.nodes[x.0].value.numel()];
                for (r, &ci) in arg.iter().enumerate() {
                    dx[r * c + ci] = dx[r * c + ci] + g[r];
                }
                self.accumulate(x, &dx);
            }
            Op::AttnLogits { q, k, rq, rk } => {
                let (q, k, rq, rk) = (*q, *k, *rq, *rk);
                let s = self.shape(q).to_vec();
                let grads = kn::attn_logits_backward(
                    g,
                    val!(q),
                    val!(k),
                    val!(rq),
                    val!(rk),
                    s[0],
                    s[1],
                    s[2],
                    s[3],
                );
                self.accumulate(q, &grads.dq);
                self.accumulate(k, &grads.dk);
                self.accumulate(rq, &grads.drq);
                self.accumulate(rk, &grads.drk);
            }
            Op::AttnApply { attn, v, rv } => {
                let (attn, v, rv) = (*attn, *v, *rv);
                let s = self.shape(v).to_vec();
                let grads = kn::attn_apply_backward(
                    g,
                    val!(attn),
                    val!(v),
                    val!(rv),
                    s[0],
                    s[1],
                    s[2],
                    s[3],
                );
                self.accumulate(attn, &grads.dattn);
                self.accumulate(v, &grads.dv);
                self.accumulate(rv, &grads.drv);
            }
        }
    }

    // ── replay ───────────────────────────────────────────────────

    /// Recompute every node from the recorded leaves. Returns the recomputed
    /// values in tape order; they must equal the stored values bit for bit.
    pub fn replay_forward(&self) -> Vec<Tensor<S>> {
        let mut out: Vec<Tensor<S>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let v = |id: ValId| -> &Tensor<S> { &out[id.0] };
            let recomputed: Tensor<S> = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::Add(a, b) => Tensor::from_vec(
                    v(*a).shape().to_vec(),
                    v(*a).data().iter().zip(v(*b).data()).map(|(&x, &y)| x + y).collect(),
                )
                .unwrap(),
                Op::Sub(a, b) => Tensor::from_vec(
                    v(*a).shape().to_vec(),
                    v(*a).data().iter().zip(v(*b).data()).map(|(&x, &y)| x - y).collect(),
                )
                .unwrap(),
                Op::Mul(a, b) => Tensor::from_vec(
                    v(*a).shape().to_vec(),
                    v(*a).data().iter().zip(v(*b).data()).map(|(&x, &y)| x * y).collect(),
                )
                .unwrap(),
                Op::Scale(a, c) => Tensor::from_vec(
                    v(*a).shape().to_vec(),
                    v(*a).data().iter().map(|&x| x * *c).collect(),
                )
                .unwrap(),
                Op::AddScalar(a, c) => Tensor::from_vec(
                    v(*a).shape().to_vec(),
                    v(*a).data().iter().map(|&x| x + *c).collect(),
                )
                .unwrap(),
                Op::Relu(a) => {
                    Tensor::from_vec(v(*a).shape().to_vec(), kn::relu(v(*a).data())).unwrap()
                }
                Op::Tanh(a) => {
                    Tensor::from_vec(v(*a).shape().to_vec(), kn::tanh(v(*a).data())).unwrap()
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (v(*a).shape()[0], v(*a).shape()[1]);
                    let n = v(*b).shape()[1];
                    Tensor::from_vec(vec![m, n], kn::matmul(v(*a).data(), v(*b).data(), m, k, n))
                        .unwrap()
                }
                Op::AddBias(x, bias) => {
                    let c = v(*bias).shape()[0];
                    let bd = v(*bias).data();
                    let data: Vec<S> = v(*x)
                        .data()
                        .chunks(c)
                        .flat_map(|row| row.iter().zip(bd).map(|(&a, &b)| a + b).collect::<Vec<_>>())
                        .collect();
                    Tensor::from_vec(v(*x).shape().to_vec(), data).unwrap()
                }
                Op::Conv1d { x, w, stride, pad } => {
                    let sx = v(*x).shape().to_vec();
                    let sw = v(*w).shape().to_vec();
                    let y = kn::conv1d(
                        v(*x).data(),
                        v(*w).data(),
                        sx[0],
                        sx[1],
                        sx[2],
                        sw[0],
                        sw[2],
                        *stride,
                        *pad,
                    );
                    Tensor::from_vec(node.value.shape().to_vec(), y).unwrap()
                }
                Op::Conv2d { x, w, stride, pad } => {
                    let sx = v(*x).shape().to_vec();
                    let sw = v(*w).shape().to_vec();
                    let y = kn::conv2d(
                        v(*x).data(),
                        v(*w).data(),
                        sx[0],
                        sx[1],
                        sx[2],
                        sx[3],
                        sw[0],
                        sw[2],
                        sw[3],
                        *stride,
                        *pad,
                    );
                    Tensor::from_vec(node.value.shape().to_vec(), y).unwrap()
                }
                Op::MaxPool2d { x, k, stride, pad, .. } => {
                    let sx = v(*x).shape().to_vec();
                    let (y, _) = kn::max_pool2d(v(*x).data(), sx[0], sx[1], sx[2], sx[3], *k, *stride, *pad);
                    Tensor::from_vec(node.value.shape().to_vec(), y).unwrap()
                }
                Op::AvgPool2d { x, k, stride } => {
                    let sx = v(*x).shape().to_vec();
                    let y = kn::avg_pool2d(v(*x).data(), sx[0], sx[1], sx[2], sx[3], *k, *stride);
                    Tensor::from_vec(node.value.shape().to_vec(), y).unwrap()
                }
                Op::GlobalAvgPool(x) => {
                    let sx = v(*x).shape().to_vec();
                    let y = kn::global_avg_pool(v(*x).data(), sx[0], sx[1], sx[2] * sx[3]);
                    Tensor::from_vec(vec![sx[0], sx[1]], y).unwrap()
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    train_stats,
                    mean,
                    invstd,
                    ..
                } => {
                    let sx = v(*x).shape().to_vec();
                    let (n, c) = (sx[0], sx[1]);
                    let inner: usize = sx[2..].iter().product();
                    let eps = sc::<S>(EPS_BN);
                    let (m2, inv2) = if *train_stats {
                        let (m, var) = kn::bn_stats(v(*x).data(), n, c, inner);
                        let inv: Vec<S> = var.iter().map(|&vv| S::one() / (vv + eps).sqrt()).collect();
                        (m, inv)
                    } else {
                        (mean.clone(), invstd.clone())
                    };
                    let y = kn::bn_apply(v(*x).data(), n, c, inner, &m2, &inv2, v(*gamma).data(), v(*beta).data());
                    Tensor::from_vec(sx, y).unwrap()
                }
                Op::Softmax { x, axis } => {
                    let s = v(*x).shape().to_vec();
                    Tensor::from_vec(s.clone(), kn::softmax_axis(v(*x).data(), &s, *axis)).unwrap()
                }
                Op::L2NormRows { x, .. } => {
                    let d = *v(*x).shape().last().unwrap();
                    let (y, _) = kn::l2_normalize_rows(v(*x).data(), d).expect("replay norm");
                    Tensor::from_vec(v(*x).shape().to_vec(), y).unwrap()
                }
                Op::CrossEntropyRows {
                    logits, targets, mask, ..
                } => {
                    let s = v(*logits).shape().to_vec();
                    let (loss, _) =
                        kn::cross_entropy_rows(v(*logits).data(), s[0], s[1], targets, mask.as_deref());
                    Tensor::scalar(loss)
                }
                Op::LseRows { x, mask, .. } => {
                    let s = v(*x).shape().to_vec();
                    let (n, c) = (s[0], s[1]);
                    let xd = v(*x).data();
                    let mut out = Vec::with_capacity(n);
                    for r in 0..n {
                        let valid =
                            |j: usize| mask.as_ref().map_or(true, |m| m[r * c + j] != 0);
                        let mut mx = S::neg_infinity();
                        for j in 0..c {
                            if valid(j) && xd[r * c + j] > mx {
                                mx = xd[r * c + j];
                            }
                        }
                        let mut denom = S::zero();
                        for j in 0..c {
                            if valid(j) {
                                denom = denom + (xd[r * c + j] - mx).exp();
                            }
                        }
                        out.push(denom.ln() + mx);
                    }
                    Tensor::from_vec(vec![n], out).unwrap()
                }
                Op::Reshape(x) => v(*x).reshaped(node.value.shape().to_vec()).unwrap(),
                Op::Permute { x, perm } => {
                    let s = v(*x).shape().to_vec();
                    Tensor::from_vec(node.value.shape().to_vec(), kn::permute(v(*x).data(), &s, perm))
                        .unwrap()
                }
                Op::Concat { a, b, axis } => Tensor::from_vec(
                    node.value.shape().to_vec(),
                    kn::concat(v(*a).data(), v(*b).data(), v(*a).shape(), v(*b).shape(), *axis),
                )
                .unwrap(),
                Op::SumAll(x) => Tensor::scalar(det_sum(v(*x).data())),
                Op::MeanAll(x) => {
                    Tensor::scalar(det_sum(v(*x).data()) / S::from_usize(v(*x).numel()).unwrap())
                }
                Op::RowDot(a, b) => {
                    let d = *v(*a).shape().last().unwrap();
                    let n = v(*a).numel() / d;
                    let data: Vec<S> = (0..n)
                        .map(|r| {
                            let mut acc = S::zero();
                            for i in 0..d {
                                acc = acc + v(*a).data()[r * d + i] * v(*b).data()[r * d + i];
                            }
                            acc
                        })
                        .collect();
                    Tensor::from_vec(vec![n], data).unwrap()
                }
                Op::BmmVec { z, v: vv } => {
                    let sz = v(*z).shape().to_vec();
                    let (n, j, d) = (sz[0], sz[1], sz[2]);
                    let mut y = vec![S::zero(); n * j];
                    for ni in 0..n {
                        for ji in 0..j {
                            let mut acc = S::zero();
                            for di in 0..d {
                                acc = acc + v(*z).data()[(ni * j + ji) * d + di] * v(*vv).data()[ni * d + di];
                            }
                            y[ni * j + ji] = acc;
                        }
                    }
                    Tensor::from_vec(vec![n, j], y).unwrap()
                }
                Op::MulCol { x, c } => {
                    let s = v(*x).shape().to_vec();
                    let data: Vec<S> = v(*x)
                        .data()
                        .chunks(s[1])
                        .enumerate()
                        .flat_map(|(r, row)| {
                            row.iter().map(|&a| a * v(*c).data()[r]).collect::<Vec<_>>()
                        })
                        .collect();
                    Tensor::from_vec(s, data).unwrap()
                }
                Op::MulRow { x, r } => {
                    let s = v(*x).shape().to_vec();
                    let rd = v(*r).data();
                    let data: Vec<S> = v(*x)
                        .data()
                        .chunks(s[1])
                        .flat_map(|row| row.iter().zip(rd).map(|(&a, &b)| a * b).collect::<Vec<_>>())
                        .collect();
                    Tensor::from_vec(s, data).unwrap()
                }
                Op::GatherRows { x, idx: rows } => {
                    let d = v(*x).shape()[1];
                    let mut data = Vec::with_capacity(rows.len() * d);
                    for &r in rows {
                        data.extend_from_slice(&v(*x).data()[r * d..(r + 1) * d]);
                    }
                    Tensor::from_vec(vec![rows.len(), d], data).unwrap()
                }
                Op::GatherCols { x, idx: cols } => {
                    let c = v(*x).shape()[1];
                    let data: Vec<S> =
                        cols.iter().enumerate().map(|(r, &ci)| v(*x).data()[r * c + ci]).collect();
                    Tensor::from_vec(vec![cols.len()], data).unwrap()
                }
                Op::MaxExcludeCols { x, exclude, .. } => {
                    let c = v(*x).shape()[1];
                    let data: Vec<S> = exclude
                        .iter()
                        .enumerate()
                        .map(|(r, &ex)| {
                            let mut best = S::neg_infinity();
                            for ci in 0..c {
                                if ci != ex && v(*x).data()[r * c + ci] > best {
                                    best = v(*x).data()[r * c + ci];
                                }
                            }
                            best
                        })
                        .collect();
                    Tensor::from_vec(vec![exclude.len()], data).unwrap()
                }
                Op::AttnLogits { q, k, rq, rk } => {
                    let s = v(*q).shape().to_vec();
                    let y = kn::attn_logits(
                        v(*q).data(),
                        v(*k).data(),
                        v(*rq).data(),
                        v(*rk).data(),
                        s[0],
                        s[1],
                        s[2],
                        s[3],
                    );
                    Tensor::from_vec(node.value.shape().to_vec(), y).unwrap()
                }
                Op::AttnApply { attn, v: vv, rv } => {
                    let s = v(*vv).shape().to_vec();
                    let y = kn::attn_apply(
                        v(*attn).data(),
                        v(*vv).data(),
                        v(*rv).data(),
                        s[0],
                        s[1],
                        s[2],
                        s[3],
                    );
                    Tensor::from_vec(node.value.shape().to_vec(), y).unwrap()
                }
            };
            debug_assert_eq!(recomputed.shape(), self.nodes[idx].value.shape());
            out.push(recomputed);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(shape: [usize; 2], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t2([2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.matmul(i2, i2).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0, 0.0, 1.0]);

        let a = tape.constant(t2([2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t2([2, 1], &[0.0, 1.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2([2, 2], &[1.0, -2.0, 3.0, 0.5]), true);
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_squared_norm_is_2x() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2([1, 3], &[1.0, -2.0, 0.5]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2([2, 2], &[1.0; 4]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn off_path_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2([1, 2], &[1.0, 2.0]), true);
        let unused = tape.leaf(t2([1, 2], &[5.0, 6.0]), true);
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn replay_reproduces_values_bit_identically() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut tape = Tape::new();
        let xd: Vec<f32> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = tape.leaf(Tensor::from_vec(vec![2, 3, 4], xd).unwrap(), true);
        let r = tape.relu(x);
        let flat = tape.reshape(r, vec![6, 4]).unwrap();
        let w = tape.constant(Tensor::filled(vec![4, 2], 0.3f32));
        let mm = tape.matmul(flat, w).unwrap();
        let sm = tape.softmax(mm, 1).unwrap();
        let _ = tape.sum_all(sm);
        let replayed = tape.replay_forward();
        for (i, rep) in replayed.iter().enumerate() {
            let orig = tape.value(ValId(i));
            assert_eq!(orig.data().len(), rep.data().len());
            for (a, b) in orig.data().iter().zip(rep.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "node {i} differs");
            }
        }
    }

    #[test]
    fn batch_norm_constant_input_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::filled(vec![4, 2, 3], 7.0), true);
        let gamma = tape.constant(Tensor::filled(vec![2], 1.0));
        let beta = tape.constant(Tensor::filled(vec![2], 0.0));
        let stats = BnStats::new(2);
        let y = tape.batch_norm(x, gamma, beta, &stats, Mode::Train, "bn").unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_affine_shift() {
        // standardized input, gamma=1 beta=5 → mean 5
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::<f64>::from_vec(vec![4, 1], vec![-1.5, -0.5, 0.5, 1.5]).unwrap(),
            false,
        );
        let gamma = tape.constant(Tensor::filled(vec![1], 1.0));
        let beta = tape.constant(Tensor::filled(vec![1], 5.0));
        let stats = BnStats::new(1);
        let y = tape.batch_norm(x, gamma, beta, &stats, Mode::Train, "bn").unwrap();
        let mean: f64 = tape.value(y).data().iter().sum::<f64>() / 4.0;
        assert!((mean - 5.0).abs() < 1e-9);
    }

    #[test]
    fn batch_norm_train_moments() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (n, c, inner) = (8, 3, 5);
        let xd: Vec<f64> = (0..n * c * inner).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![n, c, inner], xd).unwrap(), false);
        let gamma = tape.constant(Tensor::filled(vec![c], 1.0));
        let beta = tape.constant(Tensor::filled(vec![c], 0.0));
        let stats = BnStats::new(c);
        let y = tape.batch_norm(x, gamma, beta, &stats, Mode::Train, "bn").unwrap();
        let yd = tape.value(y).data();
        for ch in 0..c {
            let mut vals = Vec::new();
            for ni in 0..n {
                vals.extend_from_slice(&yd[(ni * c + ch) * inner..(ni * c + ch + 1) * inner]);
            }
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-3, "mean {m}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn batch_size_one_falls_back_to_running_stats() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::from_vec(vec![1, 1], vec![3.0]).unwrap(), false);
        let gamma = tape.constant(Tensor::filled(vec![1], 1.0));
        let beta = tape.constant(Tensor::filled(vec![1], 0.0));
        let stats = BnStats {
            mean: vec![1.0],
            var: vec![4.0],
        };
        let y = tape.batch_norm(x, gamma, beta, &stats, Mode::Train, "bn").unwrap();
        // (3-1)/sqrt(4+eps) ≈ 1
        assert!((tape.value(y).item() - 1.0).abs() < 1e-5);
        assert!(tape.bn_updates().is_empty());
    }

    #[test]
    fn l2_normalize_errors_on_near_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1, 2], vec![0.0, 0.0]).unwrap(), false);
        assert!(matches!(tape.l2_normalize(x), Err(Error::DegenerateInput(_))));
    }
}
