//! Slow, loop-by-loop reference for single-axis attention.
//!
//! Used by tests and verification tooling as an independent oracle for the
//! fused attention path. Everything here is computed in f64 with plain
//! nested loops and none of the production kernels.

use super::axial::Axis;
use crate::tensor::tape::{BnStats, EPS_BN};
use crate::tensor::{Mode, Scalar, Tensor};

pub struct NaiveBn<'a, S> {
    pub gamma: &'a Tensor<S>,
    pub beta: &'a Tensor<S>,
    pub stats: &'a BnStats<S>,
}

pub struct NaiveAxialParams<'a, S> {
    pub heads: usize,
    pub wq: &'a Tensor<S>,
    pub wk: &'a Tensor<S>,
    pub wv: &'a Tensor<S>,
    pub rq: &'a Tensor<S>,
    pub rk: &'a Tensor<S>,
    pub rv: &'a Tensor<S>,
    pub bn_logits: NaiveBn<'a, S>,
    pub bn_output: NaiveBn<'a, S>,
}

fn f64s<S: Scalar>(t: &Tensor<S>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64().unwrap()).collect()
}

/// Batch norm over `[n][c][inner]` nested data, channel axis in the middle.
fn naive_bn(
    data: &mut Vec<Vec<Vec<f64>>>,
    gamma: &[f64],
    beta: &[f64],
    stats_mean: &[f64],
    stats_var: &[f64],
    mode: Mode,
) {
    let n = data.len();
    let c = data[0].len();
    let inner = data[0][0].len();
    for ch in 0..c {
        let (mean, var) = if mode == Mode::Train && n * inner > 1 {
            let mut sum = 0.0;
            for row in data.iter() {
                for &v in &row[ch] {
                    sum += v;
                }
            }
            let mean = sum / (n * inner) as f64;
            let mut sq = 0.0;
            for row in data.iter() {
                for &v in &row[ch] {
                    sq += (v - mean) * (v - mean);
                }
            }
            (mean, sq / (n * inner) as f64)
        } else {
            (stats_mean[ch], stats_var[ch])
        };
        let invstd = 1.0 / (var + EPS_BN).sqrt();
        for row in data.iter_mut() {
            for v in row[ch].iter_mut() {
                *v = gamma[ch] * (*v - mean) * invstd + beta[ch];
            }
        }
    }
}

/// O(L²) reference for [`super::axial::axial_attention_1d`].
pub fn naive_axial_attention<S: Scalar>(
    x: &Tensor<S>,
    axis: Axis,
    p: &NaiveAxialParams<'_, S>,
    mode: Mode,
) -> Tensor<S> {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let l = match axis {
        Axis::Height => h,
        Axis::Width => w,
    };
    let n_lines = match axis {
        Axis::Height => b * w,
        Axis::Width => b * h,
    };
    let heads = p.heads;
    let hd = c / heads;
    let xd = f64s(x);
    let wq = f64s(p.wq);
    let wk = f64s(p.wk);
    let wv = f64s(p.wv);
    let rq = f64s(p.rq);
    let rk = f64s(p.rk);
    let rv = f64s(p.rv);

    // image index helpers (row-major [B,C,H,W])
    let at = |bi: usize, ci: usize, hi: usize, wi: usize| xd[((bi * c + ci) * h + hi) * w + wi];
    let line_pixel = |line: usize, ci: usize, pos: usize| -> f64 {
        match axis {
            Axis::Height => at(line / w, ci, pos, line % w),
            Axis::Width => at(line / h, ci, line % h, pos),
        }
    };

    // projections per line: q[c][pos] = Σ_c' wq[c][c'] x[c'][pos]
    let project = |wmat: &[f64], line: usize| -> Vec<Vec<f64>> {
        (0..c)
            .map(|co| {
                (0..l)
                    .map(|pos| {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            acc += wmat[co * c + ci] * line_pixel(line, ci, pos);
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    };

    let mut qs = Vec::with_capacity(n_lines);
    let mut ks = Vec::with_capacity(n_lines);
    let mut vs = Vec::with_capacity(n_lines);
    for line in 0..n_lines {
        qs.push(project(&wq, line));
        ks.push(project(&wk, line));
        vs.push(project(&wv, line));
    }

    // logits[line][head][i*l + j]
    let mut logits: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; l * l]; heads]; n_lines];
    for line in 0..n_lines {
        for head in 0..heads {
            for i in 0..l {
                for j in 0..l {
                    let off = l - 1 + j - i;
                    let mut acc = 0.0;
                    for d in 0..hd {
                        let ch = head * hd + d;
                        acc += qs[line][ch][i] * ks[line][ch][j];
                        acc += qs[line][ch][i] * rq[d * (2 * l - 1) + off];
                        acc += ks[line][ch][j] * rk[d * (2 * l - 1) + off];
                    }
                    logits[line][head][i * l + j] = acc;
                }
            }
        }
    }
    naive_bn(
        &mut logits,
        &f64s(p.bn_logits.gamma),
        &f64s(p.bn_logits.beta),
        &p.bn_logits.stats.mean.iter().map(|v| v.to_f64().unwrap()).collect::<Vec<_>>(),
        &p.bn_logits.stats.var.iter().map(|v| v.to_f64().unwrap()).collect::<Vec<_>>(),
        mode,
    );

    // softmax over j and weighted aggregation
    let mut out: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; l]; c]; n_lines];
    for line in 0..n_lines {
        for head in 0..heads {
            for i in 0..l {
                let row = &logits[line][head][i * l..(i + 1) * l];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for d in 0..hd {
                    let ch = head * hd + d;
                    let mut acc = 0.0;
                    for j in 0..l {
                        let attn = exps[j] / denom;
                        acc += attn * (vs[line][ch][j] + rv[d * (2 * l - 1) + (l - 1 + j - i)]);
                    }
                    out[line][ch][i] = acc;
                }
            }
        }
    }
    naive_bn(
        &mut out,
        &f64s(p.bn_output.gamma),
        &f64s(p.bn_output.beta),
        &p.bn_output.stats.mean.iter().map(|v| v.to_f64().unwrap()).collect::<Vec<_>>(),
        &p.bn_output.stats.var.iter().map(|v| v.to_f64().unwrap()).collect::<Vec<_>>(),
        mode,
    );

    // write back into [B,C,H,W]
    let mut y = vec![0.0f64; b * c * h * w];
    for line in 0..n_lines {
        for ci in 0..c {
            for pos in 0..l {
                let (bi, hi, wi) = match axis {
                    Axis::Height => (line / w, pos, line % w),
                    Axis::Width => (line / h, line % h, pos),
                };
                y[((bi * c + ci) * h + hi) * w + wi] = out[line][ci][pos];
            }
        }
    }
    Tensor::from_vec(
        s.to_vec(),
        y.into_iter().map(|v| S::from_f64(v).unwrap()).collect(),
    )
    .unwrap()
}
