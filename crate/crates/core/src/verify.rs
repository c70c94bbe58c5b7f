//! Finite-difference verification suites, shared by the `gradcheck` CLI
//! subcommand, the unit tests and the acceptance suite. Everything runs in
//! the f64 verification mode.

use crate::encoder::net::{BlockSpec, Encoder, EncoderConfig, EncoderVariant, StemCfg};
use crate::encoder::paa::{paa_block, PaaBlockConfig};
use crate::encoder::TapeCtx;
use crate::error::Result;
use crate::loss::{self, IclAnchorInput};
use crate::tensor::gradcheck::{finite_diff_check, DEFAULT_STEP};
use crate::tensor::{Mode, Tape, Tensor, ValId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
}

fn rt(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
        data.extend(row.iter().map(|v| v / norm));
    }
    Tensor::from_vec(vec![n, d], data).unwrap()
}

/// Reduce any output to a scalar through a fixed random weighting, so no
/// gradient component cancels by symmetry.
fn weighted_sum(tape: &mut Tape<f64>, out: ValId, rng: &mut ChaCha8Rng) -> Result<ValId> {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(rt(rng, shape));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum_all(prod))
}

/// Every differentiable tape primitive on ≥ 3 random shapes.
pub fn primitives_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let mut push = |name: &str, err: f64| {
        results.push(CheckResult {
            name: name.to_string(),
            max_rel_err: err,
        })
    };

    // matmul
    let mut err: f64 = 0.0;
    for (m, k, n) in [(2, 3, 4), (3, 4, 2), (5, 2, 3)] {
        let a = rt(&mut rng, vec![m, k]);
        let b = rt(&mut rng, vec![k, n]);
        let wr = ChaCha8Rng::seed_from_u64(seed ^ 1);
        err = err.max(finite_diff_check(
            |tape, ids| {
                let y = tape.matmul(ids[0], ids[1])?;
                weighted_sum(tape, y, &mut wr.clone())
            },
            &[a, b],
            DEFAULT_STEP,
        )?);
    }
    push("matmul", err);

    // elementwise add/sub/mul/relu/tanh/scale/add_scalar
    let mut err: f64 = 0.0;
    for shape in [vec![2, 3], vec![4], vec![2, 2, 2]] {
        let a = rt(&mut rng, shape.clone());
        let b = rt(&mut rng, shape.clone());
        let wr = ChaCha8Rng::seed_from_u64(seed ^ 2);
        err = err.max(finite_diff_check(
            |tape, ids| {
                let s = tape.add(ids[0], ids[1])?;
                let d = tape.sub(s, ids[1])?;
                let m = tape.mul(d, ids[1])?;
                let r = tape.relu(m);
                let t = tape.tanh(r);
                let sc = tape.scale(t, 1.3);
                let a2 = tape.add_scalar(sc, 0.2);
                weighted_sum(tape, a2, &mut wr.clone())
            },
            &[a, b],
            DEFAULT_STEP,
        )?);
    }
    push("elementwise", err);

    // conv1d
    let mut err: f64 = 0.0;
    for (b, c, l, co, k, s, p) in [(1, 2, 6, 3, 3, 1, 1), (2, 3, 5, 2, 1, 1, 0), (1, 2, 8, 2, 3, 2, 1)] {
        let x = rt(&mut rng, vec![b, c, l]);
        let w = rt(&mut rng, vec![co, c, k]);
        let wr = ChaCha8Rng::seed_from_u64(seed ^ 3);
        err = err.max(finite_diff_check(
            |tape, ids| {
                let y = tape.conv1d(ids[0], ids[1], s, p)?;
                weighted_sum(tape, y, &mut wr.clone())
            },
            &[x, w],
            DEFAULT_STEP,
        )?);
    }
    push("conv1d", err);

    // conv2d
    let mut err: f64 = 0.0;
    for (b, c, h, w, co, k, s, p) in [(1, 2, 5, 5, 3, 3, 1, 1), (2, 1, 4, 6, 2, 1, 1, 0), (1, 3, 6, 6, 2, 3, 2, 1)] {
        let x = rt(&mut rng, vec![b, c, h, w]);
        let wt = rt(&mut rng, vec![co, c, k, k]);
        let wr = ChaCha8Rng::seed_from_u64(seed ^ 4);
        err = err.max(finite_diff_check(
            |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], s, p)?;
                weighted_sum(tape, y, &mut wr.clone())
            },
            &[x, wt],
            DEFAULT_STEP,
        )?);
    }
    push("conv2d", err);

    // pooling
    let mut err: f64 = 0.0;
    for (b, c, h, w) in [(1, 2, 4, 4), (2, 1, 6, 6), (1, 3, 4, 6)] {
        let x = rt(&mut rng, vec![b, c, h, w]);
        let wr = ChaCha8Rng::seed_from_u64(seed ^ 5);
        err = err.max(finite_diff_check(
            |tape, ids| {
                let a = tape.avg_pool2d(ids[0], 2, 2)?;
                let m = tape.max_pool2d(ids[0], 2, 2, 0)?;
                let s = tape.add(a, m)?;
                let g = tape.global_avg_pool(s)?;
                let mut wr2 = wr.clone();
                weighted_sum(tape, g, &mut wr2)
            },
            &[x],
            DEFAULT_STEP,
        )?);
    }
    push("pooling", err);

    // batch norm, train and eval modes
    let mut err: f64 = 0.0;
    for (n, c, inner) in [(4, 2, 3), (3, 3, 2), (6, 1, 4)] {
        let x = rt(&mut rng, vec![n, c, inner]);
        let gamma = rt(&mut rng, vec![c]);
        let beta = rt(&mut rng, vec![c]);
        for mode in [Mode::Train, Mode::Eval] {
            let stats = crate::tensor::tape::BnStats {
                mean: (0..c).map(|i| 0.1 * i as f64).collect(),
                var: (0..c).map(|i| 0.5 + 0.2 * i as f64).collect(),
            };
            let wr = ChaCha8Rng::seed_from_u64(seed ^ 6);
            err = err.max(finite_diff_check(
                |tape, ids| {
                    let y = tape.batch_norm(ids[0], ids[1], ids[2], &stats, mode, "bn")?;
                    weighted_sum(tape, y, &mut wr.clone())
                },
                &[x.clone(), gamma.clone(), beta.clone()],
                DEFAULT_STEP,
            )?);
        }
    }
    push("batch_norm", err);

    // softmax + l2 normalize
    let mut err: f64 = 0.0;
    for shape in [vec![3, 4], vec![2, 3, 3], vec![5, 2]] {
        let x = rt(&mut rng, shape.clone());
        let axis = shape.len() - 1;
        let wr = ChaCha8Rng::seed_from_u64(seed ^ 7);
        err = err.max(finite_diff_check(
            |tape, ids| {
                let s = tape.softmax(ids[0], axis)?;
                let l = tape.l2_normalize(s)?;
                weighted_sum(tape, l, &mut wr.clone())
            },
            &[x],
            DEFAULT_STEP,
        )?);
    }
    push("softmax_l2norm", err);

    // layout ops (reshape, permute, concat, add_bias, gathers, row ops, lse)
    let mut err: f64 = 0.0;
    for case in 0..3 {
        let n = 3 + case;
        let x = rt(&mut rng, vec![n, 4]);
        let y = rt(&mut rng, vec![n, 2]);
        let bias = rt(&mut rng, vec![6]);
        let c = rt(&mut rng, vec![n]);
        let targets: Vec<usize> = (0..n).map(|i| i % 6).collect();
        err = err.max(finite_diff_check(
            |tape, ids| {
                let cat = tape.concat(ids[0], ids[1], 1)?; // [n,6]
                let cat = tape.add_bias(cat, ids[2])?;
                let pm = tape.permute(cat, vec![1, 0])?;
                let back = tape.permute(pm, vec![1, 0])?;
                let rs = tape.reshape(back, vec![n, 6])?;
                let picked = tape.gather_cols(rs, targets.clone())?;
                let rows = tape.gather_rows(rs, vec![0, n - 1])?;
                let rd = tape.row_dot(rows, rows)?;
                let mc = tape.mul_col(rs, ids[3])?;
                let lse = tape.lse_rows(mc, None)?;
                let s1 = tape.sum_all(picked);
                let s2 = tape.sum_all(rd);
                let s3 = tape.sum_all(lse);
                let mut acc = tape.add(s1, s2)?;
                acc = tape.add(acc, s3)?;
                Ok(acc)
            },
            &[x, y, bias, c],
            DEFAULT_STEP,
        )?);
    }
    push("layout_gather", err);

    // bmm_vec + mul_row + cross entropy (masked)
    let mut err: f64 = 0.0;
    for case in 0..3 {
        let n = 2 + case;
        let j = 3;
        let d = 4;
        let z = rt(&mut rng, vec![n, j, d]);
        let v = rt(&mut rng, vec![n, d]);
        let r = rt(&mut rng, vec![j]);
        let targets: Vec<usize> = (0..n).map(|i| i % j).collect();
        let mut mask = vec![1u8; n * j];
        mask[j - 1] = 0; // one masked negative in row 0
        if targets[0] == j - 1 {
            mask[j - 1] = 1;
        }
        err = err.max(finite_diff_check(
            |tape, ids| {
                let s1 = tape.bmm_vec(ids[0], ids[1])?;
                let s1 = tape.mul_row(s1, ids[2])?;
                tape.cross_entropy_rows(s1, targets.clone(), Some(mask.clone()))
            },
            &[z, v, r],
            DEFAULT_STEP,
        )?);
    }
    push("bmm_ce", err);

    // attention primitives
    let mut err: f64 = 0.0;
    for (n, heads, d, l) in [(2, 2, 2, 3), (1, 1, 3, 4), (2, 2, 1, 5)] {
        let q = rt(&mut rng, vec![n, heads, d, l]);
        let k = rt(&mut rng, vec![n, heads, d, l]);
        let v = rt(&mut rng, vec![n, heads, d, l]);
        let rq = rt(&mut rng, vec![d, 2 * l - 1]);
        let rk = rt(&mut rng, vec![d, 2 * l - 1]);
        let rv = rt(&mut rng, vec![d, 2 * l - 1]);
        let wr = ChaCha8Rng::seed_from_u64(seed ^ 9);
        err = err.max(finite_diff_check(
            |tape, ids| {
                let logits = tape.attn_logits(ids[0], ids[1], ids[3], ids[4])?;
                let attn = tape.softmax(logits, 3)?;
                let out = tape.attn_apply(attn, ids[2], ids[5])?;
                weighted_sum(tape, out, &mut wr.clone())
            },
            &[q, k, v, rq, rk, rv],
            DEFAULT_STEP,
        )?);
    }
    push("axial_attention", err);

    Ok(results)
}

/// Every loss on ≥ `configs` random configurations, f64 mode.
pub fn losses_suite(seed: u64, configs: usize) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();

    // InfoNCE (Eq. 1)
    let mut err: f64 = 0.0;
    for case in 0..configs {
        let n = 2 + case % 3;
        let r = 3 + case % 4;
        let v = unit_rows(&mut rng, n, 6);
        let pos = unit_rows(&mut rng, n, 6);
        let negs = unit_rows(&mut rng, r, 6);
        let tau = 0.2 + 0.3 * (case as f64 % 3.0);
        err = err.max(finite_diff_check(
            |tape, ids| {
                let negs_id = tape.constant(negs.clone());
                loss::infonce_loss(tape, ids[0], ids[1], negs_id, tau)
            },
            &[v, pos],
            DEFAULT_STEP,
        )?);
    }
    results.push(CheckResult {
        name: "infonce_loss".into(),
        max_rel_err: err,
    });

    // Pixel mapping (Eq. 2)
    let mut err: f64 = 0.0;
    for case in 0..configs {
        let b = 2 + case % 4;
        let vt = unit_rows(&mut rng, b, 8);
        let vs = unit_rows(&mut rng, b, 8);
        let tau = 0.1 + 0.2 * (case as f64 % 4.0);
        err = err.max(finite_diff_check(
            |tape, ids| loss::pm_loss(tape, ids[0], ids[1], tau),
            &[vt, vs],
            DEFAULT_STEP,
        )?);
    }
    results.push(CheckResult {
        name: "pm_loss".into(),
        max_rel_err: err,
    });

    // Prototype-wise contrastive estimation (Eq. 4), both denominator forms
    let mut err: f64 = 0.0;
    for case in 0..configs {
        let n = 2 + case % 3;
        let m = 3 + case % 3;
        let v = unit_rows(&mut rng, n, 6);
        let protos = unit_rows(&mut rng, m, 6);
        let gammas: Vec<f64> = (0..m).map(|_| rng.gen_range(0.2..1.5)).collect();
        let assignments: Vec<usize> = (0..n).map(|_| rng.gen_range(0..m)).collect();
        let include_positive = case % 2 == 0;
        let negatives = if case % 3 == 0 { 2 } else { m };
        let pseed = seed ^ (1000 + case as u64);
        err = err.max(finite_diff_check(
            |tape, ids| {
                let mut prng = ChaCha8Rng::seed_from_u64(pseed);
                loss::pce_loss(
                    tape,
                    ids[0],
                    &assignments,
                    &protos,
                    &gammas,
                    negatives,
                    include_positive,
                    &mut prng,
                )
            },
            &[v],
            DEFAULT_STEP,
        )?);
    }
    results.push(CheckResult {
        name: "pce_loss".into(),
        max_rel_err: err,
    });

    // Instance-wise contrastive loss (Eq. 7)
    let mut err: f64 = 0.0;
    for case in 0..configs {
        let n = 3 + case % 2;
        let d = 6;
        let v = unit_rows(&mut rng, n, d);
        let anchors: Vec<Option<IclAnchorInput<f64>>> = (0..n)
            .map(|i| {
                if i == 0 && case % 2 == 0 {
                    return None; // exercise the skip path
                }
                let members = 1 + rng.gen_range(0..4usize);
                let q: Vec<Vec<f64>> = (0..members)
                    .map(|_| unit_rows(&mut rng, 1, d).into_data())
                    .collect();
                Some(IclAnchorInput {
                    positive: q.len() - 1,
                    members: q,
                    prototype: unit_rows(&mut rng, 1, d).into_data(),
                    phi: rng.gen_range(0.3..1.5),
                })
            })
            .collect();
        err = err.max(finite_diff_check(
            |tape, ids| {
                let (l, _) = loss::icl_loss(tape, ids[0], &anchors)?;
                Ok(l.expect("at least one active anchor"))
            },
            &[v],
            DEFAULT_STEP,
        )?);
    }
    results.push(CheckResult {
        name: "icl_loss".into(),
        max_rel_err: err,
    });

    // Weighted total (Eq. 8): pm + λ₁·pce + λ₂·icl on shared anchors
    let mut err: f64 = 0.0;
    for case in 0..configs {
        let n = 2 + case % 3;
        let d = 6;
        let vt = unit_rows(&mut rng, n, d);
        let vs = unit_rows(&mut rng, n, d);
        let m = 3;
        let protos = unit_rows(&mut rng, m, d);
        let gammas: Vec<f64> = (0..m).map(|_| rng.gen_range(0.3..1.2)).collect();
        let assignments: Vec<usize> = (0..n).map(|_| rng.gen_range(0..m)).collect();
        let anchors: Vec<Option<IclAnchorInput<f64>>> = (0..n)
            .map(|_| {
                let members = 1 + rng.gen_range(0..3usize);
                let q: Vec<Vec<f64>> = (0..members)
                    .map(|_| unit_rows(&mut rng, 1, d).into_data())
                    .collect();
                Some(IclAnchorInput {
                    positive: q.len() - 1,
                    members: q,
                    prototype: unit_rows(&mut rng, 1, d).into_data(),
                    phi: rng.gen_range(0.3..1.5),
                })
            })
            .collect();
        let (l1, l2) = (rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0));
        let pseed = seed ^ (2000 + case as u64);
        err = err.max(finite_diff_check(
            |tape, ids| {
                let pm = loss::pm_loss(tape, ids[0], ids[1], 0.3)?;
                let mut prng = ChaCha8Rng::seed_from_u64(pseed);
                let pce = loss::pce_loss(tape, ids[0], &assignments, &protos, &gammas, m, true, &mut prng)?;
                let (icl, _) = loss::icl_loss(tape, ids[0], &anchors)?;
                loss::total_loss(tape, pm, Some(pce), icl, l1, l2)
            },
            &[vt, vs],
            DEFAULT_STEP,
        )?);
    }
    results.push(CheckResult {
        name: "total_loss".into(),
        max_rel_err: err,
    });

    Ok(results)
}

fn tiny_block_encoder(
    rng_seed: u64,
    in_ch: usize,
    bneck: usize,
    stride: usize,
    h: usize,
    w: usize,
    heads: usize,
) -> Encoder<f64> {
    let cfg = EncoderConfig {
        variant: EncoderVariant::Xs,
        input_size: h,
        heads,
        stem: StemCfg {
            k: 3,
            out: in_ch,
            stride: 1,
            maxpool: false,
        },
        stages: vec![vec![BlockSpec {
            cfg: PaaBlockConfig {
                in_channels: in_ch,
                bottleneck_channels: bneck,
                out_channels: 4 * bneck,
                stride,
                height: h,
                width: w,
            },
            paa: true,
        }]],
        paa_blocks: 1,
    };
    Encoder::from_config(cfg, rng_seed)
}

/// The PAA block on ≥ `configs` random geometries: gradients of a weighted
/// output sum w.r.t. the input, attention projections, positional values,
/// the mixing convolution and a batch-norm scale.
pub fn paa_suite(seed: u64, configs: usize) -> Result<Vec<CheckResult>> {
    let geometries = [
        (4usize, 2usize, 1usize, 3usize, 4usize, 2usize),
        (4, 2, 2, 4, 4, 2),
        (8, 2, 1, 4, 3, 2),
        (4, 4, 1, 3, 3, 4),
        (6, 2, 2, 4, 6, 1),
        (4, 2, 1, 5, 3, 1),
    ];
    let mut err: f64 = 0.0;
    for case in 0..configs.max(5) {
        let (in_ch, bneck, stride, h, w, heads) = geometries[case % geometries.len()];
        let enc = tiny_block_encoder(seed ^ case as u64, in_ch, bneck, stride, h, w, heads);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (100 + case as u64));
        let x = rt(&mut rng, vec![2, in_ch, h, w]);
        let probe_names = [
            "stage0.block0.h_attn.wq",
            "stage0.block0.w_attn.rv",
            "stage0.block0.mix.w",
            "stage0.block0.reduce.bn.gamma",
        ];
        let mut inputs = vec![x];
        for name in probe_names {
            inputs.push(enc.store.get(name).clone());
        }
        let wseed = seed ^ (200 + case as u64);
        err = err.max(finite_diff_check(
            |tape, ids| {
                let mut ctx = TapeCtx::new(tape, false);
                for (k, name) in probe_names.iter().enumerate() {
                    ctx.intern(name, ids[k + 1]);
                }
                let view = enc.block_view(0, 0);
                let out = paa_block(&mut ctx, &ids[0], &view, Mode::Train)?;
                let mut wr = ChaCha8Rng::seed_from_u64(wseed);
                weighted_sum(tape, out, &mut wr)
            },
            &inputs,
            DEFAULT_STEP,
        )?);
    }
    Ok(vec![CheckResult {
        name: "paa_block".into(),
        max_rel_err: err,
    }])
}

/// Composite check: the full encoder feeding the pixel-mapping loss,
/// differentiated back to the input pixels.
pub fn composite_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let enc: Encoder<f64> = Encoder::new(EncoderVariant::Xs, 8, None, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 42);
    let x = Tensor::from_vec(
        vec![4, 3, 8, 8],
        (0..4 * 3 * 64).map(|_| rng.gen_range(0.05..0.95)).collect(),
    )
    .unwrap();
    let err = finite_diff_check(
        |tape, ids| {
            let mut ctx = TapeCtx::new(tape, false);
            let vt = enc.forward_val(&mut ctx, &ids[0], Mode::Train)?;
            let vs = enc.forward_val(&mut ctx, &ids[0], Mode::Train)?;
            loss::pm_loss(ctx.tape, vt, vs, 0.5)
        },
        &[x],
        DEFAULT_STEP,
    )?;
    Ok(vec![CheckResult {
        name: "encoder_pm_composite".into(),
        max_rel_err: err,
    }])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass_fd_threshold() {
        for r in primitives_suite(11).unwrap() {
            assert!(r.max_rel_err < 1e-4, "{}: {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn losses_pass_fd_threshold() {
        for r in losses_suite(13, 5).unwrap() {
            assert!(r.max_rel_err < 1e-4, "{}: {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn paa_block_passes_fd_threshold() {
        for r in paa_suite(17, 5).unwrap() {
            assert!(r.max_rel_err < 1e-4, "{}: {}", r.name, r.max_rel_err);
        }
    }
}
