//! Gradient-based adversarial attacks: FGSM, PGD, BIM, DeepFool, CW (L2,
//! tanh space) and JSMA.
//!
//! Attacks are written against [`DiffModel`] — any differentiable
//! classifier. The production target is [`AttackModel`], a linear probe on
//! frozen encoder embeddings, differentiated through the encoder in eval
//! mode. L∞ attacks guarantee ‖x′−x‖_∞ ≤ ε and x′ ∈ [0,1]; sign(0) is 0.

use crate::encoder::{Ctx, Encoder, TapeCtx};
use crate::error::{Error, Result};
use crate::tensor::{sc, Mode, Scalar, Tape, Tensor, ValId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Attack algorithm plus parameters (published defaults via
/// [`AttackSpec::table1`]).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "algorithm", rename_all = "lowercase")]
pub enum AttackSpec {
    Fgsm {
        epsilon: f64,
    },
    Pgd {
        epsilon: f64,
        alpha: f64,
        steps: usize,
        #[serde(default)]
        random_start: bool,
    },
    Bim {
        epsilon: f64,
        alpha: f64,
        steps: usize,
    },
    Deepfool {
        steps: usize,
        #[serde(default = "default_overshoot")]
        overshoot: f64,
    },
    Cw {
        c: f64,
        kappa: f64,
        steps: usize,
        lr: f64,
    },
    Jsma {
        gamma: f64,
    },
}

fn default_overshoot() -> f64 {
    0.02
}

impl AttackSpec {
    /// The six implemented attacks at their published parameters. The CW
    /// constant has no published value and is configurable.
    pub fn table1(cw_c: f64) -> Vec<AttackSpec> {
        vec![
            AttackSpec::Fgsm { epsilon: 0.008 },
            AttackSpec::Pgd {
                epsilon: 0.01,
                alpha: 0.02,
                steps: 40,
                random_start: false,
            },
            AttackSpec::Bim {
                epsilon: 0.03,
                alpha: 0.01,
                steps: 10,
            },
            AttackSpec::Deepfool {
                steps: 20,
                overshoot: 0.02,
            },
            AttackSpec::Cw {
                c: cw_c,
                kappa: 2.0,
                steps: 500,
                lr: 0.01,
            },
            AttackSpec::Jsma { gamma: 0.02 },
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::Fgsm { .. } => "fgsm",
            AttackSpec::Pgd { .. } => "pgd",
            AttackSpec::Bim { .. } => "bim",
            AttackSpec::Deepfool { .. } => "deepfool",
            AttackSpec::Cw { .. } => "cw",
            AttackSpec::Jsma { .. } => "jsma",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            AttackSpec::Fgsm { epsilon } => epsilon >= 0.0,
            AttackSpec::Pgd {
                epsilon,
                alpha,
                steps,
                ..
            } => epsilon >= 0.0 && alpha >= 0.0 && steps >= 1,
            AttackSpec::Bim { epsilon, alpha, steps } => epsilon >= 0.0 && alpha >= 0.0 && steps >= 1,
            AttackSpec::Deepfool { steps, overshoot } => steps >= 1 && overshoot >= 0.0,
            AttackSpec::Cw { steps, lr, .. } => steps >= 1 && lr > 0.0,
            AttackSpec::Jsma { gamma } => gamma > 0.0 && gamma <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid attack parameters: {self:?}")))
        }
    }
}

/// A differentiable classifier an attack can query.
pub trait DiffModel<S: Scalar> {
    /// Class logits, no gradients.
    fn logits_eval(&self, x: &Tensor<S>) -> Result<Tensor<S>>;

    /// Cross-entropy over the batch and its gradient w.r.t. the input.
    fn ce_grad(&self, x: &Tensor<S>, labels: &[usize]) -> Result<(S, Tensor<S>)>;

    /// Per-class input gradients: for class c, ∇ₓ Σ_batch logit_c.
    fn class_grads(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Vec<Tensor<S>>)>;

    /// Per-image margins mᵢ = z_true − max_other + κ and the input gradient
    /// of Σᵢ relu(mᵢ).
    fn margin_grad(&self, x: &Tensor<S>, labels: &[usize], kappa: S) -> Result<(Vec<S>, Tensor<S>)>;

    fn predict(&self, x: &Tensor<S>) -> Result<Vec<usize>> {
        let logits = self.logits_eval(x)?;
        let c = logits.shape()[1];
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| {
                let mut best = 0usize;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

/// Linear classification head over embeddings — the attack target.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeHead<S> {
    pub w: Tensor<S>, // [EMBED_DIM, classes]
    pub b: Tensor<S>, // [classes]
}

impl<S: Scalar> ProbeHead<S> {
    pub fn classes(&self) -> usize {
        self.b.numel()
    }

    /// Multinomial logistic regression on frozen embeddings, full-batch
    /// gradient descent, deterministic given the seed.
    pub fn train(
        embeddings: &Tensor<S>,
        labels: &[usize],
        classes: usize,
        seed: u64,
        epochs: usize,
        lr: S,
    ) -> Result<Self> {
        let d = *embeddings.shape().last().unwrap();
        let n = embeddings.numel() / d;
        if labels.len() != n || classes < 2 {
            return Err(Error::Contract("probe training: labels/classes mismatch".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Tensor::from_vec(
            vec![d, classes],
            (0..d * classes).map(|_| sc::<S>(rng.gen_range(-0.01..0.01))).collect(),
        )?;
        let mut b = Tensor::zeros(vec![classes]);
        for _ in 0..epochs {
            let mut tape = Tape::new();
            let v = tape.constant(embeddings.clone());
            let wid = tape.leaf(w.clone(), true);
            let bid = tape.leaf(b.clone(), true);
            let logits = tape.matmul(v, wid)?;
            let logits = tape.add_bias(logits, bid)?;
            let loss = tape.cross_entropy_rows(logits, labels.to_vec(), None)?;
            tape.backward(loss)?;
            let gw = tape.grad(wid).unwrap().to_vec();
            let gb = tape.grad(bid).unwrap().to_vec();
            for (p, g) in w.data_mut().iter_mut().zip(gw) {
                *p = *p - lr * g;
            }
            for (p, g) in b.data_mut().iter_mut().zip(gb) {
                *p = *p - lr * g;
            }
        }
        Ok(ProbeHead { w, b })
    }

    pub fn logits(&self, embeddings: &Tensor<S>) -> Result<Tensor<S>> {
        let d = *embeddings.shape().last().unwrap();
        let n = embeddings.numel() / d;
        let c = self.classes();
        let mut out = Vec::with_capacity(n * c);
        for r in 0..n {
            let row = &embeddings.data()[r * d..(r + 1) * d];
            for ci in 0..c {
                let mut acc = self.b.data()[ci];
                for (i, &v) in row.iter().enumerate() {
                    acc = acc + v * self.w.data()[i * c + ci];
                }
                out.push(acc);
            }
        }
        Tensor::from_vec(vec![n, c], out)
    }

    pub fn predict(&self, embeddings: &Tensor<S>) -> Result<Vec<usize>> {
        let logits = self.logits(embeddings)?;
        let c = self.classes();
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| {
                let mut best = 0usize;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

/// Probe∘encoder pair; the probe and encoder are read-only during attacks.
pub struct AttackModel<'a, S: Scalar> {
    pub encoder: &'a Encoder<S>,
    pub probe: &'a ProbeHead<S>,
}

impl<'a, S: Scalar> AttackModel<'a, S> {
    pub fn new(encoder: &'a Encoder<S>, probe: &'a ProbeHead<S>) -> Self {
        AttackModel { encoder, probe }
    }

    /// Record input → logits on a fresh tape (eval mode, input tracked).
    fn record_logits(&self, x: &Tensor<S>) -> Result<(Tape<S>, ValId, ValId)> {
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone(), true);
        let mut ctx = TapeCtx::new(&mut tape, false);
        let v = self.encoder.forward_val(&mut ctx, &xid, Mode::Eval)?;
        let w = ctx.param("probe.w", &self.probe.w);
        let b = ctx.param("probe.b", &self.probe.b);
        let logits = ctx.matmul(&v, &w)?;
        let logits = ctx.add_bias(&logits, &b)?;
        Ok((tape, xid, logits))
    }
}

impl<S: Scalar> DiffModel<S> for AttackModel<'_, S> {
    fn logits_eval(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let v = self.encoder.embed_eval(x, false)?;
        self.probe.logits(&v)
    }

    fn ce_grad(&self, x: &Tensor<S>, labels: &[usize]) -> Result<(S, Tensor<S>)> {
        let (mut tape, xid, logits) = self.record_logits(x)?;
        let loss = tape.cross_entropy_rows(logits, labels.to_vec(), None)?;
        tape.backward(loss)?;
        let g = tape.grad(xid).expect("input gradient").to_vec();
        Ok((
            tape.value(loss).item(),
            Tensor::from_vec(x.shape().to_vec(), g)?,
        ))
    }

    fn class_grads(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Vec<Tensor<S>>)> {
        let (mut tape, xid, logits) = self.record_logits(x)?;
        let n = tape.shape(logits)[0];
        let classes = tape.shape(logits)[1];
        let logit_values = tape.value(logits).clone();
        let mut grads = Vec::with_capacity(classes);
        for c in 0..classes {
            let picked = tape.gather_cols(logits, vec![c; n])?;
            let scalar = tape.sum_all(picked);
            tape.backward(scalar)?;
            grads.push(Tensor::from_vec(
                x.shape().to_vec(),
                tape.grad(xid).expect("input gradient").to_vec(),
            )?);
        }
        Ok((logit_values, grads))
    }

    fn margin_grad(&self, x: &Tensor<S>, labels: &[usize], kappa: S) -> Result<(Vec<S>, Tensor<S>)> {
        let (mut tape, xid, logits) = self.record_logits(x)?;
        let true_logit = tape.gather_cols(logits, labels.to_vec())?;
        let other_max = tape.max_exclude_cols(logits, labels.to_vec())?;
        let margin = tape.sub(true_logit, other_max)?;
        let margin = tape.add_scalar(margin, kappa);
        let margins = tape.value(margin).data().to_vec();
        let hinge = tape.relu(margin);
        let total = tape.sum_all(hinge);
        tape.backward(total)?;
        let g = tape.grad(xid).expect("input gradient").to_vec();
        Ok((margins, Tensor::from_vec(x.shape().to_vec(), g)?))
    }
}

/// Result of attacking one batch.
#[derive(Debug, Clone)]
pub struct AttackResult<S> {
    pub adv: Tensor<S>,
    /// FGSM/PGD/BIM/DeepFool: probe prediction differs from the label.
    /// CW: runner-up margin reached κ. JSMA: target class reached.
    pub success: Vec<bool>,
    /// Attack-specific convergence flag (budget not exhausted).
    pub converged: Vec<bool>,
}

fn sign<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        S::one()
    } else if v < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

fn clip01<S: Scalar>(v: S) -> S {
    if v < S::zero() {
        S::zero()
    } else if v > S::one() {
        S::one()
    } else {
        v
    }
}

fn project_linf<S: Scalar>(adv: &mut [S], orig: &[S], eps: S) {
    for (a, &o) in adv.iter_mut().zip(orig) {
        let lo = o - eps;
        let hi = o + eps;
        if *a < lo {
            *a = lo;
        }
        if *a > hi {
            *a = hi;
        }
        *a = clip01(*a);
    }
}

fn flipped<S: Scalar>(model: &impl DiffModel<S>, adv: &Tensor<S>, labels: &[usize]) -> Result<Vec<bool>> {
    let pred = model.predict(adv)?;
    Ok(pred.iter().zip(labels).map(|(&p, &l)| p != l).collect())
}

/// x′ = clip₀₁(x + ε·sign(∇ₓ CE)).
pub fn fgsm<S: Scalar>(
    model: &impl DiffModel<S>,
    x: &Tensor<S>,
    labels: &[usize],
    epsilon: f64,
) -> Result<AttackResult<S>> {
    let eps = sc::<S>(epsilon);
    let (_, grad) = model.ce_grad(x, labels)?;
    let mut adv = x.clone();
    for (a, &g) in adv.data_mut().iter_mut().zip(grad.data()) {
        *a = clip01(*a + eps * sign(g));
    }
    let success = flipped(model, &adv, labels)?;
    let converged = vec![true; labels.len()];
    Ok(AttackResult { adv, success, converged })
}

/// Iterated signed steps, each followed by projection onto the ε-ball and
/// [0,1] clipping. The optional random start draws uniformly in the ball.
#[allow(clippy::too_many_arguments)]
pub fn pgd<S: Scalar>(
    model: &impl DiffModel<S>,
    x: &Tensor<S>,
    labels: &[usize],
    epsilon: f64,
    alpha: f64,
    steps: usize,
    random_start: bool,
    seed: u64,
) -> Result<AttackResult<S>> {
    let eps = sc::<S>(epsilon);
    let al = sc::<S>(alpha);
    let mut adv = x.clone();
    if random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for a in adv.data_mut() {
            *a = *a + sc::<S>(rng.gen_range(-epsilon..=epsilon));
        }
        project_linf(adv.data_mut(), x.data(), eps);
    }
    for _ in 0..steps {
        let (_, grad) = model.ce_grad(&adv, labels)?;
        for (a, &g) in adv.data_mut().iter_mut().zip(grad.data()) {
            *a = *a + al * sign(g);
        }
        project_linf(adv.data_mut(), x.data(), eps);
    }
    let success = flipped(model, &adv, labels)?;
    let converged = vec![true; labels.len()];
    Ok(AttackResult { adv, success, converged })
}

/// Basic iterative method: PGD without the random start, cumulative clipping
/// after each step.
pub fn bim<S: Scalar>(
    model: &impl DiffModel<S>,
    x: &Tensor<S>,
    labels: &[usize],
    epsilon: f64,
    alpha: f64,
    steps: usize,
) -> Result<AttackResult<S>> {
    pgd(model, x, labels, epsilon, alpha, steps, false, 0)
}

/// Iterative minimal-perturbation to the nearest decision boundary, with
/// final overshoot (1 + η). Inputs already misclassified return unchanged.
pub fn deepfool<S: Scalar>(
    model: &impl DiffModel<S>,
    x: &Tensor<S>,
    labels: &[usize],
    steps: usize,
    overshoot: f64,
) -> Result<AttackResult<S>> {
    let shape = x.shape().to_vec();
    let b = shape[0];
    let per: usize = shape[1..].iter().product();
    let initial = model.predict(x)?;
    let mut active: Vec<bool> = initial.iter().zip(labels).map(|(&p, &l)| p == l).collect();
    let mut r_tot = vec![S::zero(); x.numel()];
    let mut converged: Vec<bool> = active.iter().map(|&a| !a).collect();

    let build_adv = |r_tot: &[S]| -> Tensor<S> {
        let factor = sc::<S>(1.0 + overshoot);
        let data: Vec<S> = x
            .data()
            .iter()
            .zip(r_tot)
            .map(|(&xi, &ri)| xi + factor * ri)
            .collect();
        Tensor::from_vec(shape.clone(), data).unwrap()
    };

    for _ in 0..steps {
        if active.iter().all(|&a| !a) {
            break;
        }
        let adv = build_adv(&r_tot);
        let (logits, grads) = model.class_grads(&adv)?;
        let classes = logits.shape()[1];
        let preds: Vec<usize> = logits
            .data()
            .chunks(classes)
            .map(|row| {
                let mut bi = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[bi] {
                        bi = j;
                    }
                }
                bi
            })
            .collect();
        for i in 0..b {
            if !active[i] {
                continue;
            }
            if preds[i] != labels[i] {
                active[i] = false;
                converged[i] = true;
                continue;
            }
            let cur = labels[i];
            let mut best_ratio = f64::INFINITY;
            let mut best_r: Option<Vec<S>> = None;
            for k in 0..classes {
                if k == cur {
                    continue;
                }
                let fk = (logits.data()[i * classes + k] - logits.data()[i * classes + cur])
                    .to_f64()
                    .unwrap();
                let gk = &grads[k].data()[i * per..(i + 1) * per];
                let gc = &grads[cur].data()[i * per..(i + 1) * per];
                let mut wnorm2 = 0.0f64;
                for (&a, &c) in gk.iter().zip(gc) {
                    let w = (a - c).to_f64().unwrap();
                    wnorm2 += w * w;
                }
                if wnorm2 < 1e-24 {
                    continue;
                }
                let ratio = fk.abs() / wnorm2.sqrt();
                if ratio < best_ratio {
                    best_ratio = ratio;
                    let coef = fk.abs() / wnorm2;
                    best_r = Some(
                        gk.iter()
                            .zip(gc)
                            .map(|(&a, &c)| sc::<S>(coef) * (a - c))
                            .collect(),
                    );
                }
            }
            if let Some(r) = best_r {
                for (t, &rv) in r_tot[i * per..(i + 1) * per].iter_mut().zip(&r) {
                    *t = *t + rv;
                }
            } else {
                active[i] = false; // degenerate gradients, keep best iterate
            }
        }
    }
    // final evaluation at the overshoot point, clipped to the image domain
    let mut adv = build_adv(&r_tot);
    for v in adv.data_mut() {
        *v = clip01(*v);
    }
    let success = flipped(model, &adv, labels)?;
    for i in 0..b {
        if active[i] && success[i] {
            converged[i] = true;
        }
    }
    Ok(AttackResult { adv, success, converged })
}

/// Carlini–Wagner L2 in tanh space with Adam, tracking the best (smallest
/// ‖δ‖₂) iterate whose runner-up margin reaches κ. Returns the result and
/// the per-step best-‖δ‖₂ trace (non-increasing by construction).
#[allow(clippy::too_many_arguments)]
pub fn cw_l2_with_trace<S: Scalar>(
    model: &impl DiffModel<S>,
    x: &Tensor<S>,
    labels: &[usize],
    c: f64,
    kappa: f64,
    steps: usize,
    lr: f64,
) -> Result<(AttackResult<S>, Vec<Vec<f64>>)> {
    let shape = x.shape().to_vec();
    let b = shape[0];
    let per: usize = shape[1..].iter().product();
    let kap = sc::<S>(kappa);
    let cs = sc::<S>(c);
    let two = sc::<S>(2.0);
    let half = sc::<S>(0.5);

    let mut w: Vec<S> = x
        .data()
        .iter()
        .map(|&v| {
            let clipped = v.to_f64().unwrap().clamp(1e-6, 1.0 - 1e-6);
            sc::<S>((2.0 * clipped - 1.0).atanh())
        })
        .collect();
    let mut adam_m = vec![S::zero(); w.len()];
    let mut adam_v = vec![S::zero(); w.len()];
    let (b1, b2, eps_adam) = (sc::<S>(0.9), sc::<S>(0.999), sc::<S>(1e-8));

    let mut best_adv = x.clone();
    let mut best_l2 = vec![f64::INFINITY; b];
    let mut found = vec![false; b];
    let mut trace: Vec<Vec<f64>> = Vec::with_capacity(steps);

    let to_image = |w: &[S]| -> Tensor<S> {
        Tensor::from_vec(
            shape.clone(),
            w.iter().map(|&wi| (wi.tanh() + S::one()) * half).collect(),
        )
        .unwrap()
    };

    for t in 1..=steps {
        let adv = to_image(&w);
        let (margins, gmargin) = model.margin_grad(&adv, labels, kap)?;

        // best-so-far bookkeeping: margin ≤ 0 means the runner-up leads by κ
        for i in 0..b {
            if margins[i] <= S::zero() {
                let mut l2 = 0.0f64;
                for (a, o) in adv.data()[i * per..(i + 1) * per]
                    .iter()
                    .zip(&x.data()[i * per..(i + 1) * per])
                {
                    let d = (a.to_f64().unwrap()) - (o.to_f64().unwrap());
                    l2 += d * d;
                }
                let l2 = l2.sqrt();
                if l2 < best_l2[i] {
                    best_l2[i] = l2;
                    found[i] = true;
                    best_adv.data_mut()[i * per..(i + 1) * per]
                        .copy_from_slice(&adv.data()[i * per..(i + 1) * per]);
                }
            }
        }
        trace.push(best_l2.clone());

        // ∇_w [ ‖adv−x‖² + c·Σ relu(margin) ], chained through the tanh map
        let step = sc::<S>(lr);
        let bc1 = S::one() - b1.powi(t as i32);
        let bc2 = S::one() - b2.powi(t as i32);
        for idx in 0..w.len() {
            let dx = two * (adv.data()[idx] - x.data()[idx]) + cs * gmargin.data()[idx];
            let th = w[idx].tanh();
            let g = dx * half * (S::one() - th * th);
            adam_m[idx] = b1 * adam_m[idx] + (S::one() - b1) * g;
            adam_v[idx] = b2 * adam_v[idx] + (S::one() - b2) * g * g;
            let mhat = adam_m[idx] / bc1;
            let vhat = adam_v[idx] / bc2;
            w[idx] = w[idx] - step * mhat / (vhat.sqrt() + eps_adam);
        }
    }
    let success = found.clone();
    Ok((
        AttackResult {
            adv: best_adv,
            success,
            converged: found,
        },
        trace,
    ))
}

pub fn cw_l2<S: Scalar>(
    model: &impl DiffModel<S>,
    x: &Tensor<S>,
    labels: &[usize],
    c: f64,
    kappa: f64,
    steps: usize,
    lr: f64,
) -> Result<AttackResult<S>> {
    cw_l2_with_trace(model, x, labels, c, kappa, steps, lr).map(|(r, _)| r)
}

/// Greedy saliency-pair saturation toward a target class. Modifies at most
/// ⌈γ·P⌉ feature values per image (P = channels·H·W).
pub fn jsma<S: Scalar>(
    model: &impl DiffModel<S>,
    x: &Tensor<S>,
    targets: &[usize],
    gamma: f64,
) -> Result<AttackResult<S>> {
    let shape = x.shape().to_vec();
    let b = shape[0];
    let per: usize = shape[1..].iter().product();
    let budget = (gamma * per as f64).ceil() as usize;
    let mut adv = x.clone();
    let mut converged = vec![false; b];

    for i in 0..b {
        let img = Tensor::from_vec(
            vec![1, shape[1], shape[2], shape[3]],
            x.data()[i * per..(i + 1) * per].to_vec(),
        )?;
        let (img_adv, ok) = jsma_single(model, &img, targets[i], budget)?;
        adv.data_mut()[i * per..(i + 1) * per].copy_from_slice(img_adv.data());
        converged[i] = ok;
    }
    let pred = model.predict(&adv)?;
    let success = pred.iter().zip(targets).map(|(&p, &t)| p == t).collect();
    Ok(AttackResult { adv, success, converged })
}

fn jsma_single<S: Scalar>(
    model: &impl DiffModel<S>,
    x: &Tensor<S>,
    target: usize,
    budget: usize,
) -> Result<(Tensor<S>, bool)> {
    let per = x.numel();
    let mut adv = x.clone();
    let mut modified = vec![false; per];
    let mut n_modified = 0usize;

    loop {
        let pred = model.predict(&adv)?[0];
        if pred == target {
            return Ok((adv, true));
        }
        if n_modified + 2 > budget {
            return Ok((adv, false));
        }
        let (_, grads) = model.class_grads(&adv)?;
        let gt = grads[target].data();
        // ∂(Σ_c≠t z_c)/∂x = ∂(Σ_c z_c)/∂x − ∂z_t/∂x
        let mut g_other = vec![S::zero(); per];
        for (c, g) in grads.iter().enumerate() {
            if c == target {
                continue;
            }
            for (o, &v) in g_other.iter_mut().zip(g.data()) {
                *o = *o + v;
            }
        }
        let candidates: Vec<usize> = (0..per)
            .filter(|&p| !modified[p] && adv.data()[p].to_f64().unwrap() < 1.0)
            .collect();
        let mut best: Option<(usize, usize, f64)> = None;
        for (ai, &p) in candidates.iter().enumerate() {
            let ap = gt[p].to_f64().unwrap();
            let bp = g_other[p].to_f64().unwrap();
            for &q in candidates.iter().skip(ai + 1) {
                let alpha = ap + gt[q].to_f64().unwrap();
                let beta = bp + g_other[q].to_f64().unwrap();
                if alpha > 0.0 && beta < 0.0 {
                    let score = -alpha * beta;
                    if best.map_or(true, |(_, _, s)| score > s) {
                        best = Some((p, q, score));
                    }
                }
            }
        }
        match best {
            Some((p, q, _)) => {
                adv.data_mut()[p] = S::one();
                adv.data_mut()[q] = S::one();
                modified[p] = true;
                modified[q] = true;
                n_modified += 2;
            }
            None => return Ok((adv, false)), // no helpful pair remains
        }
    }
}

/// Dispatch an attack spec on a labelled batch. `targets` are only used by
/// JSMA (the caller picks the target-class convention).
pub fn run_attack<S: Scalar>(
    model: &impl DiffModel<S>,
    spec: &AttackSpec,
    x: &Tensor<S>,
    labels: &[usize],
    targets: &[usize],
    seed: u64,
) -> Result<AttackResult<S>> {
    spec.validate()?;
    match *spec {
        AttackSpec::Fgsm { epsilon } => fgsm(model, x, labels, epsilon),
        AttackSpec::Pgd {
            epsilon,
            alpha,
            steps,
            random_start,
        } => pgd(model, x, labels, epsilon, alpha, steps, random_start, seed),
        AttackSpec::Bim { epsilon, alpha, steps } => bim(model, x, labels, epsilon, alpha, steps),
        AttackSpec::Deepfool { steps, overshoot } => deepfool(model, x, labels, steps, overshoot),
        AttackSpec::Cw { c, kappa, steps, lr } => cw_l2(model, x, labels, c, kappa, steps, lr),
        AttackSpec::Jsma { gamma } => jsma(model, x, targets, gamma),
    }
}

/// L∞ and L2 perturbation norms per image.
pub fn perturbation_norms<S: Scalar>(x: &Tensor<S>, adv: &Tensor<S>) -> (Vec<f64>, Vec<f64>) {
    let per: usize = x.shape()[1..].iter().product();
    let b = x.shape()[0];
    let mut linf = Vec::with_capacity(b);
    let mut l2 = Vec::with_capacity(b);
    for i in 0..b {
        let mut mx = 0.0f64;
        let mut sq = 0.0f64;
        for (a, o) in adv.data()[i * per..(i + 1) * per]
            .iter()
            .zip(&x.data()[i * per..(i + 1) * per])
        {
            let d = (a.to_f64().unwrap() - o.to_f64().unwrap()).abs();
            mx = mx.max(d);
            sq += d * d;
        }
        linf.push(mx);
        l2.push(sq.sqrt());
    }
    (linf, l2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kernels;

    /// Exactly linear classifier over flattened pixels: logits = x·W + b.
    struct LinearModel {
        w: Tensor<f64>, // [P, C]
        b: Tensor<f64>, // [C]
    }

    impl LinearModel {
        fn classes(&self) -> usize {
            self.b.numel()
        }
        fn features(&self) -> usize {
            self.w.shape()[0]
        }
    }

    impl DiffModel<f64> for LinearModel {
        fn logits_eval(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
            let p = self.features();
            let n = x.numel() / p;
            let mut y = kernels::matmul(x.data(), self.w.data(), n, p, self.classes());
            for row in y.chunks_mut(self.classes()) {
                for (v, &bv) in row.iter_mut().zip(self.b.data()) {
                    *v += bv;
                }
            }
            Tensor::from_vec(vec![n, self.classes()], y)
        }

        fn ce_grad(&self, x: &Tensor<f64>, labels: &[usize]) -> Result<(f64, Tensor<f64>)> {
            let logits = self.logits_eval(x)?;
            let c = self.classes();
            let n = labels.len();
            let (loss, probs) = kernels::cross_entropy_rows(logits.data(), n, c, labels, None);
            let mut g = kernels::cross_entropy_backward(1.0, &probs, n, c, labels);
            // dx = G · Wᵀ
            let p = self.features();
            let wt = kernels::permute(self.w.data(), &[p, c], &[1, 0]);
            let dx = kernels::matmul(&g, &wt, n, c, p);
            g.clear();
            Ok((loss, Tensor::from_vec(x.shape().to_vec(), dx)?))
        }

        fn class_grads(&self, x: &Tensor<f64>) -> Result<(Tensor<f64>, Vec<Tensor<f64>>)> {
            let logits = self.logits_eval(x)?;
            let p = self.features();
            let c = self.classes();
            let n = x.numel() / p;
            let grads = (0..c)
                .map(|ci| {
                    let col: Vec<f64> = (0..p).map(|i| self.w.data()[i * c + ci]).collect();
                    let mut full = Vec::with_capacity(n * p);
                    for _ in 0..n {
                        full.extend_from_slice(&col);
                    }
                    Tensor::from_vec(x.shape().to_vec(), full).unwrap()
                })
                .collect();
            Ok((logits, grads))
        }

        fn margin_grad(
            &self,
            x: &Tensor<f64>,
            labels: &[usize],
            kappa: f64,
        ) -> Result<(Vec<f64>, Tensor<f64>)> {
            let logits = self.logits_eval(x)?;
            let c = self.classes();
            let p = self.features();
            let n = labels.len();
            let mut margins = Vec::with_capacity(n);
            let mut dx = vec![0.0f64; x.numel()];
            for i in 0..n {
                let row = &logits.data()[i * c..(i + 1) * c];
                let l = labels[i];
                let mut om = f64::NEG_INFINITY;
                let mut oi = 0usize;
                for (j, &v) in row.iter().enumerate() {
                    if j != l && v > om {
                        om = v;
                        oi = j;
                    }
                }
                let m = row[l] - om + kappa;
                margins.push(m);
                if m > 0.0 {
                    for f in 0..p {
                        dx[i * p + f] = self.w.data()[f * c + l] - self.w.data()[f * c + oi];
                    }
                }
            }
            Ok((margins, Tensor::from_vec(x.shape().to_vec(), dx)?))
        }
    }

    fn toy_model(seed: u64, p: usize, c: usize) -> LinearModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LinearModel {
            w: Tensor::from_vec(vec![p, c], (0..p * c).map(|_| rng.gen_range(-0.5..0.5)).collect())
                .unwrap(),
            b: Tensor::from_vec(vec![c], (0..c).map(|_| rng.gen_range(-0.1..0.1)).collect()).unwrap(),
        }
    }

    fn toy_batch(seed: u64, b: usize, side: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            vec![b, 3, side, side],
            (0..b * 3 * side * side).map(|_| rng.gen_range(0.2..0.8)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn fgsm_zero_gradient_and_zero_epsilon_leave_input() {
        let model = LinearModel {
            w: Tensor::zeros(vec![48, 3]),
            b: Tensor::zeros(vec![3]),
        };
        let x = toy_batch(1, 2, 4);
        let r = fgsm(&model, &x, &[0, 1], 0.5).unwrap();
        assert_eq!(r.adv, x); // sign(0) = 0

        let model = toy_model(2, 48, 3);
        let r = fgsm(&model, &x, &[0, 1], 0.0).unwrap();
        assert_eq!(r.adv, x);
    }

    #[test]
    fn fgsm_budget_and_ce_nondecrease() {
        let model = toy_model(3, 48, 4);
        let x = toy_batch(4, 3, 4);
        let labels = [0usize, 1, 2];
        let (ce_before, _) = model.ce_grad(&x, &labels).unwrap();
        let r = fgsm(&model, &x, &labels, 0.008).unwrap();
        let (linf, _) = perturbation_norms(&x, &r.adv);
        assert!(linf.iter().all(|&v| v <= 0.008 + 1e-12));
        assert!(r.adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // CE of a linear probe is convex: the signed ascent step cannot
        // decrease it
        let (ce_after, _) = model.ce_grad(&r.adv, &labels).unwrap();
        assert!(ce_after >= ce_before - 1e-12, "{ce_after} < {ce_before}");
    }

    #[test]
    fn pgd_one_saturating_step_equals_fgsm() {
        let model = toy_model(5, 48, 3);
        let x = toy_batch(6, 2, 4);
        let labels = [1usize, 2];
        let f = fgsm(&model, &x, &labels, 0.01).unwrap();
        let p = pgd(&model, &x, &labels, 0.01, 0.02, 1, false, 0).unwrap();
        assert_eq!(f.adv, p.adv);
    }

    #[test]
    fn pgd_table1_setting_saturates_the_ball() {
        let model = toy_model(7, 48, 3);
        let x = toy_batch(8, 2, 4);
        let labels = [0usize, 1];
        let r = pgd(&model, &x, &labels, 0.01, 0.02, 40, false, 0).unwrap();
        let (linf, _) = perturbation_norms(&x, &r.adv);
        assert!(linf.iter().all(|&v| v <= 0.01 + 1e-12));
        // away from [0,1] walls every perturbed coordinate sits exactly on
        // the ball (α > ε saturates each projection)
        let mut on_ball = 0usize;
        let mut total = 0usize;
        for (a, o) in r.adv.data().iter().zip(x.data()) {
            let d = (a - o).abs();
            total += 1;
            if (d - 0.01).abs() < 1e-9 {
                on_ball += 1;
            } else {
                assert!(d < 1e-9, "coordinate neither saturated nor untouched: {d}");
            }
        }
        assert!(on_ball > total / 2);
    }

    #[test]
    fn bim_budget_is_min_of_ball_and_step_budget() {
        let model = toy_model(9, 48, 3);
        let x = toy_batch(10, 2, 4);
        let labels = [0usize, 1];
        // steps·α = 0.02 < ε = 0.03
        let r = bim(&model, &x, &labels, 0.03, 0.01, 2).unwrap();
        let (linf, _) = perturbation_norms(&x, &r.adv);
        assert!(linf.iter().all(|&v| v <= 0.02 + 1e-12));
        assert!(linf.iter().any(|&v| (v - 0.02).abs() < 1e-9));
        // Table 1: bound = min(0.03, 10·0.01) = 0.03
        let r = bim(&model, &x, &labels, 0.03, 0.01, 10).unwrap();
        let (linf, _) = perturbation_norms(&x, &r.adv);
        assert!(linf.iter().all(|&v| v <= 0.03 + 1e-12));
        assert!(linf.iter().any(|&v| (v - 0.03).abs() < 1e-9));
    }

    #[test]
    fn deepfool_matches_linear_closed_form() {
        // binary linear probe; label 0 currently predicted
        let p = 48usize;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let wdiff: Vec<f64> = (0..p).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let mut w = vec![0.0f64; p * 2];
        for i in 0..p {
            w[i * 2] = 0.0;
            w[i * 2 + 1] = wdiff[i];
        }
        let x = toy_batch(12, 1, 4);
        // bias chosen so the boundary is near: f = z1−z0 = x·wdiff + b1
        let xdot: f64 = x.data().iter().zip(&wdiff).map(|(a, b)| a * b).sum();
        let b1 = -xdot - 0.05; // f(x) = −0.05 < 0, predicted class 0
        let model = LinearModel {
            w: Tensor::from_vec(vec![p, 2], w).unwrap(),
            b: Tensor::from_vec(vec![2], vec![0.0, b1]).unwrap(),
        };
        assert_eq!(model.predict(&x).unwrap(), vec![0]);
        let r = deepfool(&model, &x, &[0], 20, 0.02).unwrap();
        assert!(r.success[0] && r.converged[0]);
        // closed form: r* = |f|/‖w‖² · w, final displacement (1+η)·r*
        let wnorm2: f64 = wdiff.iter().map(|v| v * v).sum();
        let rstar = 0.05 / wnorm2.sqrt();
        let (_, l2) = perturbation_norms(&x, &r.adv);
        let rel = (l2[0] - rstar).abs() / rstar;
        assert!(rel <= 0.02 + 1e-9, "rel {rel}");

        // minimal-perturbation property: not worse than an FGSM flip
        let mut eps_flip = None;
        for k in 1..200 {
            let eps = k as f64 * 0.001;
            let f = fgsm(&model, &x, &[0], eps).unwrap();
            if f.success[0] {
                eps_flip = Some((eps, perturbation_norms(&x, &f.adv).1[0]));
                break;
            }
        }
        let (_, fgsm_l2) = eps_flip.expect("fgsm flips at some epsilon");
        assert!(l2[0] <= fgsm_l2 + 1e-9, "{} > {}", l2[0], fgsm_l2);
    }

    #[test]
    fn deepfool_early_exit_on_misclassified_input() {
        let model = toy_model(13, 48, 3);
        let x = toy_batch(14, 1, 4);
        let pred = model.predict(&x).unwrap()[0];
        let wrong_label = (pred + 1) % 3;
        let r = deepfool(&model, &x, &[wrong_label], 20, 0.02).unwrap();
        assert_eq!(r.adv, x);
        assert!(r.success[0] && r.converged[0]);
    }

    #[test]
    fn cw_trivial_when_already_deep_in_wrong_class() {
        let model = toy_model(15, 48, 3);
        let x = toy_batch(16, 1, 4);
        let pred = model.predict(&x).unwrap()[0];
        let wrong = (pred + 1) % 3;
        // κ=0 and the "true" label already loses by a margin → δ → 0
        let r = cw_l2(&model, &x, &[wrong], 1.0, 0.0, 10, 0.01).unwrap();
        assert!(r.converged[0]);
        let (linf, _) = perturbation_norms(&x, &r.adv);
        assert!(linf[0] < 1e-4, "{}", linf[0]);
    }

    #[test]
    fn cw_success_has_margin_kappa_and_monotone_trace() {
        let model = toy_model(17, 48, 3);
        let x = toy_batch(18, 2, 4);
        let labels = model.predict(&x).unwrap();
        let (r, trace) =
            cw_l2_with_trace(&model, &x, &labels, 5.0, 2.0, 300, 0.01).unwrap();
        assert!(r.converged.iter().all(|&c| c), "cw did not converge");
        let logits = model.logits_eval(&r.adv).unwrap();
        let c = 3;
        for i in 0..2 {
            let row = &logits.data()[i * c..(i + 1) * c];
            let tl = row[labels[i]];
            let om = row
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != labels[i])
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(om - tl >= 2.0 - 1e-6, "margin {}", om - tl);
        }
        // best-so-far ‖δ‖₂ never increases
        for i in 0..2 {
            let mut prev = f64::INFINITY;
            for step in &trace {
                assert!(step[i] <= prev + 1e-12);
                prev = step[i];
            }
        }
    }

    #[test]
    fn jsma_budget_early_exit_and_greedy_oracle() {
        let model = toy_model(19, 48, 4);
        let x = toy_batch(20, 1, 4);
        let pred = model.predict(&x).unwrap()[0];

        // already at the target → zero modifications
        let r = jsma(&model, &x, &[pred], 0.02).unwrap();
        assert_eq!(r.adv, x);
        assert!(r.converged[0]);

        // budget respected: γ=0.1 of 48 values → ⌈4.8⌉ = 5 → at most 4 (pairs)
        let target = (pred + 1) % 4;
        let r = jsma(&model, &x, &[target], 0.1).unwrap();
        let changed: Vec<usize> = (0..48).filter(|&i| r.adv.data()[i] != x.data()[i]).collect();
        assert!(changed.len() <= 5, "{} changed", changed.len());

        // independent greedy oracle reproduces the modified set
        let oracle_changed = {
            let mut adv = x.clone();
            let mut modified = vec![false; 48];
            let mut count = 0usize;
            loop {
                if model.predict(&adv).unwrap()[0] == target || count + 2 > 5 {
                    break;
                }
                let (_, grads) = model.class_grads(&adv).unwrap();
                let gt = grads[target].data();
                let mut go = vec![0.0f64; 48];
                for (ci, g) in grads.iter().enumerate() {
                    if ci != target {
                        for (o, &v) in go.iter_mut().zip(g.data()) {
                            *o += v;
                        }
                    }
                }
                let cands: Vec<usize> =
                    (0..48).filter(|&i| !modified[i] && adv.data()[i] < 1.0).collect();
                let mut best: Option<(usize, usize, f64)> = None;
                for (ai, &p) in cands.iter().enumerate() {
                    for &q in cands.iter().skip(ai + 1) {
                        let a = gt[p] + gt[q];
                        let b = go[p] + go[q];
                        if a > 0.0 && b < 0.0 {
                            let s = -a * b;
                            if best.map_or(true, |(_, _, bs)| s > bs) {
                                best = Some((p, q, s));
                            }
                        }
                    }
                }
                match best {
                    Some((p, q, _)) => {
                        adv.data_mut()[p] = 1.0;
                        adv.data_mut()[q] = 1.0;
                        modified[p] = true;
                        modified[q] = true;
                        count += 2;
                    }
                    None => break,
                }
            }
            (0..48).filter(|&i| adv.data()[i] != x.data()[i]).collect::<Vec<usize>>()
        };
        assert_eq!(changed, oracle_changed);
    }

    #[test]
    fn attacks_are_deterministic_given_seed() {
        let model = toy_model(21, 48, 3);
        let x = toy_batch(22, 2, 4);
        let labels = [0usize, 1];
        let a = pgd(&model, &x, &labels, 0.05, 0.01, 5, true, 99).unwrap();
        let b = pgd(&model, &x, &labels, 0.05, 0.01, 5, true, 99).unwrap();
        assert_eq!(a.adv, b.adv);
        let c = pgd(&model, &x, &labels, 0.05, 0.01, 5, true, 100).unwrap();
        assert!(a.adv != c.adv);
    }

    #[test]
    fn spec_validation_rejects_bad_parameters() {
        assert!(AttackSpec::Fgsm { epsilon: -0.1 }.validate().is_err());
        assert!(AttackSpec::Jsma { gamma: 0.0 }.validate().is_err());
        assert!(AttackSpec::Jsma { gamma: 1.5 }.validate().is_err());
        assert!(AttackSpec::Deepfool { steps: 0, overshoot: 0.02 }.validate().is_err());
        for spec in AttackSpec::table1(1.0) {
            assert!(spec.validate().is_ok());
        }
    }

    #[test]
    fn probe_head_learns_separable_embeddings() {
        // two separable clusters in embedding space
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for i in 0..40 {
            let cls = i % 2;
            let base = if cls == 0 { 1.0 } else { -1.0 };
            rows.extend((0..8).map(|d| {
                base * if d == 0 { 0.9 } else { 0.1 } + rng.gen_range(-0.05..0.05)
            }));
            labels.push(cls);
        }
        let e = Tensor::from_vec(vec![40, 8], rows).unwrap();
        let probe = ProbeHead::train(&e, &labels, 2, 7, 200, 0.5).unwrap();
        let pred = probe.predict(&e).unwrap();
        let acc = pred.iter().zip(&labels).filter(|(a, b)| a == b).count();
        assert!(acc >= 38, "probe accuracy {acc}/40");
    }
}
