//! Contrastive objectives: InfoNCE baseline, pixel-mapping loss,
//! prototype-wise contrastive estimation with per-cluster concentration,
//! instance-wise contrast over the discrimination bank, and their weighted
//! total. All embeddings entering a loss are unit-L2-normalized; prototypes,
//! bank entries and concentrations are treated as constants (gradients flow
//! only through the anchor embeddings).

use crate::error::{Error, Result};
use crate::tensor::{sc, Scalar, Tape, Tensor, ValId};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

/// Floor applied to concentrations so collapsed clusters cannot blow up the
/// similarity scaling.
pub const GAMMA_MIN: f64 = 1e-3;

/// Temperatures, weights and negative count (the `loss` config section).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub tau: f64,
    pub beta: f64,
    /// Negative count r; clamped to the available negatives at desk scale.
    pub negatives: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Whether the PCE denominator includes the positive term (the bounded
    /// standard form) or only the negatives (the ablation variant).
    pub pce_include_positive: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.1,
            beta: 10.0,
            negatives: 16000,
            lambda1: 1.0,
            lambda2: 1.0,
            pce_include_positive: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("loss: tau must be positive, got {}", self.tau)));
        }
        if self.beta <= 0.0 {
            return Err(Error::Config(format!("loss: beta must be positive, got {}", self.beta)));
        }
        if self.negatives == 0 {
            return Err(Error::Config("loss: negative count r must be ≥ 1".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("loss: lambda weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Mean over anchors of −log( exp(v·v′/τ) / Σ_j exp(v·v′_j/τ) ) where the
/// denominator holds the positive plus the rows of `negatives`.
pub fn infonce_loss<S: Scalar>(
    tape: &mut Tape<S>,
    v: ValId,
    positives: ValId,
    negatives: ValId,
    tau: S,
) -> Result<ValId> {
    if tau <= S::zero() {
        return Err(Error::Config("infonce: tau must be positive".into()));
    }
    let n = tape.shape(v)[0];
    let pos = tape.row_dot(v, positives)?;
    let pos = tape.reshape(pos, vec![n, 1])?;
    let neg_t = tape.permute(negatives, vec![1, 0])?;
    let neg_logits = tape.matmul(v, neg_t)?;
    let logits = tape.concat(pos, neg_logits, 1)?;
    let logits = tape.scale(logits, S::one() / tau);
    tape.cross_entropy_rows(logits, vec![0; n], None)
}

/// Pixel-mapping loss (batch-contrastive over two augmented views):
/// mean over i of −log( exp(vᵗᵢ·vˢᵢ/τ) / Σ_b exp(vᵗ_b·vˢᵢ/τ) ).
/// At B = 1 the denominator equals the numerator and the loss is exactly 0.
pub fn pm_loss<S: Scalar>(tape: &mut Tape<S>, vt: ValId, vs: ValId, tau: S) -> Result<ValId> {
    if tau <= S::zero() {
        return Err(Error::Config("pm_loss: tau must be positive".into()));
    }
    let (st, ss) = (tape.shape(vt).to_vec(), tape.shape(vs).to_vec());
    if st != ss {
        return Err(Error::ShapeMismatch {
            op: "pm_loss",
            left: st,
            right: ss,
        });
    }
    let b = st[0];
    let vt_t = tape.permute(vt, vec![1, 0])?;
    let logits = tape.matmul(vs, vt_t)?; // [i, b] = vs_i · vt_b
    let logits = tape.scale(logits, S::one() / tau);
    tape.cross_entropy_rows(logits, (0..b).collect(), None)
}

/// Per-anchor pixel-mapping contributions on plain tensors (used by
/// augmentation-pair selection, which runs without gradients).
pub fn pm_per_anchor<S: Scalar>(vt: &Tensor<S>, vs: &Tensor<S>, tau: S) -> Result<Vec<S>> {
    if vt.shape() != vs.shape() {
        return Err(Error::ShapeMismatch {
            op: "pm_per_anchor",
            left: vt.shape().to_vec(),
            right: vs.shape().to_vec(),
        });
    }
    let d = *vt.shape().last().unwrap();
    let b = vt.numel() / d;
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let vsi = &vs.data()[i * d..(i + 1) * d];
        let mut logits = Vec::with_capacity(b);
        for bb in 0..b {
            let vtb = &vt.data()[bb * d..(bb + 1) * d];
            let mut dot = S::zero();
            for (&a, &x) in vsi.iter().zip(vtb) {
                dot = dot + a * x;
            }
            logits.push(dot / tau);
        }
        let mx = logits.iter().cloned().fold(S::neg_infinity(), |a, b| if b > a { b } else { a });
        let mut denom = S::zero();
        for &l in &logits {
            denom = denom + (l - mx).exp();
        }
        out.push(denom.ln() + mx - logits[i]);
    }
    Ok(out)
}

/// Concentration of a cluster around its prototype (natural log):
/// γ = Σᵢ ‖p − vᵢᵐ‖₂ / (n·log(n+β)).
pub fn concentration<S: Scalar>(members: &[&[S]], prototype: &[S], beta: S) -> Result<S> {
    let n = members.len();
    if n == 0 {
        return Err(Error::Contract("concentration: empty cluster".into()));
    }
    let mut total = S::zero();
    for m in members {
        let mut sq = S::zero();
        for (&a, &b) in m.iter().zip(prototype) {
            let d = a - b;
            sq = sq + d * d;
        }
        total = total + sq.sqrt();
    }
    let nf = S::from_usize(n).unwrap();
    Ok(total / (nf * (nf + beta).ln()))
}

/// Prototype-wise contrastive estimation (per-prototype concentrations scale
/// the similarity logits). Gradients flow only through `v`; prototypes and
/// γ are constants. Negatives are sampled without replacement per anchor
/// when fewer than M−1 are requested.
#[allow(clippy::too_many_arguments)]
pub fn pce_loss<S: Scalar>(
    tape: &mut Tape<S>,
    v: ValId,
    assignments: &[usize],
    prototypes: &Tensor<S>,
    gammas: &[S],
    negatives: usize,
    include_positive: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ValId> {
    let n = tape.shape(v)[0];
    let m = prototypes.shape()[0];
    if assignments.len() != n {
        return Err(Error::Contract("pce_loss: one assignment per anchor required".into()));
    }
    if m < 2 {
        return Err(Error::Contract("pce_loss: need at least two prototypes".into()));
    }
    if assignments.iter().any(|&a| a >= m) {
        return Err(Error::Contract("pce_loss: assignment out of range".into()));
    }
    let gamma_min = sc::<S>(GAMMA_MIN);
    let inv_gamma: Vec<S> = gammas
        .iter()
        .map(|&g| S::one() / if g < gamma_min { gamma_min } else { g })
        .collect();
    if inv_gamma.len() != m {
        return Err(Error::Contract("pce_loss: one γ per prototype required".into()));
    }

    let protos = tape.constant(prototypes.clone());
    let protos_t = tape.permute(protos, vec![1, 0])?;
    let sims = tape.matmul(v, protos_t)?; // [n, M]
    let invg = tape.constant(Tensor::from_vec(vec![m], inv_gamma)?);
    let logits = tape.mul_row(sims, invg)?;

    let r = negatives.min(m - 1);
    let full = r == m - 1;
    let mut mask = vec![0u8; n * m];
    for (i, &pos) in assignments.iter().enumerate() {
        if full {
            for j in 0..m {
                mask[i * m + j] = 1;
            }
        } else {
            let mut others: Vec<usize> = (0..m).filter(|&j| j != pos).collect();
            others.shuffle(rng);
            for &j in others.iter().take(r) {
                mask[i * m + j] = 1;
            }
            mask[i * m + pos] = 1;
        }
        if !include_positive {
            // numerator stays the positive; the denominator drops it
            mask[i * m + pos] = 0;
        }
    }
    if include_positive {
        tape.cross_entropy_rows(logits, assignments.to_vec(), Some(mask))
    } else {
        let lse = tape.lse_rows(logits, Some(mask))?;
        let pos = tape.gather_cols(logits, assignments.to_vec())?;
        let diff = tape.sub(lse, pos)?;
        Ok(tape.mean_all(diff))
    }
}

/// Everything one anchor contributes to the instance-wise loss: the ordered
/// queue of its prototype's bank (oldest first), which member is the
/// anchor's estimated representation, the prototype centroid, and the bank
/// concentration φ.
#[derive(Debug, Clone)]
pub struct IclAnchorInput<S> {
    pub members: Vec<Vec<S>>,
    pub positive: usize,
    pub prototype: Vec<S>,
    pub phi: S,
}

/// Instance-wise contrastive loss over the discrimination bank:
/// mean over active anchors of −log of the Eq. 7 ratio with logits
/// cos(vᵢ,z′ⱼ)·cos(vᵢ,pᵢᵐ)/φ. Anchors with `None` input (empty bank queue)
/// are skipped; the skipped count is returned for the metrics stream.
pub fn icl_loss<S: Scalar>(
    tape: &mut Tape<S>,
    v: ValId,
    anchors: &[Option<IclAnchorInput<S>>],
) -> Result<(Option<ValId>, usize)> {
    let n = tape.shape(v)[0];
    let d = tape.shape(v)[1];
    if anchors.len() != n {
        return Err(Error::Contract("icl_loss: one anchor input per row required".into()));
    }
    let active: Vec<usize> = (0..n).filter(|&i| anchors[i].is_some()).collect();
    let skipped = n - active.len();
    if active.is_empty() {
        return Ok((None, skipped));
    }
    let jmax = active
        .iter()
        .map(|&i| anchors[i].as_ref().unwrap().members.len())
        .max()
        .unwrap();
    let gamma_min = sc::<S>(GAMMA_MIN);

    let mut z = vec![S::zero(); active.len() * jmax * d];
    let mut protos = vec![S::zero(); active.len() * d];
    let mut phi_inv = Vec::with_capacity(active.len());
    let mut mask = vec![0u8; active.len() * jmax];
    let mut targets = Vec::with_capacity(active.len());
    for (row, &i) in active.iter().enumerate() {
        let a = anchors[i].as_ref().unwrap();
        if a.positive >= a.members.len() {
            return Err(Error::Contract("icl_loss: positive index outside bank queue".into()));
        }
        for (j, member) in a.members.iter().enumerate() {
            z[(row * jmax + j) * d..(row * jmax + j + 1) * d].copy_from_slice(member);
            mask[row * jmax + j] = 1;
        }
        protos[row * d..(row + 1) * d].copy_from_slice(&a.prototype);
        let phi = if a.phi < gamma_min { gamma_min } else { a.phi };
        phi_inv.push(S::one() / phi);
        targets.push(a.positive);
    }

    let v_active = tape.gather_rows(v, active)?;
    let z_leaf = tape.constant(Tensor::from_vec(vec![targets.len(), jmax, d], z)?);
    let p_leaf = tape.constant(Tensor::from_vec(vec![targets.len(), d], protos)?);
    let phi_leaf = tape.constant(Tensor::from_vec(vec![targets.len()], phi_inv)?);
    let s1 = tape.bmm_vec(z_leaf, v_active)?; // cos(v, z′_j)
    let s2 = tape.row_dot(v_active, p_leaf)?; // cos(v, p)
    let scale = tape.mul(s2, phi_leaf)?;
    let logits = tape.mul_col(s1, scale)?;
    let loss = tape.cross_entropy_rows(logits, targets, Some(mask))?;
    Ok((Some(loss), skipped))
}

/// Weighted total: pm + λ₁·pce + λ₂·icl. Missing terms contribute zero.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pm: ValId,
    pce: Option<ValId>,
    icl: Option<ValId>,
    lambda1: S,
    lambda2: S,
) -> Result<ValId> {
    let mut total = pm;
    if let Some(p) = pce {
        let scaled = tape.scale(p, lambda1);
        total = tape.add(total, scaled)?;
    }
    if let Some(i) = icl {
        let scaled = tape.scale(i, lambda2);
        total = tape.add(total, scaled)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    const HAND_CASE: f64 = 0.313_261_687_518_222_86; // −ln(e/(e+1))

    fn unit_rows<S: Scalar>(rows: Vec<Vec<f64>>) -> Tensor<S> {
        let d = rows[0].len();
        let mut data = Vec::new();
        for r in &rows {
            let n: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            data.extend(r.iter().map(|&v| sc::<S>(v / n)));
        }
        Tensor::from_vec(vec![rows.len(), d], data).unwrap()
    }

    #[test]
    fn infonce_hand_case() {
        // anchor == positive, one orthogonal negative, τ=1 → −ln(e/(e+1))
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(unit_rows(vec![vec![1.0, 0.0]]));
        let pos = tape.constant(unit_rows(vec![vec![1.0, 0.0]]));
        let neg = tape.constant(unit_rows(vec![vec![0.0, 1.0]]));
        let loss = infonce_loss(&mut tape, v, pos, neg, 1.0).unwrap();
        assert!((tape.value(loss).item() - HAND_CASE).abs() < 1e-12);
    }

    #[test]
    fn infonce_indistinguishable_case_is_log_r_plus_1() {
        let r = 7usize;
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(unit_rows(vec![vec![1.0, 0.0]]));
        let pos = tape.constant(unit_rows(vec![vec![0.0, 1.0]]));
        let negs = tape.constant(unit_rows(vec![vec![0.0, 1.0]; r]));
        let loss = infonce_loss(&mut tape, v, pos, negs, 0.37).unwrap();
        assert!((tape.value(loss).item() - ((r + 1) as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn infonce_decreases_as_positive_similarity_grows() {
        let negs_rows = vec![vec![0.0, 1.0, 0.0]];
        let mut prev = f64::INFINITY;
        for &sim in &[0.0, 0.4, 0.8, 0.99] {
            let mut tape = Tape::<f64>::new();
            let v = tape.constant(unit_rows(vec![vec![1.0, 0.0, 0.0]]));
            let pos = tape.constant(unit_rows(vec![vec![sim, 0.0, (1.0 - sim * sim).sqrt()]]));
            let negs = tape.constant(unit_rows(negs_rows.clone()));
            let loss = infonce_loss(&mut tape, v, pos, negs, 0.5).unwrap();
            let val = tape.value(loss).item();
            assert!(val < prev, "{val} !< {prev}");
            prev = val;
        }
    }

    #[test]
    fn pm_loss_is_zero_at_batch_one() {
        let mut tape = Tape::<f64>::new();
        let vt = tape.constant(unit_rows(vec![vec![0.3, -0.8, 0.1]]));
        let vs = tape.constant(unit_rows(vec![vec![-0.5, 0.2, 0.9]]));
        let loss = pm_loss(&mut tape, vt, vs, 0.1).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn pm_loss_hand_case() {
        // B=2, v₁ᵗ ⟂ v₂ᵗ, Vs = Vt, τ=1 → mean of two −ln(e/(e+1)) terms
        let mut tape = Tape::<f64>::new();
        let vt = tape.constant(unit_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]));
        let vs = tape.constant(unit_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]));
        let loss = pm_loss(&mut tape, vt, vs, 1.0).unwrap();
        assert!((tape.value(loss).item() - HAND_CASE).abs() < 1e-12);
    }

    #[test]
    fn pm_loss_is_permutation_equivariant() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let srows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let perm = [3usize, 0, 4, 1, 2];
        let a = {
            let mut tape = Tape::<f64>::new();
            let vt = tape.constant(unit_rows(rows.clone()));
            let vs = tape.constant(unit_rows(srows.clone()));
            let l = pm_loss(&mut tape, vt, vs, 0.2).unwrap();
            tape.value(l).item()
        };
        let b = {
            let mut tape = Tape::<f64>::new();
            let pr: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
            let ps: Vec<Vec<f64>> = perm.iter().map(|&i| srows[i].clone()).collect();
            let vt = tape.constant(unit_rows(pr));
            let vs = tape.constant(unit_rows(ps));
            let l = pm_loss(&mut tape, vt, vs, 0.2).unwrap();
            tape.value(l).item()
        };
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn concentration_hand_cases() {
        // all members equal the prototype → 0
        let p = [0.6f64, 0.8];
        let members: Vec<&[f64]> = vec![&p, &p];
        assert_eq!(concentration(&members, &p, 10.0).unwrap(), 0.0);

        // n=2, both distances 1, β=10 → 1/ln 12
        let p = [0.0f64, 0.0];
        let m1 = [1.0f64, 0.0];
        let m2 = [0.0f64, 1.0];
        let g = concentration(&[&m1, &m2], &p, 10.0).unwrap();
        assert!((g - 1.0 / 12.0f64.ln()).abs() < 1e-12);
        assert!((g - 0.4024).abs() < 1e-4);

        // empty cluster is a contract error
        assert!(concentration::<f64>(&[], &p, 10.0).is_err());
    }

    #[test]
    fn concentration_homogeneity_and_beta_monotonicity() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let members: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let refs: Vec<&[f64]> = members.iter().map(|m| m.as_slice()).collect();
        let g1 = concentration(&refs, &p, 10.0).unwrap();
        // scale offsets by c: members' = p + c (m − p)
        let c = 3.5f64;
        let scaled: Vec<Vec<f64>> = members
            .iter()
            .map(|m| m.iter().zip(&p).map(|(&mv, &pv)| pv + c * (mv - pv)).collect())
            .collect();
        let srefs: Vec<&[f64]> = scaled.iter().map(|m| m.as_slice()).collect();
        let gc = concentration(&srefs, &p, 10.0).unwrap();
        assert!((gc - c * g1).abs() < 1e-12 * c.max(1.0));

        let mut prev = f64::INFINITY;
        for &beta in &[1.0, 5.0, 10.0, 100.0] {
            let g = concentration(&refs, &p, beta).unwrap();
            assert!(g < prev);
            prev = g;
        }
    }

    #[test]
    fn pce_hand_case() {
        // anchor == its prototype, one orthogonal negative, γ = 1
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(unit_rows(vec![vec![1.0, 0.0]]));
        let protos = unit_rows::<f64>(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let loss = pce_loss(&mut tape, v, &[0], &protos, &[1.0, 1.0], 1, true, &mut rng).unwrap();
        assert!((tape.value(loss).item() - HAND_CASE).abs() < 1e-12);
    }

    #[test]
    fn looser_cluster_downscales_the_positive_logit() {
        // doubling γ of the anchor's cluster halves v·p⁺/γ
        let v = [0.9f64, (1.0 - 0.81f64).sqrt()];
        let p = [1.0f64, 0.0];
        let dot: f64 = v.iter().zip(&p).map(|(a, b)| a * b).sum();
        let logit_tight = dot / 0.3;
        let logit_loose = dot / 0.6;
        assert!(logit_loose < logit_tight);
    }

    #[test]
    fn pce_with_equal_gammas_matches_infonce_at_tau_gamma() {
        // all anchors share prototype 0; negatives are the remaining protos
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v_rows: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let proto_rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let gamma = 0.42f64;

        let pce = {
            let mut rng2 = ChaCha8Rng::seed_from_u64(0);
            let mut tape = Tape::<f64>::new();
            let v = tape.constant(unit_rows(v_rows.clone()));
            let protos = unit_rows::<f64>(proto_rows.clone());
            let l = pce_loss(&mut tape, v, &[0, 0, 0], &protos, &[gamma; 5], 4, true, &mut rng2)
                .unwrap();
            tape.value(l).item()
        };
        let nce = {
            let mut tape = Tape::<f64>::new();
            let v = tape.constant(unit_rows(v_rows));
            let protos = unit_rows::<f64>(proto_rows);
            let pos_row = protos.data()[0..4].to_vec();
            let pos = tape.constant(Tensor::from_vec(vec![1, 4], pos_row).unwrap());
            let pos3 = tape.concat(pos, pos, 0).unwrap();
            let pos3 = tape.concat(pos3, pos, 0).unwrap();
            let negs = tape.constant(Tensor::from_vec(vec![4, 4], protos.data()[4..].to_vec()).unwrap());
            let l = infonce_loss(&mut tape, v, pos3, negs, gamma).unwrap();
            tape.value(l).item()
        };
        assert!((pce - nce).abs() < 1e-12, "{pce} vs {nce}");
    }

    #[test]
    fn icl_singleton_bank_is_zero_and_hand_case_holds() {
        // singleton queue holding the anchor's own representation
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(unit_rows(vec![vec![1.0, 0.0]]));
        let anchor = IclAnchorInput {
            members: vec![vec![1.0, 0.0]],
            positive: 0,
            prototype: vec![1.0, 0.0],
            phi: 1.0,
        };
        let (loss, skipped) = icl_loss(&mut tape, v, &[Some(anchor)]).unwrap();
        assert_eq!(skipped, 0);
        assert_eq!(tape.value(loss.unwrap()).item(), 0.0);

        // two members: numerator logit 1, other 0, φ=1 → −ln(e/(e+1))
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(unit_rows(vec![vec![1.0, 0.0]]));
        let anchor = IclAnchorInput {
            members: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            positive: 1,
            prototype: vec![1.0, 0.0],
            phi: 1.0,
        };
        let (loss, _) = icl_loss(&mut tape, v, &[Some(anchor)]).unwrap();
        assert!((tape.value(loss.unwrap()).item() - HAND_CASE).abs() < 1e-12);
    }

    #[test]
    fn icl_skips_anchors_with_empty_queues() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(unit_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]));
        let anchor = IclAnchorInput {
            members: vec![vec![1.0, 0.0]],
            positive: 0,
            prototype: vec![1.0, 0.0],
            phi: 1.0,
        };
        let (loss, skipped) = icl_loss(&mut tape, v, &[Some(anchor), None]).unwrap();
        assert!(loss.is_some());
        assert_eq!(skipped, 1);

        let mut tape = Tape::<f64>::new();
        let v = tape.constant(unit_rows(vec![vec![1.0, 0.0]]));
        let (loss, skipped) = icl_loss(&mut tape, v, &[None]).unwrap();
        assert!(loss.is_none());
        assert_eq!(skipped, 1);
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let pm = tape.constant(Tensor::scalar(1.0));
        let pce = tape.constant(Tensor::scalar(2.0));
        let icl = tape.constant(Tensor::scalar(3.0));
        let t = total_loss(&mut tape, pm, Some(pce), Some(icl), 1.0, 1.0).unwrap();
        assert_eq!(tape.value(t).item(), 6.0);
        let t0 = total_loss(&mut tape, pm, Some(pce), Some(icl), 0.0, 0.0).unwrap();
        assert_eq!(tape.value(t0).item(), 1.0);
        let tnone = total_loss(&mut tape, pm, None, None, 1.0, 1.0).unwrap();
        assert_eq!(tape.value(tnone).item(), 1.0);
    }

    #[test]
    fn config_validation() {
        let mut c = LossConfig::default();
        assert!(c.validate().is_ok());
        c.tau = 0.0;
        assert!(c.validate().is_err());
        c.tau = 0.1;
        c.lambda1 = -1.0;
        assert!(c.validate().is_err());
    }
}
