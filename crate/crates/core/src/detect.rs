//! Prototype-similarity detector: score, calibrated threshold, verdict and
//! detection rates.

use crate::bank::Prototype;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Clean,
    Attacked,
}

/// Per-image detection outcome: score = max cosine similarity to any
/// prototype; clean iff score ≥ θ.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DetectionResult {
    pub score: f64,
    pub threshold: f64,
    pub verdict: Verdict,
}

/// Score a batch of embeddings against the prototypes.
pub fn scores_from_embeddings<S: Scalar>(embeddings: &Tensor<S>, prototypes: &[Prototype<S>]) -> Vec<f64> {
    let d = *embeddings.shape().last().unwrap();
    let n = embeddings.numel() / d;
    (0..n)
        .map(|i| {
            let row = &embeddings.data()[i * d..(i + 1) * d];
            prototypes
                .iter()
                .map(|p| {
                    let mut acc = 0.0f64;
                    for (&a, &b) in row.iter().zip(&p.centroid) {
                        acc += a.to_f64().unwrap() * b.to_f64().unwrap();
                    }
                    acc
                })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Detect attacked images: encode (eval mode), score against the
/// prototypes, compare with θ.
pub fn detect<S: Scalar>(
    batch: &Tensor<S>,
    encoder: &Encoder<S>,
    prototypes: &[Prototype<S>],
    threshold: f64,
) -> Result<Vec<DetectionResult>> {
    if prototypes.is_empty() {
        return Err(Error::Contract("detect: prototype set is empty".into()));
    }
    let v = encoder.embed_eval(batch, true)?;
    Ok(scores_from_embeddings(&v, prototypes)
        .into_iter()
        .map(|score| DetectionResult {
            score,
            threshold,
            verdict: if score >= threshold {
                Verdict::Clean
            } else {
                Verdict::Attacked
            },
        })
        .collect())
}

/// θ = empirical (1−q)-quantile of clean validation scores: the k-th
/// smallest with k = ⌈(1−q)·n⌉ (floored at 1), so about a fraction q of
/// clean validation data scores at or above θ.
pub fn calibrate_threshold(clean_scores: &[f64], clean_pass_rate: f64) -> Result<f64> {
    if clean_scores.len() < 100 {
        return Err(Error::Contract(format!(
            "calibrate_threshold: need ≥ 100 scores, got {}",
            clean_scores.len()
        )));
    }
    if !(0.0..=1.0).contains(&clean_pass_rate) {
        return Err(Error::Config(format!(
            "clean-pass rate must be in [0,1], got {clean_pass_rate}"
        )));
    }
    let mut sorted = clean_scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    // nudge before the ceil so (1−0.95)·100 lands on 5, not 6
    let k = ((((1.0 - clean_pass_rate) * n as f64) - 1e-9).ceil() as usize).clamp(1, n);
    Ok(sorted[k - 1])
}

/// DR_clean = fraction of clean samples judged clean;
/// DR_attacked = fraction of attacked samples judged attacked.
pub fn detection_rate(clean: &[DetectionResult], attacked: &[DetectionResult]) -> Result<(f64, f64)> {
    if clean.is_empty() || attacked.is_empty() {
        return Err(Error::Contract("detection_rate: empty result set".into()));
    }
    let dr_clean =
        clean.iter().filter(|r| r.verdict == Verdict::Clean).count() as f64 / clean.len() as f64;
    let dr_attacked = attacked.iter().filter(|r| r.verdict == Verdict::Attacked).count() as f64
        / attacked.len() as f64;
    Ok((dr_clean, dr_attacked))
}

/// Rank-based AUC of clean-vs-attacked score separation (clean scores are
/// expected to be higher; ties count half).
pub fn auc(clean_scores: &[f64], attacked_scores: &[f64]) -> f64 {
    if clean_scores.is_empty() || attacked_scores.is_empty() {
        return 0.5;
    }
    let mut wins = 0.0f64;
    for &c in clean_scores {
        for &a in attacked_scores {
            if c > a {
                wins += 1.0;
            } else if c == a {
                wins += 0.5;
            }
        }
    }
    wins / (clean_scores.len() * attacked_scores.len()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::Prototype;

    fn proto(v: Vec<f64>) -> Prototype<f64> {
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Prototype {
            id: 0,
            centroid: v.into_iter().map(|x| x / n).collect(),
            gamma: 1.0,
            member_count: 1,
        }
    }

    #[test]
    fn exact_prototype_match_scores_one() {
        let p = proto(vec![0.6, 0.8]);
        let e = Tensor::from_vec(vec![1, 2], p.centroid.clone()).unwrap();
        let s = scores_from_embeddings(&e, &[p]);
        assert!((s[0] - 1.0).abs() < 1e-12);
        // clean for any θ ≤ 1
        for theta in [-1.0, 0.0, 0.9999] {
            let verdict = if s[0] >= theta { Verdict::Clean } else { Verdict::Attacked };
            assert_eq!(verdict, Verdict::Clean);
        }
    }

    #[test]
    fn threshold_extremes() {
        let results: Vec<DetectionResult> = [-0.9, 0.0, 0.5, 1.0]
            .iter()
            .map(|&score| DetectionResult {
                score,
                threshold: -1.0,
                verdict: if score >= -1.0 { Verdict::Clean } else { Verdict::Attacked },
            })
            .collect();
        assert!(results.iter().all(|r| r.verdict == Verdict::Clean));
        let results: Vec<DetectionResult> = [-0.9, 0.0, 0.5, 1.0]
            .iter()
            .map(|&score| DetectionResult {
                score,
                threshold: 1.5,
                verdict: if score >= 1.5 { Verdict::Clean } else { Verdict::Attacked },
            })
            .collect();
        assert!(results.iter().all(|r| r.verdict == Verdict::Attacked));
    }

    #[test]
    fn calibration_quantile_cases() {
        // all equal → θ = s
        let scores = vec![0.7; 120];
        assert_eq!(calibrate_threshold(&scores, 0.95).unwrap(), 0.7);

        // q=0.95 on 100 distinct sorted scores → 5th smallest
        let scores: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let theta = calibrate_threshold(&scores, 0.95).unwrap();
        assert_eq!(theta, scores[4]);

        // monotone: larger q → smaller-or-equal θ
        let mut prev = f64::INFINITY;
        for q in [0.5, 0.8, 0.9, 0.95, 0.99] {
            let t = calibrate_threshold(&scores, q).unwrap();
            assert!(t <= prev);
            prev = t;
        }

        // too few scores is a contract error
        assert!(calibrate_threshold(&scores[..99], 0.95).is_err());
    }

    #[test]
    fn detection_rates_on_separable_and_degenerate_cases() {
        let mk = |score: f64, theta: f64| DetectionResult {
            score,
            threshold: theta,
            verdict: if score >= theta { Verdict::Clean } else { Verdict::Attacked },
        };
        // perfect separation
        let clean: Vec<_> = (0..10).map(|_| mk(0.9, 0.5)).collect();
        let attacked: Vec<_> = (0..10).map(|_| mk(0.1, 0.5)).collect();
        let (dc, da) = detection_rate(&clean, &attacked).unwrap();
        assert_eq!((dc, da), (1.0, 1.0));

        // θ = −1 → everything judged clean
        let clean: Vec<_> = (0..10).map(|i| mk(i as f64 / 10.0 - 0.5, -1.0)).collect();
        let attacked: Vec<_> = (0..10).map(|i| mk(i as f64 / 10.0 - 0.5, -1.0)).collect();
        let (dc, da) = detection_rate(&clean, &attacked).unwrap();
        assert_eq!((dc, da), (1.0, 0.0));

        assert!(detection_rate(&[], &clean).is_err());
    }

    #[test]
    fn verdict_depends_only_on_score_threshold_sign() {
        // a monotone rescaling applied to both score and θ keeps verdicts
        let rescale = |v: f64| 2.0 * v + 0.3;
        for (score, theta) in [(0.4, 0.6), (0.8, 0.6), (0.6, 0.6), (-0.2, 0.1)] {
            let before = score >= theta;
            let after = rescale(score) >= rescale(theta);
            assert_eq!(before, after);
        }
    }

    #[test]
    fn auc_orders_separated_distributions() {
        assert_eq!(auc(&[0.9, 0.8], &[0.1, 0.2]), 1.0);
        assert_eq!(auc(&[0.1, 0.2], &[0.9, 0.8]), 0.0);
        let mid = auc(&[0.5, 0.5], &[0.5, 0.5]);
        assert!((mid - 0.5).abs() < 1e-12);
    }
}
