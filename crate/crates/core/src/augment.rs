//! Image transformations and adversarial augmentation-pair selection.
//!
//! Each transform is deterministic given its seed; pixel values stay in
//! [0,1]. Pair selection evaluates candidate pairs through the encoder in
//! eval mode and keeps, per image, the pair with the largest pixel-mapping
//! contribution over the batch.

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::loss;
use crate::tensor::{sc, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// One concrete transformation with kind-specific parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TransformKind {
    Identity,
    HorizontalFlip,
    /// Square crop with the given side fraction, resized back with
    /// corner-aligned bilinear sampling. Crop position comes from the seed.
    CropResize { scale: f64 },
    /// Quarter-turn clockwise rotations (1..=3).
    Rotation { quarter_turns: u8 },
    /// x′ = clamp((x − ½)(1 + c) + ½ + b) with b, c drawn from the seed
    /// within ±strength.
    ColorJitter { brightness: f64, contrast: f64 },
    Grayscale,
    GaussianNoise { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Transform {
    pub kind: TransformKind,
    pub seed: u64,
}

impl Transform {
    pub fn identity() -> Self {
        Transform {
            kind: TransformKind::Identity,
            seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.kind, TransformKind::Identity)
            || matches!(self.kind, TransformKind::GaussianNoise { sigma } if sigma == 0.0)
    }
}

/// The (t, s) pair applied to one image.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TransformPair {
    pub t: Transform,
    pub s: Transform,
}

impl TransformPair {
    /// Pairs must be informative: t ≠ s unless both are the identity.
    pub fn new(t: Transform, s: Transform) -> Result<Self> {
        if t == s && !(t.is_identity() && s.is_identity()) {
            return Err(Error::Config(
                "transform pair with identical non-identity members".into(),
            ));
        }
        Ok(TransformPair { t, s })
    }
}

fn clamp01<S: Scalar>(v: S) -> S {
    if v < S::zero() {
        S::zero()
    } else if v > S::one() {
        S::one()
    } else {
        v
    }
}

/// Apply a transform to one `[3,H,W]` image. Output has the same shape and
/// values clipped to [0,1]; identical (transform, seed) inputs produce
/// identical outputs.
pub fn apply<S: Scalar>(x: &Tensor<S>, tr: &Transform) -> Result<Tensor<S>> {
    let shape = x.shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] {
        return Err(Error::Dimension {
            op: "augment",
            detail: format!("expected square [3,S,S] image, got {shape:?}"),
        });
    }
    let s = shape[1];
    let xd = x.data();
    let at = |c: usize, y: usize, xx: usize| xd[(c * s + y) * s + xx];
    let mut rng = ChaCha8Rng::seed_from_u64(tr.seed);
    let out: Vec<S> = match &tr.kind {
        TransformKind::Identity => xd.to_vec(),
        TransformKind::HorizontalFlip => {
            let mut o = Vec::with_capacity(xd.len());
            for c in 0..3 {
                for y in 0..s {
                    for xx in 0..s {
                        o.push(at(c, y, s - 1 - xx));
                    }
                }
            }
            o
        }
        TransformKind::CropResize { scale } => {
            let scale = scale.clamp(0.05, 1.0);
            let cs = ((s as f64 * scale).round() as usize).clamp(1, s);
            let oy = rng.gen_range(0..=(s - cs));
            let ox = rng.gen_range(0..=(s - cs));
            let mut o = Vec::with_capacity(xd.len());
            let ratio = if s > 1 {
                (cs as f64 - 1.0) / (s as f64 - 1.0)
            } else {
                0.0
            };
            for c in 0..3 {
                for y in 0..s {
                    let fy = y as f64 * ratio;
                    let y0 = fy.floor() as usize;
                    let ty = fy - y0 as f64;
                    let y1 = (y0 + 1).min(cs - 1);
                    for xx in 0..s {
                        let fx = xx as f64 * ratio;
                        let x0 = fx.floor() as usize;
                        let tx = fx - x0 as f64;
                        let x1 = (x0 + 1).min(cs - 1);
                        let p00 = at(c, oy + y0, ox + x0).to_f64().unwrap();
                        let p01 = at(c, oy + y0, ox + x1).to_f64().unwrap();
                        let p10 = at(c, oy + y1, ox + x0).to_f64().unwrap();
                        let p11 = at(c, oy + y1, ox + x1).to_f64().unwrap();
                        let v = p00 * (1.0 - ty) * (1.0 - tx)
                            + p01 * (1.0 - ty) * tx
                            + p10 * ty * (1.0 - tx)
                            + p11 * ty * tx;
                        o.push(clamp01(sc::<S>(v)));
                    }
                }
            }
            o
        }
        TransformKind::Rotation { quarter_turns } => {
            let k = quarter_turns % 4;
            let mut o = vec![S::zero(); xd.len()];
            for c in 0..3 {
                for y in 0..s {
                    for xx in 0..s {
                        // one clockwise quarter turn: out(y,x) = in(S−1−x, y)
                        let (mut sy, mut sx) = (y, xx);
                        for _ in 0..k {
                            let (ny, nx) = (s - 1 - sx, sy);
                            sy = ny;
                            sx = nx;
                        }
                        o[(c * s + y) * s + xx] = at(c, sy, sx);
                    }
                }
            }
            o
        }
        TransformKind::ColorJitter { brightness, contrast } => {
            let b = rng.gen_range(-brightness.abs()..=brightness.abs());
            let cj = rng.gen_range(-contrast.abs()..=contrast.abs());
            xd.iter()
                .map(|&v| {
                    let f = (v.to_f64().unwrap() - 0.5) * (1.0 + cj) + 0.5 + b;
                    clamp01(sc::<S>(f))
                })
                .collect()
        }
        TransformKind::Grayscale => {
            let mut o = Vec::with_capacity(xd.len());
            let mut luma = vec![0.0f64; s * s];
            for (i, lv) in luma.iter_mut().enumerate() {
                let y = i / s;
                let xx = i % s;
                *lv = 0.299 * at(0, y, xx).to_f64().unwrap()
                    + 0.587 * at(1, y, xx).to_f64().unwrap()
                    + 0.114 * at(2, y, xx).to_f64().unwrap();
            }
            for _c in 0..3 {
                o.extend(luma.iter().map(|&v| clamp01(sc::<S>(v))));
            }
            o
        }
        TransformKind::GaussianNoise { sigma } => {
            if *sigma == 0.0 {
                xd.to_vec()
            } else {
                let normal = Normal::new(0.0f64, *sigma).unwrap();
                xd.iter()
                    .map(|&v| clamp01(sc::<S>(v.to_f64().unwrap() + normal.sample(&mut rng))))
                    .collect()
            }
        }
    };
    debug_assert!(out.iter().all(|v| v.is_finite()));
    Tensor::from_vec(shape, out)
}

/// Apply one transform to every image of a `[B,3,S,S]` batch. Per-image
/// seeds derive from the transform seed and the image index so the batch is
/// reproducible while images stay decorrelated.
pub fn apply_batch<S: Scalar>(batch: &Tensor<S>, tr: &Transform) -> Result<Tensor<S>> {
    let shape = batch.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Dimension {
            op: "augment",
            detail: format!("expected [B,3,S,S] batch, got {shape:?}"),
        });
    }
    let per = shape[1] * shape[2] * shape[3];
    let mut out = Vec::with_capacity(batch.numel());
    for i in 0..shape[0] {
        let img = Tensor::from_vec(
            vec![shape[1], shape[2], shape[3]],
            batch.data()[i * per..(i + 1) * per].to_vec(),
        )?;
        let tri = Transform {
            kind: tr.kind.clone(),
            seed: tr.seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1)),
        };
        out.extend_from_slice(apply(&img, &tri)?.data());
    }
    Tensor::from_vec(shape, out)
}

/// Per-image selection of the candidate pair that maximizes the
/// pixel-mapping risk over the batch. The encoder runs in eval mode with no
/// gradients. Returns one candidate index per image (ties → lowest index).
pub fn select_pair<S: Scalar>(
    batch: &Tensor<S>,
    candidates: &[TransformPair],
    encoder: &Encoder<S>,
    tau: S,
) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::Contract("select_pair: empty candidate list".into()));
    }
    let b = batch.shape()[0];
    // Embeddings cached per distinct transform.
    let mut cache: Vec<(Transform, Tensor<S>)> = Vec::new();
    fn embed_cached<S: Scalar>(
        cache: &mut Vec<(Transform, Tensor<S>)>,
        batch: &Tensor<S>,
        encoder: &Encoder<S>,
        tr: &Transform,
    ) -> Result<usize> {
        if let Some(pos) = cache.iter().position(|(t, _)| t == tr) {
            return Ok(pos);
        }
        let view = apply_batch(batch, tr)?;
        let v = encoder.embed_eval(&view, true)?;
        cache.push((tr.clone(), v));
        Ok(cache.len() - 1)
    }

    let mut best_idx = vec![0usize; b];
    let mut best_loss = vec![f64::NEG_INFINITY; b];
    for (ci, pair) in candidates.iter().enumerate() {
        let ti = embed_cached(&mut cache, batch, encoder, &pair.t)?;
        let si = embed_cached(&mut cache, batch, encoder, &pair.s)?;
        let losses = loss::pm_per_anchor(&cache[ti].1, &cache[si].1, tau)?;
        for (i, &lv) in losses.iter().enumerate() {
            let lv = lv.to_f64().unwrap();
            if lv > best_loss[i] {
                best_loss[i] = lv;
                best_idx[i] = ci;
            }
        }
    }
    Ok(best_idx)
}

/// Configuration of the candidate pool (the `augment` config section).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub kinds: Vec<String>,
    /// Number of candidate pairs sampled per batch (Q).
    pub candidates: usize,
    pub noise_sigma_range: [f64; 2],
    pub jitter_brightness: f64,
    pub jitter_contrast: f64,
    pub crop_scale_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            kinds: vec![
                "horizontal-flip".into(),
                "crop-resize".into(),
                "rotation".into(),
                "color-jitter".into(),
                "grayscale".into(),
                "gaussian-noise".into(),
            ],
            candidates: 8,
            noise_sigma_range: [0.02, 0.3],
            jitter_brightness: 0.4,
            jitter_contrast: 0.4,
            crop_scale_range: [0.5, 1.0],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() || self.candidates == 0 {
            return Err(Error::Config("augment: empty kind list or zero candidates".into()));
        }
        for k in &self.kinds {
            self.sample_kind(k, &mut ChaCha8Rng::seed_from_u64(0))?;
        }
        Ok(())
    }

    fn sample_kind(&self, kind: &str, rng: &mut ChaCha8Rng) -> Result<TransformKind> {
        Ok(match kind {
            "identity" => TransformKind::Identity,
            "horizontal-flip" => TransformKind::HorizontalFlip,
            "crop-resize" => TransformKind::CropResize {
                scale: rng.gen_range(self.crop_scale_range[0]..=self.crop_scale_range[1]),
            },
            "rotation" => TransformKind::Rotation {
                quarter_turns: rng.gen_range(1..=3u8),
            },
            "color-jitter" => TransformKind::ColorJitter {
                brightness: self.jitter_brightness,
                contrast: self.jitter_contrast,
            },
            "grayscale" => TransformKind::Grayscale,
            "gaussian-noise" => TransformKind::GaussianNoise {
                sigma: rng.gen_range(self.noise_sigma_range[0]..=self.noise_sigma_range[1]),
            },
            other => return Err(Error::Config(format!("unknown transform kind '{other}'"))),
        })
    }

    /// Sample the per-batch candidate pool: `candidates` pairs whose two
    /// members always have distinct kinds.
    pub fn sample_pool(&self, seed: u64) -> Result<Vec<TransformPair>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool = Vec::with_capacity(self.candidates);
        for _ in 0..self.candidates {
            let ki = rng.gen_range(0..self.kinds.len());
            let mut si = rng.gen_range(0..self.kinds.len());
            if self.kinds.len() > 1 {
                while si == ki {
                    si = rng.gen_range(0..self.kinds.len());
                }
            }
            let t = Transform {
                kind: self.sample_kind(&self.kinds[ki], &mut rng)?,
                seed: rng.gen(),
            };
            let s = Transform {
                kind: self.sample_kind(&self.kinds[si], &mut rng)?,
                seed: rng.gen(),
            };
            pool.push(TransformPair::new(t, s)?);
        }
        Ok(pool)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderVariant;
    use rand::Rng;

    fn rand_image(seed: u64, s: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(
            vec![3, s, s],
            (0..3 * s * s).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn flip_is_an_involution() {
        let x = rand_image(1, 8);
        let tr = Transform {
            kind: TransformKind::HorizontalFlip,
            seed: 0,
        };
        let once = apply(&x, &tr).unwrap();
        let twice = apply(&once, &tr).unwrap();
        assert_eq!(twice, x);
    }

    #[test]
    fn zero_sigma_noise_is_identity() {
        let x = rand_image(2, 8);
        let tr = Transform {
            kind: TransformKind::GaussianNoise { sigma: 0.0 },
            seed: 9,
        };
        assert_eq!(apply(&x, &tr).unwrap(), x);
    }

    #[test]
    fn rotation_moves_marked_corner_to_computed_position() {
        let s = 6usize;
        let mut x = Tensor::<f32>::zeros(vec![3, s, s]);
        x.data_mut()[0] = 1.0; // channel 0, (0,0)
        let rot = |k: u8| {
            apply(
                &x,
                &Transform {
                    kind: TransformKind::Rotation { quarter_turns: k },
                    seed: 0,
                },
            )
            .unwrap()
        };
        // clockwise: (0,0) → (0,S−1) → (S−1,S−1) → (S−1,0)
        assert_eq!(rot(1).data()[s - 1], 1.0);
        assert_eq!(rot(2).data()[(s - 1) * s + s - 1], 1.0);
        assert_eq!(rot(3).data()[(s - 1) * s], 1.0);
    }

    #[test]
    fn outputs_stay_in_unit_interval() {
        let cfg = AugmentConfig::default();
        let pool = cfg.sample_pool(33).unwrap();
        let x = rand_image(3, 8);
        for pair in &pool {
            for tr in [&pair.t, &pair.s] {
                let y = apply(&x, tr).unwrap();
                assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()));
                assert_eq!(y.shape(), x.shape());
            }
        }
    }

    #[test]
    fn apply_is_reproducible() {
        let x = rand_image(4, 8);
        let tr = Transform {
            kind: TransformKind::GaussianNoise { sigma: 0.2 },
            seed: 1234,
        };
        assert_eq!(apply(&x, &tr).unwrap(), apply(&x, &tr).unwrap());
    }

    #[test]
    fn informative_pair_rule() {
        let id = Transform::identity();
        assert!(TransformPair::new(id.clone(), id).is_ok());
        let t = Transform {
            kind: TransformKind::Grayscale,
            seed: 5,
        };
        assert!(TransformPair::new(t.clone(), t.clone()).is_err());
        let s = Transform {
            kind: TransformKind::Grayscale,
            seed: 6,
        };
        assert!(TransformPair::new(t, s).is_ok());
    }

    #[test]
    fn select_pair_forced_choice_and_nontrivial_preference() {
        let mut enc: Encoder<f32> = Encoder::new(EncoderVariant::Xs, 32, None, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // smooth per-image gradients so flips actually change content
        let mut data = Vec::with_capacity(4 * 3 * 32 * 32);
        for i in 0..4 {
            for c in 0..3 {
                for y in 0..32 {
                    for x in 0..32 {
                        let v = (x as f32 / 31.0) * (0.3 + 0.2 * i as f32)
                            + (y as f32 / 31.0) * 0.2
                            + 0.05 * c as f32
                            + rng.gen_range(0.0..0.05);
                        data.push(v.min(1.0));
                    }
                }
            }
        }
        let batch = Tensor::from_vec(vec![4, 3, 32, 32], data).unwrap();
        enc.warm_bn(&batch).unwrap();
        let trivial = TransformPair::new(Transform::identity(), Transform::identity()).unwrap();
        let nontrivial = TransformPair::new(
            Transform {
                kind: TransformKind::HorizontalFlip,
                seed: 0,
            },
            Transform {
                kind: TransformKind::GaussianNoise { sigma: 0.3 },
                seed: 42,
            },
        )
        .unwrap();

        // single candidate → forced
        let only = select_pair(&batch, &[trivial.clone()], &enc, 0.1).unwrap();
        assert!(only.iter().all(|&i| i == 0));

        // the informative pair yields strictly larger loss per image
        let both = select_pair(&batch, &[trivial.clone(), nontrivial.clone()], &enc, 0.1).unwrap();
        assert!(both.iter().all(|&i| i == 1), "{both:?}");

        // permutation invariance up to tie-breaking
        let swapped = select_pair(&batch, &[nontrivial, trivial], &enc, 0.1).unwrap();
        assert!(swapped.iter().all(|&i| i == 0));

        // empty candidates → contract error
        assert!(select_pair(&batch, &[], &enc, 0.1f32).is_err());
    }
}
