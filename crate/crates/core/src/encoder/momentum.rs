//! Momentum (EMA) copy of the encoder.

use super::net::Encoder;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Blend online parameters into the momentum copy:
/// each momentum parameter ← m·momentum + (1−m)·online.
/// Running batch-norm statistics are blended with the same coefficient.
pub fn momentum_encoder_update<S: Scalar>(
    online: &Encoder<S>,
    momentum: &mut Encoder<S>,
    m: S,
) -> Result<()> {
    if online.store.tensors.len() != momentum.store.tensors.len() {
        return Err(Error::Contract(format!(
            "momentum update: parameter lists differ ({} vs {})",
            online.store.tensors.len(),
            momentum.store.tensors.len()
        )));
    }
    let one_minus = S::one() - m;
    for (name, target) in momentum.store.tensors.iter_mut() {
        let source = online.store.tensors.get(name).ok_or_else(|| {
            Error::Contract(format!("momentum update: parameter {name} missing from online encoder"))
        })?;
        if source.shape() != target.shape() {
            return Err(Error::Contract(format!(
                "momentum update: shape mismatch on {name}"
            )));
        }
        for (t, &s) in target.data_mut().iter_mut().zip(source.data()) {
            *t = *t * m + s * one_minus;
        }
    }
    for (key, stats) in momentum.store.bn.iter_mut() {
        let src = online
            .store
            .bn
            .get(key)
            .ok_or_else(|| Error::Contract(format!("momentum update: bn stats {key} missing")))?;
        for (t, &s) in stats.mean.iter_mut().zip(&src.mean) {
            *t = *t * m + s * one_minus;
        }
        for (t, &s) in stats.var.iter_mut().zip(&src.var) {
            *t = *t * m + s * one_minus;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::net::EncoderVariant;

    #[test]
    fn degenerate_coefficients() {
        let online: Encoder<f32> = Encoder::new(EncoderVariant::Xs, 32, None, 1).unwrap();
        let mut m0: Encoder<f32> = Encoder::new(EncoderVariant::Xs, 32, None, 2).unwrap();
        momentum_encoder_update(&online, &mut m0, 0.0).unwrap();
        assert_eq!(m0.store.tensors, online.store.tensors);

        let mut m1: Encoder<f32> = Encoder::new(EncoderVariant::Xs, 32, None, 3).unwrap();
        let before = m1.store.tensors.clone();
        momentum_encoder_update(&online, &mut m1, 1.0).unwrap();
        assert_eq!(m1.store.tensors, before);
    }

    #[test]
    fn scalar_blend_value() {
        // parameters 0 (online) and 1 (momentum), m = 0.99 → 0.99
        let online: Encoder<f32> = Encoder::new(EncoderVariant::Xs, 32, None, 4).unwrap();
        let mut momentum = online.clone();
        let name = "head.fc.b".to_string();
        momentum.store.tensors.get_mut(&name).unwrap().data_mut()[0] = 1.0;
        let mut online2 = online.clone();
        online2.store.tensors.get_mut(&name).unwrap().data_mut()[0] = 0.0;
        momentum_encoder_update(&online2, &mut momentum, 0.99).unwrap();
        let v = momentum.store.tensors[&name].data()[0];
        assert!((v - 0.99).abs() < 1e-6);
    }

    #[test]
    fn mismatched_lists_are_a_contract_error() {
        let online: Encoder<f32> = Encoder::new(EncoderVariant::Xs, 32, None, 1).unwrap();
        let mut other: Encoder<f32> = Encoder::new(EncoderVariant::Xs, 32, None, 1).unwrap();
        other.store.tensors.remove("head.fc.b");
        assert!(momentum_encoder_update(&online, &mut other, 0.5).is_err());
    }
}
