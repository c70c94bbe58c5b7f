//! Finite-difference verification of the tape's backward pass.
//!
//! The check re-runs the recorded forward function with perturbed leaves and
//! compares central differences against the analytic gradients. It is kept
//! independent of any particular backward rule: only `Tape` forward methods
//! are exercised when probing.

use super::scalar::Scalar;
use super::tape::{Tape, ValId};
use super::Tensor;
use crate::error::{Error, Result};

/// Default probe step for the f64 verification mode.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error between analytic and numeric gradients, floored so tiny
/// gradients do not blow the ratio up on rounding noise.
fn rel_err<S: Scalar>(a: S, b: S) -> f64 {
    let (a, b) = (a.to_f64().unwrap(), b.to_f64().unwrap());
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Compare tape gradients of `f` against central differences at `inputs`.
///
/// `f` builds the computation on a fresh tape from the supplied leaves and
/// returns the scalar output. Returns the maximum relative error over all
/// input elements.
pub fn finite_diff_check<S, F>(f: F, inputs: &[Tensor<S>], step: f64) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[ValId]) -> Result<ValId>,
{
    // Analytic gradients.
    let mut tape = Tape::new();
    let ids: Vec<ValId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &ids)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Contract("finite_diff_check requires a scalar function".into()));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<S>> = ids
        .iter()
        .map(|&id| tape.grad(id).expect("leaf gradient").to_vec())
        .collect();

    let eval = |probe: &[Tensor<S>]| -> Result<S> {
        let mut t = Tape::without_grads();
        let ids: Vec<ValId> = probe.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let out = f(&mut t, &ids)?;
        Ok(t.value(out).item())
    };

    let h = S::from_f64(step).unwrap();
    let two_h = S::from_f64(2.0 * step).unwrap();
    let mut max_err = 0.0f64;
    let mut probe: Vec<Tensor<S>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let orig = input.data()[ei];
            probe[ti].data_mut()[ei] = orig + h;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig - h;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / two_h;
            let err = rel_err(analytic[ti][ei], numeric);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_function_is_exact() {
        // f = dot(x, c): analytic and numeric agree to rounding.
        let c = Tensor::from_vec(vec![1, 4], vec![0.3, -1.2, 0.7, 2.0]).unwrap();
        let x = Tensor::from_vec(vec![1, 4], vec![0.5, 0.25, -0.75, 1.5]).unwrap();
        let cc = c.clone();
        let err = finite_diff_check(
            move |tape, ids| {
                let cid = tape.constant(cc.clone());
                let prod = tape.mul(ids[0], cid)?;
                Ok(tape.sum_all(prod))
            },
            &[x],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn softmax_cross_entropy_toy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, vec![3, 4]);
        let err = finite_diff_check(
            |tape, ids| tape.cross_entropy_rows(ids[0], vec![1, 0, 3], None),
            &[x],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-5, "err {err}");
    }

    #[test]
    fn matmul_gradients_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_tensor(&mut rng, vec![3, 4]);
        let b = rand_tensor(&mut rng, vec![4, 2]);
        let err = finite_diff_check(
            |tape, ids| {
                let y = tape.matmul(ids[0], ids[1])?;
                let sq = tape.mul(y, y)?;
                Ok(tape.mean_all(sq))
            },
            &[a, b],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn l2_normalize_gradient_is_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, vec![2, 5]);
        let w = rand_tensor(&mut rng, vec![2, 5]);
        let err = finite_diff_check(
            move |tape, ids| {
                let y = tape.l2_normalize(ids[0])?;
                let wid = tape.constant(w.clone());
                let p = tape.mul(y, wid)?;
                Ok(tape.sum_all(p))
            },
            &[x],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn conv_ops_pass_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_tensor(&mut rng, vec![2, 3, 6]);
        let w = rand_tensor(&mut rng, vec![4, 3, 3]);
        let err = finite_diff_check(
            |tape, ids| {
                let y = tape.conv1d(ids[0], ids[1], 1, 1)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            &[x, w],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "conv1d err {err}");

        let x = rand_tensor(&mut rng, vec![1, 2, 5, 5]);
        let w = rand_tensor(&mut rng, vec![3, 2, 3, 3]);
        let err = finite_diff_check(
            |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], 2, 1)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            &[x, w],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "conv2d err {err}");
    }
}
