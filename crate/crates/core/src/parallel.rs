//! Deterministic reductions.
//!
//! Sums that may be split across workers go through a fixed-shape tree:
//! the input is cut into chunks of `REDUCE_CHUNK` elements (independent of the
//! worker count), each chunk is summed sequentially, and the chunk sums are
//! combined pairwise in index order. The result is bit-identical for any
//! number of threads, including one.

use crate::tensor::Scalar;
use rayon::prelude::*;

/// Chunk width of the reduction tree. Fixed so the tree shape never depends
/// on the thread count.
pub const REDUCE_CHUNK: usize = 1024;

/// Deterministic sum of a slice via the fixed reduction tree.
pub fn det_sum<S: Scalar>(xs: &[S]) -> S {
    if xs.len() <= REDUCE_CHUNK {
        return seq_sum(xs);
    }
    let partials: Vec<S> = xs.par_chunks(REDUCE_CHUNK).map(seq_sum).collect();
    tree_combine_scalars(partials)
}

fn seq_sum<S: Scalar>(xs: &[S]) -> S {
    let mut acc = S::zero();
    for &x in xs {
        acc = acc + x;
    }
    acc
}

/// Pairwise in-order combination of chunk sums.
fn tree_combine_scalars<S: Scalar>(mut parts: Vec<S>) -> S {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        for pair in parts.chunks(2) {
            next.push(if pair.len() == 2 {
                pair[0] + pair[1]
            } else {
                pair[0]
            });
        }
        parts = next;
    }
    parts.pop().unwrap_or_else(S::zero)
}

/// Combine per-chunk partial gradient buffers pairwise in chunk order.
/// `parts` must all have identical length; consumed left to right.
pub fn tree_combine_buffers<S: Scalar>(mut parts: Vec<Vec<S>>) -> Vec<S> {
    assert!(!parts.is_empty());
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(b.iter()) {
                    *x = *x + *y;
                }
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn det_sum_matches_itself_across_pool_sizes() {
        let xs: Vec<f32> = (0..100_000).map(|i| ((i * 37) % 101) as f32 * 0.013 - 0.6).collect();
        let a = det_sum(&xs);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let b = one.install(|| det_sum(&xs));
        let c = four.install(|| det_sum(&xs));
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(a.to_bits(), c.to_bits());
    }

    #[test]
    fn tree_combine_buffers_order_fixed() {
        let parts = vec![vec![1.0f64, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        assert_eq!(tree_combine_buffers(parts), vec![9.0, 12.0]);
    }
}
