//! Wall-clock comparison of sequential vs concurrent PAA branch execution.

use crate::encoder::{paa_block, Encoder, EncoderVariant, EvalCtx};
use crate::error::Result;
use crate::tensor::{Mode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchRow {
    pub input_size: usize,
    pub workers: usize,
    pub sequential_ms: f64,
    pub concurrent_ms: f64,
    pub ratio: f64,
    pub outputs_identical: bool,
}

/// Time one PAA block at the given spatial size, sequential (1-thread pool)
/// vs concurrent (worker pool, branches joined), on identical inputs.
/// Reports the median of `reps` runs and verifies bitwise output equality in
/// every run.
pub fn bench_paa(sizes: &[usize], workers: usize, reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let reps = reps.max(1);
    let mut rows = Vec::with_capacity(sizes.len());
    let seq_pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("sequential pool");
    let par_pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("worker pool");

    for &size in sizes {
        // XS stem halves the input, so a 2·size encoder puts stage0 at `size`
        let enc: Encoder<f32> = Encoder::new(EncoderVariant::Xs, size * 2, None, seed)?;
        let view = enc.block_view(0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ size as u64);
        let x = Tensor::from_vec(
            vec![4, 16, size, size],
            (0..4 * 16 * size * size).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?;

        let mut seq_times = Vec::with_capacity(reps);
        let mut conc_times = Vec::with_capacity(reps);
        let mut identical = true;
        for _ in 0..reps {
            let t0 = Instant::now();
            let a = seq_pool.install(|| {
                let mut ctx = EvalCtx::sequential();
                paa_block(&mut ctx, &x, &view, Mode::Eval)
            })?;
            seq_times.push(t0.elapsed().as_secs_f64() * 1e3);

            let t1 = Instant::now();
            let b = par_pool.install(|| {
                let mut ctx = EvalCtx::concurrent();
                paa_block(&mut ctx, &x, &view, Mode::Eval)
            })?;
            conc_times.push(t1.elapsed().as_secs_f64() * 1e3);

            identical &= a.data().len() == b.data().len()
                && a.data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits());
        }
        seq_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        conc_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let seq = seq_times[reps / 2];
        let conc = conc_times[reps / 2];
        rows.push(BenchRow {
            input_size: size,
            workers,
            sequential_ms: seq,
            concurrent_ms: conc,
            ratio: conc / seq,
            outputs_identical: identical,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bench_reports_identical_outputs() {
        let rows = bench_paa(&[8], 2, 3, 1).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].outputs_identical);
        assert!(rows[0].sequential_ms > 0.0 && rows[0].concurrent_ms > 0.0);
    }
}
