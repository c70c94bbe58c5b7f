use paadet_core::augment;
use paadet_core::config::Config;
use paadet_core::encoder::{Encoder, EncoderVariant, TapeCtx};
use paadet_core::tensor::{Mode, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = 64usize;
    let batch = Tensor::from_vec(
        vec![b, 3, 32, 32],
        (0..b * 3 * 1024).map(|_| rng.gen_range(0.0f32..1.0)).collect(),
    )
    .unwrap();
    let mut enc: Encoder<f32> = Encoder::new(EncoderVariant::Xs, 32, None, 7).unwrap();
    enc.warm_bn(&batch).unwrap();

    let t = Instant::now();
    let n = 5;
    for _ in 0..n {
        let _ = enc.embed_eval(&batch, true).unwrap();
    }
    eprintln!("eval fwd (concurrent): {:.0} ms", t.elapsed().as_secs_f64() * 1e3 / n as f64);

    let t = Instant::now();
    for _ in 0..n {
        let _ = enc.embed_eval(&batch, false).unwrap();
    }
    eprintln!("eval fwd (sequential): {:.0} ms", t.elapsed().as_secs_f64() * 1e3 / n as f64);

    let t = Instant::now();
    for _ in 0..n {
        let mut tape: Tape<f32> = Tape::new();
        let mut ctx = TapeCtx::new(&mut tape, true);
        let v = enc.forward(&mut ctx, &batch, Mode::Train).unwrap();
        let s = tape.sum_all(v);
        tape.backward(s).unwrap();
    }
    eprintln!("train fwd+bwd: {:.0} ms", t.elapsed().as_secs_f64() * 1e3 / n as f64);

    let cfg = Config::desk(3);
    let pool = cfg.augment.sample_pool(42).unwrap();
    let t = Instant::now();
    for _ in 0..2 {
        let _ = augment::select_pair(&batch, &pool, &enc, 0.1f32).unwrap();
    }
    eprintln!("selection (Q=8): {:.0} ms", t.elapsed().as_secs_f64() * 1e3 / 2.0);
}
