//! The training loop: SGD with momentum and milestone LR drops, warm-up
//! epochs on the pixel-mapping loss alone, per-epoch prototype refresh from
//! momentum features, per-step bank updates and momentum-encoder updates.

use crate::augment;
use crate::bank::{self, DiscriminationBank, Prototype};
use crate::config::Config;
use crate::data::{Dataset, Split};
use crate::encoder::{Ctx, Encoder, TapeCtx, EMBED_DIM};
use crate::error::{Error, Result};
use crate::loss::{self, IclAnchorInput};
use crate::tensor::{sc, Mode, Tape, Tensor, ValId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// One line of the metrics stream. Contains no wall-clock values, so
/// identical runs emit identical bytes.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub pm: f64,
    pub pce: f64,
    pub icl: f64,
    pub total: f64,
    pub gamma_min: f64,
    pub gamma_mean: f64,
    pub gamma_max: f64,
    pub bank_occupancy: usize,
    pub icl_skipped: usize,
}

pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub encoder: Encoder<f32>,
    pub momentum_encoder: Encoder<f32>,
    pub prototypes: Vec<Prototype<f32>>,
    pub records: Vec<EpochRecord>,
}

/// Derive an independent RNG stream from the master seed.
pub fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn lr_at_epoch(cfg: &Config, epoch: usize) -> f64 {
    let drops = cfg.train.milestones.iter().filter(|&&m| epoch > m).count();
    cfg.train.lr * cfg.train.lr_factor.powi(drops as i32)
}

/// Parameters excluded from weight decay: batch-norm affine parameters,
/// relative positional tables, biases.
fn decay_exempt(name: &str) -> bool {
    name.ends_with(".gamma")
        || name.ends_with(".beta")
        || name.ends_with(".rq")
        || name.ends_with(".rk")
        || name.ends_with(".rv")
        || name.ends_with(".b")
}

/// Encode a list of images in eval mode, batched.
pub fn embed_split(
    encoder: &Encoder<f32>,
    dataset: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(indices.len() * EMBED_DIM);
    for chunk in indices.chunks(batch_size) {
        let batch = dataset.batch(chunk);
        let v = encoder.embed_eval(&batch, true)?;
        data.extend_from_slice(v.data());
    }
    Tensor::from_vec(vec![indices.len(), EMBED_DIM], data)
}

struct SgdState {
    velocity: BTreeMap<String, Vec<f32>>,
}

impl SgdState {
    fn new() -> Self {
        SgdState {
            velocity: BTreeMap::new(),
        }
    }

    fn step(
        &mut self,
        encoder: &mut Encoder<f32>,
        grads: &BTreeMap<String, Vec<f32>>,
        lr: f32,
        momentum: f32,
        weight_decay: f32,
    ) {
        for (name, grad) in grads {
            let param = encoder
                .store
                .tensors
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            let wd = if decay_exempt(name) { 0.0 } else { weight_decay };
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            for ((v, &g), p) in vel.iter_mut().zip(grad).zip(param.data_mut()) {
                *v = momentum * *v + g + wd * *p;
                *p -= lr * *v;
            }
        }
    }
}

/// Per-epoch prototype state shared by the loss terms.
struct EpochPrototypes {
    prototypes: Vec<Prototype<f32>>,
    /// Prototype id per train-split image, keyed by dataset index.
    assignment_of: BTreeMap<usize, usize>,
    centroids: Tensor<f32>,
    gammas: Vec<f32>,
}

fn refresh_prototypes(
    cfg: &Config,
    momentum_enc: &Encoder<f32>,
    dataset: &Dataset,
    train_indices: &[usize],
) -> Result<EpochPrototypes> {
    let feats = embed_split(momentum_enc, dataset, train_indices, cfg.train.batch_size)?;
    let d_c = bank::suggest_density_radius(&feats, cfg.bank.density_neighbor_fraction);
    let (prototypes, assignments) = bank::density_peaks(
        &feats,
        cfg.bank.prototypes.min(train_indices.len()),
        d_c,
        cfg.loss.beta as f32,
    )?;
    let assignment_of = train_indices
        .iter()
        .zip(&assignments)
        .map(|(&gi, &a)| (gi, a))
        .collect();
    let mut centroid_data = Vec::with_capacity(prototypes.len() * EMBED_DIM);
    for p in &prototypes {
        centroid_data.extend_from_slice(&p.centroid);
    }
    let centroids = Tensor::from_vec(vec![prototypes.len(), EMBED_DIM], centroid_data)?;
    let gammas = prototypes.iter().map(|p| p.gamma).collect();
    Ok(EpochPrototypes {
        prototypes,
        assignment_of,
        centroids,
        gammas,
    })
}

/// Train an encoder on the dataset's train split. Writes `metrics.jsonl` and
/// `checkpoint.paac` (refreshed every epoch) under `out_dir` and returns the
/// final state. `observer` receives each epoch record as it is produced.
pub fn train(
    cfg: &Config,
    dataset: &Dataset,
    out_dir: &Path,
    mut observer: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let checkpoint_path = out_dir.join("checkpoint.paac");
    let mut metrics_file = std::fs::File::create(&metrics_path)
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;

    let train_indices = dataset.indices_of(Split::Train);
    if train_indices.len() < cfg.train.batch_size {
        return Err(Error::Contract(format!(
            "train split ({}) smaller than one batch ({})",
            train_indices.len(),
            cfg.train.batch_size
        )));
    }
    let seed = cfg.train.seed;
    let tau = cfg.loss.tau as f32;
    let use_nce = cfg.has_term("nce");
    let use_pce = cfg.has_term("pce");
    let use_icl = cfg.has_term("icl");

    let mut online: Encoder<f32> = Encoder::new(
        cfg.train.variant,
        dataset.image_size,
        cfg.train.paa_blocks,
        seed,
    )?;
    // Seed running statistics from the first batch so eval-mode forwards
    // (pair selection, momentum features) behave from step one.
    let first_batch = dataset.batch(&train_indices[..cfg.train.batch_size]);
    online.warm_bn(&first_batch)?;
    let mut momentum_enc = online.clone();

    let mut sgd = SgdState::new();
    let mut bank_state = DiscriminationBank::<f32>::new(cfg.bank.prototypes);
    let mut proto_state: Option<EpochPrototypes> = None;
    let mut records = Vec::with_capacity(cfg.train.epochs);
    let mut global_step = 0u64;

    for epoch in 1..=cfg.train.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        let in_warmup = epoch <= cfg.train.warmup_epochs;
        if !in_warmup && (use_pce || use_icl) {
            proto_state = Some(refresh_prototypes(cfg, &momentum_enc, dataset, &train_indices)?);
            // prototype identities changed: the queues restart
            bank_state = DiscriminationBank::new(proto_state.as_ref().unwrap().prototypes.len());
        }

        let mut order = train_indices.clone();
        let mut shuffle_rng = stream(seed, 0x1000 + epoch as u64);
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut sums = [0.0f64; 4]; // pm, pce, icl, total
        let mut skipped_total = 0usize;
        let steps = order.len() / cfg.train.batch_size;
        for step in 0..steps {
            global_step += 1;
            let batch_idx = &order[step * cfg.train.batch_size..(step + 1) * cfg.train.batch_size];
            let batch = dataset.batch(batch_idx);
            let batch_assign: Option<Vec<usize>> = proto_state
                .as_ref()
                .map(|ps| batch_idx.iter().map(|gi| ps.assignment_of[gi]).collect());

            // adversarial augmentation-pair selection (eval mode, no grads)
            let pool_seed = stream(seed, 0x2000 + global_step).gen();
            let pool = cfg.augment.sample_pool(pool_seed)?;
            let selected = augment::select_pair(&batch, &pool, &online, tau)?;

            // build the two views with the selected per-image pairs
            let s = dataset.image_size;
            let per = 3 * s * s;
            let mut xt = vec![0.0f32; batch.numel()];
            let mut xs = vec![0.0f32; batch.numel()];
            for (i, &ci) in selected.iter().enumerate() {
                let img = Tensor::from_vec(
                    vec![3, s, s],
                    batch.data()[i * per..(i + 1) * per].to_vec(),
                )?;
                let pair = &pool[ci];
                let ti = augment::Transform {
                    kind: pair.t.kind.clone(),
                    seed: pair.t.seed.wrapping_add(i as u64),
                };
                let si = augment::Transform {
                    kind: pair.s.kind.clone(),
                    seed: pair.s.seed.wrapping_add(i as u64),
                };
                xt[i * per..(i + 1) * per].copy_from_slice(augment::apply(&img, &ti)?.data());
                xs[i * per..(i + 1) * per].copy_from_slice(augment::apply(&img, &si)?.data());
            }
            let xt = Tensor::from_vec(batch.shape().to_vec(), xt)?;
            let xs = Tensor::from_vec(batch.shape().to_vec(), xs)?;

            // momentum features of the s-view (stable targets, detached)
            let z_m = momentum_enc.embed_eval(&xs, true)?;

            // forward + losses on one tape
            let mut tape: Tape<f32> = Tape::new();
            let mut skipped = 0usize;
            let (pm_id, pce_id, icl_id, total_id, param_map) = {
                let mut ctx = TapeCtx::new(&mut tape, true);
                let vt = online.forward(&mut ctx, &xt, Mode::Train)?;
                let pm_id = if use_nce {
                    let z_leaf = Ctx::<f32>::input(&mut ctx, &z_m);
                    loss::pm_loss(ctx.tape, z_leaf, vt, tau)?
                } else {
                    let vs = online.forward(&mut ctx, &xs, Mode::Train)?;
                    loss::pm_loss(ctx.tape, vt, vs, tau)?
                };

                let mut pce_id = None;
                let mut icl_id = None;
                if let (false, Some(ps), Some(assign)) =
                    (in_warmup, proto_state.as_ref(), batch_assign.as_ref())
                {
                    if use_pce {
                        let mut neg_rng = stream(seed, 0x3000 + global_step);
                        pce_id = Some(loss::pce_loss(
                            ctx.tape,
                            vt,
                            assign,
                            &ps.centroids,
                            &ps.gammas,
                            cfg.loss.negatives,
                            cfg.loss.pce_include_positive,
                            &mut neg_rng,
                        )?);
                    }
                    if use_icl {
                        let beta = cfg.loss.beta as f32;
                        let anchors: Vec<Option<IclAnchorInput<f32>>> = assign
                            .iter()
                            .map(|&proto| {
                                let q = bank_state.contrastive_set(proto);
                                if q.is_empty() {
                                    return None;
                                }
                                let centroid = &ps.prototypes[proto].centroid;
                                let phi = bank_state.phi(proto, centroid, beta)?;
                                Some(IclAnchorInput {
                                    members: q.iter().map(|e| e.z.clone()).collect(),
                                    positive: q.len() - 1,
                                    prototype: centroid.clone(),
                                    phi,
                                })
                            })
                            .collect();
                        let (id, sk) = loss::icl_loss(ctx.tape, vt, &anchors)?;
                        icl_id = id;
                        skipped = sk;
                    }
                }
                let total_id = loss::total_loss(
                    ctx.tape,
                    pm_id,
                    pce_id,
                    icl_id,
                    sc::<f32>(cfg.loss.lambda1),
                    sc::<f32>(cfg.loss.lambda2),
                )?;
                let param_map: Vec<(String, ValId)> = ctx
                    .param_ids()
                    .map(|(name, id)| (name.clone(), id))
                    .collect();
                (pm_id, pce_id, icl_id, total_id, param_map)
            };

            let pm_v = tape.value(pm_id).item() as f64;
            let pce_v = pce_id.map(|id| tape.value(id).item() as f64).unwrap_or(0.0);
            let icl_v = icl_id.map(|id| tape.value(id).item() as f64).unwrap_or(0.0);
            let total_v = tape.value(total_id).item() as f64;
            if !total_v.is_finite() {
                return Err(Error::NonFinite {
                    context: format!(
                        "loss at epoch {epoch} step {step} (pm={pm_v}, pce={pce_v}, icl={icl_v}; \
                         batch indices {batch_idx:?})"
                    ),
                });
            }

            tape.backward(total_id)?;
            let mut grads: BTreeMap<String, Vec<f32>> = BTreeMap::new();
            for (name, id) in param_map {
                if let Some(g) = tape.grad(id) {
                    grads.insert(name, g.to_vec());
                }
            }
            sgd.step(
                &mut online,
                &grads,
                lr as f32,
                cfg.train.momentum as f32,
                cfg.train.weight_decay as f32,
            );

            // running statistics, momentum encoder, bank
            let updates: Vec<crate::tensor::tape::BnUpdate<f32>> =
                tape.bn_updates().into_iter().cloned().collect();
            online.apply_bn_updates(&updates, 0.1);
            crate::encoder::momentum::momentum_encoder_update(
                &online,
                &mut momentum_enc,
                cfg.train.momentum_coef as f32,
            )?;
            if let (false, true, Some(assign)) = (in_warmup, use_icl, batch_assign.as_ref()) {
                bank_state.update(&z_m, assign, global_step)?;
            }

            sums[0] += pm_v;
            sums[1] += pce_v;
            sums[2] += icl_v;
            sums[3] += total_v;
            skipped_total += skipped;
        }

        let inv = 1.0 / steps as f64;
        let gammas: Vec<f64> = proto_state
            .as_ref()
            .map(|p| p.gammas.iter().map(|&g| g as f64).collect())
            .unwrap_or_default();
        let record = EpochRecord {
            epoch,
            lr,
            pm: sums[0] * inv,
            pce: sums[1] * inv,
            icl: sums[2] * inv,
            total: sums[3] * inv,
            gamma_min: if gammas.is_empty() {
                0.0
            } else {
                gammas.iter().cloned().fold(f64::INFINITY, f64::min)
            },
            gamma_mean: if gammas.is_empty() {
                0.0
            } else {
                gammas.iter().sum::<f64>() / gammas.len() as f64
            },
            gamma_max: gammas.iter().cloned().fold(0.0, f64::max),
            bank_occupancy: bank_state.occupancy(),
            icl_skipped: skipped_total,
        };
        let mut line = serde_json::to_string(&record)
            .map_err(|e| Error::Format(format!("metrics serialization: {e}")))?;
        line.push('\n');
        metrics_file
            .write_all(line.as_bytes())
            .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
        if let Some(obs) = observer.as_mut() {
            obs(&record);
        }
        records.push(record);

        // refreshed checkpoint after every epoch
        let mut extra = BTreeMap::new();
        if let Some(ps) = &proto_state {
            extra.extend(bank::prototypes_to_entries(&ps.prototypes));
        }
        extra.extend(bank_state.to_entries());
        extra.insert("meta.epoch".to_string(), Tensor::scalar(epoch as f32));
        let container = crate::encoder::checkpoint::pack_encoder(&online, &extra);
        container.write_file(&checkpoint_path)?;
    }

    Ok(TrainOutcome {
        checkpoint_path,
        metrics_path,
        encoder: online,
        momentum_encoder: momentum_enc,
        prototypes: proto_state.map(|p| p.prototypes).unwrap_or_default(),
        records,
    })
}

/// The desk-scale dataset used by the end-to-end checks: 8 classes,
/// 2,000 images, 32×32.
pub fn desk_dataset_spec(seed: u64) -> crate::data::SyntheticDatasetSpec {
    crate::data::SyntheticDatasetSpec {
        classes: 8,
        images_per_class: 250,
        image_size: 32,
        noise_sigma: 0.03,
        seed,
    }
}
