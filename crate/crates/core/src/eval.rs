//! Evaluation: prototype construction from the training split, threshold
//! calibration, attack generation, detection rates, and the ablation grid.

use crate::attack::{self, AttackModel, AttackSpec, ProbeHead};
use crate::bank::{self, Prototype};
use crate::config::Config;
use crate::data::{self, Dataset, Split};
use crate::detect::{self, DetectionResult};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::train::{self, embed_split};
use std::path::Path;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AttackReport {
    pub algorithm: String,
    pub spec: AttackSpec,
    pub n: usize,
    pub success_rate: f64,
    pub unconverged: usize,
    pub dr_attacked: f64,
    pub auc: f64,
    pub mean_attacked_score: f64,
    pub mean_linf: f64,
    pub mean_l2: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub prototype_count: usize,
    pub clean_pass_rate: f64,
    pub threshold: f64,
    pub dr_clean: f64,
    pub mean_clean_score: f64,
    pub probe_accuracy: f64,
    pub attacks: Vec<AttackReport>,
    pub average_dr_attacked: Option<f64>,
    pub average_auc: Option<f64>,
}

/// Attack batch size (images attacked jointly where the algorithm allows).
const ATTACK_CHUNK: usize = 32;

/// Evaluate a trained encoder: build prototypes from the training split,
/// calibrate the threshold on clean validation scores at `clean_pass_rate`,
/// then attack a budgeted slice of the test split with every spec.
/// `out_dir`, when given, receives the report JSON and the test-split
/// embedding export.
pub fn evaluate(
    encoder: &Encoder<f32>,
    dataset: &Dataset,
    cfg: &Config,
    attacks: &[AttackSpec],
    clean_pass_rate: f64,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    let train_idx = dataset.indices_of(Split::Train);
    let val_idx = dataset.indices_of(Split::Val);
    let test_idx = dataset.indices_of(Split::Test);
    if train_idx.is_empty() || val_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::Contract("evaluate: all three splits must be non-empty".into()));
    }

    // prototypes from the training split
    let train_emb = embed_split(encoder, dataset, &train_idx, 64)?;
    let d_c = bank::suggest_density_radius(&train_emb, cfg.bank.density_neighbor_fraction);
    let (prototypes, _) = bank::density_peaks(
        &train_emb,
        cfg.bank.prototypes.min(train_idx.len()),
        d_c,
        cfg.loss.beta as f32,
    )?;
    if prototypes.is_empty() {
        return Err(Error::Contract("evaluate: prototype construction failed".into()));
    }

    // attack target: linear probe on frozen embeddings
    let probe = ProbeHead::train(
        &train_emb,
        &dataset.labels(&train_idx),
        dataset.classes,
        seed ^ 0x9a0b,
        300,
        0.5,
    )?;
    let probe_accuracy = {
        let pred = probe.predict(&train_emb)?;
        let labels = dataset.labels(&train_idx);
        pred.iter().zip(&labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
    };

    // threshold from clean validation scores
    let val_emb = embed_split(encoder, dataset, &val_idx, 64)?;
    let val_scores = detect::scores_from_embeddings(&val_emb, &prototypes);
    let threshold = detect::calibrate_threshold(&val_scores, clean_pass_rate)?;

    // clean detection on the test split
    let test_emb = embed_split(encoder, dataset, &test_idx, 64)?;
    let clean_scores = detect::scores_from_embeddings(&test_emb, &prototypes);
    let clean_results: Vec<DetectionResult> = clean_scores
        .iter()
        .map(|&score| DetectionResult {
            score,
            threshold,
            verdict: if score >= threshold {
                detect::Verdict::Clean
            } else {
                detect::Verdict::Attacked
            },
        })
        .collect();
    let dr_clean = clean_results
        .iter()
        .filter(|r| r.verdict == detect::Verdict::Clean)
        .count() as f64
        / clean_results.len() as f64;
    let mean_clean_score = clean_scores.iter().sum::<f64>() / clean_scores.len() as f64;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let recs: Vec<&data::Record> = test_idx.iter().map(|&i| &dataset.records[i]).collect();
        data::export_embeddings(dir, "embeddings", &test_emb, &recs)?;
    }

    // attacked slice of the test split, shared across attack specs
    let budget = cfg.attack.budget_per_attack.min(test_idx.len()).max(1);
    let attacked_idx: Vec<usize> = test_idx[..budget].to_vec();
    let model = AttackModel::new(encoder, &probe);

    let mut reports = Vec::with_capacity(attacks.len());
    for spec in attacks {
        let report = run_one_attack(
            &model,
            encoder,
            dataset,
            &prototypes,
            &clean_results,
            &clean_scores,
            spec,
            &attacked_idx,
            threshold,
            seed,
        )?;
        reports.push(report);
    }

    let (average_dr_attacked, average_auc) = if reports.is_empty() {
        (None, None)
    } else {
        (
            Some(reports.iter().map(|r| r.dr_attacked).sum::<f64>() / reports.len() as f64),
            Some(reports.iter().map(|r| r.auc).sum::<f64>() / reports.len() as f64),
        )
    };
    let report = EvalReport {
        prototype_count: prototypes.len(),
        clean_pass_rate,
        threshold,
        dr_clean,
        mean_clean_score,
        probe_accuracy,
        attacks: reports,
        average_dr_attacked,
        average_auc,
    };
    if let Some(dir) = out_dir {
        let path = dir.join("report.json");
        let text = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Format(format!("report serialization: {e}")))?;
        std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn run_one_attack(
    model: &AttackModel<'_, f32>,
    encoder: &Encoder<f32>,
    dataset: &Dataset,
    prototypes: &[Prototype<f32>],
    clean_results: &[DetectionResult],
    clean_scores: &[f64],
    spec: &AttackSpec,
    attacked_idx: &[usize],
    threshold: f64,
    seed: u64,
) -> Result<AttackReport> {
    // seed derived from the algorithm name so identical specs get
    // identical streams
    let mut name_tag = 0u64;
    for b in spec.name().bytes() {
        name_tag = name_tag.wrapping_mul(31).wrapping_add(b as u64);
    }
    let attack_seed = seed ^ name_tag;

    let mut attacked_results = Vec::with_capacity(attacked_idx.len());
    let mut attacked_scores = Vec::with_capacity(attacked_idx.len());
    let mut success = 0usize;
    let mut unconverged = 0usize;
    let mut linf_sum = 0.0f64;
    let mut l2_sum = 0.0f64;

    for chunk in attacked_idx.chunks(ATTACK_CHUNK) {
        let x = dataset.batch(chunk);
        let labels = dataset.labels(chunk);
        let targets: Vec<usize> = labels.iter().map(|&l| (l + 1) % dataset.classes).collect();
        let result = attack::run_attack(model, spec, &x, &labels, &targets, attack_seed)?;
        let (linf, l2) = attack::perturbation_norms(&x, &result.adv);
        linf_sum += linf.iter().sum::<f64>();
        l2_sum += l2.iter().sum::<f64>();
        success += result.success.iter().filter(|&&s| s).count();
        unconverged += result.converged.iter().filter(|&&c| !c).count();
        let dets = detect::detect(&result.adv, encoder, prototypes, threshold)?;
        attacked_scores.extend(dets.iter().map(|d| d.score));
        attacked_results.extend(dets);
    }

    let (_, dr_attacked) = detect::detection_rate(clean_results, &attacked_results)?;
    let auc = detect::auc(clean_scores, &attacked_scores);
    let n = attacked_idx.len();
    Ok(AttackReport {
        algorithm: spec.name().to_string(),
        spec: spec.clone(),
        n,
        success_rate: success as f64 / n as f64,
        unconverged,
        dr_attacked,
        auc,
        mean_attacked_score: attacked_scores.iter().sum::<f64>() / n as f64,
        mean_linf: linf_sum / n as f64,
        mean_l2: l2_sum / n as f64,
    })
}

/// One axis of the ablation grid.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AblateGrid {
    pub loss_terms: Vec<Vec<String>>,
    pub tau: Vec<f64>,
    pub beta: Vec<f64>,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub paa_blocks: Vec<usize>,
}

impl AblateGrid {
    pub fn is_empty(&self) -> bool {
        self.loss_terms.is_empty()
            && self.tau.is_empty()
            && self.beta.is_empty()
            && self.lambda1.is_empty()
            && self.lambda2.is_empty()
            && self.paa_blocks.is_empty()
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AblateRow {
    pub label: String,
    pub dr_clean: f64,
    pub dr_attacked: Option<f64>,
    pub auc: Option<f64>,
}

/// Train and evaluate one configuration per grid entry (each axis varies the
/// base configuration one knob at a time, mirroring a one-factor ablation
/// table). Returns one row per configuration.
pub fn ablate(
    base: &Config,
    dataset: &Dataset,
    grid: &AblateGrid,
    out_root: &Path,
    observer: Option<&mut dyn FnMut(&str, &AblateRow)>,
) -> Result<Vec<AblateRow>> {
    if grid.is_empty() {
        return Err(Error::Contract("ablate: empty grid".into()));
    }
    let mut configs: Vec<(String, Config)> = Vec::new();
    for terms in &grid.loss_terms {
        let mut c = base.clone();
        c.train.terms = terms.clone();
        configs.push((format!("terms={}", terms.join("+")), c));
    }
    for &tau in &grid.tau {
        let mut c = base.clone();
        c.loss.tau = tau;
        configs.push((format!("tau={tau}"), c));
    }
    for &beta in &grid.beta {
        let mut c = base.clone();
        c.loss.beta = beta;
        configs.push((format!("beta={beta}"), c));
    }
    for &l1 in &grid.lambda1 {
        let mut c = base.clone();
        c.loss.lambda1 = l1;
        configs.push((format!("lambda1={l1}"), c));
    }
    for &l2 in &grid.lambda2 {
        let mut c = base.clone();
        c.loss.lambda2 = l2;
        configs.push((format!("lambda2={l2}"), c));
    }
    for &n in &grid.paa_blocks {
        let mut c = base.clone();
        c.train.paa_blocks = Some(n);
        configs.push((format!("paa_blocks={n}"), c));
    }

    let mut rows = Vec::with_capacity(configs.len());
    let mut observer = observer;
    for (label, cfg) in configs {
        cfg.validate()?;
        let safe: String = label
            .chars()
            .map(|c| if c.is_alphanumeric() { c } else { '_' })
            .collect();
        let dir = out_root.join(&safe);
        let outcome = train::train(&cfg, dataset, &dir, None)?;
        let report = evaluate(
            &outcome.encoder,
            dataset,
            &cfg,
            &cfg.attack.specs(),
            0.95,
            cfg.train.seed,
            Some(&dir),
        )?;
        let row = AblateRow {
            label: label.clone(),
            dr_clean: report.dr_clean,
            dr_attacked: report.average_dr_attacked,
            auc: report.average_auc,
        };
        if let Some(obs) = observer.as_mut() {
            obs(&label, &row);
        }
        rows.push(row);
    }
    let path = out_root.join("ablation.json");
    let text = serde_json::to_string_pretty(&rows)
        .map_err(|e| Error::Format(format!("ablation serialization: {e}")))?;
    std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(rows)
}

/// Detection report for a checkpoint file: loads the encoder and runs
/// [`evaluate`].
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    dataset: &Dataset,
    cfg: &Config,
    attacks: &[AttackSpec],
    clean_pass_rate: f64,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    let container = crate::encoder::checkpoint::Container::read_file(checkpoint)?;
    let (encoder, _extra) = crate::encoder::checkpoint::unpack_encoder(&container)?;
    evaluate(&encoder, dataset, cfg, attacks, clean_pass_rate, seed, out_dir)
}
