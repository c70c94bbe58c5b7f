//! The single JSON configuration document with `train`, `loss`, `augment`,
//! `bank` and `attack` sections.

use crate::attack::AttackSpec;
use crate::augment::AugmentConfig;
use crate::encoder::EncoderVariant;
use crate::error::{Error, Result};
use crate::loss::LossConfig;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub lr_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub variant: EncoderVariant,
    /// Trailing bottleneck blocks that use parallel axial attention
    /// (None = variant default).
    pub paa_blocks: Option<usize>,
    pub seed: u64,
    /// Momentum-encoder EMA coefficient.
    pub momentum_coef: f64,
    /// Active loss terms: subset of {"nce","pm","pce","icl"}. The base term
    /// (pm, or nce for the ablation baseline) also drives warm-up epochs.
    pub terms: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            warmup_epochs: 20,
            lr: 0.03,
            milestones: vec![120, 160],
            lr_factor: 0.1,
            momentum: 0.9,
            weight_decay: 0.0001,
            batch_size: 256,
            variant: EncoderVariant::S,
            paa_blocks: None,
            seed: 7,
            momentum_coef: 0.99,
            terms: vec!["pm".into(), "pce".into(), "icl".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct BankConfig {
    /// Prototype count M (= number of discrimination-bank queues).
    pub prototypes: usize,
    /// Fraction of pairwise distances counted as neighbors when picking the
    /// density radius d_c.
    pub density_neighbor_fraction: f64,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig {
            prototypes: 10,
            density_neighbor_fraction: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// Test images attacked per algorithm during evaluation.
    pub budget_per_attack: usize,
    /// The CW constant (no published value).
    pub cw_c: f64,
    /// Attack list override; None runs the six published configurations.
    pub specs: Option<Vec<AttackSpec>>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            budget_per_attack: 64,
            cw_c: 1.0,
            specs: None,
        }
    }
}

impl AttackConfig {
    pub fn specs(&self) -> Vec<AttackSpec> {
        self.specs.clone().unwrap_or_else(|| AttackSpec::table1(self.cw_c))
    }
}

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct Config {
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub bank: BankConfig,
    pub attack: AttackConfig,
}

impl Config {
    /// Desk-scale defaults: XS encoder, 40 epochs with 4 warm-up, milestones
    /// [24,32], batch 64, 10 prototypes, r = 512. Scaled down proportionally
    /// from the published recipe so a full run fits on a desktop.
    pub fn desk(seed: u64) -> Self {
        let mut c = Config::default();
        c.train.variant = EncoderVariant::Xs;
        c.train.epochs = 40;
        c.train.warmup_epochs = 4;
        c.train.milestones = vec![24, 32];
        c.train.batch_size = 64;
        c.train.seed = seed;
        c.loss.negatives = 512;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Config("train: epochs and batch_size must be positive".into()));
        }
        if t.warmup_epochs > t.epochs {
            return Err(Error::Config("train: warm-up exceeds total epochs".into()));
        }
        if t.lr <= 0.0 || t.lr_factor <= 0.0 || t.momentum < 0.0 || t.weight_decay < 0.0 {
            return Err(Error::Config("train: rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&t.momentum_coef) {
            return Err(Error::Config("train: momentum_coef must be in [0,1]".into()));
        }
        if !t.milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("train: milestones must be strictly increasing".into()));
        }
        if t.milestones.iter().any(|&m| m >= t.epochs) {
            return Err(Error::Config("train: milestones must lie before the last epoch".into()));
        }
        if t.terms.is_empty() {
            return Err(Error::Config("train: at least one loss term required".into()));
        }
        for term in &t.terms {
            if !matches!(term.as_str(), "nce" | "pm" | "pce" | "icl") {
                return Err(Error::Config(format!("train: unknown loss term '{term}'")));
            }
        }
        if t.terms.iter().any(|t| t == "pm") && t.terms.iter().any(|t| t == "nce") {
            return Err(Error::Config("train: pm and nce are alternative base terms".into()));
        }
        if !t.terms.iter().any(|t| t == "pm" || t == "nce") {
            return Err(Error::Config("train: a base term (pm or nce) is required".into()));
        }
        self.loss.validate()?;
        self.augment.validate()?;
        if self.bank.prototypes < 2 {
            return Err(Error::Config("bank: need at least 2 prototypes".into()));
        }
        if !(0.0..=1.0).contains(&self.bank.density_neighbor_fraction) {
            return Err(Error::Config("bank: neighbor fraction must be in [0,1]".into()));
        }
        if let Some(specs) = &self.attack.specs {
            for s in specs {
                s.validate()?;
            }
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let c: Config =
            serde_json::from_str(json).map_err(|e| Error::Config(format!("config JSON: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn read_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json(&text)
    }

    pub fn has_term(&self, term: &str) -> bool {
        self.train.terms.iter().any(|t| t == term)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_recipe() {
        let c = Config::default();
        assert_eq!(c.train.epochs, 200);
        assert_eq!(c.train.warmup_epochs, 20);
        assert_eq!(c.train.lr, 0.03);
        assert_eq!(c.train.milestones, vec![120, 160]);
        assert_eq!(c.train.momentum, 0.9);
        assert_eq!(c.train.weight_decay, 0.0001);
        assert_eq!(c.train.batch_size, 256);
        assert_eq!(c.loss.tau, 0.1);
        assert_eq!(c.loss.beta, 10.0);
        assert_eq!(c.loss.negatives, 16000);
        assert_eq!(c.loss.lambda1, 1.0);
        assert_eq!(c.loss.lambda2, 1.0);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn desk_preset_is_valid() {
        let c = Config::desk(3);
        assert!(c.validate().is_ok());
        assert_eq!(c.train.batch_size, 64);
        assert_eq!(c.loss.negatives, 512);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut c = Config::desk(1);
        c.train.milestones = vec![30, 20];
        assert!(c.validate().is_err());
        let mut c = Config::desk(1);
        c.train.milestones = vec![50];
        assert!(c.validate().is_err());
        let mut c = Config::desk(1);
        c.train.terms = vec!["bogus".into()];
        assert!(c.validate().is_err());
        let mut c = Config::desk(1);
        c.train.terms = vec!["pce".into()];
        assert!(c.validate().is_err());
        let mut c = Config::desk(1);
        c.train.warmup_epochs = 99;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip_with_partial_document() {
        let json = r#"{"train": {"epochs": 10, "warmup_epochs": 2, "milestones": [6, 8], "variant": "xs"}, "loss": {"tau": 0.2}}"#;
        let c = Config::from_json(json).unwrap();
        assert_eq!(c.train.epochs, 10);
        assert_eq!(c.loss.tau, 0.2);
        assert_eq!(c.loss.beta, 10.0); // default preserved
        let text = serde_json::to_string(&c).unwrap();
        let back = Config::from_json(&text).unwrap();
        assert_eq!(c, back);
    }
}
