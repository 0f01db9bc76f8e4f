use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::objectives::{LossConfig, TargetMode};
use crate::synthdata::DatasetSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "I")]
    ClassifierInvariance,
    #[serde(rename = "II")]
    SiameseTriplet,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::ClassifierInvariance => "I",
            Method::SiameseTriplet => "II",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Method, String> {
        match s.to_ascii_lowercase().as_str() {
            "i" | "1" | "classifier" => Ok(Method::ClassifierInvariance),
            "ii" | "2" | "siamese" => Ok(Method::SiameseTriplet),
            other => Err(format!("unknown method '{other}' (expected I or II)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning-rate multiplier applied every `lr_decay_every` epochs;
    /// `lr_decay_every = 0` disables the schedule.
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
}

impl OptConfig {
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if self.lr_decay_every == 0 {
            self.lr
        } else {
            self.lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
        }
    }

    fn validate(&self, name: &str) -> Result<(), String> {
        if self.lr <= 0.0 {
            return Err(format!("{name}.lr must be > 0"));
        }
        if self.epochs == 0 {
            return Err(format!("{name}.epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(format!("{name}.batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(format!("{name}.momentum must be in [0,1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(format!("{name}.weight_decay must be >= 0"));
        }
        if self.lr_decay_every > 0 && self.lr_decay_factor <= 0.0 {
            return Err(format!("{name}.lr_decay_factor must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Encoder channel widths; the length fixes the downsampling depth.
    pub widths: Vec<usize>,
    /// Siamese embedding dimension.
    pub embedding_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub method: Method,
    pub dataset_root: PathBuf,
    pub out_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub classifier: OptConfig,
    pub embedder: OptConfig,
    pub generator: OptConfig,
    pub loss: LossConfig,
    /// Validation scoring cadence in epochs during generator training.
    pub eval_every: usize,
    /// Free-form traceability notes (kept in the resolved config output).
    pub notes: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        let classifier = OptConfig {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 16,
            epochs: 30,
            lr_decay_factor: 0.1,
            lr_decay_every: 12,
        };
        let mut notes = BTreeMap::new();
        notes.insert(
            "classifier".into(),
            "full-scale reference: SGD, batch 16, lr 1e-3 for 200 epochs, weight decay 1e-4, \
             lr x0.1 every 80 epochs; desk scale shrinks to 30 epochs with decay every 12"
                .into(),
        );
        notes.insert(
            "generator".into(),
            "full-scale reference: SGD, batch 128, lr 1e-4 for 100 epochs; desk scale uses \
             batch 32 for 40 epochs with the rate raised to keep the same optimization budget \
             on a from-scratch encoder"
                .into(),
        );
        notes.insert("lambda".into(), "1.0, never tuned".into());
        notes.insert("margin".into(), "triplet margin fixed at 1".into());
        notes.insert(
            "augmentation".into(),
            "full-scale reference: resize 256 then 224 crop, random flip p=0.5; desk scale \
             resizes 72 then crops 64"
                .into(),
        );
        RunConfig {
            seed: 17,
            method: Method::ClassifierInvariance,
            dataset_root: PathBuf::from("data/synth"),
            out_dir: PathBuf::from("runs/default"),
            dataset: DatasetSpec::default(),
            model: ModelConfig { widths: vec![16, 32, 64], embedding_dim: 32 },
            classifier: classifier.clone(),
            embedder: classifier,
            generator: OptConfig {
                lr: 2e-3,
                momentum: 0.9,
                weight_decay: 1e-4,
                batch_size: 32,
                epochs: 40,
                lr_decay_factor: 1.0,
                lr_decay_every: 0,
            },
            loss: LossConfig::default(),
            eval_every: 1,
            notes,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| anyhow::anyhow!("cannot parse config {}: {e}", path.display()))?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        self.dataset.validate().map_err(|e| e.to_string())?;
        self.classifier.validate("classifier")?;
        self.embedder.validate("embedder")?;
        self.generator.validate("generator")?;
        self.loss.validate().map_err(|e| e.to_string())?;
        if self.model.widths.is_empty() {
            return Err("model.widths must be nonempty".into());
        }
        if self.model.widths.iter().any(|w| *w == 0) {
            return Err("model.widths entries must be >= 1".into());
        }
        let div = 1usize << self.model.widths.len();
        if self.dataset.image_size % div != 0 {
            return Err(format!(
                "image_size {} is not divisible by 2^{} (encoder depth)",
                self.dataset.image_size,
                self.model.widths.len()
            ));
        }
        if self.eval_every == 0 {
            return Err("eval_every must be >= 1".into());
        }
        if self.method == Method::SiameseTriplet {
            if self.model.embedding_dim < 2 {
                return Err("method II needs model.embedding_dim >= 2".into());
            }
            if !self.loss.inner && !self.loss.outer && !self.loss.reg {
                return Err(
                    "method II with every loss term disabled cannot train anything".into()
                );
            }
        }
        Ok(())
    }

    fn hash_of(parts: &[&str]) -> String {
        let mut hasher = Sha256::new();
        for p in parts {
            hasher.update(p.as_bytes());
            hasher.update([0u8]);
        }
        format!("{:x}", hasher.finalize())
    }

    /// Scope hash for classifier checkpoints: everything that determines the
    /// trained classifier. Loss settings and generator schedule are excluded
    /// so ablation runs can reuse the same pretrained classifier.
    pub fn classifier_scope_hash(&self) -> String {
        Self::hash_of(&[
            "classifier",
            &serde_json::to_string(&self.dataset).unwrap(),
            &serde_json::to_string(&self.model.widths).unwrap(),
            &serde_json::to_string(&self.classifier).unwrap(),
            &self.seed.to_string(),
        ])
    }

    pub fn embedder_scope_hash(&self) -> String {
        Self::hash_of(&[
            "embedder",
            &serde_json::to_string(&self.dataset).unwrap(),
            &serde_json::to_string(&self.model.widths).unwrap(),
            &self.model.embedding_dim.to_string(),
            &serde_json::to_string(&self.embedder).unwrap(),
            &serde_json::to_string(&self.loss.margin).unwrap(),
            &self.seed.to_string(),
        ])
    }

    /// Scope hash for generator checkpoints: the full configuration.
    pub fn generator_scope_hash(&self) -> String {
        Self::hash_of(&["generator", &serde_json::to_string(self).unwrap()])
    }

    pub fn f_scope_hash(&self) -> String {
        match self.method {
            Method::ClassifierInvariance => self.classifier_scope_hash(),
            Method::SiameseTriplet => self.embedder_scope_hash(),
        }
    }

    pub fn classifier_dir(&self) -> PathBuf {
        self.out_dir.join("classifier")
    }

    pub fn embedder_dir(&self) -> PathBuf {
        self.out_dir.join("embedder")
    }

    pub fn generator_dir(&self) -> PathBuf {
        self.out_dir.join("generator")
    }

    pub fn f_dir(&self) -> PathBuf {
        match self.method {
            Method::ClassifierInvariance => self.classifier_dir(),
            Method::SiameseTriplet => self.embedder_dir(),
        }
    }

    pub fn f_best_checkpoint(&self) -> PathBuf {
        self.f_dir().join("best.params")
    }
}

/// Command-line overrides applied on top of a config file or the defaults.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<Method>,
    pub lambda: Option<f64>,
    pub no_inner: bool,
    pub no_outer: bool,
    pub no_reg: bool,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub target_mode: Option<TargetMode>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(method) = self.method {
            cfg.method = method;
        }
        if let Some(lambda) = self.lambda {
            cfg.loss.lambda = lambda;
        }
        if self.no_inner {
            cfg.loss.inner = false;
        }
        if self.no_outer {
            cfg.loss.outer = false;
        }
        if self.no_reg {
            cfg.loss.reg = false;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(data) = &self.data {
            cfg.dataset_root = data.clone();
        }
        if let Some(mode) = self.target_mode {
            cfg.loss.target_mode = mode;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn json_roundtrip_preserves_config() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert!(text.contains("\"method\": \"I\""));
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut cfg = RunConfig::default();
        cfg.generator.epochs = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.loss.margin = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.method = Method::SiameseTriplet;
        cfg.loss.inner = false;
        cfg.loss.outer = false;
        cfg.loss.reg = false;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.dataset.image_size = 60; // not divisible by 8
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn scope_hashes_ignore_loss_but_track_seed() {
        let base = RunConfig::default();
        let mut ablated = base.clone();
        ablated.loss.lambda = 0.0;
        assert_eq!(base.classifier_scope_hash(), ablated.classifier_scope_hash());
        assert_ne!(base.generator_scope_hash(), ablated.generator_scope_hash());
        let mut reseeded = base.clone();
        reseeded.seed = 99;
        assert_ne!(base.classifier_scope_hash(), reseeded.classifier_scope_hash());
    }

    #[test]
    fn lr_schedule_steps_down() {
        let opt = OptConfig {
            lr: 1.0,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 4,
            epochs: 30,
            lr_decay_factor: 0.1,
            lr_decay_every: 12,
        };
        assert_eq!(opt.lr_at_epoch(0), 1.0);
        assert_eq!(opt.lr_at_epoch(11), 1.0);
        assert!((opt.lr_at_epoch(12) - 0.1).abs() < 1e-12);
        assert!((opt.lr_at_epoch(24) - 0.01).abs() < 1e-12);
        let none = OptConfig { lr_decay_every: 0, ..opt };
        assert_eq!(none.lr_at_epoch(25), 1.0);
    }

    #[test]
    fn overrides_apply_in_order() {
        let mut cfg = RunConfig::default();
        let ov = Overrides {
            seed: Some(5),
            method: Some(Method::SiameseTriplet),
            lambda: Some(0.0),
            no_outer: true,
            ..Default::default()
        };
        ov.apply(&mut cfg);
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.method, Method::SiameseTriplet);
        assert_eq!(cfg.loss.lambda, 0.0);
        assert!(!cfg.loss.outer);
        assert!(cfg.loss.inner);
    }
}
