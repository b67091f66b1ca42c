//! Experiment configuration, read from TOML.
//!
//! Every section is optional; omitted values fall back to the smoke setup (a
//! 2000-pair noisy substitution cipher, 2000 vanilla steps, K=4, fixed
//! phases of 500 steps). Unknown keys are rejected.
//!
//! ```toml
//! criterion = "recovery"
//!
//! [corpus]
//! size = 2000
//! dev_fraction = 0.05
//! synthetic = { task = "noisy-cipher", vocab_size = 50, min_len = 3, max_len = 12, corrupt_fraction = 0.2, rho = 0.5 }
//! # or: src_path = "train.de", tgt_path = "train.en", tokenize = "whitespace"
//!
//! [model]
//! emb_dim = 32
//! hidden_dim = 64
//!
//! [training]
//! vanilla_steps = 2000
//! peak_lr = 0.003
//!
//! [schedule]
//! mode = "dynamic"
//! max_steps_per_phase = 800
//!
//! [seeds]
//! data = 1
//! vanilla = 2
//! cl = 3
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Side, SyntheticTask, SyntheticTaskSpec, TokenizeMode};
use crate::difficulty::Criterion;
use crate::error::{Error, Result};
use crate::scheduler::ScheduleConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// Generator settings; mutually exclusive with `src_path`/`tgt_path`.
    #[serde(default)]
    pub synthetic: Option<SyntheticTaskSpec>,
    /// Number of synthetic pairs before the dev split.
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default)]
    pub src_path: Option<PathBuf>,
    #[serde(default)]
    pub tgt_path: Option<PathBuf>,
    #[serde(default)]
    pub tokenize: TokenizeMode,
    #[serde(default = "default_dev_fraction")]
    pub dev_fraction: f64,
}

fn default_size() -> usize {
    2000
}

fn default_dev_fraction() -> f64 {
    0.05
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            synthetic: Some(SyntheticTaskSpec {
                task: SyntheticTask::NoisyCipher,
                vocab_size: 50,
                min_len: 3,
                max_len: 12,
                corrupt_fraction: 0.2,
                rho: 0.5,
            }),
            size: default_size(),
            src_path: None,
            tgt_path: None,
            tokenize: TokenizeMode::Whitespace,
            dev_fraction: default_dev_fraction(),
        }
    }
}

/// Architecture settings; vocabulary sizes come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    /// Greedy decoding cap; defaults to the longest training target plus 10.
    pub max_decode_len: Option<usize>,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            emb_dim: 32,
            hidden_dim: 64,
            dropout: 0.0,
            label_smoothing: 0.1,
            max_decode_len: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub vanilla_steps: u64,
    /// Token budget (source plus target) per batch.
    pub max_tokens: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    /// Dev-BLEU logging cadence of the vanilla and baseline runs.
    pub eval_interval: u64,
    /// Sentences per greedy-decoding batch.
    pub decode_batch: usize,
    pub min_freq: usize,
    /// Also continue the vanilla model to the CL run's step count.
    pub baseline: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            vanilla_steps: 2000,
            max_tokens: 400,
            peak_lr: 3e-3,
            warmup_steps: 200,
            eval_interval: 250,
            decode_batch: 64,
            min_freq: 1,
            baseline: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub vanilla: u64,
    pub cl: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 1,
            vanilla: 2,
            cl: 3,
        }
    }
}

/// Settings for the non-recovery criteria.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriteriaConfig {
    pub lm_order: usize,
    pub lm_side: Side,
    /// `token v1 v2 ...` text file; the vanilla model's source embeddings
    /// are used when absent.
    pub embeddings_path: Option<PathBuf>,
}

impl Default for CriteriaConfig {
    fn default() -> Self {
        Self {
            lm_order: 3,
            lm_side: Side::Source,
            embeddings_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub histogram_bin_width: f64,
    /// Number of trailing phase checkpoints averaged for the extra
    /// "averaged" dev-BLEU figure; 1 disables averaging.
    pub average_checkpoints: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            histogram_bin_width: 10.0,
            average_checkpoints: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_criterion")]
    pub criterion: Criterion,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub criteria: CriteriaConfig,
    #[serde(default)]
    pub report: ReportConfig,
}

fn default_criterion() -> Criterion {
    Criterion::Recovery
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            criterion: default_criterion(),
            output_dir: None,
            corpus: CorpusConfig::default(),
            model: ModelSettings::default(),
            training: TrainingConfig::default(),
            schedule: ScheduleConfig::default(),
            seeds: Seeds::default(),
            criteria: CriteriaConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML; relative paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(path) = p.as_mut() {
                if path.is_relative() {
                    *path = base_dir.join(&*path);
                }
            }
        };
        resolve(&mut cfg.corpus.src_path);
        resolve(&mut cfg.corpus.tgt_path);
        resolve(&mut cfg.criteria.embeddings_path);
        resolve(&mut cfg.output_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml(&text, base).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        match (&c.synthetic, &c.src_path, &c.tgt_path) {
            (Some(spec), None, None) => {
                spec.validate()?;
                if c.size < 2 {
                    return Err(Error::Config("corpus.size must be at least 2".into()));
                }
            }
            (None, Some(src), Some(tgt)) => {
                for p in [src, tgt] {
                    if !p.is_file() {
                        return Err(Error::Config(format!("corpus file {} does not exist", p.display())));
                    }
                }
            }
            (Some(_), _, _) => {
                return Err(Error::Config("corpus.synthetic and corpus file paths are mutually exclusive".into()))
            }
            _ => return Err(Error::Config("corpus needs either synthetic or both src_path and tgt_path".into())),
        }
        if !(c.dev_fraction > 0.0 && c.dev_fraction < 1.0) {
            return Err(Error::Config(format!("corpus.dev_fraction {} outside (0, 1)", c.dev_fraction)));
        }
        let m = &self.model;
        if m.emb_dim == 0 || m.hidden_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if m.max_decode_len == Some(0) {
            return Err(Error::Config("model.max_decode_len must be positive".into()));
        }
        let t = &self.training;
        if t.max_tokens == 0 || t.eval_interval == 0 || t.decode_batch == 0 || t.min_freq == 0 {
            return Err(Error::Config(
                "training.max_tokens, eval_interval, decode_batch and min_freq must be positive".into(),
            ));
        }
        if !(t.peak_lr > 0.0 && t.peak_lr.is_finite()) {
            return Err(Error::Config(format!("training.peak_lr {} must be positive", t.peak_lr)));
        }
        if t.warmup_steps == 0 {
            return Err(Error::Config("training.warmup_steps must be positive".into()));
        }
        self.schedule.validate()?;
        if !(1..=3).contains(&self.criteria.lm_order) {
            return Err(Error::Config(format!("criteria.lm_order {} outside 1..=3", self.criteria.lm_order)));
        }
        if let Some(p) = &self.criteria.embeddings_path {
            if !p.is_file() {
                return Err(Error::Config(format!("embeddings file {} does not exist", p.display())));
            }
        }
        if !(self.report.histogram_bin_width > 0.0 && self.report.histogram_bin_width.is_finite()) {
            return Err(Error::Config("report.histogram_bin_width must be positive".into()));
        }
        if self.report.average_checkpoints == 0 {
            return Err(Error::Config("report.average_checkpoints must be positive".into()));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::ScheduleMode;

    #[test]
    fn defaults_are_the_smoke_setup() {
        let cfg = ExperimentConfig::from_toml("", Path::new(".")).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.validate().unwrap();
        let spec = cfg.corpus.synthetic.as_ref().unwrap();
        assert_eq!((spec.vocab_size, spec.min_len, spec.max_len), (50, 3, 12));
        assert_eq!(cfg.corpus.size, 2000);
        assert_eq!(cfg.training.vanilla_steps, 2000);
        assert_eq!(cfg.schedule.k, 4);
        assert_eq!(cfg.schedule.max_steps_per_phase, 500);
    }

    #[test]
    fn parses_sections_and_rejects_unknown_keys() {
        let text = r#"
            criterion = "length"
            [schedule]
            mode = "dynamic"
            max_steps_per_phase = 800
            [seeds]
            cl = 9
        "#;
        let cfg = ExperimentConfig::from_toml(text, Path::new(".")).unwrap();
        assert_eq!(cfg.criterion, Criterion::Length);
        assert_eq!(cfg.schedule.mode, ScheduleMode::Dynamic);
        assert_eq!(cfg.seeds.cl, 9);
        assert_eq!(cfg.seeds.data, 1);

        for bad in ["bogus = 1", "[model]\nwidth = 3", "[schedule]\nmode = \"sideways\""] {
            assert!(ExperimentConfig::from_toml(bad, Path::new(".")).is_err(), "{bad}");
        }
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml(), Path::new(".")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let other = ExperimentConfig {
            seeds: Seeds { cl: 4, ..Seeds::default() },
            ..cfg.clone()
        };
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn validation_catches_bad_corpus_setups() {
        let files_missing = "[corpus]\nsrc_path = \"nope.src\"\ntgt_path = \"nope.tgt\"";
        let cfg = ExperimentConfig::from_toml(files_missing, Path::new("/nonexistent")).unwrap();
        assert_eq!(cfg.corpus.src_path.as_deref(), Some(Path::new("/nonexistent/nope.src")));
        assert!(cfg.validate().is_err());

        let neither = ExperimentConfig::from_toml("[corpus]\nsize = 10", Path::new(".")).unwrap();
        assert!(neither.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.corpus.dev_fraction = 0.0;
        assert!(cfg.validate().is_err());
    }
}
