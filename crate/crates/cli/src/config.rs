//! Pipeline configuration: one JSON file, then command-line overrides.

use std::path::{Path, PathBuf};

use lic_core::codec::{LicConfig, TrainConfig};
use lic_core::engine::PatchConfig;
use lic_core::nn::AdamConfig;
use lic_core::pruner::PruneSchedule;
use lic_core::watermark::QawConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Holds `train/` and `test/` image directories.
    pub corpus: PathBuf,
    pub out: PathBuf,
    /// Provider key, client registry and client key files.
    pub keys: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: "corpus".into(),
            out: "out".into(),
            keys: "out/keys".into(),
        }
    }
}

impl Paths {
    pub fn train_dir(&self) -> PathBuf {
        self.corpus.join("train")
    }

    pub fn test_dir(&self) -> PathBuf {
        self.corpus.join("test")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub train: usize,
    pub test: usize,
    pub size: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            train: 24,
            test: 6,
            size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Every stochastic component derives its seed from this one.
    pub seed: u64,
    pub paths: Paths,
    pub corpus: CorpusConfig,
    pub model: LicConfig,
    pub train: TrainConfig,
    pub prune: PruneSchedule,
    /// Fine-tuning schedule under fake quantization (QAT and QAW).
    pub qat: TrainConfig,
    pub qaw: QawConfig,
    pub patch: PatchConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            paths: Paths::default(),
            corpus: CorpusConfig::default(),
            model: LicConfig {
                stages: 2,
                ..LicConfig::default()
            },
            train: TrainConfig::default(),
            prune: PruneSchedule::default(),
            qat: TrainConfig {
                steps: 300,
                adam: AdamConfig {
                    lr: 1e-3,
                    ..AdamConfig::default()
                },
                ..TrainConfig::default()
            },
            qaw: QawConfig::default(),
            patch: PatchConfig::default(),
        }
    }
}

/// Command-line overrides; `None` keeps the file value.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub keys: Option<PathBuf>,
    pub lambda: Option<f64>,
    pub channels: Option<usize>,
    pub stages: Option<usize>,
    pub train_steps: Option<usize>,
    pub qat_steps: Option<usize>,
    pub prune_steps: Option<usize>,
    pub bits: Option<usize>,
    pub beta: Option<f64>,
    pub patch: Option<usize>,
    pub overlap: Option<usize>,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($src:expr => $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        set!(o.seed => self.seed);
        set!(o.corpus => self.paths.corpus);
        set!(o.out => self.paths.out);
        set!(o.keys => self.paths.keys);
        set!(o.lambda => self.model.lambda);
        set!(o.channels => self.model.channels);
        set!(o.stages => self.model.stages);
        set!(o.train_steps => self.train.steps);
        set!(o.qat_steps => self.qat.steps);
        set!(o.prune_steps => self.prune.finetune.steps);
        set!(o.bits => self.qaw.bits);
        set!(o.beta => self.qaw.beta);
        set!(o.patch => self.patch.patch);
        set!(o.overlap => self.patch.overlap);
    }

    /// Overwrites every stage seed with one derived from [`Self::seed`].
    pub fn propagate_seed(&mut self) {
        self.train.seed = self.seed;
        self.prune.finetune.seed = self.seed.wrapping_add(1);
        self.qat.seed = self.seed.wrapping_add(2);
    }

    pub fn model_seed(&self) -> u64 {
        self.seed
    }

    pub fn corpus_seed(&self) -> u64 {
        self.seed.wrapping_add(3)
    }

    /// Seed for the test split, disjoint from the training split.
    pub fn test_corpus_seed(&self) -> u64 {
        self.seed.wrapping_add(4)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        self.model.validate()?;
        self.prune.validate()?;
        self.qaw.validate()?;
        let s = self.model.total_stride();
        self.patch.validate(s)?;
        for (name, tc) in [("train", &self.train), ("prune.finetune", &self.prune.finetune), ("qat", &self.qat)] {
            if tc.batch_size == 0 {
                return bad(format!("{name}.batch_size must be positive"));
            }
            if tc.crop % s != 0 {
                return bad(format!("{name}.crop {} must be a multiple of the total stride {s}", tc.crop));
            }
            if !(tc.adam.lr.is_finite() && tc.adam.lr > 0.0) {
                return bad(format!("{name}.adam.lr must be positive"));
            }
        }
        if self.train.steps == 0 {
            return bad("train.steps must be positive".into());
        }
        let c = &self.corpus;
        if c.train == 0 || c.test == 0 {
            return bad("corpus.train and corpus.test must be positive".into());
        }
        if c.size == 0 || !c.size.is_multiple_of(s) {
            return bad(format!("corpus.size {} must be a positive multiple of the total stride {s}", c.size));
        }
        if self.train.crop > c.size {
            return bad(format!("train.crop {} exceeds corpus.size {}", self.train.crop, c.size));
        }
        Ok(())
    }

    /// Loads `path` (or defaults), applies overrides and seeds, validates.
    pub fn resolve(path: Option<&Path>, o: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(o);
        cfg.propagate_seed();
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_and_flags_win() {
        let cfg = PipelineConfig::from_json(r#"{"seed": 5, "model": {"lambda": 0.05}, "qaw": {"bits": 32}}"#).unwrap();
        assert_eq!(cfg.model.lambda, 0.05);
        assert_eq!(cfg.model.channels, 32);
        assert_eq!(cfg.qaw.bits, 32);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, cfg.to_json()).unwrap();
        let o = Overrides {
            lambda: Some(0.1),
            seed: Some(9),
            ..Overrides::default()
        };
        let r = PipelineConfig::resolve(Some(&p), &o).unwrap();
        assert_eq!((r.model.lambda, r.seed, r.train.seed, r.qat.seed), (0.1, 9, 9, 11));
        assert_eq!(r.qaw.bits, 32);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(PipelineConfig::from_json(r#"{"nope": 1}"#).is_err());
        let o = Overrides {
            patch: Some(30),
            ..Overrides::default()
        };
        assert!(matches!(PipelineConfig::resolve(None, &o), Err(CliError::Core(_))));
        let mut c = PipelineConfig::default();
        c.corpus.size = 30;
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
        PipelineConfig::default().validate().unwrap();
    }
}
