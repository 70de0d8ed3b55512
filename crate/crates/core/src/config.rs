//! Experiment configuration, read from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::TaskSpec;
use crate::error::{FsdError, Result};
use crate::losses::{LossKind, LossWeights};
use crate::model::EncoderConfig;
use crate::optim::AdamSettings;
use crate::train::{DistillConfig, MemorySettings, TrainSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    /// Directory holding `train.tsv`, `dev.tsv` and `test.tsv`.
    /// Defaults to `<out_dir>/data`.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    pub n_classes: usize,
    /// Generator settings used by `gen-data`.
    #[serde(default)]
    pub synthetic: Option<TaskSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherTraining {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optim: AdamSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    pub kind: LossKind,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub optim: AdamSettings,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub memory: MemorySettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    /// Number of batches in the heatmap pool.
    pub pool_size: usize,
    pub pool_batch_size: usize,
    pub pool_seed: u64,
    /// Keep a student checkpoint every this many steps for RD replay; 0 keeps
    /// only the first and last step.
    pub rd_every: usize,
    /// Fixed RD evaluation batches taken in order from the dev split.
    pub rd_batches: usize,
    pub rd_batch_size: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            pool_size: 4,
            pool_batch_size: 32,
            pool_seed: 0,
            rd_every: 0,
            rd_batches: 2,
            rd_batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Seed of the single teacher shared by every student seed.
    pub teacher_seed: u64,
    pub task: TaskSection,
    pub teacher: EncoderConfig,
    pub student: EncoderConfig,
    pub teacher_training: TeacherTraining,
    pub distill: DistillSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| FsdError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| FsdError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FsdError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(FsdError::Config("seeds must not be empty".into()));
        }
        self.teacher.validate()?;
        self.student.validate()?;
        let t = &self.teacher;
        let s = &self.student;
        if (t.d_model, t.max_seq_len, t.vocab_size, t.n_classes) != (s.d_model, s.max_seq_len, s.vocab_size, s.n_classes) {
            return Err(FsdError::Config(
                "teacher and student must share d_model, max_seq_len, vocab_size and n_classes".into(),
            ));
        }
        if s.n_layers > t.n_layers {
            return Err(FsdError::Config("student cannot be deeper than the teacher".into()));
        }
        if self.task.n_classes != t.n_classes {
            return Err(FsdError::Config("task.n_classes differs from the model's".into()));
        }
        if let Some(spec) = &self.task.synthetic {
            if spec.vocab > t.vocab_size || spec.seq_len > t.max_seq_len {
                return Err(FsdError::Config("synthetic task does not fit the model vocabulary or length".into()));
            }
        }
        self.teacher_settings().validate()?;
        self.distill_config(self.seeds[0]).validate()?;
        let a = &self.analysis;
        if a.pool_size < 2 || a.pool_batch_size < 2 || a.rd_batches == 0 || a.rd_batch_size < 2 {
            return Err(FsdError::Config("analysis needs pool_size, pool_batch_size >= 2 and rd batches of size >= 2".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.task.dir.clone().unwrap_or_else(|| self.out_dir.join("data"))
    }

    pub fn teacher_settings(&self) -> TrainSettings {
        TrainSettings {
            epochs: self.teacher_training.epochs,
            batch_size: self.teacher_training.batch_size,
            optim: self.teacher_training.optim.clone(),
            seed: self.teacher_seed,
        }
    }

    pub fn distill_config(&self, seed: u64) -> DistillConfig {
        let d = &self.distill;
        DistillConfig {
            kind: d.kind,
            weights: d.weights.clone(),
            optim: d.optim.clone(),
            epochs: d.epochs,
            batch_size: d.batch_size,
            seed,
            memory: d.memory.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"
out_dir = "runs/toy"
seeds = [1, 2]
teacher_seed = 7

[task]
n_classes = 2
synthetic = { task = "parity", size = 64, vocab = 12, seq_len = 6, seed = 1 }

[teacher]
n_layers = 2
n_heads = 2
d_model = 8
d_ff = 16
vocab_size = 12
max_seq_len = 6
n_classes = 2
dropout_rate = 0.0
pooling = "mean"

[student]
n_layers = 1
n_heads = 2
d_model = 8
d_ff = 16
vocab_size = 12
max_seq_len = 6
n_classes = 2
dropout_rate = 0.0
pooling = "mean"

[teacher_training]
epochs = 1
batch_size = 8

[distill]
kind = "ILG"
epochs = 1
batch_size = 8
"#;

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::from_toml(TOY).unwrap();
        assert_eq!(c.distill.kind, LossKind::IntraLocalGlobal);
        assert_eq!(c.distill.weights, LossWeights::default());
        assert_eq!(c.data_dir(), PathBuf::from("runs/toy/data"));
        assert_eq!(c.distill_config(2).seed, 2);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::from_toml(TOY).unwrap();
        let b = ExperimentConfig::from_toml(&a.to_toml().unwrap()).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig::from_toml(&TOY.replace("teacher_seed = 7", "teacher_seed = 8")).unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentConfig::from_toml(&TOY.replace("seeds = [1, 2]", "seeds = []")).is_err());
        assert!(ExperimentConfig::from_toml(&TOY.replace("kind = \"ILG\"", "kind = \"XYZ\"")).is_err());
        assert!(ExperimentConfig::from_toml(&TOY.replace("n_layers = 1", "n_layers = 3")).is_err());
        assert!(ExperimentConfig::from_toml(&format!("{TOY}\nbogus = 1\n")).is_err());
    }
}
