//! The single JSON document describing one experiment.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::ArchSpec;
use crate::data::{FolderLayout, SplitPlan};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::models::{student_spec, teacher_spec, StudentConfig, TeacherConfig};
use crate::train::TrainConfig;

/// Environment variable consulted when `data.root` is absent.
pub const DATA_ROOT_ENV: &str = "DJKD_DATA_ROOT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// `benign/`, `malignant/`, `normal/` folders with `_mask` siblings.
    #[default]
    Busi,
    /// Separate image and mask folders described by `data.layout`.
    Folder,
    /// Generated ellipse and star-polygon lesions.
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub benign: usize,
    pub malignant: usize,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection { benign: 125, malignant: 125 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    pub root: Option<PathBuf>,
    pub layout: Option<FolderLayout>,
    pub include_normal: bool,
    pub split: SplitPlan,
    pub resolution: usize,
    pub augment: bool,
    pub synthetic: SyntheticSection,
    /// Use synthetic data when a disk-backed source has no usable root.
    pub synthetic_fallback: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Busi,
            root: None,
            layout: None,
            include_normal: false,
            split: SplitPlan::default(),
            resolution: 512,
            augment: false,
            synthetic: SyntheticSection::default(),
            synthetic_fallback: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationModel {
    #[default]
    Teacher,
    Student,
}

/// Architectures. Their `resolution` fields are replaced by
/// `data.resolution` when networks are built for training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    /// Architecture trained in every ablation row.
    pub ablation: AblationModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub preset: String,
    /// Explicit weights; when present they replace the preset.
    pub weights: Option<LossWeights>,
    pub temperature: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection { preset: "double_teacher".into(), weights: None, temperature: 1.0 }
    }
}

impl LossSection {
    pub fn resolved_weights(&self) -> Result<LossWeights> {
        let w = match self.weights {
            Some(w) => w,
            None => LossWeights::preset(&self.preset)?,
        };
        w.validate()?;
        Ok(w)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub teacher: TrainConfig,
    pub student: TrainConfig,
    pub ablation: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            teacher: TrainConfig::default(),
            student: TrainConfig::default(),
            ablation: TrainConfig { epochs: 2, ..TrainConfig::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// The only seed; copied into the split plan and every training stage.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub train: TrainSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            output_dir: PathBuf::from("runs/default"),
            data: DataSection::default(),
            model: ModelSection::default(),
            loss: LossSection::default(),
            train: TrainSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Small synthetic experiment with the compact teacher at 128×128.
    pub fn synthetic_demo(output_dir: impl Into<PathBuf>) -> Self {
        let mut cfg = ExperimentConfig { output_dir: output_dir.into(), ..Self::default() };
        cfg.data.source = DataSource::Synthetic;
        cfg.data.resolution = 128;
        cfg.model.teacher = TeacherConfig::compact();
        cfg.model.student.resolution = 128;
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads and validates a config file; errors name the path.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_json(&text).map_err(|e| e.context(format!("config {}", path.display())))?;
        cfg.validate().map_err(|e| e.context(format!("config {}", path.display())))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Copies the global seed into every stage and the augmentation switch
    /// into every training stage.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.data.split.seed = c.seed;
        for t in [&mut c.train.teacher, &mut c.train.student, &mut c.train.ablation] {
            t.seed = c.seed;
            t.augment = c.data.augment;
        }
        c
    }

    pub fn teacher_spec(&self) -> Result<ArchSpec> {
        teacher_spec(&TeacherConfig { resolution: self.data.resolution, ..self.model.teacher.clone() })
    }

    pub fn student_spec(&self) -> Result<ArchSpec> {
        student_spec(&StudentConfig { resolution: self.data.resolution, ..self.model.student.clone() })
    }

    /// The data root from the config or, failing that, the environment.
    pub fn data_root(&self) -> Option<PathBuf> {
        self.data.root.clone().or_else(|| env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.resolved();
        c.data.split.validate()?;
        if c.data.resolution == 0 {
            return Err(Error::Config("data.resolution must be positive".into()));
        }
        c.teacher_spec().map_err(|e| e.context("model.teacher"))?;
        c.student_spec().map_err(|e| e.context("model.student"))?;
        c.loss.resolved_weights().map_err(|e| e.context("loss"))?;
        if !(c.loss.temperature > 0.0) {
            return Err(Error::Config(format!("loss.temperature must be positive, got {}", c.loss.temperature)));
        }
        for (name, t) in [("teacher", &c.train.teacher), ("student", &c.train.student), ("ablation", &c.train.ablation)] {
            t.validate().map_err(|e| e.context(format!("train.{name}")))?;
        }
        match c.data.source {
            DataSource::Synthetic => {
                if c.data.synthetic.benign == 0 || c.data.synthetic.malignant == 0 {
                    return Err(Error::Config("data.synthetic needs at least one benign and one malignant image".into()));
                }
                if c.data.resolution < 16 {
                    return Err(Error::Config("synthetic data needs data.resolution ≥ 16".into()));
                }
            }
            DataSource::Folder if c.data.layout.is_none() => {
                return Err(Error::Config("data.source \"folder\" requires data.layout".into()));
            }
            _ => {}
        }
        if c.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("output_dir must not be empty".into()));
        }
        Ok(())
    }
}
