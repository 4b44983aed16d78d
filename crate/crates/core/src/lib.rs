//! Dual-teacher knowledge distillation for binary lesion segmentation.
//!
//! A compact student segmenter learns from ground-truth masks and from the
//! soft predictions of two class-specific teachers, one trained on benign
//! lesions and one on malignant lesions. The crate carries its own small
//! tensor and autograd engine so that every loss and layer is inspectable.

pub mod arch;
pub mod autograd;
pub mod complexity;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod ops;
pub mod tensor;
pub mod train;

pub use arch::{ArchSpec, LayerKind, LayerSpec};
pub use autograd::Var;
pub use complexity::{analyze, ComplexityReport};
pub use data::{ClassFilter, ClassLabel, DatasetRecord, SampleSource, SegBatch, SegSample, SplitPlan};
pub use error::{Error, Result};
pub use experiment::{ExperimentConfig, RunLayout};
pub use losses::{total_loss, LossWeights};
pub use metrics::{image_metrics, MetricsReport};
pub use models::{builtin_spec, Network, NetworkHandle, Role, StudentConfig, TeacherConfig};
pub use tensor::Tensor;
pub use train::{TeacherMode, TrainConfig, TrainHistory, TrainSession};
