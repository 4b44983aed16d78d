//! Segmentation networks built from declarative layer graphs.

mod builders;
mod gate;
mod network;

pub use builders::{builtin_spec, student_spec, teacher_spec, unet_reference_spec, StudentConfig, TeacherConfig};
pub use gate::{attention_gate_forward, AttentionGateSpec, AttentionMode, GateWeights, SoftAttentionRule};
pub use network::{CollectedStats, Network, NetworkHandle, NormBuffer, Role, BN_MOMENTUM};
