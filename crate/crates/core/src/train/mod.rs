//! Optimization, schedules, training loops and checkpoints.

mod checkpoint;
mod history;
mod optim;
mod schedule;
mod session;

pub use checkpoint::{
    load_checkpoint, read_meta, save_checkpoint, sidecar_path, CheckpointInfo, CheckpointMeta, TensorEntry,
};
pub use history::{smoothed, EpochRecord, TrainHistory};
pub use optim::{Adam, ADAM_BETAS, ADAM_EPS};
pub use schedule::{lr_plateau_step, PlateauScheduler, DEFAULT_MIN_LR, PLATEAU_REL_THRESHOLD};
pub use session::{
    distill_student, evaluate, train_teacher, DistillOutcome, Subset, TeacherMode, Teachers, TrainConfig,
    TrainSession,
};
