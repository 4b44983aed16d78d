//! Dataset discovery, loading, splitting, augmentation and synthetic data.

mod augment;
mod records;
mod sample;
mod split;
mod synth;

pub use augment::{apply_augment, augment, augment_with, transform_plane, AugmentConfig, AugmentParams};
pub use records::{
    read_manifest, scan_busi, scan_layout, write_manifest, ClassFolder, ClassLabel, DatasetRecord, FolderLayout,
    Reject, ScanReport, Split,
};
pub use sample::{binarize, load_sample, save_gray_png, RecordSource, SampleSource, SegBatch, SegSample};
pub use split::{make_splits, split_indices, ClassFilter, SplitPlan};
pub use synth::{connected_components, synth_generate, synth_mixed, write_busi_layout, FG_FRACTION_RANGE};
