//! Turning the data section into an indexable sample source.

use std::path::Path;

use crate::data::{
    scan_busi, scan_layout, split_indices, synth_mixed, write_busi_layout, ClassLabel, DatasetRecord, RecordSource,
    Reject, SampleSource, SegSample, SplitPlan,
};
use crate::error::{Error, Result};
use crate::train::Subset;

use super::config::{DataSource, ExperimentConfig};

/// Decoded datasets up to this many bytes are held in memory.
pub const PRELOAD_BUDGET_BYTES: usize = 1 << 30;

enum Samples {
    Memory(Vec<SegSample>),
    Disk(RecordSource),
}

/// The dataset of one experiment in canonical order.
pub struct PreparedData {
    samples: Samples,
    /// Disk records, empty for synthetic data until materialized.
    pub records: Vec<DatasetRecord>,
    pub rejects: Vec<Reject>,
    pub synthetic: bool,
}

impl PreparedData {
    pub fn source(&self) -> &dyn SampleSource {
        match &self.samples {
            Samples::Memory(v) => v,
            Samples::Disk(r) => r,
        }
    }

    pub fn len(&self) -> usize {
        self.source().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Vec<ClassLabel> {
        let s = self.source();
        (0..s.len()).map(|i| s.class_label(i)).collect()
    }

    /// Train and test index lists for `plan`.
    pub fn split(&self, plan: &SplitPlan) -> Result<(Vec<usize>, Vec<usize>)> {
        split_indices(&self.labels(), plan)
    }

    pub fn subset(&self, indices: &[usize]) -> Subset<'_> {
        Subset::new(self.source(), indices.to_vec())
    }

    /// Writes synthetic samples as a BUSI-style tree under `dir` and records
    /// them; a no-op for disk-backed data.
    pub fn materialize(&mut self, dir: &Path) -> Result<()> {
        if let Samples::Memory(samples) = &self.samples {
            if self.synthetic && self.records.is_empty() {
                self.records = write_busi_layout(dir, samples)?;
            }
        }
        Ok(())
    }
}

fn synthetic(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let s = &cfg.data.synthetic;
    let samples = synth_mixed(s.benign, s.malignant, cfg.data.resolution, cfg.seed)?;
    Ok(PreparedData { samples: Samples::Memory(samples), records: Vec::new(), rejects: Vec::new(), synthetic: true })
}

/// Scans or generates the configured data. Nothing is written.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let cfg = cfg.resolved();
    if cfg.data.source == DataSource::Synthetic {
        return synthetic(&cfg);
    }
    let root = match cfg.data_root() {
        Some(root) if root.is_dir() => root,
        _ if cfg.data.synthetic_fallback => return synthetic(&cfg),
        Some(root) => return Err(Error::Config(format!("data root {} is not a directory", root.display()))),
        None => {
            return Err(Error::Config(format!(
                "no data root: set data.root or {}",
                super::config::DATA_ROOT_ENV
            )))
        }
    };
    let report = match (&cfg.data.source, &cfg.data.layout) {
        (DataSource::Folder, Some(layout)) => scan_layout(&root, layout)?,
        _ => scan_busi(&root, cfg.data.include_normal)?,
    };
    if report.records.is_empty() {
        if cfg.data.synthetic_fallback {
            return synthetic(&cfg);
        }
        return Err(Error::Config(format!("no usable records under {}", root.display())));
    }
    let res = cfg.data.resolution;
    let bytes = report.records.len() * res * res * 4 * 4;
    let source = RecordSource { records: report.records.clone(), resolution: res };
    let samples = if bytes <= PRELOAD_BUDGET_BYTES {
        Samples::Memory((0..source.len()).map(|i| source.sample(i)).collect::<Result<_>>()?)
    } else {
        Samples::Disk(source)
    };
    Ok(PreparedData { samples, records: report.records, rejects: report.rejects, synthetic: false })
}
