//! Experiment commands: teacher training, distillation, evaluation,
//! the class ablation matrix and complexity analysis.
//!
//! Each command validates its config and prepares the data before writing
//! anything under the output directory.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::arch::ArchSpec;
use crate::complexity::{analyze, ComplexityReport};
use crate::data::{write_manifest, ClassFilter, ClassLabel, DatasetRecord, SampleSource, Split, SplitPlan};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::MetricsReport;
use crate::models::{builtin_spec, Network, Role};
use crate::train::{
    distill_student, evaluate, load_checkpoint, save_checkpoint, train_teacher, CheckpointInfo, Subset, TeacherMode,
    Teachers, TrainHistory, TrainSession,
};

use super::config::{AblationModel, ExperimentConfig};
use super::dataset::{prepare_data, PreparedData};
use super::report::{format_table, upsert_csv, write_text, AblationReport, AblationRow, EvalRow};

/// The seven train/test class pairs of the ablation matrix, in order.
pub const ABLATION_ROWS: [(ClassFilter, ClassFilter); 7] = [
    (ClassFilter::Benign, ClassFilter::Benign),
    (ClassFilter::Malignant, ClassFilter::Malignant),
    (ClassFilter::Benign, ClassFilter::Malignant),
    (ClassFilter::Malignant, ClassFilter::Benign),
    (ClassFilter::Benign, ClassFilter::All),
    (ClassFilter::Malignant, ClassFilter::All),
    (ClassFilter::All, ClassFilter::All),
];

/// Paths inside one experiment's output directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn manifests(&self) -> PathBuf {
        self.root.join("manifests")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn histories(&self) -> PathBuf {
        self.root.join("histories")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn synthetic(&self) -> PathBuf {
        self.root.join("synthetic")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.checkpoints().join(format!("{name}.bin"))
    }

    pub fn history(&self, name: &str) -> PathBuf {
        self.histories().join(format!("{name}.csv"))
    }

    fn create(&self) -> Result<()> {
        for dir in [self.manifests(), self.checkpoints(), self.histories(), self.reports()] {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(())
    }
}

struct Run {
    cfg: ExperimentConfig,
    data: PreparedData,
    layout: RunLayout,
    train: Vec<usize>,
    test: Vec<usize>,
}

impl Run {
    fn subset(&self, indices: &[usize]) -> Subset<'_> {
        self.data.subset(indices)
    }

    fn class_subset(&self, indices: &[usize], class: ClassLabel) -> Subset<'_> {
        let labels = self.data.labels();
        let own: Vec<usize> = indices.iter().copied().filter(|&i| labels[i] == class).collect();
        self.data.subset(&own)
    }
}

/// Validates, prepares data, then creates the output tree with the config
/// copy and manifests.
fn begin(cfg: &ExperimentConfig, write_outputs: bool) -> Result<Run> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let mut data = prepare_data(&cfg)?;
    let (train, test) = data.split(&cfg.data.split)?;
    let layout = RunLayout::new(&cfg.output_dir);
    if write_outputs {
        layout.create()?;
        write_text(&layout.config(), &cfg.to_json()?)?;
        data.materialize(&layout.synthetic())?;
        if !data.records.is_empty() {
            let tag = |idx: &[usize], split: Split| -> Vec<DatasetRecord> {
                idx.iter().map(|&i| DatasetRecord { split: Some(split), ..data.records[i].clone() }).collect()
            };
            write_manifest(&layout.manifests().join("all.jsonl"), &data.records)?;
            write_manifest(&layout.manifests().join("train.jsonl"), &tag(&train, Split::Train))?;
            write_manifest(&layout.manifests().join("test.jsonl"), &tag(&test, Split::Test))?;
        }
    }
    Ok(Run { cfg, data, layout, train, test })
}

fn optional<'a>(s: &'a Subset<'a>) -> Option<&'a dyn SampleSource> {
    if s.is_empty() {
        None
    } else {
        Some(s)
    }
}

/// Outcome of one trained network.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSummary {
    pub name: String,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub epochs: usize,
    pub final_loss: f64,
    pub val: Option<MetricsReport>,
}

impl StageSummary {
    fn from_history(name: &str, checkpoint: PathBuf, history_path: PathBuf, h: &TrainHistory) -> Self {
        let last = h.last();
        StageSummary {
            name: name.to_string(),
            checkpoint,
            history: history_path,
            epochs: h.epochs.len(),
            final_loss: last.map_or(f64::NAN, |e| e.total),
            val: last.and_then(|e| e.val),
        }
    }
}

impl fmt::Display for StageSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} epochs, final loss {:.4}", self.name, self.epochs, self.final_loss)?;
        if let Some(v) = &self.val {
            write!(f, ", val dice {:.4} miou {:.4}", v.dice, v.miou)?;
        }
        write!(f, " -> {}", self.checkpoint.display())
    }
}

/// Trains the benign and malignant teachers on their classes of the train split.
pub fn cmd_train_teachers(cfg: &ExperimentConfig) -> Result<Vec<StageSummary>> {
    let run = begin(cfg, true)?;
    let spec = run.cfg.teacher_spec()?;
    let train = run.subset(&run.train);
    let mut out = Vec::new();
    for (role, class) in [(Role::BenignTeacher, ClassLabel::Benign), (Role::MalignantTeacher, ClassLabel::Malignant)] {
        let name = role.to_string();
        let val = run.class_subset(&run.test, class);
        let (net, history) = train_teacher(&spec, role, &train, optional(&val), &run.cfg.train.teacher)
            .map_err(|e| e.context(format!("training the {name}")))?;
        let ckpt = run.layout.checkpoint(&name);
        let info = CheckpointInfo { epoch: history.epochs.len(), seed: run.cfg.seed, loss_weights: None, temperature: None };
        save_checkpoint(&net, &ckpt, info)?;
        let hist = run.layout.history(&name);
        history.write_csv(&hist)?;
        out.push(StageSummary::from_history(&name, ckpt, hist, &history));
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DistillOptions {
    /// Overrides the loss section with a named preset.
    pub preset: Option<String>,
    pub benign_teacher: Option<PathBuf>,
    pub malignant_teacher: Option<PathBuf>,
}

/// Trains the student on the whole train split with the configured or
/// preset loss weights. The single-teacher preset reads its teacher from
/// the benign slot.
pub fn cmd_distill(cfg: &ExperimentConfig, opts: &DistillOptions) -> Result<StageSummary> {
    cfg.validate()?;
    let (weights, label) = match &opts.preset {
        Some(p) => (LossWeights::preset(p)?, p.clone()),
        None => (cfg.loss.resolved_weights()?, cfg.loss.weights.map_or(cfg.loss.preset.clone(), |_| "custom".into())),
    };
    let need = |w: f64, path: &Option<PathBuf>, which: &str| -> Result<Option<PathBuf>> {
        match path {
            _ if w == 0.0 => Ok(None),
            Some(p) => Ok(Some(p.clone())),
            None => Err(Error::Config(format!(
                "loss weights {:?} need a {which} teacher checkpoint",
                weights.as_array()
            ))),
        }
    };
    let benign_path = need(weights.benign, &opts.benign_teacher, "benign")?;
    let malignant_path = need(weights.malignant, &opts.malignant_teacher, "malignant")?;
    let load = |p: Option<PathBuf>| -> Result<_> {
        p.map(|p| load_checkpoint(&p).map(|(net, _)| net)).transpose()
    };
    let teachers = Teachers { benign: load(benign_path)?, malignant: load(malignant_path)? };

    let run = begin(cfg, true)?;
    let student = Network::new(run.cfg.student_spec()?, Role::Student, run.cfg.seed)?;
    let train = run.subset(&run.train);
    let test = run.subset(&run.test);
    let scfg = &run.cfg.train.student;
    let outcome = distill_student(student, teachers, &train, optional(&test), weights, run.cfg.loss.temperature, scfg)
        .map_err(|e| e.context("distilling the student"))?;

    let name = format!("student_{label}");
    let ckpt = run.layout.checkpoint(&name);
    let info = CheckpointInfo {
        epoch: outcome.history.epochs.len(),
        seed: run.cfg.seed,
        loss_weights: Some(weights),
        temperature: Some(run.cfg.loss.temperature),
    };
    save_checkpoint(&outcome.student, &ckpt, info.clone())?;
    if scfg.teacher_mode == TeacherMode::Cofinetune {
        for t in [&outcome.teachers.benign, &outcome.teachers.malignant].into_iter().flatten() {
            save_checkpoint(t, &run.layout.checkpoint(&format!("{}_cofinetuned", t.role())), info.clone())?;
        }
    }
    let hist = run.layout.history(&name);
    outcome.history.write_csv(&hist)?;
    Ok(StageSummary::from_history(&name, ckpt, hist, &outcome.history))
}

/// Evaluates checkpoints on the test split, upserting one row per model
/// into `reports/evaluation.csv`, and returns all rows of the report.
pub fn cmd_evaluate(cfg: &ExperimentConfig, checkpoints: &[PathBuf]) -> Result<Vec<EvalRow>> {
    if checkpoints.is_empty() {
        return Err(Error::Config("no checkpoints to evaluate".into()));
    }
    let run = begin(cfg, false)?;
    let test = run.subset(&run.test);
    let res = run.cfg.data.resolution;
    let mut rows = Vec::new();
    for path in checkpoints {
        let (net, _) = load_checkpoint(path)?;
        let model = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
        let metrics = evaluate(&net, &test, run.cfg.train.student.batch_size)
            .map_err(|e| e.context(format!("evaluating {}", path.display())))?;
        rows.push(EvalRow { model, metrics, complexity: analyze(net.spec(), res, res)? });
    }
    let reports = run.layout.reports();
    fs::create_dir_all(&reports).map_err(|e| Error::io(&reports, e))?;
    let entries: Vec<_> = rows.iter().map(|r| (r.model.clone(), r.csv_row())).collect();
    let lines = upsert_csv(&reports.join("evaluation.csv"), EvalRow::CSV_HEADER, &entries)?;
    let cells: Vec<Vec<String>> = lines.iter().map(|l| l.split(',').map(str::to_string).collect()).collect();
    let header: Vec<&str> = EvalRow::CSV_HEADER.split(',').collect();
    write_text(&reports.join("evaluation.txt"), &format_table(&header, &cells))?;
    Ok(rows)
}

fn ablation_spec(cfg: &ExperimentConfig) -> Result<ArchSpec> {
    match cfg.model.ablation {
        AblationModel::Teacher => cfg.teacher_spec(),
        AblationModel::Student => cfg.student_spec(),
    }
}

fn ablation_row(run: &Run, spec: &ArchSpec, train: ClassFilter, test: ClassFilter) -> Result<AblationRow> {
    let plan = SplitPlan { train_classes: train, test_classes: test, ..run.cfg.data.split.clone() };
    let (tr, te) = run.data.split(&plan)?;
    let train_set: HashSet<usize> = tr.iter().copied().collect();
    if te.iter().any(|i| train_set.contains(i)) {
        return Err(Error::Validation("train and test sets overlap".into()));
    }
    if !run.data.records.is_empty() {
        let paths: HashSet<&Path> = tr.iter().map(|&i| run.data.records[i].image_path.as_path()).collect();
        if te.iter().any(|&i| paths.contains(run.data.records[i].image_path.as_path())) {
            return Err(Error::Validation("train and test sets share an image file".into()));
        }
    }
    let net = Network::new(spec.clone(), Role::Student, run.cfg.seed)?;
    let mut session = TrainSession::supervised(net, &run.cfg.train.ablation)?;
    session.run(&run.subset(&tr), None)?;
    let metrics = evaluate(session.network(), &run.subset(&te), run.cfg.train.ablation.batch_size)?;
    Ok(AblationRow { train, test, n_train: tr.len(), n_test: te.len(), metrics })
}

/// Trains one network per train/test class pair and reports test metrics.
pub fn cmd_ablation(cfg: &ExperimentConfig) -> Result<AblationReport> {
    let run = begin(cfg, true)?;
    let spec = ablation_spec(&run.cfg)?;
    let mut report = AblationReport::default();
    for (train, test) in ABLATION_ROWS {
        let row = ablation_row(&run, &spec, train, test).map_err(|e| e.context(format!("ablation row {train}/{test}")))?;
        report.rows.push(row);
    }
    write_text(&run.layout.reports().join("ablation.csv"), &report.to_csv())?;
    write_text(&run.layout.reports().join("ablation.txt"), &report.to_table())?;
    Ok(report)
}

/// Complexity of a built-in model or of a spec JSON file.
pub fn cmd_analyze(target: &str, resolution: usize) -> Result<ComplexityReport> {
    let spec = match builtin_spec(target) {
        Ok(spec) => ArchSpec { name: target.to_string(), ..spec },
        Err(_) if Path::new(target).is_file() => {
            let path = Path::new(target);
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            ArchSpec::from_json(&text).map_err(|e| e.context(format!("spec {target}")))?
        }
        Err(e) => return Err(e),
    };
    analyze(&spec, resolution, resolution)
}
