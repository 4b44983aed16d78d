//! Config-driven experiments producing checkpoints, histories and reports.

mod commands;
mod config;
mod dataset;
mod report;

pub use commands::{
    cmd_ablation, cmd_analyze, cmd_distill, cmd_evaluate, cmd_train_teachers, DistillOptions, RunLayout,
    StageSummary, ABLATION_ROWS,
};
pub use config::{
    AblationModel, DataSection, DataSource, ExperimentConfig, LossSection, ModelSection, SyntheticSection,
    TrainSection, DATA_ROOT_ENV,
};
pub use dataset::{prepare_data, PreparedData, PRELOAD_BUDGET_BYTES};
pub use report::{format_table, upsert_csv, AblationReport, AblationRow, EvalRow};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::read_manifest;
    use crate::error::Error;
    use crate::losses::LossWeights;
    use crate::train::read_meta;
    use std::fs;
    use std::path::Path;

    fn tiny(out: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::synthetic_demo(out);
        cfg.data.resolution = 32;
        cfg.data.synthetic = SyntheticSection { benign: 5, malignant: 5 };
        cfg.model.student.widths = vec![4, 8];
        for t in [&mut cfg.train.teacher, &mut cfg.train.student, &mut cfg.train.ablation] {
            t.epochs = 1;
            t.batch_size = 4;
        }
        cfg
    }

    #[test]
    fn teachers_distill_evaluate_round() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny(tmp.path());
        let teachers = cmd_train_teachers(&cfg).unwrap();
        assert_eq!(teachers.len(), 2);
        let layout = RunLayout::new(tmp.path());
        assert_eq!(read_manifest(&layout.manifests().join("all.jsonl")).unwrap().len(), 10);
        assert_eq!(read_manifest(&layout.manifests().join("test.jsonl")).unwrap().len(), 2);
        let first = fs::read_to_string(&teachers[0].history).unwrap();

        let rerun = cmd_train_teachers(&cfg).unwrap();
        assert_eq!(fs::read_to_string(&rerun[0].history).unwrap(), first);

        let opts = DistillOptions {
            preset: Some("double_teacher".into()),
            benign_teacher: Some(teachers[0].checkpoint.clone()),
            malignant_teacher: Some(teachers[1].checkpoint.clone()),
        };
        let student = cmd_distill(&cfg, &opts).unwrap();
        let meta = read_meta(&student.checkpoint).unwrap();
        assert_eq!(meta.info.loss_weights, Some(LossWeights::double_teacher()));

        let single = DistillOptions { preset: Some("single_teacher".into()), malignant_teacher: None, ..opts.clone() };
        let s1 = cmd_distill(&cfg, &single).unwrap();
        assert_eq!(read_meta(&s1.checkpoint).unwrap().info.loss_weights, Some(LossWeights::single_teacher()));

        let missing = DistillOptions { malignant_teacher: None, ..opts };
        assert!(matches!(cmd_distill(&cfg, &missing).unwrap_err().root(), Error::Config(_)));

        let rows = cmd_evaluate(&cfg, &[teachers[0].checkpoint.clone()]).unwrap();
        assert_eq!(rows.len(), 1);
        let rows = cmd_evaluate(&cfg, &[student.checkpoint.clone(), teachers[0].checkpoint.clone()]).unwrap();
        assert_eq!(rows.len(), 2);
        let csv = fs::read_to_string(layout.reports().join("evaluation.csv")).unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], EvalRow::CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("benign_teacher,"));
    }

    #[test]
    fn missing_root_writes_nothing() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("out");
        let mut cfg = tiny(&out);
        cfg.data.source = DataSource::Busi;
        cfg.data.root = Some(tmp.path().join("absent"));
        let err = cmd_train_teachers(&cfg).unwrap_err();
        assert!(matches!(err.root(), Error::Config(_)), "{err}");
        assert!(!out.exists());

        cfg.data.synthetic_fallback = true;
        assert_eq!(prepare_data(&cfg).unwrap().len(), 10);
    }

    #[test]
    fn ablation_has_seven_disjoint_rows() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny(tmp.path());
        cfg.model.ablation = AblationModel::Student;
        let report = cmd_ablation(&cfg).unwrap();
        assert_eq!(report.rows.len(), 7);
        let all = report.rows.iter().find(|r| r.name() == "all/all").unwrap();
        let b = &report.rows[0];
        let m = &report.rows[1];
        assert_eq!(all.n_train, b.n_train + m.n_train);
        let csv = fs::read_to_string(RunLayout::new(tmp.path()).reports().join("ablation.csv")).unwrap();
        assert_eq!(csv.lines().count(), 8);
    }

    #[test]
    fn analyze_builtins_and_files() {
        let r = cmd_analyze("student", 512).unwrap();
        assert_eq!(r.name, "student");
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("spec.json");
        fs::write(&p, crate::models::unet_reference_spec().to_json().unwrap()).unwrap();
        let f = cmd_analyze(p.to_str().unwrap(), 512).unwrap();
        assert_eq!(f, cmd_analyze("unet_reference", 512).unwrap());
        assert!(cmd_analyze("nonexistent_model", 512).is_err());
    }
}
