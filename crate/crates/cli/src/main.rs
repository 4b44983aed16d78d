//! `djkd`: train teachers, distill a student, evaluate checkpoints, run the
//! class ablation matrix and report model complexity.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use djkd_core::data::{scan_busi, synth_mixed, write_busi_layout, write_manifest};
use djkd_core::experiment::{
    cmd_ablation, cmd_analyze, cmd_distill, cmd_evaluate, cmd_train_teachers, format_table, DistillOptions, EvalRow,
    DATA_ROOT_ENV,
};
use djkd_core::{ComplexityReport, ExperimentConfig, RunLayout};

#[derive(Parser, Debug)]
#[command(name = "djkd", version, about = "Dual-teacher knowledge distillation for lesion segmentation")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed for every random choice; overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Loss-weight preset: single_teacher or double_teacher.
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<String>,
    /// Compute device. Only `cpu` exists.
    #[arg(long, global = true, default_value = "cpu", env = "DJKD_DEVICE")]
    device: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the benign and malignant teachers.
    TrainTeachers,
    /// Train the student against ground truth and teacher soft maps.
    Distill {
        #[arg(long, value_name = "PATH")]
        benign_teacher: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        malignant_teacher: Option<PathBuf>,
    },
    /// Score checkpoints on the test split and update reports/evaluation.csv.
    Evaluate {
        #[arg(required = true, value_name = "CHECKPOINT")]
        checkpoints: Vec<PathBuf>,
    },
    /// Train and test one network per class pair of the ablation matrix.
    Ablation,
    /// Parameter count, size and GFLOPs of a built-in model or spec file.
    Analyze {
        /// unet_reference, teacher, student, teacher_compact or a spec JSON path.
        #[arg(required = true)]
        targets: Vec<String>,
        #[arg(long, default_value_t = 512)]
        resolution: usize,
        /// Print CSV instead of an aligned table.
        #[arg(long)]
        csv: bool,
    },
    /// Write a synthetic dataset in the benign/malignant folder layout.
    Synth {
        #[arg(value_name = "DIR")]
        dir: PathBuf,
        #[arg(long, default_value_t = 125)]
        benign: usize,
        #[arg(long, default_value_t = 125)]
        malignant: usize,
        #[arg(long, default_value_t = 128)]
        resolution: usize,
    },
    /// Index a benign/malignant/normal folder tree and write a manifest.
    Scan {
        #[arg(value_name = "ROOT", env = DATA_ROOT_ENV)]
        root: PathBuf,
        #[arg(long)]
        include_normal: bool,
        /// Manifest path; printed to stdout when omitted.
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
    },
    /// Print the effective config after flag overrides.
    ShowConfig,
}

fn load_config(g: &GlobalArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &g.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(p) = &g.preset {
        cfg.loss.preset = p.clone();
        cfg.loss.weights = None;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn config_label(g: &GlobalArgs) -> String {
    match &g.config {
        Some(p) => format!("config {}", p.display()),
        None => "default config".to_string(),
    }
}

fn print_eval(rows: &[EvalRow], reports: &Path) {
    let header: Vec<&str> = EvalRow::CSV_HEADER.split(',').collect();
    let cells: Vec<Vec<String>> = rows.iter().map(EvalRow::cells).collect();
    print!("{}", format_table(&header, &cells));
    println!("report: {}", reports.join("evaluation.csv").display());
}

fn print_complexity(rows: &[ComplexityReport], csv: bool) {
    if csv {
        println!("{}", ComplexityReport::CSV_HEADER);
        for r in rows {
            println!("{}", r.csv_row());
        }
        return;
    }
    let header: Vec<&str> = ComplexityReport::CSV_HEADER.split(',').collect();
    let cells: Vec<Vec<String>> = rows.iter().map(|r| r.csv_row().split(',').map(str::to_string).collect()).collect();
    print!("{}", format_table(&header, &cells));
}

fn run_experiment(g: &GlobalArgs, command: &Command) -> anyhow::Result<()> {
    let cfg = load_config(g)?;
    let layout = RunLayout::new(&cfg.output_dir);
    match command {
        Command::TrainTeachers => {
            for s in cmd_train_teachers(&cfg)? {
                println!("{s}");
            }
        }
        Command::Distill { benign_teacher, malignant_teacher } => {
            let opts = DistillOptions {
                preset: g.preset.clone(),
                benign_teacher: benign_teacher.clone(),
                malignant_teacher: malignant_teacher.clone(),
            };
            println!("{}", cmd_distill(&cfg, &opts)?);
        }
        Command::Evaluate { checkpoints } => {
            let rows = cmd_evaluate(&cfg, checkpoints)?;
            print_eval(&rows, &layout.reports());
        }
        Command::Ablation => {
            let report = cmd_ablation(&cfg)?;
            print!("{}", report.to_table());
            println!("report: {}", layout.reports().join("ablation.csv").display());
        }
        Command::ShowConfig => println!("{}", cfg.resolved().to_json()?),
        Command::Analyze { .. } | Command::Synth { .. } | Command::Scan { .. } => unreachable!(),
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    if g.device != "cpu" {
        bail!("device {:?} is not available; only \"cpu\" is supported", g.device);
    }
    match &cli.command {
        Command::Analyze { targets, resolution, csv } => {
            let rows = targets.iter().map(|t| cmd_analyze(t, *resolution)).collect::<Result<Vec<_>, _>>()?;
            print_complexity(&rows, *csv);
        }
        Command::Synth { dir, benign, malignant, resolution } => {
            let seed = g.seed.unwrap_or(ExperimentConfig::default().seed);
            let samples = synth_mixed(*benign, *malignant, *resolution, seed)?;
            let records = write_busi_layout(dir, &samples)?;
            println!("wrote {} image/mask pairs under {}", records.len(), dir.display());
        }
        Command::Scan { root, include_normal, manifest } => {
            let report = scan_busi(root, *include_normal)?;
            for r in &report.rejects {
                eprintln!("skipped {}: {}", r.path.display(), r.reason);
            }
            match manifest {
                Some(p) => {
                    write_manifest(p, &report.records)?;
                    println!("{} records -> {}", report.records.len(), p.display());
                }
                None => {
                    for r in &report.records {
                        println!("{}", serde_json::to_string(r)?);
                    }
                }
            }
        }
        other => run_experiment(g, other).with_context(|| config_label(g))?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
