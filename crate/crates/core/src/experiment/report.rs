//! CSV rows and aligned text tables for experiment reports.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::complexity::ComplexityReport;
use crate::data::ClassFilter;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

/// Right-aligns every column except the first.
pub fn format_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn metric_cells(m: &MetricsReport) -> Vec<String> {
    m.values().iter().map(|v| format!("{v:.4}")).collect()
}

/// One model's accuracy and complexity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub metrics: MetricsReport,
    pub complexity: ComplexityReport,
}

impl EvalRow {
    pub const CSV_HEADER: &'static str = "model,dice,precision,recall,miou,accuracy,params_e6,size_mib,gflops";

    pub fn cells(&self) -> Vec<String> {
        let mut cells = vec![self.model.clone()];
        cells.extend(metric_cells(&self.metrics));
        cells.push(format!("{:.1}", self.complexity.params_millions()));
        cells.push(format!("{:.1}", self.complexity.size_mib));
        cells.push(format!("{:.2}", self.complexity.gflops));
        cells
    }

    pub fn csv_row(&self) -> String {
        self.cells().join(",")
    }
}

/// Replaces rows whose model name matches and appends the rest, so
/// re-evaluating a checkpoint never duplicates it.
pub fn upsert_csv(path: &Path, header: &str, rows: &[(String, String)]) -> Result<Vec<String>> {
    let mut lines: Vec<String> = match fs::read_to_string(path) {
        Ok(text) => {
            let mut it = text.lines();
            if it.next() != Some(header) {
                return Err(Error::Validation(format!("{} does not start with {header:?}", path.display())));
            }
            it.map(str::to_string).collect()
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    for (key, row) in rows {
        let prefix = format!("{key},");
        match lines.iter_mut().find(|l| l.starts_with(&prefix)) {
            Some(l) => *l = row.clone(),
            None => lines.push(row.clone()),
        }
    }
    let mut text = String::from(header);
    text.push('\n');
    for l in &lines {
        text.push_str(l);
        text.push('\n');
    }
    write_text(path, &text)?;
    Ok(lines)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub train: ClassFilter,
    pub test: ClassFilter,
    pub n_train: usize,
    pub n_test: usize,
    pub metrics: MetricsReport,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "train,test,n_train,n_test,dice,precision,recall,miou,accuracy";

    pub fn name(&self) -> String {
        format!("{}/{}", self.train, self.test)
    }

    pub fn cells(&self) -> Vec<String> {
        let mut cells = vec![self.train.to_string(), self.test.to_string(), self.n_train.to_string(), self.n_test.to_string()];
        cells.extend(metric_cells(&self.metrics));
        cells
    }

    pub fn csv_row(&self) -> String {
        self.cells().join(",")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(AblationRow::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn to_table(&self) -> String {
        let header: Vec<&str> = AblationRow::CSV_HEADER.split(',').collect();
        format_table(&header, &self.rows.iter().map(AblationRow::cells).collect::<Vec<_>>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(model: &str) -> EvalRow {
        EvalRow {
            model: model.into(),
            metrics: MetricsReport { dice: 0.83594, precision: 0.85, recall: 0.8, miou: 0.75, accuracy: 0.96, n_images: 3 },
            complexity: ComplexityReport { name: "x".into(), params: 2_200_000, size_mib: 8.39, gflops: 16.594, resolution: (512, 512) },
        }
    }

    #[test]
    fn eval_row_format() {
        assert_eq!(row("student").csv_row(), "student,0.8359,0.8500,0.8000,0.7500,0.9600,2.2,8.4,16.59");
        assert_eq!(EvalRow::CSV_HEADER.split(',').count(), row("s").cells().len());
    }

    #[test]
    fn upsert_replaces_and_appends() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("e.csv");
        let entry = |m: &str, v: &str| (m.to_string(), format!("{m},{v}"));
        upsert_csv(&p, "model,v", &[entry("a", "1")]).unwrap();
        upsert_csv(&p, "model,v", &[entry("b", "2")]).unwrap();
        let lines = upsert_csv(&p, "model,v", &[entry("a", "3")]).unwrap();
        assert_eq!(lines, vec!["a,3", "b,2"]);
        assert_eq!(fs::read_to_string(&p).unwrap(), "model,v\na,3\nb,2\n");
        assert!(upsert_csv(&p, "other", &[]).is_err());
    }

    #[test]
    fn table_alignment() {
        let t = format_table(&["model", "dice"], &[vec!["student".into(), "0.9".into()], vec!["t".into(), "0.8765".into()]]);
        assert_eq!(t, "model      dice\nstudent     0.9\nt        0.8765\n");
    }
}
