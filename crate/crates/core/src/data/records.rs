//! On-disk dataset layouts, record discovery and JSON-lines manifests.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    Benign,
    Malignant,
    Normal,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Benign, ClassLabel::Malignant, ClassLabel::Normal];

    pub fn as_str(&self) -> &'static str {
        match self {
            ClassLabel::Benign => "benign",
            ClassLabel::Malignant => "malignant",
            ClassLabel::Normal => "normal",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ClassLabel::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown class label {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub image_path: PathBuf,
    pub mask_paths: Vec<PathBuf>,
    pub class_label: ClassLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// A file that could not be turned into a record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ScanReport {
    /// Sorted by image path.
    pub records: Vec<DatasetRecord>,
    pub rejects: Vec<Reject>,
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// `"<class> (<n>)"` stems.
fn is_busi_stem(stem: &str, class: &str) -> bool {
    stem.strip_prefix(class)
        .and_then(|r| r.strip_prefix(" ("))
        .and_then(|r| r.strip_suffix(')'))
        .is_some_and(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()))
}

enum BusiName {
    Image(String),
    /// Base stem and mask index (0 for the unnumbered mask).
    Mask(String, u32),
}

fn parse_busi_name(file: &str) -> Option<BusiName> {
    let stem = file.strip_suffix(".png")?;
    match stem.find("_mask") {
        None => Some(BusiName::Image(stem.to_string())),
        Some(i) => {
            let rest = &stem[i + "_mask".len()..];
            let index = if rest.is_empty() {
                0
            } else {
                rest.strip_prefix('_')?.parse().ok()?
            };
            Some(BusiName::Mask(stem[..i].to_string(), index))
        }
    }
}

/// Scans a BUSI-style root with `benign/`, `malignant/` and `normal/` folders.
///
/// Images are `"<class> (<n>).png"` with masks `"<class> (<n>)_mask.png"` and
/// optional `"_mask_<k>.png"` siblings. Missing class folders are skipped;
/// images without any mask, orphan masks and unrecognized names are reported
/// as rejects.
pub fn scan_busi(root: &Path, include_normal: bool) -> Result<ScanReport> {
    let mut report = ScanReport::default();
    for class in ClassLabel::ALL {
        if class == ClassLabel::Normal && !include_normal {
            continue;
        }
        let dir = root.join(class.as_str());
        if !dir.is_dir() {
            continue;
        }
        let mut images: BTreeMap<String, PathBuf> = BTreeMap::new();
        let mut masks: BTreeMap<String, Vec<(u32, PathBuf)>> = BTreeMap::new();
        for path in list_dir(&dir)? {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            match parse_busi_name(&name) {
                Some(BusiName::Image(stem)) if is_busi_stem(&stem, class.as_str()) => {
                    images.insert(stem, path);
                }
                Some(BusiName::Mask(stem, k)) if is_busi_stem(&stem, class.as_str()) => {
                    masks.entry(stem).or_default().push((k, path));
                }
                _ => report.rejects.push(Reject { path, reason: "unrecognized file name".into() }),
            }
        }
        for (stem, image_path) in images {
            match masks.remove(&stem) {
                Some(mut m) => {
                    m.sort();
                    report.records.push(DatasetRecord {
                        image_path,
                        mask_paths: m.into_iter().map(|(_, p)| p).collect(),
                        class_label: class,
                        split: None,
                    });
                }
                None => report.rejects.push(Reject { path: image_path, reason: "image has no mask".into() }),
            }
        }
        for (_, orphans) in masks {
            for (_, path) in orphans {
                report.rejects.push(Reject { path, reason: "mask without image".into() });
            }
        }
    }
    report.records.sort_by(|a, b| a.image_path.cmp(&b.image_path));
    report.rejects.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(report)
}

/// Where one class lives in a folder-per-role layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassFolder {
    pub label: ClassLabel,
    /// Relative to the dataset root.
    pub image_dir: PathBuf,
    pub mask_dir: PathBuf,
    /// Appended to the image stem to name its mask, e.g. `"_mask"`.
    #[serde(default)]
    pub mask_suffix: String,
}

/// Layout descriptor for datasets that keep images and masks in separate
/// folders with matching file stems.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FolderLayout {
    pub classes: Vec<ClassFolder>,
    #[serde(default = "default_extension")]
    pub extension: String,
}

fn default_extension() -> String {
    "png".into()
}

impl FolderLayout {
    /// `<class>/images/<stem>.png` with `<class>/masks/<stem>.png`.
    pub fn default_two_class() -> Self {
        let folder = |label: ClassLabel| ClassFolder {
            label,
            image_dir: PathBuf::from(label.as_str()).join("images"),
            mask_dir: PathBuf::from(label.as_str()).join("masks"),
            mask_suffix: String::new(),
        };
        FolderLayout {
            classes: vec![folder(ClassLabel::Benign), folder(ClassLabel::Malignant)],
            extension: default_extension(),
        }
    }
}

/// Scans a dataset described by a [`FolderLayout`].
pub fn scan_layout(root: &Path, layout: &FolderLayout) -> Result<ScanReport> {
    let mut report = ScanReport::default();
    let ext = layout.extension.as_str();
    for folder in &layout.classes {
        let dir = root.join(&folder.image_dir);
        if !dir.is_dir() {
            continue;
        }
        for path in list_dir(&dir)? {
            if path.extension().and_then(|e| e.to_str()) != Some(ext) {
                report.rejects.push(Reject { path, reason: format!("not a .{ext} file") });
                continue;
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let mask = root
                .join(&folder.mask_dir)
                .join(format!("{stem}{}.{ext}", folder.mask_suffix));
            if mask.is_file() {
                report.records.push(DatasetRecord {
                    image_path: path,
                    mask_paths: vec![mask],
                    class_label: folder.label,
                    split: None,
                });
            } else {
                report.rejects.push(Reject { path, reason: format!("missing mask {}", mask.display()) });
            }
        }
    }
    report.records.sort_by(|a, b| a.image_path.cmp(&b.image_path));
    Ok(report)
}

/// Writes one JSON record per line.
pub fn write_manifest(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<DatasetRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&line)?;
        if record.mask_paths.is_empty() {
            return Err(Error::Validation(format!(
                "manifest record {} has no mask",
                record.image_path.display()
            )));
        }
        out.push(record);
    }
    Ok(out)
}
