//! Class-stratified train/test partitions with class filters.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::records::{ClassLabel, DatasetRecord, Split};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassFilter {
    Benign,
    Malignant,
    All,
}

impl ClassFilter {
    pub fn classes(&self) -> &'static [ClassLabel] {
        match self {
            ClassFilter::Benign => &[ClassLabel::Benign],
            ClassFilter::Malignant => &[ClassLabel::Malignant],
            ClassFilter::All => &[ClassLabel::Benign, ClassLabel::Malignant],
        }
    }

    pub fn accepts(&self, label: ClassLabel) -> bool {
        self.classes().contains(&label)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ClassFilter::Benign => "benign",
            ClassFilter::Malignant => "malignant",
            ClassFilter::All => "all",
        }
    }
}

impl fmt::Display for ClassFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ClassFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [ClassFilter::Benign, ClassFilter::Malignant, ClassFilter::All]
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown class filter {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitPlan {
    pub train_classes: ClassFilter,
    pub test_classes: ClassFilter,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan { train_classes: ClassFilter::All, test_classes: ClassFilter::All, train_fraction: 0.8, seed: 42 }
    }
}

impl SplitPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

/// Train and test indices into `labels`, each in ascending order.
///
/// Every class present is shuffled with its own seeded stream and cut at
/// `round(n · train_fraction)` (kept in `1..n` when `n ≥ 2`). The class
/// filters are applied afterwards, so the two sides never share an index.
pub fn split_indices(labels: &[ClassLabel], plan: &SplitPlan) -> Result<(Vec<usize>, Vec<usize>)> {
    plan.validate()?;
    for filter in [plan.train_classes, plan.test_classes] {
        for &class in filter.classes() {
            if !labels.contains(&class) {
                return Err(Error::Config(format!("requested class {class} has no records")));
            }
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (stream, class) in ClassLabel::ALL.into_iter().enumerate() {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        rng.set_stream(stream as u64);
        idx.shuffle(&mut rng);
        let n = idx.len();
        let mut cut = (n as f64 * plan.train_fraction).round() as usize;
        if n >= 2 {
            cut = cut.clamp(1, n - 1);
        }
        train.extend(idx[..cut].iter().copied().filter(|_| plan.train_classes.accepts(class)));
        test.extend(idx[cut..].iter().copied().filter(|_| plan.test_classes.accepts(class)));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Partitions records and stamps each side with its split.
pub fn make_splits(records: &[DatasetRecord], plan: &SplitPlan) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>)> {
    let labels: Vec<_> = records.iter().map(|r| r.class_label).collect();
    let (train, test) = split_indices(&labels, plan)?;
    let take = |idx: &[usize], split| {
        idx.iter()
            .map(|&i| DatasetRecord { split: Some(split), ..records[i].clone() })
            .collect::<Vec<_>>()
    };
    Ok((take(&train, Split::Train), take(&test, Split::Test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(benign: usize, malignant: usize) -> Vec<DatasetRecord> {
        let make = |class: ClassLabel, i: usize| DatasetRecord {
            image_path: format!("{class}/{class} ({i}).png").into(),
            mask_paths: vec![format!("{class}/{class} ({i})_mask.png").into()],
            class_label: class,
            split: None,
        };
        (1..=benign)
            .map(|i| make(ClassLabel::Benign, i))
            .chain((1..=malignant).map(|i| make(ClassLabel::Malignant, i)))
            .collect()
    }

    #[test]
    fn stratified_counts() {
        let (train, test) = make_splits(&records(10, 10), &SplitPlan::default()).unwrap();
        assert_eq!((train.len(), test.len()), (16, 4));
        let count = |v: &[DatasetRecord], c| v.iter().filter(|r| r.class_label == c).count();
        assert_eq!(count(&train, ClassLabel::Benign), 8);
        assert_eq!(count(&test, ClassLabel::Malignant), 2);
        assert!(train.iter().all(|r| r.split == Some(Split::Train)));
        assert!(test.iter().all(|r| r.split == Some(Split::Test)));
    }

    #[test]
    fn same_seed_same_partition() {
        let recs = records(13, 7);
        let plan = SplitPlan { seed: 9, ..SplitPlan::default() };
        assert_eq!(make_splits(&recs, &plan).unwrap(), make_splits(&recs, &plan).unwrap());
        let other = SplitPlan { seed: 10, ..plan };
        assert_ne!(make_splits(&recs, &plan).unwrap(), make_splits(&recs, &other).unwrap());
    }

    #[test]
    fn cross_class_filter_never_leaks() {
        let recs = records(10, 10);
        let plan = SplitPlan { train_classes: ClassFilter::Benign, test_classes: ClassFilter::Malignant, ..SplitPlan::default() };
        let (train, test) = make_splits(&recs, &plan).unwrap();
        assert!(train.iter().all(|r| r.class_label == ClassLabel::Benign));
        assert!(test.iter().all(|r| r.class_label == ClassLabel::Malignant));
        assert!(train.iter().all(|a| test.iter().all(|b| a.image_path != b.image_path)));
        assert_eq!((train.len(), test.len()), (8, 2));
    }

    #[test]
    fn absent_class_and_bad_fraction_are_config_errors() {
        let plan = SplitPlan { test_classes: ClassFilter::Malignant, ..SplitPlan::default() };
        assert!(matches!(make_splits(&records(5, 0), &plan), Err(Error::Config(_))));
        let plan = SplitPlan { train_fraction: 1.0, ..SplitPlan::default() };
        assert!(matches!(make_splits(&records(5, 5), &plan), Err(Error::Config(_))));
    }
}
