//! Segmentation metrics: confusion matrices, per-class IoU and mIoU over a
//! class subset, pixel accuracy, and dataset-level evaluation helpers.

use std::fmt::Write as _;
use std::ops::AddAssign;

use crate::datagen::{load_batch, ImageSource};
use crate::error::{invalid, Error, Result};
use crate::labels::LabelMap;
use crate::model::Model;

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let classes = rows.len();
        if classes == 0 || rows.iter().any(|r| r.len() != classes) {
            return Err(invalid("confusion matrix must be square and non-empty"));
        }
        Ok(Self { classes, counts: rows.concat() })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulates one prediction/ground-truth pair.
    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.dims() != truth.dims() {
            return Err(invalid(format!("prediction {:?} vs truth {:?}", pred.dims(), truth.dims())));
        }
        pred.check_classes(self.classes)?;
        truth.check_classes(self.classes)?;
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn true_positives(&self, s: usize) -> u64 {
        self.get(s, s)
    }

    pub fn false_positives(&self, s: usize) -> u64 {
        (0..self.classes).filter(|&t| t != s).map(|t| self.get(t, s)).sum()
    }

    pub fn false_negatives(&self, s: usize) -> u64 {
        (0..self.classes).filter(|&p| p != s).map(|p| self.get(s, p)).sum()
    }

    /// `trace / total`; `None` for an empty matrix.
    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| (0..self.classes).map(|s| self.get(s, s)).sum::<u64>() as f64 / total as f64)
    }
}

impl AddAssign<&ConfusionMatrix> for ConfusionMatrix {
    fn add_assign(&mut self, rhs: &ConfusionMatrix) {
        assert_eq!(self.classes, rhs.classes, "merging matrices of different class counts");
        for (a, b) in self.counts.iter_mut().zip(&rhs.counts) {
            *a += b;
        }
    }
}

pub fn confusion(pred: &LabelMap, truth: &LabelMap, classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, truth)?;
    Ok(cm)
}

/// Classes included in the mean.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSubset(Vec<usize>);

impl ClassSubset {
    pub fn new(mut ids: Vec<usize>, classes: usize) -> Result<Self> {
        ids.sort_unstable();
        ids.dedup();
        if ids.is_empty() {
            return Err(invalid("class subset is empty"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= classes) {
            return Err(invalid(format!("class {bad} not in 0..{classes}")));
        }
        Ok(Self(ids))
    }

    pub fn all(classes: usize) -> Self {
        Self((0..classes).collect())
    }

    /// Parses a comma-separated id list such as `0,2,3`.
    pub fn parse(text: &str, classes: usize) -> Result<Self> {
        let ids = text
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<usize>().map_err(|e| invalid(format!("bad class id {s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(ids, classes)
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    /// IoU per class of the full matrix; `None` when TP + FP + FN = 0.
    pub per_class: Vec<Option<f64>>,
    pub subset: ClassSubset,
    pub miou: f64,
    pub accuracy: f64,
}

impl IouReport {
    /// CSV with one row per class and a final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,iou,in_subset\n");
        for (s, iou) in self.per_class.iter().enumerate() {
            let v = iou.map(|v| format!("{v:.6}")).unwrap_or_else(|| "nan".into());
            let _ = writeln!(out, "{s},{v},{}", u8::from(self.subset.ids().contains(&s)));
        }
        let _ = writeln!(out, "mean,{:.6},1", self.miou);
        let _ = writeln!(out, "accuracy,{:.6},1", self.accuracy);
        out
    }

    /// Human-readable table: one column per class plus mIoU, in percent.
    pub fn to_table(&self) -> String {
        let mut header = String::from("|");
        let mut rule = String::from("|");
        let mut row = String::from("|");
        for (s, iou) in self.per_class.iter().enumerate() {
            let marker = if self.subset.ids().contains(&s) { "" } else { "*" };
            let _ = write!(header, " c{s}{marker:<1} |");
            rule.push_str("------|");
            match iou {
                Some(v) => {
                    let _ = write!(row, " {:>4.1} |", v * 100.0);
                }
                None => row.push_str("   -  |"),
            }
        }
        let _ = write!(header, " mIoU |");
        rule.push_str("------|");
        let _ = write!(row, " {:>4.1} |", self.miou * 100.0);
        format!("{header}\n{rule}\n{row}\n")
    }
}

/// Per-class IoU over the full matrix and their mean over `subset`,
/// skipping classes with an empty union.
pub fn miou(cm: &ConfusionMatrix, subset: &ClassSubset) -> Result<IouReport> {
    if let Some(&bad) = subset.ids().iter().find(|&&s| s >= cm.classes) {
        return Err(invalid(format!("subset class {bad} outside matrix of {} classes", cm.classes)));
    }
    let per_class: Vec<Option<f64>> = (0..cm.classes)
        .map(|s| {
            let tp = cm.true_positives(s);
            let denom = tp + cm.false_positives(s) + cm.false_negatives(s);
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let included: Vec<f64> = subset.ids().iter().filter_map(|&s| per_class[s]).collect();
    if included.is_empty() {
        return Err(Error::UndefinedMetric("every subset class has an empty union".into()));
    }
    let miou = included.iter().sum::<f64>() / included.len() as f64;
    let accuracy = cm.accuracy().unwrap_or(0.0);
    Ok(IouReport { per_class, subset: subset.clone(), miou, accuracy })
}

/// How test images are normalized during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalMode {
    /// Frozen running statistics, one image at a time.
    #[default]
    Running,
    /// Each batch of `batch_size` test images normalized with its own
    /// statistics.
    BatchStats { batch_size: usize },
}

/// Confusion matrix of `model` over a labeled source.
pub fn evaluate(model: &Model, data: &dyn ImageSource, mode: EvalMode) -> Result<ConfusionMatrix> {
    if data.is_empty() {
        return Err(invalid("evaluation set is empty"));
    }
    let mut cm = ConfusionMatrix::new(model.classes());
    match mode {
        EvalMode::Running => {
            for i in 0..data.len() {
                let truth = data.labels(i)?.ok_or_else(|| invalid("evaluation set has no labels"))?;
                let pred = model.predict(&data.image(i)?)?;
                cm.add(&pred, &truth)?;
            }
        }
        EvalMode::BatchStats { batch_size } => {
            if batch_size == 0 {
                return Err(invalid("batch size must be >= 1"));
            }
            let indices: Vec<usize> = (0..data.len()).collect();
            for chunk in indices.chunks(batch_size) {
                let truth = crate::datagen::load_labels(data, chunk)?;
                let pred = model.predict_with_batch_stats(&load_batch(data, chunk)?)?;
                cm.add(&pred, &truth)?;
            }
        }
    }
    Ok(cm)
}

/// mIoU in percent points over all classes, for traces.
pub fn miou_percent(model: &Model, data: &dyn ImageSource, subset: &ClassSubset) -> Result<f64> {
    let cm = evaluate(model, data, EvalMode::Running)?;
    Ok(miou(&cm, subset)?.miou * 100.0)
}
