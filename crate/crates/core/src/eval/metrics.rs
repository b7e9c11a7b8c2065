use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CosineClassifier;
use crate::par;
use crate::raster::LabelMap;

/// Maps model classes onto evaluation classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMapping {
    targets: Vec<Option<usize>>,
    eval_classes: usize,
}

impl ClassMapping {
    pub fn identity(classes: usize) -> Self {
        Self {
            targets: (0..classes).map(Some).collect(),
            eval_classes: classes,
        }
    }

    /// Folds every imprinted class of `head` into its root class.
    pub fn from_head(head: &CosineClassifier, eval_classes: usize) -> Self {
        Self {
            targets: (0..head.class_count()).map(|c| Some(head.root_class(c))).collect(),
            eval_classes,
        }
    }

    /// Adds or replaces `source -> target`.
    pub fn with(mut self, source: usize, target: usize) -> Self {
        if self.targets.len() <= source {
            self.targets.resize(source + 1, None);
        }
        self.targets[source] = Some(target);
        self
    }

    pub fn eval_classes(&self) -> usize {
        self.eval_classes
    }

    pub fn map(&self, class: usize) -> Option<usize> {
        self.targets.get(class).copied().flatten().filter(|&t| t < self.eval_classes)
    }
}

/// Rows are ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::invalid("confusion counts must be square"));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn false_positives(&self, c: usize) -> u64 {
        (0..self.classes).filter(|&g| g != c).map(|g| self.get(g, c)).sum()
    }

    pub fn false_negatives(&self, c: usize) -> u64 {
        (0..self.classes).filter(|&p| p != c).map(|p| self.get(c, p)).sum()
    }
}

/// Counts `(gt, mapping(pred))` pairs over one image.
pub fn confusion(pred: &LabelMap, gt: &LabelMap, mapping: &ClassMapping) -> Result<ConfusionMatrix> {
    if pred.dims() != gt.dims() {
        return Err(Error::invalid("prediction and ground truth differ in size"));
    }
    let k = mapping.eval_classes();
    let mut conf = ConfusionMatrix::new(k);
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        let p = mapping
            .map(p)
            .ok_or_else(|| Error::invalid(format!("predicted class {p} has no evaluation mapping")))?;
        if g >= k {
            return Err(Error::invalid(format!("ground-truth class {g} out of range")));
        }
        conf.counts[g * k + p] += 1;
    }
    Ok(conf)
}

/// Sum of per-image confusion matrices.
pub fn confusion_over(pairs: &[(LabelMap, LabelMap)], mapping: &ClassMapping) -> Result<ConfusionMatrix> {
    let parts = par::map(pairs, |(pred, gt)| confusion(pred, gt, mapping));
    let mut total = ConfusionMatrix::new(mapping.eval_classes());
    for p in parts {
        total.merge(&p?);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    /// `None` when the ratio is 0/0.
    pub iou: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    /// Mean over classes with a defined IoU.
    pub mean_iou: Option<f64>,
}

impl MetricsReport {
    pub fn class(&self, c: usize) -> &ClassMetrics {
        &self.classes[c]
    }

    pub fn iou(&self, c: usize) -> Option<f64> {
        self.classes[c].iou
    }

    pub fn recall(&self, c: usize) -> Option<f64> {
        self.classes[c].recall
    }

    pub fn precision(&self, c: usize) -> Option<f64> {
        self.classes[c].precision
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// IoU, precision and recall per class. `names` may be shorter than the
/// class count; missing names are generated.
pub fn metrics(conf: &ConfusionMatrix, names: &[&str]) -> MetricsReport {
    let classes: Vec<ClassMetrics> = (0..conf.classes())
        .map(|c| {
            let (tp, fp, fnn) = (conf.true_positives(c), conf.false_positives(c), conf.false_negatives(c));
            ClassMetrics {
                name: names.get(c).map(|s| s.to_string()).unwrap_or_else(|| format!("class{c}")),
                iou: ratio(tp, tp + fp + fnn),
                precision: ratio(tp, tp + fp),
                recall: ratio(tp, tp + fnn),
            }
        })
        .collect();
    let defined: Vec<f64> = classes.iter().filter_map(|c| c.iou).collect();
    let mean_iou = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    MetricsReport { classes, mean_iou }
}
