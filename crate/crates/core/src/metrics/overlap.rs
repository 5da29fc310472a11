use serde::{Deserialize, Serialize};
use twinseg_tensor::Tensor;

use crate::error::{Error, Result};

/// Voxel counts of a binary decision against a binary truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn from_masks(pred: impl IntoIterator<Item = bool>, gt: impl IntoIterator<Item = bool>) -> Self {
        let mut c = ConfusionCounts::default();
        for (p, g) in pred.into_iter().zip(gt) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    /// `2 TP / (2 TP + FP + FN)`; 1 when the class is absent from both volumes.
    pub fn dice(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / den as f64
        }
    }

    /// `TP / (TP + FP + FN)`; 1 when the class is absent from both volumes.
    pub fn iou(&self) -> f64 {
        let den = self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            self.tp as f64 / den as f64
        }
    }

    /// `TP / (TP + FN)`; absent when there are no positives in the truth.
    pub fn sensitivity(&self) -> Option<f64> {
        let den = self.tp + self.fn_;
        (den > 0).then(|| self.tp as f64 / den as f64)
    }

    /// `TN / (TN + FP)`; absent when there are no negatives in the truth.
    pub fn specificity(&self) -> Option<f64> {
        let den = self.tn + self.fp;
        (den > 0).then(|| self.tn as f64 / den as f64)
    }
}

fn same_len(pred: &[u8], gt: &[u8]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Metrics(format!(
            "prediction has {} voxels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Counts for `class` one-vs-rest.
pub fn class_counts(pred: &[u8], gt: &[u8], class: u8) -> Result<ConfusionCounts> {
    same_len(pred, gt)?;
    Ok(ConfusionCounts::from_masks(
        pred.iter().map(|&p| p == class),
        gt.iter().map(|&g| g == class),
    ))
}

/// Counts for membership in a set of classes.
pub fn region_counts(pred: &[u8], gt: &[u8], classes: &[u8]) -> Result<ConfusionCounts> {
    same_len(pred, gt)?;
    Ok(ConfusionCounts::from_masks(
        pred.iter().map(|p| classes.contains(p)),
        gt.iter().map(|g| classes.contains(g)),
    ))
}

pub fn dice_score(pred: &[u8], gt: &[u8], class: u8) -> Result<f64> {
    Ok(class_counts(pred, gt, class)?.dice())
}

pub fn iou_score(pred: &[u8], gt: &[u8], class: u8) -> Result<f64> {
    Ok(class_counts(pred, gt, class)?.iou())
}

/// Every foreground class merged into one tumour label.
pub const TUMOR: [u8; 3] = [1, 2, 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensSpec {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

/// Tumour-versus-background sensitivity and specificity.
pub fn sensitivity_specificity(pred: &[u8], gt: &[u8]) -> Result<SensSpec> {
    let c = region_counts(pred, gt, &TUMOR)?;
    Ok(SensSpec {
        sensitivity: c.sensitivity(),
        specificity: c.specificity(),
    })
}

/// Per-voxel argmax over the class axis of `[N, C, ...]`; ties go to the lower class.
pub fn predict_labels(logits: &Tensor) -> Result<Vec<Vec<u8>>> {
    let s = logits.shape();
    if s.len() < 2 || s[1] == 0 || s[1] > u8::MAX as usize + 1 {
        return Err(Error::Metrics(format!("logits shape {s:?} is not [N, C, ...]")));
    }
    let (n, c) = (s[0], s[1]);
    let voxels: usize = s[2..].iter().product();
    let d = logits.data();
    Ok((0..n)
        .map(|b| {
            (0..voxels)
                .map(|i| {
                    let mut best = 0;
                    for k in 1..c {
                        if d[(b * c + k) * voxels + i] > d[(b * c + best) * voxels + i] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub dice: f64,
    pub iou: f64,
}

impl From<ConfusionCounts> for Overlap {
    fn from(c: ConfusionCounts) -> Self {
        Overlap {
            dice: c.dice(),
            iou: c.iou(),
        }
    }
}

/// Nested evaluation regions: enhancing tumour, tumour core, whole tumour.
pub const REGIONS: [(&str, &[u8]); 3] = [("ET", &[3]), ("TC", &[2, 3]), ("WT", &[1, 2, 3])];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subregions {
    pub et: Overlap,
    pub tc: Overlap,
    pub wt: Overlap,
}

pub fn composite_subregions(pred: &[u8], gt: &[u8]) -> Result<Subregions> {
    let [et, tc, wt] = region_triplet(pred, gt)?;
    Ok(Subregions {
        et: et.into(),
        tc: tc.into(),
        wt: wt.into(),
    })
}

pub(crate) fn region_triplet(pred: &[u8], gt: &[u8]) -> Result<[ConfusionCounts; 3]> {
    Ok([
        region_counts(pred, gt, REGIONS[0].1)?,
        region_counts(pred, gt, REGIONS[1].1)?,
        region_counts(pred, gt, REGIONS[2].1)?,
    ])
}
