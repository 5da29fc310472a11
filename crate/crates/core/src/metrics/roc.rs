use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Voxels scoring at least this value are called positive.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Starts at (0, 0) with an infinite threshold and ends at (1, 1).
    pub points: Vec<RocPoint>,
    /// Absent when the truth holds only one class.
    pub auc: Option<f64>,
}

/// Threshold sweep over the distinct scores, trapezoidal area.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<RocCurve> {
    if scores.len() != positive.len() {
        return Err(Error::Metrics(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metrics("non-finite score".into()));
    }
    let p = positive.iter().filter(|&&b| b).count() as u64;
    let n = positive.len() as u64 - p;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let rate = |count: u64, total: u64| if total == 0 { 0.0 } else { count as f64 / total as f64 };
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    // twice the area, in units of one positive-negative pair
    let mut doubled: u128 = 0;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == threshold {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        doubled += (fp - fp0) as u128 * (tp + tp0) as u128;
        points.push(RocPoint {
            threshold,
            fpr: rate(fp, n),
            tpr: rate(tp, p),
        });
    }
    let auc = (p > 0 && n > 0).then(|| doubled as f64 / (2 * p as u128 * n as u128) as f64);
    Ok(RocCurve { points, auc })
}

impl RocCurve {
    /// At most `max_points` points, evenly spaced along the sweep, keeping both ends.
    pub fn decimated(&self, max_points: usize) -> Vec<RocPoint> {
        let len = self.points.len();
        if len <= max_points || max_points < 2 {
            return self.points.clone();
        }
        (0..max_points)
            .map(|k| self.points[k * (len - 1) / (max_points - 1)])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_and_chance() {
        let r = roc_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(r.auc, Some(1.0));
        let flat = roc_auc(&[0.5; 6], &[true, false, true, false, false, true]).unwrap();
        assert_eq!(flat.auc, Some(0.5));
        let last = flat.points.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    }

    #[test]
    fn single_class_has_no_auc() {
        let r = roc_auc(&[0.3, 0.6], &[false, false]).unwrap();
        assert_eq!(r.auc, None);
        assert!(roc_auc(&[0.3], &[true, false]).is_err());
        assert!(roc_auc(&[f64::NAN], &[true]).is_err());
    }

    #[test]
    fn decimation_keeps_ends() {
        let scores: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let labels: Vec<bool> = (0..100).map(|i| i % 3 == 0).collect();
        let r = roc_auc(&scores, &labels).unwrap();
        let d = r.decimated(11);
        assert_eq!(d.len(), 11);
        assert_eq!(d[0], r.points[0]);
        assert_eq!(d[10], *r.points.last().unwrap());
    }
}
