//! Overlap scores, confusion counts, ROC analysis and global-versus-twin comparison.

mod overlap;
mod report;
mod roc;

pub use overlap::{
    class_counts, composite_subregions, dice_score, iou_score, predict_labels, region_counts,
    sensitivity_specificity, ConfusionCounts, Overlap, SensSpec, Subregions, REGIONS, TUMOR,
};
pub use report::{compare_global_vs_dt, ClassReport, Comparison, ComparisonRow, Evaluator, MetricsReport};
pub use roc::{roc_auc, RocCurve, RocPoint};
