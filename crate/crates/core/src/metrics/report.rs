use serde::{Deserialize, Serialize};
use twinseg_tensor::Tensor;

use super::overlap::{region_triplet, ConfusionCounts, Subregions, TUMOR};
use super::roc::{roc_auc, RocPoint};
use crate::error::{Error, Result};
use crate::model::CLASS_NAMES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    pub dice: f64,
    pub iou: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub auc: Option<f64>,
    pub counts: ConfusionCounts,
}

/// Voxel-level evaluation of one model on one set of volumes. Counts are
/// summed over the volumes before any ratio is taken.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub volumes: usize,
    pub voxels: u64,
    pub classes: Vec<ClassReport>,
    pub subregions: Subregions,
    /// Tumour (any foreground class) versus background.
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub tumor_counts: ConfusionCounts,
    /// Mean Dice over the foreground classes.
    pub mean_foreground_dice: f64,
    pub mean_foreground_iou: f64,
    /// One-vs-rest ROC per class, thinned for plotting.
    pub roc: Vec<Vec<RocPoint>>,
}

/// Accumulates predictions volume by volume.
#[derive(Clone, Debug)]
pub struct Evaluator {
    classes: usize,
    volumes: usize,
    counts: Vec<ConfusionCounts>,
    tumor: ConfusionCounts,
    regions: [ConfusionCounts; 3],
    scores: Vec<Vec<f64>>,
    truth: Vec<u8>,
}

impl Evaluator {
    pub fn new(classes: usize) -> Self {
        Evaluator {
            classes,
            volumes: 0,
            counts: vec![ConfusionCounts::default(); classes],
            tumor: ConfusionCounts::default(),
            regions: [ConfusionCounts::default(); 3],
            scores: vec![Vec::new(); classes],
            truth: Vec::new(),
        }
    }

    /// `probs` is `[classes, voxels...]` for one volume.
    pub fn add(&mut self, probs: &Tensor, pred: &[u8], gt: &[u8]) -> Result<()> {
        let voxels = gt.len();
        if pred.len() != voxels || probs.numel() != self.classes * voxels || probs.shape()[0] != self.classes {
            return Err(Error::Metrics(format!(
                "inconsistent evaluation inputs: probs {:?}, {} predictions, {} labels",
                probs.shape(),
                pred.len(),
                voxels
            )));
        }
        for (class, counts) in self.counts.iter_mut().enumerate() {
            counts.merge(&ConfusionCounts::from_masks(
                pred.iter().map(|&p| p as usize == class),
                gt.iter().map(|&g| g as usize == class),
            ));
        }
        self.tumor.merge(&ConfusionCounts::from_masks(
            pred.iter().map(|p| TUMOR.contains(p)),
            gt.iter().map(|g| TUMOR.contains(g)),
        ));
        for (acc, c) in self.regions.iter_mut().zip(region_triplet(pred, gt)?) {
            acc.merge(&c);
        }
        for (class, scores) in self.scores.iter_mut().enumerate() {
            scores.extend_from_slice(&probs.data()[class * voxels..(class + 1) * voxels]);
        }
        self.truth.extend_from_slice(gt);
        self.volumes += 1;
        Ok(())
    }

    pub fn finish(&self, roc_points: usize) -> Result<MetricsReport> {
        if self.volumes == 0 {
            return Err(Error::Metrics("no volumes evaluated".into()));
        }
        let mut classes = Vec::with_capacity(self.classes);
        let mut roc = Vec::with_capacity(self.classes);
        for (class, counts) in self.counts.iter().enumerate() {
            let positive: Vec<bool> = self.truth.iter().map(|&g| g as usize == class).collect();
            let curve = roc_auc(&self.scores[class], &positive)?;
            roc.push(curve.decimated(roc_points));
            classes.push(ClassReport {
                class: CLASS_NAMES.get(class).map_or_else(|| format!("class{class}"), |s| s.to_string()),
                dice: counts.dice(),
                iou: counts.iou(),
                sensitivity: counts.sensitivity(),
                specificity: counts.specificity(),
                auc: curve.auc,
                counts: *counts,
            });
        }
        let fg = &classes[1.min(classes.len())..];
        let mean = |f: fn(&ClassReport) -> f64| {
            if fg.is_empty() {
                1.0
            } else {
                fg.iter().map(f).sum::<f64>() / fg.len() as f64
            }
        };
        Ok(MetricsReport {
            volumes: self.volumes,
            voxels: self.truth.len() as u64,
            mean_foreground_dice: mean(|c| c.dice),
            mean_foreground_iou: mean(|c| c.iou),
            classes,
            subregions: Subregions {
                et: self.regions[0].into(),
                tc: self.regions[1].into(),
                wt: self.regions[2].into(),
            },
            sensitivity: self.tumor.sensitivity(),
            specificity: self.tumor.specificity(),
            tumor_counts: self.tumor,
            roc,
        })
    }
}

/// One client's global-versus-twin comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub client: String,
    pub global_mean_fg_dice: f64,
    pub dt_mean_fg_dice: f64,
    pub delta_dice: f64,
    pub global_mean_fg_iou: f64,
    pub dt_mean_fg_iou: f64,
    pub delta_iou: f64,
}

impl ComparisonRow {
    pub fn new(client: &str, global_dice: f64, dt_dice: f64, global_iou: f64, dt_iou: f64) -> Self {
        ComparisonRow {
            client: client.to_string(),
            global_mean_fg_dice: global_dice,
            dt_mean_fg_dice: dt_dice,
            delta_dice: dt_dice - global_dice,
            global_mean_fg_iou: global_iou,
            dt_mean_fg_iou: dt_iou,
            delta_iou: dt_iou - global_iou,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub mean_delta_dice: f64,
    pub mean_delta_iou: f64,
}

impl Comparison {
    pub fn from_rows(rows: Vec<ComparisonRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Metrics("comparison needs at least one client".into()));
        }
        let k = rows.len() as f64;
        Ok(Comparison {
            mean_delta_dice: rows.iter().map(|r| r.delta_dice).sum::<f64>() / k,
            mean_delta_iou: rows.iter().map(|r| r.delta_iou).sum::<f64>() / k,
            rows,
        })
    }

    /// Clients whose twin is at least as good as the global model on Dice.
    pub fn non_negative_dice(&self) -> usize {
        self.rows.iter().filter(|r| r.delta_dice >= 0.0).count()
    }

    /// CSV with a leading `# config_hash:` comment line and a final `mean` row.
    pub fn to_csv(&self, config_hash: &str) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Metrics(format!("csv: {e}"));
        w.write_record([
            "client",
            "global_mean_fg_dice",
            "dt_mean_fg_dice",
            "delta_dice",
            "global_mean_fg_iou",
            "dt_mean_fg_iou",
            "delta_iou",
        ])
        .map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.client.clone(),
                r.global_mean_fg_dice.to_string(),
                r.dt_mean_fg_dice.to_string(),
                r.delta_dice.to_string(),
                r.global_mean_fg_iou.to_string(),
                r.dt_mean_fg_iou.to_string(),
                r.delta_iou.to_string(),
            ])
            .map_err(io)?;
        }
        let k = self.rows.len() as f64;
        let avg = |f: fn(&ComparisonRow) -> f64| (self.rows.iter().map(f).sum::<f64>() / k).to_string();
        w.write_record([
            "mean".to_string(),
            avg(|r| r.global_mean_fg_dice),
            avg(|r| r.dt_mean_fg_dice),
            self.mean_delta_dice.to_string(),
            avg(|r| r.global_mean_fg_iou),
            avg(|r| r.dt_mean_fg_iou),
            self.mean_delta_iou.to_string(),
        ])
        .map_err(io)?;
        let body = w.into_inner().map_err(|e| Error::Metrics(format!("csv: {e}")))?;
        Ok(format!(
            "# config_hash: {config_hash}\n{}",
            String::from_utf8(body).expect("csv output is utf-8")
        ))
    }
}

/// Per-client deltas of mean foreground Dice and IoU, twin minus global.
pub fn compare_global_vs_dt(
    global: &[(String, MetricsReport)],
    dt: &[(String, MetricsReport)],
) -> Result<Comparison> {
    let names = |v: &[(String, MetricsReport)]| v.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>();
    if names(global) != names(dt) {
        return Err(Error::Metrics(format!(
            "client sets differ: global {:?}, twins {:?}",
            names(global),
            names(dt)
        )));
    }
    Comparison::from_rows(
        global
            .iter()
            .zip(dt)
            .map(|((name, g), (_, d))| {
                ComparisonRow::new(
                    name,
                    g.mean_foreground_dice,
                    d.mean_foreground_dice,
                    g.mean_foreground_iou,
                    d.mean_foreground_iou,
                )
            })
            .collect(),
    )
}
