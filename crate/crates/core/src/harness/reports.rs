use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use twinseg_tensor::ParameterStore;

use super::config::ExperimentConfig;
use super::experiment::{dt_checkpoint, global_checkpoint, write_file, MANIFEST, RESOLVED_CONFIG};
use crate::data::partition_noniid;
use crate::error::{Error, Result};
use crate::fed::{checkpoint, evaluate};
use crate::metrics::{compare_global_vs_dt, MetricsReport};
use crate::model::{TwinSegNet, CLASS_NAMES};

pub const COMPARISON_CSV: &str = "comparison.csv";
pub const PER_CLASS_CSV: &str = "per_class_dice.csv";
pub const ROC_CSV: &str = "roc.csv";
pub const SENS_SPEC_CSV: &str = "sens_spec.csv";
pub const SUBREGIONS_CSV: &str = "subregions.csv";
pub const LEARNING_CURVE_CSV: &str = "learning_curve.csv";
pub const SUMMARY_METRICS: &str = "reports/summary_metrics.json";

/// Headline numbers of a run, averaged over clients' validation sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryMetrics {
    pub config_hash: String,
    pub clients: Vec<String>,
    pub round0_mean_fg_dice: f64,
    pub final_mean_fg_dice: f64,
    pub learning_gain: f64,
    pub dt_mean_fg_dice: f64,
    pub mean_delta_dice: f64,
    pub mean_delta_iou: f64,
    pub non_negative_dice_clients: usize,
    pub per_round_mean_fg_dice: Vec<f64>,
}

#[derive(Deserialize)]
struct Resolved {
    config_hash: String,
    config: ExperimentConfig,
}

fn csv_text(config_hash: &str, header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Metrics(format!("csv: {e}"));
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(row).map_err(err)?;
    }
    let body = w
        .into_inner()
        .map_err(|e| Error::Metrics(format!("csv: {e}")))?;
    Ok(format!(
        "# config_hash: {config_hash}\n{}",
        String::from_utf8(body).expect("csv output is utf-8")
    ))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn load_checked(path: &Path, hash: &str) -> Result<ParameterStore> {
    let ckpt = checkpoint::load(path)?;
    if ckpt.config_hash != hash {
        return Err(Error::Training(format!(
            "{} belongs to config {}, run uses {hash}",
            path.display(),
            ckpt.config_hash
        )));
    }
    Ok(ckpt.store)
}

/// Rebuilds every CSV and JSON report of a run directory from its
/// configuration and checkpoints, without training.
pub fn emit_reports(dir: &Path) -> Result<SummaryMetrics> {
    let resolved_path = dir.join(RESOLVED_CONFIG);
    let text = std::fs::read_to_string(&resolved_path).map_err(|e| {
        Error::io(
            format!("{} is not a run directory (reading {RESOLVED_CONFIG})", dir.display()),
            e,
        )
    })?;
    let Resolved {
        config_hash: hash,
        config,
    } = serde_json::from_str(&text)?;
    if config.hash() != hash {
        return Err(Error::config(
            "config_hash",
            format!("{RESOLVED_CONFIG} was edited: recorded {hash}, recomputed {}", config.hash()),
        ));
    }
    let missing: Vec<usize> = (0..=config.rounds)
        .filter(|&r| !global_checkpoint(dir, r).exists())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Training(format!(
            "missing global checkpoints for rounds {missing:?}"
        )));
    }
    let clients = config.cohort.clients.len();
    let missing_dt: Vec<usize> = (0..clients)
        .filter(|&k| !dt_checkpoint(dir, k).exists())
        .collect();
    if !missing_dt.is_empty() {
        return Err(Error::Training(format!(
            "missing twin checkpoints for clients {missing_dt:?}"
        )));
    }

    let net = TwinSegNet::new(config.model.clone())?;
    let cohort = partition_noniid(&config.cohort, config.model.input_extent, config.seed)?;
    let recorded: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.join(MANIFEST))
            .map_err(|e| Error::io("reading cohort manifest", e))?,
    )?;
    if recorded["cohort"] != serde_json::to_value(cohort.manifest(config.seed))? {
        return Err(Error::Data(
            "regenerated cohort does not match the recorded manifest".into(),
        ));
    }
    let reports_dir = dir.join("reports");
    std::fs::create_dir_all(&reports_dir)
        .map_err(|e| Error::io("creating reports directory", e))?;

    let mut curve_rows = Vec::new();
    let mut per_round = Vec::with_capacity(config.rounds + 1);
    let mut final_global = Vec::new();
    for round in 0..=config.rounds {
        let params = load_checked(&global_checkpoint(dir, round), &hash)?;
        let mut dice_sum = 0.0;
        let mut iou_sum = 0.0;
        for client in &cohort.clients {
            let report = evaluate(&net, &params, &client.val, config.roc_points)?;
            dice_sum += report.mean_foreground_dice;
            iou_sum += report.mean_foreground_iou;
            curve_rows.push(vec![
                round.to_string(),
                client.name.clone(),
                report.mean_foreground_dice.to_string(),
                report.mean_foreground_iou.to_string(),
            ]);
            if round == config.rounds {
                final_global.push((client.name.clone(), report));
            }
        }
        let k = cohort.clients.len() as f64;
        curve_rows.push(vec![
            round.to_string(),
            "mean".into(),
            (dice_sum / k).to_string(),
            (iou_sum / k).to_string(),
        ]);
        per_round.push(dice_sum / k);
    }
    let mut twins = Vec::new();
    for client in &cohort.clients {
        let params = load_checked(&dt_checkpoint(dir, client.client_id), &hash)?;
        twins.push((
            client.name.clone(),
            evaluate(&net, &params, &client.val, config.roc_points)?,
        ));
    }

    for (kind, reports) in [("global", &final_global), ("dt", &twins)] {
        for (client, (name, report)) in cohort.clients.iter().zip(reports.iter()) {
            let path = reports_dir.join(format!("{kind}_client_{:02}.json", client.client_id));
            write_file(
                &path,
                serde_json::to_string_pretty(&json!({
                    "config_hash": hash,
                    "client": name,
                    "model": kind,
                    "split": "val",
                    "report": report,
                }))?,
            )?;
        }
    }

    let comparison = compare_global_vs_dt(&final_global, &twins)?;
    write_file(&dir.join(COMPARISON_CSV), comparison.to_csv(&hash)?)?;

    let mut class_rows = Vec::new();
    let mut roc_rows = Vec::new();
    let mut sens_rows = Vec::new();
    let mut region_rows = Vec::new();
    for ((name, g), (_, d)) in final_global.iter().zip(&twins) {
        for (class, (gc, dc)) in g.classes.iter().zip(&d.classes).enumerate() {
            class_rows.push(vec![
                name.clone(),
                CLASS_NAMES[class].to_string(),
                gc.dice.to_string(),
                dc.dice.to_string(),
                gc.iou.to_string(),
                dc.iou.to_string(),
            ]);
        }
        for (model, report) in [("global", g), ("dt", d)] {
            push_model_rows(name, model, report, &mut roc_rows, &mut sens_rows, &mut region_rows);
        }
    }
    write_file(
        &dir.join(PER_CLASS_CSV),
        csv_text(&hash, &["client", "class", "global_dice", "dt_dice", "global_iou", "dt_iou"], &class_rows)?,
    )?;
    write_file(
        &dir.join(ROC_CSV),
        csv_text(&hash, &["client", "model", "class", "threshold", "fpr", "tpr"], &roc_rows)?,
    )?;
    write_file(
        &dir.join(SENS_SPEC_CSV),
        csv_text(&hash, &["client", "model", "scope", "sensitivity", "specificity"], &sens_rows)?,
    )?;
    write_file(
        &dir.join(SUBREGIONS_CSV),
        csv_text(&hash, &["client", "model", "region", "dice", "iou"], &region_rows)?,
    )?;
    write_file(
        &dir.join(LEARNING_CURVE_CSV),
        csv_text(&hash, &["round", "client", "mean_fg_dice", "mean_fg_iou"], &curve_rows)?,
    )?;

    let k = twins.len() as f64;
    let summary = SummaryMetrics {
        config_hash: hash,
        clients: cohort.clients.iter().map(|c| c.name.clone()).collect(),
        round0_mean_fg_dice: per_round[0],
        final_mean_fg_dice: per_round[config.rounds],
        learning_gain: per_round[config.rounds] - per_round[0],
        dt_mean_fg_dice: twins.iter().map(|(_, r)| r.mean_foreground_dice).sum::<f64>() / k,
        mean_delta_dice: comparison.mean_delta_dice,
        mean_delta_iou: comparison.mean_delta_iou,
        non_negative_dice_clients: comparison.non_negative_dice(),
        per_round_mean_fg_dice: per_round,
    };
    write_file(&dir.join(SUMMARY_METRICS), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

fn push_model_rows(
    client: &str,
    model: &str,
    report: &MetricsReport,
    roc_rows: &mut Vec<Vec<String>>,
    sens_rows: &mut Vec<Vec<String>>,
    region_rows: &mut Vec<Vec<String>>,
) {
    let base = || vec![client.to_string(), model.to_string()];
    for (class, curve) in report.roc.iter().enumerate() {
        for p in curve {
            let mut row = base();
            row.extend([
                CLASS_NAMES[class].to_string(),
                p.threshold.to_string(),
                p.fpr.to_string(),
                p.tpr.to_string(),
            ]);
            roc_rows.push(row);
        }
    }
    let mut tumor = base();
    tumor.extend(["tumor".to_string(), opt(report.sensitivity), opt(report.specificity)]);
    sens_rows.push(tumor);
    for c in &report.classes {
        let mut row = base();
        row.extend([c.class.clone(), opt(c.sensitivity), opt(c.specificity)]);
        sens_rows.push(row);
    }
    let s = &report.subregions;
    for (region, o) in [("ET", s.et), ("TC", s.tc), ("WT", s.wt)] {
        let mut row = base();
        row.extend([region.to_string(), o.dice.to_string(), o.iou.to_string()]);
        region_rows.push(row);
    }
}
