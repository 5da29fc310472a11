//! Config-driven experiment runs and their on-disk artefacts.

pub mod config;
pub mod experiment;
pub mod paper;
pub mod reports;

pub use config::{ExperimentConfig, PRESETS};
pub use experiment::{
    dt_checkpoint, global_checkpoint, plan, run_experiment, Plan, PlannedClient, RunOutcome,
    INCOMPLETE_MARKER, MANIFEST, RESOLVED_CONFIG, ROUND_LOG, SUMMARY,
};
pub use paper::{check_model, closed_form_parameters, validate_paper_preset, PaperPresetReport, ShapeSource};
pub use reports::{
    emit_reports, SummaryMetrics, COMPARISON_CSV, LEARNING_CURVE_CSV, PER_CLASS_CSV, ROC_CSV,
    SENS_SPEC_CSV, SUBREGIONS_CSV, SUMMARY_METRICS,
};
