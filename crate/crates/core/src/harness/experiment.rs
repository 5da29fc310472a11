use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;
use twinseg_tensor::ParameterStore;

use super::config::ExperimentConfig;
use super::reports::emit_reports;
use crate::data::{partition_noniid, split_sizes, Cohort, MIN_CLIENT_SAMPLES};
use crate::error::{Error, Result};
use crate::fed::{checkpoint, dt_seed, fine_tune_digital_twin, DtInit, DtSchedule, GlobalState};
use crate::model::TwinSegNet;

pub const INCOMPLETE_MARKER: &str = "RUN_INCOMPLETE";
pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const MANIFEST: &str = "manifest.json";
pub const ROUND_LOG: &str = "rounds.ndjson";
pub const SUMMARY: &str = "summary.json";

pub fn global_checkpoint(dir: &Path, round: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("global_round_{round:03}.ckpt"))
}

pub fn dt_checkpoint(dir: &Path, client_id: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("dt_client_{client_id:02}.ckpt"))
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// What a run would do, without doing it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Plan {
    pub config_hash: String,
    pub output_dir: PathBuf,
    pub trainable_parameters: usize,
    pub clients: Vec<PlannedClient>,
    pub rounds: usize,
    pub local_epochs: usize,
    /// Forward/backward passes over single training volumes, twins included.
    pub sample_steps: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlannedClient {
    pub name: String,
    pub subjects: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

pub fn plan(config: &ExperimentConfig) -> Result<Plan> {
    config.validate()?;
    let net = TwinSegNet::new(config.model.clone())?;
    let clients: Vec<PlannedClient> = config
        .cohort
        .clients
        .iter()
        .map(|c| {
            let subjects = c.sample_count.max(MIN_CLIENT_SAMPLES);
            let (train, val, test) = split_sizes(subjects);
            PlannedClient {
                name: c.name.clone(),
                subjects,
                train,
                val,
                test,
            }
        })
        .collect();
    let train_total: usize = clients.iter().map(|c| c.train).sum();
    let twin_refreshes = match config.dt_schedule {
        DtSchedule::Final => 1,
        DtSchedule::PerRound => config.rounds,
    };
    let expected_per_round = (train_total as f64 * config.participation.min(1.0)).ceil() as usize;
    Ok(Plan {
        config_hash: config.hash(),
        output_dir: config.output_dir.clone(),
        trainable_parameters: net.trainable_count(),
        rounds: config.rounds,
        local_epochs: config.local_epochs,
        sample_steps: config.rounds * config.local_epochs * expected_per_round
            + twin_refreshes * config.dt_epochs * train_total,
        clients,
    })
}

fn unix_seconds() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Output of a completed run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub config_hash: String,
    pub final_params: ParameterStore,
}

/// Cohort generation, federated rounds, twin fine-tuning, checkpoints and reports.
/// A `RUN_INCOMPLETE` marker stays behind if anything fails.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.validate()?;
    let dir = config.output_dir.clone();
    std::fs::create_dir_all(dir.join("checkpoints"))
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let marker = dir.join(INCOMPLETE_MARKER);
    write_file(&marker, "run started; artefacts in this directory may be partial\n")?;
    for stale in [ROUND_LOG, SUMMARY] {
        let _ = std::fs::remove_file(dir.join(stale));
    }

    let started = unix_seconds();
    let clock = Instant::now();
    let hash = config.hash();
    let net = TwinSegNet::new(config.model.clone())?;
    write_file(
        &dir.join(RESOLVED_CONFIG),
        serde_json::to_string_pretty(&json!({ "config_hash": hash, "config": config }))?,
    )?;

    let cohort = partition_noniid(&config.cohort, config.model.input_extent, config.seed)?;
    let manifest = cohort.manifest(config.seed);
    write_file(
        &dir.join(MANIFEST),
        serde_json::to_string_pretty(&json!({ "config_hash": hash, "cohort": manifest }))?,
    )?;

    let mut state = GlobalState::new(net.init(config.seed)?, config.seed);
    checkpoint::save(&state.params, &hash, &global_checkpoint(&dir, 0))?;
    let options = config.train_options();
    let policy = config.participation_policy();
    let mut log_file = std::fs::File::create(dir.join(ROUND_LOG))
        .map_err(|e| Error::io("creating round log", e))?;
    let mut twins: Vec<Option<ParameterStore>> = vec![None; cohort.clients.len()];
    let mut round_times = Vec::with_capacity(config.rounds);

    for round in 1..=config.rounds {
        let mut log = state
            .run_round(&net, &cohort.clients, &policy, &options, config.execution)?
            .clone();
        round_times.push(log.wall_time_secs);
        checkpoint::save(&state.params, &hash, &global_checkpoint(&dir, round))?;
        if config.dt_schedule == DtSchedule::PerRound || round == config.rounds {
            refresh_twins(config, &net, &state.params, &cohort, round, &mut twins)?;
            log.metric_snapshots = cohort
                .clients
                .iter()
                .map(|c| format!("dt_client_{:02}@round_{round:03}", c.client_id))
                .collect();
        }
        log.metric_snapshots
            .insert(0, format!("global_round_{round:03}"));
        let mut line = serde_json::to_value(&log)?;
        line["config_hash"] = json!(hash);
        writeln!(log_file, "{}", serde_json::to_string(&line)?)
            .map_err(|e| Error::io("appending round log", e))?;
    }
    for (client, twin) in cohort.clients.iter().zip(&twins) {
        let twin = twin.as_ref().expect("twins refreshed after the final round");
        checkpoint::save(twin, &hash, &dt_checkpoint(&dir, client.client_id))?;
    }
    drop(log_file);

    emit_reports(&dir)?;
    let summary = json!({
        "config_hash": hash,
        "seed": config.seed,
        "preset": config.preset,
        "started_unix": started,
        "finished_unix": unix_seconds(),
        "wall_time_secs": clock.elapsed().as_secs_f64(),
        "round_wall_time_secs": round_times,
    });
    write_file(&dir.join(SUMMARY), serde_json::to_string_pretty(&summary)?)?;
    std::fs::remove_file(&marker).map_err(|e| Error::io("removing run marker", e))?;
    Ok(RunOutcome {
        dir,
        config_hash: hash,
        final_params: state.params,
    })
}

fn refresh_twins(
    config: &ExperimentConfig,
    net: &TwinSegNet,
    global: &ParameterStore,
    cohort: &Cohort,
    round: usize,
    twins: &mut [Option<ParameterStore>],
) -> Result<()> {
    let options = config.train_options();
    for (client, slot) in cohort.clients.iter().zip(twins.iter_mut()) {
        let start = match (config.dt_init, slot.as_ref()) {
            (DtInit::PreviousTwin, Some(previous)) => previous,
            _ => global,
        };
        let seed = dt_seed(config.seed, round, client.client_id);
        let (twin, _) =
            fine_tune_digital_twin(net, start, client, config.dt_epochs, &options, seed)?;
        *slot = Some(twin);
    }
    Ok(())
}
