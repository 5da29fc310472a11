use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use twinseg_tensor::ParameterStore;

use super::aggregate::{fedavg_aggregate, ClientUpdate};
use super::train::{local_train, TrainOptions, TrainStats};
use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::model::TwinSegNet;
use crate::seed::{derive_seed, rng_for};

const DT_STREAM: u64 = 0xD7;

/// Which clients take part in a round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ParticipationPolicy {
    Full,
    /// `max(1, round(fraction · K))` clients drawn per round from `seed`.
    Fraction { fraction: f64, seed: u64 },
    /// Exactly these client ids.
    Explicit(Vec<usize>),
}

impl ParticipationPolicy {
    pub fn select(&self, round: usize, client_ids: &[usize]) -> Result<Vec<usize>> {
        let mut chosen = match self {
            ParticipationPolicy::Full => client_ids.to_vec(),
            ParticipationPolicy::Fraction { fraction, seed } => {
                if !(*fraction > 0.0 && *fraction <= 1.0) {
                    return Err(Error::Training(format!(
                        "participation fraction {fraction} outside (0, 1]"
                    )));
                }
                let m = ((fraction * client_ids.len() as f64).round() as usize).max(1);
                let mut ids = client_ids.to_vec();
                ids.shuffle(&mut rng_for(&[*seed, round as u64]));
                ids.truncate(m);
                ids
            }
            ParticipationPolicy::Explicit(ids) => {
                if let Some(bad) = ids.iter().find(|id| !client_ids.contains(id)) {
                    return Err(Error::Training(format!("unknown participant {bad}")));
                }
                ids.clone()
            }
        };
        chosen.sort_unstable();
        chosen.dedup();
        if chosen.is_empty() {
            return Err(Error::Training(format!("round {round} has no participants")));
        }
        Ok(chosen)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    #[default]
    Serial,
    /// Clients train concurrently on the rayon pool.
    Parallel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundLog {
    pub client_id: usize,
    pub n_k: usize,
    /// `n_k / N_r` over this round's participants.
    pub weight: f64,
    pub final_train_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    /// 1-based index of the round that produced `θ_round`.
    pub round: usize,
    pub participants: Vec<usize>,
    pub total_samples: usize,
    pub clients: Vec<ClientRoundLog>,
    /// `n_k`-weighted mean of the participants' final training losses.
    pub mean_train_loss: f64,
    pub metric_snapshots: Vec<String>,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl RoundLog {
    pub fn weight_sum(&self) -> f64 {
        self.clients.iter().map(|c| c.weight).sum()
    }
}

/// Seed of client `client_id`'s local training in `round`.
pub fn client_seed(global_seed: u64, round: usize, client_id: usize) -> u64 {
    derive_seed(&[global_seed, round as u64, client_id as u64])
}

/// Seed of client `client_id`'s twin fine-tuning after `round`.
pub fn dt_seed(global_seed: u64, round: usize, client_id: usize) -> u64 {
    derive_seed(&[global_seed, DT_STREAM, round as u64, client_id as u64])
}

/// Server-side state: the current global parameters and the round history.
#[derive(Clone, Debug)]
pub struct GlobalState {
    pub round: usize,
    pub params: ParameterStore,
    pub logs: Vec<RoundLog>,
    pub global_seed: u64,
}

impl GlobalState {
    pub fn new(params: ParameterStore, global_seed: u64) -> Self {
        GlobalState {
            round: 0,
            params,
            logs: Vec::new(),
            global_seed,
        }
    }

    /// Broadcast, local training on every participant, aggregation over the
    /// participants only. On error the state is left untouched.
    pub fn run_round(
        &mut self,
        net: &TwinSegNet,
        clients: &[ClientDataset],
        policy: &ParticipationPolicy,
        options: &TrainOptions,
        execution: Execution,
    ) -> Result<&RoundLog> {
        let start = Instant::now();
        let round = self.round + 1;
        let ids: Vec<usize> = clients.iter().map(|c| c.client_id).collect();
        let participants = policy.select(round, &ids)?;
        let chosen: Vec<&ClientDataset> = participants
            .iter()
            .map(|id| clients.iter().find(|c| c.client_id == *id).expect("selected from ids"))
            .collect();

        let train = |client: &&ClientDataset| -> Result<ClientUpdate> {
            let seed = client_seed(self.global_seed, round, client.client_id);
            let (params, stats) = local_train(net, &self.params, client, options, seed)?;
            Ok(ClientUpdate {
                client_id: client.client_id,
                n_k: client.n_k(),
                params,
                stats,
            })
        };
        let updates: Vec<ClientUpdate> = match execution {
            Execution::Serial => chosen.iter().map(train).collect::<Result<_>>()?,
            Execution::Parallel => chosen.par_iter().map(train).collect::<Result<_>>()?,
        };
        let (params, log) = server_step(round, &updates)?;
        self.params = params;
        self.round = round;
        self.logs.push(RoundLog {
            wall_time_secs: start.elapsed().as_secs_f64(),
            ..log
        });
        Ok(self.logs.last().expect("just pushed"))
    }
}

/// Aggregation plus bookkeeping; sees only parameters, sample counts and losses.
pub fn server_step(round: usize, updates: &[ClientUpdate]) -> Result<(ParameterStore, RoundLog)> {
    let params = fedavg_aggregate(updates)?;
    let total: usize = updates.iter().map(|u| u.n_k).sum();
    let mut clients: Vec<ClientRoundLog> = updates
        .iter()
        .map(|u| ClientRoundLog {
            client_id: u.client_id,
            n_k: u.n_k,
            weight: u.n_k as f64 / total as f64,
            final_train_loss: u.stats.final_loss().unwrap_or(f64::NAN),
            epoch_losses: u.stats.epoch_losses.clone(),
            epochs: u.stats.epoch_losses.len(),
        })
        .collect();
    clients.sort_by_key(|c| c.client_id);
    let mean_train_loss = clients.iter().map(|c| c.weight * c.final_train_loss).sum();
    Ok((
        params,
        RoundLog {
            round,
            participants: clients.iter().map(|c| c.client_id).collect(),
            total_samples: total,
            clients,
            mean_train_loss,
            metric_snapshots: Vec::new(),
            wall_time_secs: 0.0,
        },
    ))
}

/// When twins are refreshed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DtSchedule {
    #[default]
    Final,
    PerRound,
}

/// Starting point of a refresh under the per-round schedule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DtInit {
    #[default]
    Global,
    PreviousTwin,
}

/// A client's personalised copy: `local_train` started from `theta_g`.
/// `theta_g` itself is never modified.
pub fn fine_tune_digital_twin(
    net: &TwinSegNet,
    theta_g: &ParameterStore,
    client: &ClientDataset,
    epochs: usize,
    options: &TrainOptions,
    seed: u64,
) -> Result<(ParameterStore, TrainStats)> {
    if epochs == 0 {
        return Err(Error::Training("twin fine-tuning needs at least 1 epoch".into()));
    }
    let options = TrainOptions {
        epochs,
        ..options.clone()
    };
    local_train(net, theta_g, client, &options, seed)
}
