//! Client training, aggregation, round orchestration and persistence.

mod aggregate;
pub mod checkpoint;
mod round;
mod train;

pub use aggregate::{fedavg_aggregate, ClientUpdate};
pub use round::{
    client_seed, dt_seed, fine_tune_digital_twin, server_step, ClientRoundLog, DtInit,
    DtSchedule, Execution, GlobalState, ParticipationPolicy, RoundLog,
};
pub use train::{batch_tensors, evaluate, local_train, predict, TrainOptions, TrainStats};
