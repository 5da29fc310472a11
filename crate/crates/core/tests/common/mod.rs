#![allow(dead_code)]

use twinseg::data::{partition_noniid, Cohort, CohortSpec};
use twinseg::fed::TrainOptions;
use twinseg::model::{ModelConfig, TwinSegNet};

/// Three small clients synthesised at 12³ and resized to 8³.
pub fn tiny_spec(sizes: &[usize]) -> CohortSpec {
    let (mut spec, _) = CohortSpec::reference(1.0 / 100.0, 12, 0.1);
    spec.clients.truncate(sizes.len());
    for (c, &n) in spec.clients.iter_mut().zip(sizes) {
        c.sample_count = n;
    }
    spec
}

pub fn tiny_cohort(sizes: &[usize], seed: u64) -> Cohort {
    partition_noniid(&tiny_spec(sizes), 8, seed).unwrap()
}

pub fn micro_net() -> TwinSegNet {
    TwinSegNet::new(ModelConfig::micro()).unwrap()
}

pub fn options(epochs: usize) -> TrainOptions {
    let mut o = TrainOptions {
        epochs,
        ..TrainOptions::default()
    };
    o.adam.lr = 1e-3;
    o
}
