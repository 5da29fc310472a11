mod common;

use common::{micro_net, options, tiny_cohort};
use num_bigint::BigInt;
use num_rational::BigRational;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twinseg::fed::{
    client_seed, fedavg_aggregate, fine_tune_digital_twin, local_train, ClientUpdate, Execution,
    GlobalState, ParticipationPolicy, TrainStats,
};
use twinseg::Error;
use twinseg_tensor::{ParameterStore, Tensor};

fn random_store(rng: &mut ChaCha8Rng, scale: f64) -> ParameterStore {
    let mut s = ParameterStore::new();
    for (name, shape) in [("a.weight", vec![3, 4]), ("b.bias", vec![5]), ("c", vec![2, 2, 2])] {
        s.insert_trainable(name, Tensor::from_fn(&shape, |_| rng.random_range(-scale..scale)))
            .unwrap();
    }
    s.insert_buffer("bn.running_var", Tensor::from_fn(&[4], |_| rng.random_range(0.0..scale)))
        .unwrap();
    s
}

fn update(client_id: usize, n_k: usize, params: ParameterStore) -> ClientUpdate {
    ClientUpdate {
        client_id,
        n_k,
        params,
        stats: TrainStats::default(),
    }
}

fn exact(v: f64) -> BigRational {
    BigRational::from_float(v).unwrap()
}

#[test]
fn weighted_mean_matches_exact_rational_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tolerance = exact(1e-15);
    for _ in 0..50 {
        let sizes: Vec<usize> = (0..3).map(|_| rng.random_range(1..400)).collect();
        let scale = [1e-3, 1.0, 10.0][rng.random_range(0..3)];
        let updates: Vec<ClientUpdate> = sizes
            .iter()
            .enumerate()
            .map(|(k, &n)| update(k, n, random_store(&mut rng, scale)))
            .collect();
        let out = fedavg_aggregate(&updates).unwrap();
        let total = BigInt::from(sizes.iter().sum::<usize>());
        for (name, p) in out.iter() {
            for (i, &got) in p.value.data().iter().enumerate() {
                let mut want = BigRational::from_integer(BigInt::from(0));
                for u in &updates {
                    let w = BigRational::new(BigInt::from(u.n_k), total.clone());
                    want += w * exact(u.params.get(name).unwrap().data()[i]);
                }
                let diff = exact(got) - want;
                let bound = tolerance.clone() * exact(scale.max(1.0));
                assert!(diff <= bound && -diff <= bound, "{name}[{i}]");
            }
        }
    }
}

#[test]
fn identical_clients_aggregate_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in 1..=9 {
        let base = random_store(&mut rng, 3.0);
        let updates: Vec<ClientUpdate> =
            (0..k).map(|id| update(id, rng.random_range(1..100), base.clone())).collect();
        assert!(fedavg_aggregate(&updates).unwrap().bit_eq(&base));
    }
}

#[test]
fn power_of_two_scaling_commutes_with_aggregation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for alpha in [0.25, 0.5, 2.0, 8.0, -4.0] {
        let updates: Vec<ClientUpdate> = (0..4)
            .map(|k| update(k, k * 3 + 1, random_store(&mut rng, 1.0)))
            .collect();
        let scaled: Vec<ClientUpdate> = updates
            .iter()
            .map(|u| update(u.client_id, u.n_k, u.params.map_values(|_, t| t.map(|v| alpha * v))))
            .collect();
        let lhs = fedavg_aggregate(&scaled).unwrap();
        let rhs = fedavg_aggregate(&updates).unwrap().map_values(|_, t| t.map(|v| alpha * v));
        assert!(lhs.bit_eq(&rhs), "alpha {alpha}");
    }
}

#[test]
fn incompatible_stores_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_store(&mut rng, 1.0);
    let mut b = ParameterStore::new();
    for (name, p) in a.iter() {
        let shape = if name == "b.bias" { vec![6] } else { p.value.shape().to_vec() };
        b.insert_trainable(name, Tensor::zeros(&shape)).unwrap();
    }
    let err = fedavg_aggregate(&[update(0, 1, a), update(1, 1, b)]).unwrap_err();
    assert!(matches!(err, Error::Incompatible(_)), "{err}");
}

#[test]
fn single_participant_round_equals_its_local_update() {
    let net = micro_net();
    let cohort = tiny_cohort(&[5, 6, 4], 10);
    let theta0 = net.init(10).unwrap();
    let mut state = GlobalState::new(theta0.clone(), 10);
    let opts = options(1);
    let log = state
        .run_round(&net, &cohort.clients, &ParticipationPolicy::Explicit(vec![1]), &opts, Execution::Serial)
        .unwrap()
        .clone();
    assert_eq!(log.participants, vec![1]);
    assert_eq!(log.clients[0].weight, 1.0);
    let (local, _) = local_train(&net, &theta0, &cohort.clients[1], &opts, client_seed(10, 1, 1)).unwrap();
    assert!(state.params.bit_eq(&local));
}

#[test]
fn one_client_round_equals_plain_local_training() {
    let net = micro_net();
    let cohort = tiny_cohort(&[7], 11);
    let theta0 = net.init(11).unwrap();
    let opts = options(3);
    let mut state = GlobalState::new(theta0.clone(), 11);
    state
        .run_round(&net, &cohort.clients, &ParticipationPolicy::Full, &opts, Execution::Serial)
        .unwrap();
    let (direct, stats) = local_train(&net, &theta0, &cohort.clients[0], &opts, client_seed(11, 1, 0)).unwrap();
    assert!(state.params.bit_eq(&direct));
    assert_eq!(state.logs[0].clients[0].epoch_losses, stats.epoch_losses);
}

#[test]
fn serial_and_parallel_rounds_are_bit_identical() {
    let net = micro_net();
    let cohort = tiny_cohort(&[5, 6, 4], 12);
    let theta0 = net.init(12).unwrap();
    let opts = options(1);
    let run = |execution| {
        let mut state = GlobalState::new(theta0.clone(), 12);
        for _ in 0..2 {
            state
                .run_round(&net, &cohort.clients, &ParticipationPolicy::Full, &opts, execution)
                .unwrap();
        }
        state
    };
    let serial = run(Execution::Serial);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let parallel = pool.install(|| run(Execution::Parallel));
    assert!(serial.params.bit_eq(&parallel.params));
    let untimed = |logs: &[twinseg::fed::RoundLog]| -> Vec<_> {
        logs.iter()
            .map(|l| twinseg::fed::RoundLog {
                wall_time_secs: 0.0,
                ..l.clone()
            })
            .collect()
    };
    assert_eq!(untimed(&serial.logs), untimed(&parallel.logs));
}

#[test]
fn dropout_changes_logged_weights() {
    let net = micro_net();
    let cohort = tiny_cohort(&[5, 6, 4], 13);
    let mut state = GlobalState::new(net.init(13).unwrap(), 13);
    let opts = options(1);
    let full = state
        .run_round(&net, &cohort.clients, &ParticipationPolicy::Full, &opts, Execution::Serial)
        .unwrap()
        .clone();
    let partial = state
        .run_round(&net, &cohort.clients, &ParticipationPolicy::Explicit(vec![0, 2]), &opts, Execution::Serial)
        .unwrap()
        .clone();
    let n: Vec<usize> = cohort.clients.iter().map(|c| c.n_k()).collect();
    assert_eq!(full.total_samples, n.iter().sum::<usize>());
    assert_eq!(partial.total_samples, n[0] + n[2]);
    assert_eq!(partial.clients[0].weight, n[0] as f64 / (n[0] + n[2]) as f64);
    assert_ne!(partial.clients[0].weight, full.clients[0].weight);
    assert!((partial.weight_sum() - 1.0).abs() < 1e-15);
    assert_eq!(state.round, 2);
}

#[test]
fn failed_round_leaves_state_untouched() {
    let net = micro_net();
    let cohort = tiny_cohort(&[5, 4], 14);
    let mut state = GlobalState::new(net.init(14).unwrap(), 14);
    let before = state.params.clone();
    let bad = options(0);
    assert!(state
        .run_round(&net, &cohort.clients, &ParticipationPolicy::Full, &bad, Execution::Serial)
        .is_err());
    assert!(state
        .run_round(&net, &cohort.clients, &ParticipationPolicy::Explicit(vec![5]), &options(1), Execution::Serial)
        .is_err());
    assert_eq!(state.round, 0);
    assert!(state.logs.is_empty());
    assert!(state.params.bit_eq(&before));
}

#[test]
fn aggregation_inputs_carry_parameters_only() {
    let net = micro_net();
    let cohort = tiny_cohort(&[5], 15);
    let theta0 = net.init(15).unwrap();
    let (params, _) = local_train(&net, &theta0, &cohort.clients[0], &options(1), 1).unwrap();
    let u = update(0, cohort.clients[0].n_k(), params);
    let declared: Vec<String> = net.layer_inventory().into_iter().map(|e| e.name).collect();
    let mut sent: Vec<String> = u.params.names().map(str::to_string).collect();
    sent.sort();
    let mut declared_sorted = declared.clone();
    declared_sorted.sort();
    assert_eq!(sent, declared_sorted);
    assert!(u.params.iter().all(|(_, p)| p.grad.is_none()));
}

#[test]
fn local_training_reduces_loss_on_a_small_desk_client() {
    let net = twinseg::model::TwinSegNet::new(twinseg::model::ModelConfig::desk()).unwrap();
    let (mut spec, _) = twinseg::data::CohortSpec::reference(1.0 / 25.0, 40, 0.05);
    spec.clients.truncate(1);
    spec.clients[0].sample_count = 4;
    let cohort = twinseg::data::partition_noniid(&spec, 32, 5).unwrap();
    let (_, stats) = local_train(&net, &net.init(5).unwrap(), &cohort.clients[0], &options(5), 5).unwrap();
    assert_eq!(stats.epoch_losses.len(), 5);
    assert!(stats.final_loss().unwrap() < stats.epoch_losses[0], "{:?}", stats.epoch_losses);
}

#[test]
fn twin_fine_tuning_copies_the_global_model() {
    let net = micro_net();
    let cohort = tiny_cohort(&[6], 16);
    let theta_g = net.init(16).unwrap();
    let snapshot = theta_g.clone();
    assert!(fine_tune_digital_twin(&net, &theta_g, &cohort.clients[0], 0, &options(1), 1).is_err());
    let (twin, stats) = fine_tune_digital_twin(&net, &theta_g, &cohort.clients[0], 2, &options(5), 1).unwrap();
    assert_eq!(stats.epoch_losses.len(), 2);
    assert!(theta_g.bit_eq(&snapshot));
    assert!(!twin.bit_eq(&theta_g));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregate_lies_within_client_range(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let updates: Vec<ClientUpdate> = (0..k)
            .map(|id| update(id, rng.random_range(1..50), random_store(&mut rng, 5.0)))
            .collect();
        let out = fedavg_aggregate(&updates).unwrap();
        for (name, p) in out.iter() {
            for (i, v) in p.value.data().iter().enumerate() {
                let vals = updates.iter().map(|u| u.params.get(name).unwrap().data()[i]);
                let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
                prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
            }
        }
    }
}
