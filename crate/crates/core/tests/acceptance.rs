//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, ensure, Result};
use num_bigint::BigInt;
use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twinseg::fed::checkpoint;
use twinseg::fed::{
    client_seed, fedavg_aggregate, local_train, ClientUpdate, Execution, GlobalState,
    ParticipationPolicy, RoundLog, TrainStats,
};
use twinseg::harness::{
    run_experiment, validate_paper_preset, ExperimentConfig, ShapeSource, SummaryMetrics,
    COMPARISON_CSV, SUMMARY_METRICS,
};
use twinseg::metrics::{
    class_counts, composite_subregions, dice_score, iou_score, roc_auc, sensitivity_specificity,
};
use twinseg::model::{composite_loss, one_hot, LossMode, ModelConfig, TwinSegNet};
use twinseg_tensor::finite_diff::GradCheck;
use twinseg_tensor::{
    BatchNormOptions, Mode, ParamKind, ParameterStore, RunningStats, Tape, Tensor, Var,
};

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn artefact_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

// ---------------------------------------------------------------- 1

/// `sum(y * r)` for a fixed random `r`.
fn project(tape: &mut Tape, y: &Var, seed: u64) -> twinseg_tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Var::constant(random(y.shape(), -1.0, 1.0, &mut rng));
    let prod = tape.mul(y, &r)?;
    tape.sum(&prod)
}

struct GradCase {
    name: String,
    inputs: Vec<Tensor>,
    seed: u64,
    #[allow(clippy::type_complexity)]
    f: Box<dyn Fn(&mut Tape, &[Var]) -> twinseg_tensor::Result<Var>>,
}

fn case<F>(name: impl Into<String>, inputs: Vec<Tensor>, f: F) -> GradCase
where
    F: Fn(&mut Tape, &[Var]) -> twinseg_tensor::Result<Var> + 'static,
{
    GradCase { name: name.into(), inputs, seed: 7, f: Box::new(f) }
}

fn op_cases() -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut out = Vec::new();
    let x = random(&[2, 2, 4, 4, 4], -1.0, 1.0, &mut rng);
    let w = random(&[3, 2, 3, 3, 3], -0.5, 0.5, &mut rng);
    let b = random(&[3], -0.5, 0.5, &mut rng);
    out.push(case("conv3d", vec![x, w.clone(), b.clone()], |t, v| {
        let y = t.conv3d(&v[0], &v[1], Some(&v[2]), 1, 1)?;
        project(t, &y, 9)
    }));
    let x5 = random(&[1, 2, 5, 5, 5], -1.0, 1.0, &mut rng);
    out.push(case("conv3d stride 2", vec![x5, w, b], |t, v| {
        let y = t.conv3d(&v[0], &v[1], Some(&v[2]), 2, 1)?;
        project(t, &y, 10)
    }));
    let xs = random(&[2, 3, 2, 2, 2], -1.0, 1.0, &mut rng);
    let wt = random(&[3, 2, 2, 2, 2], -0.5, 0.5, &mut rng);
    let bt = random(&[2], -0.5, 0.5, &mut rng);
    out.push(case("conv_transpose3d", vec![xs, wt, bt], |t, v| {
        let y = t.conv_transpose3d(&v[0], &v[1], Some(&v[2]))?;
        project(t, &y, 11)
    }));
    out.push(case("maxpool3d", vec![random(&[2, 2, 4, 4, 2], -1.0, 1.0, &mut rng)], |t, v| {
        let (y, _) = t.maxpool3d(&v[0])?;
        project(t, &y, 12)
    }));
    let xn = random(&[2, 3, 2, 2, 2], -2.0, 3.0, &mut rng);
    let g = random(&[3], 0.5, 1.5, &mut rng);
    let bn = random(&[3], -0.5, 0.5, &mut rng);
    for mode in [Mode::Train, Mode::Eval] {
        out.push(case(format!("batch_norm {mode:?}"), vec![xn.clone(), g.clone(), bn.clone()], move |t, v| {
            let mut stats = RunningStats {
                mean: Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap(),
                var: Tensor::new(vec![3], vec![1.5, 0.7, 2.0]).unwrap(),
            };
            let y = t.batch_norm(&v[0], &v[1], &v[2], &mut stats, mode, BatchNormOptions::default())?;
            project(t, &y, 13)
        }));
    }
    let h = random(&[3, 2, 6], -2.0, 2.0, &mut rng);
    let lg = random(&[6], 0.5, 1.5, &mut rng);
    let lb = random(&[6], -0.5, 0.5, &mut rng);
    out.push(case("layer_norm", vec![h, lg, lb], |t, v| {
        let y = t.layer_norm(&v[0], &v[1], &v[2], 1e-5)?;
        project(t, &y, 14)
    }));
    let xl = random(&[2, 3, 5], -1.0, 1.0, &mut rng);
    let wl = random(&[4, 5], -1.0, 1.0, &mut rng);
    let bl = random(&[4], -1.0, 1.0, &mut rng);
    out.push(case("linear", vec![xl, wl, bl], |t, v| {
        let y = t.linear(&v[0], &v[1], Some(&v[2]))?;
        project(t, &y, 5)
    }));
    let qa = random(&[3, 2, 4], -1.0, 1.0, &mut rng);
    let qb = random(&[3, 4, 3], -1.0, 1.0, &mut rng);
    out.push(case("bmm", vec![qa, qb], |t, v| {
        let y = t.bmm(&v[0], &v[1])?;
        project(t, &y, 6)
    }));
    let s = random(&[2, 4, 3], -3.0, 3.0, &mut rng);
    out.push(case("softmax", vec![s.clone()], |t, v| {
        let y = t.softmax(&v[0], 1)?;
        project(t, &y, 7)
    }));
    out.push(case("log_softmax", vec![s], |t, v| {
        let y = t.log_softmax(&v[0], 2)?;
        project(t, &y, 8)
    }));
    let a = random(&[4, 6], -2.0, 2.0, &mut rng);
    out.push(case("relu", vec![a.clone()], |t, v| {
        let y = t.relu(&v[0])?;
        project(t, &y, 2)
    }));
    out.push(case("gelu", vec![a], |t, v| {
        let y = t.gelu(&v[0])?;
        project(t, &y, 3)
    }));
    out
}

/// Desk widths on an 8³ input; patch 1 keeps the 2³ bottleneck tokenisable.
fn desk_at_8() -> ModelConfig {
    let mut c = ModelConfig::desk();
    c.input_extent = 8;
    c.vit.patch_size = 1;
    c
}

fn labelled_batch(s: usize, n: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let x = random(&[n, 4, s, s, s], -1.0, 1.0, rng);
    let labels: Vec<Vec<u8>> = (0..n).map(|_| (0..s * s * s).map(|_| rng.random_range(0..4u8)).collect()).collect();
    let refs: Vec<&[u8]> = labels.iter().map(Vec::as_slice).collect();
    (x, one_hot(&refs, 4, &[s, s, s]).unwrap())
}

/// Trainable parameters under `prefix` become inputs; the rest stay constant.
/// Extra tensors are appended after the parameters.
fn block_case<F>(name: &str, net: TwinSegNet, prefix: &str, extra: Vec<Tensor>, seed: u64, f: F) -> GradCase
where
    F: Fn(&TwinSegNet, &mut Tape, &BTreeMap<String, Var>, &ParameterStore, &[Var]) -> twinseg_tensor::Result<Var>
        + 'static,
{
    let store = net.init(seed).unwrap();
    let names: Vec<String> = store
        .trainable()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, _)| n.to_string())
        .collect();
    let mut inputs: Vec<Tensor> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
    let n_params = inputs.len();
    inputs.extend(extra);
    GradCase {
        name: name.to_string(),
        inputs,
        seed,
        f: Box::new(move |tape, vars| {
            let mut params: BTreeMap<String, Var> = store
                .trainable()
                .map(|(n, p)| (n.to_string(), Var::constant(p.value.clone())))
                .collect();
            for (n, v) in names.iter().zip(vars) {
                params.insert(n.clone(), v.clone());
            }
            f(&net, tape, &params, &store, &vars[n_params..])
        }),
    }
}

fn block_cases() -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = || TwinSegNet::new(desk_at_8()).unwrap();
    let mut out = Vec::new();
    out.push(block_case("encoder block", net(), "enc0.", vec![random(&[2, 4, 8, 8, 8], -1.0, 1.0, &mut rng)], 3, |net, t, p, s, x| {
        let (pooled, skip) = net.encoder_block(t, p, s, &x[0], 0, Mode::Train).unwrap();
        let a = project(t, &pooled, 20)?;
        let b = project(t, &skip, 21)?;
        t.add(&a, &b)
    }));
    out.push(block_case("vit bottleneck", net(), "vit.", vec![random(&[2, 16, 2, 2, 2], -1.0, 1.0, &mut rng)], 4, |net, t, p, _, x| {
        let (y, _) = net.vit_bottleneck(t, p, &x[0]).unwrap();
        project(t, &y, 22)
    }));
    let up = random(&[2, 16, 4, 4, 4], -1.0, 1.0, &mut rng);
    let skip = random(&[2, 8, 8, 8, 8], -1.0, 1.0, &mut rng);
    out.push(block_case("decoder block", net(), "dec0.", vec![up, skip], 5, |net, t, p, s, x| {
        let y = net.decoder_block(t, p, s, &x[0], &x[1], 0, Mode::Train).unwrap();
        project(t, &y, 23)
    }));
    let (_, target) = labelled_batch(4, 2, &mut rng);
    for mode in [LossMode::DiceCe, LossMode::Dice] {
        let logits = random(&[2, 4, 4, 4, 4], -2.0, 2.0, &mut rng);
        let target = target.clone();
        out.push(case(format!("loss {mode:?}"), vec![logits], move |t, v| {
            Ok(composite_loss(t, &v[0], &target, mode).unwrap())
        }));
    }
    out
}

fn network_cases() -> Vec<GradCase> {
    let mut out = Vec::new();
    for (label, config) in [("desk network 8³", desk_at_8()), ("micro network", ModelConfig::micro())] {
        for seed in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, target) = labelled_batch(config.input_extent, 2, &mut rng);
            let net = TwinSegNet::new(config.clone()).unwrap();
            out.push(block_case(&format!("{label} seed {seed}"), net, "", Vec::new(), seed, move |net, t, p, s, _| {
                let pass = net.forward(t, p, s, &Var::constant(x.clone()), Mode::Train).unwrap();
                Ok(composite_loss(t, &pass.logits, &target, LossMode::DiceCe).unwrap())
            }));
        }
    }
    out
}

fn gradient_correctness() -> Result<String> {
    let started = Instant::now();
    let cases: Vec<GradCase> = op_cases().into_iter().chain(block_cases()).chain(network_cases()).collect();
    let mut worst = (0.0f64, String::new());
    let mut failures = Vec::new();
    for c in &cases {
        let report = GradCheck { samples: 40, seed: c.seed, ..Default::default() }.run(&c.inputs, &c.f)?;
        let numel: usize = c.inputs.iter().map(Tensor::numel).sum();
        if report.checked < 25.min(numel) || report.max_rel_error >= 1e-4 {
            failures.push(format!("{} ({} checked, {:.2e})", c.name, report.checked, report.max_rel_error));
        }
        if report.max_rel_error > worst.0 {
            worst = (report.max_rel_error, c.name.clone());
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(failures.is_empty(), "failing cases: {}", failures.join(", "));
    ensure!(secs < 300.0, "suite took {secs:.0} s");
    Ok(format!("{} cases, worst rel err {:.2e} ({}), {secs:.0} s", cases.len(), worst.0, worst.1))
}

// ---------------------------------------------------------------- 2, 3

fn random_fed_store(rng: &mut ChaCha8Rng, scale: f64) -> ParameterStore {
    let mut s = ParameterStore::new();
    for (name, shape) in [("a.weight", vec![3, 4]), ("b.bias", vec![5]), ("c", vec![2, 2, 2])] {
        s.insert_trainable(name, Tensor::from_fn(&shape, |_| rng.random_range(-scale..scale))).unwrap();
    }
    s.insert_buffer("bn.running_var", Tensor::from_fn(&[4], |_| rng.random_range(0.0..scale))).unwrap();
    s
}

fn update(client_id: usize, n_k: usize, params: ParameterStore) -> ClientUpdate {
    ClientUpdate { client_id, n_k, params, stats: TrainStats::default() }
}

fn exact(v: f64) -> BigRational {
    BigRational::from_float(v).unwrap()
}

fn fedavg_algebra() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tolerance = exact(1e-15);
    let mut coords = 0;
    for _ in 0..50 {
        let sizes: Vec<usize> = (0..3).map(|_| rng.random_range(1..400)).collect();
        let updates: Vec<ClientUpdate> =
            sizes.iter().enumerate().map(|(k, &n)| update(k, n, random_fed_store(&mut rng, 1.0))).collect();
        let out = fedavg_aggregate(&updates)?;
        let total = BigInt::from(sizes.iter().sum::<usize>());
        for (name, p) in out.iter() {
            for (i, &got) in p.value.data().iter().enumerate() {
                let mut want = BigRational::from_integer(BigInt::from(0));
                for u in &updates {
                    want += BigRational::new(BigInt::from(u.n_k), total.clone()) * exact(u.params.get(name).unwrap().data()[i]);
                }
                let diff = exact(got) - want;
                ensure!(diff <= tolerance && -diff <= tolerance, "(a) {name}[{i}] off the rational mean");
                coords += 1;
            }
        }
    }

    for k in 1..=9 {
        let base = random_fed_store(&mut rng, 3.0);
        let updates: Vec<ClientUpdate> = (0..k).map(|id| update(id, rng.random_range(1..100), base.clone())).collect();
        ensure!(fedavg_aggregate(&updates)?.bit_eq(&base), "(b) {k} identical clients");
    }

    let net = common::micro_net();
    let cohort = common::tiny_cohort(&[5, 6, 4], 10);
    let theta0 = net.init(10)?;
    let opts = common::options(1);
    let mut state = GlobalState::new(theta0.clone(), 10);
    state.run_round(&net, &cohort.clients, &ParticipationPolicy::Explicit(vec![1]), &opts, Execution::Serial)?;
    let (local, _) = local_train(&net, &theta0, &cohort.clients[1], &opts, client_seed(10, 1, 1))?;
    ensure!(state.params.bit_eq(&local), "(c) single participant differs from its update");

    let run = |execution| -> Result<GlobalState> {
        let mut state = GlobalState::new(theta0.clone(), 10);
        for _ in 0..2 {
            state.run_round(&net, &cohort.clients, &ParticipationPolicy::Full, &opts, execution)?;
        }
        Ok(state)
    };
    let serial = run(Execution::Serial)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build()?;
    let parallel = pool.install(|| run(Execution::Parallel))?;
    ensure!(serial.params.bit_eq(&parallel.params), "(d) serial and parallel parameters differ");
    let untimed = |logs: &[RoundLog]| -> Vec<RoundLog> {
        logs.iter().map(|l| RoundLog { wall_time_secs: 0.0, ..l.clone() }).collect()
    };
    ensure!(untimed(&serial.logs) == untimed(&parallel.logs), "(d) round logs differ");
    Ok(format!("(a) {coords} coordinates within 1e-15, (b) K=1..9 bit-exact, (c) bit-equal, (d) bit-identical over 2 rounds on 4 threads"))
}

fn one_client_equivalence() -> Result<String> {
    let net = common::micro_net();
    let cohort = common::tiny_cohort(&[7], 11);
    let theta0 = net.init(11)?;
    let opts = common::options(3);
    let mut state = GlobalState::new(theta0.clone(), 11);
    state.run_round(&net, &cohort.clients, &ParticipationPolicy::Full, &opts, Execution::Serial)?;
    let (direct, stats) = local_train(&net, &theta0, &cohort.clients[0], &opts, client_seed(11, 1, 0))?;
    ensure!(state.params.bit_eq(&direct), "parameters differ");
    ensure!(state.logs[0].clients[0].epoch_losses == stats.epoch_losses, "epoch losses differ");
    Ok(format!("E=3, {} parameters bit-identical", direct.trainable_count()))
}

// ---------------------------------------------------------------- 4

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    let weights: Vec<f64> = (0..4).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random() }).collect();
    let total: f64 = weights.iter().sum::<f64>().max(1e-9);
    (0..n)
        .map(|_| {
            let mut u = rng.random::<f64>() * total;
            for (c, w) in weights.iter().enumerate() {
                if u < *w {
                    return c as u8;
                }
                u -= w;
            }
            0
        })
        .collect()
}

fn confusion(pred: &[u8], gt: &[u8], positive: impl Fn(u8) -> bool) -> [u64; 4] {
    let mut c = [0u64; 4];
    for (&p, &g) in pred.iter().zip(gt) {
        c[match (positive(p), positive(g)) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        }] += 1;
    }
    c
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn pairwise_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0u128, 0u128);
    for (i, _) in positive.iter().enumerate().filter(|(_, &p)| p) {
        for (j, _) in positive.iter().enumerate().filter(|(_, &p)| !p) {
            pairs += 1;
            wins += match scores[i].partial_cmp(&scores[j]) {
                Some(std::cmp::Ordering::Greater) => 2,
                Some(std::cmp::Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    (pairs > 0).then(|| wins as f64 / (2 * pairs) as f64)
}

fn metric_oracles() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut identities = 0;
    for case in 0..200 {
        let gt = random_mask(&mut rng, 512);
        let pred = if case % 10 == 0 { gt.clone() } else { random_mask(&mut rng, 512) };
        for class in 0..4u8 {
            let [tp, fp, fn_, tn] = confusion(&pred, &gt, |v| v == class);
            let dice = ratio(2 * tp, 2 * tp + fp + fn_).unwrap_or(1.0);
            let iou = ratio(tp, tp + fp + fn_).unwrap_or(1.0);
            ensure!(dice_score(&pred, &gt, class)? == dice, "case {case} class {class} dice");
            ensure!(iou_score(&pred, &gt, class)? == iou, "case {case} class {class} iou");
            let c = class_counts(&pred, &gt, class)?;
            ensure!(c.sensitivity() == ratio(tp, tp + fn_), "case {case} class {class} sensitivity");
            ensure!(c.specificity() == ratio(tn, tn + fp), "case {case} class {class} specificity");
            if tp + fp + fn_ > 0 {
                let iou_q = BigRational::new(BigInt::from(tp), BigInt::from(tp + fp + fn_));
                let dice_q = BigRational::new(BigInt::from(2 * tp), BigInt::from(2 * tp + fp + fn_));
                let one = BigRational::from_integer(BigInt::from(1));
                let two = BigRational::from_integer(BigInt::from(2));
                ensure!(two * iou_q.clone() / (one + iou_q) == dice_q, "case {case} identity");
                identities += 1;
            }
        }
        let [tp, fp, fn_, tn] = confusion(&pred, &gt, |v| v != 0);
        let s = sensitivity_specificity(&pred, &gt)?;
        ensure!(s.sensitivity == ratio(tp, tp + fn_) && s.specificity == ratio(tn, tn + fp), "case {case} foreground");
        let sub = composite_subregions(&pred, &gt)?;
        for (o, set) in [(sub.et, &[3u8][..]), (sub.tc, &[2, 3]), (sub.wt, &[1, 2, 3])] {
            let [tp, fp, fn_, _] = confusion(&pred, &gt, |v| set.contains(&v));
            ensure!(o.dice == ratio(2 * tp, 2 * tp + fp + fn_).unwrap_or(1.0), "case {case} subregion");
        }
    }

    let mut worst = 0.0f64;
    for case in 0..100 {
        let n = rng.random_range(2..=1000);
        let coarse = case % 3 == 0;
        let p_rate: f64 = rng.random_range(0.05..0.95);
        let positive: Vec<bool> = (0..n).map(|_| rng.random_bool(p_rate)).collect();
        let scores: Vec<f64> = positive
            .iter()
            .map(|&p| {
                let s: f64 = rng.random::<f64>() + if p { 0.3 } else { 0.0 };
                if coarse { (s * 8.0).floor() / 8.0 } else { s }
            })
            .collect();
        match (roc_auc(&scores, &positive)?.auc, pairwise_auc(&scores, &positive)) {
            (Some(a), Some(b)) => {
                ensure!((a - b).abs() <= 1e-12, "case {case}: {a} vs {b}");
                worst = worst.max((a - b).abs());
            }
            (None, None) => {}
            other => return Err(anyhow!("case {case}: {other:?}")),
        }
    }
    Ok(format!("200 mask pairs exact, {identities} exact Dice/IoU identities, 100 AUC cases (max diff {worst:.1e})"))
}

// ---------------------------------------------------------------- 5, 6, 8

fn run_preset(preset: &str, dir: &Path) -> Result<(SummaryMetrics, f64)> {
    let mut config = ExperimentConfig::preset(preset)?;
    config.output_dir = dir.to_path_buf();
    let started = Instant::now();
    run_experiment(&config)?;
    let secs = started.elapsed().as_secs_f64();
    let summary: SummaryMetrics = serde_json::from_str(&std::fs::read_to_string(dir.join(SUMMARY_METRICS))?)?;
    Ok((summary, secs))
}

fn learning_signal(dir: &Path) -> Result<String> {
    let (s, secs) = run_preset("ci", dir)?;
    let detail = format!(
        "round 0 {:.3} -> final {:.3} (gain {:.3}), {:.1} min on {} thread(s)",
        s.round0_mean_fg_dice,
        s.final_mean_fg_dice,
        s.learning_gain,
        secs / 60.0,
        rayon::current_num_threads()
    );
    ensure!(s.learning_gain >= 0.3, "gain below 0.3: {detail}");
    ensure!(s.final_mean_fg_dice >= 0.6, "final below 0.6: {detail}");
    ensure!(secs <= 30.0 * 60.0, "over 30 min: {detail}");
    Ok(detail)
}

fn twin_direction() -> Result<String> {
    let (s, secs) = run_preset("noniid", &artefact_dir("noniid"))?;
    let detail = format!(
        "mean DT-global Dice {:+.4}, {}/{} clients non-negative, {:.1} min",
        s.mean_delta_dice,
        s.non_negative_dice_clients,
        s.clients.len(),
        secs / 60.0
    );
    ensure!(s.mean_delta_dice >= 0.0, "{detail}");
    ensure!(s.non_negative_dice_clients >= 6, "{detail}");
    Ok(detail)
}

fn determinism(first: &Path) -> Result<String> {
    let second = artefact_dir("ci-repeat");
    run_preset("ci", &second)?;
    let a = std::fs::read(first.join(COMPARISON_CSV))?;
    let b = std::fs::read(second.join(COMPARISON_CSV))?;
    ensure!(a == b, "comparison CSVs differ");
    Ok(format!("{} identical bytes", a.len()))
}

// ---------------------------------------------------------------- 7

fn random_store(seed: u64) -> ParameterStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    for i in 0..rng.random_range(1..8) {
        let rank = rng.random_range(0..4);
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..4)).collect();
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| match rng.random_range(0..6) {
                0 => f64::from_bits(rng.random()),
                1 => -0.0,
                2 => f64::INFINITY,
                _ => rng.random_range(-1e6..1e6),
            })
            .collect();
        let name = format!("layer{i}.{}", ["weight", "bias", "running_var"][i % 3]);
        let t = Tensor::new(shape, data).unwrap();
        if rng.random_bool(0.3) {
            store.insert_buffer(&name, t).unwrap();
        } else {
            store.insert_trainable(&name, t).unwrap();
        }
    }
    store
}

fn persistence() -> Result<String> {
    let dir = tempfile::tempdir()?;
    for seed in 0..50 {
        let store = random_store(seed);
        let path = dir.path().join(format!("s{seed}.ckpt"));
        checkpoint::save(&store, "cfg", &path)?;
        let back = checkpoint::load(&path)?;
        ensure!(back.store.bit_eq(&store), "store {seed} not bit-identical");
        let kinds = |s: &ParameterStore| s.iter().map(|(n, p)| (n.to_string(), p.kind)).collect::<Vec<(String, ParamKind)>>();
        ensure!(kinds(&back.store) == kinds(&store), "store {seed} kinds differ");
    }

    let bytes = checkpoint::encode(&random_store(3), "cfg")?;
    for len in 0..bytes.len() {
        ensure!(checkpoint::decode(&bytes[..len]).is_err(), "truncation to {len} accepted");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let flips = 300;
    for _ in 0..flips {
        let at = rng.random_range(0..bytes.len());
        let mut bad = bytes.clone();
        bad[at] ^= 1 << rng.random_range(0..8);
        ensure!(checkpoint::decode(&bad).is_err(), "bit flip at {at} accepted");
    }

    let path = dir.path().join("keep.ckpt");
    checkpoint::save(&random_store(4), "one", &path)?;
    let good = std::fs::read(&path)?;
    let mut bad = good.clone();
    let last = bad.len() - 1;
    bad[last] ^= 0xFF;
    std::fs::write(dir.path().join("bad.ckpt"), &bad)?;
    ensure!(checkpoint::load(&dir.path().join("bad.ckpt")).is_err(), "corrupted file loaded");
    let missing = dir.path().join("absent").join("x.ckpt");
    ensure!(checkpoint::save(&random_store(5), "two", &missing).is_err() && !missing.exists(), "failed save left a file");
    ensure!(std::fs::read(&path)? == good, "untouched checkpoint changed");
    let stray = std::fs::read_dir(dir.path())?.filter_map(|e| e.ok()).any(|e| e.file_name().to_string_lossy().ends_with(".tmp"));
    ensure!(!stray, "temporary files left behind");
    Ok(format!("50 stores bit-identical, {} truncations and {flips} bit flips rejected", bytes.len()))
}

// ---------------------------------------------------------------- 9

fn paper_constructibility() -> Result<String> {
    let r = validate_paper_preset(true);
    ensure!(r.passed(), "{r:?}");
    let gb = |b: u64| b as f64 / 1e9;
    Ok(match r.shape_source {
        ShapeSource::Forward => format!(
            "{} parameters, forward pass returned {:?}",
            r.trainable_parameters, r.output_shape
        ),
        ShapeSource::Analytic => format!(
            "{} parameters, output {:?} derived without a forward pass (needs ~{:.1} GB, {:.1} GB available)",
            r.trainable_parameters,
            r.output_shape,
            gb(r.estimated_forward_bytes),
            gb(r.available_bytes.unwrap_or(0))
        ),
    })
}

// ----------------------------------------------------------------

fn report(id: usize, title: &str, f: impl FnOnce() -> Result<String>) -> bool {
    let started = Instant::now();
    let outcome = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(panic) => Err(anyhow!(
            "panicked: {}",
            panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default()
        )),
    };
    let secs = started.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS [{id}] {title}: {detail} [{secs:.0} s]");
            true
        }
        Err(e) => {
            println!("FAIL [{id}] {title}: {e:#} [{secs:.0} s]");
            false
        }
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let ci_dir = artefact_dir("ci");
    let mut results = BTreeMap::new();
    results.insert(1, report(1, "gradient correctness", gradient_correctness));
    results.insert(2, report(2, "FedAvg algebra", fedavg_algebra));
    results.insert(3, report(3, "one-client equivalence", one_client_equivalence));
    results.insert(4, report(4, "metric oracles", metric_oracles));
    results.insert(7, report(7, "persistence", persistence));
    results.insert(9, report(9, "paper-scale constructibility", paper_constructibility));
    results.insert(5, report(5, "learning signal", || learning_signal(&ci_dir)));
    results.insert(8, report(8, "end-to-end determinism", || determinism(&ci_dir)));
    results.insert(6, report(6, "twin direction", twin_direction));
    let failed: Vec<String> = results.iter().filter(|(_, ok)| !**ok).map(|(id, _)| id.to_string()).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
