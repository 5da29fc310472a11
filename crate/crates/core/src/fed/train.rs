use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use twinseg_tensor::{AdamConfig, AdamState, Mode, ParameterStore, Tape, Tensor, Var};

use crate::data::{augment, AugmentConfig, ClientDataset, Volume};
use crate::error::{Error, Result};
use crate::metrics::{predict_labels, Evaluator, MetricsReport};
use crate::model::{composite_loss, one_hot, LossMode, TwinSegNet};
use crate::seed::rng_for;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss: LossMode,
    pub augment: AugmentConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 5,
            batch_size: 2,
            adam: AdamConfig::default(),
            loss: LossMode::default(),
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    /// Mean batch loss of every epoch, in order.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

impl TrainStats {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Stacks images into `[N, modalities, S, S, S]` and one-hot labels into `[N, classes, S, S, S]`.
pub fn batch_tensors(volumes: &[&Volume], classes: usize) -> Result<(Tensor, Tensor)> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::Training("empty batch".into()))?;
    let s = first.extent();
    let mut data = Vec::with_capacity(volumes.len() * first.image.numel());
    for v in volumes {
        if v.image.shape() != first.image.shape() {
            return Err(Error::Training(format!(
                "{}: image shape {:?} differs from batch shape {:?}",
                v.subject_id,
                v.image.shape(),
                first.image.shape()
            )));
        }
        data.extend_from_slice(v.image.data());
    }
    let mut shape = vec![volumes.len()];
    shape.extend_from_slice(first.image.shape());
    let x = Tensor::new(shape, data)?;
    let labels: Vec<&[u8]> = volumes.iter().map(|v| v.labels.as_slice()).collect();
    let y = one_hot(&labels, classes, &[s, s, s])?;
    Ok((x, y))
}

/// Trains a copy of `theta_in` on the client's training split with a fresh
/// optimiser. Batch order and augmentation draws derive from `seed`.
pub fn local_train(
    net: &TwinSegNet,
    theta_in: &ParameterStore,
    data: &ClientDataset,
    options: &TrainOptions,
    seed: u64,
) -> Result<(ParameterStore, TrainStats)> {
    if options.epochs == 0 {
        return Err(Error::Training("epochs must be at least 1".into()));
    }
    if options.batch_size == 0 {
        return Err(Error::Training("batch_size must be at least 1".into()));
    }
    if data.train.is_empty() {
        return Err(Error::Training(format!(
            "client `{}` has an empty training split",
            data.name
        )));
    }
    let classes = net.config().num_classes;
    let mut theta = theta_in.clone();
    theta.clear_grads();
    let mut adam = AdamState::new(options.adam);
    let mut stats = TrainStats::default();

    for epoch in 0..options.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng_for(&[seed, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(options.batch_size).enumerate() {
            let augmented: Vec<Volume> = chunk
                .iter()
                .enumerate()
                .map(|(j, &i)| {
                    let position = (b * options.batch_size + j) as u64;
                    let mut rng = rng_for(&[seed, epoch as u64, position, i as u64]);
                    augment(&data.train[i], &options.augment, &mut rng)
                })
                .collect();
            let refs: Vec<&Volume> = augmented.iter().collect();
            let (x, y) = batch_tensors(&refs, classes)?;

            let mut tape = Tape::new();
            let params = net.bind(&mut tape, &theta);
            let pass = net.forward(&mut tape, &params, &theta, &Var::constant(x), Mode::Train)?;
            let loss = composite_loss(&mut tape, &pass.logits, &y, options.loss)?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, batch {b} of client `{}`",
                    data.name
                )));
            }
            let grads = tape.backward(&loss)?;
            net.store_grads(&grads, &params, &mut theta)?;
            drop(grads);
            drop(tape);
            adam.step(&mut theta)?;
            for (name, value) in pass.buffers {
                *theta.get_mut(&name)? = value;
            }
            loss_sum += value;
            batches += 1;
            stats.steps += 1;
        }
        stats.epoch_losses.push(loss_sum / batches as f64);
    }
    Ok((theta, stats))
}

/// Eval-mode class probabilities `[classes, S, S, S]` and argmax labels of each volume.
pub fn predict(
    net: &TwinSegNet,
    theta: &ParameterStore,
    volumes: &[Volume],
) -> Result<Vec<(Tensor, Vec<u8>)>> {
    let classes = net.config().num_classes;
    volumes
        .iter()
        .map(|v| {
            let (x, _) = batch_tensors(&[v], classes)?;
            let mut tape = Tape::no_grad();
            let params = net.bind(&mut tape, theta);
            let pass = net.forward(&mut tape, &params, theta, &Var::constant(x), Mode::Eval)?;
            let logits = pass.logits.value();
            let pred = predict_labels(logits)?.remove(0);
            let probs = twinseg_tensor::softmax_values(logits, 1)?;
            let mut shape = probs.shape()[1..].to_vec();
            shape[0] = classes;
            Ok((probs.reshape(&shape)?, pred))
        })
        .collect()
}

/// Evaluates `theta` on `volumes`, summing voxel counts across them.
pub fn evaluate(
    net: &TwinSegNet,
    theta: &ParameterStore,
    volumes: &[Volume],
    roc_points: usize,
) -> Result<MetricsReport> {
    let mut evaluator = Evaluator::new(net.config().num_classes);
    for ((probs, pred), v) in predict(net, theta, volumes)?.into_iter().zip(volumes) {
        let flat = probs.reshape(&[net.config().num_classes, v.voxels()])?;
        evaluator.add(&flat, &pred, &v.labels)?;
    }
    evaluator.finish(roc_points)
}
