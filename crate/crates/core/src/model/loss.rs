use serde::{Deserialize, Serialize};
use twinseg_tensor::{Tape, Tensor, Var};

use crate::error::{Error, Result};

pub const DICE_EPS: f64 = 1e-5;

/// Training objective selector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "dice")]
    Dice,
    #[default]
    #[serde(rename = "dice+ce")]
    DiceCe,
}

/// One-hot encodes a batch of label volumes into `[N, classes, spatial...]`.
pub fn one_hot(labels: &[&[u8]], classes: usize, spatial: &[usize]) -> Result<Tensor> {
    let voxels: usize = spatial.iter().product();
    let mut shape = vec![labels.len(), classes];
    shape.extend_from_slice(spatial);
    let mut data = vec![0.0; labels.len() * classes * voxels];
    for (n, volume) in labels.iter().enumerate() {
        if volume.len() != voxels {
            return Err(Error::Data(format!(
                "label volume has {} voxels, expected {voxels}",
                volume.len()
            )));
        }
        for (i, &label) in volume.iter().enumerate() {
            let class = label as usize;
            if class >= classes {
                return Err(Error::Data(format!("label {label} outside 0..{classes}")));
            }
            data[(n * classes + class) * voxels + i] = 1.0;
        }
    }
    Ok(Tensor::new(shape, data)?)
}

fn check_one_hot(logits: &Var, target: &Tensor) -> Result<()> {
    if logits.shape() != target.shape() || logits.shape().len() < 2 {
        return Err(Error::Training(format!(
            "target shape {:?} does not match logits {:?}",
            target.shape(),
            logits.shape()
        )));
    }
    let (n, c) = (target.shape()[0], target.shape()[1]);
    let voxels = target.numel() / (n * c).max(1);
    let d = target.data();
    for b in 0..n {
        for i in 0..voxels {
            let mut ones = 0;
            for k in 0..c {
                match d[(b * c + k) * voxels + i] {
                    v if v == 1.0 => ones += 1,
                    v if v == 0.0 => {}
                    v => {
                        return Err(Error::Training(format!("target is not one-hot: value {v}")))
                    }
                }
            }
            if ones != 1 {
                return Err(Error::Training(format!(
                    "target is not one-hot: voxel {i} of sample {b} has {ones} active classes"
                )));
            }
        }
    }
    Ok(())
}

/// Soft Dice loss: `1 - mean_c (2 Σ p t + ε) / (Σ p + Σ t + ε)` with `p = softmax(logits)`.
pub fn dice_loss(tape: &mut Tape, logits: &Var, target: &Tensor) -> Result<Var> {
    check_one_hot(logits, target)?;
    dice_unchecked(tape, logits, target)
}

fn dice_unchecked(tape: &mut Tape, logits: &Var, target: &Tensor) -> Result<Var> {
    let t = Var::constant(target.clone());
    let p = tape.softmax(logits, 1)?;
    let pt = tape.mul(&p, &t)?;
    let inter = tape.channel_sum(&pt)?;
    let sum_p = tape.channel_sum(&p)?;
    let sum_t = tape.channel_sum(&t)?;
    let num = tape.mul_scalar(&inter, 2.0)?;
    let num = tape.add_scalar(&num, DICE_EPS)?;
    let den = tape.add(&sum_p, &sum_t)?;
    let den = tape.add_scalar(&den, DICE_EPS)?;
    let dice = tape.div(&num, &den)?;
    let mean = tape.mean(&dice)?;
    let neg = tape.mul_scalar(&mean, -1.0)?;
    Ok(tape.add_scalar(&neg, 1.0)?)
}

/// Voxel-averaged categorical cross-entropy.
pub fn cross_entropy(tape: &mut Tape, logits: &Var, target: &Tensor) -> Result<Var> {
    check_one_hot(logits, target)?;
    cross_entropy_unchecked(tape, logits, target)
}

fn cross_entropy_unchecked(tape: &mut Tape, logits: &Var, target: &Tensor) -> Result<Var> {
    let voxels = target.numel() / target.shape()[1];
    let log_p = tape.log_softmax(logits, 1)?;
    let picked = tape.mul(&log_p, &Var::constant(target.clone()))?;
    let total = tape.sum(&picked)?;
    Ok(tape.mul_scalar(&total, -1.0 / voxels as f64)?)
}

/// Dice alone, or Dice plus cross-entropy weighted 1:1.
pub fn composite_loss(tape: &mut Tape, logits: &Var, target: &Tensor, mode: LossMode) -> Result<Var> {
    check_one_hot(logits, target)?;
    let dice = dice_unchecked(tape, logits, target)?;
    match mode {
        LossMode::Dice => Ok(dice),
        LossMode::DiceCe => {
            let ce = cross_entropy_unchecked(tape, logits, target)?;
            Ok(tape.add(&dice, &ce)?)
        }
    }
}
