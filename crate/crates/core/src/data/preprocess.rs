use twinseg_tensor::Tensor;

use super::volume::Volume;
use crate::error::{Error, Result};

/// Per-modality min-max scaling to `[0, 1]`. A constant modality becomes zeros.
pub fn rescale_intensity(image: &Tensor) -> Tensor {
    map_channels(image, |c| {
        let (lo, hi) = c
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        if range > 0.0 {
            c.iter_mut().for_each(|v| *v = (*v - lo) / range);
        } else {
            c.fill(0.0);
        }
    })
}

/// Per-modality standardisation with the population standard deviation.
/// A constant modality becomes zeros.
pub fn z_normalize(image: &Tensor) -> Tensor {
    map_channels(image, |c| {
        let n = c.len() as f64;
        let mean = c.iter().sum::<f64>() / n;
        let var = c.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std > 0.0 {
            c.iter_mut().for_each(|v| *v = (*v - mean) / std);
        } else {
            c.fill(0.0);
        }
    })
}

fn map_channels(image: &Tensor, f: impl Fn(&mut [f64])) -> Tensor {
    let mut out = image.clone();
    let channels = image.shape()[0].max(1);
    let per = image.numel() / channels;
    if per > 0 {
        out.data_mut().chunks_mut(per).for_each(f);
    }
    out
}

/// Source coordinate of output index `i` when mapping `n_in` samples onto
/// `n_out` with corners aligned.
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out == 1 {
        0.0
    } else {
        i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
    }
}

/// Trilinear resampling of every channel of `[C, S, S, S]`, corners aligned.
pub fn resize_image(image: &Tensor, target: usize) -> Result<Tensor> {
    let shape = image.shape();
    if target == 0 {
        return Err(Error::Data("resize target extent must be positive".into()));
    }
    let (c, s) = (shape[0], shape[1]);
    if s == target {
        return Ok(image.clone());
    }
    let axis: Vec<(usize, usize, f64)> = (0..target)
        .map(|i| {
            let x = source_coord(i, s, target);
            let lo = (x.floor() as usize).min(s - 1);
            let hi = (lo + 1).min(s - 1);
            (lo, hi, x - lo as f64)
        })
        .collect();
    let src = image.data();
    let mut out = vec![0.0; c * target * target * target];
    let at = |ch: usize, z: usize, y: usize, x: usize| src[((ch * s + z) * s + y) * s + x];
    let mut k = 0;
    for ch in 0..c {
        for &(z0, z1, fz) in &axis {
            for &(y0, y1, fy) in &axis {
                for &(x0, x1, fx) in &axis {
                    let c00 = at(ch, z0, y0, x0) * (1.0 - fx) + at(ch, z0, y0, x1) * fx;
                    let c01 = at(ch, z0, y1, x0) * (1.0 - fx) + at(ch, z0, y1, x1) * fx;
                    let c10 = at(ch, z1, y0, x0) * (1.0 - fx) + at(ch, z1, y0, x1) * fx;
                    let c11 = at(ch, z1, y1, x0) * (1.0 - fx) + at(ch, z1, y1, x1) * fx;
                    let c0 = c00 * (1.0 - fy) + c01 * fy;
                    let c1 = c10 * (1.0 - fy) + c11 * fy;
                    out[k] = c0 * (1.0 - fz) + c1 * fz;
                    k += 1;
                }
            }
        }
    }
    Ok(Tensor::new(vec![c, target, target, target], out)?)
}

/// Nearest-neighbour resampling of a label cube, corners aligned.
pub fn resize_labels(labels: &[u8], extent: usize, target: usize) -> Result<Vec<u8>> {
    if target == 0 {
        return Err(Error::Data("resize target extent must be positive".into()));
    }
    if extent == target {
        return Ok(labels.to_vec());
    }
    let idx: Vec<usize> = (0..target)
        .map(|i| (source_coord(i, extent, target).round() as usize).min(extent - 1))
        .collect();
    let mut out = Vec::with_capacity(target.pow(3));
    for &z in &idx {
        for &y in &idx {
            for &x in &idx {
                out.push(labels[(z * extent + y) * extent + x]);
            }
        }
    }
    Ok(out)
}

pub fn resize(volume: &Volume, target: usize) -> Result<Volume> {
    Ok(Volume {
        subject_id: volume.subject_id.clone(),
        image: resize_image(&volume.image, target)?,
        labels: resize_labels(&volume.labels, volume.extent(), target)?,
        preprocessed: volume.preprocessed,
    })
}

/// Rescale, standardise, then resize. Rejects a volume that was already processed.
pub fn preprocess(volume: &Volume, target: usize) -> Result<Volume> {
    if volume.preprocessed {
        return Err(Error::Data(format!(
            "{}: preprocessing applied twice",
            volume.subject_id
        )));
    }
    let image = z_normalize(&rescale_intensity(&volume.image));
    let staged = Volume {
        image,
        ..volume.clone()
    };
    let mut out = resize(&staged, target)?;
    out.preprocessed = true;
    Ok(out)
}
