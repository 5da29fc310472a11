use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use twinseg_tensor::Tensor;

use super::volume::Volume;

/// Probabilities and ranges of the training-time augmentations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_p: f64,
    pub affine_p: f64,
    pub max_rotation_deg: f64,
    pub scale_range: [f64; 2],
    pub noise_p: f64,
    pub max_noise_std: f64,
    pub bias_field_p: f64,
    /// Bound on every coefficient of the quadratic bias polynomial.
    pub bias_field_coeff: f64,
    pub elastic: bool,
    pub elastic_p: f64,
    /// Bound on control-point displacement, in voxels.
    pub elastic_magnitude: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_p: 0.5,
            affine_p: 0.5,
            max_rotation_deg: 10.0,
            scale_range: [0.9, 1.1],
            noise_p: 0.5,
            max_noise_std: 0.1,
            bias_field_p: 0.5,
            bias_field_coeff: 0.1,
            elastic: false,
            elastic_p: 0.5,
            elastic_magnitude: 2.0,
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn none() -> Self {
        AugmentConfig {
            flip_p: 0.0,
            affine_p: 0.0,
            noise_p: 0.0,
            bias_field_p: 0.0,
            elastic: false,
            ..AugmentConfig::default()
        }
    }
}

fn gate(rng: &mut impl Rng, p: f64) -> bool {
    rng.random::<f64>() < p
}

/// Randomly transformed copy of `volume`. Spatial transforms act identically
/// on image and labels; intensity transforms touch the image only.
pub fn augment(volume: &Volume, config: &AugmentConfig, rng: &mut impl Rng) -> Volume {
    let mut out = volume.clone();
    for axis in 0..3 {
        if gate(rng, config.flip_p) {
            out = flip(&out, axis);
        }
    }
    if gate(rng, config.affine_p) {
        let axis = rng.random_range(0..3usize);
        let max = config.max_rotation_deg.to_radians();
        let angle = if max > 0.0 { rng.random_range(-max..=max) } else { 0.0 };
        let [lo, hi] = config.scale_range;
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        out = affine(&out, axis, angle, scale);
    }
    if config.elastic && gate(rng, config.elastic_p) {
        out = elastic(&out, config.elastic_magnitude, rng);
    }
    if gate(rng, config.noise_p) && config.max_noise_std > 0.0 {
        let std = rng.random_range(0.0..config.max_noise_std);
        if let Ok(normal) = Normal::new(0.0, std) {
            out.image
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += normal.sample(rng));
        }
    }
    if gate(rng, config.bias_field_p) {
        let b = config.bias_field_coeff;
        let coeffs: Vec<f64> = (0..BIAS_TERMS.len())
            .map(|_| if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 })
            .collect();
        out = bias_field(&out, &coeffs);
    }
    out
}

/// Mirrors image and labels along spatial axis `axis` (0 = depth, 1 = height, 2 = width).
pub fn flip(volume: &Volume, axis: usize) -> Volume {
    let s = volume.extent();
    let source = |i: usize| {
        let mut p = [i / (s * s), (i / s) % s, i % s];
        p[axis] = s - 1 - p[axis];
        (p[0] * s + p[1]) * s + p[2]
    };
    let voxels = volume.voxels();
    let labels = (0..voxels).map(|i| volume.labels[source(i)]).collect();
    let src = volume.image.data();
    let data = (0..src.len())
        .map(|k| {
            let (c, i) = (k / voxels, k % voxels);
            src[c * voxels + source(i)]
        })
        .collect();
    Volume {
        subject_id: volume.subject_id.clone(),
        image: Tensor::new(volume.image.shape().to_vec(), data).expect("same shape"),
        labels,
        preprocessed: volume.preprocessed,
    }
}

/// Resamples `volume` at `map(output voxel) -> source coordinate`, clamping
/// to the edge: trilinear for the image, nearest for the labels.
fn warp(volume: &Volume, map: impl Fn([f64; 3]) -> [f64; 3]) -> Volume {
    let s = volume.extent();
    let voxels = volume.voxels();
    let channels = volume.image.shape()[0];
    let src = volume.image.data();
    let max = (s - 1) as f64;
    let mut image = vec![0.0; src.len()];
    let mut labels = vec![0u8; voxels];
    for i in 0..voxels {
        let p = [(i / (s * s)) as f64, ((i / s) % s) as f64, (i % s) as f64];
        let q = map(p).map(|v| v.clamp(0.0, max));
        let near = q.map(|v| v.round() as usize);
        labels[i] = volume.labels[(near[0] * s + near[1]) * s + near[2]];
        let lo = q.map(|v| (v.floor() as usize).min(s - 1));
        let hi = lo.map(|v| (v + 1).min(s - 1));
        let f = [q[0] - lo[0] as f64, q[1] - lo[1] as f64, q[2] - lo[2] as f64];
        for c in 0..channels {
            let at = |z: usize, y: usize, x: usize| src[c * voxels + (z * s + y) * s + x];
            let lerp = |a: f64, b: f64, t: f64| a * (1.0 - t) + b * t;
            let c0 = lerp(
                lerp(at(lo[0], lo[1], lo[2]), at(lo[0], lo[1], hi[2]), f[2]),
                lerp(at(lo[0], hi[1], lo[2]), at(lo[0], hi[1], hi[2]), f[2]),
                f[1],
            );
            let c1 = lerp(
                lerp(at(hi[0], lo[1], lo[2]), at(hi[0], lo[1], hi[2]), f[2]),
                lerp(at(hi[0], hi[1], lo[2]), at(hi[0], hi[1], hi[2]), f[2]),
                f[1],
            );
            image[c * voxels + i] = lerp(c0, c1, f[0]);
        }
    }
    Volume {
        subject_id: volume.subject_id.clone(),
        image: Tensor::new(volume.image.shape().to_vec(), image).expect("same shape"),
        labels,
        preprocessed: volume.preprocessed,
    }
}

/// Rotation by `angle` radians about `axis` and isotropic `scale`, about the volume centre.
pub fn affine(volume: &Volume, axis: usize, angle: f64, scale: f64) -> Volume {
    let c = (volume.extent() - 1) as f64 / 2.0;
    let (sin, cos) = angle.sin_cos();
    let (a, b) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    warp(volume, |p| {
        let d = [p[0] - c, p[1] - c, p[2] - c];
        let mut q = d;
        q[a] = (cos * d[a] + sin * d[b]) / scale;
        q[b] = (-sin * d[a] + cos * d[b]) / scale;
        q[axis] = d[axis] / scale;
        [q[0] + c, q[1] + c, q[2] + c]
    })
}

const CONTROL: usize = 4;

/// Smooth random displacement interpolated from a coarse control grid.
pub fn elastic(volume: &Volume, magnitude: f64, rng: &mut impl Rng) -> Volume {
    let s = volume.extent();
    let grids: Vec<Tensor> = (0..3)
        .map(|_| {
            Tensor::from_fn(&[1, CONTROL, CONTROL, CONTROL], |_| {
                if magnitude > 0.0 {
                    rng.random_range(-magnitude..=magnitude)
                } else {
                    0.0
                }
            })
        })
        .collect();
    let fields: Vec<Tensor> = grids
        .iter()
        .map(|g| super::preprocess::resize_image(g, s).expect("positive extent"))
        .collect();
    warp(volume, |p| {
        let i = (p[0] as usize * s + p[1] as usize) * s + p[2] as usize;
        [
            p[0] + fields[0].data()[i],
            p[1] + fields[1].data()[i],
            p[2] + fields[2].data()[i],
        ]
    })
}

/// Monomial exponents of the degree-2 bias polynomial (constant term excluded).
const BIAS_TERMS: [[i32; 3]; 9] = [
    [1, 0, 0],
    [0, 1, 0],
    [0, 0, 1],
    [2, 0, 0],
    [0, 2, 0],
    [0, 0, 2],
    [1, 1, 0],
    [1, 0, 1],
    [0, 1, 1],
];

/// Multiplies the image by `1 + Σ c_k m_k(x)` over normalised coordinates in `[-1, 1]`.
pub fn bias_field(volume: &Volume, coeffs: &[f64]) -> Volume {
    let s = volume.extent();
    let voxels = volume.voxels();
    let norm = |v: usize| {
        if s > 1 {
            2.0 * v as f64 / (s - 1) as f64 - 1.0
        } else {
            0.0
        }
    };
    let field: Vec<f64> = (0..voxels)
        .map(|i| {
            let p = [norm(i / (s * s)), norm((i / s) % s), norm(i % s)];
            1.0 + BIAS_TERMS
                .iter()
                .zip(coeffs)
                .map(|(e, c)| c * p[0].powi(e[0]) * p[1].powi(e[1]) * p[2].powi(e[2]))
                .sum::<f64>()
        })
        .collect();
    let mut out = volume.clone();
    for (k, v) in out.image.data_mut().iter_mut().enumerate() {
        *v *= field[k % voxels];
    }
    out
}
