use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use twinseg_tensor::Tensor;

use super::volume::{Volume, MODALITIES};
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Mean intensity per class (rows: background, edema, core, enhancing)
/// and modality (columns: T1, T1ce, T2, FLAIR). No single column separates
/// all four classes.
pub const SIGNATURES: [[f64; 4]; 4] = [
    [0.4, 0.3, 0.3, 0.3],
    [0.4, 0.3, 0.8, 0.8],
    [0.2, 0.3, 0.8, 0.5],
    [0.2, 0.9, 0.5, 0.5],
];

const CORE_SCALE: (f64, f64) = (0.6, 0.65);
const ENHANCING_SCALE: (f64, f64) = (0.3, 0.35);
const RADIUS_JITTER: (f64, f64) = (0.8, 1.2);
const BACKGROUND_AMPLITUDE: f64 = 0.05;

/// Generation parameters of one simulated site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSpec {
    pub name: String,
    pub sample_count: usize,
    /// Probability that each of edema, core, enhancing appears in a subject.
    pub prevalence: [f64; 3],
    /// Mean semi-axis of the edema ellipsoid, in voxels of the raw extent.
    pub radius: f64,
    /// Magnitude of the site-specific perturbation of [`SIGNATURES`].
    pub signature_shift: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

/// Nested axis-aligned ellipsoids sharing one centre.
#[derive(Clone, Debug, PartialEq)]
pub struct TumorGeometry {
    pub center: [f64; 3],
    pub edema: [f64; 3],
    pub core: [f64; 3],
    pub enhancing: [f64; 3],
    /// Whether edema, core, enhancing are painted.
    pub present: [bool; 3],
}

impl TumorGeometry {
    pub fn inside(radii: &[f64; 3], center: &[f64; 3], p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| {
                if radii[a] <= 0.0 {
                    f64::INFINITY
                } else {
                    ((p[a] - center[a]) / radii[a]).powi(2)
                }
            })
            .sum::<f64>()
            <= 1.0
    }
}

/// Per-site perturbation direction of the intensity signatures, in ±1.
pub fn signature_perturbation(spec: &ClientSpec) -> [[f64; 4]; 4] {
    let mut rng = rng_for(&[spec.seed, 0x5157]);
    let mut p = [[0.0; 4]; 4];
    for row in p.iter_mut() {
        for v in row.iter_mut() {
            *v = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
    }
    p
}

pub fn client_signatures(spec: &ClientSpec) -> [[f64; 4]; 4] {
    let p = signature_perturbation(spec);
    let mut s = SIGNATURES;
    for (row, prow) in s.iter_mut().zip(p) {
        for (v, d) in row.iter_mut().zip(prow) {
            *v += spec.signature_shift * d;
        }
    }
    s
}

fn check_spec(spec: &ClientSpec, extent: usize) -> Result<()> {
    let bad = |msg: String| Err(Error::Data(format!("client `{}`: {msg}", spec.name)));
    if extent < 2 {
        return bad(format!("extent {extent} too small"));
    }
    if spec.prevalence.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return bad(format!("prevalence {:?} outside [0, 1]", spec.prevalence));
    }
    if !(spec.radius >= 0.0) || !(spec.noise >= 0.0) || !spec.signature_shift.is_finite() {
        return bad("radius and noise must be non-negative and finite".into());
    }
    let reach = spec.radius * RADIUS_JITTER.1 + 1.0;
    if spec.radius > 0.0 && 2.0 * reach > extent as f64 - 1.0 {
        return bad(format!(
            "radius {} too large for extent {extent} (needs 2 * ({} * {} + 1) <= extent - 1)",
            spec.radius, spec.radius, RADIUS_JITTER.1
        ));
    }
    Ok(())
}

/// Deterministic phantom for `(global_seed, client_id, index)` plus its tumour geometry.
pub fn generate_phantom_with_geometry(
    spec: &ClientSpec,
    extent: usize,
    global_seed: u64,
    client_id: usize,
    index: usize,
) -> Result<(Volume, TumorGeometry)> {
    check_spec(spec, extent)?;
    let mut rng = rng_for(&[global_seed, spec.seed, client_id as u64, index as u64]);
    let s = extent as f64;

    let mut edema = [0.0; 3];
    let mut core = [0.0; 3];
    let mut enhancing = [0.0; 3];
    for a in 0..3 {
        edema[a] = spec.radius * rng.random_range(RADIUS_JITTER.0..=RADIUS_JITTER.1);
        core[a] = edema[a] * rng.random_range(CORE_SCALE.0..=CORE_SCALE.1);
        enhancing[a] = edema[a] * rng.random_range(ENHANCING_SCALE.0..=ENHANCING_SCALE.1);
    }
    let margin = spec.radius * RADIUS_JITTER.1 + 1.0;
    let mut center = [0.0; 3];
    for c in center.iter_mut() {
        *c = if spec.radius > 0.0 {
            rng.random_range(margin..=(s - 1.0 - margin))
        } else {
            (s - 1.0) / 2.0
        };
    }
    let mut present = [false; 3];
    for (flag, &p) in present.iter_mut().zip(&spec.prevalence) {
        *flag = rng.random::<f64>() < p;
    }
    if spec.radius == 0.0 {
        present = [false; 3];
    }
    let geometry = TumorGeometry {
        center,
        edema,
        core,
        enhancing,
        present,
    };

    let signatures = client_signatures(spec);
    let gain: Vec<f64> = (0..4).map(|_| rng.random_range(0.8..1.2)).collect();
    let offset: Vec<f64> = (0..4).map(|_| rng.random_range(-0.1..0.1)).collect();
    let freq: Vec<[f64; 3]> = (0..4)
        .map(|_| {
            [
                rng.random_range(0.5..1.5),
                rng.random_range(0.5..1.5),
                rng.random_range(0.5..1.5),
            ]
        })
        .collect();
    let phase: Vec<f64> = (0..4)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    let noise = Normal::new(0.0, spec.noise)
        .map_err(|e| Error::Data(format!("client `{}`: {e}", spec.name)))?;

    let voxels = extent.pow(3);
    let mut labels = vec![0u8; voxels];
    for (i, label) in labels.iter_mut().enumerate() {
        let p = [
            (i / (extent * extent)) as f64,
            ((i / extent) % extent) as f64,
            (i % extent) as f64,
        ];
        *label = if present[2] && TumorGeometry::inside(&enhancing, &center, p) {
            3
        } else if present[1] && TumorGeometry::inside(&core, &center, p) {
            2
        } else if present[0] && TumorGeometry::inside(&edema, &center, p) {
            1
        } else {
            0
        };
    }

    let mut image = vec![0.0; MODALITIES.len() * voxels];
    for m in 0..MODALITIES.len() {
        let channel = &mut image[m * voxels..(m + 1) * voxels];
        for (i, v) in channel.iter_mut().enumerate() {
            let p = [
                (i / (extent * extent)) as f64 / s,
                ((i / extent) % extent) as f64 / s,
                (i % extent) as f64 / s,
            ];
            let field = BACKGROUND_AMPLITUDE
                * (std::f64::consts::PI
                    * (freq[m][0] * p[0] + freq[m][1] * p[1] + freq[m][2] * p[2])
                    + phase[m])
                    .cos();
            let clean = signatures[labels[i] as usize][m] + field;
            *v = gain[m] * clean + offset[m] + noise.sample(&mut rng);
        }
    }
    let subject_id = format!("c{client_id:02}-s{index:04}");
    let image = Tensor::new(vec![4, extent, extent, extent], image)?;
    Ok((Volume::new(subject_id, image, labels)?, geometry))
}

pub fn generate_phantom(
    spec: &ClientSpec,
    extent: usize,
    global_seed: u64,
    client_id: usize,
    index: usize,
) -> Result<Volume> {
    generate_phantom_with_geometry(spec, extent, global_seed, client_id, index).map(|(v, _)| v)
}
