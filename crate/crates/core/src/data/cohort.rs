use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::phantom::{generate_phantom, ClientSpec};
use super::preprocess::preprocess;
use super::volume::Volume;
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Smallest number of subjects a client may hold.
pub const MIN_CLIENT_SAMPLES: usize = 4;

/// Site names, source collections and patient counts of the nine reference hospitals.
pub const REFERENCE_SITES: [(&str, &str, usize); 9] = [
    ("Hospital1", "glioma", 1251),
    ("Hospital2", "meningioma", 1000),
    ("Hospital3", "metastatic", 165),
    ("Hospital4", "pediatric", 99),
    ("Hospital5", "secondary", 60),
    ("Hospital6", "glioma-hgg-lgg", 1251),
    ("Hospital7", "glioma", 369),
    ("Hospital8", "high-grade-glioma", 259),
    ("Hospital9", "low-grade-glioma", 76),
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clamp {
    pub client: String,
    pub requested: usize,
    pub clamped_to: usize,
}

/// `round(count * scale)`, raised to `floor` where smaller; raised entries are reported.
pub fn scaled_counts(
    sites: &[(&str, usize)],
    scale: f64,
    floor: usize,
) -> (Vec<usize>, Vec<Clamp>) {
    let mut clamps = Vec::new();
    let counts = sites
        .iter()
        .map(|&(name, count)| {
            let scaled = (count as f64 * scale).round() as usize;
            if scaled < floor {
                clamps.push(Clamp {
                    client: name.to_string(),
                    requested: scaled,
                    clamped_to: floor,
                });
                floor
            } else {
                scaled
            }
        })
        .collect();
    (counts, clamps)
}

/// Generation parameters of a whole federation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    /// Cubic extent at which phantoms are synthesised, before resizing.
    pub raw_extent: usize,
    pub clients: Vec<ClientSpec>,
}

impl CohortSpec {
    /// Nine sites sized by the reference patient counts times `scale`, with
    /// tumour mix and size varying by site. `signature_shift` controls how
    /// far apart the sites' intensity profiles are. Counts are only raised to
    /// one here; [`partition_noniid`] applies and reports the real floor.
    pub fn reference(scale: f64, raw_extent: usize, signature_shift: f64) -> (Self, Vec<Clamp>) {
        let sites: Vec<(&str, usize)> = REFERENCE_SITES.iter().map(|&(n, _, c)| (n, c)).collect();
        let (counts, clamps) = scaled_counts(&sites, scale, 1);
        let r = raw_extent as f64;
        let profiles: [([f64; 3], f64, f64); 9] = [
            ([1.0, 0.95, 0.9], 0.28, 0.06),
            ([0.85, 1.0, 0.6], 0.24, 0.05),
            ([0.9, 0.9, 0.85], 0.2, 0.07),
            ([0.8, 0.9, 0.5], 0.22, 0.08),
            ([0.9, 0.8, 0.7], 0.21, 0.07),
            ([1.0, 0.9, 0.85], 0.27, 0.06),
            ([1.0, 0.95, 0.9], 0.26, 0.05),
            ([1.0, 1.0, 0.95], 0.28, 0.06),
            ([0.95, 0.9, 0.4], 0.23, 0.07),
        ];
        let clients = REFERENCE_SITES
            .iter()
            .zip(counts)
            .zip(profiles)
            .enumerate()
            .map(|(k, ((&(name, _, _), count), (prevalence, radius, noise)))| ClientSpec {
                name: name.to_string(),
                sample_count: count,
                prevalence,
                radius: radius * r,
                signature_shift,
                noise,
                seed: 1000 + k as u64,
            })
            .collect();
        (
            CohortSpec {
                raw_extent,
                clients,
            },
            clamps,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients.is_empty() {
            return Err(Error::Data("cohort has no clients".into()));
        }
        for c in &self.clients {
            if c.sample_count == 0 {
                return Err(Error::Data(format!("client `{}` has zero samples", c.name)));
            }
            if c.prevalence.iter().any(|p| *p < 0.0) {
                return Err(Error::Data(format!("client `{}` has negative prevalence", c.name)));
            }
        }
        Ok(())
    }
}

/// A client's private data, split by subject.
#[derive(Clone, Debug)]
pub struct ClientDataset {
    pub client_id: usize,
    pub name: String,
    pub train: Vec<Volume>,
    pub val: Vec<Volume>,
    pub test: Vec<Volume>,
}

impl ClientDataset {
    /// Number of training subjects; the aggregation weight numerator.
    pub fn n_k(&self) -> usize {
        self.train.len()
    }
}

#[derive(Clone, Debug)]
pub struct Cohort {
    pub clients: Vec<ClientDataset>,
    pub clamps: Vec<Clamp>,
}

/// Sizes of (train, val, test) for `n` subjects: 15% each (at least one) held out.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let held = ((n as f64 * 0.15).floor() as usize).max(1);
    (n - 2 * held, held, held)
}

/// Generates, preprocesses and splits every client's subjects.
pub fn partition_noniid(spec: &CohortSpec, target_extent: usize, global_seed: u64) -> Result<Cohort> {
    spec.validate()?;
    let mut clamps = Vec::new();
    let mut clients = Vec::with_capacity(spec.clients.len());
    for (client_id, entry) in spec.clients.iter().enumerate() {
        let count = if entry.sample_count < MIN_CLIENT_SAMPLES {
            clamps.push(Clamp {
                client: entry.name.clone(),
                requested: entry.sample_count,
                clamped_to: MIN_CLIENT_SAMPLES,
            });
            MIN_CLIENT_SAMPLES
        } else {
            entry.sample_count
        };
        let volumes = (0..count)
            .into_par_iter()
            .map(|index| {
                let raw = generate_phantom(entry, spec.raw_extent, global_seed, client_id, index)?;
                preprocess(&raw, target_extent)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut rng_for(&[global_seed, client_id as u64, 0x5B117]));
        let (_, n_val, n_test) = split_sizes(count);
        let mut val_ids = order[..n_val].to_vec();
        let mut test_ids = order[n_val..n_val + n_test].to_vec();
        let mut train_ids = order[n_val + n_test..].to_vec();
        val_ids.sort_unstable();
        test_ids.sort_unstable();
        train_ids.sort_unstable();
        let pick = |ids: &[usize]| ids.iter().map(|&i| volumes[i].clone()).collect();
        clients.push(ClientDataset {
            client_id,
            name: entry.name.clone(),
            train: pick(&train_ids),
            val: pick(&val_ids),
            test: pick(&test_ids),
        });
    }
    Ok(Cohort { clients, clamps })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientManifest {
    pub client_id: usize,
    pub name: String,
    pub n_k: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub global_seed: u64,
    pub clients: Vec<ClientManifest>,
    pub clamps: Vec<Clamp>,
}

impl Cohort {
    pub fn manifest(&self, global_seed: u64) -> CohortManifest {
        let ids = |v: &[Volume]| v.iter().map(|x| x.subject_id.clone()).collect();
        CohortManifest {
            global_seed,
            clients: self
                .clients
                .iter()
                .map(|c| ClientManifest {
                    client_id: c.client_id,
                    name: c.name.clone(),
                    n_k: c.n_k(),
                    train: ids(&c.train),
                    val: ids(&c.val),
                    test: ids(&c.test),
                })
                .collect(),
            clamps: self.clamps.clone(),
        }
    }

    /// Aggregation weights `n_k / Σ n_k` of all clients.
    pub fn weights(&self) -> Vec<f64> {
        let total: usize = self.clients.iter().map(ClientDataset::n_k).sum();
        self.clients
            .iter()
            .map(|c| c.n_k() as f64 / total as f64)
            .collect()
    }
}
