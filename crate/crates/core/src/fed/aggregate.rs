use twinseg_tensor::{ParameterStore, Tensor};

use super::train::TrainStats;
use crate::error::{Error, Result};

/// What a client sends back to the server after local training: parameters,
/// its training-set size and loss statistics. No image data crosses this boundary.
#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub n_k: usize,
    pub params: ParameterStore,
    pub stats: TrainStats,
}

/// Dataset-size weighted mean of every entry, trainable and buffer alike.
///
/// Updates are combined in ascending client id as
/// `θ_first + Σ_k (n_k / N) (θ_k − θ_first)`, which equals `Σ_k (n_k / N) θ_k`
/// and reproduces `θ_first` bit for bit when every update agrees with it.
pub fn fedavg_aggregate(updates: &[ClientUpdate]) -> Result<ParameterStore> {
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let first = *sorted
        .first()
        .ok_or_else(|| Error::Aggregation("no client updates".into()))?;
    for pair in sorted.windows(2) {
        if pair[0].client_id == pair[1].client_id {
            return Err(Error::Aggregation(format!(
                "client {} submitted more than one update",
                pair[0].client_id
            )));
        }
    }
    let total: usize = sorted.iter().map(|u| u.n_k).sum();
    if total == 0 {
        return Err(Error::Aggregation("total sample count is zero".into()));
    }
    for u in &sorted[1..] {
        first
            .params
            .compatible_with(&u.params)
            .map_err(Error::Incompatible)?;
    }
    let weights: Vec<f64> = sorted
        .iter()
        .map(|u| u.n_k as f64 / total as f64)
        .collect();

    let mut out = first.params.map_values(|name, anchor| {
        let mut acc = vec![0.0; anchor.numel()];
        for (u, &w) in sorted.iter().zip(&weights) {
            let theta = u.params.get(name).expect("compatibility checked");
            for ((a, &t), &t0) in acc.iter_mut().zip(theta.data()).zip(anchor.data()) {
                *a += w * (t - t0);
            }
        }
        let data = acc
            .iter()
            .zip(anchor.data())
            .map(|(&a, &t0)| if a == 0.0 { t0 } else { t0 + a })
            .collect();
        Tensor::new(anchor.shape().to_vec(), data).expect("shape preserved")
    });
    out.clear_grads();
    Ok(out)
}
