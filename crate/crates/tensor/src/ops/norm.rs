use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tape::{Backward, GradSink, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

/// Non-trainable running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormOptions {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormOptions {
    fn default() -> Self {
        BatchNormOptions {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Per-channel layout of `[N, C, ...]`: `N * C` contiguous runs of `inner`.
#[derive(Clone, Copy)]
struct ChannelLayout {
    batch: usize,
    channels: usize,
    inner: usize,
}

impl ChannelLayout {
    fn run(&self, n: usize, c: usize) -> std::ops::Range<usize> {
        let start = (n * self.channels + c) * self.inner;
        start..start + self.inner
    }

    fn count(&self) -> usize {
        self.batch * self.inner
    }
}

struct BatchNormOp {
    x: Option<usize>,
    gamma: Option<usize>,
    beta: Option<usize>,
    xhat: Rc<Vec<f64>>,
    inv_std: Vec<f64>,
    gamma_v: Rc<Tensor>,
    layout: ChannelLayout,
    mode: Mode,
}

impl Backward for BatchNormOp {
    fn backward(&self, grad: &[f64], sink: &mut GradSink<'_>) {
        let l = self.layout;
        let m = l.count() as f64;
        let mut sum_g = vec![0.0; l.channels];
        let mut sum_gx = vec![0.0; l.channels];
        for c in 0..l.channels {
            for n in 0..l.batch {
                for i in l.run(n, c) {
                    sum_g[c] += grad[i];
                    sum_gx[c] += grad[i] * self.xhat[i];
                }
            }
        }
        if self.x.is_some() {
            let mut gx = vec![0.0; grad.len()];
            for c in 0..l.channels {
                let scale = self.gamma_v.data()[c] * self.inv_std[c];
                for n in 0..l.batch {
                    for i in l.run(n, c) {
                        gx[i] = match self.mode {
                            Mode::Train => {
                                scale / m * (m * grad[i] - sum_g[c] - self.xhat[i] * sum_gx[c])
                            }
                            Mode::Eval => scale * grad[i],
                        };
                    }
                }
            }
            sink.accumulate(self.x, gx);
        }
        sink.accumulate(self.gamma, sum_gx);
        sink.accumulate(self.beta, sum_g);
    }
}

struct LayerNormOp {
    x: Option<usize>,
    gamma: Option<usize>,
    beta: Option<usize>,
    xhat: Rc<Vec<f64>>,
    inv_std: Vec<f64>,
    gamma_v: Rc<Tensor>,
    features: usize,
}

impl Backward for LayerNormOp {
    fn backward(&self, grad: &[f64], sink: &mut GradSink<'_>) {
        let f = self.features;
        let gamma = self.gamma_v.data();
        let mut g_gamma = vec![0.0; f];
        let mut g_beta = vec![0.0; f];
        let mut gx = vec![0.0; grad.len()];
        for (row, (g_row, xh_row)) in grad.chunks(f).zip(self.xhat.chunks(f)).enumerate() {
            let mut sum_d = 0.0;
            let mut sum_dx = 0.0;
            for j in 0..f {
                g_gamma[j] += g_row[j] * xh_row[j];
                g_beta[j] += g_row[j];
                let d = g_row[j] * gamma[j];
                sum_d += d;
                sum_dx += d * xh_row[j];
            }
            let inv = self.inv_std[row];
            let out = &mut gx[row * f..(row + 1) * f];
            for j in 0..f {
                let d = g_row[j] * gamma[j];
                out[j] = inv / f as f64 * (f as f64 * d - sum_d - xh_row[j] * sum_dx);
            }
        }
        sink.accumulate(self.x, gx);
        sink.accumulate(self.gamma, g_gamma);
        sink.accumulate(self.beta, g_beta);
    }
}

impl Tape {
    /// Batch normalisation over every axis but the channel axis of `[N, C, ...]`.
    ///
    /// In train mode the batch statistics normalise the input and are folded
    /// into `stats` as `run <- (1 - momentum) * run + momentum * batch`; the
    /// running variance receives the unbiased batch variance. Eval mode reads
    /// `stats` only.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        stats: &mut RunningStats,
        mode: Mode,
        options: BatchNormOptions,
    ) -> Result<Var> {
        let s = x.shape();
        if s.len() < 2 {
            return Err(TensorError::invalid(
                "batch_norm",
                format!("expected [N, C, ...], got {s:?}"),
            ));
        }
        let layout = ChannelLayout {
            batch: s[0],
            channels: s[1],
            inner: s[2..].iter().product(),
        };
        let channel_shape = [layout.channels];
        for (name, t) in [
            ("gamma", gamma.value()),
            ("beta", beta.value()),
            ("running mean", &stats.mean),
            ("running var", &stats.var),
        ] {
            if t.shape() != channel_shape {
                return Err(TensorError::invalid(
                    "batch_norm",
                    format!("{name} has shape {:?}, expected {channel_shape:?}", t.shape()),
                ));
            }
        }
        let count = layout.count();
        if mode == Mode::Train && count < 2 {
            return Err(TensorError::invalid(
                "batch_norm",
                format!("train mode needs at least 2 values per channel, got {count}"),
            ));
        }

        let data = x.data();
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; layout.channels];
                let mut var = vec![0.0; layout.channels];
                for c in 0..layout.channels {
                    let mut total = 0.0;
                    for n in 0..layout.batch {
                        total += data[layout.run(n, c)].iter().sum::<f64>();
                    }
                    mean[c] = total / count as f64;
                    let mut sq = 0.0;
                    for n in 0..layout.batch {
                        sq += data[layout.run(n, c)]
                            .iter()
                            .map(|v| (v - mean[c]).powi(2))
                            .sum::<f64>();
                    }
                    var[c] = sq / count as f64;
                }
                let m = options.momentum;
                let unbiased = count as f64 / (count as f64 - 1.0);
                for c in 0..layout.channels {
                    let rm = &mut stats.mean.data_mut()[c];
                    *rm = (1.0 - m) * *rm + m * mean[c];
                    let rv = &mut stats.var.data_mut()[c];
                    *rv = (1.0 - m) * *rv + m * var[c] * unbiased;
                }
                (mean, var)
            }
            Mode::Eval => (stats.mean.data().to_vec(), stats.var.data().to_vec()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + options.eps).sqrt()).collect();

        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for c in 0..layout.channels {
            let (g, b) = (gamma.data()[c], beta.data()[c]);
            for n in 0..layout.batch {
                for i in layout.run(n, c) {
                    xhat[i] = (data[i] - mean[c]) * inv_std[c];
                    out[i] = g * xhat[i] + b;
                }
            }
        }
        let [px, pg, pb] = self.parents([x, gamma, beta])?;
        let any = px.is_some() || pg.is_some() || pb.is_some();
        Ok(self.push(Tensor::from_parts(s.to_vec(), out), any, || BatchNormOp {
            x: px,
            gamma: pg,
            beta: pb,
            xhat: Rc::new(xhat),
            inv_std,
            gamma_v: gamma.value_rc(),
            layout,
            mode,
        }))
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let s = x.shape();
        let f = *s
            .last()
            .ok_or_else(|| TensorError::invalid("layer_norm", "scalar input"))?;
        if gamma.shape() != [f] || beta.shape() != [f] {
            return Err(TensorError::mismatch("layer_norm", s, gamma.shape()));
        }
        let data = x.data();
        let rows = data.len() / f;
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for (row, chunk) in data.chunks(f).enumerate() {
            let mean = chunk.iter().sum::<f64>() / f as f64;
            let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..f {
                let i = row * f + j;
                xhat[i] = (chunk[j] - mean) * inv;
                out[i] = gamma.data()[j] * xhat[i] + beta.data()[j];
            }
        }
        let [px, pg, pb] = self.parents([x, gamma, beta])?;
        let any = px.is_some() || pg.is_some() || pb.is_some();
        Ok(self.push(Tensor::from_parts(s.to_vec(), out), any, || LayerNormOp {
            x: px,
            gamma: pg,
            beta: pb,
            xhat: Rc::new(xhat),
            inv_std,
            gamma_v: gamma.value_rc(),
            features: f,
        }))
    }
}
