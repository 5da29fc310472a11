use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use twinseg_tensor::{BatchNormOptions, Gradients, Mode, ParameterStore, RunningStats, Tape, Tensor, Var};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::seed::{name_hash, rng_for};

const LAYER_NORM_EPS: f64 = 1e-5;
const POS_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// Uniform in ±sqrt(6 / fan_in).
    HeUniform { fan_in: usize },
    Zeros,
    Ones,
    Positional,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EntryKind {
    Trainable,
    Buffer,
}

/// One named tensor of the network, as declared before initialisation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: EntryKind,
    init: Init,
}

#[derive(Default)]
struct Inventory(Vec<LayerEntry>);

impl Inventory {
    fn trainable(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.0.push(LayerEntry {
            name,
            shape,
            kind: EntryKind::Trainable,
            init,
        });
    }

    fn buffer(&mut self, name: String, channels: usize, init: Init) {
        self.0.push(LayerEntry {
            name,
            shape: vec![channels],
            kind: EntryKind::Buffer,
            init,
        });
    }

    fn conv(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize) {
        self.trainable(
            format!("{prefix}.weight"),
            vec![c_out, c_in, k, k, k],
            Init::HeUniform {
                fan_in: c_in * k * k * k,
            },
        );
        self.trainable(format!("{prefix}.bias"), vec![c_out], Init::Zeros);
    }

    fn conv_transpose(&mut self, prefix: &str, c_in: usize, c_out: usize) {
        self.trainable(
            format!("{prefix}.weight"),
            vec![c_in, c_out, 2, 2, 2],
            Init::HeUniform { fan_in: c_in },
        );
        self.trainable(format!("{prefix}.bias"), vec![c_out], Init::Zeros);
    }

    fn batch_norm(&mut self, prefix: &str, c: usize) {
        self.trainable(format!("{prefix}.gamma"), vec![c], Init::Ones);
        self.trainable(format!("{prefix}.beta"), vec![c], Init::Zeros);
        self.buffer(format!("{prefix}.running_mean"), c, Init::Zeros);
        self.buffer(format!("{prefix}.running_var"), c, Init::Ones);
    }

    fn layer_norm(&mut self, prefix: &str, f: usize) {
        self.trainable(format!("{prefix}.gamma"), vec![f], Init::Ones);
        self.trainable(format!("{prefix}.beta"), vec![f], Init::Zeros);
    }

    fn linear(&mut self, prefix: &str, f_in: usize, f_out: usize) {
        self.trainable(
            format!("{prefix}.weight"),
            vec![f_out, f_in],
            Init::HeUniform { fan_in: f_in },
        );
        self.trainable(format!("{prefix}.bias"), vec![f_out], Init::Zeros);
    }

    fn double_conv(&mut self, prefix: &str, c_in: usize, c_out: usize) {
        self.conv(&format!("{prefix}.conv1"), c_in, c_out, 3);
        self.batch_norm(&format!("{prefix}.bn1"), c_out);
        self.conv(&format!("{prefix}.conv2"), c_out, c_out, 3);
        self.batch_norm(&format!("{prefix}.bn2"), c_out);
    }
}

/// The hybrid convolutional encoder, transformer bottleneck and decoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TwinSegNet {
    config: ModelConfig,
}

/// Result of one forward pass.
pub struct ForwardPass {
    pub logits: Var,
    /// Batch-norm running statistics after a train-mode pass; empty in eval mode.
    pub buffers: Vec<(String, Tensor)>,
    /// Attention probabilities per transformer layer, `[N * heads, T, T]`.
    pub attention: Vec<Tensor>,
}

impl TwinSegNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(TwinSegNet { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Every tensor of the network with its shape, in declaration order.
    pub fn layer_inventory(&self) -> Vec<LayerEntry> {
        let c = &self.config;
        let mut inv = Inventory::default();
        let mut c_in = c.in_modalities;
        for level in 0..c.encoder_levels {
            let c_out = c.channels_at(level);
            inv.double_conv(&format!("enc{level}"), c_in, c_out);
            c_in = c_out;
        }

        let v = &c.vit;
        let (e, p, hidden) = (v.embed_dim, c.patch_dim(), v.embed_dim * v.mlp_ratio);
        inv.linear("vit.embed", p, e);
        inv.trainable("vit.pos".into(), vec![c.tokens(), e], Init::Positional);
        for layer in 0..v.layers {
            let b = format!("vit.block{layer}");
            inv.layer_norm(&format!("{b}.ln1"), e);
            for proj in ["q", "k", "v", "o"] {
                inv.linear(&format!("{b}.attn.{proj}"), e, e);
            }
            inv.layer_norm(&format!("{b}.ln2"), e);
            inv.linear(&format!("{b}.mlp.fc1"), e, hidden);
            inv.linear(&format!("{b}.mlp.fc2"), hidden, e);
        }
        inv.linear("vit.proj", e, p);

        for level in (0..c.encoder_levels).rev() {
            let skip = c.channels_at(level);
            inv.conv_transpose(&format!("dec{level}.up"), c_in, skip);
            inv.double_conv(&format!("dec{level}"), 2 * skip, skip);
            c_in = skip;
        }
        inv.conv("head", c_in, c.num_classes, 1);
        inv.0
    }

    pub fn trainable_count(&self) -> usize {
        self.layer_inventory()
            .iter()
            .filter(|e| e.kind == EntryKind::Trainable)
            .map(|e| e.shape.iter().product::<usize>())
            .sum()
    }

    /// Deterministic initial parameters. Each entry draws from its own
    /// stream derived from `seed` and its name.
    pub fn init(&self, seed: u64) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        for entry in self.layer_inventory() {
            let mut rng = rng_for(&[seed, name_hash(&entry.name)]);
            let value = match entry.init {
                Init::HeUniform { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(&entry.shape, |_| rng.random_range(-bound..bound))
                }
                Init::Zeros => Tensor::zeros(&entry.shape),
                Init::Ones => Tensor::ones(&entry.shape),
                Init::Positional => {
                    let normal = Normal::new(0.0, POS_STD).expect("valid std");
                    Tensor::from_fn(&entry.shape, |_| normal.sample(&mut rng))
                }
            };
            match entry.kind {
                EntryKind::Trainable => store.insert_trainable(&entry.name, value)?,
                EntryKind::Buffer => store.insert_buffer(&entry.name, value)?,
            }
        }
        Ok(store)
    }

    /// Registers every trainable entry of `store` as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape, store: &ParameterStore) -> BTreeMap<String, Var> {
        store
            .trainable()
            .map(|(name, p)| (name.to_string(), tape.leaf(p.value.clone())))
            .collect()
    }

    /// Copies the gradients of bound leaves into `store`.
    pub fn store_grads(
        &self,
        grads: &Gradients,
        params: &BTreeMap<String, Var>,
        store: &mut ParameterStore,
    ) -> Result<()> {
        for (name, var) in params {
            let grad = grads.get(var).ok_or_else(|| {
                Error::Training(format!("no gradient recorded for `{name}`"))
            })?;
            store.set_grad(name, grad.clone())?;
        }
        Ok(())
    }

    /// Full network: `x` is `[N, modalities, S, S, S]`, output `[N, classes, S, S, S]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &BTreeMap<String, Var>,
        buffers: &ParameterStore,
        x: &Var,
        mode: Mode,
    ) -> Result<ForwardPass> {
        let c = &self.config;
        let s = c.input_extent;
        let shape = x.shape();
        if shape.len() != 5 || shape[1] != c.in_modalities {
            return Err(Error::ModelConfig(format!(
                "expected input [N, {}, {s}, {s}, {s}], got {shape:?}",
                c.in_modalities
            )));
        }
        if shape[2..] != [s, s, s] {
            return Err(Error::ModelConfig(format!(
                "input extent {:?} does not match input_extent {s}",
                &shape[2..]
            )));
        }
        let mut ctx = Layers {
            tape,
            params,
            buffers,
            mode,
            updated: Vec::new(),
            attention: Vec::new(),
        };
        let mut h = x.clone();
        let mut skips = Vec::with_capacity(c.encoder_levels);
        for level in 0..c.encoder_levels {
            let (pooled, skip) = ctx.encoder_block(&h, level)?;
            skips.push(skip);
            h = pooled;
        }
        h = ctx.vit_bottleneck(&h, c)?;
        for level in (0..c.encoder_levels).rev() {
            h = ctx.decoder_block(&h, &skips[level], level)?;
        }
        let logits = ctx.conv("head", &h, 0)?;
        Ok(ForwardPass {
            logits,
            buffers: ctx.updated,
            attention: ctx.attention,
        })
    }

    /// One encoder level in isolation, returning `(pooled, skip)`.
    pub fn encoder_block(
        &self,
        tape: &mut Tape,
        params: &BTreeMap<String, Var>,
        buffers: &ParameterStore,
        x: &Var,
        level: usize,
        mode: Mode,
    ) -> Result<(Var, Var)> {
        Layers::new(tape, params, buffers, mode).encoder_block(x, level)
    }

    /// The transformer bottleneck in isolation, plus its attention maps.
    pub fn vit_bottleneck(
        &self,
        tape: &mut Tape,
        params: &BTreeMap<String, Var>,
        x: &Var,
    ) -> Result<(Var, Vec<Tensor>)> {
        let empty = ParameterStore::new();
        let mut ctx = Layers::new(tape, params, &empty, Mode::Eval);
        let y = ctx.vit_bottleneck(x, &self.config)?;
        Ok((y, ctx.attention))
    }

    pub fn decoder_block(
        &self,
        tape: &mut Tape,
        params: &BTreeMap<String, Var>,
        buffers: &ParameterStore,
        x: &Var,
        skip: &Var,
        level: usize,
        mode: Mode,
    ) -> Result<Var> {
        Layers::new(tape, params, buffers, mode).decoder_block(x, skip, level)
    }
}

struct Layers<'a> {
    tape: &'a mut Tape,
    params: &'a BTreeMap<String, Var>,
    buffers: &'a ParameterStore,
    mode: Mode,
    updated: Vec<(String, Tensor)>,
    attention: Vec<Tensor>,
}

impl<'a> Layers<'a> {
    fn new(
        tape: &'a mut Tape,
        params: &'a BTreeMap<String, Var>,
        buffers: &'a ParameterStore,
        mode: Mode,
    ) -> Self {
        Layers {
            tape,
            params,
            buffers,
            mode,
            updated: Vec::new(),
            attention: Vec::new(),
        }
    }

    fn param(&self, name: &str) -> Result<&'a Var> {
        self.params
            .get(name)
            .ok_or_else(|| Error::ModelConfig(format!("missing parameter `{name}`")))
    }

    fn conv(&mut self, prefix: &str, x: &Var, padding: usize) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        Ok(self.tape.conv3d(x, w, Some(b), 1, padding)?)
    }

    fn linear(&mut self, prefix: &str, x: &Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        Ok(self.tape.linear(x, w, Some(b))?)
    }

    fn layer_norm(&mut self, prefix: &str, x: &Var) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gamma"))?;
        let b = self.param(&format!("{prefix}.beta"))?;
        Ok(self.tape.layer_norm(x, g, b, LAYER_NORM_EPS)?)
    }

    fn batch_norm(&mut self, prefix: &str, x: &Var) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gamma"))?;
        let b = self.param(&format!("{prefix}.beta"))?;
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        let mut stats = RunningStats {
            mean: self.buffers.get(&mean_name)?.clone(),
            var: self.buffers.get(&var_name)?.clone(),
        };
        let y = self
            .tape
            .batch_norm(x, g, b, &mut stats, self.mode, BatchNormOptions::default())?;
        if self.mode == Mode::Train {
            self.updated.push((mean_name, stats.mean));
            self.updated.push((var_name, stats.var));
        }
        Ok(y)
    }

    fn conv_bn_relu(&mut self, prefix: &str, stage: usize, x: &Var) -> Result<Var> {
        let h = self.conv(&format!("{prefix}.conv{stage}"), x, 1)?;
        let h = self.batch_norm(&format!("{prefix}.bn{stage}"), &h)?;
        Ok(self.tape.relu(&h)?)
    }

    fn encoder_block(&mut self, x: &Var, level: usize) -> Result<(Var, Var)> {
        let prefix = format!("enc{level}");
        let h = self.conv_bn_relu(&prefix, 1, x)?;
        let skip = self.conv_bn_relu(&prefix, 2, &h)?;
        let (pooled, _) = self.tape.maxpool3d(&skip)?;
        Ok((pooled, skip))
    }

    fn decoder_block(&mut self, x: &Var, skip: &Var, level: usize) -> Result<Var> {
        let prefix = format!("dec{level}");
        let w = self.param(&format!("{prefix}.up.weight"))?;
        let b = self.param(&format!("{prefix}.up.bias"))?;
        let up = self.tape.conv_transpose3d(x, w, Some(b))?;
        if up.shape() != skip.shape() {
            return Err(Error::ModelConfig(format!(
                "{prefix}: upsampled shape {:?} does not match skip shape {:?}",
                up.shape(),
                skip.shape()
            )));
        }
        let h = self.tape.concat(&[&up, skip], 1)?;
        let h = self.conv_bn_relu(&prefix, 1, &h)?;
        self.conv_bn_relu(&prefix, 2, &h)
    }

    fn vit_bottleneck(&mut self, x: &Var, config: &ModelConfig) -> Result<Var> {
        let shape = x.shape().to_vec();
        let p = config.vit.patch_size;
        if shape.len() != 5 || shape[2..].iter().any(|&e| e % p != 0 || e != shape[2]) {
            return Err(Error::ModelConfig(format!(
                "bottleneck input {shape:?} is not a cube divisible by patch_size {p}"
            )));
        }
        let (n, c, g) = (shape[0], shape[1], shape[2] / p);
        let tokens = g * g * g;
        let patch_dim = c * p * p * p;

        let t = self.tape.reshape(x, &[n, c, g, p, g, p, g, p])?;
        let t = self.tape.permute(&t, &[0, 2, 4, 6, 1, 3, 5, 7])?;
        let t = self.tape.reshape(&t, &[n, tokens, patch_dim])?;
        let mut h = self.linear("vit.embed", &t)?;
        let pos = self.param("vit.pos")?;
        if pos.shape() != [tokens, config.vit.embed_dim] {
            return Err(Error::ModelConfig(format!(
                "positional embedding {:?} does not fit {tokens} tokens",
                pos.shape()
            )));
        }
        let pos = self.tape.expand(pos, n)?;
        h = self.tape.add(&h, &pos)?;
        for layer in 0..config.vit.layers {
            h = self.transformer_layer(&h, layer, config.vit.heads)?;
        }
        let h = self.linear("vit.proj", &h)?;
        let h = self.tape.reshape(&h, &[n, g, g, g, c, p, p, p])?;
        let h = self.tape.permute(&h, &[0, 4, 1, 5, 2, 6, 3, 7])?;
        Ok(self.tape.reshape(&h, &shape)?)
    }

    fn transformer_layer(&mut self, x: &Var, layer: usize, heads: usize) -> Result<Var> {
        let prefix = format!("vit.block{layer}");
        let h = self.layer_norm(&format!("{prefix}.ln1"), x)?;
        let a = self.attention(&prefix, &h, heads)?;
        let x = self.tape.add(x, &a)?;
        let h = self.layer_norm(&format!("{prefix}.ln2"), &x)?;
        let h = self.linear(&format!("{prefix}.mlp.fc1"), &h)?;
        let h = self.tape.gelu(&h)?;
        let h = self.linear(&format!("{prefix}.mlp.fc2"), &h)?;
        Ok(self.tape.add(&x, &h)?)
    }

    fn attention(&mut self, prefix: &str, x: &Var, heads: usize) -> Result<Var> {
        let (n, t, e) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let dh = e / heads;
        let split = |ctx: &mut Self, name: &str, axes: &[usize], last: [usize; 2]| -> Result<Var> {
            let y = ctx.linear(&format!("{prefix}.attn.{name}"), x)?;
            let y = ctx.tape.reshape(&y, &[n, t, heads, dh])?;
            let y = ctx.tape.permute(&y, axes)?;
            Ok(ctx.tape.reshape(&y, &[n * heads, last[0], last[1]])?)
        };
        let q = split(self, "q", &[0, 2, 1, 3], [t, dh])?;
        let k = split(self, "k", &[0, 2, 3, 1], [dh, t])?;
        let v = split(self, "v", &[0, 2, 1, 3], [t, dh])?;
        let scores = self.tape.bmm(&q, &k)?;
        let scores = self.tape.mul_scalar(&scores, 1.0 / (dh as f64).sqrt())?;
        let probs = self.tape.softmax(&scores, 2)?;
        self.attention.push(probs.value().clone());
        let out = self.tape.bmm(&probs, &v)?;
        let out = self.tape.reshape(&out, &[n, heads, t, dh])?;
        let out = self.tape.permute(&out, &[0, 2, 1, 3])?;
        let out = self.tape.reshape(&out, &[n, t, e])?;
        self.linear(&format!("{prefix}.attn.o"), &out)
    }
}
