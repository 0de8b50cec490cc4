//! The network: backbone, discriminative head, VAE branch on the descriptor,
//! and a generative head that duplicates the discriminative one.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Binding, GroupSet, ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};

/// What the task heads predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    /// Scene-level multi-label probabilities, one sigmoid output per class.
    MultiLabel { classes: usize },
    /// Per-pixel class logits on a `height x width` grid.
    Pixel {
        height: usize,
        width: usize,
        classes: usize,
    },
}

impl TaskSpec {
    pub fn classes(&self) -> usize {
        match *self {
            TaskSpec::MultiLabel { classes } | TaskSpec::Pixel { classes, .. } => classes,
        }
    }

    pub fn output_dim(&self) -> usize {
        match *self {
            TaskSpec::MultiLabel { classes } => classes,
            TaskSpec::Pixel {
                height,
                width,
                classes,
            } => height * width * classes,
        }
    }

    fn head_activation(&self) -> Activation {
        match self {
            TaskSpec::MultiLabel { .. } => Activation::Sigmoid,
            TaskSpec::Pixel { .. } => Activation::Identity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Hidden widths of the backbone; the final layer emits `descriptor_dim`.
    pub backbone_hidden: Vec<usize>,
    pub descriptor_dim: usize,
    /// Hidden width of the VAE encoder.
    pub encoder_hidden: usize,
    pub latent_dim: usize,
    /// Hidden widths shared by both task heads (empty: a single dense layer).
    pub head_hidden: Vec<usize>,
    pub task: TaskSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            backbone_hidden: vec![64],
            descriptor_dim: 64,
            encoder_hidden: 64,
            latent_dim: 128,
            head_hidden: vec![],
            task: TaskSpec::MultiLabel { classes: 8 },
        }
    }
}

impl ModelConfig {
    fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("descriptor_dim", self.descriptor_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("latent_dim", self.latent_dim),
            ("classes", self.task.classes()),
            ("head output", self.task.output_dim()),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.backbone_hidden.iter().chain(&self.head_hidden).any(|&h| h == 0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// Fully connected layer `y = act(x W + b)` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl Dense {
    fn new(
        store: &mut ParamStore,
        group: ParamGroup,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        // Glorot-uniform weights, zero bias.
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("finite bounds");
        let w: Vec<f64> = (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect();
        let weight = store.add(
            format!("{name}.weight"),
            group,
            Tensor::matrix(in_dim, out_dim, w).expect("dims are positive"),
        );
        let bias = store.add(
            format!("{name}.bias"),
            group,
            Tensor::zeros(vec![out_dim]).expect("dims are positive"),
        );
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
            activation,
        }
    }

    fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        let h = tape.matmul(x, bind.var(self.weight))?;
        let h = tape.add(h, bind.var(self.bias))?;
        Ok(self.activation.apply(tape, h))
    }
}

/// A sequence of dense layers whose parameters all belong to one group.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    pub group: ParamGroup,
    pub layers: Vec<Dense>,
}

impl LayerStack {
    fn new(
        store: &mut ParamStore,
        group: ParamGroup,
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                let name = format!("{}.{i}", group.name());
                Dense::new(store, group, &name, widths[i], widths[i + 1], act, rng)
            })
            .collect();
        Self { group, layers }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(tape, bind, x)?;
        }
        Ok(x)
    }

    /// `(out_dim, activation)` per layer; input widths are excluded so that
    /// stacks fed by different upstream widths can be compared.
    pub fn architecture(&self) -> Vec<(usize, Activation)> {
        self.layers.iter().map(|l| (l.out_dim, l.activation)).collect()
    }
}

/// Recorded outputs of one forward pass over a batch.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub descriptor: Var,
    pub disc_prediction: Var,
    pub mu: Var,
    pub log_var: Var,
    pub latent: Var,
    pub reconstruction: Var,
    pub gen_prediction: Var,
}

/// Plain-value outputs of one forward pass, each `[B, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutputs {
    pub descriptor: Tensor,
    pub disc_prediction: Tensor,
    pub mu: Tensor,
    pub log_var: Tensor,
    pub latent: Tensor,
    pub reconstruction: Tensor,
    pub gen_prediction: Tensor,
}

/// `z = mu + exp(log_var / 2) * eps`, with `eps` recorded as data.
pub fn reparameterize(tape: &mut Tape, mu: Var, log_var: Var, eps: Var) -> Result<Var> {
    let half = tape.scale(log_var, 0.5);
    let sigma = tape.exp(half);
    let noise = tape.mul(sigma, eps)?;
    tape.add(mu, noise)
}

/// Value-level counterpart of [`reparameterize`].
pub fn reparameterize_values(mu: &[f64], log_var: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != log_var.len() || mu.len() != eps.len() {
        return Err(Error::Shape {
            op: "reparameterize",
            lhs: vec![mu.len(), log_var.len()],
            rhs: vec![eps.len()],
        });
    }
    Ok(mu
        .iter()
        .zip(log_var)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// Standard-normal draws of shape `[batch, latent_dim]`.
pub fn sample_eps(rng: &mut impl Rng, batch: usize, latent_dim: usize) -> Tensor {
    let v = (0..batch * latent_dim)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::matrix(batch, latent_dim, v).expect("batch and latent_dim are positive")
}

/// Trainable parameter totals per group and per training mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub per_group: BTreeMap<String, usize>,
    /// θ ∪ γ
    pub disc_only: usize,
    /// θ ∪ β
    pub gen_only: usize,
    /// θ ∪ γ ∪ β
    pub hybrid: usize,
    pub beta: usize,
    /// Share of the hybrid total held by the backbone, in percent.
    pub backbone_share_percent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridModel {
    config: ModelConfig,
    store: ParamStore,
    pub backbone: LayerStack,
    pub disc_head: LayerStack,
    pub vae_encoder: LayerStack,
    pub feature_decoder: LayerStack,
    pub gen_head: LayerStack,
}

impl GridModel {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let out = config.task.output_dim();
        let head_act = config.task.head_activation();

        let mut widths = vec![config.input_dim];
        widths.extend(&config.backbone_hidden);
        widths.push(config.descriptor_dim);
        // The trailing ReLU keeps descriptors non-negative for the χ² distance.
        let backbone = LayerStack::new(
            &mut store,
            ParamGroup::Backbone,
            &widths,
            Activation::Relu,
            Activation::Relu,
            rng,
        );

        let head_widths = |input: usize| {
            let mut w = vec![input];
            w.extend(&config.head_hidden);
            w.push(out);
            w
        };
        let disc_head = LayerStack::new(
            &mut store,
            ParamGroup::DiscHead,
            &head_widths(config.descriptor_dim),
            Activation::Relu,
            head_act,
            rng,
        );
        let vae_encoder = LayerStack::new(
            &mut store,
            ParamGroup::VaeEncoder,
            &[config.descriptor_dim, config.encoder_hidden, 2 * config.latent_dim],
            Activation::Relu,
            Activation::Identity,
            rng,
        );
        let feature_decoder = LayerStack::new(
            &mut store,
            ParamGroup::FeatureDecoder,
            &[config.latent_dim, config.descriptor_dim],
            Activation::Identity,
            Activation::Identity,
            rng,
        );
        let gen_head = LayerStack::new(
            &mut store,
            ParamGroup::GenHead,
            &head_widths(config.latent_dim),
            Activation::Relu,
            head_act,
            rng,
        );
        Ok(Self {
            config,
            store,
            backbone,
            disc_head,
            vae_encoder,
            feature_decoder,
            gen_head,
        })
    }

    /// [`GridModel::new`] with a ChaCha8 generator seeded from `seed`.
    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::new(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn check_input(&self, tape: &Tape, inputs: Var) -> Result<usize> {
        match tape.shape(inputs) {
            [b, d] if *d == self.config.input_dim => Ok(*b),
            s => Err(Error::Shape {
                op: "model input",
                lhs: s.to_vec(),
                rhs: vec![0, self.config.input_dim],
            }),
        }
    }

    /// Records the full forward pass. `eps` is `[B, latent_dim]`.
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, inputs: Var, eps: Var) -> Result<ForwardVars> {
        let b = self.check_input(tape, inputs)?;
        let j = self.config.latent_dim;
        if tape.shape(eps) != [b, j] {
            return Err(Error::Shape {
                op: "reparameterize noise",
                lhs: tape.shape(eps).to_vec(),
                rhs: vec![b, j],
            });
        }
        let descriptor = self.backbone.forward(tape, bind, inputs)?;
        let disc_prediction = self.disc_head.forward(tape, bind, descriptor)?;
        let stats = self.vae_encoder.forward(tape, bind, descriptor)?;
        let mu = tape.slice(stats, 1, 0, j)?;
        let log_var = tape.slice(stats, 1, j, j)?;
        let latent = reparameterize(tape, mu, log_var, eps)?;
        let reconstruction = self.feature_decoder.forward(tape, bind, latent)?;
        let gen_prediction = self.gen_head.forward(tape, bind, latent)?;
        Ok(ForwardVars {
            descriptor,
            disc_prediction,
            mu,
            log_var,
            latent,
            reconstruction,
            gen_prediction,
        })
    }

    pub fn forward_values(&self, inputs: &Tensor, eps: &Tensor) -> Result<ForwardOutputs> {
        let mut tape = Tape::new();
        let bind = tape.bind(&self.store);
        let x = tape.constant(inputs);
        let e = tape.constant(eps);
        let f = self.forward(&mut tape, &bind, x, e)?;
        Ok(ForwardOutputs {
            descriptor: tape.tensor(f.descriptor),
            disc_prediction: tape.tensor(f.disc_prediction),
            mu: tape.tensor(f.mu),
            log_var: tape.tensor(f.log_var),
            latent: tape.tensor(f.latent),
            reconstruction: tape.tensor(f.reconstruction),
            gen_prediction: tape.tensor(f.gen_prediction),
        })
    }

    /// Backbone descriptors only, `[B, descriptor_dim]`.
    pub fn descriptors(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = tape.bind(&self.store);
        let x = tape.constant(inputs);
        self.check_input(&tape, x)?;
        let f = self.backbone.forward(&mut tape, &bind, x)?;
        Ok(tape.tensor(f))
    }

    pub fn count_parameters(&self) -> ParameterCounts {
        let per_group = ParamGroup::ALL
            .iter()
            .map(|g| (g.name().to_string(), self.store.count((*g).into())))
            .collect();
        let theta = self.store.count(GroupSet::THETA);
        let gamma = self.store.count(GroupSet::GAMMA);
        let beta = self.store.count(GroupSet::BETA);
        let hybrid = theta + gamma + beta;
        ParameterCounts {
            per_group,
            disc_only: theta + gamma,
            gen_only: theta + beta,
            hybrid,
            beta,
            backbone_share_percent: 100.0 * theta as f64 / hybrid as f64,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        crate::io::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_checkpoint(&mut bytes.as_slice())
    }

    /// Binary checkpoint, little-endian:
    /// `"GRIDCKPT"`, `u32` version, `u32` length + model config as JSON,
    /// `u32` parameter count, then per parameter: `u16` name length + name,
    /// `u8` group index, `u8` rank, `u32` per dimension, `f64` values.
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let cfg = serde_json::to_vec(&self.config)?;
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(&cfg)?;
        w.write_all(&(self.store.len() as u32).to_le_bytes())?;
        for (_, p) in self.store.iter() {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[p.group as u8, p.tensor.shape().len() as u8])?;
            for &d in p.tensor.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in p.tensor.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self> {
        let bad = |m: &str| Error::format("checkpoint", m);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut cfg = vec![0u8; read_u32(r)? as usize];
        r.read_exact(&mut cfg)?;
        let config: ModelConfig = serde_json::from_slice(&cfg)?;
        // Topology comes from the config; the RNG only fills values that are overwritten.
        let mut model = Self::seeded(config, 0)?;
        let count = read_u32(r)? as usize;
        if count != model.store.len() {
            return Err(bad(&format!(
                "expected {} parameters, found {count}",
                model.store.len()
            )));
        }
        for (_, p) in model.store.iter_mut() {
            let mut len = [0u8; 2];
            r.read_exact(&mut len)?;
            let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut name)?;
            let mut gr = [0u8; 2];
            r.read_exact(&mut gr)?;
            let group = *ParamGroup::ALL
                .get(gr[0] as usize)
                .ok_or_else(|| bad("unknown group"))?;
            let shape = (0..gr[1])
                .map(|_| read_u32(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if name != p.name.as_bytes() || group != p.group || shape != p.tensor.shape() {
                return Err(bad(&format!("parameter `{}` does not match the model", p.name)));
            }
            for v in p.tensor.values_mut() {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
        }
        Ok(model)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"GRIDCKPT";
const CHECKPOINT_VERSION: u32 = 1;

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
