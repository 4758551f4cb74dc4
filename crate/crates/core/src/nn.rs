//! Network definitions, parameter initialization, Adam, and the two-phase
//! learning-rate schedule.
//!
//! The generator is an encoder/decoder with two stride-2 convolutions, a
//! stack of residual blocks, and two fractionally-strided (stride 1/2)
//! convolutions, ending in tanh. The discriminator is a stack of 4x4
//! convolutions ending in a sigmoid scalar per image. Instance
//! normalization (epsilon 1e-5, no learnable affine) is the norm layer;
//! the generator uses ReLU, the discriminator leaky ReLU with slope 0.2.

use std::collections::BTreeMap;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorBlob, TensorError};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const INIT_STD: f64 = 0.02;

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("missing gradient for parameter {param}")]
    MissingGrad { param: String },
    #[error("unknown parameter key {key}")]
    UnknownParam { key: String },
    #[error("parameter {param}: stored shape {stored:?} does not match {expected:?}")]
    ParamShape { param: String, stored: Vec<usize>, expected: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A parameterized image-to-image mapping. `frozen` evaluates with
/// detached parameters so no gradient reaches them.
pub trait Mapping {
    fn apply(&self, x: &Tensor, frozen: bool, tape: &Tape) -> crate::tensor::Result<Tensor>;
}

/// A per-image realism score in (0,1), shape `[B]`.
pub trait Critic {
    fn score(&self, x: &Tensor, frozen: bool, tape: &Tape) -> crate::tensor::Result<Tensor>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub input_size: usize,
    pub channels: usize,
    pub base_filters: usize,
    pub n_residual_blocks: usize,
    pub profile: Profile,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.input_size.is_multiple_of(4) {
            return Err(NnError::InvalidConfig(format!(
                "generator input size {} must be divisible by 4 (two stride-2 downsamplings)",
                self.input_size
            )));
        }
        if self.channels == 0 || self.base_filters == 0 {
            return Err(NnError::InvalidConfig("channels and base_filters must be >= 1".into()));
        }
        match self.profile {
            Profile::Paper => {
                if self.input_size != 64 || self.n_residual_blocks != 6 {
                    return Err(NnError::InvalidConfig(
                        "paper profile fixes input_size=64 and n_residual_blocks=6".into(),
                    ));
                }
            }
            Profile::Desk => {
                if !matches!(self.input_size, 16 | 32) {
                    return Err(NnError::InvalidConfig(format!(
                        "desk profile allows input_size 16 or 32, got {}",
                        self.input_size
                    )));
                }
                if !(2..=6).contains(&self.n_residual_blocks) {
                    return Err(NnError::InvalidConfig(format!(
                        "desk profile allows 2..=6 residual blocks, got {}",
                        self.n_residual_blocks
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub input_size: usize,
    pub channels: usize,
    pub base_filters: usize,
    pub profile: Profile,
}

impl DiscriminatorConfig {
    /// 4x4 convolutions: input/2 per layer down to a 4x4 plane, then one
    /// valid 4x4 convolution to a scalar. 64 -> 5 layers (paper), 32 -> 4,
    /// 16 -> 3.
    pub fn n_layers(&self) -> Result<usize> {
        match self.input_size {
            64 => Ok(5),
            32 => Ok(4),
            16 => Ok(3),
            other => Err(NnError::InvalidConfig(format!(
                "discriminator input size {other} not supported (16, 32 or 64)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let layers = self.n_layers()?;
        if self.profile == Profile::Paper && layers != 5 {
            return Err(NnError::InvalidConfig(
                "paper profile requires 64x64 input (5 convolution layers)".into(),
            ));
        }
        if self.channels == 0 || self.base_filters == 0 {
            return Err(NnError::InvalidConfig("channels and base_filters must be >= 1".into()));
        }
        Ok(())
    }
}

// ── layers ─────────────────────────────────────────────────────────────

#[derive(Debug)]
struct ConvLayer {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
    /// Upsamples by 2 (zero insertion) before the convolution.
    fractional: bool,
}

impl ConvLayer {
    fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
        fractional: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("valid stddev");
        let w: Vec<f64> = (0..out_ch * in_ch * k * k).map(|_| normal.sample(rng)).collect();
        ConvLayer {
            weight: Tensor::param(w, &[out_ch, in_ch, k, k]).expect("finite init"),
            bias: Tensor::param(vec![0.0; out_ch], &[out_ch]).expect("finite init"),
            stride,
            padding,
            fractional,
        }
    }

    fn forward(&self, x: &Tensor, frozen: bool, tape: &Tape) -> crate::tensor::Result<Tensor> {
        let (w, b) = if frozen {
            (self.weight.detach(), self.bias.detach())
        } else {
            (self.weight.clone(), self.bias.clone())
        };
        if self.fractional {
            x.frac_conv2d(&w, Some(&b), self.padding, tape)
        } else {
            x.conv2d(&w, Some(&b), self.stride, self.padding, tape)
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}/weight"), &self.weight));
        out.push((format!("{prefix}/bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}/weight"), &mut self.weight));
        out.push((format!("{prefix}/bias"), &mut self.bias));
    }
}

#[derive(Debug)]
struct ResBlock {
    c0: ConvLayer,
    c1: ConvLayer,
}

impl ResBlock {
    fn forward(&self, x: &Tensor, frozen: bool, tape: &Tape) -> crate::tensor::Result<Tensor> {
        let y = self.c0.forward(x, frozen, tape)?;
        let y = y.instance_norm(INSTANCE_NORM_EPS, tape)?.relu(tape)?;
        let y = self.c1.forward(&y, frozen, tape)?;
        let y = y.instance_norm(INSTANCE_NORM_EPS, tape)?;
        x.add(&y, tape)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    DownConv,
    ResBlock,
    UpConv,
}

/// Shape-preserving image mapping: two stride-2 encoders, residual blocks,
/// two stride-1/2 decoders, tanh output in [-1, 1].
#[derive(Debug)]
pub struct Generator {
    pub input_size: usize,
    pub channels: usize,
    pub base_filters: usize,
    down0: ConvLayer,
    down1: ConvLayer,
    res: Vec<ResBlock>,
    up0: ConvLayer,
    up1: ConvLayer,
}

pub fn build_generator(cfg: &GeneratorConfig, seed: u64) -> Result<Generator> {
    cfg.validate()?;
    Generator::with_layout(cfg.input_size, cfg.channels, cfg.base_filters, cfg.n_residual_blocks, seed)
}

impl Generator {
    /// Construct directly from layout numbers (test configurations may be
    /// smaller than any profile allows). Input size must be divisible by 4.
    pub fn with_layout(
        input_size: usize,
        channels: usize,
        base_filters: usize,
        n_res: usize,
        seed: u64,
    ) -> Result<Generator> {
        if !input_size.is_multiple_of(4) {
            return Err(NnError::InvalidConfig(format!(
                "generator input size {input_size} must be divisible by 4"
            )));
        }
        let f = base_filters;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Generator {
            input_size,
            channels,
            base_filters: f,
            down0: ConvLayer::new(channels, f, 3, 2, 1, false, &mut rng),
            down1: ConvLayer::new(f, 2 * f, 3, 2, 1, false, &mut rng),
            res: (0..n_res)
                .map(|_| ResBlock {
                    c0: ConvLayer::new(2 * f, 2 * f, 3, 1, 1, false, &mut rng),
                    c1: ConvLayer::new(2 * f, 2 * f, 3, 1, 1, false, &mut rng),
                })
                .collect(),
            up0: ConvLayer::new(2 * f, f, 3, 1, 1, true, &mut rng),
            up1: ConvLayer::new(f, channels, 3, 1, 1, true, &mut rng),
        })
    }

    pub fn layer_spec(&self) -> Vec<LayerKind> {
        let mut spec = vec![LayerKind::DownConv, LayerKind::DownConv];
        spec.extend(std::iter::repeat_n(LayerKind::ResBlock, self.res.len()));
        spec.push(LayerKind::UpConv);
        spec.push(LayerKind::UpConv);
        spec
    }

    pub fn n_residual_blocks(&self) -> usize {
        self.res.len()
    }

    pub fn forward(&self, x: &Tensor, frozen: bool, tape: &Tape) -> crate::tensor::Result<Tensor> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.channels || !shape[2].is_multiple_of(4) || !shape[3].is_multiple_of(4) {
            return Err(TensorError::Invalid {
                op: "generator",
                msg: format!(
                    "expected [B,{},H,W] with H,W divisible by 4, got {:?}",
                    self.channels, shape
                ),
            });
        }
        let mut h = self.down0.forward(x, frozen, tape)?;
        h = h.instance_norm(INSTANCE_NORM_EPS, tape)?.relu(tape)?;
        h = self.down1.forward(&h, frozen, tape)?;
        h = h.instance_norm(INSTANCE_NORM_EPS, tape)?.relu(tape)?;
        for block in &self.res {
            h = block.forward(&h, frozen, tape)?;
        }
        h = self.up0.forward(&h, frozen, tape)?;
        h = h.instance_norm(INSTANCE_NORM_EPS, tape)?.relu(tape)?;
        h = self.up1.forward(&h, frozen, tape)?;
        h.tanh(tape)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.down0.visit("down0", &mut out);
        self.down1.visit("down1", &mut out);
        for (i, b) in self.res.iter().enumerate() {
            b.c0.visit(&format!("res{i}/c0"), &mut out);
            b.c1.visit(&format!("res{i}/c1"), &mut out);
        }
        self.up0.visit("up0", &mut out);
        self.up1.visit("up1", &mut out);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.down0.visit_mut("down0", &mut out);
        self.down1.visit_mut("down1", &mut out);
        for (i, b) in self.res.iter_mut().enumerate() {
            b.c0.visit_mut(&format!("res{i}/c0"), &mut out);
            b.c1.visit_mut(&format!("res{i}/c1"), &mut out);
        }
        self.up0.visit_mut("up0", &mut out);
        self.up1.visit_mut("up1", &mut out);
        out
    }
}

impl Mapping for Generator {
    fn apply(&self, x: &Tensor, frozen: bool, tape: &Tape) -> crate::tensor::Result<Tensor> {
        self.forward(x, frozen, tape)
    }
}

/// Per-image realism critic: 4x4 convolution stack ending in sigmoid.
#[derive(Debug)]
pub struct Discriminator {
    pub input_size: usize,
    pub channels: usize,
    convs: Vec<ConvLayer>,
}

pub fn build_discriminator(cfg: &DiscriminatorConfig, seed: u64) -> Result<Discriminator> {
    cfg.validate()?;
    let n_layers = cfg.n_layers()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut convs = Vec::with_capacity(n_layers);
    let mut ch = cfg.channels;
    let mut filters = cfg.base_filters;
    for _ in 0..n_layers - 1 {
        convs.push(ConvLayer::new(ch, filters, 4, 2, 1, false, &mut rng));
        ch = filters;
        filters *= 2;
    }
    // Final valid 4x4 convolution collapses the 4x4 plane to a scalar.
    convs.push(ConvLayer::new(ch, 1, 4, 1, 0, false, &mut rng));
    Ok(Discriminator { input_size: cfg.input_size, channels: cfg.channels, convs })
}

impl Discriminator {
    pub fn n_layers(&self) -> usize {
        self.convs.len()
    }

    pub fn forward(&self, x: &Tensor, frozen: bool, tape: &Tape) -> crate::tensor::Result<Tensor> {
        let shape = x.shape();
        if shape.len() != 4
            || shape[1] != self.channels
            || shape[2] != self.input_size
            || shape[3] != self.input_size
        {
            return Err(TensorError::Invalid {
                op: "discriminator",
                msg: format!(
                    "expected [B,{},{},{}], got {:?}",
                    self.channels, self.input_size, self.input_size, shape
                ),
            });
        }
        let batch = shape[0];
        let mut h = x.clone();
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h, frozen, tape)?;
            if i < last {
                if i > 0 {
                    h = h.instance_norm(INSTANCE_NORM_EPS, tape)?;
                }
                h = h.leaky_relu(LEAKY_SLOPE, tape)?;
            }
        }
        h.sigmoid(tape)?.reshape(&[batch], tape)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&format!("conv{i}"), &mut out);
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&format!("conv{i}"), &mut out);
        }
        out
    }
}

impl Critic for Discriminator {
    fn score(&self, x: &Tensor, frozen: bool, tape: &Tape) -> crate::tensor::Result<Tensor> {
        self.forward(x, frozen, tape)
    }
}

/// Replace a network's parameters from `stored` (all keys under `prefix/`).
pub fn load_named_params(
    params: Vec<(String, &mut Tensor)>,
    prefix: &str,
    stored: &BTreeMap<String, TensorBlob>,
) -> Result<()> {
    for (name, slot) in params {
        let key = format!("{prefix}/{name}");
        let Some(t) = stored.get(&key) else {
            return Err(NnError::UnknownParam { key });
        };
        if t.shape != slot.shape() {
            return Err(NnError::ParamShape {
                param: key,
                stored: t.shape.clone(),
                expected: slot.shape().to_vec(),
            });
        }
        *slot = t.to_param()?;
    }
    Ok(())
}

// ── optimizer ──────────────────────────────────────────────────────────

/// Per-network Adam state: one first/second moment buffer per parameter,
/// one shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One Adam update over every named parameter. Each parameter must
    /// carry a gradient from the latest backward pass; updated parameters
    /// are fresh leaves with cleared gradients.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor)>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params {
            let grad = p.grad_vec().ok_or(NnError::MissingGrad { param: name.clone() })?;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            if m.len() != grad.len() || v.len() != grad.len() {
                return Err(NnError::ParamShape {
                    param: name,
                    stored: vec![m.len()],
                    expected: vec![grad.len()],
                });
            }
            let mut data = p.data().to_vec();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            *p = Tensor::param(data, p.shape())?;
        }
        Ok(())
    }
}

// ── learning-rate schedule ─────────────────────────────────────────────

/// Constant for `constant_epochs`, then linear decay to zero over
/// `decay_epochs`. Never negative.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub constant_epochs: usize,
    pub decay_epochs: usize,
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.constant_epochs {
            self.base_lr
        } else if self.decay_epochs == 0 {
            0.0
        } else {
            let into = (epoch - self.constant_epochs) as f64;
            (self.base_lr * (1.0 - into / self.decay_epochs as f64)).max(0.0)
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.constant_epochs + self.decay_epochs
    }
}
