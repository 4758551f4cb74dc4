//! Alternating minimax training over the constraint manifest,
//! checkpointing with exact resume, the run log, and the
//! independently-trained two-unit baseline pipeline.
//!
//! Each optimization step draws one fresh minibatch per anchor node, then
//! updates all discriminators (fakes computed with frozen generators),
//! then all generators on the weighted total (critics frozen). All
//! randomness flows from the config seed through one ChaCha stream whose
//! position is checkpointed, so identical configs give bit-identical
//! checkpoints and a resumed run equals an uninterrupted one.

mod checkpoint;

pub use checkpoint::{config_hash, Checkpoint, RngSnapshot, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{
    load_attribute_csv, sample_subdomain, AttrKind, DataError, GlyphGrid, GlyphSpace,
    SubdomainDataset,
};
use crate::graph::{
    enumerate_constraints, node_label, ConceptGraph, ConstraintManifest, GraphError, NodeId,
};
use crate::losses::{
    total_loss, CriticSource, EvalInputs, GanMode, LossBreakdown, LossError, LossWeights,
    MapSource,
};
use crate::nn::{
    build_discriminator, build_generator, load_named_params, AdamState, Critic, Discriminator,
    DiscriminatorConfig, Generator, GeneratorConfig, LrSchedule, Mapping, NnError, Profile,
};
use crate::tensor::{Tape, Tensor, TensorBlob, TensorError};

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("numeric failure at optimization step {step}; last-good checkpoint is at epoch {epoch}", epoch = .last_good.epoch)]
    NumericAbort { step: u64, last_good: Box<Checkpoint> },
    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),
    #[error("checkpoint was produced by a different config")]
    ConfigMismatch,
    #[error("parameters changed outside their {phase} half-step")]
    IsolationViolated { phase: &'static str },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config json: {0}")]
    Json(#[from] serde_json::Error),
}

// ── configuration ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        image_size: usize,
        channels: usize,
        samples_per_node: usize,
        /// Per-node sample-count overrides, keyed by decimal node index.
        #[serde(default)]
        overrides: BTreeMap<String, usize>,
        /// Which glyph attribute each concept axis binds to.
        concept_attrs: Vec<AttrKind>,
        /// Attributes pinned to a constant state (baseline units).
        #[serde(default)]
        fixed_attrs: BTreeMap<AttrKind, u8>,
    },
    Csv {
        dir: PathBuf,
        csv: PathBuf,
        columns: Vec<String>,
        image_size: usize,
        channels: usize,
    },
}

impl DatasetSpec {
    pub fn image_size(&self) -> usize {
        match self {
            DatasetSpec::Synthetic { image_size, .. } | DatasetSpec::Csv { image_size, .. } => {
                *image_size
            }
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            DatasetSpec::Synthetic { channels, .. } | DatasetSpec::Csv { channels, .. } => {
                *channels
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorNet {
    pub base_filters: usize,
    pub n_residual_blocks: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorNet {
    pub base_filters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Conceptgan,
    BaselineCyclegan,
}

fn default_lr() -> f64 {
    2e-4
}

fn default_checkpoint_every() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    pub batch_size: usize,
    pub constant_epochs: usize,
    pub decay_epochs: usize,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    pub seed: u64,
    /// Checkpoint cadence in epochs; 0 keeps only the final checkpoint.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub mode: TrainMode,
    /// Feed discriminators from a pool of past fakes instead of only the
    /// current ones. Off by default; the pool is checkpointed.
    #[serde(default)]
    pub fake_history: bool,
    /// Hash generator/discriminator parameters around each half-step and
    /// fail loudly if the wrong family moved.
    #[serde(default)]
    pub check_param_isolation: bool,
}

fn default_test_samples() -> usize {
    500
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalParams {
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams { test_samples: default_test_samples() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub n_concepts: usize,
    pub concept_names: Vec<String>,
    pub observed: Vec<NodeId>,
    pub profile: Profile,
    pub dataset: DatasetSpec,
    pub generator: GeneratorNet,
    pub discriminator: DiscriminatorNet,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub gan_mode: GanMode,
    pub train: TrainParams,
    #[serde(default)]
    pub eval: EvalParams,
}

impl TrainConfig {
    /// The frozen desk-scale run: 16x16 single-channel glyphs over
    /// shape x style with the joint subdomain withheld, batch 16,
    /// 30 constant + 30 decay epochs. The desk learning rate is
    /// calibrated at 1e-3: the short schedule leaves too little total
    /// parameter movement at the full-scale 2e-4.
    pub fn desk_default(seed: u64) -> TrainConfig {
        TrainConfig {
            n_concepts: 2,
            concept_names: vec!["shape".into(), "style".into()],
            observed: vec![0, 1, 2],
            profile: Profile::Desk,
            dataset: DatasetSpec::Synthetic {
                image_size: 16,
                channels: 1,
                samples_per_node: 256,
                overrides: BTreeMap::new(),
                concept_attrs: vec![AttrKind::Shape, AttrKind::Style],
                fixed_attrs: BTreeMap::new(),
            },
            generator: GeneratorNet { base_filters: 8, n_residual_blocks: 2 },
            discriminator: DiscriminatorNet { base_filters: 8 },
            weights: LossWeights::default(),
            gan_mode: GanMode::default(),
            train: TrainParams {
                batch_size: 16,
                constant_epochs: 30,
                decay_epochs: 30,
                base_lr: 1e-3,
                seed,
                checkpoint_every: default_checkpoint_every(),
                mode: TrainMode::Conceptgan,
                fake_history: false,
                check_param_isolation: false,
            },
            eval: EvalParams::default(),
        }
    }

    pub fn paper_default(seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::desk_default(seed);
        cfg.profile = Profile::Paper;
        cfg.dataset = DatasetSpec::Synthetic {
            image_size: 64,
            channels: 3,
            samples_per_node: 4096,
            overrides: BTreeMap::new(),
            concept_attrs: vec![AttrKind::Shape, AttrKind::Style],
            fixed_attrs: BTreeMap::new(),
        };
        cfg.generator = GeneratorNet { base_filters: 64, n_residual_blocks: 6 };
        cfg.discriminator = DiscriminatorNet { base_filters: 64 };
        cfg.train.constant_epochs = 150;
        cfg.train.decay_epochs = 150;
        cfg.train.base_lr = default_lr();
        cfg.train.batch_size = 1;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.concept_names.len() != self.n_concepts {
            return err("concept_names length must equal n_concepts");
        }
        {
            let mut names = self.concept_names.clone();
            names.sort();
            names.dedup();
            if names.len() != self.n_concepts {
                return err("concept names must be unique");
            }
        }
        self.graph()?;
        if self.train.batch_size < 1 {
            return err("batch_size must be >= 1");
        }
        if self.train.base_lr <= 0.0 {
            return err("base_lr must be positive");
        }
        self.weights.validate().map_err(TrainError::Config)?;
        if self.train.mode == TrainMode::BaselineCyclegan {
            if self.n_concepts != 2 {
                return err("baseline mode requires exactly 2 concepts");
            }
            if !matches!(self.dataset, DatasetSpec::Synthetic { .. }) {
                return err("baseline mode supports synthetic datasets only");
            }
        }
        match &self.dataset {
            DatasetSpec::Synthetic { concept_attrs, channels, .. } => {
                if concept_attrs.len() != self.n_concepts {
                    return err("concept_attrs length must equal n_concepts");
                }
                let mut attrs = concept_attrs.clone();
                attrs.sort();
                attrs.dedup();
                if attrs.len() != concept_attrs.len() {
                    return err("concept_attrs must be distinct");
                }
                if *channels != 1 && *channels != 3 {
                    return err("synthetic channels must be 1 or 3");
                }
            }
            DatasetSpec::Csv { columns, .. } => {
                if columns.len() != self.n_concepts {
                    return err("csv columns length must equal n_concepts");
                }
            }
        }
        self.generator_config().validate()?;
        self.discriminator_config().validate()?;
        Ok(())
    }

    pub fn graph(&self) -> Result<ConceptGraph> {
        Ok(ConceptGraph::new(self.n_concepts, self.observed.iter().copied())?)
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            input_size: self.dataset.image_size(),
            channels: self.dataset.channels(),
            base_filters: self.generator.base_filters,
            n_residual_blocks: self.generator.n_residual_blocks,
            profile: self.profile,
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            input_size: self.dataset.image_size(),
            channels: self.dataset.channels(),
            base_filters: self.discriminator.base_filters,
            profile: self.profile,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.train.base_lr,
            constant_epochs: self.train.constant_epochs,
            decay_epochs: self.train.decay_epochs,
        }
    }

    /// Canonical JSON used for hashing and checkpoints.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(json: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hash_hex(&self) -> Result<String> {
        let h = config_hash(&self.to_json()?);
        Ok(h.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// The glyph space of a synthetic dataset spec.
    pub fn glyph_space(&self) -> Option<GlyphSpace> {
        match &self.dataset {
            DatasetSpec::Synthetic { image_size, channels, concept_attrs, fixed_attrs, .. } => {
                Some(GlyphSpace {
                    grid: GlyphGrid::for_image_size(*image_size, *channels),
                    concept_attrs: concept_attrs.clone(),
                    fixed_attrs: fixed_attrs.clone(),
                })
            }
            DatasetSpec::Csv { .. } => None,
        }
    }
}

/// Materialize the training datasets: observed nodes only.
pub fn build_datasets(config: &TrainConfig) -> Result<BTreeMap<NodeId, SubdomainDataset>> {
    let graph = config.graph()?;
    match &config.dataset {
        DatasetSpec::Synthetic { samples_per_node, overrides, .. } => {
            let space = config.glyph_space().expect("synthetic spec");
            let mut out = BTreeMap::new();
            for &node in graph.observed() {
                let count = overrides
                    .get(&node.to_string())
                    .copied()
                    .unwrap_or(*samples_per_node);
                out.insert(node, sample_subdomain(&space, node, count, config.train.seed)?);
            }
            Ok(out)
        }
        DatasetSpec::Csv { dir, csv, columns, image_size, channels } => {
            let mut sets = load_attribute_csv(dir, csv, columns)?;
            for (node, ds) in &sets {
                if !ds.is_empty() && (ds.image_size != *image_size || ds.channels != *channels) {
                    return Err(TrainError::Config(format!(
                        "csv images at node {} are {}x{}x{}, config says {}x{}",
                        node_label(*node, config.n_concepts),
                        ds.channels,
                        ds.image_size,
                        ds.image_size,
                        channels,
                        image_size,
                    )));
                }
            }
            sets.retain(|node, _| graph.is_observed(*node));
            Ok(sets)
        }
    }
}

// ── run log ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub mean_total_generator: f64,
    pub mean_total_discriminator: f64,
}

/// Append-only per-step loss table plus per-epoch summaries.
#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub epochs: Vec<EpochSummary>,
}

impl RunLog {
    fn columns_from(breakdown: &LossBreakdown) -> Vec<String> {
        let mut cols = vec!["step".into(), "epoch".into(), "lr".into()];
        for t in &breakdown.adv {
            cols.push(format!("{}:d", t.name));
            cols.push(format!("{}:g", t.name));
        }
        for t in breakdown.cyc2.iter().chain(&breakdown.cyc4).chain(&breakdown.comm).chain(&breakdown.identity) {
            cols.push(t.name.clone());
        }
        cols.push("total_generator".into());
        cols.push("total_discriminator".into());
        cols
    }

    fn push(&mut self, step: u64, epoch: usize, lr: f64, b: &LossBreakdown) {
        if self.columns.is_empty() {
            self.columns = Self::columns_from(b);
        }
        let mut row = Vec::with_capacity(self.columns.len());
        row.push(step as f64);
        row.push(epoch as f64);
        row.push(lr);
        for t in &b.adv {
            row.push(t.d_objective);
            row.push(t.g_objective);
        }
        for t in b.cyc2.iter().chain(&b.cyc4).chain(&b.comm).chain(&b.identity) {
            row.push(t.value);
        }
        row.push(b.total_generator);
        row.push(b.total_discriminator);
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for row in &self.rows {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.12e}")).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    /// One loss-term count per optimization step (adversarial terms carry
    /// a discriminator and a generator column).
    pub fn terms_per_row(&self) -> usize {
        // minus step/epoch/lr and the two totals
        self.columns.len().saturating_sub(5)
    }

    pub fn epochs_to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,mean_total_generator,mean_total_discriminator\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:.12e},{:.12e},{:.12e}\n",
                e.epoch, e.lr, e.mean_total_generator, e.mean_total_discriminator
            ));
        }
        s
    }
}

// ── trainer internals ──────────────────────────────────────────────────

use crate::data::mix_seed;

struct FakePool {
    capacity: usize,
    images: Vec<Tensor>,
}

impl FakePool {
    /// CycleGAN-style image pool: new fakes enter until capacity, then
    /// with probability 1/2 swap with (and emit) a stored one.
    fn select(&mut self, fake: Tensor, rng: &mut ChaCha8Rng) -> Tensor {
        if self.images.len() < self.capacity {
            self.images.push(fake.clone());
            return fake;
        }
        if rng.random_range(0..2) == 1 {
            let idx = rng.random_range(0..self.images.len());
            let old = self.images[idx].clone();
            self.images[idx] = fake;
            old
        } else {
            fake
        }
    }
}

struct TrainerState {
    gens: Vec<Generator>,
    invs: Vec<Generator>,
    discs: BTreeMap<NodeId, Discriminator>,
    gen_opt: Vec<AdamState>,
    inv_opt: Vec<AdamState>,
    disc_opt: BTreeMap<NodeId, AdamState>,
    pools: BTreeMap<NodeId, FakePool>,
    rng: ChaCha8Rng,
    epoch: usize,
}

struct NetMaps<'a> {
    gens: &'a [Generator],
    invs: &'a [Generator],
}

impl MapSource for NetMaps<'_> {
    fn mapping(&self, concept: usize, forward: bool) -> &dyn Mapping {
        if forward {
            &self.gens[concept]
        } else {
            &self.invs[concept]
        }
    }
}

struct NetCritics<'a> {
    discs: &'a BTreeMap<NodeId, Discriminator>,
}

impl CriticSource for NetCritics<'_> {
    fn critic(&self, node: NodeId) -> Option<&dyn Critic> {
        self.discs.get(&node).map(|d| d as &dyn Critic)
    }
}

fn disc_prefix(node: NodeId, n: usize) -> String {
    format!("D{}", node_label(node, n))
}

const POOL_CAPACITY: usize = 50;

fn init_state(config: &TrainConfig, graph: &ConceptGraph) -> Result<TrainerState> {
    let seed = config.train.seed;
    let gen_cfg = config.generator_config();
    let disc_cfg = config.discriminator_config();
    let n = config.n_concepts;
    let mut gens = Vec::with_capacity(n);
    let mut invs = Vec::with_capacity(n);
    for k in 0..n {
        gens.push(build_generator(&gen_cfg, mix_seed(seed, 1000 + k as u64))?);
        invs.push(build_generator(&gen_cfg, mix_seed(seed, 2000 + k as u64))?);
    }
    let mut discs = BTreeMap::new();
    let mut disc_opt = BTreeMap::new();
    let mut pools = BTreeMap::new();
    for &node in graph.observed() {
        discs.insert(node, build_discriminator(&disc_cfg, mix_seed(seed, 3000 + node as u64))?);
        disc_opt.insert(node, AdamState::new());
        pools.insert(node, FakePool { capacity: POOL_CAPACITY, images: Vec::new() });
    }
    Ok(TrainerState {
        gens,
        invs,
        discs,
        gen_opt: (0..n).map(|_| AdamState::new()).collect(),
        inv_opt: (0..n).map(|_| AdamState::new()).collect(),
        disc_opt,
        pools,
        rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, 4000)),
        epoch: 0,
    })
}

fn snapshot_rng(rng: &ChaCha8Rng) -> RngSnapshot {
    RngSnapshot { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
}

fn restore_rng(s: &RngSnapshot) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(s.seed);
    rng.set_stream(s.stream);
    rng.set_word_pos(s.word_pos);
    rng
}

fn adam_to_tensors(opt: &AdamState, out: &mut BTreeMap<String, TensorBlob>) {
    // moment keys already carry the network prefix
    for (name, buf) in &opt.m {
        out.insert(format!("adam/{name}/m"), TensorBlob { shape: vec![buf.len()], data: buf.clone() });
    }
    for (name, buf) in &opt.v {
        out.insert(format!("adam/{name}/v"), TensorBlob { shape: vec![buf.len()], data: buf.clone() });
    }
}

fn adam_from_tensors(
    prefix: &str,
    step: u64,
    param_names: &[String],
    tensors: &BTreeMap<String, TensorBlob>,
) -> Result<AdamState> {
    let mut opt = AdamState { step, ..AdamState::new() };
    for name in param_names {
        let mkey = format!("adam/{name}/m");
        let vkey = format!("adam/{name}/v");
        match (tensors.get(&mkey), tensors.get(&vkey)) {
            (Some(m), Some(v)) => {
                opt.m.insert(name.clone(), m.data.clone());
                opt.v.insert(name.clone(), v.data.clone());
            }
            // never stepped yet
            (None, None) => {}
            _ => {
                return Err(TrainError::CheckpointFormat(format!(
                    "half-present Adam moments for {name} ({prefix})"
                )))
            }
        }
    }
    Ok(opt)
}

fn state_to_checkpoint(config: &TrainConfig, state: &TrainerState) -> Result<Checkpoint> {
    let n = config.n_concepts;
    let mut tensors = BTreeMap::new();
    let mut opt_steps = BTreeMap::new();
    for k in 0..n {
        let gp = format!("G{}", k + 1);
        for (name, t) in state.gens[k].named_params() {
            tensors.insert(format!("{gp}/{name}"), TensorBlob::from_tensor(t));
        }
        opt_steps.insert(gp.clone(), state.gen_opt[k].step);
        adam_to_tensors(&state.gen_opt[k], &mut tensors);

        let fp = format!("F{}", k + 1);
        for (name, t) in state.invs[k].named_params() {
            tensors.insert(format!("{fp}/{name}"), TensorBlob::from_tensor(t));
        }
        opt_steps.insert(fp.clone(), state.inv_opt[k].step);
        adam_to_tensors(&state.inv_opt[k], &mut tensors);
    }
    for (&node, disc) in &state.discs {
        let dp = disc_prefix(node, n);
        for (name, t) in disc.named_params() {
            tensors.insert(format!("{dp}/{name}"), TensorBlob::from_tensor(t));
        }
        opt_steps.insert(dp.clone(), state.disc_opt[&node].step);
        adam_to_tensors(&state.disc_opt[&node], &mut tensors);
    }
    for (&node, pool) in &state.pools {
        for (i, img) in pool.images.iter().enumerate() {
            tensors.insert(
                format!("fakepool/{}/{i:04}", disc_prefix(node, n)),
                TensorBlob::from_tensor(img),
            );
        }
    }
    Ok(Checkpoint {
        config_json: config.to_json()?,
        epoch: state.epoch as u64,
        rng: snapshot_rng(&state.rng),
        opt_steps,
        tensors,
    })
}

fn state_from_checkpoint(
    config: &TrainConfig,
    graph: &ConceptGraph,
    ckpt: &Checkpoint,
) -> Result<TrainerState> {
    let mut state = init_state(config, graph)?;
    let n = config.n_concepts;
    for k in 0..n {
        let gp = format!("G{}", k + 1);
        load_named_params(state.gens[k].named_params_mut(), &gp, &ckpt.tensors)?;
        let names: Vec<String> =
            state.gens[k].named_params().iter().map(|(p, _)| format!("{gp}/{p}")).collect();
        state.gen_opt[k] = adam_from_tensors(
            &gp,
            *ckpt.opt_steps.get(&gp).unwrap_or(&0),
            &names,
            &ckpt.tensors,
        )?;

        let fp = format!("F{}", k + 1);
        load_named_params(state.invs[k].named_params_mut(), &fp, &ckpt.tensors)?;
        let names: Vec<String> =
            state.invs[k].named_params().iter().map(|(p, _)| format!("{fp}/{p}")).collect();
        state.inv_opt[k] = adam_from_tensors(
            &fp,
            *ckpt.opt_steps.get(&fp).unwrap_or(&0),
            &names,
            &ckpt.tensors,
        )?;
    }
    let nodes: Vec<NodeId> = state.discs.keys().copied().collect();
    for node in nodes {
        let dp = disc_prefix(node, n);
        load_named_params(state.discs.get_mut(&node).unwrap().named_params_mut(), &dp, &ckpt.tensors)?;
        let names: Vec<String> = state.discs[&node]
            .named_params()
            .iter()
            .map(|(p, _)| format!("{dp}/{p}"))
            .collect();
        state.disc_opt.insert(
            node,
            adam_from_tensors(&dp, *ckpt.opt_steps.get(&dp).unwrap_or(&0), &names, &ckpt.tensors)?,
        );
        let pool_prefix = format!("fakepool/{dp}/");
        let pool = state.pools.get_mut(&node).unwrap();
        pool.images = ckpt
            .tensors
            .range(pool_prefix.clone()..)
            .take_while(|(k, _)| k.starts_with(&pool_prefix))
            .map(|(_, t)| t.to_tensor())
            .collect::<crate::tensor::Result<Vec<_>>>()?;
    }
    state.rng = restore_rng(&ckpt.rng);
    state.epoch = ckpt.epoch as usize;
    Ok(state)
}

fn params_digest(params: &[(String, &Tensor)]) -> [u8; 32] {
    let mut h = Sha256::new();
    for (name, t) in params {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}

fn is_numeric_error(e: &TrainError) -> bool {
    matches!(
        e,
        TrainError::Tensor(TensorError::NonFinite { .. })
            | TrainError::Loss(LossError::Tensor(TensorError::NonFinite { .. }))
            | TrainError::Loss(LossError::CriticRange { .. })
            | TrainError::Nn(NnError::Tensor(TensorError::NonFinite { .. }))
    )
}

#[derive(Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub runlog: RunLog,
}

/// Train from scratch. See [`train_observed`] for checkpoint callbacks.
pub fn train(config: &TrainConfig) -> Result<TrainOutput> {
    train_observed(config, &mut |_, _| Ok(()))
}

/// Train from scratch, invoking `on_checkpoint(epoch, ckpt)` at every
/// cadence point and at the end.
pub fn train_observed(
    config: &TrainConfig,
    on_checkpoint: &mut dyn FnMut(usize, &Checkpoint) -> std::io::Result<()>,
) -> Result<TrainOutput> {
    config.validate()?;
    let graph = config.graph()?;
    let state = init_state(config, &graph)?;
    run(config, graph, state, on_checkpoint)
}

/// Continue a checkpointed run to completion; bit-identical to the
/// uninterrupted run.
pub fn resume(config: &TrainConfig, ckpt: &Checkpoint) -> Result<TrainOutput> {
    config.validate()?;
    if ckpt.config_json != config.to_json()? {
        return Err(TrainError::ConfigMismatch);
    }
    let graph = config.graph()?;
    let state = state_from_checkpoint(config, &graph, ckpt)?;
    run(config, graph, state, &mut |_, _| Ok(()))
}

fn run(
    config: &TrainConfig,
    graph: ConceptGraph,
    mut state: TrainerState,
    on_checkpoint: &mut dyn FnMut(usize, &Checkpoint) -> std::io::Result<()>,
) -> Result<TrainOutput> {
    let manifest = enumerate_constraints(&graph);
    let datasets = build_datasets(config)?;
    let anchors: Vec<NodeId> = manifest.anchor_nodes().into_iter().collect();
    for &node in &anchors {
        if datasets.get(&node).map(|d| d.is_empty()).unwrap_or(true) {
            return Err(TrainError::Config(format!(
                "observed node {} has an empty dataset",
                node_label(node, config.n_concepts)
            )));
        }
    }

    let schedule = config.schedule();
    let total_epochs = schedule.total_epochs();
    let batch = config.train.batch_size;
    let max_len = anchors.iter().map(|v| datasets[v].len()).max().unwrap_or(0);
    let steps_per_epoch = max_len.div_ceil(batch).max(1);

    let mut runlog = RunLog::default();
    let mut last_good = state_to_checkpoint(config, &state)?;
    let mut global_step: u64 = (state.epoch * steps_per_epoch) as u64;

    for epoch in state.epoch..total_epochs {
        let lr = schedule.lr_at(epoch);
        let mut epoch_g = 0.0;
        let mut epoch_d = 0.0;
        for _ in 0..steps_per_epoch {
            let breakdown =
                step(config, &manifest, &datasets, &anchors, &mut state, lr).map_err(
                    |e| {
                        if is_numeric_error(&e) {
                            TrainError::NumericAbort {
                                step: global_step,
                                last_good: Box::new(last_good.clone()),
                            }
                        } else {
                            e
                        }
                    },
                )?;
            epoch_g += breakdown.total_generator;
            epoch_d += breakdown.total_discriminator;
            runlog.push(global_step, epoch, lr, &breakdown);
            global_step += 1;
        }
        state.epoch = epoch + 1;
        runlog.epochs.push(EpochSummary {
            epoch,
            lr,
            mean_total_generator: epoch_g / steps_per_epoch as f64,
            mean_total_discriminator: epoch_d / steps_per_epoch as f64,
        });
        let cadence = config.train.checkpoint_every;
        if cadence > 0 && (epoch + 1) % cadence == 0 && epoch + 1 < total_epochs {
            let ckpt = state_to_checkpoint(config, &state)?;
            on_checkpoint(epoch + 1, &ckpt)
                .map_err(|e| TrainError::Io { path: PathBuf::from("checkpoint"), source: e })?;
            last_good = ckpt;
        } else {
            last_good = state_to_checkpoint(config, &state)?;
        }
    }

    let checkpoint = state_to_checkpoint(config, &state)?;
    on_checkpoint(total_epochs, &checkpoint)
        .map_err(|e| TrainError::Io { path: PathBuf::from("checkpoint"), source: e })?;
    Ok(TrainOutput { checkpoint, runlog })
}

/// One optimization step: all discriminators, then all generators.
fn step(
    config: &TrainConfig,
    manifest: &ConstraintManifest,
    datasets: &BTreeMap<NodeId, SubdomainDataset>,
    anchors: &[NodeId],
    state: &mut TrainerState,
    lr: f64,
) -> Result<LossBreakdown> {
    let n = config.n_concepts;
    let batch_size = config.train.batch_size;

    // Fresh independent minibatches per anchor node (with replacement).
    let mut batches: BTreeMap<NodeId, Tensor> = BTreeMap::new();
    for &node in anchors {
        let ds = &datasets[&node];
        let idx: Vec<usize> =
            (0..batch_size).map(|_| state.rng.random_range(0..ds.len())).collect();
        batches.insert(node, ds.batch(&idx)?);
    }

    let isolate = config.train.check_param_isolation;
    let gen_digest_before = if isolate {
        let mut all = Vec::new();
        for g in state.gens.iter().chain(&state.invs) {
            all.extend(g.named_params());
        }
        Some(params_digest(&all))
    } else {
        None
    };

    // Phase 1: discriminators against detached fakes from frozen
    // generators.
    {
        let tape = Tape::new();
        let maps = NetMaps { gens: &state.gens, invs: &state.invs };
        let mut d_total: Option<Tensor> = None;
        for term in &manifest.adv {
            let src = &batches[&term.source];
            let fake_now =
                maps.mapping(term.step.concept, term.step.forward).apply(src, true, &tape)?;
            let fake = if config.train.fake_history {
                state
                    .pools
                    .get_mut(&term.target)
                    .expect("pool per discriminator")
                    .select(fake_now, &mut state.rng)
            } else {
                fake_now
            };
            let disc = &state.discs[&term.target];
            let real = &batches[&term.target];
            let s_real = disc.score(real, false, &tape)?;
            let s_fake = disc.score(&fake, false, &tape)?;
            let node = node_label(term.target, n);
            for s in [&s_real, &s_fake] {
                if !s.data().iter().all(|&v| v > 0.0 && v < 1.0) {
                    return Err(LossError::CriticRange { node }.into());
                }
            }
            let d_real = s_real.log(&tape)?.mean_all(&tape)?;
            let d_fake =
                s_fake.scale(-1.0, &tape)?.offset(1.0, &tape)?.log(&tape)?.mean_all(&tape)?;
            let obj = d_real.add(&d_fake, &tape)?;
            d_total = Some(match d_total {
                None => obj,
                Some(acc) => acc.add(&obj, &tape)?,
            });
        }
        if let Some(d_total) = d_total {
            let loss = d_total.scale(-1.0, &tape)?;
            tape.backward(&loss)?;
            for (&node, disc) in state.discs.iter_mut() {
                let dp = disc_prefix(node, n);
                let params: Vec<(String, &mut Tensor)> = disc
                    .named_params_mut()
                    .into_iter()
                    .map(|(p, t)| (format!("{dp}/{p}"), t))
                    .collect();
                state.disc_opt.get_mut(&node).unwrap().step(params, lr)?;
            }
        }
    }

    if let Some(before) = gen_digest_before {
        let mut all = Vec::new();
        for g in state.gens.iter().chain(&state.invs) {
            all.extend(g.named_params());
        }
        if params_digest(&all) != before {
            return Err(TrainError::IsolationViolated { phase: "discriminator" });
        }
    }

    let disc_digest_before = if isolate {
        let mut all = Vec::new();
        for d in state.discs.values() {
            all.extend(d.named_params());
        }
        Some(params_digest(&all))
    } else {
        None
    };

    // Phase 2: generators on the full weighted objective, critics frozen.
    let breakdown = {
        let tape = Tape::new();
        let maps = NetMaps { gens: &state.gens, invs: &state.invs };
        let critics = NetCritics { discs: &state.discs };
        let inputs = EvalInputs {
            manifest,
            maps: &maps,
            critics: &critics,
            batches: &batches,
            weights: &config.weights,
            mode: config.gan_mode,
            n_concepts: n,
        };
        let eval = total_loss(&inputs, &tape)?;
        tape.backward(&eval.generator_objective)?;
        for k in 0..n {
            let gp = format!("G{}", k + 1);
            let params: Vec<(String, &mut Tensor)> = state.gens[k]
                .named_params_mut()
                .into_iter()
                .map(|(p, t)| (format!("{gp}/{p}"), t))
                .collect();
            state.gen_opt[k].step(params, lr)?;
            let fp = format!("F{}", k + 1);
            let params: Vec<(String, &mut Tensor)> = state.invs[k]
                .named_params_mut()
                .into_iter()
                .map(|(p, t)| (format!("{fp}/{p}"), t))
                .collect();
            state.inv_opt[k].step(params, lr)?;
        }
        eval.breakdown
    };

    if let Some(before) = disc_digest_before {
        let mut all = Vec::new();
        for d in state.discs.values() {
            all.extend(d.named_params());
        }
        if params_digest(&all) != before {
            return Err(TrainError::IsolationViolated { phase: "generator" });
        }
    }

    Ok(breakdown)
}

// ── baseline pipeline ──────────────────────────────────────────────────

/// The two independently trained single-concept units: unit A learns the
/// first concept on nodes {00, 10}, unit B the second on {00, 01}. Each
/// is the 1-concept degenerate lattice (adversarial + distance-2 cycle +
/// identity losses only); neither ever reads the other's variation.
pub fn train_baseline(config: &TrainConfig) -> Result<(TrainOutput, TrainOutput)> {
    config.validate()?;
    if config.n_concepts != 2 {
        return Err(TrainError::Config("baseline requires exactly 2 concepts".into()));
    }
    let unit_a = baseline_unit_config(config, 0)?;
    let unit_b = baseline_unit_config(config, 1)?;
    Ok((train(&unit_a)?, train(&unit_b)?))
}

/// Config for one single-concept baseline unit (concept index 0 or 1 of
/// the parent config); the other attribute is pinned to state 0.
pub fn baseline_unit_config(config: &TrainConfig, concept: usize) -> Result<TrainConfig> {
    let DatasetSpec::Synthetic {
        image_size,
        channels,
        samples_per_node,
        concept_attrs,
        fixed_attrs,
        ..
    } = &config.dataset
    else {
        return Err(TrainError::Config("baseline mode supports synthetic datasets only".into()));
    };
    let other = 1 - concept;
    let mut fixed = fixed_attrs.clone();
    fixed.insert(concept_attrs[other], 0);
    let mut unit = config.clone();
    unit.n_concepts = 1;
    unit.concept_names = vec![config.concept_names[concept].clone()];
    unit.observed = vec![0, 1];
    unit.dataset = DatasetSpec::Synthetic {
        image_size: *image_size,
        channels: *channels,
        samples_per_node: *samples_per_node,
        overrides: BTreeMap::new(),
        concept_attrs: vec![concept_attrs[concept]],
        fixed_attrs: fixed,
    };
    unit.train.mode = TrainMode::Conceptgan;
    unit.train.seed = mix_seed(config.train.seed, 7000 + concept as u64);
    Ok(unit)
}
