//! The loss families over a constraint manifest: adversarial terms at
//! observed nodes, distance-2/distance-4 cycle consistency, commutativity,
//! and identity, with the weighted totals of the minimax objective.
//!
//! Gradient routing is part of the contract: discriminator objectives see
//! fakes detached from the generators, generator objectives see critics
//! with frozen parameters. Backward on `generator_objective` therefore
//! never deposits gradients on discriminator parameters, and vice versa.
//!
//! All cycle / commutativity / identity residuals are per-image mean L1,
//! so magnitudes are resolution-independent and the paper's weights carry
//! across profiles. The two rotations of a distance-4 cycle are summed.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{node_label, ConstraintManifest, MapStep, NodeId};
use crate::nn::{Critic, Mapping};
use crate::tensor::{Tape, Tensor, TensorError};

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("critic output outside (0,1) at node {node}")]
    CriticRange { node: String },
    #[error("no batch provided for anchor node {node}")]
    MissingBatch { node: String },
    #[error("no critic at observed node {node}")]
    MissingCritic { node: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Weights of the overall objective; cycle and commutativity default to
/// 10, as does the identity component. Ablation flags skip their family
/// entirely.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub mu_comm: f64,
    pub identity_weight: f64,
    pub disable_cyc4: bool,
    pub disable_comm: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cyc: 10.0,
            mu_comm: 10.0,
            identity_weight: 10.0,
            disable_cyc4: false,
            disable_comm: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.lambda_cyc < 0.0 || self.mu_comm < 0.0 || self.identity_weight < 0.0 {
            return Err("loss weights must be nonnegative".into());
        }
        Ok(())
    }
}

/// Generator-side adversarial form: non-saturating by default, with a
/// flag restoring the literal minimax inner term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[derive(Default)]
pub enum GanMode {
    #[default]
    NonSaturating,
    LiteralMinimax,
}


/// Who provides the mapping for each concept and direction.
pub trait MapSource {
    fn mapping(&self, concept: usize, forward: bool) -> &dyn Mapping;
}

/// Who provides the discriminator at each observed node.
pub trait CriticSource {
    fn critic(&self, node: NodeId) -> Option<&dyn Critic>;
}

/// Boxed mappings, one forward/inverse pair per concept.
pub struct MappingBank {
    pub forward: Vec<Box<dyn Mapping>>,
    pub inverse: Vec<Box<dyn Mapping>>,
}

impl MapSource for MappingBank {
    fn mapping(&self, concept: usize, forward: bool) -> &dyn Mapping {
        if forward {
            self.forward[concept].as_ref()
        } else {
            self.inverse[concept].as_ref()
        }
    }
}

/// Boxed critics keyed by node.
#[derive(Default)]
pub struct CriticBank {
    pub critics: BTreeMap<NodeId, Box<dyn Critic>>,
}

impl CriticSource for CriticBank {
    fn critic(&self, node: NodeId) -> Option<&dyn Critic> {
        self.critics.get(&node).map(|c| c.as_ref())
    }
}

// ── analytic stand-ins ─────────────────────────────────────────────────

/// `x -> scale*x + offset`, exact and parameter-free.
pub struct AffineMap {
    pub scale: f64,
    pub offset: f64,
}

impl Mapping for AffineMap {
    fn apply(&self, x: &Tensor, _frozen: bool, tape: &Tape) -> crate::tensor::Result<Tensor> {
        x.scale(self.scale, tape)?.offset(self.offset, tape)
    }
}

pub struct IdentityMap;

impl Mapping for IdentityMap {
    fn apply(&self, x: &Tensor, _frozen: bool, _tape: &Tape) -> crate::tensor::Result<Tensor> {
        Ok(x.clone())
    }
}

/// Critic scoring every image the same fixed probability.
pub struct ConstantCritic {
    pub p: f64,
}

impl Critic for ConstantCritic {
    fn score(&self, x: &Tensor, _frozen: bool, _tape: &Tape) -> crate::tensor::Result<Tensor> {
        Tensor::full(&[x.shape()[0]], self.p)
    }
}

/// Two-parameter logistic over the per-image mean: sigma(w*mean + b).
pub struct MeanLogisticCritic {
    pub w: f64,
    pub b: f64,
}

impl Critic for MeanLogisticCritic {
    fn score(&self, x: &Tensor, _frozen: bool, _tape: &Tape) -> crate::tensor::Result<Tensor> {
        let shape = x.shape();
        let batch = shape[0];
        let per: usize = shape[1..].iter().product();
        let scores: Vec<f64> = (0..batch)
            .map(|i| {
                let m = x.data()[i * per..(i + 1) * per].iter().sum::<f64>() / per as f64;
                1.0 / (1.0 + (-(self.w * m + self.b)).exp())
            })
            .collect();
        Tensor::new(scores, &[batch])
    }
}

// ── per-family losses ──────────────────────────────────────────────────

fn mean_l1(a: &Tensor, b: &Tensor, tape: &Tape) -> crate::tensor::Result<Tensor> {
    a.sub(b, tape)?.abs(tape)?.mean_all(tape)
}

/// Apply a mapping sequence left to right.
pub fn apply_path(
    maps: &dyn MapSource,
    batch: &Tensor,
    steps: &[MapStep],
    frozen: bool,
    tape: &Tape,
) -> crate::tensor::Result<Tensor> {
    let mut h = batch.clone();
    for s in steps {
        h = maps.mapping(s.concept, s.forward).apply(&h, frozen, tape)?;
    }
    Ok(h)
}

fn check_unit_range(node: &str, s: &Tensor) -> Result<()> {
    if s.data().iter().all(|&v| v > 0.0 && v < 1.0) {
        Ok(())
    } else {
        Err(LossError::CriticRange { node: node.to_string() })
    }
}

/// One adversarial term.
///
/// Returns `(d_objective, g_objective)`: the discriminator's maximand
/// `E[log D(real)] + E[log(1 - D(fake))]` evaluated with live critic
/// parameters on a detached fake, and the generator's minimand evaluated
/// through the critic with frozen parameters (`-E[log D(fake)]` in the
/// non-saturating form, `E[log(1 - D(fake))]` in the literal form).
pub fn adv_loss(
    critic: &dyn Critic,
    real: &Tensor,
    fake: &Tensor,
    mode: GanMode,
    node: &str,
    tape: &Tape,
) -> Result<(Tensor, Tensor)> {
    let s_real = critic.score(real, false, tape)?;
    check_unit_range(node, &s_real)?;
    let s_fake_d = critic.score(&fake.detach(), false, tape)?;
    check_unit_range(node, &s_fake_d)?;
    let d_real = s_real.log(tape)?.mean_all(tape)?;
    let d_fake = s_fake_d.scale(-1.0, tape)?.offset(1.0, tape)?.log(tape)?.mean_all(tape)?;
    let d_obj = d_real.add(&d_fake, tape)?;

    let s_fake_g = critic.score(fake, true, tape)?;
    check_unit_range(node, &s_fake_g)?;
    let g_obj = match mode {
        GanMode::NonSaturating => {
            s_fake_g.log(tape)?.mean_all(tape)?.scale(-1.0, tape)?
        }
        GanMode::LiteralMinimax => {
            s_fake_g.scale(-1.0, tape)?.offset(1.0, tape)?.log(tape)?.mean_all(tape)?
        }
    };
    Ok((d_obj, g_obj))
}

/// Distance-2 cycle residual: per-image mean L1 of `inv(fwd(batch)) - batch`.
pub fn cyc2_loss(
    maps: &dyn MapSource,
    batch: &Tensor,
    steps: &[MapStep; 2],
    tape: &Tape,
) -> crate::tensor::Result<Tensor> {
    let back = apply_path(maps, batch, steps, false, tape)?;
    mean_l1(&back, batch, tape)
}

/// Distance-4 cycle residual: clockwise plus counterclockwise rotation,
/// each a per-image mean L1 against the anchor batch.
pub fn cyc4_loss(
    maps: &dyn MapSource,
    batch: &Tensor,
    clockwise: &[MapStep; 4],
    counter: &[MapStep; 4],
    tape: &Tape,
) -> crate::tensor::Result<Tensor> {
    let cw = apply_path(maps, batch, clockwise, false, tape)?;
    let ccw = apply_path(maps, batch, counter, false, tape)?;
    let cw_res = mean_l1(&cw, batch, tape)?;
    let ccw_res = mean_l1(&ccw, batch, tape)?;
    cw_res.add(&ccw_res, tape)
}

/// Commutativity gap: per-image mean L1 between the two application orders.
pub fn comm_loss(
    maps: &dyn MapSource,
    batch: &Tensor,
    first: &[MapStep; 2],
    second: &[MapStep; 2],
    tape: &Tape,
) -> crate::tensor::Result<Tensor> {
    let a = apply_path(maps, batch, first, false, tape)?;
    let b = apply_path(maps, batch, second, false, tape)?;
    mean_l1(&a, &b, tape)
}

/// Identity residual of one mapping on samples already in its target
/// domain.
pub fn identity_loss(
    map: &dyn Mapping,
    batch: &Tensor,
    tape: &Tape,
) -> crate::tensor::Result<Tensor> {
    let y = map.apply(batch, false, tape)?;
    mean_l1(&y, batch, tape)
}

// ── breakdown ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedScalar {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdvScalar {
    pub name: String,
    pub d_objective: f64,
    pub g_objective: f64,
}

/// Per-term values and the weighted totals of one evaluation.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv: Vec<AdvScalar>,
    pub cyc2: Vec<NamedScalar>,
    pub cyc4: Vec<NamedScalar>,
    pub comm: Vec<NamedScalar>,
    pub identity: Vec<NamedScalar>,
    /// Minimized by the generators.
    pub total_generator: f64,
    /// Maximized by the discriminators.
    pub total_discriminator: f64,
}

impl LossBreakdown {
    /// Recompute the generator total from the parts; the tensor-assembled
    /// total must agree to 1e-12.
    pub fn recompute_generator_total(&self, weights: &LossWeights) -> f64 {
        let adv: f64 = self.adv.iter().map(|t| t.g_objective).sum();
        let cyc: f64 = self.cyc2.iter().map(|t| t.value).sum::<f64>()
            + self.cyc4.iter().map(|t| t.value).sum::<f64>();
        let comm: f64 = self.comm.iter().map(|t| t.value).sum();
        let id: f64 = self.identity.iter().map(|t| t.value).sum();
        adv + weights.lambda_cyc * cyc + weights.mu_comm * comm + weights.identity_weight * id
    }

    pub fn term_count(&self) -> usize {
        self.adv.len() + self.cyc2.len() + self.cyc4.len() + self.comm.len() + self.identity.len()
    }
}

/// Everything `total_loss` needs.
pub struct EvalInputs<'a> {
    pub manifest: &'a ConstraintManifest,
    pub maps: &'a dyn MapSource,
    pub critics: &'a dyn CriticSource,
    pub batches: &'a BTreeMap<NodeId, Tensor>,
    pub weights: &'a LossWeights,
    pub mode: GanMode,
    pub n_concepts: usize,
}

/// Breakdown plus the live objective tensors for backward.
#[derive(Debug)]
pub struct LossEval {
    pub breakdown: LossBreakdown,
    pub generator_objective: Tensor,
    pub discriminator_objective: Tensor,
}

type PathKey = (NodeId, Vec<(usize, bool)>);

struct PathCache<'a> {
    maps: &'a dyn MapSource,
    memo: HashMap<PathKey, Tensor>,
}

impl<'a> PathCache<'a> {
    /// Composition tree with prefix reuse: shared sub-paths of the cycle,
    /// commutativity, and adversarial terms are evaluated once.
    fn get(
        &mut self,
        anchor: NodeId,
        batch: &Tensor,
        steps: &[MapStep],
        tape: &Tape,
    ) -> crate::tensor::Result<Tensor> {
        if steps.is_empty() {
            return Ok(batch.clone());
        }
        let key: PathKey = (anchor, steps.iter().map(|s| (s.concept, s.forward)).collect());
        if let Some(t) = self.memo.get(&key) {
            return Ok(t.clone());
        }
        let prefix = self.get(anchor, batch, &steps[..steps.len() - 1], tape)?;
        let last = steps[steps.len() - 1];
        let out = self.maps.mapping(last.concept, last.forward).apply(&prefix, false, tape)?;
        self.memo.insert(key, out.clone());
        Ok(out)
    }
}

fn fold_sum(acc: Option<Tensor>, t: Tensor, tape: &Tape) -> crate::tensor::Result<Option<Tensor>> {
    Ok(Some(match acc {
        None => t,
        Some(a) => a.add(&t, tape)?,
    }))
}

/// Evaluate every manifest term (stage 0) and assemble both totals.
///
/// The generator objective is `sum(adv_g) + lambda*(cyc2+cyc4) +
/// mu*comm + identity_weight*identity`; ablation flags and a zero
/// identity weight remove their family from both the breakdown and the
/// total. The discriminator objective is the sum of the per-term
/// maximands.
pub fn total_loss(inputs: &EvalInputs, tape: &Tape) -> Result<LossEval> {
    let n = inputs.n_concepts;
    let label = |v: NodeId| node_label(v, n);

    for node in inputs.manifest.anchor_nodes() {
        if !inputs.batches.contains_key(&node) {
            return Err(LossError::MissingBatch { node: label(node) });
        }
    }

    let mut cache = PathCache { maps: inputs.maps, memo: HashMap::new() };
    let mut breakdown = LossBreakdown::default();
    let mut g_sum: Option<Tensor> = None;
    let mut d_sum: Option<Tensor> = None;

    for term in &inputs.manifest.adv {
        let real = &inputs.batches[&term.target];
        let source = &inputs.batches[&term.source];
        let fake = cache.get(term.source, source, &[term.step], tape)?;
        let critic = inputs
            .critics
            .critic(term.target)
            .ok_or_else(|| LossError::MissingCritic { node: label(term.target) })?;
        let name =
            format!("adv:{}>{}:{}", label(term.source), label(term.target), term.step.name());
        let (d_obj, g_obj) = adv_loss(critic, real, &fake, inputs.mode, &label(term.target), tape)?;
        breakdown.adv.push(AdvScalar {
            name,
            d_objective: d_obj.value(),
            g_objective: g_obj.value(),
        });
        d_sum = fold_sum(d_sum, d_obj, tape)?;
        g_sum = fold_sum(g_sum, g_obj, tape)?;
    }

    let mut cyc_sum: Option<Tensor> = None;
    for term in inputs.manifest.cyc2.iter().filter(|t| t.stage == 0) {
        let batch = &inputs.batches[&term.anchor];
        let back = cache.get(term.anchor, batch, &term.steps, tape)?;
        let res = mean_l1(&back, batch, tape)?;
        breakdown.cyc2.push(NamedScalar {
            name: format!("cyc2:{}:c{}", label(term.anchor), term.steps[0].concept + 1),
            value: res.value(),
        });
        cyc_sum = fold_sum(cyc_sum, res, tape)?;
    }

    if !inputs.weights.disable_cyc4 {
        for term in inputs.manifest.cyc4.iter().filter(|t| t.stage == 0) {
            let batch = &inputs.batches[&term.anchor];
            let cw = cache.get(term.anchor, batch, &term.clockwise, tape)?;
            let ccw = cache.get(term.anchor, batch, &term.counter, tape)?;
            let res = mean_l1(&cw, batch, tape)?.add(&mean_l1(&ccw, batch, tape)?, tape)?;
            breakdown.cyc4.push(NamedScalar {
                name: format!(
                    "cyc4:{}:c{}c{}",
                    label(term.anchor),
                    term.concepts.0 + 1,
                    term.concepts.1 + 1
                ),
                value: res.value(),
            });
            cyc_sum = fold_sum(cyc_sum, res, tape)?;
        }
    }

    let mut comm_sum: Option<Tensor> = None;
    if !inputs.weights.disable_comm {
        for term in inputs.manifest.comm.iter().filter(|t| t.stage == 0) {
            let batch = &inputs.batches[&term.anchor];
            let a = cache.get(term.anchor, batch, &term.first, tape)?;
            let b = cache.get(term.anchor, batch, &term.second, tape)?;
            let res = mean_l1(&a, &b, tape)?;
            breakdown.comm.push(NamedScalar {
                name: format!(
                    "comm:{}:c{}c{}",
                    label(term.anchor),
                    term.concepts.0 + 1,
                    term.concepts.1 + 1
                ),
                value: res.value(),
            });
            comm_sum = fold_sum(comm_sum, res, tape)?;
        }
    }

    let mut id_sum: Option<Tensor> = None;
    if inputs.weights.identity_weight != 0.0 {
        for term in inputs.manifest.identity.iter().filter(|t| t.stage == 0) {
            let batch = &inputs.batches[&term.node];
            let mut term_total: Option<Tensor> = None;
            for step in &term.steps {
                let y = cache.get(term.node, batch, std::slice::from_ref(step), tape)?;
                let res = mean_l1(&y, batch, tape)?;
                term_total = fold_sum(term_total, res, tape)?;
            }
            let total = term_total.expect("identity term has at least one mapping");
            breakdown.identity.push(NamedScalar {
                name: format!("id:{}", label(term.node)),
                value: total.value(),
            });
            id_sum = fold_sum(id_sum, total, tape)?;
        }
    }

    // Fixed assembly order keeps rounding deterministic:
    // adv + lambda*cyc + mu*comm + id_weight*identity.
    let mut g_total = g_sum.unwrap_or_else(|| Tensor::scalar(0.0));
    if let Some(cyc) = cyc_sum {
        g_total = g_total.add(&cyc.scale(inputs.weights.lambda_cyc, tape)?, tape)?;
    }
    if let Some(comm) = comm_sum {
        g_total = g_total.add(&comm.scale(inputs.weights.mu_comm, tape)?, tape)?;
    }
    if let Some(id) = id_sum {
        g_total = g_total.add(&id.scale(inputs.weights.identity_weight, tape)?, tape)?;
    }
    let d_total = d_sum.unwrap_or_else(|| Tensor::scalar(0.0));

    breakdown.total_generator = g_total.value();
    breakdown.total_discriminator = d_total.value();
    Ok(LossEval { breakdown, generator_objective: g_total, discriminator_objective: d_total })
}
