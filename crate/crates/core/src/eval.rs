//! Oracle-based quantitative evaluation, zero-shot synthesis in
//! unobserved subdomains, concept composition across experiments, and
//! augmentation export.
//!
//! A [`MappingSet`] resolves each concept name to one forward/inverse
//! generator pair per source experiment; synthesis paths walk the lattice
//! applying the resolved mappings in inference mode. Evaluation is
//! read-only and deterministic given a checkpoint and test seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::data::{
    mix_seed, sample_subdomain, write_ppm, AttributeOracle, DataError, SubdomainDataset,
};
use crate::graph::{
    composition_paths, enumerate_constraints, node_label, ConceptGraph, GraphError, MapStep,
    NodeId,
};
use crate::losses::{MapSource, MappingBank};
use crate::nn::{build_generator, load_named_params, Generator, NnError};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::trainer::{Checkpoint, TrainConfig, TrainError};

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("concept '{name}' appears in several experiments but is not declared shared")]
    UndeclaredSharedConcept { name: String },
    #[error("shared concept '{name}' not found in any experiment")]
    UnknownSharedConcept { name: String },
    #[error("evaluation requires a synthetic dataset spec (exact oracle)")]
    NoOracle,
    #[error("node {node} out of range")]
    BadNode { node: NodeId },
    #[error("missing input files: {0:?}")]
    MissingInputs(Vec<PathBuf>),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

// ── mapping sets ───────────────────────────────────────────────────────

pub struct MappingPair {
    pub experiment: String,
    pub forward: Generator,
    pub inverse: Generator,
}

pub struct ConceptMappings {
    pub name: String,
    pub providers: Vec<MappingPair>,
}

/// Concept-name registry over one or more experiments' generators.
pub struct MappingSet {
    pub concepts: Vec<ConceptMappings>,
}

/// One hop of a synthesis path: which concept, which direction, and which
/// experiment provides the mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathStep {
    pub concept: usize,
    pub forward: bool,
    pub provider: usize,
}

impl PathStep {
    pub fn name(&self, set: &MappingSet) -> String {
        let c = &set.concepts[self.concept];
        let dir = if self.forward { "G" } else { "F" };
        if c.providers.len() > 1 {
            format!("{dir}[{}@{}]", c.name, c.providers[self.provider].experiment)
        } else {
            format!("{dir}[{}]", c.name)
        }
    }
}

/// Anything that can realize a path step on an image batch.
pub trait Synthesizer {
    fn n_concepts(&self) -> usize;
    fn apply_step(&self, step: &PathStep, x: &Tensor) -> crate::tensor::Result<Tensor>;
}

impl Synthesizer for MappingSet {
    fn n_concepts(&self) -> usize {
        self.concepts.len()
    }

    fn apply_step(&self, step: &PathStep, x: &Tensor) -> crate::tensor::Result<Tensor> {
        let pair = &self.concepts[step.concept].providers[step.provider];
        let net = if step.forward { &pair.forward } else { &pair.inverse };
        net.forward(x, true, &Tape::new())
    }
}

/// Stand-in synthesizer over a boxed mapping bank (single provider).
pub struct BankSynthesizer<'a> {
    pub bank: &'a MappingBank,
    pub n: usize,
}

impl Synthesizer for BankSynthesizer<'_> {
    fn n_concepts(&self) -> usize {
        self.n
    }

    fn apply_step(&self, step: &PathStep, x: &Tensor) -> crate::tensor::Result<Tensor> {
        self.bank.mapping(step.concept, step.forward).apply(x, true, &Tape::new())
    }
}

impl MappingSet {
    /// Load the generators of one experiment; the experiment id is the
    /// short config hash.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<MappingSet> {
        Self::compose(&[ckpt], &[])
    }

    /// Merge experiments into one registry. A concept name provided by
    /// more than one experiment must be declared in `shared`; it then
    /// keeps one provider per experiment.
    pub fn compose(checkpoints: &[&Checkpoint], shared: &[String]) -> Result<MappingSet> {
        let mut concepts: Vec<ConceptMappings> = Vec::new();
        for ckpt in checkpoints {
            let config = TrainConfig::from_json(&ckpt.config_json)?;
            let experiment: String = config.hash_hex()?[..8].to_string();
            let gen_cfg = config.generator_config();
            for (k, name) in config.concept_names.iter().enumerate() {
                let mut forward = build_generator(&gen_cfg, 0)?;
                let mut inverse = build_generator(&gen_cfg, 0)?;
                load_named_params(forward.named_params_mut(), &format!("G{}", k + 1), &ckpt.tensors)?;
                load_named_params(inverse.named_params_mut(), &format!("F{}", k + 1), &ckpt.tensors)?;
                let pair = MappingPair { experiment: experiment.clone(), forward, inverse };
                match concepts.iter_mut().find(|c| &c.name == name) {
                    Some(existing) => {
                        if !shared.contains(name) {
                            return Err(EvalError::UndeclaredSharedConcept { name: name.clone() });
                        }
                        existing.providers.push(pair);
                    }
                    None => {
                        concepts.push(ConceptMappings { name: name.clone(), providers: vec![pair] });
                    }
                }
            }
        }
        for name in shared {
            match concepts.iter().find(|c| &c.name == name) {
                Some(c) if c.providers.len() >= 2 => {}
                Some(_) => {
                    return Err(EvalError::UnknownSharedConcept { name: name.clone() });
                }
                None => return Err(EvalError::UnknownSharedConcept { name: name.clone() }),
            }
        }
        Ok(MappingSet { concepts })
    }

    pub fn concept_index(&self, name: &str) -> Option<usize> {
        self.concepts.iter().position(|c| c.name == name)
    }

    pub fn graph(&self, observed: impl IntoIterator<Item = NodeId>) -> Result<ConceptGraph> {
        Ok(ConceptGraph::new(self.concepts.len(), observed)?)
    }
}

/// Apply a synthesis path left to right; the empty path is the identity.
pub fn synthesize(
    s: &dyn Synthesizer,
    images: &Tensor,
    path: &[PathStep],
) -> crate::tensor::Result<Tensor> {
    let mut h = images.clone();
    for step in path {
        h = s.apply_step(step, &h)?;
    }
    Ok(h)
}

/// All minimal synthesis paths from `source` to `target`: every concept
/// ordering times every provider choice, `d! * prod(providers)` in total.
pub fn enumerate_paths(set: &MappingSet, source: NodeId, target: NodeId) -> Result<Vec<Vec<PathStep>>> {
    let n = set.concepts.len();
    if source >= 1 << n || target >= 1 << n {
        return Err(EvalError::BadNode { node: source.max(target) });
    }
    let graph = ConceptGraph::new(n, 0..1 << n)?;
    let orderings = composition_paths(&graph, source, target);
    let mut out = Vec::new();
    for ordering in orderings {
        expand_providers(set, &ordering, 0, &mut Vec::new(), &mut out);
    }
    Ok(out)
}

fn expand_providers(
    set: &MappingSet,
    ordering: &[MapStep],
    idx: usize,
    partial: &mut Vec<PathStep>,
    out: &mut Vec<Vec<PathStep>>,
) {
    if idx == ordering.len() {
        out.push(partial.clone());
        return;
    }
    let step = ordering[idx];
    for provider in 0..set.concepts[step.concept].providers.len() {
        partial.push(PathStep { concept: step.concept, forward: step.forward, provider });
        expand_providers(set, ordering, idx + 1, partial, out);
        partial.pop();
    }
}

/// The ascending-concept path with first providers, used as the canonical
/// synthesis route in reports.
pub fn canonical_path(source: NodeId, target: NodeId, n: usize) -> Vec<PathStep> {
    (0..n)
        .filter(|k| (source ^ target) >> k & 1 == 1)
        .scan(source, |node, k| {
            let step = MapStep::toggle_from(*node, k);
            *node = step.apply_to(*node);
            Some(PathStep { concept: k, forward: step.forward, provider: 0 })
        })
        .collect()
}

// ── quantitative evaluation ────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct JointAccuracy {
    /// Fraction with the correct bit for each concept, target-node truth.
    pub per_concept: Vec<f64>,
    /// Fraction correct on every concept simultaneously.
    pub joint: f64,
}

/// Synthesize `source_batch` into `target_node` along the canonical path
/// and score against the exact oracle.
pub fn eval_joint_accuracy(
    s: &dyn Synthesizer,
    oracle: &AttributeOracle,
    source_batch: &Tensor,
    source_node: NodeId,
    target_node: NodeId,
) -> Result<JointAccuracy> {
    let n = s.n_concepts();
    let path = canonical_path(source_node, target_node, n);
    let out = synthesize(s, source_batch, &path)?;
    Ok(score_batch(oracle, &out, target_node, n))
}

fn score_batch(oracle: &AttributeOracle, batch: &Tensor, truth: NodeId, n: usize) -> JointAccuracy {
    let b = batch.shape()[0];
    let per: usize = batch.shape()[1..].iter().product();
    let mut concept_hits = vec![0usize; n];
    let mut joint_hits = 0usize;
    for i in 0..b {
        let img = Tensor::new(
            batch.data()[i * per..(i + 1) * per].to_vec(),
            &batch.shape()[1..],
        )
        .expect("finite slice");
        let c = oracle.classify(&img);
        let mut all = true;
        for (k, hits) in concept_hits.iter_mut().enumerate() {
            if c.bits >> k & 1 == truth >> k & 1 {
                *hits += 1;
            } else {
                all = false;
            }
        }
        if all {
            joint_hits += 1;
        }
    }
    JointAccuracy {
        per_concept: concept_hits.iter().map(|&h| h as f64 / b as f64).collect(),
        joint: joint_hits as f64 / b as f64,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CycleReport {
    /// Mean distance-2 reconstruction L1 per anchor term.
    pub cyc2: BTreeMap<String, f64>,
    /// Mean distance-4 reconstruction L1 (both rotations summed) per term.
    pub cyc4: BTreeMap<String, f64>,
    /// Commutativity gap per anchor term.
    pub comm: BTreeMap<String, f64>,
}

/// Reconstruction and commutativity metrics of a mapping set on real
/// batches at the observed anchors.
pub fn eval_cycle_and_comm(
    s: &dyn Synthesizer,
    graph: &ConceptGraph,
    batches: &BTreeMap<NodeId, Tensor>,
) -> Result<CycleReport> {
    let manifest = enumerate_constraints(graph);
    let tape = Tape::new();
    let mut report = CycleReport {
        cyc2: BTreeMap::new(),
        cyc4: BTreeMap::new(),
        comm: BTreeMap::new(),
    };
    let run = |steps: &[MapStep], batch: &Tensor| -> crate::tensor::Result<Tensor> {
        let path: Vec<PathStep> = steps
            .iter()
            .map(|m| PathStep { concept: m.concept, forward: m.forward, provider: 0 })
            .collect();
        synthesize(s, batch, &path)
    };
    let mean_l1 = |a: &Tensor, b: &Tensor| -> crate::tensor::Result<f64> {
        Ok(a.sub(b, &tape)?.abs(&tape)?.mean_all(&tape)?.value())
    };
    for term in &manifest.cyc2 {
        let Some(batch) = batches.get(&term.anchor) else { continue };
        let back = run(&term.steps, batch)?;
        report.cyc2.insert(
            format!("{}:c{}", graph.label(term.anchor), term.steps[0].concept + 1),
            mean_l1(&back, batch)?,
        );
    }
    for term in &manifest.cyc4 {
        let Some(batch) = batches.get(&term.anchor) else { continue };
        let cw = run(&term.clockwise, batch)?;
        let ccw = run(&term.counter, batch)?;
        report.cyc4.insert(
            format!(
                "{}:c{}c{}",
                graph.label(term.anchor),
                term.concepts.0 + 1,
                term.concepts.1 + 1
            ),
            mean_l1(&cw, batch)? + mean_l1(&ccw, batch)?,
        );
    }
    for term in &manifest.comm {
        let Some(batch) = batches.get(&term.anchor) else { continue };
        let a = run(&term.first, batch)?;
        let b = run(&term.second, batch)?;
        report.comm.insert(
            format!(
                "{}:c{}c{}",
                graph.label(term.anchor),
                term.concepts.0 + 1,
                term.concepts.1 + 1
            ),
            mean_l1(&a, &b)?,
        );
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct Quantiles {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

fn quantiles(mut values: Vec<f64>) -> Quantiles {
    values.sort_by(f64::total_cmp);
    let pick = |q: f64| {
        if values.is_empty() {
            f64::NAN
        } else {
            values[((values.len() as f64 * q) as usize).min(values.len() - 1)]
        }
    };
    Quantiles { p50: pick(0.50), p90: pick(0.90), p99: pick(0.99) }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub test_seed: u64,
    pub test_samples: usize,
    pub source_node: String,
    pub target_node: String,
    /// Oracle accuracy on real source-domain test data (validation analog).
    pub validation_accuracy: f64,
    /// Per concept name, accuracy of synthesized target images.
    pub per_concept_accuracy: BTreeMap<String, f64>,
    pub joint_accuracy: f64,
    pub cycles: CycleReport,
    /// Nearest-template residual quantiles of the synthesized images.
    pub realism_residuals: Quantiles,
}

pub const TEST_SEED_TAG: u64 = 5000;

/// The held-out test-split seed for a config seed (disjoint from every
/// training stream).
pub fn test_seed(config_seed: u64) -> u64 {
    mix_seed(config_seed, TEST_SEED_TAG)
}

/// Full quantitative report for one checkpoint: accuracy of zero-shot
/// synthesis into the first unobserved node, cycle/commutativity
/// residuals at the observed anchors, realism residual quantiles.
pub fn evaluate_checkpoint(ckpt: &Checkpoint) -> Result<EvalReport> {
    let config = TrainConfig::from_json(&ckpt.config_json)?;
    let space = config.glyph_space().ok_or(EvalError::NoOracle)?;
    let oracle = AttributeOracle::build(&space)?;
    let graph = config.graph()?;
    let set = MappingSet::from_checkpoint(ckpt)?;
    let n = config.n_concepts;

    let test_seed = test_seed(config.train.seed);
    let count = config.eval.test_samples;
    let mut batches = BTreeMap::new();
    let mut test_sets: BTreeMap<NodeId, SubdomainDataset> = BTreeMap::new();
    for &node in graph.observed() {
        let ds = sample_subdomain(&space, node, count, test_seed)?;
        batches.insert(node, ds.full_batch()?);
        test_sets.insert(node, ds);
    }

    let source = *graph.observed().iter().next().expect("observed nonempty");
    let target = graph.unobserved().first().copied().unwrap_or((1 << n) - 1);

    let val = score_batch(&oracle, &batches[&source], source, n);
    let joint = eval_joint_accuracy(&set, &oracle, &batches[&source], source, target)?;
    let cycles = eval_cycle_and_comm(&set, &graph, &batches)?;

    let synth = synthesize(&set, &batches[&source], &canonical_path(source, target, n))?;
    let per: usize = synth.shape()[1..].iter().product();
    let residuals: Vec<f64> = (0..synth.shape()[0])
        .map(|i| {
            let img =
                Tensor::new(synth.data()[i * per..(i + 1) * per].to_vec(), &synth.shape()[1..])
                    .expect("finite");
            oracle.classify(&img).residual
        })
        .collect();

    Ok(EvalReport {
        config_hash: config.hash_hex()?,
        test_seed,
        test_samples: count,
        source_node: graph.label(source),
        target_node: graph.label(target),
        validation_accuracy: val.joint,
        per_concept_accuracy: config
            .concept_names
            .iter()
            .cloned()
            .zip(joint.per_concept.iter().copied())
            .collect(),
        joint_accuracy: joint.joint,
        cycles,
        realism_residuals: quantiles(residuals),
    })
}

// ── qualitative panels ─────────────────────────────────────────────────

fn stack_grid(stages: &[Tensor]) -> (Vec<f64>, usize, usize, usize) {
    let shape = stages[0].shape();
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let cols = stages.len();
    let (gh, gw) = (b * (h + 1) - 1, cols * (w + 1) - 1);
    let mut grid = vec![-1.0; c * gh * gw];
    for (col, stage) in stages.iter().enumerate() {
        for row in 0..b {
            for ch in 0..c {
                for y in 0..h {
                    let src_base = ((row * c + ch) * h + y) * w;
                    let dst_y = row * (h + 1) + y;
                    let dst_base = (ch * gh + dst_y) * gw + col * (w + 1);
                    grid[dst_base..dst_base + w]
                        .copy_from_slice(&stage.data()[src_base..src_base + w]);
                }
            }
        }
    }
    (grid, c, gh, gw)
}

/// The three qualitative panels for a two-concept mapping set, five
/// stages per row: clockwise cycle, counterclockwise cycle, and the two
/// composition orders.
pub fn export_panels(
    s: &dyn Synthesizer,
    source_batch: &Tensor,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let step = |c: usize, fwd: bool| PathStep { concept: c, forward: fwd, provider: 0 };
    let seq = |steps: &[PathStep]| -> crate::tensor::Result<Vec<Tensor>> {
        let mut stages = vec![source_batch.clone()];
        let mut h = source_batch.clone();
        for st in steps {
            h = s.apply_step(st, &h)?;
            stages.push(h.clone());
        }
        Ok(stages)
    };
    let clockwise = seq(&[step(0, true), step(1, true), step(0, false), step(1, false)])?;
    let counter = seq(&[step(1, true), step(0, true), step(1, false), step(0, false)])?;
    // commutative panel: x, G1 x, G2 x, G2 G1 x, G1 G2 x
    let g1 = s.apply_step(&step(0, true), source_batch)?;
    let g2 = s.apply_step(&step(1, true), source_batch)?;
    let g21 = s.apply_step(&step(1, true), &g1)?;
    let g12 = s.apply_step(&step(0, true), &g2)?;
    let commutative = vec![source_batch.clone(), g1, g2, g21, g12];

    std::fs::create_dir_all(dir).map_err(|e| DataError::Io { path: dir.to_path_buf(), source: e })?;
    let mut out = Vec::new();
    for (name, stages) in
        [("clockwise", clockwise), ("counterclockwise", counter), ("commutative", commutative)]
    {
        let (grid, c, gh, gw) = stack_grid(&stages);
        let path = dir.join(format!("panel_{name}.ppm"));
        write_ppm(&path, &grid, c, gh, gw)?;
        out.push(path);
    }
    Ok(out)
}

// ── augmentation export ────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct AugmentRecord {
    pub file: String,
    pub source: String,
    pub node: String,
}

/// For each probe image (assumed to live at `source_node`), write the
/// original plus one synthesized variant per requested node; returns the
/// manifest rows and writes `manifest.csv` alongside the images.
pub fn export_augmented(
    s: &dyn Synthesizer,
    probes: &[(String, Tensor)],
    source_node: NodeId,
    nodes: &[NodeId],
    dir: &Path,
) -> Result<Vec<AugmentRecord>> {
    let n = s.n_concepts();
    for &node in nodes {
        if node >= 1 << n {
            return Err(EvalError::BadNode { node });
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| DataError::Io { path: dir.to_path_buf(), source: e })?;
    let mut records = Vec::new();
    for (name, image) in probes {
        let stem = name.trim_end_matches(".ppm").trim_end_matches(".pgm");
        let batch = image.reshape(
            &[
                1,
                image.shape()[image.shape().len() - 3],
                image.shape()[image.shape().len() - 2],
                image.shape()[image.shape().len() - 1],
            ],
            &Tape::new(),
        )?;
        let orig_file = format!("{stem}_orig.ppm");
        write_one(&batch, &dir.join(&orig_file))?;
        records.push(AugmentRecord {
            file: orig_file,
            source: name.clone(),
            node: node_label(source_node, n),
        });
        for &node in nodes {
            let path = canonical_path(source_node, node, n);
            let out = synthesize(s, &batch, &path)?;
            let file = format!("{stem}_{}.ppm", node_label(node, n));
            write_one(&out, &dir.join(&file))?;
            records.push(AugmentRecord {
                file,
                source: name.clone(),
                node: node_label(node, n),
            });
        }
    }
    let mut csv = String::from("file,source,node\n");
    for r in &records {
        csv.push_str(&format!("{},{},{}\n", r.file, r.source, r.node));
    }
    let manifest_path = dir.join("manifest.csv");
    std::fs::write(&manifest_path, csv)
        .map_err(|e| DataError::Io { path: manifest_path.clone(), source: e })?;
    Ok(records)
}

fn write_one(batch: &Tensor, path: &Path) -> Result<()> {
    let s = batch.shape();
    Ok(write_ppm(path, batch.data(), s[1], s[2], s[3])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AttrKind, GlyphGrid, GlyphSpace};
    use crate::losses::{AffineMap, IdentityMap};
    use crate::nn::Mapping;
    use crate::trainer::{train, DatasetSpec, GeneratorNet, TrainConfig};

    fn identity_synth(n: usize) -> MappingBank {
        MappingBank {
            forward: (0..n).map(|_| Box::new(IdentityMap) as Box<dyn Mapping>).collect(),
            inverse: (0..n).map(|_| Box::new(IdentityMap) as Box<dyn Mapping>).collect(),
        }
    }

    fn tiny_trained(seed: u64, names: &[&str], attrs: Vec<AttrKind>) -> Checkpoint {
        let mut cfg = TrainConfig::desk_default(seed);
        cfg.n_concepts = names.len();
        cfg.concept_names = names.iter().map(|s| s.to_string()).collect();
        cfg.observed = (0..(1 << names.len()) - 1).collect();
        cfg.generator = GeneratorNet { base_filters: 2, n_residual_blocks: 2 };
        cfg.discriminator.base_filters = 2;
        cfg.dataset = DatasetSpec::Synthetic {
            image_size: 16,
            channels: 1,
            samples_per_node: 2,
            overrides: Default::default(),
            concept_attrs: attrs,
            fixed_attrs: Default::default(),
        };
        cfg.train.batch_size = 2;
        cfg.train.constant_epochs = 0;
        cfg.train.decay_epochs = 0;
        train(&cfg).unwrap().checkpoint
    }

    #[test]
    fn empty_path_is_identity_and_composition_associates() {
        let bank = identity_synth(2);
        let s = BankSynthesizer { bank: &bank, n: 2 };
        let x = Tensor::new(vec![0.1, -0.2, 0.3, 0.4], &[1, 1, 2, 2]).unwrap();
        let out = synthesize(&s, &x, &[]).unwrap();
        assert_eq!(out.data(), x.data());

        let bank2 = MappingBank {
            forward: vec![
                Box::new(AffineMap { scale: 2.0, offset: 0.5 }),
                Box::new(AffineMap { scale: 1.0, offset: -1.0 }),
            ],
            inverse: vec![
                Box::new(AffineMap { scale: 0.5, offset: -0.25 }),
                Box::new(AffineMap { scale: 1.0, offset: 1.0 }),
            ],
        };
        let s2 = BankSynthesizer { bank: &bank2, n: 2 };
        let p1 = vec![PathStep { concept: 0, forward: true, provider: 0 }];
        let p2 = vec![
            PathStep { concept: 1, forward: true, provider: 0 },
            PathStep { concept: 0, forward: false, provider: 0 },
        ];
        let joined: Vec<PathStep> = p1.iter().chain(&p2).copied().collect();
        let two_hops = synthesize(&s2, &synthesize(&s2, &x, &p1).unwrap(), &p2).unwrap();
        let one_shot = synthesize(&s2, &x, &joined).unwrap();
        assert!(two_hops
            .data()
            .iter()
            .zip(one_shot.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn composed_experiments_share_one_concept_twelve_paths() {
        let a = tiny_trained(1, &["shape", "style"], vec![AttrKind::Shape, AttrKind::Style]);
        let b = tiny_trained(2, &["style", "stripe"], vec![AttrKind::Style, AttrKind::Stripe]);
        let set = MappingSet::compose(&[&a, &b], &["style".into()]).unwrap();
        assert_eq!(set.concepts.len(), 3);
        assert_eq!(set.concepts[1].providers.len(), 2, "shared concept has two providers");
        let paths = enumerate_paths(&set, 0, 7).unwrap();
        assert_eq!(paths.len(), 12, "2 x 3! compositions");

        // single experiment, diagonal target
        let single = MappingSet::from_checkpoint(&a).unwrap();
        assert_eq!(enumerate_paths(&single, 0, 3).unwrap().len(), 2);
    }

    #[test]
    fn undeclared_collision_is_error() {
        let a = tiny_trained(3, &["shape", "style"], vec![AttrKind::Shape, AttrKind::Style]);
        let b = tiny_trained(4, &["style", "stripe"], vec![AttrKind::Style, AttrKind::Stripe]);
        assert!(matches!(
            MappingSet::compose(&[&a, &b], &[]),
            Err(EvalError::UndeclaredSharedConcept { .. })
        ));
        assert!(matches!(
            MappingSet::compose(&[&a], &["nonexistent".into()]),
            Err(EvalError::UnknownSharedConcept { .. })
        ));
    }

    #[test]
    fn four_disjoint_concepts_navigable() {
        // two disjoint 2-concept experiments span a 4-concept lattice
        let mk = |names: &[&str], seed| {
            // attrs irrelevant for path counting; reuse shape/style glyphs
            tiny_trained(seed, names, vec![AttrKind::Shape, AttrKind::Style])
        };
        let a = mk(&["c1", "c2"], 5);
        let b = mk(&["c3", "c4"], 6);
        let set = MappingSet::compose(&[&a, &b], &[]).unwrap();
        assert_eq!(set.concepts.len(), 4);
        let paths = enumerate_paths(&set, 0, 0b1111).unwrap();
        assert_eq!(paths.len(), 24, "4! orderings");
    }

    #[test]
    fn identity_mappings_fail_zero_shot_target() {
        let space = GlyphSpace::new(
            GlyphGrid::for_image_size(16, 1),
            vec![AttrKind::Shape, AttrKind::Style],
        );
        let oracle = AttributeOracle::build(&space).unwrap();
        let ds = sample_subdomain(&space, 0, 40, 99).unwrap();
        let bank = identity_synth(2);
        let s = BankSynthesizer { bank: &bank, n: 2 };
        let acc =
            eval_joint_accuracy(&s, &oracle, &ds.full_batch().unwrap(), 0, 3).unwrap();
        assert_eq!(acc.joint, 0.0, "unshifted attributes fail both tests");
        // joint <= every marginal
        for &m in &acc.per_concept {
            assert!(acc.joint <= m);
        }

        // target with one flipped bit: identity passes the untouched
        // concept, fails the flipped one; joint stays below both
        let acc1 = eval_joint_accuracy(&s, &oracle, &ds.full_batch().unwrap(), 0, 1).unwrap();
        assert_eq!(acc1.per_concept[0], 0.0);
        assert_eq!(acc1.per_concept[1], 1.0);
        assert_eq!(acc1.joint, 0.0);
    }

    #[test]
    fn oracle_validates_real_source_data() {
        let space = GlyphSpace::new(
            GlyphGrid::for_image_size(16, 1),
            vec![AttrKind::Shape, AttrKind::Style],
        );
        let oracle = AttributeOracle::build(&space).unwrap();
        let ds = sample_subdomain(&space, 0, 50, 7).unwrap();
        let bank = identity_synth(2);
        let s = BankSynthesizer { bank: &bank, n: 2 };
        // identity into the source node itself: everything matches
        let acc = eval_joint_accuracy(&s, &oracle, &ds.full_batch().unwrap(), 0, 0).unwrap();
        assert_eq!(acc.joint, 1.0);
    }

    #[test]
    fn cycle_report_zero_for_identity_mappings() {
        let space = GlyphSpace::new(
            GlyphGrid::for_image_size(16, 1),
            vec![AttrKind::Shape, AttrKind::Style],
        );
        let graph = ConceptGraph::new(2, [0, 1, 2]).unwrap();
        let mut batches = BTreeMap::new();
        for node in [0usize, 1, 2] {
            batches.insert(
                node,
                sample_subdomain(&space, node, 3, 1).unwrap().full_batch().unwrap(),
            );
        }
        let bank = identity_synth(2);
        let s = BankSynthesizer { bank: &bank, n: 2 };
        let report = eval_cycle_and_comm(&s, &graph, &batches).unwrap();
        assert_eq!(report.cyc2.len(), 6);
        assert_eq!(report.cyc4.len(), 3);
        assert_eq!(report.comm.len(), 3);
        assert!(report.cyc2.values().chain(report.cyc4.values()).chain(report.comm.values()).all(|&v| v == 0.0));
    }

    #[test]
    fn affine_cycle_report_matches_hand_values() {
        // same stand-ins as the loss-module oracle: cyc4 at anchor 00 is
        // 0.5 + 0.5, the commutator gap is 1
        let bank = MappingBank {
            forward: vec![
                Box::new(AffineMap { scale: 1.0, offset: 1.0 }),
                Box::new(AffineMap { scale: 2.0, offset: 0.0 }),
            ],
            inverse: vec![
                Box::new(AffineMap { scale: 1.0, offset: -1.0 }),
                Box::new(AffineMap { scale: 0.5, offset: 0.0 }),
            ],
        };
        let s = BankSynthesizer { bank: &bank, n: 2 };
        let graph = ConceptGraph::new(2, [0, 1, 2]).unwrap();
        let mut batches = BTreeMap::new();
        for node in [0usize, 1, 2] {
            batches.insert(node, Tensor::new(vec![1.0], &[1, 1, 1, 1]).unwrap());
        }
        let report = eval_cycle_and_comm(&s, &graph, &batches).unwrap();
        assert!((report.cyc4["00:c1c2"] - 1.0).abs() < 1e-12);
        assert!((report.comm["00:c1c2"] - 1.0).abs() < 1e-12);
        assert!(report.cyc2.values().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn evaluate_checkpoint_produces_deterministic_report() {
        let mut cfg = TrainConfig::desk_default(41);
        cfg.generator = GeneratorNet { base_filters: 2, n_residual_blocks: 2 };
        cfg.discriminator.base_filters = 2;
        if let DatasetSpec::Synthetic { samples_per_node, .. } = &mut cfg.dataset {
            *samples_per_node = 4;
        }
        cfg.train.batch_size = 2;
        cfg.train.constant_epochs = 1;
        cfg.train.decay_epochs = 0;
        cfg.eval.test_samples = 8;
        let ckpt = train(&cfg).unwrap().checkpoint;
        let a = evaluate_checkpoint(&ckpt).unwrap();
        let b = evaluate_checkpoint(&ckpt).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.validation_accuracy, 1.0, "oracle is exact on real data");
        assert_eq!(a.target_node, "11");
        assert!(a.joint_accuracy >= 0.0 && a.joint_accuracy <= 1.0);
        let min_marginal =
            a.per_concept_accuracy.values().fold(f64::INFINITY, |m, &v| m.min(v));
        assert!(a.joint_accuracy <= min_marginal + 1e-12);
    }

    #[test]
    fn panels_and_augmentation_exports() {
        let dir = tempfile::tempdir().unwrap();
        let space = GlyphSpace::new(
            GlyphGrid::for_image_size(16, 1),
            vec![AttrKind::Shape, AttrKind::Style],
        );
        let ds = sample_subdomain(&space, 0, 3, 11).unwrap();
        let bank = identity_synth(2);
        let s = BankSynthesizer { bank: &bank, n: 2 };

        let panels = export_panels(&s, &ds.full_batch().unwrap(), dir.path()).unwrap();
        assert_eq!(panels.len(), 3);
        for p in &panels {
            let (_, _, h, w) = crate::data::read_ppm(p).unwrap();
            assert_eq!(h, 3 * 17 - 1, "three rows");
            assert_eq!(w, 5 * 17 - 1, "five stages per row");
        }

        // two concepts: original + 3 nodes = 4 files per input
        let probes = vec![("probe.ppm".to_string(), ds.samples[0].0.clone())];
        let recs = export_augmented(&s, &probes, 0, &[1, 2, 3], dir.path()).unwrap();
        assert_eq!(recs.len(), 4);
        assert!(dir.path().join("probe_orig.ppm").is_file());
        assert!(dir.path().join("probe_11.ppm").is_file());
        assert!(dir.path().join("manifest.csv").is_file());

        // empty node list: originals only
        let recs = export_augmented(&s, &probes, 0, &[], dir.path()).unwrap();
        assert_eq!(recs.len(), 1);

        // three concepts: original + 7 = 8 files per input
        let bank3 = identity_synth(3);
        let s3 = BankSynthesizer { bank: &bank3, n: 3 };
        let nodes: Vec<NodeId> = (1..8).collect();
        let recs = export_augmented(&s3, &probes, 0, &nodes, dir.path()).unwrap();
        assert_eq!(recs.len(), 8);
    }
}
