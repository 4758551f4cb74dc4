//! The n-concept hypercube of subdomains, observed-node bookkeeping,
//! layered inference planning, and enumeration of the loss constraints the
//! trainer assembles.
//!
//! Node ids are integers in `[0, 2^n)`: bit `k` is the binary state of
//! concept `k+1`. Applying concept `k` toggles bit `k`, through the
//! forward map when the bit goes 0 -> 1 and the inverse map otherwise.
//! Labels print bit 0 first, so for n=2 node 1 is "10" and node 2 is "01".

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = usize;

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("concept count must be between 1 and {max}, got {got}", max = MAX_CONCEPTS)]
    BadConceptCount { got: usize },
    #[error("observed set is empty")]
    NoObserved,
    #[error("node {node} out of range for {n} concepts")]
    NodeOutOfRange { node: NodeId, n: usize },
    #[error("concept {concept} is never toggled by the observed set (unlearnable)")]
    UnlearnableConcept { concept: usize },
}

pub const MAX_CONCEPTS: usize = 16;

/// Print a node as its bit string, bit 0 (concept 1) first.
pub fn node_label(node: NodeId, n: usize) -> String {
    (0..n).map(|k| if node >> k & 1 == 1 { '1' } else { '0' }).collect()
}

/// One mapping application: concept `k`, forward (`0 -> 1`) or inverse.
/// Serializes as its display name ("G1", "F2", ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MapStep {
    pub concept: usize,
    pub forward: bool,
}

impl Serialize for MapStep {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for MapStep {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        let mut chars = text.chars();
        let dir = chars.next();
        let forward = match dir {
            Some('G') => true,
            Some('F') => false,
            _ => return Err(serde::de::Error::custom(format!("bad mapping name '{text}'"))),
        };
        let concept: usize = chars
            .as_str()
            .parse::<usize>()
            .ok()
            .and_then(|v| v.checked_sub(1))
            .ok_or_else(|| serde::de::Error::custom(format!("bad mapping name '{text}'")))?;
        Ok(MapStep { concept, forward })
    }
}

impl MapStep {
    /// The step that toggles `concept` away from its state in `node`.
    pub fn toggle_from(node: NodeId, concept: usize) -> MapStep {
        MapStep { concept, forward: node >> concept & 1 == 0 }
    }

    pub fn inverse(self) -> MapStep {
        MapStep { concept: self.concept, forward: !self.forward }
    }

    pub fn apply_to(self, node: NodeId) -> NodeId {
        node ^ (1 << self.concept)
    }

    /// "G1", "F2", ... (concepts are 1-indexed in display form).
    pub fn name(self) -> String {
        format!("{}{}", if self.forward { 'G' } else { 'F' }, self.concept + 1)
    }
}

pub fn path_target(source: NodeId, steps: &[MapStep]) -> NodeId {
    steps.iter().fold(source, |v, s| s.apply_to(v))
}

/// The hypercube of `2^n` subdomains with its observed-node marking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptGraph {
    n: usize,
    observed: BTreeSet<NodeId>,
}

impl ConceptGraph {
    /// Rejects graphs where some concept has no observed node on one side
    /// of its toggle: that concept would be unlearnable.
    pub fn new(n: usize, observed: impl IntoIterator<Item = NodeId>) -> Result<ConceptGraph> {
        if n == 0 || n > MAX_CONCEPTS {
            return Err(GraphError::BadConceptCount { got: n });
        }
        let observed: BTreeSet<NodeId> = observed.into_iter().collect();
        if observed.is_empty() {
            return Err(GraphError::NoObserved);
        }
        for &node in &observed {
            if node >= 1 << n {
                return Err(GraphError::NodeOutOfRange { node, n });
            }
        }
        for concept in 0..n {
            let lo = observed.iter().any(|&v| v >> concept & 1 == 0);
            let hi = observed.iter().any(|&v| v >> concept & 1 == 1);
            if !lo || !hi {
                return Err(GraphError::UnlearnableConcept { concept });
            }
        }
        Ok(ConceptGraph { n, observed })
    }

    pub fn n_concepts(&self) -> usize {
        self.n
    }

    pub fn n_nodes(&self) -> usize {
        1 << self.n
    }

    pub fn observed(&self) -> &BTreeSet<NodeId> {
        &self.observed
    }

    pub fn is_observed(&self, node: NodeId) -> bool {
        self.observed.contains(&node)
    }

    pub fn unobserved(&self) -> Vec<NodeId> {
        (0..self.n_nodes()).filter(|v| !self.is_observed(*v)).collect()
    }

    pub fn label(&self, node: NodeId) -> String {
        node_label(node, self.n)
    }
}

// ── constraint manifest ────────────────────────────────────────────────

/// One adversarial term: fakes mapped from `source` are judged by the
/// discriminator at `target`. Both endpoints carry real data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdvTerm {
    pub source: NodeId,
    pub target: NodeId,
    pub step: MapStep,
}

/// Distance-2 cycle at `anchor`: apply the toggle, then its inverse.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cyc2Term {
    pub anchor: NodeId,
    pub via: NodeId,
    pub steps: [MapStep; 2],
    pub stage: usize,
}

/// Distance-4 cycle at `anchor` over a concept pair, both rotations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cyc4Term {
    pub anchor: NodeId,
    pub concepts: (usize, usize),
    pub clockwise: [MapStep; 4],
    pub counter: [MapStep; 4],
    pub stage: usize,
}

/// Commutativity at `anchor`: the two orders of a concept-pair shift.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommTerm {
    pub anchor: NodeId,
    pub concepts: (usize, usize),
    pub first: [MapStep; 2],
    pub second: [MapStep; 2],
    pub stage: usize,
}

/// Identity term at an observed node: every mapping whose target side
/// matches the node should leave its samples unchanged.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentityTerm {
    pub node: NodeId,
    pub steps: Vec<MapStep>,
    pub stage: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ConstraintManifest {
    pub adv: Vec<AdvTerm>,
    pub cyc2: Vec<Cyc2Term>,
    pub cyc4: Vec<Cyc4Term>,
    pub comm: Vec<CommTerm>,
    pub identity: Vec<IdentityTerm>,
}

impl ConstraintManifest {
    pub fn counts(&self) -> (usize, usize, usize, usize) {
        (self.adv.len(), self.cyc2.len(), self.cyc4.len(), self.comm.len())
    }

    /// Nodes at which real-data batches are needed (stage-0 anchors).
    pub fn anchor_nodes(&self) -> BTreeSet<NodeId> {
        let mut nodes = BTreeSet::new();
        for t in &self.adv {
            nodes.insert(t.source);
            nodes.insert(t.target);
        }
        nodes.extend(self.cyc2.iter().filter(|t| t.stage == 0).map(|t| t.anchor));
        nodes.extend(self.cyc4.iter().filter(|t| t.stage == 0).map(|t| t.anchor));
        nodes.extend(self.comm.iter().filter(|t| t.stage == 0).map(|t| t.anchor));
        nodes.extend(self.identity.iter().filter(|t| t.stage == 0).map(|t| t.node));
        nodes
    }
}

fn cyc4_for(anchor: NodeId, j: usize, k: usize, stage: usize) -> Cyc4Term {
    let sj = MapStep::toggle_from(anchor, j);
    let sk = MapStep::toggle_from(anchor, k);
    // Clockwise walks j, k, then undoes j, k in the same order; the
    // counter-rotation starts with k. Both traverse all four nodes of the
    // face spanned by the two concepts.
    Cyc4Term {
        anchor,
        concepts: (j, k),
        clockwise: [sj, sk, sj.inverse(), sk.inverse()],
        counter: [sk, sj, sk.inverse(), sj.inverse()],
        stage,
    }
}

fn terms_at_anchor(
    graph: &ConceptGraph,
    anchor: NodeId,
    stage: usize,
    manifest: &mut ConstraintManifest,
) {
    let n = graph.n_concepts();
    for concept in 0..n {
        let step = MapStep::toggle_from(anchor, concept);
        manifest.cyc2.push(Cyc2Term {
            anchor,
            via: step.apply_to(anchor),
            steps: [step, step.inverse()],
            stage,
        });
    }
    for j in 0..n {
        for k in j + 1..n {
            manifest.cyc4.push(cyc4_for(anchor, j, k, stage));
            let sj = MapStep::toggle_from(anchor, j);
            let sk = MapStep::toggle_from(anchor, k);
            manifest.comm.push(CommTerm {
                anchor,
                concepts: (j, k),
                first: [sj, sk],
                second: [sk, sj],
                stage,
            });
        }
    }
    manifest.identity.push(IdentityTerm {
        node: anchor,
        // The mapping into `anchor` along concept k: forward if the bit is
        // set (its target side is 1), inverse otherwise.
        steps: (0..n)
            .map(|k| MapStep { concept: k, forward: anchor >> k & 1 == 1 })
            .collect(),
        stage,
    });
}

/// All loss terms anchored at observed nodes: adversarial terms for every
/// ordered observed-adjacent pair, distance-2 cycles toward every
/// neighbor, distance-4 cycles and commutators for every concept pair,
/// and one identity term per observed node.
pub fn enumerate_constraints(graph: &ConceptGraph) -> ConstraintManifest {
    let mut manifest = ConstraintManifest::default();
    for &anchor in graph.observed() {
        for concept in 0..graph.n_concepts() {
            let step = MapStep::toggle_from(anchor, concept);
            let target = step.apply_to(anchor);
            if graph.is_observed(target) {
                manifest.adv.push(AdvTerm { source: anchor, target, step });
            }
        }
        terms_at_anchor(graph, anchor, 0, &mut manifest);
    }
    manifest
}

// ── inference planning ─────────────────────────────────────────────────

/// Layered inference order plus the constraints available at each stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferencePlan {
    pub layers: Vec<BTreeSet<NodeId>>,
    pub constraints: ConstraintManifest,
}

/// Layer the unobserved nodes by when they become inferable.
///
/// A node is inferable once some two-concept face containing it has its
/// other three corners available: that face is exactly the basic
/// four-vertex unit with one unobserved corner. Layer `l+1` treats layers
/// `<= l` as observed. Nodes the scheme never reaches stay unplanned.
pub fn plan_inference(graph: &ConceptGraph) -> InferencePlan {
    let n = graph.n_concepts();
    let mut available: BTreeSet<NodeId> = graph.observed().clone();
    let mut layers: Vec<BTreeSet<NodeId>> = Vec::new();

    loop {
        let mut next = BTreeSet::new();
        for v in 0..graph.n_nodes() {
            if available.contains(&v) {
                continue;
            }
            let inferable = (0..n).any(|j| {
                (j + 1..n).any(|k| {
                    let ej = 1 << j;
                    let ek = 1 << k;
                    available.contains(&(v ^ ej))
                        && available.contains(&(v ^ ek))
                        && available.contains(&(v ^ ej ^ ek))
                })
            });
            if inferable {
                next.insert(v);
            }
        }
        if next.is_empty() {
            break;
        }
        available.extend(next.iter().copied());
        layers.push(next);
    }

    // Stage-0 constraints anchor at truly observed nodes; each later stage
    // adds the terms anchored at that layer's nodes, treating earlier
    // layers as observed. Adversarial terms exist only where real data
    // backs a discriminator, so they stay stage-0.
    let mut constraints = enumerate_constraints(graph);
    if n >= 3 {
        for (i, layer) in layers.iter().enumerate() {
            for &anchor in layer {
                terms_at_anchor(graph, anchor, i + 1, &mut constraints);
            }
        }
    }

    InferencePlan { layers, constraints }
}

// ── composition paths ──────────────────────────────────────────────────

/// Every minimal-length concept-shift ordering from `source` to `target`:
/// the permutations of the differing concepts, each step directed by the
/// source-side bit. `source == target` yields the single empty path.
pub fn composition_paths(
    graph: &ConceptGraph,
    source: NodeId,
    target: NodeId,
) -> Vec<Vec<MapStep>> {
    let diff: Vec<usize> = (0..graph.n_concepts()).filter(|k| (source ^ target) >> k & 1 == 1).collect();
    let mut paths = Vec::new();
    let mut order = Vec::new();
    let mut used = vec![false; diff.len()];
    permute(&diff, &mut used, &mut order, &mut paths);
    paths
        .into_iter()
        .map(|concepts| {
            let mut node = source;
            concepts
                .into_iter()
                .map(|c| {
                    let step = MapStep::toggle_from(node, c);
                    node = step.apply_to(node);
                    step
                })
                .collect()
        })
        .collect()
}

fn permute(
    diff: &[usize],
    used: &mut [bool],
    order: &mut Vec<usize>,
    out: &mut Vec<Vec<usize>>,
) {
    if order.len() == diff.len() {
        out.push(order.clone());
        return;
    }
    for i in 0..diff.len() {
        if !used[i] {
            used[i] = true;
            order.push(diff[i]);
            permute(diff, used, order, out);
            order.pop();
            used[i] = false;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(nodes: &[NodeId]) -> BTreeSet<NodeId> {
        nodes.iter().copied().collect()
    }

    /// Independent layering oracle: recompute inferability from scratch
    /// each round by scanning every node/face pair.
    fn layer_oracle(n: usize, observed: &BTreeSet<NodeId>) -> Vec<BTreeSet<NodeId>> {
        let mut have = observed.clone();
        let mut layers = Vec::new();
        loop {
            let mut next = BTreeSet::new();
            for v in 0..1usize << n {
                if have.contains(&v) {
                    continue;
                }
                'faces: for j in 0..n {
                    for k in 0..n {
                        if j == k {
                            continue;
                        }
                        let corners = [v ^ (1 << j), v ^ (1 << k), v ^ (1 << j) ^ (1 << k)];
                        if corners.iter().all(|c| have.contains(c)) {
                            next.insert(v);
                            break 'faces;
                        }
                    }
                }
            }
            if next.is_empty() {
                return layers;
            }
            for &v in &next {
                have.insert(v);
            }
            layers.push(next);
        }
    }

    #[test]
    fn three_concepts_primary_then_secondary() {
        let g = ConceptGraph::new(3, [0, 1, 2, 4]).unwrap();
        let plan = plan_inference(&g);
        assert_eq!(plan.layers, vec![set(&[3, 5, 6]), set(&[7])]);
    }

    #[test]
    fn three_concepts_skewed_observed_set() {
        let g = ConceptGraph::new(3, [0, 4, 6, 7]).unwrap();
        let plan = plan_inference(&g);
        assert_eq!(plan.layers, vec![set(&[2, 5]), set(&[1, 3])]);
    }

    #[test]
    fn two_concepts_missing_joint_node() {
        let g = ConceptGraph::new(2, [0, 1, 2]).unwrap();
        let plan = plan_inference(&g);
        assert_eq!(plan.layers, vec![set(&[3])]);
    }

    #[test]
    fn fully_observed_cube_plans_nothing() {
        let g = ConceptGraph::new(3, 0..8).unwrap();
        let plan = plan_inference(&g);
        assert!(plan.layers.is_empty());
    }

    #[test]
    fn planner_matches_oracle_on_all_valid_subsets() {
        let n = 3;
        let mut checked = 0;
        for mask in 1u32..(1 << 8) {
            let observed: Vec<NodeId> = (0..8).filter(|v| mask >> v & 1 == 1).collect();
            let Ok(g) = ConceptGraph::new(n, observed.iter().copied()) else { continue };
            let plan = plan_inference(&g);
            assert_eq!(plan.layers, layer_oracle(n, g.observed()), "observed {observed:?}");
            checked += 1;
        }
        assert!(checked > 100, "only {checked} valid subsets");
    }

    #[test]
    fn unlearnable_concept_rejected() {
        // Concept 2 (bit 1) is never 1 in the observed set.
        assert!(matches!(
            ConceptGraph::new(2, [0, 1]),
            Err(GraphError::UnlearnableConcept { concept: 1 })
        ));
        assert!(matches!(ConceptGraph::new(2, []), Err(GraphError::NoObserved)));
        assert!(matches!(
            ConceptGraph::new(2, [0, 5]),
            Err(GraphError::NodeOutOfRange { node: 5, .. })
        ));
    }

    #[test]
    fn canonical_two_concept_counts() {
        let g = ConceptGraph::new(2, [0, 1, 2]).unwrap();
        let m = enumerate_constraints(&g);
        assert_eq!(m.counts(), (4, 6, 3, 3));
        assert_eq!(m.identity.len(), 3);
    }

    #[test]
    fn canonical_cyc2_directions() {
        // Both directions for the observed-observed pairs, forward-only
        // toward the missing node.
        let g = ConceptGraph::new(2, [0, 1, 2]).unwrap();
        let m = enumerate_constraints(&g);
        let pairs: Vec<(NodeId, NodeId)> = m.cyc2.iter().map(|t| (t.anchor, t.via)).collect();
        // anchor "00"=0, "10"=1, "01"=2, "11"=3
        assert!(pairs.contains(&(0, 1)) && pairs.contains(&(1, 0)), "both ways for (00,10)");
        assert!(pairs.contains(&(0, 2)) && pairs.contains(&(2, 0)), "both ways for (00,01)");
        assert!(pairs.contains(&(1, 3)) && pairs.contains(&(2, 3)), "forward into 11");
        assert!(!pairs.iter().any(|&(a, _)| a == 3), "nothing anchored at the missing node");
    }

    #[test]
    fn single_concept_degenerates_to_plain_cycle_pair() {
        let g = ConceptGraph::new(1, [0, 1]).unwrap();
        let m = enumerate_constraints(&g);
        assert_eq!(m.counts(), (2, 2, 0, 0));
    }

    /// Brute-force term counting on the 3-cube: closed 2-walks, proper
    /// 4-cycles through two distinct concepts, and commuting pairs, all
    /// anchored at observed nodes; adversarial terms are the ordered
    /// observed-adjacent pairs.
    #[test]
    fn three_concept_counts_match_exhaustive_search() {
        let g = ConceptGraph::new(3, [0, 1, 2, 4]).unwrap();
        let m = enumerate_constraints(&g);

        let obs = g.observed();
        let mut adv = 0;
        for &u in obs {
            for k in 0..3 {
                if obs.contains(&(u ^ (1 << k))) {
                    adv += 1;
                }
            }
        }
        let cyc2 = obs.len() * 3;
        let mut cyc4 = 0;
        let mut comm = 0;
        for &_u in obs {
            for j in 0..3 {
                for k in j + 1..3 {
                    let _ = (j, k);
                    cyc4 += 1;
                    comm += 1;
                }
            }
        }
        assert_eq!(m.counts(), (adv, cyc2, cyc4, comm));
        assert_eq!(m.counts(), (6, 12, 12, 12));
    }

    #[test]
    fn constraints_use_only_adjacent_mappings() {
        let g = ConceptGraph::new(3, [0, 1, 2, 4]).unwrap();
        let plan = plan_inference(&g);
        let m = &plan.constraints;
        let adjacent_walk = |start: NodeId, steps: &[MapStep]| {
            let mut v = start;
            for s in steps {
                let next = s.apply_to(v);
                assert_eq!((v ^ next).count_ones(), 1, "non-adjacent hop");
                v = next;
            }
            v
        };
        for t in &m.adv {
            assert_eq!(adjacent_walk(t.source, &[t.step]), t.target);
        }
        for t in &m.cyc2 {
            assert_eq!(adjacent_walk(t.anchor, &t.steps), t.anchor);
        }
        for t in &m.cyc4 {
            assert_eq!(adjacent_walk(t.anchor, &t.clockwise), t.anchor);
            assert_eq!(adjacent_walk(t.anchor, &t.counter), t.anchor);
            // Proper cycles visit four distinct nodes.
            let mut seen = BTreeSet::new();
            let mut v = t.anchor;
            for s in &t.clockwise {
                seen.insert(v);
                v = s.apply_to(v);
            }
            assert_eq!(seen.len(), 4);
        }
        for t in &m.comm {
            assert_eq!(
                adjacent_walk(t.anchor, &t.first),
                adjacent_walk(t.anchor, &t.second)
            );
        }
    }

    #[test]
    fn counts_are_permutation_equivariant() {
        // Relabeling concepts permutes the observed-node bits but never
        // changes any constraint count.
        let base: Vec<NodeId> = vec![0, 1, 2, 4, 6];
        let g = ConceptGraph::new(3, base.iter().copied()).unwrap();
        let counts = enumerate_constraints(&g).counts();
        for perm in [[0usize, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            let relabeled: Vec<NodeId> = base
                .iter()
                .map(|&v| (0..3).fold(0, |acc, k| acc | ((v >> k & 1) << perm[k])))
                .collect();
            let gp = ConceptGraph::new(3, relabeled).unwrap();
            assert_eq!(enumerate_constraints(&gp).counts(), counts);
        }
    }

    #[test]
    fn staged_terms_follow_layers() {
        let g = ConceptGraph::new(3, [0, 1, 2, 4]).unwrap();
        let plan = plan_inference(&g);
        let stages: BTreeSet<usize> = plan.constraints.cyc4.iter().map(|t| t.stage).collect();
        assert_eq!(stages, set(&[0, 1, 2]));
        for t in &plan.constraints.cyc4 {
            match t.stage {
                0 => assert!(g.is_observed(t.anchor)),
                s => assert!(plan.layers[s - 1].contains(&t.anchor)),
            }
        }
        assert!(plan.constraints.adv.iter().all(|t| {
            g.is_observed(t.source) && g.is_observed(t.target)
        }));
    }

    #[test]
    fn diagonal_paths_are_concept_permutations() {
        let g = ConceptGraph::new(2, [0, 1, 2]).unwrap();
        let paths = composition_paths(&g, 0, 3);
        assert_eq!(paths.len(), 2);
        let names: Vec<Vec<String>> =
            paths.iter().map(|p| p.iter().map(|s| s.name()).collect()).collect();
        assert!(names.contains(&vec!["G1".into(), "G2".into()]));
        assert!(names.contains(&vec!["G2".into(), "G1".into()]));

        let g3 = ConceptGraph::new(3, [0, 1, 2, 4]).unwrap();
        assert_eq!(composition_paths(&g3, 0, 7).len(), 6);
        assert_eq!(composition_paths(&g3, 0, 0), vec![Vec::new()]);
        // Directions flip with the source bits: from 7 every step inverts.
        let back = composition_paths(&g3, 7, 0);
        assert_eq!(back.len(), 6);
        assert!(back.iter().flatten().all(|s| !s.forward));
    }
}
