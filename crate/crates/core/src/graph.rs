//! Graph representation, split management, and masked weighted adjacency.
//!
//! A [`Graph`] is immutable after construction. Undirected edges are stored
//! once in canonical `(min, max)` order and weight lookups are symmetric.
//! [`SplitMask`] partitions edges or nodes into train/val/calib/test, and
//! [`MaskedWeights`] realizes the masked weighted adjacency that feeds the
//! models: true weights on training edges, a small constant `delta` on every
//! other edge, zero off the edge set.

use crate::nn::Matrix;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("edge ({0}, {1}) references a node out of range (n_nodes = {2})")]
    NodeOutOfRange(u32, u32, usize),
    #[error("self loop ({0}, {0}) is not allowed")]
    SelfLoop(u32),
    #[error("feature matrix has {got} rows, expected n_nodes = {want}")]
    FeatureRowMismatch { got: usize, want: usize },
    #[error("negative weight {weight} on edge ({src}, {dst})")]
    NegativeWeight { src: u32, dst: u32, weight: f64 },
    #[error("weights must cover exactly the edge set ({got} weights for {want} edges)")]
    WeightCountMismatch { got: usize, want: usize },
    #[error("labels must cover exactly the node set ({got} labels for {want} nodes)")]
    LabelCountMismatch { got: usize, want: usize },
    #[error("class label {label} out of range for {n_classes} classes")]
    ClassOutOfRange { label: u32, n_classes: usize },
    #[error("split ratios must be nonnegative and sum to 1 (got sum {0})")]
    BadRatios(f64),
    #[error("split bucket {0:?} is empty although its ratio is positive")]
    EmptySplitBucket(Phase),
    #[error("graph has no edge weights")]
    MissingWeights,
    #[error("graph has no node labels")]
    MissingLabels,
    #[error("split is over {got:?} targets, expected {want:?}")]
    SplitKindMismatch { got: TargetKind, want: TargetKind },
    #[error("delta must be positive (got {0})")]
    NonPositiveDelta(f64),
    #[error("dense materialization refused for {0} nodes (limit {1})")]
    TooLargeForDense(usize, usize),
}

/// Per-node labels: real-valued for regression, class ids for classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    Real(Vec<f64>),
    Class { labels: Vec<u32>, n_classes: usize },
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Real(v) => v.len(),
            Labels::Class { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Graph {
    n_nodes: usize,
    directed: bool,
    edges: Vec<(u32, u32)>,
    weights: Option<Vec<f64>>,
    features: Matrix,
    node_labels: Option<Labels>,
    #[serde(skip)]
    edge_index: HashMap<(u32, u32), usize>,
    #[serde(skip)]
    neighbors: Vec<Vec<u32>>,
}

/// Which objects a split (and a prediction task) ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Edges,
    Nodes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Train,
    Val,
    Calib,
    Test,
}

pub const PHASES: [Phase; 4] = [Phase::Train, Phase::Val, Phase::Calib, Phase::Test];

/// Build a graph, canonicalizing and deduplicating undirected edges.
///
/// Duplicate edges collapse to the first occurrence (including its weight).
/// Self loops are rejected.
pub fn build_graph(
    n_nodes: usize,
    edges: &[(u32, u32)],
    features: Matrix,
    weights: Option<&[f64]>,
    labels: Option<Labels>,
    directed: bool,
) -> Result<Graph, GraphError> {
    if features.rows() != n_nodes {
        return Err(GraphError::FeatureRowMismatch {
            got: features.rows(),
            want: n_nodes,
        });
    }
    if let Some(w) = weights {
        if w.len() != edges.len() {
            return Err(GraphError::WeightCountMismatch {
                got: w.len(),
                want: edges.len(),
            });
        }
    }
    if let Some(l) = &labels {
        if l.len() != n_nodes {
            return Err(GraphError::LabelCountMismatch {
                got: l.len(),
                want: n_nodes,
            });
        }
        if let Labels::Class { labels, n_classes } = l {
            if let Some(&bad) = labels.iter().find(|&&c| c as usize >= *n_classes) {
                return Err(GraphError::ClassOutOfRange {
                    label: bad,
                    n_classes: *n_classes,
                });
            }
        }
    }

    let mut canon_edges = Vec::with_capacity(edges.len());
    let mut canon_weights = weights.map(|_| Vec::with_capacity(edges.len()));
    let mut edge_index = HashMap::with_capacity(edges.len());
    for (pos, &(src, dst)) in edges.iter().enumerate() {
        if src as usize >= n_nodes || dst as usize >= n_nodes {
            return Err(GraphError::NodeOutOfRange(src, dst, n_nodes));
        }
        if src == dst {
            return Err(GraphError::SelfLoop(src));
        }
        let key = if directed || src <= dst {
            (src, dst)
        } else {
            (dst, src)
        };
        if edge_index.contains_key(&key) {
            continue; // dedup policy: keep first occurrence
        }
        if let Some(w) = weights {
            let weight = w[pos];
            if weight < 0.0 {
                return Err(GraphError::NegativeWeight {
                    src,
                    dst,
                    weight,
                });
            }
            canon_weights.as_mut().unwrap().push(weight);
        }
        edge_index.insert(key, canon_edges.len());
        canon_edges.push(key);
    }

    let mut neighbors = vec![Vec::new(); n_nodes];
    for &(src, dst) in &canon_edges {
        neighbors[src as usize].push(dst);
        if !directed {
            neighbors[dst as usize].push(src);
        }
    }
    for list in &mut neighbors {
        list.sort_unstable();
    }

    Ok(Graph {
        n_nodes,
        directed,
        edges: canon_edges,
        weights: canon_weights,
        features,
        node_labels: labels,
        edge_index,
        neighbors,
    })
}

impl Graph {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn directed(&self) -> bool {
        self.directed
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn node_labels(&self) -> Option<&Labels> {
        self.node_labels.as_ref()
    }

    pub fn neighbors(&self, node: u32) -> &[u32] {
        &self.neighbors[node as usize]
    }

    pub fn degree(&self, node: u32) -> usize {
        self.neighbors[node as usize].len()
    }

    /// Edge index for `(src, dst)`; symmetric for undirected graphs.
    pub fn edge_id(&self, src: u32, dst: u32) -> Option<usize> {
        let key = if self.directed || src <= dst {
            (src, dst)
        } else {
            (dst, src)
        };
        self.edge_index.get(&key).copied()
    }

    pub fn weight_of(&self, src: u32, dst: u32) -> Option<f64> {
        let id = self.edge_id(src, dst)?;
        self.weights.as_ref().map(|w| w[id])
    }

    /// Replace node labels (used by synthetic label generators).
    pub fn with_labels(mut self, labels: Labels) -> Result<Self, GraphError> {
        if labels.len() != self.n_nodes {
            return Err(GraphError::LabelCountMismatch {
                got: labels.len(),
                want: self.n_nodes,
            });
        }
        self.node_labels = Some(labels);
        Ok(self)
    }

    /// Replace edge weights (used by synthetic weight generators).
    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self, GraphError> {
        if weights.len() != self.edges.len() {
            return Err(GraphError::WeightCountMismatch {
                got: weights.len(),
                want: self.edges.len(),
            });
        }
        if let Some(&w) = weights.iter().find(|&&w| w < 0.0) {
            let (src, dst) = self.edges[weights.iter().position(|&x| x == w).unwrap()];
            return Err(GraphError::NegativeWeight { src, dst, weight: w });
        }
        self.weights = Some(weights);
        Ok(self)
    }

    /// Replace node features (used by synthetic label generators that plant
    /// class structure in feature space).
    pub fn with_features(mut self, features: Matrix) -> Result<Self, GraphError> {
        if features.rows() != self.n_nodes {
            return Err(GraphError::FeatureRowMismatch {
                got: features.rows(),
                want: self.n_nodes,
            });
        }
        self.features = features;
        Ok(self)
    }

    /// Heap bytes of the structural data (edges, weights, adjacency).
    pub fn heap_bytes(&self) -> usize {
        let mut total = self.edges.capacity() * std::mem::size_of::<(u32, u32)>();
        if let Some(w) = &self.weights {
            total += w.capacity() * std::mem::size_of::<f64>();
        }
        total += self.features.heap_bytes();
        total += self
            .neighbors
            .iter()
            .map(|v| v.capacity() * std::mem::size_of::<u32>())
            .sum::<usize>();
        total += self.edge_index.capacity()
            * (std::mem::size_of::<(u32, u32)>() + std::mem::size_of::<usize>());
        total
    }
}

/// Disjoint train/val/calib/test assignment over edges or nodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitMask {
    pub target_kind: TargetKind,
    assignment: Vec<Phase>,
    pub seed: u64,
}

impl SplitMask {
    pub fn assignment(&self) -> &[Phase] {
        &self.assignment
    }

    pub fn phase_of(&self, target: usize) -> Phase {
        self.assignment[target]
    }

    pub fn n_targets(&self) -> usize {
        self.assignment.len()
    }

    pub fn targets_in(&self, phase: Phase) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(i, &p)| (p == phase).then_some(i))
            .collect()
    }

    pub fn count(&self, phase: Phase) -> usize {
        self.assignment.iter().filter(|&&p| p == phase).count()
    }

    /// Reshuffle only the calib/test assignment, keeping train/val fixed.
    /// The calib:test proportion is preserved via largest-remainder rounding
    /// over the pooled calib+test targets.
    pub fn resplit_calib_test(&self, seed: u64) -> SplitMask {
        let pool: Vec<usize> = self
            .assignment
            .iter()
            .enumerate()
            .filter_map(|(i, &p)| matches!(p, Phase::Calib | Phase::Test).then_some(i))
            .collect();
        let n_calib = self.count(Phase::Calib);
        let mut order = pool.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fisher_yates(&mut order, &mut rng);
        let mut assignment = self.assignment.clone();
        for (rank, &target) in order.iter().enumerate() {
            assignment[target] = if rank < n_calib {
                Phase::Calib
            } else {
                Phase::Test
            };
        }
        SplitMask {
            target_kind: self.target_kind,
            assignment,
            seed,
        }
    }
}

fn fisher_yates<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Largest-remainder rounding of `total` into buckets proportional to
/// `ratios`. Guarantees the counts sum to `total` exactly.
fn largest_remainder_counts(total: usize, ratios: &[f64; 4]) -> [usize; 4] {
    let mut counts = [0usize; 4];
    let mut remainders = [(0.0f64, 0usize); 4];
    let mut assigned = 0usize;
    for (i, &r) in ratios.iter().enumerate() {
        let exact = r * total as f64;
        counts[i] = exact.floor() as usize;
        assigned += counts[i];
        remainders[i] = (exact - exact.floor(), i);
    }
    // Distribute leftovers to the largest fractional parts; ties go to the
    // earlier bucket (train, val, calib, test order).
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut leftover = total - assigned;
    let mut idx = 0;
    while leftover > 0 {
        counts[remainders[idx % 4].1] += 1;
        leftover -= 1;
        idx += 1;
    }
    counts
}

/// Partition the targets of `graph` into train/val/calib/test.
///
/// Counts follow largest-remainder rounding of the ratios; the assignment is
/// a seeded shuffle and is deterministic given `(graph, ratios, seed)`.
pub fn split_targets(
    graph: &Graph,
    kind: TargetKind,
    ratios: (f64, f64, f64, f64),
    seed: u64,
) -> Result<SplitMask, GraphError> {
    let ratios = [ratios.0, ratios.1, ratios.2, ratios.3];
    if ratios.iter().any(|&r| r < 0.0) {
        return Err(GraphError::BadRatios(ratios.iter().sum()));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(GraphError::BadRatios(sum));
    }
    let total = match kind {
        TargetKind::Edges => graph.n_edges(),
        TargetKind::Nodes => graph.n_nodes(),
    };
    let counts = largest_remainder_counts(total, &ratios);
    if total >= 4 {
        for (i, phase) in PHASES.iter().enumerate() {
            if ratios[i] > 0.0 && counts[i] == 0 {
                return Err(GraphError::EmptySplitBucket(*phase));
            }
        }
    }

    let mut order: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fisher_yates(&mut order, &mut rng);

    let mut assignment = vec![Phase::Train; total];
    let mut cursor = 0usize;
    for (i, phase) in PHASES.iter().enumerate() {
        for &target in &order[cursor..cursor + counts[i]] {
            assignment[target] = *phase;
        }
        cursor += counts[i];
    }

    Ok(SplitMask {
        target_kind: kind,
        assignment,
        seed,
    })
}

/// The masked weighted adjacency: `W_ij` on kept-phase edges, `delta` on all
/// other edges, zero on non-edges. Stored sparsely; dense materialization is
/// bounded so ablation-scale graphs stay in adjacency-list form.
#[derive(Debug, Clone)]
pub struct MaskedWeights {
    n_nodes: usize,
    directed: bool,
    delta: f64,
    entries: HashMap<(u32, u32), f64>,
}

pub const DENSE_NODE_LIMIT: usize = 10_000;

impl MaskedWeights {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Matrix entry; symmetric lookup for undirected graphs.
    pub fn get(&self, i: u32, j: u32) -> f64 {
        let key = if self.directed || i <= j { (i, j) } else { (j, i) };
        self.entries.get(&key).copied().unwrap_or(0.0)
    }

    /// All stored entries in canonical orientation.
    pub fn iter_entries(&self) -> impl Iterator<Item = ((u32, u32), f64)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }

    /// Entries expanded to both orientations for undirected graphs, ready to
    /// feed a message-passing operator.
    pub fn operator_entries(&self) -> Vec<(u32, u32, f64)> {
        let mut out = Vec::with_capacity(self.entries.len() * 2);
        for (&(i, j), &v) in &self.entries {
            out.push((i, j, v));
            if !self.directed {
                out.push((j, i, v));
            }
        }
        out.sort_unstable_by_key(|&(i, j, _)| (i, j));
        out
    }

    pub fn to_dense(&self) -> Result<Matrix, GraphError> {
        if self.n_nodes > DENSE_NODE_LIMIT {
            return Err(GraphError::TooLargeForDense(self.n_nodes, DENSE_NODE_LIMIT));
        }
        let mut m = Matrix::zeros(self.n_nodes, self.n_nodes);
        for (&(i, j), &v) in &self.entries {
            m.set(i as usize, j as usize, v);
            if !self.directed {
                m.set(j as usize, i as usize, v);
            }
        }
        Ok(m)
    }
}

/// Masked weights keeping true weights on training edges only.
pub fn mask_weights(
    graph: &Graph,
    split: &SplitMask,
    delta: f64,
) -> Result<MaskedWeights, GraphError> {
    mask_weights_for_phase(graph, split, delta, Phase::Train)
}

/// Generalization of [`mask_weights`]: true weights on `kept`-phase edges,
/// `delta` everywhere else on the edge set. The residual model consumes the
/// validation-kept variant.
pub fn mask_weights_for_phase(
    graph: &Graph,
    split: &SplitMask,
    delta: f64,
    kept: Phase,
) -> Result<MaskedWeights, GraphError> {
    let weights = graph.weights().ok_or(GraphError::MissingWeights)?;
    if split.target_kind != TargetKind::Edges {
        return Err(GraphError::SplitKindMismatch {
            got: split.target_kind,
            want: TargetKind::Edges,
        });
    }
    if delta <= 0.0 {
        return Err(GraphError::NonPositiveDelta(delta));
    }
    let mut entries = HashMap::with_capacity(graph.n_edges());
    for (id, &(i, j)) in graph.edges().iter().enumerate() {
        let value = if split.phase_of(id) == kept {
            weights[id]
        } else {
            delta
        };
        entries.insert((i, j), value);
    }
    Ok(MaskedWeights {
        n_nodes: graph.n_nodes(),
        directed: graph.directed(),
        delta,
        entries,
    })
}

/// Default masking constant: 1e-3 times the smallest positive training
/// weight, floored at 1e-6.
pub fn default_delta(graph: &Graph, split: &SplitMask) -> Result<f64, GraphError> {
    let weights = graph.weights().ok_or(GraphError::MissingWeights)?;
    if split.target_kind != TargetKind::Edges {
        return Err(GraphError::SplitKindMismatch {
            got: split.target_kind,
            want: TargetKind::Edges,
        });
    }
    let min_pos = weights
        .iter()
        .enumerate()
        .filter(|&(id, &w)| split.phase_of(id) == Phase::Train && w > 0.0)
        .map(|(_, &w)| w)
        .fold(f64::INFINITY, f64::min);
    if min_pos.is_finite() {
        Ok((min_pos * 1e-3).max(1e-6))
    } else {
        Ok(1e-6)
    }
}

/// Real labels kept on `phase` nodes, zero elsewhere, with a companion
/// validity mask so losses can ignore zeros that are genuine labels.
pub fn mask_labels(
    graph: &Graph,
    split: &SplitMask,
    phase: Phase,
) -> Result<(Vec<f64>, Vec<bool>), GraphError> {
    let labels = graph.node_labels().ok_or(GraphError::MissingLabels)?;
    if split.target_kind != TargetKind::Nodes {
        return Err(GraphError::SplitKindMismatch {
            got: split.target_kind,
            want: TargetKind::Nodes,
        });
    }
    let values: Vec<f64> = match labels {
        Labels::Real(v) => v.clone(),
        Labels::Class { labels, .. } => labels.iter().map(|&c| c as f64).collect(),
    };
    let mut masked = vec![0.0; values.len()];
    let mut mask = vec![false; values.len()];
    for (i, v) in values.into_iter().enumerate() {
        if split.phase_of(i) == phase {
            masked[i] = v;
            mask[i] = true;
        }
    }
    Ok((masked, mask))
}

/// One-hot labels kept on `phase` nodes (all-zero rows elsewhere), with the
/// companion validity mask.
pub fn mask_labels_onehot(
    graph: &Graph,
    split: &SplitMask,
    phase: Phase,
) -> Result<(Matrix, Vec<bool>), GraphError> {
    let labels = graph.node_labels().ok_or(GraphError::MissingLabels)?;
    if split.target_kind != TargetKind::Nodes {
        return Err(GraphError::SplitKindMismatch {
            got: split.target_kind,
            want: TargetKind::Nodes,
        });
    }
    let (class_labels, n_classes) = match labels {
        Labels::Class { labels, n_classes } => (labels, *n_classes),
        Labels::Real(_) => return Err(GraphError::MissingLabels),
    };
    let mut onehot = Matrix::zeros(class_labels.len(), n_classes);
    let mut mask = vec![false; class_labels.len()];
    for (i, &c) in class_labels.iter().enumerate() {
        if split.phase_of(i) == phase {
            onehot.set(i, c as usize, 1.0);
            mask[i] = true;
        }
    }
    Ok((onehot, mask))
}

pub fn onehot_labels(labels: &[u32], n_classes: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), n_classes);
    for (i, &c) in labels.iter().enumerate() {
        m.set(i, c as usize, 1.0);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeros(n: usize, f: usize) -> Matrix {
        Matrix::zeros(n, f)
    }

    #[test]
    fn minimal_graph_has_one_edge_and_unit_degrees() {
        let g = build_graph(2, &[(0, 1)], zeros(2, 1), None, None, false).unwrap();
        assert_eq!(g.n_edges(), 1);
        assert_eq!(g.degree(0), 1);
        assert_eq!(g.degree(1), 1);
    }

    #[test]
    fn undirected_duplicate_edges_dedup() {
        let g = build_graph(2, &[(0, 1), (1, 0)], zeros(2, 1), None, None, false).unwrap();
        assert_eq!(g.n_edges(), 1);
        assert_eq!(g.edges(), &[(0, 1)]);
    }

    #[test]
    fn out_of_range_node_rejected() {
        let err = build_graph(3, &[(0, 5)], zeros(3, 1), None, None, false).unwrap_err();
        assert!(matches!(err, GraphError::NodeOutOfRange(0, 5, 3)));
    }

    #[test]
    fn symmetric_weight_lookup() {
        let g = build_graph(3, &[(2, 0)], zeros(3, 1), Some(&[4.5]), None, false).unwrap();
        assert_eq!(g.weight_of(0, 2), Some(4.5));
        assert_eq!(g.weight_of(2, 0), Some(4.5));
    }

    #[test]
    fn split_counts_follow_paper_ratios() {
        let edges: Vec<(u32, u32)> = (0..100).map(|i| (i, (i + 1) % 101)).collect();
        let g = build_graph(101, &edges, zeros(101, 1), None, None, false).unwrap();
        let split = split_targets(&g, TargetKind::Edges, (0.3, 0.3, 0.2, 0.2), 7).unwrap();
        assert_eq!(split.count(Phase::Train), 30);
        assert_eq!(split.count(Phase::Val), 30);
        assert_eq!(split.count(Phase::Calib), 20);
        assert_eq!(split.count(Phase::Test), 20);
    }

    #[test]
    fn degenerate_ratio_puts_everything_in_train() {
        let g = build_graph(10, &[(0, 1)], zeros(10, 1), None, None, false).unwrap();
        let split = split_targets(&g, TargetKind::Nodes, (1.0, 0.0, 0.0, 0.0), 3).unwrap();
        assert_eq!(split.count(Phase::Train), 10);
    }

    #[test]
    fn split_is_deterministic() {
        let edges: Vec<(u32, u32)> = (0..50).map(|i| (i, i + 1)).collect();
        let g = build_graph(51, &edges, zeros(51, 1), None, None, false).unwrap();
        let a = split_targets(&g, TargetKind::Edges, (0.3, 0.3, 0.2, 0.2), 11).unwrap();
        let b = split_targets(&g, TargetKind::Edges, (0.3, 0.3, 0.2, 0.2), 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resplit_keeps_train_val_and_counts() {
        let edges: Vec<(u32, u32)> = (0..100).map(|i| (i, i + 1)).collect();
        let g = build_graph(101, &edges, zeros(101, 1), None, None, false).unwrap();
        let split = split_targets(&g, TargetKind::Edges, (0.3, 0.3, 0.2, 0.2), 5).unwrap();
        let re = split.resplit_calib_test(99);
        for (i, (&a, &b)) in split
            .assignment()
            .iter()
            .zip(re.assignment())
            .enumerate()
        {
            match a {
                Phase::Train | Phase::Val => assert_eq!(a, b, "target {i} moved out of train/val"),
                _ => assert!(matches!(b, Phase::Calib | Phase::Test)),
            }
        }
        assert_eq!(re.count(Phase::Calib), 20);
        assert_eq!(re.count(Phase::Test), 20);
    }

    #[test]
    fn masked_weights_match_three_case_definition() {
        let edges = [(0u32, 1u32), (1, 2), (2, 3), (0, 3)];
        let weights = [4.2, 1.0, 2.0, 3.0];
        let g = build_graph(4, &edges, zeros(4, 1), Some(&weights), None, false).unwrap();
        // Hand-built split: edge 0 train, edge 1 val, edge 2 calib, edge 3 test.
        let split = SplitMask {
            target_kind: TargetKind::Edges,
            assignment: vec![Phase::Train, Phase::Val, Phase::Calib, Phase::Test],
            seed: 0,
        };
        let mw = mask_weights(&g, &split, 0.01).unwrap();
        assert_eq!(mw.get(0, 1), 4.2);
        assert_eq!(mw.get(1, 2), 0.01);
        assert_eq!(mw.get(2, 3), 0.01);
        assert_eq!(mw.get(0, 3), 0.01);
        assert_eq!(mw.get(0, 2), 0.0); // non-edge
        assert_eq!(mw.get(1, 0), 4.2); // symmetric lookup
    }

    #[test]
    fn mask_weights_rejects_bad_delta_and_kind() {
        let g = build_graph(2, &[(0, 1)], zeros(2, 1), Some(&[1.0]), None, false).unwrap();
        let split = split_targets(&g, TargetKind::Edges, (1.0, 0.0, 0.0, 0.0), 0).unwrap();
        assert!(matches!(
            mask_weights(&g, &split, 0.0),
            Err(GraphError::NonPositiveDelta(_))
        ));
        let node_split = split_targets(&g, TargetKind::Nodes, (1.0, 0.0, 0.0, 0.0), 0).unwrap();
        assert!(matches!(
            mask_weights(&g, &node_split, 0.1),
            Err(GraphError::SplitKindMismatch { .. })
        ));
    }

    #[test]
    fn mask_labels_zeroes_other_phases() {
        let g = build_graph(
            3,
            &[(0, 1), (1, 2)],
            zeros(3, 1),
            None,
            Some(Labels::Real(vec![1.0, 2.0, 3.0])),
            false,
        )
        .unwrap();
        let split = SplitMask {
            target_kind: TargetKind::Nodes,
            assignment: vec![Phase::Train, Phase::Val, Phase::Train],
            seed: 0,
        };
        let (masked, mask) = mask_labels(&g, &split, Phase::Train).unwrap();
        assert_eq!(masked, vec![1.0, 0.0, 3.0]);
        assert_eq!(mask, vec![true, false, true]);
        let (masked_val, mask_val) = mask_labels(&g, &split, Phase::Val).unwrap();
        assert_eq!(masked_val, vec![0.0, 2.0, 0.0]);
        assert_eq!(mask_val, vec![false, true, false]);
    }

    #[test]
    fn mask_labels_empty_phase_is_all_zero() {
        let g = build_graph(
            2,
            &[(0, 1)],
            zeros(2, 1),
            None,
            Some(Labels::Real(vec![5.0, 6.0])),
            false,
        )
        .unwrap();
        let split = SplitMask {
            target_kind: TargetKind::Nodes,
            assignment: vec![Phase::Val, Phase::Val],
            seed: 0,
        };
        let (masked, mask) = mask_labels(&g, &split, Phase::Train).unwrap();
        assert!(masked.iter().all(|&v| v == 0.0));
        assert!(mask.iter().all(|&m| !m));
    }

    #[test]
    fn onehot_masking_for_classification() {
        let g = build_graph(
            3,
            &[(0, 1), (1, 2)],
            zeros(3, 1),
            None,
            Some(Labels::Class {
                labels: vec![2, 0, 1],
                n_classes: 3,
            }),
            false,
        )
        .unwrap();
        let split = SplitMask {
            target_kind: TargetKind::Nodes,
            assignment: vec![Phase::Train, Phase::Test, Phase::Train],
            seed: 0,
        };
        let (onehot, mask) = mask_labels_onehot(&g, &split, Phase::Train).unwrap();
        assert_eq!(onehot.row(0), &[0.0, 0.0, 1.0]);
        assert_eq!(onehot.row(1), &[0.0, 0.0, 0.0]);
        assert_eq!(onehot.row(2), &[0.0, 1.0, 0.0]);
        assert_eq!(mask, vec![true, false, true]);
    }

    #[test]
    fn default_delta_scales_with_min_train_weight() {
        let g = build_graph(
            3,
            &[(0, 1), (1, 2)],
            zeros(3, 1),
            Some(&[8.0, 2.0]),
            None,
            false,
        )
        .unwrap();
        let split = SplitMask {
            target_kind: TargetKind::Edges,
            assignment: vec![Phase::Train, Phase::Train],
            seed: 0,
        };
        let d = default_delta(&g, &split).unwrap();
        assert!((d - 2e-3).abs() < 1e-15);
    }

    #[test]
    fn dense_masked_weights_are_symmetric_for_undirected() {
        let edges = [(0u32, 1u32), (1, 2)];
        let g = build_graph(3, &edges, zeros(3, 1), Some(&[1.5, 2.5]), None, false).unwrap();
        let split = split_targets(&g, TargetKind::Edges, (0.5, 0.5, 0.0, 0.0), 2).unwrap();
        let dense = mask_weights(&g, &split, 0.01).unwrap().to_dense().unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(dense.get(i, j), dense.get(j, i));
            }
        }
    }
}
