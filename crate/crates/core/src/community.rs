//! Louvain community detection on the binary adjacency structure.
//!
//! Clustering looks only at graph structure (never labels or weights), so it
//! can safely run on the whole graph before any split-dependent work. Directed
//! graphs are symmetrized. A post-pass merges clusters whose calibration
//! support is too small to yield a finite conformal quantile.

use crate::graph::{Graph, SplitMask, TargetKind};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CommunityError {
    #[error("modularity undefined: graph has zero edges")]
    ZeroEdges,
    #[error("membership must assign every node (got {got} assignments for {want} nodes)")]
    PartialMembership { got: usize, want: usize },
}

/// Node-to-community map produced by Louvain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// membership[node] = cluster id in 0..k.
    pub membership: Vec<usize>,
    pub k: usize,
    /// Modularity of `membership` on the (symmetrized, binary) graph.
    pub modularity: f64,
    /// Modularity after each aggregation pass, in order.
    pub pass_modularity: Vec<f64>,
}

impl ClusterAssignment {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        for &c in &self.membership {
            sizes[c] += 1;
        }
        sizes
    }

    /// Cluster of an edge: the cluster of its source endpoint (the canonical
    /// lower endpoint for undirected graphs).
    pub fn cluster_of_edge(&self, src: u32, _dst: u32) -> usize {
        self.membership[src as usize]
    }

    /// Cluster of a split target (node id or edge id).
    pub fn cluster_of_target(&self, graph: &Graph, kind: TargetKind, target: usize) -> usize {
        match kind {
            TargetKind::Nodes => self.membership[target],
            TargetKind::Edges => {
                let (src, dst) = graph.edges()[target];
                self.cluster_of_edge(src, dst)
            }
        }
    }
}

/// Undirected simple-graph view used by modularity and Louvain: directed
/// edges symmetrized, duplicates collapsed.
fn undirected_edges(graph: &Graph) -> Vec<(u32, u32)> {
    let mut seen = HashSet::with_capacity(graph.n_edges());
    let mut out = Vec::with_capacity(graph.n_edges());
    for &(i, j) in graph.edges() {
        let key = if i <= j { (i, j) } else { (j, i) };
        if seen.insert(key) {
            out.push(key);
        }
    }
    out
}

/// Newman modularity of a total membership map on the binary adjacency.
///
/// Q = sum_c (L_c / m - (d_c / 2m)^2) with L_c the intra-cluster edge count
/// and d_c the total degree of cluster c.
pub fn modularity(graph: &Graph, membership: &[usize]) -> Result<f64, CommunityError> {
    if membership.len() != graph.n_nodes() {
        return Err(CommunityError::PartialMembership {
            got: membership.len(),
            want: graph.n_nodes(),
        });
    }
    let edges = undirected_edges(graph);
    if edges.is_empty() {
        return Err(CommunityError::ZeroEdges);
    }
    let m = edges.len() as f64;
    let n_clusters = membership.iter().copied().max().unwrap_or(0) + 1;
    let mut intra = vec![0.0f64; n_clusters];
    let mut degree = vec![0.0f64; n_clusters];
    for &(i, j) in &edges {
        let (ci, cj) = (membership[i as usize], membership[j as usize]);
        degree[ci] += 1.0;
        degree[cj] += 1.0;
        if ci == cj {
            intra[ci] += 1.0;
        }
    }
    let q = intra
        .iter()
        .zip(&degree)
        .map(|(&l_c, &d_c)| l_c / m - (d_c / (2.0 * m)).powi(2))
        .sum();
    Ok(q)
}

/// Working representation for Louvain: weighted adjacency lists that survive
/// aggregation (community self-loops carried as `self_loop`).
struct LevelGraph {
    n: usize,
    adj: Vec<Vec<(usize, f64)>>,
    self_loop: Vec<f64>,
    /// 2m, counting self loops twice.
    total_weight: f64,
}

impl LevelGraph {
    fn from_graph(graph: &Graph) -> Self {
        let n = graph.n_nodes();
        let mut adj = vec![Vec::new(); n];
        for &(i, j) in &undirected_edges(graph) {
            adj[i as usize].push((j as usize, 1.0));
            adj[j as usize].push((i as usize, 1.0));
        }
        let total_weight: f64 = adj.iter().map(|l| l.iter().map(|e| e.1).sum::<f64>()).sum();
        Self {
            n,
            adj,
            self_loop: vec![0.0; n],
            total_weight,
        }
    }

    fn degree(&self, v: usize) -> f64 {
        self.adj[v].iter().map(|e| e.1).sum::<f64>() + 2.0 * self.self_loop[v]
    }

    /// Collapse communities into super-nodes.
    fn aggregate(&self, node_to_comm: &[usize]) -> (LevelGraph, usize) {
        let mut relabel = HashMap::new();
        for &c in node_to_comm {
            let next = relabel.len();
            relabel.entry(c).or_insert(next);
        }
        let k = relabel.len();
        let mut adj_maps: Vec<HashMap<usize, f64>> = vec![HashMap::new(); k];
        let mut self_loop = vec![0.0f64; k];
        for v in 0..self.n {
            let cv = relabel[&node_to_comm[v]];
            self_loop[cv] += self.self_loop[v];
            for &(u, w) in &self.adj[v] {
                let cu = relabel[&node_to_comm[u]];
                if cv == cu {
                    // Each undirected intra edge visited from both ends.
                    self_loop[cv] += w / 2.0;
                } else {
                    *adj_maps[cv].entry(cu).or_insert(0.0) += w;
                }
            }
        }
        let adj: Vec<Vec<(usize, f64)>> = adj_maps
            .into_iter()
            .map(|m| {
                let mut list: Vec<(usize, f64)> = m.into_iter().collect();
                list.sort_unstable_by_key(|e| e.0);
                list
            })
            .collect();
        (
            LevelGraph {
                n: k,
                adj,
                self_loop,
                total_weight: self.total_weight,
            },
            k,
        )
    }

    fn modularity_of(&self, comm: &[usize]) -> f64 {
        let two_m = self.total_weight;
        let n_comm = comm.iter().copied().max().unwrap_or(0) + 1;
        let mut intra2 = vec![0.0f64; n_comm]; // twice intra weight
        let mut deg = vec![0.0f64; n_comm];
        for v in 0..self.n {
            let cv = comm[v];
            deg[cv] += self.degree(v);
            intra2[cv] += 2.0 * self.self_loop[v];
            for &(u, w) in &self.adj[v] {
                if comm[u] == cv {
                    intra2[cv] += w;
                }
            }
        }
        intra2
            .iter()
            .zip(&deg)
            .map(|(&i2, &d)| i2 / two_m - (d / two_m).powi(2))
            .sum()
    }
}

const PASS_GAIN_THRESHOLD: f64 = 1e-7;

/// Louvain clustering with a seeded, deterministic node visiting order.
///
/// Local moves and aggregation repeat until the per-pass modularity gain
/// drops to the threshold. Per-pass modularity is recorded so callers can
/// check it never decreases.
pub fn louvain(graph: &Graph, seed: u64) -> Result<ClusterAssignment, CommunityError> {
    if undirected_edges(graph).is_empty() {
        return Err(CommunityError::ZeroEdges);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut level = LevelGraph::from_graph(graph);
    // membership_chain[l] maps level-l nodes to level-(l+1) nodes.
    let mut membership: Vec<usize> = (0..graph.n_nodes()).collect();
    let mut pass_modularity = Vec::new();
    let mut current_q = level.modularity_of(&(0..level.n).collect::<Vec<_>>());

    loop {
        let comm = local_moves(&level, &mut rng);
        let q = level.modularity_of(&comm);
        pass_modularity.push(q);
        let improved = q - current_q > PASS_GAIN_THRESHOLD;
        // Fold this level's assignment into the global membership.
        let (next, k) = level.aggregate(&comm);
        let mut relabel = HashMap::new();
        for &c in &comm {
            let next_id = relabel.len();
            relabel.entry(c).or_insert(next_id);
        }
        for slot in membership.iter_mut() {
            *slot = relabel[&comm[*slot]];
        }
        if !improved || k == level.n {
            current_q = q;
            break;
        }
        current_q = q;
        level = next;
    }

    let k = membership.iter().copied().max().unwrap_or(0) + 1;
    let q = modularity(graph, &membership)?;
    debug_assert!((q - current_q).abs() < 1e-9);
    Ok(ClusterAssignment {
        membership,
        k,
        modularity: q,
        pass_modularity,
    })
}

/// One pass of local moves: each node greedily joins the neighbor community
/// with the largest modularity gain, sweeping in a shuffled order until no
/// move helps.
fn local_moves(level: &LevelGraph, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = level.n;
    let two_m = level.total_weight;
    let mut comm: Vec<usize> = (0..n).collect();
    let mut comm_degree: Vec<f64> = (0..n).map(|v| level.degree(v)).collect();

    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }

    loop {
        let mut moved = false;
        for &v in &order {
            let kv = level.degree(v);
            let own = comm[v];

            // Sum of edge weights from v to each adjacent community.
            let mut weights_to: HashMap<usize, f64> = HashMap::new();
            for &(u, w) in &level.adj[v] {
                *weights_to.entry(comm[u]).or_insert(0.0) += w;
            }

            comm_degree[own] -= kv;
            let base = weights_to.get(&own).copied().unwrap_or(0.0)
                - comm_degree[own] * kv / two_m;

            let mut best_comm = own;
            let mut best_gain = base;
            let mut candidates: Vec<(usize, f64)> = weights_to.into_iter().collect();
            candidates.sort_unstable_by_key(|c| c.0);
            for (c, w_to) in candidates {
                if c == own {
                    continue;
                }
                let gain = w_to - comm_degree[c] * kv / two_m;
                if gain > best_gain + 1e-12 {
                    best_gain = gain;
                    best_comm = c;
                }
            }
            comm_degree[best_comm] += kv;
            if best_comm != own {
                comm[v] = best_comm;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    comm
}

/// Relabel cluster ids to be contiguous from 0, ordered by first appearance.
fn relabel_contiguous(membership: &mut [usize]) -> usize {
    let mut relabel = HashMap::new();
    for slot in membership.iter_mut() {
        let next = relabel.len();
        *slot = *relabel.entry(*slot).or_insert(next);
    }
    relabel.len()
}

/// Merge clusters whose calibration-target count falls below
/// `min_cluster_calib` into their highest-modularity-gain neighbor cluster.
///
/// `calib_counts[c]` is the number of calibration targets mapped to cluster
/// `c`. Clusters with no adjacent cluster fall back to the cluster holding
/// the most calibration targets. Collapses to one global cluster at worst.
pub fn merge_small_clusters(
    graph: &Graph,
    assignment: &ClusterAssignment,
    calib_counts: &[usize],
    min_cluster_calib: usize,
) -> Result<ClusterAssignment, CommunityError> {
    assert_eq!(calib_counts.len(), assignment.k, "one count per cluster");
    let mut membership = assignment.membership.clone();
    // Cluster ids stay sparse while merging; compacted once at the end.
    let mut counts: BTreeMap<usize, usize> = calib_counts
        .iter()
        .enumerate()
        .map(|(c, &n)| (c, n))
        .collect();
    let edges = undirected_edges(graph);

    loop {
        if counts.len() <= 1 {
            break;
        }
        // Smallest offending cluster; ties to the lowest id.
        let victim = match counts
            .iter()
            .filter(|&(_, &n)| n < min_cluster_calib)
            .min_by_key(|&(&c, &n)| (n, c))
            .map(|(&c, _)| c)
        {
            Some(c) => c,
            None => break,
        };

        let mut neighbor_clusters = std::collections::BTreeSet::new();
        for &(i, j) in &edges {
            let (ci, cj) = (membership[i as usize], membership[j as usize]);
            if ci == victim && cj != victim {
                neighbor_clusters.insert(cj);
            }
            if cj == victim && ci != victim {
                neighbor_clusters.insert(ci);
            }
        }

        let target = if neighbor_clusters.is_empty() {
            // Isolated community: fold into the best-supported cluster.
            counts
                .iter()
                .filter(|&(&c, _)| c != victim)
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(&c, _)| c)
                .unwrap()
        } else {
            let mut best = *neighbor_clusters.iter().next().unwrap();
            let mut best_q = f64::NEG_INFINITY;
            for &c in &neighbor_clusters {
                let mut trial = membership.clone();
                for slot in trial.iter_mut() {
                    if *slot == victim {
                        *slot = c;
                    }
                }
                let q = modularity(graph, &trial)?;
                if q > best_q + 1e-12 {
                    best_q = q;
                    best = c;
                }
            }
            best
        };

        for slot in membership.iter_mut() {
            if *slot == victim {
                *slot = target;
            }
        }
        let folded = counts.remove(&victim).unwrap();
        *counts.get_mut(&target).unwrap() += folded;
    }

    let k = relabel_contiguous(&mut membership);
    let q = modularity(graph, &membership)?;
    Ok(ClusterAssignment {
        membership,
        k,
        modularity: q,
        pass_modularity: assignment.pass_modularity.clone(),
    })
}

/// Count calibration targets per cluster for the given split.
pub fn calib_counts_per_cluster(
    graph: &Graph,
    split: &SplitMask,
    assignment: &ClusterAssignment,
) -> Vec<usize> {
    let mut counts = vec![0usize; assignment.k];
    for target in split.targets_in(crate::graph::Phase::Calib) {
        counts[assignment.cluster_of_target(graph, split.target_kind, target)] += 1;
    }
    counts
}

/// Louvain followed by calibration-aware merging: the end-to-end Mondrian
/// partition used by the conformal pipeline.
pub fn mondrian_clusters(
    graph: &Graph,
    split: &SplitMask,
    seed: u64,
    min_cluster_calib: usize,
) -> Result<ClusterAssignment, CommunityError> {
    let raw = louvain(graph, seed)?;
    let counts = calib_counts_per_cluster(graph, split, &raw);
    merge_small_clusters(graph, &raw, &counts, min_cluster_calib)
}

/// A single global cluster (non-Mondrian calibration).
pub fn single_cluster(graph: &Graph) -> ClusterAssignment {
    let q = modularity(graph, &vec![0; graph.n_nodes()]).unwrap_or(0.0);
    ClusterAssignment {
        membership: vec![0; graph.n_nodes()],
        k: 1,
        modularity: q,
        pass_modularity: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;
    use crate::nn::Matrix;

    fn graph_from(edges: &[(u32, u32)], n: usize) -> Graph {
        build_graph(n, edges, Matrix::zeros(n, 1), None, None, false).unwrap()
    }

    #[test]
    fn k2_single_cluster_has_zero_modularity() {
        let g = graph_from(&[(0, 1)], 2);
        let q = modularity(&g, &[0, 0]).unwrap();
        assert!(q.abs() < 1e-12);
    }

    #[test]
    fn two_disjoint_edges_split_by_component_gives_half() {
        let g = graph_from(&[(0, 1), (2, 3)], 4);
        let q = modularity(&g, &[0, 0, 1, 1]).unwrap();
        assert!((q - 0.5).abs() < 1e-12);
    }

    #[test]
    fn k2_split_clusters_give_minus_half() {
        let g = graph_from(&[(0, 1)], 2);
        let q = modularity(&g, &[0, 1]).unwrap();
        assert!((q + 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_edge_graph_is_rejected() {
        let g = graph_from(&[], 3);
        assert!(matches!(
            modularity(&g, &[0, 0, 0]),
            Err(CommunityError::ZeroEdges)
        ));
        assert!(matches!(louvain(&g, 0), Err(CommunityError::ZeroEdges)));
    }

    fn two_cliques(clique: usize) -> Graph {
        let mut edges = Vec::new();
        for a in 0..clique as u32 {
            for b in (a + 1)..clique as u32 {
                edges.push((a, b));
                edges.push((a + clique as u32, b + clique as u32));
            }
        }
        edges.push((0, clique as u32)); // bridge
        graph_from(&edges, 2 * clique)
    }

    #[test]
    fn louvain_recovers_two_cliques() {
        let g = two_cliques(10);
        let assign = louvain(&g, 42).unwrap();
        assert_eq!(assign.k, 2);
        let first = assign.membership[0];
        assert!(assign.membership[..10].iter().all(|&c| c == first));
        let second = assign.membership[10];
        assert_ne!(first, second);
        assert!(assign.membership[10..].iter().all(|&c| c == second));
    }

    #[test]
    fn louvain_is_deterministic_per_seed() {
        // Ring lattice WS(n=20, k=4, beta=0).
        let mut edges = Vec::new();
        for i in 0..20u32 {
            edges.push((i, (i + 1) % 20));
            edges.push((i, (i + 2) % 20));
        }
        let g = graph_from(&edges, 20);
        let a = louvain(&g, 7).unwrap();
        let b = louvain(&g, 7).unwrap();
        assert_eq!(a.membership, b.membership);
    }

    #[test]
    fn pass_modularity_is_non_decreasing() {
        let g = two_cliques(8);
        let assign = louvain(&g, 3).unwrap();
        for w in assign.pass_modularity.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "modularity decreased across passes");
        }
    }

    #[test]
    fn permutation_covariance_on_two_cliques() {
        let g = two_cliques(6);
        let assign = louvain(&g, 15).unwrap();
        // Relabel nodes with a fixed permutation (reverse order).
        let n = g.n_nodes() as u32;
        let perm: Vec<u32> = (0..n).rev().collect();
        let edges: Vec<(u32, u32)> = g
            .edges()
            .iter()
            .map(|&(a, b)| (perm[a as usize], perm[b as usize]))
            .collect();
        let permuted = graph_from(&edges, n as usize);
        let assign_p = louvain(&permuted, 15).unwrap();
        // Identical up to cluster relabeling: co-membership must agree.
        for a in 0..n as usize {
            for b in 0..n as usize {
                let together = assign.membership[a] == assign.membership[b];
                let together_p =
                    assign_p.membership[perm[a] as usize] == assign_p.membership[perm[b] as usize];
                assert_eq!(together, together_p);
            }
        }
    }

    #[test]
    fn merge_folds_small_cluster_into_neighbor() {
        let g = two_cliques(5);
        let assign = louvain(&g, 1).unwrap();
        assert_eq!(assign.k, 2);
        // Pretend cluster of node 0 has no calibration support.
        let c0 = assign.membership[0];
        let mut counts = vec![100; assign.k];
        counts[c0] = 0;
        let merged = merge_small_clusters(&g, &assign, &counts, 5).unwrap();
        assert_eq!(merged.k, 1);
        assert!((merged.modularity - modularity(&g, &merged.membership).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn merge_keeps_large_clusters_untouched() {
        let g = two_cliques(5);
        let assign = louvain(&g, 1).unwrap();
        let counts = vec![50; assign.k];
        let merged = merge_small_clusters(&g, &assign, &counts, 5).unwrap();
        assert_eq!(merged.k, assign.k);
        assert_eq!(merged.membership, assign.membership);
    }
}
