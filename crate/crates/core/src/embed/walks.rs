use rayon::prelude::*;

use crate::graph::CoClickGraph;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WalkParams {
    pub walks_per_node: usize,
    pub walk_length: usize,
    pub seed: u64,
    /// Ignore edge weights and step to a uniformly chosen neighbour.
    pub uniform: bool,
}

impl Default for WalkParams {
    fn default() -> Self {
        Self { walks_per_node: 10, walk_length: 40, seed: 0, uniform: false }
    }
}

/// Truncated random walks. Walks store indices into `nodes`.
#[derive(Clone, Debug, PartialEq)]
pub struct WalkCorpus {
    pub nodes: Vec<String>,
    pub walks: Vec<Vec<u32>>,
    pub params: WalkParams,
}

impl WalkCorpus {
    pub fn walk_keys(&self, i: usize) -> Vec<&str> {
        self.walks[i].iter().map(|&n| self.nodes[n as usize].as_str()).collect()
    }

    pub fn frequencies(&self) -> Vec<u64> {
        let mut freq = vec![0u64; self.nodes.len()];
        for w in &self.walks {
            for &n in w {
                freq[n as usize] += 1;
            }
        }
        freq
    }

    pub fn token_count(&self) -> usize {
        self.walks.iter().map(Vec::len).sum()
    }
}

/// Starts `walks_per_node` walks at every node (walk index outer, node order
/// inner). Each step picks a neighbour with probability proportional to the
/// edge weight using a draw keyed by (seed, node, walk index, step), so the
/// corpus does not depend on scheduling. Walks stop early at isolated nodes.
pub fn generate_walks(graph: &CoClickGraph, params: WalkParams) -> WalkCorpus {
    assert!(params.walks_per_node >= 1 && params.walk_length >= 1, "r and t must be >= 1");
    let (nodes, adj) = graph.adjacency();
    let cumulative: Vec<Vec<u64>> = adj
        .iter()
        .map(|nbrs| {
            let mut acc = 0;
            nbrs.iter()
                .map(|&(_, w)| {
                    acc += if params.uniform { 1 } else { w };
                    acc
                })
                .collect()
        })
        .collect();

    let n = nodes.len();
    let walks = (0..params.walks_per_node * n)
        .into_par_iter()
        .map(|job| {
            let (walk_idx, start) = (job / n, job % n);
            let mut walk = Vec::with_capacity(params.walk_length);
            let mut cur = start;
            walk.push(cur as u32);
            for step in 1..params.walk_length {
                let cum = &cumulative[cur];
                let Some(&total) = cum.last() else { break };
                let key = seed::derive(params.seed, &[start as u64, walk_idx as u64, step as u64]);
                let target = (seed::unit_f64(key) * total as f64) as u64;
                let k = cum.partition_point(|&c| c <= target).min(cum.len() - 1);
                cur = adj[cur][k].0;
                walk.push(cur as u32);
            }
            walk
        })
        .collect();
    WalkCorpus { nodes, walks, params }
}

/// (center, context) index pairs within a symmetric window of `window`.
pub fn context_pairs<T: Copy>(walk: &[T], window: usize) -> Vec<(T, T)> {
    assert!(window >= 1, "window must be >= 1");
    let mut out = Vec::new();
    for i in 0..walk.len() {
        let lo = i.saturating_sub(window);
        let hi = (i + window).min(walk.len() - 1);
        for j in lo..=hi {
            if j != i {
                out.push((walk[i], walk[j]));
            }
        }
    }
    out
}
