//! Virtual IDs: k-means clusters of node embeddings, and their mapping back
//! to top categories.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::EmbeddingTable;
use crate::graph::Level;
use crate::pvlog::PvRecord;
use crate::seed;

#[derive(Debug, Error)]
pub enum VidError {
    #[error("invalid K = {0}")]
    InvalidK(usize),
    #[error("empty embedding table")]
    EmptyTable,
    #[error("malformed file: {0}")]
    Format(String),
}

/// Default K for leaf-category graphs.
pub const LEAF_DEFAULT_K: usize = 100;

/// Desk-scale default K for item graphs.
pub fn item_default_k(node_count: usize) -> usize {
    16.max(node_count / 20)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VirtualIdAssignment {
    pub level: Level,
    pub k: usize,
    /// Sorted node keys; `labels[i]` is the Virtual ID of `nodes[i]`.
    pub nodes: Vec<String>,
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
}

impl VirtualIdAssignment {
    pub fn get(&self, node: &str) -> Option<usize> {
        self.nodes.binary_search_by(|n| n.as_str().cmp(node)).ok().map(|i| self.labels[i])
    }

    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// JSON lines `{"node":..,"vid":..}`.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for (n, l) in self.nodes.iter().zip(&self.labels) {
            s.push_str(&serde_json::json!({"node": n, "vid": l}).to_string());
            s.push('\n');
        }
        s
    }

    /// Reads an assignment file. Centroids are not persisted and come back
    /// empty; `k` is one past the largest id.
    pub fn from_jsonl(text: &str, level: Level) -> Result<Self, VidError> {
        #[derive(Deserialize)]
        struct Row {
            node: String,
            vid: usize,
        }
        let mut rows: Vec<Row> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()
            .map_err(|e| VidError::Format(e.to_string()))?;
        rows.sort_by(|a, b| a.node.cmp(&b.node));
        let k = rows.iter().map(|r| r.vid + 1).max().unwrap_or(0);
        Ok(Self {
            level,
            k,
            nodes: rows.iter().map(|r| r.node.clone()).collect(),
            labels: rows.iter().map(|r| r.vid).collect(),
            centroids: Vec::new(),
            inertia_history: Vec::new(),
        })
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn normalized_rows(table: &EmbeddingTable) -> Vec<Vec<f64>> {
    (0..table.len())
        .map(|i| {
            let v = table.vector(i);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter().map(|x| x / norm).collect()
            } else {
                v.to_vec()
            }
        })
        .collect()
}

/// Nearest centroid, ties to the lowest index.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(seed, &[0x6EA5]);
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // every point coincides with a centroid already
            rng.random_range(0..n)
        };
        centroids.push(points[pick].clone());
        let last = centroids.last().unwrap();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, last));
        }
    }
    centroids
}

/// Lloyd's k-means on L2-normalized rows with k-means++ seeding.
///
/// Stops after `max_iters` assignment steps or when assignments stop
/// changing. A cluster that empties is reseeded with the point farthest from
/// its current centroid.
pub fn cluster_embeddings(
    table: &EmbeddingTable,
    k: usize,
    seed: u64,
    max_iters: usize,
    level: Level,
) -> Result<VirtualIdAssignment, VidError> {
    if k < 1 {
        return Err(VidError::InvalidK(k));
    }
    if table.is_empty() {
        return Err(VidError::EmptyTable);
    }
    let points = normalized_rows(table);
    let n = points.len();
    let k_eff = k.min(n);
    let mut centroids = kmeans_pp(&points, k_eff, seed);
    let mut labels: Vec<usize> = vec![usize::MAX; n];
    let mut history = Vec::new();

    for _ in 0..max_iters.max(1) {
        let assigned: Vec<(usize, f64)> = points.par_iter().map(|p| nearest(p, &centroids)).collect();
        let mut new_labels: Vec<usize> = assigned.iter().map(|a| a.0).collect();
        let mut dists: Vec<f64> = assigned.iter().map(|a| a.1).collect();

        // reseed empty clusters with the farthest point from its centroid
        let mut sizes = vec![0usize; k_eff];
        for &l in &new_labels {
            sizes[l] += 1;
        }
        for c in 0..k_eff {
            if sizes[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| sizes[new_labels[i]] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
            if let Some(i) = far {
                sizes[new_labels[i]] -= 1;
                new_labels[i] = c;
                sizes[c] = 1;
                centroids[c] = points[i].clone();
                dists[i] = 0.0;
            }
        }
        history.push(dists.iter().sum());
        let changed = new_labels != labels;
        labels = new_labels;

        let d = points[0].len();
        let mut sums = vec![vec![0.0; d]; k_eff];
        for (p, &l) in points.iter().zip(&labels) {
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        for (c, sum) in sums.into_iter().enumerate() {
            if sizes[c] > 0 {
                centroids[c] = sum.into_iter().map(|s| s / sizes[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    // Final inertia against the updated centroids.
    let final_inertia: f64 = points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centroids[l])).sum();
    history.push(final_inertia);

    Ok(VirtualIdAssignment {
        level,
        k: k_eff,
        nodes: table.nodes.clone(),
        labels,
        centroids,
        inertia_history: history,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VidCategoryMap {
    pub vid_to_top: BTreeMap<usize, String>,
    pub votes: BTreeMap<usize, BTreeMap<String, u64>>,
    /// Clusters without any clicked occurrence in the log.
    pub unmappable: Vec<usize>,
}

impl VidCategoryMap {
    pub fn to_json(&self) -> String {
        let map: BTreeMap<String, &String> =
            self.vid_to_top.iter().map(|(k, v)| (k.to_string(), v)).collect();
        serde_json::json!({ "vid_to_top": map }).to_string()
    }

    pub fn from_json(text: &str) -> Result<Self, VidError> {
        #[derive(Serialize, Deserialize)]
        struct File {
            vid_to_top: BTreeMap<String, String>,
        }
        let f: File = serde_json::from_str(text).map_err(|e| VidError::Format(e.to_string()))?;
        let mut out = VidCategoryMap::default();
        for (k, v) in f.vid_to_top {
            let k: usize = k.parse().map_err(|_| VidError::Format(format!("bad vid key {k:?}")))?;
            out.vid_to_top.insert(k, v);
        }
        Ok(out)
    }
}

/// Majority top category over each cluster's clicked occurrences, ties going
/// to the lexicographically smallest category.
pub fn map_vid_to_top_category(assignment: &VirtualIdAssignment, records: &[PvRecord]) -> VidCategoryMap {
    let mut votes: BTreeMap<usize, BTreeMap<String, u64>> = BTreeMap::new();
    for r in records {
        for e in r.clicked() {
            if let Some(vid) = assignment.get(assignment.level.key(e)) {
                *votes.entry(vid).or_default().entry(e.top_category.clone()).or_insert(0) += 1;
            }
        }
    }
    let mut out = VidCategoryMap::default();
    for vid in 0..assignment.k {
        match votes.get(&vid) {
            Some(v) => {
                // BTreeMap iterates in name order, so strict > keeps the smallest on ties
                let mut best: Option<(&String, u64)> = None;
                for (cat, &n) in v {
                    if best.is_none_or(|(_, b)| n > b) {
                        best = Some((cat, n));
                    }
                }
                out.vid_to_top.insert(vid, best.unwrap().0.clone());
            }
            None => out.unmappable.push(vid),
        }
    }
    out.votes = votes;
    out
}
