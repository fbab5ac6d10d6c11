//! Weighted co-click graphs over items or leaf categories.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pvlog::{PvRecord, ResultEntry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    #[serde(rename = "item")]
    Item,
    #[serde(rename = "leaf")]
    LeafCategory,
}

impl Level {
    pub fn key<'a>(&self, entry: &'a ResultEntry) -> &'a str {
        match self {
            Level::Item => &entry.item_id,
            Level::LeafCategory => &entry.leaf_category,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Level::Item => "item",
            Level::LeafCategory => "leaf",
        }
    }
}

impl std::str::FromStr for Level {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "item" => Ok(Level::Item),
            "leaf" => Ok(Level::LeafCategory),
            other => Err(format!("unknown level {other:?}")),
        }
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("self-loop on node {0:?}")]
    SelfLoop(String),
    #[error("edge ({0:?}, {1:?}) has zero weight")]
    ZeroWeight(String, String),
    #[error("malformed graph file: {0}")]
    Format(#[from] serde_json::Error),
}

/// Undirected co-click graph. Edge keys are stored with the lexicographically
/// smaller node first; weights are raw co-click counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoClickGraph {
    level: Level,
    nodes: BTreeSet<String>,
    edges: BTreeMap<(String, String), u64>,
}

fn ordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl CoClickGraph {
    pub fn new(level: Level) -> Self {
        Self { level, nodes: BTreeSet::new(), edges: BTreeMap::new() }
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn nodes(&self) -> impl ExactSizeIterator<Item = &String> {
        self.nodes.iter()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn contains(&self, node: &str) -> bool {
        self.nodes.contains(node)
    }

    pub fn edges(&self) -> impl Iterator<Item = (&(String, String), u64)> {
        self.edges.iter().map(|(k, w)| (k, *w))
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn weight(&self, a: &str, b: &str) -> u64 {
        self.edges.get(&ordered(a, b)).copied().unwrap_or(0)
    }

    pub fn total_weight(&self) -> u64 {
        self.edges.values().sum()
    }

    pub fn add_node(&mut self, node: &str) {
        if !self.nodes.contains(node) {
            self.nodes.insert(node.to_string());
        }
    }

    /// Adds `w` to the edge (a, b). Self-loops are ignored.
    pub fn add_edge(&mut self, a: &str, b: &str, w: u64) {
        self.add_node(a);
        self.add_node(b);
        if a != b && w > 0 {
            *self.edges.entry(ordered(a, b)).or_insert(0) += w;
        }
    }

    /// Merges another graph of the same level by adding edge counts.
    pub fn merge(&mut self, other: &CoClickGraph) {
        assert_eq!(self.level, other.level, "cannot merge graphs of different levels");
        for n in &other.nodes {
            self.add_node(n);
        }
        for ((a, b), w) in &other.edges {
            *self.edges.entry((a.clone(), b.clone())).or_insert(0) += w;
        }
    }

    /// Degree (number of distinct neighbours) of every node.
    pub fn degrees(&self) -> BTreeMap<&str, usize> {
        let mut deg: BTreeMap<&str, usize> = self.nodes.iter().map(|n| (n.as_str(), 0)).collect();
        for (a, b) in self.edges.keys() {
            *deg.get_mut(a.as_str()).unwrap() += 1;
            *deg.get_mut(b.as_str()).unwrap() += 1;
        }
        deg
    }

    /// Sorted neighbour lists with weights, indexed by node order.
    pub fn adjacency(&self) -> (Vec<String>, Vec<Vec<(usize, u64)>>) {
        let names: Vec<String> = self.nodes.iter().cloned().collect();
        let index: BTreeMap<&str, usize> =
            names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let mut adj = vec![Vec::new(); names.len()];
        for ((a, b), w) in &self.edges {
            let (ia, ib) = (index[a.as_str()], index[b.as_str()]);
            adj[ia].push((ib, *w));
            adj[ib].push((ia, *w));
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        (names, adj)
    }

    pub fn to_json(&self) -> String {
        let deg = self.degrees();
        let file = GraphFile {
            level: self.level,
            edges: self.edges.iter().map(|((a, b), w)| (a.clone(), b.clone(), *w)).collect(),
            isolated: deg.iter().filter(|(_, d)| **d == 0).map(|(n, _)| n.to_string()).collect(),
        };
        serde_json::to_string(&file).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let file: GraphFile = serde_json::from_str(text)?;
        let mut g = CoClickGraph::new(file.level);
        for (a, b, w) in file.edges {
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            if w == 0 {
                return Err(GraphError::ZeroWeight(a, b));
            }
            g.add_edge(&a, &b, w);
        }
        for n in file.isolated {
            g.add_node(&n);
        }
        Ok(g)
    }
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    level: Level,
    edges: Vec<(String, String, u64)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    isolated: Vec<String>,
}

fn project_one(record: &PvRecord, level: Level, g: &mut CoClickGraph) {
    let clicked: Vec<&str> = record.clicked().map(|e| level.key(e)).collect();
    for (i, a) in clicked.iter().enumerate() {
        g.add_node(a);
        for b in &clicked[i + 1..] {
            g.add_edge(a, b, 1);
        }
    }
}

/// Builds the co-click graph: every unordered pair of clicked entries within
/// one page view adds 1 to the edge between their node keys.
pub fn project_coclick(records: &[PvRecord], level: Level) -> CoClickGraph {
    let mut g = CoClickGraph::new(level);
    for r in records {
        project_one(r, level, &mut g);
    }
    g
}

/// Parallel projection over record shards, merged by edge-count addition.
pub fn project_coclick_par(records: &[PvRecord], level: Level) -> CoClickGraph {
    use rayon::prelude::*;
    records
        .par_chunks(256)
        .map(|chunk| project_coclick(chunk, level))
        .reduce(
            || CoClickGraph::new(level),
            |mut a, b| {
                a.merge(&b);
                a
            },
        )
}

/// Removes light edges and low-degree nodes until nothing changes.
pub fn prune(graph: &CoClickGraph, min_edge_weight: u64, min_degree: usize) -> CoClickGraph {
    let mut g = graph.clone();
    loop {
        let before = (g.nodes.len(), g.edges.len());
        g.edges.retain(|_, w| *w >= min_edge_weight);
        let deg = g.degrees();
        let drop: BTreeSet<String> =
            deg.into_iter().filter(|(_, d)| *d < min_degree).map(|(n, _)| n.to_string()).collect();
        g.nodes.retain(|n| !drop.contains(n));
        g.edges.retain(|(a, b), _| !drop.contains(a) && !drop.contains(b));
        if (g.nodes.len(), g.edges.len()) == before {
            return g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pvlog::fixtures::{entry, record};
    use proptest::prelude::*;

    fn pv(clicks: &[(&str, &str)], unclicked: &[&str]) -> PvRecord {
        let mut results = Vec::new();
        let mut pos = 1;
        for (item, leaf) in clicks {
            let mut e = entry(item, "top", pos, Some(2000), vec![vec![0.0]]);
            e.leaf_category = leaf.to_string();
            results.push(e);
            pos += 1;
        }
        for item in unclicked {
            results.push(entry(item, "top", pos, None, vec![vec![0.0]]));
            pos += 1;
        }
        let mut r = record("top", None, results);
        r.query_features = vec![vec![0.0]];
        r
    }

    #[test]
    fn single_coclick() {
        let g = project_coclick(&[pv(&[("A", "x"), ("B", "y")], &["C"])], Level::Item);
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(&("A".into(), "B".into()), 1)]);
        assert!(!g.contains("C"));
    }

    #[test]
    fn weights_accumulate() {
        let r = pv(&[("A", "x"), ("B", "y")], &[]);
        let g = project_coclick(&[r.clone(), r], Level::Item);
        assert_eq!(g.weight("B", "A"), 2);
    }

    #[test]
    fn same_leaf_is_not_a_self_loop() {
        let g = project_coclick(&[pv(&[("A", "x"), ("B", "x")], &[])], Level::LeafCategory);
        assert_eq!(g.edge_count(), 0);
        assert!(g.contains("x"));
    }

    #[test]
    fn singleton_click_is_a_node() {
        let g = project_coclick(&[pv(&[("A", "x")], &["B"])], Level::Item);
        assert_eq!(g.node_count(), 1);
    }

    fn abc() -> CoClickGraph {
        let mut g = CoClickGraph::new(Level::Item);
        g.add_edge("A", "B", 1);
        g.add_edge("B", "C", 3);
        g
    }

    #[test]
    fn prune_identity() {
        let g = abc();
        assert_eq!(prune(&g, 1, 0), g);
    }

    #[test]
    fn prune_filters_edges_then_nodes() {
        let p = prune(&abc(), 2, 1);
        assert_eq!(p.edges().collect::<Vec<_>>(), vec![(&("B".into(), "C".into()), 3)]);
        assert!(!p.contains("A"));
        // without a degree threshold the node survives as isolated
        assert!(prune(&abc(), 2, 0).contains("A"));
    }

    #[test]
    fn prune_star_to_empty() {
        let mut g = CoClickGraph::new(Level::Item);
        for leaf in ["b", "c", "d", "e"] {
            g.add_edge("hub", leaf, 1);
        }
        let p = prune(&g, 2, 1);
        assert_eq!(p.node_count(), 0);
        assert_eq!(p.edge_count(), 0);
    }

    #[test]
    fn file_roundtrip_and_self_loop_rejection() {
        let mut g = abc();
        g.add_node("lonely");
        let back = CoClickGraph::from_json(&g.to_json()).unwrap();
        assert_eq!(back, g);
        let bad = r#"{"level":"item","edges":[["a","a",1]]}"#;
        assert!(matches!(CoClickGraph::from_json(bad), Err(GraphError::SelfLoop(_))));
    }

    fn arb_records() -> impl Strategy<Value = Vec<PvRecord>> {
        let click = (0u8..6, 0u8..3, any::<bool>());
        prop::collection::vec(prop::collection::vec(click, 0..6), 0..12).prop_map(|pvs| {
            pvs.into_iter()
                .map(|entries| {
                    let mut seen = BTreeSet::new();
                    let mut clicks = Vec::new();
                    let mut unclicked = Vec::new();
                    for (item, leaf, c) in entries {
                        let name = format!("i{item}");
                        if !seen.insert(name.clone()) {
                            continue;
                        }
                        if c {
                            clicks.push((name, format!("l{leaf}")));
                        } else {
                            unclicked.push(name);
                        }
                    }
                    let cl: Vec<(&str, &str)> =
                        clicks.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
                    let un: Vec<&str> = unclicked.iter().map(String::as_str).collect();
                    pv(&cl, &un)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn projection_is_order_independent(records in arb_records(), rot in 0usize..12) {
            for level in [Level::Item, Level::LeafCategory] {
                let g = project_coclick(&records, level);
                let mut rev = records.clone();
                rev.reverse();
                if !rev.is_empty() {
                    let k = rot % rev.len();
                    rev.rotate_left(k);
                }
                prop_assert_eq!(&project_coclick(&rev, level), &g);
                prop_assert_eq!(&project_coclick_par(&records, level), &g);
            }
        }

        #[test]
        fn total_weight_matches_pair_count(records in arb_records()) {
            for level in [Level::Item, Level::LeafCategory] {
                let g = project_coclick(&records, level);
                let mut expected = 0u64;
                for r in &records {
                    let keys: Vec<&str> = r.clicked().map(|e| level.key(e)).collect();
                    for i in 0..keys.len() {
                        for j in (i + 1)..keys.len() {
                            if keys[i] != keys[j] {
                                expected += 1;
                            }
                        }
                    }
                }
                prop_assert_eq!(g.total_weight(), expected);
            }
        }

        #[test]
        fn prune_is_idempotent(records in arb_records(), w in 1u64..3, d in 0usize..3) {
            let g = project_coclick(&records, Level::Item);
            let once = prune(&g, w, d);
            prop_assert_eq!(prune(&once, w, d), once.clone());
            for ((a, b), weight) in once.edges() {
                prop_assert!(weight >= w);
                prop_assert!(once.contains(a) && once.contains(b));
            }
        }
    }
}
