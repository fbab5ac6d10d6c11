//! Retrieval index and the classification and retrieval metrics.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("retrieval index is empty")]
    EmptyIndex,
    #[error("K must be >= 1")]
    InvalidK,
    #[error("embedding dimension {found} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("duplicate item id {0}")]
    DuplicateItem(String),
}

/// Exact linear-scan index over item embeddings.
#[derive(Clone, Debug, Default)]
pub struct RetrievalIndex {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
    categories: Vec<Option<String>>,
    seen: BTreeSet<String>,
}

impl RetrievalIndex {
    pub fn new(dim: usize) -> Self {
        Self { dim, ..Self::default() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn insert(&mut self, id: &str, vector: Vec<f64>, category: Option<String>) -> Result<(), EvalError> {
        if vector.len() != self.dim {
            return Err(EvalError::DimensionMismatch { expected: self.dim, found: vector.len() });
        }
        if !self.seen.insert(id.to_string()) {
            return Err(EvalError::DuplicateItem(id.to_string()));
        }
        self.ids.push(id.to_string());
        self.vectors.push(vector);
        self.categories.push(category);
        Ok(())
    }

    pub fn category(&self, id: &str) -> Option<&str> {
        let i = self.ids.iter().position(|x| x == id)?;
        self.categories[i].as_deref()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Top-K item ids by Euclidean distance, ties broken by item id. The
/// category filter is applied before ranking; items without a category never
/// pass a filter.
pub fn retrieve(
    query: &[f64],
    index: &RetrievalIndex,
    k: usize,
    category_filter: Option<&str>,
) -> Result<Vec<String>, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    if index.is_empty() {
        return Err(EvalError::EmptyIndex);
    }
    if query.len() != index.dim {
        return Err(EvalError::DimensionMismatch { expected: index.dim, found: query.len() });
    }
    let mut scored: Vec<(f64, &str)> = index
        .ids
        .iter()
        .zip(&index.vectors)
        .zip(&index.categories)
        .filter(|(_, cat)| category_filter.is_none_or(|f| cat.as_deref() == Some(f)))
        .map(|((id, v), _)| (sq_dist(query, v), id.as_str()))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    scored.truncate(k);
    Ok(scored.into_iter().map(|(_, id)| id.to_string()).collect())
}

/// Runs [`retrieve`] for every query in parallel.
pub fn retrieve_all(
    queries: &[(String, Vec<f64>, Option<String>)],
    index: &RetrievalIndex,
    k: usize,
) -> Result<BTreeMap<String, Vec<String>>, EvalError> {
    queries
        .par_iter()
        .map(|(id, q, filter)| Ok((id.clone(), retrieve(q, index, k, filter.as_deref())?)))
        .collect()
}

pub type Rankings = BTreeMap<String, Vec<String>>;
pub type IdenticalSets = BTreeMap<String, BTreeSet<String>>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecallResult {
    pub k: usize,
    /// Set recall per query.
    pub per_query: BTreeMap<String, f64>,
    /// 1 if any identical item is in the top K.
    pub per_query_hit: BTreeMap<String, f64>,
    pub mean: f64,
    pub hit_rate: f64,
    /// Ranked queries with no (or an empty) identical set.
    pub missing_truth: usize,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn truth_for<'a>(truth: &'a IdenticalSets, q: &str) -> Option<&'a BTreeSet<String>> {
    truth.get(q).filter(|s| !s.is_empty())
}

pub fn recall_at_k(rankings: &Rankings, truth: &IdenticalSets, k: usize) -> RecallResult {
    let mut out = RecallResult { k, ..Default::default() };
    for (q, ranking) in rankings {
        let Some(set) = truth_for(truth, q) else {
            out.missing_truth += 1;
            continue;
        };
        let hits = ranking.iter().take(k).filter(|id| set.contains(*id)).count();
        out.per_query.insert(q.clone(), hits as f64 / set.len() as f64);
        out.per_query_hit.insert(q.clone(), if hits > 0 { 1.0 } else { 0.0 });
    }
    out.mean = mean(out.per_query.values().copied());
    out.hit_rate = mean(out.per_query_hit.values().copied());
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub k: usize,
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
    pub missing_truth: usize,
}

/// AP@K of one ranking.
pub fn average_precision(ranking: &[String], set: &BTreeSet<String>, k: usize) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranking.iter().take(k).enumerate() {
        if set.contains(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    let denom = set.len().min(k);
    if denom == 0 {
        0.0
    } else {
        sum / denom as f64
    }
}

pub fn map_at_k(rankings: &Rankings, truth: &IdenticalSets, k: usize) -> MapResult {
    let mut out = MapResult { k, ..Default::default() };
    for (q, ranking) in rankings {
        let Some(set) = truth_for(truth, q) else {
            out.missing_truth += 1;
            continue;
        };
        out.per_query.insert(q.clone(), average_precision(ranking, set, k));
    }
    out.mean = mean(out.per_query.values().copied());
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrecisionResult {
    /// Category -> (correct, queries). Categories with no queries are absent.
    pub per_category: BTreeMap<String, (usize, usize)>,
    /// Query-weighted mean.
    pub average: f64,
    /// Unweighted mean over categories.
    pub macro_average: f64,
}

impl PrecisionResult {
    pub fn accuracy(&self, category: &str) -> Option<f64> {
        self.per_category.get(category).map(|&(c, n)| c as f64 / n as f64)
    }
}

/// Per true category, the fraction of queries whose predicted top category
/// is correct. A query with no prediction counts as wrong.
pub fn precision_at_1(predictions: &BTreeMap<String, String>, truth: &BTreeMap<String, String>) -> PrecisionResult {
    let mut per_category: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (q, t) in truth {
        let e = per_category.entry(t.clone()).or_default();
        e.1 += 1;
        if predictions.get(q) == Some(t) {
            e.0 += 1;
        }
    }
    let total: usize = per_category.values().map(|v| v.1).sum();
    let correct: usize = per_category.values().map(|v| v.0).sum();
    let average = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
    let macro_average = mean(per_category.values().map(|&(c, n)| c as f64 / n as f64));
    PrecisionResult { per_category, average, macro_average }
}

/// Adjusted Rand Index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same items");
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let c2 = |x: usize| (x * x.saturating_sub(1)) as f64 / 2.0;
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut ra: HashMap<usize, usize> = HashMap::new();
    let mut rb: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let index: f64 = joint.values().map(|&v| c2(v)).sum();
    let sa: f64 = ra.values().map(|&v| c2(v)).sum();
    let sb: f64 = rb.values().map(|&v| c2(v)).sum();
    let expected = sa * sb / c2(n);
    let max = 0.5 * (sa + sb);
    if max == expected {
        // both labelings trivial (all one cluster or all singletons)
        return if sa == sb { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}

pub const RECALL_KS: [usize; 3] = [1, 4, 20];
pub const MAP_MAX_K: usize = 20;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub queries: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision_at_1: Option<f64>,
    /// Set recall at each of [`RECALL_KS`].
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub recall: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub hit_rate: Vec<f64>,
    /// mAP@1 through mAP@20.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub map: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub categories: BTreeMap<String, CategoryMetrics>,
    /// Query-count-weighted mean over categories.
    pub average: CategoryMetrics,
    /// Unweighted mean over categories.
    pub macro_average: CategoryMetrics,
    pub missing_truth: usize,
}

/// Query count plus per-K recall, hit and AP sums.
type RetrievalAcc = (usize, Vec<f64>, Vec<f64>, Vec<f64>);

#[derive(Default)]
struct Acc {
    queries: usize,
    p1: Option<(usize, usize)>,
    recall: Option<RetrievalAcc>,
}

impl MetricsReport {
    /// Builds a report from any combination of classification and retrieval
    /// results. `query_category` assigns each query its true top category.
    pub fn build(
        query_category: &BTreeMap<String, String>,
        predictions: Option<&BTreeMap<String, String>>,
        retrieval: Option<(&Rankings, &IdenticalSets)>,
    ) -> Self {
        let mut accs: BTreeMap<String, Acc> = BTreeMap::new();
        let mut missing_truth = 0;
        for (q, cat) in query_category {
            let acc = accs.entry(cat.clone()).or_default();
            acc.queries += 1;
            if let Some(preds) = predictions {
                let p = acc.p1.get_or_insert((0, 0));
                p.1 += 1;
                if preds.get(q) == Some(cat) {
                    p.0 += 1;
                }
            }
            if let Some((rankings, truth)) = retrieval {
                let Some(ranking) = rankings.get(q) else { continue };
                let Some(set) = truth_for(truth, q) else {
                    missing_truth += 1;
                    continue;
                };
                let r = acc.recall.get_or_insert_with(|| {
                    (0, vec![0.0; RECALL_KS.len()], vec![0.0; RECALL_KS.len()], vec![0.0; MAP_MAX_K])
                });
                r.0 += 1;
                for (i, &k) in RECALL_KS.iter().enumerate() {
                    let hits = ranking.iter().take(k).filter(|id| set.contains(*id)).count();
                    r.1[i] += hits as f64 / set.len() as f64;
                    r.2[i] += if hits > 0 { 1.0 } else { 0.0 };
                }
                for k in 1..=MAP_MAX_K {
                    r.3[k - 1] += average_precision(ranking, set, k);
                }
            }
        }

        let mut categories = BTreeMap::new();
        for (cat, acc) in &accs {
            let mut m = CategoryMetrics { queries: acc.queries, ..Default::default() };
            m.precision_at_1 = acc.p1.map(|(c, n)| c as f64 / n as f64);
            if let Some((n, rec, hit, map)) = &acc.recall {
                let scale = |v: &Vec<f64>| v.iter().map(|x| x / *n as f64).collect::<Vec<f64>>();
                m.recall = scale(rec);
                m.hit_rate = scale(hit);
                m.map = scale(map);
            }
            categories.insert(cat.clone(), m);
        }

        let weighted = |get: &dyn Fn(&CategoryMetrics) -> Option<f64>, w: &dyn Fn(&str) -> f64| {
            let mut s = 0.0;
            let mut tw = 0.0;
            for (cat, m) in &categories {
                if let Some(v) = get(m) {
                    let wi = w(cat);
                    s += wi * v;
                    tw += wi;
                }
            }
            if tw == 0.0 {
                None
            } else {
                Some(s / tw)
            }
        };
        let summarize = |w: &dyn Fn(&str) -> f64| {
            let mut m = CategoryMetrics {
                queries: categories.values().map(|m| m.queries).sum(),
                ..Default::default()
            };
            m.precision_at_1 = weighted(&|m| m.precision_at_1, w);
            let vec_of = |len: usize, pick: &dyn Fn(&CategoryMetrics) -> &Vec<f64>| -> Vec<f64> {
                (0..len).filter_map(|i| weighted(&|m| pick(m).get(i).copied(), w)).collect()
            };
            m.recall = vec_of(RECALL_KS.len(), &|m| &m.recall);
            m.hit_rate = vec_of(RECALL_KS.len(), &|m| &m.hit_rate);
            m.map = vec_of(MAP_MAX_K, &|m| &m.map);
            m
        };
        // The query-weighted average weights each metric by the queries that
        // contributed to it.
        let precision_weight = |cat: &str| accs[cat].p1.map_or(0, |p| p.1) as f64;
        let retrieval_weight = |cat: &str| accs[cat].recall.as_ref().map_or(0, |r| r.0) as f64;
        let mut average = summarize(&|c| precision_weight(c));
        let by_retrieval = summarize(&|c| retrieval_weight(c));
        average.recall = by_retrieval.recall;
        average.hit_rate = by_retrieval.hit_rate;
        average.map = by_retrieval.map;
        let macro_average = summarize(&|_| 1.0);

        Self { categories, average, macro_average, missing_truth }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    /// Rows are categories, then the weighted and macro averages.
    pub fn to_table(&self) -> String {
        let mut header = vec!["category".to_string(), "queries".to_string(), "P@1".to_string()];
        for k in RECALL_KS {
            header.push(format!("R@{k}"));
        }
        for k in RECALL_KS {
            header.push(format!("Hit@{k}"));
        }
        header.push(format!("mAP@{MAP_MAX_K}"));

        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let row = |name: &str, m: &CategoryMetrics| {
            let mut r = vec![name.to_string(), m.queries.to_string(), fmt(m.precision_at_1)];
            for i in 0..RECALL_KS.len() {
                r.push(fmt(m.recall.get(i).copied()));
            }
            for i in 0..RECALL_KS.len() {
                r.push(fmt(m.hit_rate.get(i).copied()));
            }
            r.push(fmt(m.map.last().copied()));
            r
        };
        let mut rows = vec![header];
        for (cat, m) in &self.categories {
            rows.push(row(cat, m));
        }
        rows.push(row("average", &self.average));
        rows.push(row("macro", &self.macro_average));

        let widths: Vec<usize> =
            (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for r in rows {
            let cells: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}
