//! Training-sample mining from page views: Virtual ID classification samples,
//! first-click / switch-click category samples, fusion-filtered triplets and
//! teacher-ranked list samples.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pvlog::{extract_click_summary, Features, PvRecord};
use crate::vid::VirtualIdAssignment;

#[derive(Debug, Error, PartialEq)]
pub enum MiningError {
    #[error("feature channels differ in arity or dimension")]
    ChannelMismatch,
    #[error("channel weights must be non-negative, finite and not all zero")]
    InvalidWeights,
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
}

/// Weighted mean of per-channel Euclidean distances.
pub fn fusion_distance(a: &Features, b: &Features, weights: &[f64]) -> Result<f64, MiningError> {
    if a.len() != b.len() || a.len() != weights.len() {
        return Err(MiningError::ChannelMismatch);
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(MiningError::InvalidWeights);
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(MiningError::InvalidWeights);
    }
    let mut acc = 0.0;
    for ((x, y), w) in a.iter().zip(b).zip(weights) {
        if x.len() != y.len() {
            return Err(MiningError::ChannelMismatch);
        }
        let d: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        acc += w * d;
    }
    Ok(acc / total)
}

/// Sorted top-category vocabulary; a label is an index into it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryVocab {
    names: Vec<String>,
}

impl CategoryVocab {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(names: I) -> Self {
        let mut names: Vec<String> = names.into_iter().map(Into::into).collect();
        names.sort();
        names.dedup();
        Self { names }
    }

    /// All top categories seen in predictions, switches or results.
    pub fn from_records(records: &[PvRecord]) -> Self {
        let mut names = Vec::new();
        for r in records {
            names.push(r.predicted_top_category.clone());
            names.extend(r.selected_top_category.clone());
            names.extend(r.results.iter().map(|e| e.top_category.clone()));
        }
        Self::new(names)
    }

    pub fn index(&self, name: &str) -> Result<usize, MiningError> {
        self.names
            .binary_search_by(|n| n.as_str().cmp(name))
            .map_err(|_| MiningError::UnknownCategory(name.to_string()))
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    Virtual,
    Simple,
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSample {
    pub features: Features,
    pub label: usize,
    pub kind: SampleKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub features: Features,
    pub y_neg: usize,
    pub y_hard: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub q: Features,
    pub q_pos: Features,
    pub q_neg: Features,
    pub query_id: String,
    pub pos_item: String,
    pub neg_item: String,
}

/// Teacher-ranked list. `teacher_pi[i]` is the (0-based) candidate index
/// placed at rank `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ListSample {
    pub q: Features,
    pub query_id: String,
    pub candidate_ids: Vec<String>,
    pub candidates: Vec<Features>,
    pub teacher_pi: Vec<usize>,
    pub weights: Vec<f64>,
}

/// First click without a switch gives a Simple sample; a switch gives a Hard
/// sample plus a (negative, hard) pair.
pub fn mine_category_samples(
    record: &PvRecord,
    vocab: &CategoryVocab,
) -> Result<(Vec<ClassSample>, Vec<PairSample>), MiningError> {
    let summary = extract_click_summary(record);
    let q = &record.query_features;
    if let Some(sw) = summary.switch {
        let (y_neg, y_hard) = (vocab.index(&sw.y_neg)?, vocab.index(&sw.y_hard)?);
        return Ok((
            vec![ClassSample { features: q.clone(), label: y_hard, kind: SampleKind::Hard }],
            vec![PairSample { features: q.clone(), y_neg, y_hard }],
        ));
    }
    match summary.first_click {
        Some(first) => Ok((
            vec![ClassSample {
                features: q.clone(),
                label: vocab.index(&first.top_category)?,
                kind: SampleKind::Simple,
            }],
            vec![],
        )),
        None => Ok((vec![], vec![])),
    }
}

/// Which image a Virtual ID sample is built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FeatureSource {
    #[default]
    Query,
    Clicked,
    Both,
}

impl std::str::FromStr for FeatureSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "query" => Ok(Self::Query),
            "clicked" => Ok(Self::Clicked),
            "both" => Ok(Self::Both),
            o => Err(format!("unknown feature source {o:?}")),
        }
    }
}

impl FeatureSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Query => "query",
            Self::Clicked => "clicked",
            Self::Both => "both",
        }
    }
}

/// One Virtual-kind sample per clicked entry whose node key is assigned.
/// Returns the samples and the number of clicks skipped for lack of an
/// assignment.
pub fn mine_virtual_samples(
    records: &[PvRecord],
    assignment: &VirtualIdAssignment,
    source: FeatureSource,
) -> (Vec<ClassSample>, usize) {
    let mut out = Vec::new();
    let mut skipped = 0;
    for r in records {
        for e in r.clicked() {
            let Some(label) = assignment.get(assignment.level.key(e)) else {
                skipped += 1;
                continue;
            };
            let sample = |features: &Features| ClassSample {
                features: features.clone(),
                label,
                kind: SampleKind::Virtual,
            };
            match source {
                FeatureSource::Query => out.push(sample(&r.query_features)),
                FeatureSource::Clicked => out.push(sample(&e.item_features)),
                FeatureSource::Both => {
                    out.push(sample(&r.query_features));
                    out.push(sample(&e.item_features));
                }
            }
        }
    }
    (out, skipped)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletParams {
    /// Minimum fused distance of a negative to the query and to every click.
    pub gamma: f64,
    /// Maximum fused distance of a positive to the query.
    pub epsilon: f64,
    pub channel_weights: Vec<f64>,
    pub max_per_pv: usize,
}

/// Triplets from one page view.
///
/// Positives are clicked entries within `epsilon` of the query. Negatives are
/// unclicked entries at least `gamma` away from the query and from every
/// clicked entry. All (positive, negative) pairs are emitted, ordered by
/// negative hardness (distance to the query, then position) and positive
/// position, and truncated to `max_per_pv`.
pub fn mine_triplets(record: &PvRecord, params: &TripletParams) -> Result<Vec<Triplet>, MiningError> {
    let w = &params.channel_weights;
    let q = &record.query_features;
    let clicked: Vec<_> = record.clicked().collect();
    if clicked.is_empty() {
        return Ok(vec![]);
    }
    let mut positives = Vec::new();
    for c in &clicked {
        if fusion_distance(&c.item_features, q, w)? <= params.epsilon {
            positives.push(*c);
        }
    }
    let mut negatives = Vec::new();
    for d in record.results.iter().filter(|e| !e.clicked) {
        let to_query = fusion_distance(&d.item_features, q, w)?;
        let mut nearest = to_query;
        for c in &clicked {
            nearest = nearest.min(fusion_distance(&d.item_features, &c.item_features, w)?);
        }
        if nearest >= params.gamma {
            negatives.push((to_query, d));
        }
    }
    negatives.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.position.cmp(&b.1.position)));
    let mut out = Vec::new();
    'outer: for (_, neg) in &negatives {
        for pos in &positives {
            if out.len() >= params.max_per_pv {
                break 'outer;
            }
            out.push(Triplet {
                q: q.clone(),
                q_pos: pos.item_features.clone(),
                q_neg: neg.item_features.clone(),
                query_id: record.query_id.clone(),
                pos_item: pos.item_id.clone(),
                neg_item: neg.item_id.clone(),
            });
        }
    }
    Ok(out)
}

/// DCG-style position importance `1 / log2(i + 1)` for 1-based rank `i`.
pub fn default_position_weights(n: usize) -> Vec<f64> {
    (1..=n).map(|i| 1.0 / ((i + 1) as f64).log2()).collect()
}

/// List sample over the first `n` results by position, ranked by fused
/// distance to the query (closest first, ties by position). Returns `None`
/// when the page view has fewer than `n` results.
pub fn mine_list_sample(
    record: &PvRecord,
    n: usize,
    channel_weights: &[f64],
    weights: &[f64],
) -> Result<Option<ListSample>, MiningError> {
    assert!(n >= 2, "list length must be >= 2");
    assert_eq!(weights.len(), n, "one position weight per rank");
    if record.results.len() < n {
        return Ok(None);
    }
    let cands = &record.results[..n];
    let dist: Vec<f64> = cands
        .iter()
        .map(|c| fusion_distance(&c.item_features, &record.query_features, channel_weights))
        .collect::<Result<_, _>>()?;
    let mut pi: Vec<usize> = (0..n).collect();
    pi.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    Ok(Some(ListSample {
        q: record.query_features.clone(),
        query_id: record.query_id.clone(),
        candidate_ids: cands.iter().map(|c| c.item_id.clone()).collect(),
        candidates: cands.iter().map(|c| c.item_features.clone()).collect(),
        teacher_pi: pi,
        weights: weights.to_vec(),
    }))
}

fn percentile(mut v: Vec<f64>, p: f64) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let idx = ((p / 100.0) * (v.len() - 1) as f64).round() as usize;
    Some(v[idx])
}

/// Corpus-level starting thresholds: gamma at the 60th percentile of
/// D(non-click, query), epsilon at the 40th percentile of D(click, query).
pub fn suggest_thresholds(records: &[PvRecord], channel_weights: &[f64]) -> Result<(f64, f64), MiningError> {
    let mut non = Vec::new();
    let mut clk = Vec::new();
    for r in records {
        for e in &r.results {
            let d = fusion_distance(&e.item_features, &r.query_features, channel_weights)?;
            if e.clicked {
                clk.push(d);
            } else {
                non.push(d);
            }
        }
    }
    Ok((percentile(non, 60.0).unwrap_or(1.0), percentile(clk, 40.0).unwrap_or(1.0)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiningParams {
    pub triplet: TripletParams,
    pub list_len: usize,
    pub position_weights: Vec<f64>,
    pub virtual_source: FeatureSource,
}

/// All four sample families mined from a log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MinedSamples {
    pub virtual_samples: Vec<ClassSample>,
    pub category_samples: Vec<ClassSample>,
    pub pairs: Vec<PairSample>,
    pub triplets: Vec<Triplet>,
    pub lists: Vec<ListSample>,
    pub skipped_virtual: usize,
}

impl MinedSamples {
    /// Class samples (virtual then category) as JSON lines.
    pub fn class_jsonl(&self) -> String {
        to_jsonl(self.virtual_samples.iter().chain(&self.category_samples))
    }

    pub fn pairs_jsonl(&self) -> String {
        to_jsonl(&self.pairs)
    }

    pub fn triplets_jsonl(&self) -> String {
        to_jsonl(&self.triplets)
    }

    pub fn lists_jsonl(&self) -> String {
        to_jsonl(&self.lists)
    }

    pub fn from_jsonl(class: &str, pairs: &str, triplets: &str, lists: &str) -> Result<Self, serde_json::Error> {
        let all: Vec<ClassSample> = from_jsonl(class)?;
        let (virtual_samples, category_samples) = all.into_iter().partition(|s| s.kind == SampleKind::Virtual);
        Ok(Self {
            virtual_samples,
            category_samples,
            pairs: from_jsonl(pairs)?,
            triplets: from_jsonl(triplets)?,
            lists: from_jsonl(lists)?,
            skipped_virtual: 0,
        })
    }
}

pub fn to_jsonl<'a, T: Serialize + 'a>(items: impl IntoIterator<Item = &'a T>) -> String {
    let mut s = String::new();
    for item in items {
        s.push_str(&serde_json::to_string(item).expect("sample serializes"));
        s.push('\n');
    }
    s
}

pub fn from_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

/// Mines every family. Per-record work runs in parallel; outputs keep record
/// order. `assignment` drives Virtual ID samples when present.
pub fn mine_all(
    records: &[PvRecord],
    vocab: &CategoryVocab,
    assignment: Option<&VirtualIdAssignment>,
    params: &MiningParams,
) -> Result<MinedSamples, MiningError> {
    type PerRecord = (Vec<ClassSample>, Vec<PairSample>, Vec<Triplet>, Option<ListSample>);
    let per: Vec<PerRecord> = records
        .par_iter()
        .map(|r| {
            let (cls, pairs) = mine_category_samples(r, vocab)?;
            let trips = mine_triplets(r, &params.triplet)?;
            let list = mine_list_sample(r, params.list_len, &params.triplet.channel_weights, &params.position_weights)?;
            Ok((cls, pairs, trips, list))
        })
        .collect::<Result<_, MiningError>>()?;
    let mut out = MinedSamples::default();
    for (cls, pairs, trips, list) in per {
        out.category_samples.extend(cls);
        out.pairs.extend(pairs);
        out.triplets.extend(trips);
        out.lists.extend(list);
    }
    if let Some(a) = assignment {
        let (v, skipped) = mine_virtual_samples(records, a, params.virtual_source);
        out.virtual_samples = v;
        out.skipped_virtual = skipped;
    }
    Ok(out)
}

/// Counts of each sample family, for logging.
pub fn family_counts(s: &MinedSamples) -> BTreeMap<&'static str, usize> {
    BTreeMap::from([
        ("virtual", s.virtual_samples.len()),
        ("category", s.category_samples.len()),
        ("pairs", s.pairs.len()),
        ("triplets", s.triplets.len()),
        ("lists", s.lists.len()),
    ])
}
