//! Planted-community click-log generator.
//!
//! Items belong to planted communities; every community owns a few leaf
//! categories under a single top category. Each page view targets one item:
//! the returned list holds the target's identical group, other items of its
//! community and a few out-of-community distractors. Clicks are drawn with
//! probability `p_identical` for identical items, `p_in` for same-community
//! items and `p_out` otherwise.
//!
//! Features are community centroid + identical-group offset + isotropic noise
//! per channel. Channel 0 additionally carries `nuisance_dims` high-variance
//! dimensions that are unrelated to identity.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pvlog::{Features, PvRecord, ResultEntry};
use crate::seed;

#[derive(Debug, Error, PartialEq)]
#[error("invalid synthetic config: {0}")]
pub struct InvalidConfig(pub String);

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub communities: usize,
    pub items_per_community: usize,
    pub num_pvs: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub p_identical: f64,
    pub top_categories: Vec<String>,
    pub leaves_per_community: usize,
    /// Fraction of items that are paired with an identical twin.
    pub identical_pair_fraction: f64,
    pub channel_dims: Vec<usize>,
    pub nuisance_dims: usize,
    pub nuisance_scale: f64,
    pub centroid_scale: f64,
    pub group_scale: f64,
    pub feature_noise: f64,
    pub query_noise: f64,
    pub results_per_pv: usize,
    pub out_of_community_results: usize,
    pub switch_rate: f64,
    /// Probability that a switched tab lands on a wrong category.
    pub switch_noise: f64,
    pub users: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            communities: 8,
            items_per_community: 50,
            num_pvs: 5000,
            p_in: 0.3,
            p_out: 0.01,
            p_identical: 0.9,
            top_categories: ["bags", "dress", "shirt", "shoes"].map(String::from).to_vec(),
            leaves_per_community: 3,
            identical_pair_fraction: 0.2,
            channel_dims: vec![16, 8],
            nuisance_dims: 16,
            nuisance_scale: 1.0,
            centroid_scale: 1.0,
            group_scale: 0.5,
            feature_noise: 0.05,
            query_noise: 0.15,
            results_per_pv: 10,
            out_of_community_results: 2,
            switch_rate: 0.2,
            switch_noise: 0.0,
            users: 200,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), InvalidConfig> {
        let bad = |m: &str| Err(InvalidConfig(m.to_string()));
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if self.communities == 0 || self.items_per_community == 0 {
            return bad("zero items");
        }
        if !(prob(self.p_in) && prob(self.p_out) && prob(self.p_identical)) {
            return bad("click probabilities must lie in [0, 1]");
        }
        if self.p_in <= self.p_out {
            return bad("p_in must exceed p_out");
        }
        if self.top_categories.is_empty() || self.leaves_per_community == 0 {
            return bad("empty category tree");
        }
        let mut tops = self.top_categories.clone();
        tops.sort();
        tops.dedup();
        if tops.len() != self.top_categories.len() {
            return bad("duplicate top category");
        }
        if self.channel_dims.is_empty() || self.channel_dims.contains(&0) {
            return bad("feature channels must be non-empty");
        }
        if !prob(self.identical_pair_fraction) || !prob(self.switch_rate) || !prob(self.switch_noise) {
            return bad("rates must lie in [0, 1]");
        }
        if self.results_per_pv < 2 || self.out_of_community_results >= self.results_per_pv {
            return bad("results_per_pv must be >= 2 and exceed out_of_community_results");
        }
        if self.out_of_community_results > 0 && self.communities < 2 {
            return bad("out-of-community results need at least two communities");
        }
        if self.users == 0 {
            return bad("users must be >= 1");
        }
        for s in [
            self.nuisance_scale,
            self.centroid_scale,
            self.group_scale,
            self.feature_noise,
            self.query_noise,
        ] {
            if !(s.is_finite() && s >= 0.0) {
                return bad("scales must be finite and non-negative");
            }
        }
        Ok(())
    }

    pub fn num_items(&self) -> usize {
        self.communities * self.items_per_community
    }

    pub fn top_of(&self, community: usize) -> &str {
        &self.top_categories[community % self.top_categories.len()]
    }
}

/// Whether a truth row describes an inventory item or a query image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruthKind {
    #[default]
    Item,
    Query,
}

/// One ground-truth row. Query images use their `query_id` as `item_id` and
/// inherit the target's community, categories and identical group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub item_id: String,
    #[serde(default)]
    pub kind: TruthKind,
    pub community: usize,
    pub top: String,
    pub leaf: String,
    pub identical_group: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub items: Vec<TruthRow>,
    pub queries: Vec<TruthRow>,
}

impl GroundTruth {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for row in self.items.iter().chain(&self.queries) {
            writeln!(w, "{}", serde_json::to_string(row).expect("row serializes"))?;
        }
        Ok(())
    }

    pub fn rows(&self) -> impl Iterator<Item = &TruthRow> {
        self.items.iter().chain(&self.queries)
    }
}

pub fn read_truth(text: &str) -> Result<Vec<TruthRow>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// Inventory catalogue produced alongside the log.
#[derive(Clone, Debug)]
pub struct Catalogue {
    pub item_ids: Vec<String>,
    pub community: Vec<usize>,
    pub leaf: Vec<String>,
    pub group: Vec<usize>,
    pub features: Vec<Features>,
    /// Noise-free group prototypes, channel 0 without nuisance dims.
    prototypes: Vec<Features>,
    groups: Vec<Vec<usize>>,
    by_community: Vec<Vec<usize>>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    if scale == 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, scale).expect("finite scale");
    (0..n).map(|_| normal.sample(rng)).collect()
}

fn noisy(proto: &Features, cfg: &SynthConfig, noise: f64, rng: &mut ChaCha8Rng) -> Features {
    let mut out = Vec::with_capacity(proto.len());
    for (m, base) in proto.iter().enumerate() {
        let eps = gaussian(rng, base.len(), noise);
        let mut ch: Vec<f64> = base.iter().zip(eps).map(|(b, e)| b + e).collect();
        if m == 0 {
            ch.extend(gaussian(rng, cfg.nuisance_dims, cfg.nuisance_scale));
        }
        out.push(ch);
    }
    out
}

pub fn build_catalogue(cfg: &SynthConfig, seed: u64) -> Result<Catalogue, InvalidConfig> {
    cfg.validate()?;
    let mut rng = seed::rng(seed, &[0xCA7A]);
    let centroids: Vec<Features> = (0..cfg.communities)
        .map(|_| cfg.channel_dims.iter().map(|&d| gaussian(&mut rng, d, cfg.centroid_scale)).collect())
        .collect();

    let n = cfg.num_items();
    let mut community = Vec::with_capacity(n);
    let mut leaf = Vec::with_capacity(n);
    let mut by_community = vec![Vec::new(); cfg.communities];
    for (c, members) in by_community.iter_mut().enumerate() {
        for j in 0..cfg.items_per_community {
            members.push(community.len());
            community.push(c);
            leaf.push(format!("{}-c{}-l{}", cfg.top_of(c), c, j % cfg.leaves_per_community));
        }
    }

    // Pair up a fraction of items inside each community as identical twins.
    let mut group = vec![usize::MAX; n];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for members in &by_community {
        let mut order = members.clone();
        order.shuffle(&mut rng);
        let pairs = ((cfg.identical_pair_fraction * order.len() as f64) / 2.0).floor() as usize;
        let mut it = order.into_iter();
        for _ in 0..pairs {
            let (a, b) = (it.next().unwrap(), it.next().unwrap());
            groups.push(vec![a.min(b), a.max(b)]);
        }
        groups.extend(it.map(|a| vec![a]));
    }
    groups.sort();
    let mut prototypes = Vec::with_capacity(groups.len());
    for (g, members) in groups.iter().enumerate() {
        let c = community[members[0]];
        let proto: Features = centroids[c]
            .iter()
            .map(|ch| {
                let off = gaussian(&mut rng, ch.len(), cfg.group_scale);
                ch.iter().zip(off).map(|(a, b)| a + b).collect()
            })
            .collect();
        prototypes.push(proto);
        for &m in members {
            group[m] = g;
        }
    }
    let features = (0..n)
        .map(|i| noisy(&prototypes[group[i]], cfg, cfg.feature_noise, &mut rng))
        .collect();
    Ok(Catalogue {
        item_ids: (0..n).map(|i| format!("i{i:05}")).collect(),
        community,
        leaf,
        group,
        features,
        prototypes,
        groups,
        by_community,
    })
}

const BASE_TS: i64 = 1_600_000_000_000;

fn generate_pv(cfg: &SynthConfig, cat: &Catalogue, seed: u64, stream: u64, pv: usize) -> (PvRecord, TruthRow) {
    let mut rng = seed::rng(seed, &[stream, pv as u64]);
    let n = cat.item_ids.len();
    let target = rng.random_range(0..n);
    let c = cat.community[target];
    let g = cat.group[target];

    let mut chosen: Vec<usize> = cat.groups[g].clone();
    let in_slots = cfg.results_per_pv - cfg.out_of_community_results;
    let mut pool: Vec<usize> =
        cat.by_community[c].iter().copied().filter(|i| cat.group[*i] != g).collect();
    pool.shuffle(&mut rng);
    chosen.extend(pool.into_iter().take(in_slots.saturating_sub(chosen.len())));
    for _ in 0..cfg.out_of_community_results {
        let mut other = rng.random_range(0..cfg.communities - 1);
        if other >= c {
            other += 1;
        }
        let cand = *cat.by_community[other].choose(&mut rng).unwrap();
        if !chosen.contains(&cand) {
            chosen.push(cand);
        }
    }
    chosen.shuffle(&mut rng);

    let ts = BASE_TS + pv as i64 * 60_000;
    let results: Vec<ResultEntry> = chosen
        .iter()
        .enumerate()
        .map(|(k, &item)| {
            let p = if cat.group[item] == g {
                cfg.p_identical
            } else if cat.community[item] == c {
                cfg.p_in
            } else {
                cfg.p_out
            };
            let clicked = rng.random::<f64>() < p;
            let click_time = clicked.then(|| ts + rng.random_range(500..30_000));
            let comm = cat.community[item];
            ResultEntry {
                item_id: cat.item_ids[item].clone(),
                leaf_category: cat.leaf[item].clone(),
                top_category: cfg.top_of(comm).to_string(),
                position: k as u32 + 1,
                clicked,
                click_time,
                item_features: cat.features[item].clone(),
            }
        })
        .collect();

    let true_top = cfg.top_of(c).to_string();
    let tops = &cfg.top_categories;
    let mut predicted = true_top.clone();
    let mut selected = None;
    if tops.len() > 1 && rng.random::<f64>() < cfg.switch_rate {
        let others: Vec<&String> = tops.iter().filter(|t| **t != true_top).collect();
        predicted = (*others.choose(&mut rng).unwrap()).clone();
        let mut sel = true_top.clone();
        if tops.len() > 2 && rng.random::<f64>() < cfg.switch_noise {
            let wrong: Vec<&String> =
                tops.iter().filter(|t| **t != true_top && **t != predicted).collect();
            sel = (*wrong.choose(&mut rng).unwrap()).clone();
        }
        selected = Some(sel);
    }

    let query_id = format!("q{stream}-{pv:06}");
    let query_features = noisy(&cat.prototypes[g], cfg, cfg.query_noise, &mut rng);
    let record = PvRecord {
        pv_id: format!("pv{stream}-{pv:06}"),
        user_id: format!("u{:04}", rng.random_range(0..cfg.users)),
        query_id: query_id.clone(),
        query_features,
        timestamp: ts,
        predicted_top_category: predicted,
        selected_top_category: selected,
        results,
    };
    let truth = TruthRow {
        item_id: query_id,
        kind: TruthKind::Query,
        community: c,
        top: true_top,
        leaf: cat.leaf[target].clone(),
        identical_group: g,
    };
    (record, truth)
}

/// Generates `num_pvs` page views for the given stream id. Streams let a
/// training log and a held-out log share one catalogue.
pub fn generate_stream(
    cfg: &SynthConfig,
    cat: &Catalogue,
    seed: u64,
    stream: u64,
    num_pvs: usize,
) -> (Vec<PvRecord>, Vec<TruthRow>) {
    (0..num_pvs)
        .into_par_iter()
        .map(|pv| generate_pv(cfg, cat, seed, stream, pv))
        .unzip()
}

fn item_truth(cfg: &SynthConfig, cat: &Catalogue) -> Vec<TruthRow> {
    (0..cat.item_ids.len())
        .map(|i| TruthRow {
            item_id: cat.item_ids[i].clone(),
            kind: TruthKind::Item,
            community: cat.community[i],
            top: cfg.top_of(cat.community[i]).to_string(),
            leaf: cat.leaf[i].clone(),
            identical_group: cat.group[i],
        })
        .collect()
}

/// Generates a training log (stream 0) with its ground truth.
pub fn generate_synthetic(
    cfg: &SynthConfig,
    seed: u64,
) -> Result<(Vec<PvRecord>, GroundTruth), InvalidConfig> {
    let cat = build_catalogue(cfg, seed)?;
    let (records, queries) = generate_stream(cfg, &cat, seed, 0, cfg.num_pvs);
    Ok((records, GroundTruth { items: item_truth(cfg, &cat), queries }))
}

/// Training log plus a held-out log drawn from the same catalogue.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub train: Vec<PvRecord>,
    pub test: Vec<PvRecord>,
    pub truth: GroundTruth,
    pub catalogue: Catalogue,
}

pub fn generate_dataset(
    cfg: &SynthConfig,
    seed: u64,
    test_pvs: usize,
) -> Result<SynthDataset, InvalidConfig> {
    let catalogue = build_catalogue(cfg, seed)?;
    let (train, mut queries) = generate_stream(cfg, &catalogue, seed, 0, cfg.num_pvs);
    let (test, test_queries) = generate_stream(cfg, &catalogue, seed, 1, test_pvs);
    queries.extend(test_queries);
    Ok(SynthDataset {
        train,
        test,
        truth: GroundTruth { items: item_truth(cfg, &catalogue), queries },
        catalogue,
    })
}

/// Map from query or item id to its truth row.
pub fn truth_index(rows: &[TruthRow]) -> BTreeMap<&str, &TruthRow> {
    rows.iter().map(|r| (r.item_id.as_str(), r)).collect()
}
