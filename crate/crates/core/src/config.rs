//! Line-oriented pipeline config: `section.key = value`, `#` comments.
//!
//! Every key has a default; a file only lists overrides. Unknown keys and
//! values outside a module's preconditions are rejected at parse time.

use std::collections::BTreeMap;
use std::path::PathBuf;

use thiserror::Error;

use crate::embed::{Objective, SkipGramParams, WalkParams};
use crate::mining::{default_position_weights, FeatureSource};
use crate::synth::SynthConfig;
use crate::train::{PairForm, Relevance, TrainConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("{key}: {reason}")]
    BadValue { key: String, reason: String },
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    Int,
    Real,
    Bool,
    Choice(&'static [&'static str]),
    IntList,
    RealList,
    Names,
    /// Non-negative real or `auto`.
    RealOrAuto,
    /// Positive integer or `auto`.
    IntOrAuto,
    Text,
}

const KEYS: &[(&str, &str, Kind)] = &[
    ("run.seed", "42", Kind::Int),
    ("paths.train_log", "", Kind::Text),
    ("paths.test_log", "", Kind::Text),
    ("paths.truth", "", Kind::Text),
    ("synth.communities", "8", Kind::Int),
    ("synth.items_per_community", "50", Kind::Int),
    ("synth.num_pvs", "5000", Kind::Int),
    ("synth.test_pvs", "500", Kind::Int),
    ("synth.p_in", "0.3", Kind::Real),
    ("synth.p_out", "0.01", Kind::Real),
    ("synth.p_identical", "0.9", Kind::Real),
    ("synth.top_categories", "bags,dress,shirt,shoes", Kind::Names),
    ("synth.leaves_per_community", "3", Kind::Int),
    ("synth.identical_pair_fraction", "0.2", Kind::Real),
    ("synth.channel_dims", "16,8", Kind::IntList),
    ("synth.nuisance_dims", "16", Kind::Int),
    ("synth.nuisance_scale", "1", Kind::Real),
    ("synth.centroid_scale", "1", Kind::Real),
    ("synth.group_scale", "0.5", Kind::Real),
    ("synth.feature_noise", "0.05", Kind::Real),
    ("synth.query_noise", "0.15", Kind::Real),
    ("synth.results_per_pv", "10", Kind::Int),
    ("synth.out_of_community_results", "2", Kind::Int),
    ("synth.switch_rate", "0.2", Kind::Real),
    ("synth.switch_noise", "0", Kind::Real),
    ("synth.users", "200", Kind::Int),
    ("graph.min_edge_weight", "1", Kind::Int),
    ("graph.min_degree", "0", Kind::Int),
    ("walks.walks_per_node", "10", Kind::Int),
    ("walks.walk_length", "40", Kind::Int),
    ("walks.uniform", "false", Kind::Bool),
    ("embed.dim", "64", Kind::Int),
    ("embed.window", "5", Kind::Int),
    ("embed.epochs", "5", Kind::Int),
    ("embed.lr0", "0.025", Kind::Real),
    ("embed.objective", "hs", Kind::Choice(&["hs", "ns"])),
    ("embed.negatives", "5", Kind::Int),
    ("embed.shuffle", "false", Kind::Bool),
    ("cluster.item_k", "auto", Kind::IntOrAuto),
    ("cluster.leaf_k", "100", Kind::Int),
    ("cluster.max_iters", "100", Kind::Int),
    ("mine.gamma", "auto", Kind::RealOrAuto),
    ("mine.epsilon", "auto", Kind::RealOrAuto),
    ("mine.channel_weights", "", Kind::RealList),
    ("mine.max_per_pv", "16", Kind::Int),
    ("mine.list_len", "10", Kind::Int),
    ("mine.position_weights", "", Kind::RealList),
    ("mine.virtual_source", "query", Kind::Choice(&["query", "clicked", "both"])),
    ("category.alpha", "1", Kind::Real),
    ("category.beta", "1", Kind::Real),
    ("category.eta_simple", "1", Kind::Real),
    ("category.eta_hard", "2", Kind::Real),
    ("category.lr", "0.001", Kind::Real),
    ("category.momentum", "0.9", Kind::Real),
    ("category.batch_size", "64", Kind::Int),
    ("category.epochs", "10", Kind::Int),
    ("category.hidden_dim", "64", Kind::Int),
    ("category.embed_dim", "512", Kind::Int),
    ("category.pair_form", "hinge", Kind::Choice(&["hinge", "printed"])),
    ("category.ensemble_weight", "0.5", Kind::Real),
    ("feature.lambda", "1", Kind::Real),
    ("feature.lr", "0.01", Kind::Real),
    ("feature.momentum", "0.9", Kind::Real),
    ("feature.batch_size", "64", Kind::Int),
    ("feature.epochs", "10", Kind::Int),
    ("feature.hidden_dim", "64", Kind::Int),
    ("feature.embed_dim", "512", Kind::Int),
    ("feature.relevance", "neg-distance", Kind::Choice(&["neg-distance", "distance"])),
    ("feature.normalize", "false", Kind::Bool),
    ("eval.top_k", "20", Kind::Int),
    ("eval.category_filter", "none", Kind::Choice(&["none", "true", "predicted"])),
];

fn lookup(key: &str) -> Option<&'static (&'static str, &'static str, Kind)> {
    KEYS.iter().find(|(k, _, _)| *k == key)
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn check(kind: Kind, v: &str) -> Result<String, String> {
    let real = |s: &str| match s.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(format!("expected a finite number, got {s:?}")),
    };
    let int = |s: &str| s.parse::<u64>().map_err(|_| format!("expected a non-negative integer, got {s:?}"));
    match kind {
        Kind::Int => int(v).map(|x| x.to_string()),
        Kind::Real => real(v).map(|x| x.to_string()),
        Kind::Bool => match v {
            "true" | "false" => Ok(v.to_string()),
            _ => Err(format!("expected true or false, got {v:?}")),
        },
        Kind::Choice(opts) => {
            if opts.contains(&v) {
                Ok(v.to_string())
            } else {
                Err(format!("expected one of {}, got {v:?}", opts.join("|")))
            }
        }
        Kind::IntList => Ok(list(v).map(int).collect::<Result<Vec<_>, _>>()?.iter().map(u64::to_string).collect::<Vec<_>>().join(",")),
        Kind::RealList => Ok(list(v).map(real).collect::<Result<Vec<_>, _>>()?.iter().map(f64::to_string).collect::<Vec<_>>().join(",")),
        Kind::Names => Ok(list(v).collect::<Vec<_>>().join(",")),
        Kind::RealOrAuto if v == "auto" => Ok(v.to_string()),
        Kind::RealOrAuto => real(v).and_then(|x| if x >= 0.0 { Ok(x.to_string()) } else { Err("must be >= 0".into()) }),
        Kind::IntOrAuto if v == "auto" => Ok(v.to_string()),
        Kind::IntOrAuto => int(v).and_then(|x| if x >= 1 { Ok(x.to_string()) } else { Err("must be >= 1".into()) }),
        Kind::Text => Ok(v.to_string()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|(k, d, _)| (*k, d.to_string())).collect() }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax { line: i + 1, reason: "expected `section.key = value`".into() });
            };
            let k = k.trim();
            if !k.contains('.') {
                return Err(ConfigError::Syntax { line: i + 1, reason: format!("key {k:?} has no section") });
            }
            cfg.set_raw(k, v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set_raw(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let (k, _, kind) = lookup(key).ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        let v = check(*kind, value).map_err(|reason| ConfigError::BadValue { key: key.to_string(), reason })?;
        self.values.insert(k, v);
        Ok(())
    }

    /// Sets one key and revalidates the whole config.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let before = self.clone();
        self.set_raw(key, value)?;
        if let Err(e) = self.validate() {
            *self = before;
            return Err(e);
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Every key in a fixed order, one per line.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (k, _, _) in KEYS {
            let s = k.split('.').next().unwrap_or("");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = s;
            }
            out.push_str(&format!("{k} = {}\n", self.values[k]));
        }
        out
    }

    fn raw(&self, key: &str) -> &str {
        self.values.get(key).unwrap_or_else(|| panic!("config key {key} is not registered"))
    }

    fn usize(&self, key: &str) -> usize {
        self.raw(key).parse().expect("validated integer")
    }

    fn real(&self, key: &str) -> f64 {
        self.raw(key).parse().expect("validated number")
    }

    fn flag(&self, key: &str) -> bool {
        self.raw(key) == "true"
    }

    fn reals(&self, key: &str) -> Vec<f64> {
        list(self.raw(key)).map(|s| s.parse().expect("validated number")).collect()
    }

    fn auto_real(&self, key: &str) -> Option<f64> {
        match self.raw(key) {
            "auto" => None,
            v => Some(v.parse().expect("validated number")),
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    fn bad(key: &str, reason: impl Into<String>) -> ConfigError {
        ConfigError::BadValue { key: key.to_string(), reason: reason.into() }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        self.synth().validate().map_err(|e| Self::bad("synth", e.0))?;
        let positive = [
            "walks.walks_per_node",
            "walks.walk_length",
            "embed.dim",
            "embed.window",
            "cluster.leaf_k",
            "cluster.max_iters",
            "mine.max_per_pv",
            "eval.top_k",
            "synth.test_pvs",
        ];
        for k in positive {
            if self.usize(k) == 0 {
                return Err(Self::bad(k, "must be >= 1"));
            }
        }
        if self.real("embed.lr0") <= 0.0 {
            return Err(Self::bad("embed.lr0", "must be > 0"));
        }
        if self.raw("embed.objective") == "ns" && self.usize("embed.negatives") == 0 {
            return Err(Self::bad("embed.negatives", "must be >= 1 for negative sampling"));
        }
        let n = self.usize("mine.list_len");
        if n < 2 {
            return Err(Self::bad("mine.list_len", "must be >= 2"));
        }
        let pw = self.reals("mine.position_weights");
        if !pw.is_empty() && (pw.len() != n || pw.iter().any(|w| *w <= 0.0)) {
            return Err(Self::bad("mine.position_weights", format!("need {n} positive weights")));
        }
        let cw = self.reals("mine.channel_weights");
        if !cw.is_empty() && (cw.iter().any(|w| *w < 0.0) || cw.iter().all(|w| *w == 0.0)) {
            return Err(Self::bad("mine.channel_weights", "non-negative and not all zero"));
        }
        let w = self.real("category.ensemble_weight");
        if !(0.0..=1.0).contains(&w) {
            return Err(Self::bad("category.ensemble_weight", "must lie in [0, 1]"));
        }
        self.category_train().validate().map_err(|e| Self::bad("category", e.to_string()))?;
        self.feature_train().validate().map_err(|e| Self::bad("feature", e.to_string()))?;
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.raw("run.seed").parse().expect("validated integer")
    }

    pub fn train_log(&self) -> Option<PathBuf> {
        self.path("paths.train_log")
    }

    pub fn test_log(&self) -> Option<PathBuf> {
        self.path("paths.test_log")
    }

    pub fn truth_path(&self) -> Option<PathBuf> {
        self.path("paths.truth")
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            communities: self.usize("synth.communities"),
            items_per_community: self.usize("synth.items_per_community"),
            num_pvs: self.usize("synth.num_pvs"),
            p_in: self.real("synth.p_in"),
            p_out: self.real("synth.p_out"),
            p_identical: self.real("synth.p_identical"),
            top_categories: list(self.raw("synth.top_categories")).map(String::from).collect(),
            leaves_per_community: self.usize("synth.leaves_per_community"),
            identical_pair_fraction: self.real("synth.identical_pair_fraction"),
            channel_dims: list(self.raw("synth.channel_dims")).map(|s| s.parse().expect("validated")).collect(),
            nuisance_dims: self.usize("synth.nuisance_dims"),
            nuisance_scale: self.real("synth.nuisance_scale"),
            centroid_scale: self.real("synth.centroid_scale"),
            group_scale: self.real("synth.group_scale"),
            feature_noise: self.real("synth.feature_noise"),
            query_noise: self.real("synth.query_noise"),
            results_per_pv: self.usize("synth.results_per_pv"),
            out_of_community_results: self.usize("synth.out_of_community_results"),
            switch_rate: self.real("synth.switch_rate"),
            switch_noise: self.real("synth.switch_noise"),
            users: self.usize("synth.users"),
        }
    }

    pub fn test_pvs(&self) -> usize {
        self.usize("synth.test_pvs")
    }

    pub fn prune(&self) -> (u64, usize) {
        (self.usize("graph.min_edge_weight") as u64, self.usize("graph.min_degree"))
    }

    pub fn walks(&self) -> WalkParams {
        WalkParams {
            walks_per_node: self.usize("walks.walks_per_node"),
            walk_length: self.usize("walks.walk_length"),
            seed: self.seed(),
            uniform: self.flag("walks.uniform"),
        }
    }

    pub fn skipgram(&self) -> SkipGramParams {
        SkipGramParams {
            dim: self.usize("embed.dim"),
            window: self.usize("embed.window"),
            epochs: self.usize("embed.epochs"),
            lr0: self.real("embed.lr0"),
            objective: match self.raw("embed.objective") {
                "ns" => Objective::NegSampling { negatives: self.usize("embed.negatives") },
                _ => Objective::HierSoftmax,
            },
            seed: self.seed(),
            shuffle: self.flag("embed.shuffle"),
        }
    }

    /// `None` means the node-count-based default.
    pub fn item_k(&self) -> Option<usize> {
        match self.raw("cluster.item_k") {
            "auto" => None,
            v => Some(v.parse().expect("validated integer")),
        }
    }

    pub fn leaf_k(&self) -> usize {
        self.usize("cluster.leaf_k")
    }

    pub fn max_iters(&self) -> usize {
        self.usize("cluster.max_iters")
    }

    /// Explicit thresholds; `None` means derive them from the log.
    pub fn thresholds(&self) -> (Option<f64>, Option<f64>) {
        (self.auto_real("mine.gamma"), self.auto_real("mine.epsilon"))
    }

    /// Explicit channel weights, or `None` for all ones.
    pub fn channel_weights(&self) -> Option<Vec<f64>> {
        let w = self.reals("mine.channel_weights");
        (!w.is_empty()).then_some(w)
    }

    pub fn max_per_pv(&self) -> usize {
        self.usize("mine.max_per_pv")
    }

    pub fn list_len(&self) -> usize {
        self.usize("mine.list_len")
    }

    pub fn position_weights(&self) -> Vec<f64> {
        let w = self.reals("mine.position_weights");
        if w.is_empty() {
            default_position_weights(self.list_len())
        } else {
            w
        }
    }

    pub fn virtual_source(&self) -> FeatureSource {
        self.raw("mine.virtual_source").parse().expect("validated choice")
    }

    pub fn category_train(&self) -> TrainConfig {
        TrainConfig {
            alpha: self.real("category.alpha"),
            beta: self.real("category.beta"),
            eta_simple: self.real("category.eta_simple"),
            eta_hard: self.real("category.eta_hard"),
            learning_rate: self.real("category.lr"),
            momentum: self.real("category.momentum"),
            batch_size: self.usize("category.batch_size"),
            epochs: self.usize("category.epochs"),
            seed: self.seed(),
            hidden_dim: self.usize("category.hidden_dim"),
            embed_dim: self.usize("category.embed_dim"),
            pair_form: match self.raw("category.pair_form") {
                "printed" => PairForm::Printed,
                _ => PairForm::Hinge,
            },
            ..TrainConfig::default()
        }
    }

    pub fn ensemble_weight(&self) -> f64 {
        self.real("category.ensemble_weight")
    }

    pub fn feature_train(&self) -> TrainConfig {
        TrainConfig {
            lambda: self.real("feature.lambda"),
            learning_rate: self.real("feature.lr"),
            momentum: self.real("feature.momentum"),
            batch_size: self.usize("feature.batch_size"),
            epochs: self.usize("feature.epochs"),
            seed: self.seed(),
            hidden_dim: self.usize("feature.hidden_dim"),
            embed_dim: self.usize("feature.embed_dim"),
            relevance: match self.raw("feature.relevance") {
                "distance" => Relevance::Distance,
                _ => Relevance::NegDistance,
            },
            normalize_embeddings: self.flag("feature.normalize"),
            ..TrainConfig::default()
        }
    }

    pub fn top_k(&self) -> usize {
        self.usize("eval.top_k")
    }

    pub fn category_filter(&self) -> &str {
        self.raw("eval.category_filter")
    }
}
