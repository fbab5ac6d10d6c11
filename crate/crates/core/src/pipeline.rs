//! File-wired pipeline stages. Each stage reads the outputs of earlier stages
//! under the output root and writes its own fixed subdirectory. Outputs are
//! staged in a temporary directory and renamed into place only on success.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::config::PipelineConfig;
use crate::embed::{generate_walks, train_skipgram, EmbeddingTable};
use crate::eval::{retrieve, IdenticalSets, MetricsReport, Rankings, RetrievalIndex};
use crate::graph::{project_coclick_par, prune, CoClickGraph, Level};
use crate::mining::{
    from_jsonl, mine_all, mine_virtual_samples, suggest_thresholds, to_jsonl, CategoryVocab, ClassSample,
    ListSample, MiningParams, PairSample, Triplet, TripletParams,
};
use crate::pvlog::{parse_pvlog_str, write_pvlog, Features, PvRecord};
use crate::synth::{generate_dataset, read_truth, TruthKind, TruthRow};
use crate::train::{
    predict_category, train_category, train_feature, CategoryNet, CategorySamples, Checkpoint, FeatureNet,
    FeatureSamples, NetDims, TrainError,
};
use crate::vid::{cluster_embeddings, item_default_k, map_vid_to_top_category, VidCategoryMap, VirtualIdAssignment};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Ingest,
    Graph,
    Embed,
    Cluster,
    Map,
    Mine,
    TrainCategory,
    TrainFeature,
    EvalCategory,
    EvalRetrieval,
    E2e,
}

impl Stage {
    pub const ALL: [Stage; 12] = [
        Stage::Synth,
        Stage::Ingest,
        Stage::Graph,
        Stage::Embed,
        Stage::Cluster,
        Stage::Map,
        Stage::Mine,
        Stage::TrainCategory,
        Stage::TrainFeature,
        Stage::EvalCategory,
        Stage::EvalRetrieval,
        Stage::E2e,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Graph => "graph",
            Stage::Embed => "embed",
            Stage::Cluster => "cluster",
            Stage::Map => "map",
            Stage::Mine => "mine",
            Stage::TrainCategory => "train-category",
            Stage::TrainFeature => "train-feature",
            Stage::EvalCategory => "eval-category",
            Stage::EvalRetrieval => "eval-retrieval",
            Stage::E2e => "e2e",
        }
    }

    /// Output subdirectory under the root.
    pub fn dir(&self) -> &'static str {
        match self {
            Stage::TrainCategory => "train_category",
            Stage::TrainFeature => "train_feature",
            Stage::EvalCategory => "eval_category",
            Stage::EvalRetrieval => "eval_retrieval",
            s => s.as_str(),
        }
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Stage::ALL.into_iter().find(|st| st.as_str() == s).ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ErrorCode {
    InvalidConfig,
    MissingInput,
    InvalidInput,
    Training,
    Io,
}

impl ErrorCode {
    pub fn exit_code(&self) -> i32 {
        match self {
            ErrorCode::InvalidConfig => 2,
            ErrorCode::MissingInput => 3,
            ErrorCode::InvalidInput => 4,
            ErrorCode::Training => 5,
            ErrorCode::Io => 6,
        }
    }
}

/// A stage failure. Displays as one JSON line.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageError {
    pub stage: &'static str,
    pub code: ErrorCode,
    pub message: String,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serde_json::to_string(self).expect("error serializes"))
    }
}

impl std::error::Error for StageError {}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub out: PathBuf,
    pub strict: bool,
}

struct Ctx<'a> {
    p: &'a Pipeline,
    stage: Stage,
}

impl Ctx<'_> {
    fn err(&self, code: ErrorCode, message: impl fmt::Display) -> StageError {
        StageError { stage: self.stage.as_str(), code, message: message.to_string() }
    }

    fn path(&self, stage: Stage, file: &str) -> PathBuf {
        self.p.out.join(stage.dir()).join(file)
    }

    fn read(&self, path: &Path) -> Result<String, StageError> {
        if !path.is_file() {
            return Err(self.err(ErrorCode::MissingInput, format!("missing input {}", path.display())));
        }
        fs::read_to_string(path).map_err(|e| self.err(ErrorCode::Io, format!("{}: {e}", path.display())))
    }

    fn read_from(&self, stage: Stage, file: &str) -> Result<String, StageError> {
        self.read(&self.path(stage, file))
    }

    fn invalid(&self, path: impl fmt::Display, e: impl fmt::Display) -> StageError {
        self.err(ErrorCode::InvalidInput, format!("{path}: {e}"))
    }

    fn records(&self, path: &Path) -> Result<Vec<PvRecord>, StageError> {
        let text = self.read(path)?;
        parse_pvlog_str(&text, true).map(|o| o.records).map_err(|e| self.invalid(path.display(), e))
    }

    fn train_records(&self) -> Result<Vec<PvRecord>, StageError> {
        self.records(&self.path(Stage::Ingest, "train.jsonl"))
    }

    fn test_records(&self) -> Result<Vec<PvRecord>, StageError> {
        self.records(&self.path(Stage::Ingest, "test.jsonl"))
    }

    fn graph(&self, level: Level) -> Result<CoClickGraph, StageError> {
        let f = format!("{}.json", level.as_str());
        let text = self.read_from(Stage::Graph, &f)?;
        CoClickGraph::from_json(&text).map_err(|e| self.invalid(&f, e))
    }

    fn embedding(&self, level: Level) -> Result<EmbeddingTable, StageError> {
        let f = format!("{}.txt", level.as_str());
        let text = self.read_from(Stage::Embed, &f)?;
        EmbeddingTable::from_text(&text).map_err(|e| self.invalid(&f, e))
    }

    fn assignment(&self, level: Level) -> Result<VirtualIdAssignment, StageError> {
        let f = format!("{}.jsonl", level.as_str());
        let text = self.read_from(Stage::Cluster, &f)?;
        VirtualIdAssignment::from_jsonl(&text, level).map_err(|e| self.invalid(&f, e))
    }

    fn vid_map(&self, level: Level) -> Result<VidCategoryMap, StageError> {
        let f = format!("{}.json", level.as_str());
        let text = self.read_from(Stage::Map, &f)?;
        VidCategoryMap::from_json(&text).map_err(|e| self.invalid(&f, e))
    }

    fn vocab(&self) -> Result<CategoryVocab, StageError> {
        let text = self.read_from(Stage::Mine, "categories.json")?;
        let names: Vec<String> = serde_json::from_str(&text).map_err(|e| self.invalid("categories.json", e))?;
        Ok(CategoryVocab::new(names))
    }

    fn samples<T: for<'de> serde::Deserialize<'de>>(&self, file: &str) -> Result<Vec<T>, StageError> {
        let text = self.read_from(Stage::Mine, file)?;
        from_jsonl(&text).map_err(|e| self.invalid(file, e))
    }

    fn checkpoint(&self, stage: Stage) -> Result<Checkpoint, StageError> {
        let path = self.path(stage, "model.bin");
        if !path.is_file() {
            return Err(self.err(ErrorCode::MissingInput, format!("missing input {}", path.display())));
        }
        let bytes = fs::read(&path).map_err(|e| self.err(ErrorCode::Io, e))?;
        Checkpoint::read_from(bytes.as_slice()).map_err(|e| self.invalid(path.display(), e))
    }

    fn truth(&self) -> Result<Vec<TruthRow>, StageError> {
        let path = self.p.config.truth_path().unwrap_or_else(|| self.path(Stage::Synth, "truth.jsonl"));
        let text = self.read(&path)?;
        read_truth(&text).map_err(|e| self.invalid(path.display(), e))
    }
}

/// Collects a stage's files and moves them into place on commit.
struct Output {
    tmp: PathBuf,
    dest: PathBuf,
    files: Vec<PathBuf>,
}

impl Output {
    fn new(ctx: &Ctx) -> Result<Self, StageError> {
        let dest = ctx.p.out.join(ctx.stage.dir());
        let tmp = ctx.p.out.join(format!(".{}.partial", ctx.stage.dir()));
        let io = |e: std::io::Error| ctx.err(ErrorCode::Io, format!("{}: {e}", tmp.display()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(io)?;
        }
        fs::create_dir_all(&tmp).map_err(io)?;
        Ok(Self { tmp, dest, files: Vec::new() })
    }

    fn write(&mut self, ctx: &Ctx, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), StageError> {
        let path = self.tmp.join(name);
        fs::write(&path, bytes).map_err(|e| ctx.err(ErrorCode::Io, format!("{}: {e}", path.display())))?;
        self.files.push(self.dest.join(name));
        Ok(())
    }

    fn commit(self, ctx: &Ctx) -> Result<Vec<PathBuf>, StageError> {
        let io = |e: std::io::Error| ctx.err(ErrorCode::Io, format!("{}: {e}", self.dest.display()));
        if self.dest.exists() {
            fs::remove_dir_all(&self.dest).map_err(io)?;
        }
        fs::rename(&self.tmp, &self.dest).map_err(io)?;
        Ok(self.files)
    }

    fn discard(&self) {
        let _ = fs::remove_dir_all(&self.tmp);
    }
}

fn channel_weights(cfg: &PipelineConfig, sample: &Features) -> Vec<f64> {
    cfg.channel_weights().unwrap_or_else(|| vec![1.0; sample.len()])
}

#[derive(Serialize)]
struct IngestSummary {
    train_records: usize,
    test_records: usize,
    rejected: Vec<String>,
}

#[derive(Serialize)]
struct MineSummary {
    gamma: f64,
    epsilon: f64,
    channel_weights: Vec<f64>,
    counts: BTreeMap<&'static str, usize>,
    skipped_virtual_item: usize,
    skipped_virtual_leaf: usize,
}

#[derive(Serialize)]
struct Prediction<'a> {
    query_id: &'a str,
    predicted: &'a str,
    truth: &'a str,
}

#[derive(Serialize)]
struct Ranking<'a> {
    query_id: &'a str,
    items: &'a [String],
}

const LEVELS: [Level; 2] = [Level::Item, Level::LeafCategory];

impl Pipeline {
    pub fn new(config: PipelineConfig, out: impl Into<PathBuf>, strict: bool) -> Self {
        Self { config, out: out.into(), strict }
    }

    /// Runs one stage and returns the files it wrote.
    pub fn run(&self, stage: Stage) -> Result<Vec<PathBuf>, StageError> {
        let ctx = Ctx { p: self, stage };
        if stage == Stage::E2e {
            return self.e2e(&ctx);
        }
        fs::create_dir_all(&self.out).map_err(|e| ctx.err(ErrorCode::Io, format!("{}: {e}", self.out.display())))?;
        let mut out = Output::new(&ctx)?;
        log::info!("stage {stage} starting");
        let res = match stage {
            Stage::Synth => self.synth(&ctx, &mut out),
            Stage::Ingest => self.ingest(&ctx, &mut out),
            Stage::Graph => self.graph(&ctx, &mut out),
            Stage::Embed => self.embed(&ctx, &mut out),
            Stage::Cluster => self.cluster(&ctx, &mut out),
            Stage::Map => self.map(&ctx, &mut out),
            Stage::Mine => self.mine(&ctx, &mut out),
            Stage::TrainCategory => self.train_category(&ctx, &mut out),
            Stage::TrainFeature => self.train_feature(&ctx, &mut out),
            Stage::EvalCategory => self.eval_category(&ctx, &mut out).map(|_| ()),
            Stage::EvalRetrieval => self.eval_retrieval(&ctx, &mut out).map(|_| ()),
            Stage::E2e => unreachable!(),
        };
        match res {
            Ok(()) => {
                let files = out.commit(&ctx)?;
                log::info!("stage {stage} wrote {} files", files.len());
                Ok(files)
            }
            Err(e) => {
                out.discard();
                Err(e)
            }
        }
    }

    fn synth(&self, ctx: &Ctx, out: &mut Output) -> Result<(), StageError> {
        let cfg = &self.config;
        let ds = generate_dataset(&cfg.synth(), cfg.seed(), cfg.test_pvs())
            .map_err(|e| ctx.err(ErrorCode::InvalidConfig, e.0))?;
        let mut buf = Vec::new();
        write_pvlog(&mut buf, &ds.train).expect("in-memory write");
        out.write(ctx, "train.jsonl", &buf)?;
        buf.clear();
        write_pvlog(&mut buf, &ds.test).expect("in-memory write");
        out.write(ctx, "test.jsonl", &buf)?;
        buf.clear();
        ds.truth.write_jsonl(&mut buf).expect("in-memory write");
        out.write(ctx, "truth.jsonl", &buf)
    }

    fn ingest(&self, ctx: &Ctx, out: &mut Output) -> Result<(), StageError> {
        let cfg = &self.config;
        let train_path = cfg.train_log().unwrap_or_else(|| ctx.path(Stage::Synth, "train.jsonl"));
        let test_path = cfg.test_log().unwrap_or_else(|| ctx.path(Stage::Synth, "test.jsonl"));
        let train_text = ctx.read(&train_path)?;
        let test_text = ctx.read(&test_path)?;
        let mut rejected = Vec::new();
        let mut parsed = Vec::new();
        for (path, text) in [(&train_path, &train_text), (&test_path, &test_text)] {
            let o = parse_pvlog_str(text, self.strict).map_err(|e| ctx.invalid(path.display(), e))?;
            for r in &o.rejected {
                log::warn!("{}: {r}", path.display());
                rejected.push(format!("{}: {r}", path.display()));
            }
            parsed.push(o.records);
        }
        let test = parsed.pop().unwrap_or_default();
        let train = parsed.pop().unwrap_or_default();
        if train.is_empty() {
            return Err(ctx.err(ErrorCode::InvalidInput, "training log has no valid records"));
        }
        let mut buf = Vec::new();
        write_pvlog(&mut buf, &train).expect("in-memory write");
        out.write(ctx, "train.jsonl", &buf)?;
        buf.clear();
        write_pvlog(&mut buf, &test).expect("in-memory write");
        out.write(ctx, "test.jsonl", &buf)?;
        let summary = IngestSummary { train_records: train.len(), test_records: test.len(), rejected };
        out.write(ctx, "summary.json", serde_json::to_string_pretty(&summary).expect("summary serializes"))
    }

    fn graph(&self, ctx: &Ctx, out: &mut Output) -> Result<(), StageError> {
        let records = ctx.train_records()?;
        let (min_w, min_deg) = self.config.prune();
        for level in LEVELS {
            let g = prune(&project_coclick_par(&records, level), min_w, min_deg);
            log::info!("{} graph: {} nodes, {} edges", level.as_str(), g.node_count(), g.edge_count());
            out.write(ctx, &format!("{}.json", level.as_str()), g.to_json())?;
        }
        Ok(())
    }

    fn embed(&self, ctx: &Ctx, out: &mut Output) -> Result<(), StageError> {
        let mut losses = String::from("level,epoch,loss\n");
        for level in LEVELS {
            let g = ctx.graph(level)?;
            let corpus = generate_walks(&g, self.config.walks());
            let (table, report) = train_skipgram(&corpus, &self.config.skipgram())
                .map_err(|e| ctx.err(ErrorCode::InvalidInput, format!("{} graph: {e}", level.as_str())))?;
            for (i, l) in report.epoch_losses.iter().enumerate() {
                losses.push_str(&format!("{},{},{l}\n", level.as_str(), i + 1));
            }
            out.write(ctx, &format!("{}.txt", level.as_str()), table.to_text())?;
        }
        out.write(ctx, "loss.csv", losses)
    }

    fn cluster(&self, ctx: &Ctx, out: &mut Output) -> Result<(), StageError> {
        for level in LEVELS {
            let table = ctx.embedding(level)?;
            let k = match level {
                Level::Item => self.config.item_k().unwrap_or_else(|| item_default_k(table.len())),
                Level::LeafCategory => self.config.leaf_k(),
            };
            let a = cluster_embeddings(&table, k, self.config.seed(), self.config.max_iters(), level)
                .map_err(|e| ctx.err(ErrorCode::InvalidInput, format!("{} embeddings: {e}", level.as_str())))?;
            out.write(ctx, &format!("{}.jsonl", level.as_str()), a.to_jsonl())?;
        }
        Ok(())
    }

    fn map(&self, ctx: &Ctx, out: &mut Output) -> Result<(), StageError> {
        let records = ctx.train_records()?;
        for level in LEVELS {
            let a = ctx.assignment(level)?;
            let m = map_vid_to_top_category(&a, &records);
            out.write(ctx, &format!("{}.json", level.as_str()), m.to_json())?;
        }
        Ok(())
    }

    fn mine(&self, ctx: &Ctx, out: &mut Output) -> Result<(), StageError> {
        let cfg = &self.config;
        let records = ctx.train_records()?;
        let item = ctx.assignment(Level::Item)?;
        let leaf = ctx.assignment(Level::LeafCategory)?;
        let weights = channel_weights(cfg, &records[0].query_features);
        let bad = |e: crate::mining::MiningError| ctx.err(ErrorCode::InvalidInput, e);
        let (gamma, epsilon) = match cfg.thresholds() {
            (Some(g), Some(e)) => (g, e),
            (g, e) => {
                let (sg, se) = suggest_thresholds(&records, &weights).map_err(bad)?;
                (g.unwrap_or(sg), e.unwrap_or(se))
            }
        };
        let params = MiningParams {
            triplet: TripletParams { gamma, epsilon, channel_weights: weights.clone(), max_per_pv: cfg.max_per_pv() },
            list_len: cfg.list_len(),
            position_weights: cfg.position_weights(),
            virtual_source: cfg.virtual_source(),
        };
        let vocab = CategoryVocab::from_records(&records);
        let mined = mine_all(&records, &vocab, None, &params).map_err(bad)?;
        let (v_item, skipped_item) = mine_virtual_samples(&records, &item, params.virtual_source);
        let (v_leaf, skipped_leaf) = mine_virtual_samples(&records, &leaf, params.virtual_source);

        out.write(ctx, "categories.json", serde_json::to_string(vocab.names()).expect("names serialize"))?;
        out.write(ctx, "virtual_item.jsonl", to_jsonl(&v_item))?;
        out.write(ctx, "virtual_leaf.jsonl", to_jsonl(&v_leaf))?;
        out.write(ctx, "category.jsonl", to_jsonl(&mined.category_samples))?;
        out.write(ctx, "pairs.jsonl", mined.pairs_jsonl())?;
        out.write(ctx, "triplets.jsonl", mined.triplets_jsonl())?;
        out.write(ctx, "lists.jsonl", mined.lists_jsonl())?;
        let counts = BTreeMap::from([
            ("virtual_item", v_item.len()),
            ("virtual_leaf", v_leaf.len()),
            ("category", mined.category_samples.len()),
            ("pairs", mined.pairs.len()),
            ("triplets", mined.triplets.len()),
            ("lists", mined.lists.len()),
        ]);
        log::info!("mined {counts:?}");
        let summary = MineSummary {
            gamma,
            epsilon,
            channel_weights: weights,
            counts,
            skipped_virtual_item: skipped_item,
            skipped_virtual_leaf: skipped_leaf,
        };
        out.write(ctx, "summary.json", serde_json::to_string_pretty(&summary).expect("summary serializes"))
    }

    fn train_error(ctx: &Ctx, e: TrainError) -> StageError {
        let code = match e {
            TrainError::InvalidConfig(_) => ErrorCode::InvalidConfig,
            TrainError::NoSamples => ErrorCode::InvalidInput,
            _ => ErrorCode::Training,
        };
        ctx.err(code, e)
    }

    fn input_dim(ctx: &Ctx, samples: &[&Features]) -> Result<usize, StageError> {
        samples
            .first()
            .map(|f| f.iter().map(Vec::len).sum())
            .ok_or_else(|| ctx.err(ErrorCode::InvalidInput, "no training samples"))
    }

    fn train_category(&self, ctx: &Ctx, out: &mut Output) -> Result<(), StageError> {
        let virtual_samples: Vec<ClassSample> = ctx.samples("virtual_leaf.jsonl")?;
        let click_samples: Vec<ClassSample> = ctx.samples("category.jsonl")?;
        let pairs: Vec<PairSample> = ctx.samples("pairs.jsonl")?;
        let vocab = ctx.vocab()?;
        let leaf = ctx.assignment(Level::LeafCategory)?;
        let tc = self.config.category_train();
        let first: Vec<&Features> = virtual_samples.iter().chain(&click_samples).map(|s| &s.features).take(1).collect();
        let dims = NetDims {
            input: Self::input_dim(ctx, &first)?,
            hidden: tc.hidden_dim,
            embed: tc.embed_dim,
            virtual_classes: leaf.k,
            top_classes: vocab.len(),
        };
        let samples = CategorySamples { virtual_samples: &virtual_samples, click_samples: &click_samples, pairs: &pairs };
        let trained = train_category(samples, dims, &tc).map_err(|e| Self::train_error(ctx, e))?;
        let ck = Checkpoint::from_category(&trained.net, tc.seed, tc.epochs as u64);
        out.write(ctx, "model.bin", ck.to_bytes())?;
        out.write(ctx, "loss.csv", trained.history.to_csv())
    }

    fn train_feature(&self, ctx: &Ctx, out: &mut Output) -> Result<(), StageError> {
        let virtual_samples: Vec<ClassSample> = ctx.samples("virtual_item.jsonl")?;
        let triplets: Vec<Triplet> = ctx.samples("triplets.jsonl")?;
        let lists: Vec<ListSample> = ctx.samples("lists.jsonl")?;
        let item = ctx.assignment(Level::Item)?;
        let tc = self.config.feature_train();
        let first: Vec<&Features> = virtual_samples
            .iter()
            .map(|s| &s.features)
            .chain(triplets.iter().map(|t| &t.q))
            .chain(lists.iter().map(|l| &l.q))
            .take(1)
            .collect();
        let dims = NetDims {
            input: Self::input_dim(ctx, &first)?,
            hidden: tc.hidden_dim,
            embed: tc.embed_dim,
            virtual_classes: item.k,
            top_classes: 0,
        };
        let samples = FeatureSamples { virtual_samples: &virtual_samples, triplets: &triplets, lists: &lists };
        let trained = train_feature(samples, dims, &tc).map_err(|e| Self::train_error(ctx, e))?;
        let ck = Checkpoint::from_feature(&trained.net, tc.seed, tc.epochs as u64);
        out.write(ctx, "model.bin", ck.to_bytes())?;
        out.write(ctx, "loss.csv", trained.history.to_csv())
    }

    fn query_truth(ctx: &Ctx, records: &[PvRecord]) -> Result<(BTreeMap<String, String>, IdenticalSets), StageError> {
        let rows = ctx.truth()?;
        let mut by_group: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
        let mut query_rows: BTreeMap<&str, &TruthRow> = BTreeMap::new();
        let wanted: BTreeSet<&str> = records.iter().map(|r| r.query_id.as_str()).collect();
        for row in &rows {
            match row.kind {
                TruthKind::Item => {
                    by_group.entry(row.identical_group).or_default().insert(row.item_id.clone());
                }
                TruthKind::Query if wanted.contains(row.item_id.as_str()) => {
                    query_rows.insert(row.item_id.as_str(), row);
                }
                TruthKind::Query => {}
            }
        }
        let mut tops = BTreeMap::new();
        let mut identical = BTreeMap::new();
        for r in records {
            let Some(row) = query_rows.get(r.query_id.as_str()) else { continue };
            tops.insert(r.query_id.clone(), row.top.clone());
            identical.insert(r.query_id.clone(), by_group.get(&row.identical_group).cloned().unwrap_or_default());
        }
        if tops.is_empty() {
            return Err(ctx.err(ErrorCode::InvalidInput, "no test query has a truth row"));
        }
        Ok((tops, identical))
    }

    fn category_predictions(&self, ctx: &Ctx, records: &[PvRecord]) -> Result<BTreeMap<String, String>, StageError> {
        let net: CategoryNet = ctx
            .checkpoint(Stage::TrainCategory)?
            .category_net()
            .map_err(|e| ctx.invalid("train_category/model.bin", e))?;
        let vocab = ctx.vocab()?;
        let map = ctx.vid_map(Level::LeafCategory)?;
        let w = self.config.ensemble_weight();
        let input = net.dims().input;
        let mut preds = BTreeMap::new();
        for r in records {
            let d: usize = r.query_features.iter().map(Vec::len).sum();
            if d != input {
                return Err(ctx.invalid(&r.query_id, format!("query has {d} feature dims, model expects {input}")));
            }
            let (idx, _) = predict_category(&net, &r.query_features, &map, |c| vocab.index(c).ok(), w);
            preds.insert(r.query_id.clone(), vocab.name(idx).to_string());
        }
        Ok(preds)
    }

    fn eval_category(&self, ctx: &Ctx, out: &mut Output) -> Result<MetricsReport, StageError> {
        let records = ctx.test_records()?;
        let (tops, _) = Self::query_truth(ctx, &records)?;
        let preds = self.category_predictions(ctx, &records)?;
        let mut lines = String::new();
        for (q, t) in &tops {
            let p = Prediction { query_id: q, predicted: &preds[q], truth: t };
            lines.push_str(&serde_json::to_string(&p).expect("prediction serializes"));
            lines.push('\n');
        }
        let report = MetricsReport::build(&tops, Some(&preds), None);
        out.write(ctx, "predictions.jsonl", lines)?;
        out.write(ctx, "report.json", report.to_json())?;
        out.write(ctx, "report.txt", report.to_table())?;
        Ok(report)
    }

    fn rankings(&self, ctx: &Ctx, records: &[PvRecord], tops: &BTreeMap<String, String>) -> Result<Rankings, StageError> {
        let net: FeatureNet = ctx
            .checkpoint(Stage::TrainFeature)?
            .feature_net()
            .map_err(|e| ctx.invalid("train_feature/model.bin", e))?;
        let input = net.dims().input;
        let check = |id: &str, f: &Features| {
            let d: usize = f.iter().map(Vec::len).sum();
            if d == input {
                Ok(())
            } else {
                Err(ctx.invalid(id, format!("{d} feature dims, model expects {input}")))
            }
        };
        // The inventory is every item seen in either log.
        let train = ctx.train_records()?;
        let mut items: BTreeMap<&str, (&Features, &str)> = BTreeMap::new();
        for r in train.iter().chain(records) {
            for e in &r.results {
                if !items.contains_key(e.item_id.as_str()) {
                    check(&e.item_id, &e.item_features)?;
                    items.insert(e.item_id.as_str(), (&e.item_features, e.top_category.as_str()));
                }
            }
        }
        let mut index = RetrievalIndex::new(net.dims().embed);
        for (id, (f, top)) in &items {
            index.insert(id, net.embed(f), Some(top.to_string())).map_err(|e| ctx.invalid(id, e))?;
        }
        let filter = self.config.category_filter();
        let predicted = if filter == "predicted" { Some(self.category_predictions(ctx, records)?) } else { None };
        let k = self.config.top_k();
        let mut rankings = Rankings::new();
        for r in records {
            if !tops.contains_key(&r.query_id) {
                continue;
            }
            check(&r.query_id, &r.query_features)?;
            let cat = match filter {
                "true" => tops.get(&r.query_id).cloned(),
                "predicted" => predicted.as_ref().and_then(|p| p.get(&r.query_id).cloned()),
                _ => None,
            };
            let ranked = retrieve(&net.embed(&r.query_features), &index, k, cat.as_deref())
                .map_err(|e| ctx.err(ErrorCode::InvalidInput, e))?;
            rankings.insert(r.query_id.clone(), ranked);
        }
        Ok(rankings)
    }

    fn eval_retrieval(&self, ctx: &Ctx, out: &mut Output) -> Result<(Rankings, IdenticalSets), StageError> {
        let records = ctx.test_records()?;
        let (tops, identical) = Self::query_truth(ctx, &records)?;
        let rankings = self.rankings(ctx, &records, &tops)?;
        let mut lines = String::new();
        for (q, items) in &rankings {
            lines.push_str(&serde_json::to_string(&Ranking { query_id: q, items }).expect("ranking serializes"));
            lines.push('\n');
        }
        let report = MetricsReport::build(&tops, None, Some((&rankings, &identical)));
        out.write(ctx, "rankings.jsonl", lines)?;
        out.write(ctx, "report.json", report.to_json())?;
        out.write(ctx, "report.txt", report.to_table())?;
        Ok((rankings, identical))
    }

    /// Runs every stage in order (synth only when no external training log
    /// is configured) and writes a combined report.
    fn e2e(&self, ctx: &Ctx) -> Result<Vec<PathBuf>, StageError> {
        let wrap = |e: StageError| StageError { stage: Stage::E2e.as_str(), code: e.code, message: format!("{}: {}", e.stage, e.message) };
        let mut files = Vec::new();
        for stage in &Stage::ALL[..11] {
            if *stage == Stage::Synth && self.config.train_log().is_some() {
                continue;
            }
            files.extend(self.run(*stage).map_err(wrap)?);
        }
        fs::create_dir_all(&self.out).map_err(|e| ctx.err(ErrorCode::Io, e))?;
        let mut out = Output::new(ctx)?;
        let res = (|| {
            let records = ctx.test_records()?;
            let (tops, identical) = Self::query_truth(ctx, &records)?;
            let preds = self.category_predictions(ctx, &records)?;
            let rankings = self.rankings(ctx, &records, &tops)?;
            let report = MetricsReport::build(&tops, Some(&preds), Some((&rankings, &identical)));
            out.write(ctx, "report.json", report.to_json())?;
            out.write(ctx, "report.txt", report.to_table())?;
            out.write(ctx, "config.txt", self.config.dump())
        })();
        match res {
            Ok(()) => {
                files.extend(out.commit(ctx)?);
                Ok(files)
            }
            Err(e) => {
                out.discard();
                Err(e)
            }
        }
    }
}
