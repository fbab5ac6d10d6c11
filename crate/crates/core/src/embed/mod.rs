//! DeepWalk-style node embeddings: truncated random walks over a co-click
//! graph followed by skip-gram training with hierarchical softmax (default)
//! or negative sampling.

mod code_tree;
mod skipgram;
mod walks;

use std::fmt::Write as _;

use thiserror::Error;

pub use code_tree::CodeTree;
pub use skipgram::{
    hs_leaf_probability, hs_pair_loss, ns_pair_loss, train_skipgram, Objective, SkipGramParams,
    TrainReport,
};
pub use walks::{context_pairs, generate_walks, WalkCorpus, WalkParams};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("empty vocabulary")]
    EmptyVocabulary,
    #[error("empty walk corpus")]
    EmptyCorpus,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("malformed embedding file, line {line}: {reason}")]
    Format { line: usize, reason: String },
}

/// Learned node vectors (row-major, one row per node) plus the output-side
/// parameters of the training objective.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub nodes: Vec<String>,
    pub dim: usize,
    pub vectors: Vec<f64>,
    /// Inner-node vectors (hierarchical softmax) or context vectors
    /// (negative sampling). Not persisted by [`EmbeddingTable::to_text`].
    pub output: Vec<f64>,
}

impl EmbeddingTable {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn index_of(&self, node: &str) -> Option<usize> {
        self.nodes.binary_search_by(|n| n.as_str().cmp(node)).ok()
    }

    /// Text format: `node_count dim` header, then `key v1 .. vd` per node.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.nodes.len(), self.dim);
        for (i, node) in self.nodes.iter().enumerate() {
            s.push_str(node);
            for x in self.vector(i) {
                write!(s, " {x}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, EmbedError> {
        let fail = |line: usize, reason: &str| EmbedError::Format { line, reason: reason.into() };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| fail(1, "missing header"))?;
        let nums: Vec<usize> =
            header.split_whitespace().map(str::parse).collect::<Result<_, _>>().map_err(|_| fail(1, "bad header"))?;
        let [count, dim] = nums[..] else { return Err(fail(1, "header needs two integers")) };
        let mut rows: Vec<(String, Vec<f64>)> = Vec::with_capacity(count);
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap().to_string();
            let v: Vec<f64> = parts
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|_| fail(i + 1, "bad float"))?;
            if v.len() != dim {
                return Err(fail(i + 1, "wrong dimension"));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(fail(i + 1, "non-finite value"));
            }
            rows.push((key, v));
        }
        if rows.len() != count {
            return Err(fail(0, "row count disagrees with header"));
        }
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        if rows.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(fail(0, "duplicate node key"));
        }
        Ok(Self {
            nodes: rows.iter().map(|r| r.0.clone()).collect(),
            dim,
            vectors: rows.into_iter().flat_map(|r| r.1).collect(),
            output: Vec::new(),
        })
    }
}
