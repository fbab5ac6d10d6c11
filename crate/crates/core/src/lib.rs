//! Virtual ID click-data pipeline: page-view logs, co-click graphs, node
//! embeddings, Virtual ID clustering, sample mining, network training and
//! evaluation.

pub mod embed;
pub mod graph;
pub mod mining;
pub mod pvlog;
pub mod seed;
pub mod synth;
pub mod train;
pub mod vid;
pub mod eval;
pub mod config;
pub mod pipeline;
