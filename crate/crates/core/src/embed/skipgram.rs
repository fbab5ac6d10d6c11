use rand::seq::SliceRandom;
use rand::Rng;

use super::code_tree::CodeTree;
use super::walks::{context_pairs, WalkCorpus};
use super::{EmbedError, EmbeddingTable};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    HierSoftmax,
    NegSampling { negatives: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SkipGramParams {
    pub dim: usize,
    pub window: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub objective: Objective,
    pub seed: u64,
    /// Shuffle walk order each epoch with a seeded RNG.
    pub shuffle: bool,
}

impl Default for SkipGramParams {
    fn default() -> Self {
        Self {
            dim: 64,
            window: 5,
            epochs: 5,
            lr0: 0.025,
            objective: Objective::HierSoftmax,
            seed: 0,
            shuffle: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean per-pair loss of each epoch, measured before each update.
    pub epoch_losses: Vec<f64>,
    pub pairs_per_epoch: usize,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))` without overflow.
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Loss `-ln P(leaf | h)` along one hierarchical-softmax path and its
/// gradients with respect to `h` and to each inner-node vector on the path.
pub fn hs_pair_loss(h: &[f64], inner: &[&[f64]], code: &[u8]) -> (f64, Vec<f64>, Vec<Vec<f64>>) {
    let mut loss = 0.0;
    let mut grad_h = vec![0.0; h.len()];
    let mut grad_inner = Vec::with_capacity(inner.len());
    for (v, &bit) in inner.iter().zip(code) {
        let sign = if bit == 0 { 1.0 } else { -1.0 };
        let x = sign * dot(h, v);
        loss -= log_sigmoid(x);
        // d/dx of -ln sigmoid(x) = sigmoid(x) - 1
        let g = (sigmoid(x) - 1.0) * sign;
        for (gh, vi) in grad_h.iter_mut().zip(v.iter()) {
            *gh += g * vi;
        }
        grad_inner.push(h.iter().map(|hi| g * hi).collect());
    }
    (loss, grad_h, grad_inner)
}

/// Probability of reaching `leaf` from input vector `h`.
pub fn hs_leaf_probability(tree: &CodeTree, inner_vectors: &[f64], dim: usize, h: &[f64], leaf: usize) -> f64 {
    tree.path(leaf)
        .iter()
        .zip(tree.code(leaf))
        .map(|(&n, &bit)| {
            let x = dot(h, &inner_vectors[n * dim..(n + 1) * dim]);
            sigmoid(if bit == 0 { x } else { -x })
        })
        .product()
}

/// Negative-sampling loss `-ln s(h.u_pos) - sum ln s(-h.u_neg)` and gradients
/// with respect to `h`, the positive output vector and each negative one.
pub fn ns_pair_loss(h: &[f64], pos: &[f64], negs: &[&[f64]]) -> (f64, Vec<f64>, Vec<Vec<f64>>) {
    let mut grad_h = vec![0.0; h.len()];
    let mut grads = Vec::with_capacity(negs.len() + 1);
    let mut loss = 0.0;
    for (k, u) in std::iter::once(pos).chain(negs.iter().copied()).enumerate() {
        let sign = if k == 0 { 1.0 } else { -1.0 };
        let x = sign * dot(h, u);
        loss -= log_sigmoid(x);
        let g = (sigmoid(x) - 1.0) * sign;
        for (gh, ui) in grad_h.iter_mut().zip(u) {
            *gh += g * ui;
        }
        grads.push(h.iter().map(|hi| g * hi).collect());
    }
    (loss, grad_h, grads)
}

/// Cumulative unigram^0.75 table for negative sampling.
fn noise_distribution(freq: &[u64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut cum: Vec<f64> = freq
        .iter()
        .map(|&f| {
            acc += (f.max(1) as f64).powf(0.75);
            acc
        })
        .collect();
    for c in &mut cum {
        *c /= acc;
    }
    cum
}

/// Trains skip-gram node embeddings on a walk corpus with plain SGD.
///
/// The learning rate decays linearly from `lr0` to `lr0 / 100` over all
/// pairs of all epochs. Input vectors start uniform in `[-0.5/d, 0.5/d]`,
/// output (inner-node or context) vectors start at zero.
pub fn train_skipgram(
    corpus: &WalkCorpus,
    params: &SkipGramParams,
) -> Result<(EmbeddingTable, TrainReport), EmbedError> {
    if corpus.walks.is_empty() || corpus.nodes.is_empty() {
        return Err(EmbedError::EmptyCorpus);
    }
    if params.dim < 2 {
        return Err(EmbedError::InvalidParams("dim must be >= 2".into()));
    }
    if params.window < 1 {
        return Err(EmbedError::InvalidParams("window must be >= 1".into()));
    }
    let d = params.dim;
    let v = corpus.nodes.len();
    let freq = corpus.frequencies();
    let tree = match params.objective {
        Objective::HierSoftmax => Some(CodeTree::build(&freq)?),
        Objective::NegSampling { .. } => None,
    };

    let mut init_rng = seed::rng(params.seed, &[0x5EED]);
    let vectors: Vec<f64> =
        (0..v * d).map(|_| (init_rng.random::<f64>() - 0.5) / d as f64).collect();
    let output_rows = match &tree {
        Some(t) => t.inner_nodes(),
        None => v,
    };
    let mut table = EmbeddingTable {
        nodes: corpus.nodes.clone(),
        dim: d,
        vectors,
        output: vec![0.0; output_rows * d],
    };

    let pairs_per_epoch: usize = corpus
        .walks
        .iter()
        .map(|w| {
            let n = w.len();
            (0..n).map(|i| (i + params.window).min(n - 1) - i.saturating_sub(params.window)).sum::<usize>()
        })
        .sum();
    let total = (pairs_per_epoch * params.epochs).max(1) as f64;
    let noise = noise_distribution(&freq);
    let mut neg_rng = seed::rng(params.seed, &[0x0E6]);
    let mut order: Vec<usize> = (0..corpus.walks.len()).collect();
    let mut report = TrainReport { epoch_losses: Vec::new(), pairs_per_epoch };
    let mut processed = 0usize;
    let mut grad_h = vec![0.0; d];

    for epoch in 0..params.epochs {
        if params.shuffle {
            order.shuffle(&mut seed::rng(params.seed, &[0x5F1E, epoch as u64]));
        }
        let mut epoch_loss = 0.0;
        for &wi in &order {
            for (center, context) in context_pairs(&corpus.walks[wi], params.window) {
                let lr = params.lr0 * (1.0 - 0.99 * processed as f64 / total);
                processed += 1;
                let c = center as usize;
                let h = &mut table.vectors[c * d..(c + 1) * d];
                grad_h.iter_mut().for_each(|g| *g = 0.0);
                match (&tree, params.objective) {
                    (Some(tree), _) => {
                        let ctx = context as usize;
                        for (&node, &bit) in tree.path(ctx).iter().zip(tree.code(ctx)) {
                            let u = &mut table.output[node * d..(node + 1) * d];
                            let sign = if bit == 0 { 1.0 } else { -1.0 };
                            let x = sign * dot(h, u);
                            epoch_loss -= log_sigmoid(x);
                            let g = (sigmoid(x) - 1.0) * sign;
                            for k in 0..d {
                                grad_h[k] += g * u[k];
                                u[k] -= lr * g * h[k];
                            }
                        }
                    }
                    (None, Objective::NegSampling { negatives }) => {
                        for k in 0..=negatives {
                            let (target, sign) = if k == 0 {
                                (context as usize, 1.0)
                            } else {
                                let r = neg_rng.random::<f64>();
                                let t = noise.partition_point(|&p| p <= r).min(v - 1);
                                if t == context as usize {
                                    continue;
                                }
                                (t, -1.0)
                            };
                            let u = &mut table.output[target * d..(target + 1) * d];
                            let x = sign * dot(h, u);
                            epoch_loss -= log_sigmoid(x);
                            let g = (sigmoid(x) - 1.0) * sign;
                            for k in 0..d {
                                grad_h[k] += g * u[k];
                                u[k] -= lr * g * h[k];
                            }
                        }
                    }
                    (None, Objective::HierSoftmax) => unreachable!(),
                }
                for k in 0..d {
                    h[k] -= lr * grad_h[k];
                }
            }
        }
        report.epoch_losses.push(epoch_loss / pairs_per_epoch.max(1) as f64);
        log::debug!("skip-gram epoch {epoch}: loss {:.5}", report.epoch_losses[epoch]);
    }
    Ok((table, report))
}
