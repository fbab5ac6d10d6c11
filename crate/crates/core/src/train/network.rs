use rand_chacha::ChaCha8Rng;

use super::losses::{
    hard_aware_loss, listwise_loss, pair_loss, softmax_ce, softmax, triplet_loss, LossError, PairForm,
};
use super::nn::{flatten_features, l2_normalize, l2_normalize_backward, Encoder, EncoderTrace, Linear, Params};
use crate::mining::{ClassSample, ListSample, PairSample, Triplet};
use crate::pvlog::Features;
use crate::vid::VidCategoryMap;

/// Shared encoder trunk with a Virtual ID head and a top-category head.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryNet {
    pub encoder: Encoder,
    pub virtual_head: Linear,
    pub top_head: Linear,
}

/// Encoder with a Virtual ID head; the encoder output is the retrieval
/// embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNet {
    pub encoder: Encoder,
    pub virtual_head: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetDims {
    pub input: usize,
    pub hidden: usize,
    pub embed: usize,
    pub virtual_classes: usize,
    pub top_classes: usize,
}

impl CategoryNet {
    pub fn init(d: NetDims, rng: &mut ChaCha8Rng) -> Self {
        let encoder = Encoder::init(d.input, d.hidden, d.embed, rng);
        let virtual_head = Linear::init(d.embed, d.virtual_classes, rng);
        let top_head = Linear::init(d.embed, d.top_classes, rng);
        Self { encoder, virtual_head, top_head }
    }

    pub fn dims(&self) -> NetDims {
        NetDims {
            input: self.encoder.in_dim(),
            hidden: self.encoder.hidden.out_dim,
            embed: self.encoder.out_dim(),
            virtual_classes: self.virtual_head.out_dim,
            top_classes: self.top_head.out_dim,
        }
    }

    /// (virtual logits, top logits).
    pub fn logits(&self, features: &Features) -> (Vec<f64>, Vec<f64>) {
        let t = self.encoder.forward(flatten_features(features));
        (self.virtual_head.forward(&t.output), self.top_head.forward(&t.output))
    }
}

impl Params for CategoryNet {
    fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.encoder.slices();
        v.extend(self.virtual_head.slices());
        v.extend(self.top_head.slices());
        v
    }
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.encoder.slices_mut();
        v.extend(self.virtual_head.slices_mut());
        v.extend(self.top_head.slices_mut());
        v
    }
    fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            virtual_head: self.virtual_head.zeros_like(),
            top_head: self.top_head.zeros_like(),
        }
    }
}

impl FeatureNet {
    pub fn init(d: NetDims, rng: &mut ChaCha8Rng) -> Self {
        let encoder = Encoder::init(d.input, d.hidden, d.embed, rng);
        let virtual_head = Linear::init(d.embed, d.virtual_classes, rng);
        Self { encoder, virtual_head }
    }

    pub fn dims(&self) -> NetDims {
        NetDims {
            input: self.encoder.in_dim(),
            hidden: self.encoder.hidden.out_dim,
            embed: self.encoder.out_dim(),
            virtual_classes: self.virtual_head.out_dim,
            top_classes: 0,
        }
    }

    pub fn embed(&self, features: &Features) -> Vec<f64> {
        self.encoder.forward(flatten_features(features)).output
    }
}

impl Params for FeatureNet {
    fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.encoder.slices();
        v.extend(self.virtual_head.slices());
        v
    }
    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.encoder.slices_mut();
        v.extend(self.virtual_head.slices_mut());
        v
    }
    fn zeros_like(&self) -> Self {
        Self { encoder: self.encoder.zeros_like(), virtual_head: self.virtual_head.zeros_like() }
    }
}

/// Component means of a composite loss and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub virtual_loss: f64,
    pub hard_aware: f64,
    pub pair: f64,
    pub triplet: f64,
    pub listwise: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CategoryLossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub eta_simple: f64,
    pub eta_hard: f64,
    pub pair_form: PairForm,
}

/// Sign convention for list relevance scores computed from distances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Relevance {
    /// Score `-D`: closer candidates are more relevant.
    #[default]
    NegDistance,
    /// Score `+D`, the literal printed exponent.
    Distance,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureLossConfig {
    pub lambda: f64,
    pub relevance: Relevance,
    /// L2-normalize embeddings before triplet and list distances.
    pub normalize: bool,
}

/// One mixed mini-batch for the category network.
#[derive(Clone, Copy, Debug, Default)]
pub struct CategoryBatch<'a> {
    pub virtual_samples: &'a [&'a ClassSample],
    pub click_samples: &'a [&'a ClassSample],
    pub pairs: &'a [&'a PairSample],
}

impl CategoryBatch<'_> {
    pub fn is_empty(&self) -> bool {
        self.virtual_samples.is_empty() && self.click_samples.is_empty() && self.pairs.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FeatureBatch<'a> {
    pub virtual_samples: &'a [&'a ClassSample],
    pub triplets: &'a [&'a Triplet],
    pub lists: &'a [&'a ListSample],
}

impl FeatureBatch<'_> {
    pub fn is_empty(&self) -> bool {
        self.virtual_samples.is_empty() && self.triplets.is_empty() && self.lists.is_empty()
    }
}

fn mean_scale(n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        1.0 / n as f64
    }
}

/// `L_virtual + alpha * L_hard_aware + beta * L_pair`, each term the mean over
/// its family in the batch (absent families contribute zero). Returns the
/// breakdown and the gradient with respect to every network parameter.
pub fn category_loss(
    net: &CategoryNet,
    batch: &CategoryBatch,
    cfg: &CategoryLossConfig,
) -> Result<(LossBreakdown, CategoryNet), LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut grad = net.zeros_like();
    let mut out = LossBreakdown::default();

    let sv = mean_scale(batch.virtual_samples.len());
    for s in batch.virtual_samples {
        let t = net.encoder.forward(flatten_features(&s.features));
        let logits = net.virtual_head.forward(&t.output);
        let v = softmax_ce(&logits, s.label)?;
        out.virtual_loss += v.loss * sv;
        let g: Vec<f64> = v.grad.iter().map(|x| x * sv).collect();
        let g_emb = net.virtual_head.backward(&t.output, &g, &mut grad.virtual_head);
        net.encoder.backward(&t, &g_emb, &mut grad.encoder);
    }

    let sc = mean_scale(batch.click_samples.len());
    for s in batch.click_samples {
        let t = net.encoder.forward(flatten_features(&s.features));
        let logits = net.top_head.forward(&t.output);
        let v = hard_aware_loss(&logits, s.label, s.kind, cfg.eta_simple, cfg.eta_hard)?;
        out.hard_aware += v.loss * sc;
        if cfg.alpha != 0.0 {
            let g: Vec<f64> = v.grad.iter().map(|x| x * sc * cfg.alpha).collect();
            let g_emb = net.top_head.backward(&t.output, &g, &mut grad.top_head);
            net.encoder.backward(&t, &g_emb, &mut grad.encoder);
        }
    }

    let sp = mean_scale(batch.pairs.len());
    for p in batch.pairs {
        let t = net.encoder.forward(flatten_features(&p.features));
        let logits = net.top_head.forward(&t.output);
        let v = pair_loss(&logits, p.y_neg, p.y_hard, cfg.pair_form)?;
        out.pair += v.loss * sp;
        if cfg.beta != 0.0 {
            let g: Vec<f64> = v.grad.iter().map(|x| x * sp * cfg.beta).collect();
            let g_emb = net.top_head.backward(&t.output, &g, &mut grad.top_head);
            net.encoder.backward(&t, &g_emb, &mut grad.encoder);
        }
    }
    out.total = out.virtual_loss + cfg.alpha * out.hard_aware + cfg.beta * out.pair;
    Ok((out, grad))
}

struct Embedded {
    trace: EncoderTrace,
    /// Embedding used for distances (normalized when configured).
    vec: Vec<f64>,
    norm: f64,
}

fn embed_for_distance(enc: &Encoder, f: &Features, normalize: bool) -> Embedded {
    let trace = enc.forward(flatten_features(f));
    if normalize {
        let (vec, norm) = l2_normalize(&trace.output);
        Embedded { trace, vec, norm }
    } else {
        let vec = trace.output.clone();
        Embedded { trace, vec, norm: 1.0 }
    }
}

fn backprop_embedded(enc: &Encoder, e: &Embedded, g: &[f64], normalize: bool, grad: &mut Encoder) {
    if g.iter().all(|x| *x == 0.0) {
        return;
    }
    if normalize {
        let g_raw = l2_normalize_backward(&e.vec, e.norm, g);
        enc.backward(&e.trace, &g_raw, grad);
    } else {
        enc.backward(&e.trace, g, grad);
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Relevance scores of list candidates relative to the query embedding.
fn list_scores(q: &[f64], cands: &[Embedded], relevance: Relevance) -> Vec<f64> {
    let sign = match relevance {
        Relevance::NegDistance => -1.0,
        Relevance::Distance => 1.0,
    };
    cands.iter().map(|c| sign * distance(q, &c.vec)).collect()
}

/// `L_virtual + lambda * (L_triplet + L_listwise)`, each term a family mean.
pub fn feature_loss(
    net: &FeatureNet,
    batch: &FeatureBatch,
    cfg: &FeatureLossConfig,
) -> Result<(LossBreakdown, FeatureNet), LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut grad = net.zeros_like();
    let mut out = LossBreakdown::default();
    let enc = &net.encoder;

    let sv = mean_scale(batch.virtual_samples.len());
    for s in batch.virtual_samples {
        let t = enc.forward(flatten_features(&s.features));
        let logits = net.virtual_head.forward(&t.output);
        let v = softmax_ce(&logits, s.label)?;
        out.virtual_loss += v.loss * sv;
        let g: Vec<f64> = v.grad.iter().map(|x| x * sv).collect();
        let g_emb = net.virtual_head.backward(&t.output, &g, &mut grad.virtual_head);
        enc.backward(&t, &g_emb, &mut grad.encoder);
    }

    let st = mean_scale(batch.triplets.len());
    for tr in batch.triplets {
        let q = embed_for_distance(enc, &tr.q, cfg.normalize);
        let p = embed_for_distance(enc, &tr.q_pos, cfg.normalize);
        let n = embed_for_distance(enc, &tr.q_neg, cfg.normalize);
        let v = triplet_loss(&q.vec, &p.vec, &n.vec)?;
        out.triplet += v.loss * st;
        if cfg.lambda != 0.0 && v.loss > 0.0 {
            let k = st * cfg.lambda;
            let scale = |g: &[f64]| g.iter().map(|x| x * k).collect::<Vec<_>>();
            backprop_embedded(enc, &q, &scale(&v.grad_q), cfg.normalize, &mut grad.encoder);
            backprop_embedded(enc, &p, &scale(&v.grad_pos), cfg.normalize, &mut grad.encoder);
            backprop_embedded(enc, &n, &scale(&v.grad_neg), cfg.normalize, &mut grad.encoder);
        }
    }

    let sl = mean_scale(batch.lists.len());
    for l in batch.lists {
        let q = embed_for_distance(enc, &l.q, cfg.normalize);
        let cands: Vec<Embedded> = l.candidates.iter().map(|c| embed_for_distance(enc, c, cfg.normalize)).collect();
        let scores = list_scores(&q.vec, &cands, cfg.relevance);
        let v = listwise_loss(&scores, &l.teacher_pi, &l.weights)?;
        out.listwise += v.loss * sl;
        if cfg.lambda == 0.0 {
            continue;
        }
        let k = sl * cfg.lambda;
        let sign = match cfg.relevance {
            Relevance::NegDistance => -1.0,
            Relevance::Distance => 1.0,
        };
        let mut g_q = vec![0.0; q.vec.len()];
        for (c, gs) in cands.iter().zip(&v.grad) {
            let d = distance(&q.vec, &c.vec);
            if d == 0.0 {
                continue;
            }
            // score = sign * |q - c|; d score / d q = sign * (q - c) / d
            let coef = k * gs * sign / d;
            let g_c: Vec<f64> = q.vec.iter().zip(&c.vec).map(|(a, b)| -coef * (a - b)).collect();
            for (gq, gc) in g_q.iter_mut().zip(&g_c) {
                *gq -= gc;
            }
            backprop_embedded(enc, c, &g_c, cfg.normalize, &mut grad.encoder);
        }
        backprop_embedded(enc, &q, &g_q, cfg.normalize, &mut grad.encoder);
    }
    out.total = out.virtual_loss + cfg.lambda * (out.triplet + out.listwise);
    Ok((out, grad))
}

/// Smallest |pre-activation| of the hidden layer over the given inputs.
/// Finite-difference checks skip instances close to the ReLU kink.
pub fn relu_margin<'a>(enc: &Encoder, inputs: impl IntoIterator<Item = &'a Features>) -> f64 {
    inputs
        .into_iter()
        .flat_map(|f| enc.forward(flatten_features(f)).pre)
        .map(f64::abs)
        .fold(f64::INFINITY, f64::min)
}

/// Ensemble category prediction.
///
/// `p_top` is the softmax of the top head; `p_vid` is the softmax of the
/// virtual head with each cluster's mass moved to its mapped top category
/// (unmapped clusters drop out). The prediction is the argmax of
/// `w * p_top + (1 - w) * p_vid`, ties to the lowest index (the
/// lexicographically first category in a sorted vocabulary).
pub fn predict_category(
    net: &CategoryNet,
    features: &Features,
    vid_map: &VidCategoryMap,
    top_index: impl Fn(&str) -> Option<usize>,
    ensemble_weight: f64,
) -> (usize, Vec<f64>) {
    let (vz, tz) = net.logits(features);
    let p_top = softmax(&tz);
    let p_vid = softmax(&vz);
    let mut mapped = vec![0.0; p_top.len()];
    for (vid, p) in p_vid.iter().enumerate() {
        if let Some(idx) = vid_map.vid_to_top.get(&vid).and_then(|c| top_index(c)) {
            mapped[idx] += p;
        }
    }
    let scores: Vec<f64> = p_top
        .iter()
        .zip(&mapped)
        .map(|(a, b)| ensemble_weight * a + (1.0 - ensemble_weight) * b)
        .collect();
    (argmax(&scores), scores)
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
