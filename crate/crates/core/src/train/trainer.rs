use rand::seq::SliceRandom;
use thiserror::Error;

use super::losses::{LossError, PairForm};
use super::network::{
    category_loss, feature_loss, CategoryBatch, CategoryLossConfig, CategoryNet, FeatureBatch, FeatureLossConfig,
    FeatureNet, LossBreakdown, NetDims, Relevance,
};
use super::nn::Params;
use crate::mining::{ClassSample, ListSample, PairSample, Triplet};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetworkKind {
    Category,
    Feature,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub eta_simple: f64,
    pub eta_hard: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub pair_form: PairForm,
    pub relevance: Relevance,
    pub normalize_embeddings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            lambda: 1.0,
            eta_simple: 1.0,
            eta_hard: 2.0,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 64,
            epochs: 10,
            seed: 0,
            hidden_dim: 256,
            embed_dim: 512,
            pair_form: PairForm::Hinge,
            relevance: Relevance::NegDistance,
            normalize_embeddings: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.lambda >= 0.0) {
            return bad("alpha, beta and lambda must be >= 0");
        }
        if !(self.eta_simple > 0.0 && self.eta_hard >= self.eta_simple) {
            return bad("need eta_hard >= eta_simple > 0");
        }
        if !(self.learning_rate >= 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return bad("learning rate must be >= 0 and momentum in [0, 1)");
        }
        if self.batch_size == 0 || self.hidden_dim == 0 || self.embed_dim == 0 {
            return bad("batch size and layer widths must be >= 1");
        }
        Ok(())
    }

    pub fn category_loss_config(&self) -> CategoryLossConfig {
        CategoryLossConfig {
            alpha: self.alpha,
            beta: self.beta,
            eta_simple: self.eta_simple,
            eta_hard: self.eta_hard,
            pair_form: self.pair_form,
        }
    }

    pub fn feature_loss_config(&self) -> FeatureLossConfig {
        FeatureLossConfig { lambda: self.lambda, relevance: self.relevance, normalize: self.normalize_embeddings }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no training samples")]
    NoSamples,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("non-finite loss in epoch {epoch}")]
    Divergence {
        epoch: usize,
        /// Flattened parameters at the start of the failing epoch.
        last_good: Vec<f64>,
    },
}

/// Per-epoch mean of every loss component.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory {
    pub epochs: Vec<LossBreakdown>,
}

impl LossHistory {
    pub fn totals(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.total).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss_total,loss_virtual,loss_hard_aware,loss_pair,loss_triplet,loss_listwise\n");
        for (i, e) in self.epochs.iter().enumerate() {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                i + 1,
                e.total,
                e.virtual_loss,
                e.hard_aware,
                e.pair,
                e.triplet,
                e.listwise
            ));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trained<N> {
    pub net: N,
    pub history: LossHistory,
}

/// Mini-batch SGD with momentum (`v = mu v + g; theta -= lr v`). Items are
/// reshuffled each epoch from a seeded stream; batch gradients come from
/// `loss_fn` and are applied in a fixed order.
fn sgd<N, T, F>(mut net: N, items: &mut [T], cfg: &TrainConfig, loss_fn: F) -> Result<Trained<N>, TrainError>
where
    N: Params + Clone,
    T: Copy,
    F: Fn(&N, &[T]) -> Result<(LossBreakdown, N), LossError>,
{
    if items.is_empty() {
        return Err(TrainError::NoSamples);
    }
    let mut velocity = net.zeros_like();
    let mut history = LossHistory::default();
    for epoch in 0..cfg.epochs {
        let start_params = net.flatten();
        items.shuffle(&mut seed::rng(cfg.seed, &[0x5A0F, epoch as u64]));
        let mut acc = LossBreakdown::default();
        for batch in items.chunks(cfg.batch_size) {
            let (b, grad) = loss_fn(&net, batch)?;
            if !b.total.is_finite() || !grad.all_finite() {
                return Err(TrainError::Divergence { epoch, last_good: start_params });
            }
            let w = batch.len() as f64 / items.len() as f64;
            acc.total += w * b.total;
            acc.virtual_loss += w * b.virtual_loss;
            acc.hard_aware += w * b.hard_aware;
            acc.pair += w * b.pair;
            acc.triplet += w * b.triplet;
            acc.listwise += w * b.listwise;
            if cfg.learning_rate == 0.0 {
                continue;
            }
            for (v, g) in velocity.slices_mut().into_iter().zip(grad.slices()) {
                for (vi, gi) in v.iter_mut().zip(g) {
                    *vi = cfg.momentum * *vi + gi;
                }
            }
            net.add_scaled(&velocity, -cfg.learning_rate);
        }
        log::debug!("epoch {}: loss {:.6}", epoch + 1, acc.total);
        history.epochs.push(acc);
    }
    Ok(Trained { net, history })
}

/// Samples for the category network.
#[derive(Clone, Copy, Debug, Default)]
pub struct CategorySamples<'a> {
    pub virtual_samples: &'a [ClassSample],
    /// Simple (first-click) and Hard (switch-click) samples.
    pub click_samples: &'a [ClassSample],
    pub pairs: &'a [PairSample],
}

#[derive(Clone, Copy, Debug)]
enum CatItem {
    Virtual(usize),
    Click(usize),
    Pair(usize),
}

pub fn train_category(
    samples: CategorySamples,
    dims: NetDims,
    cfg: &TrainConfig,
) -> Result<Trained<CategoryNet>, TrainError> {
    cfg.validate()?;
    let net = CategoryNet::init(dims, &mut seed::rng(cfg.seed, &[0x1417]));
    train_category_from(net, samples, cfg)
}

/// Continues training an existing category network.
pub fn train_category_from(
    net: CategoryNet,
    samples: CategorySamples,
    cfg: &TrainConfig,
) -> Result<Trained<CategoryNet>, TrainError> {
    cfg.validate()?;
    let mut items: Vec<CatItem> = (0..samples.virtual_samples.len())
        .map(CatItem::Virtual)
        .chain((0..samples.click_samples.len()).map(CatItem::Click))
        .chain((0..samples.pairs.len()).map(CatItem::Pair))
        .collect();
    let loss_cfg = cfg.category_loss_config();
    sgd(net, &mut items, cfg, |net, batch| {
        let (mut v, mut c, mut p) = (Vec::new(), Vec::new(), Vec::new());
        for item in batch {
            match *item {
                CatItem::Virtual(i) => v.push(&samples.virtual_samples[i]),
                CatItem::Click(i) => c.push(&samples.click_samples[i]),
                CatItem::Pair(i) => p.push(&samples.pairs[i]),
            }
        }
        category_loss(net, &CategoryBatch { virtual_samples: &v, click_samples: &c, pairs: &p }, &loss_cfg)
    })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FeatureSamples<'a> {
    pub virtual_samples: &'a [ClassSample],
    pub triplets: &'a [Triplet],
    pub lists: &'a [ListSample],
}

#[derive(Clone, Copy, Debug)]
enum FeaItem {
    Virtual(usize),
    Triplet(usize),
    List(usize),
}

pub fn train_feature(
    samples: FeatureSamples,
    dims: NetDims,
    cfg: &TrainConfig,
) -> Result<Trained<FeatureNet>, TrainError> {
    cfg.validate()?;
    let net = FeatureNet::init(dims, &mut seed::rng(cfg.seed, &[0x1417]));
    let mut items: Vec<FeaItem> = (0..samples.virtual_samples.len())
        .map(FeaItem::Virtual)
        .chain((0..samples.triplets.len()).map(FeaItem::Triplet))
        .chain((0..samples.lists.len()).map(FeaItem::List))
        .collect();
    let loss_cfg = cfg.feature_loss_config();
    sgd(net, &mut items, cfg, |net, batch| {
        let (mut v, mut t, mut l) = (Vec::new(), Vec::new(), Vec::new());
        for item in batch {
            match *item {
                FeaItem::Virtual(i) => v.push(&samples.virtual_samples[i]),
                FeaItem::Triplet(i) => t.push(&samples.triplets[i]),
                FeaItem::List(i) => l.push(&samples.lists[i]),
            }
        }
        feature_loss(net, &FeatureBatch { virtual_samples: &v, triplets: &t, lists: &l }, &loss_cfg)
    })
}

/// Untrained feature network with the same seeded initialization that
/// [`train_feature`] starts from.
pub fn initial_feature_net(dims: NetDims, seed_: u64) -> FeatureNet {
    FeatureNet::init(dims, &mut seed::rng(seed_, &[0x1417]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mining::SampleKind;

    fn separable(n: usize) -> Vec<ClassSample> {
        // two classes on either side of a hyperplane with a unit gap
        (0..n)
            .map(|i| {
                let label = i % 2;
                let side = if label == 0 { -1.0 } else { 1.0 };
                let t = (i as f64 * 0.37).sin();
                ClassSample {
                    features: vec![vec![side * (1.0 + 0.5 * t.abs()), t]],
                    label,
                    kind: SampleKind::Simple,
                }
            })
            .collect()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.05,
            batch_size: 8,
            epochs: 200,
            hidden_dim: 8,
            embed_dim: 4,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn dims() -> NetDims {
        NetDims { input: 2, hidden: 8, embed: 4, virtual_classes: 2, top_classes: 2 }
    }

    #[test]
    fn separable_fixture_converges() {
        let data = separable(40);
        let out = train_category(
            CategorySamples { virtual_samples: &data, ..Default::default() },
            dims(),
            &small_cfg(),
        )
        .unwrap();
        let last = *out.history.totals().last().unwrap();
        assert!(last < 0.1, "final loss {last}");
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let data = separable(10);
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 3, ..small_cfg() };
        let s = CategorySamples { virtual_samples: &data, ..Default::default() };
        let out = train_category(s, dims(), &cfg).unwrap();
        let init = CategoryNet::init(dims(), &mut seed::rng(cfg.seed, &[0x1417]));
        assert_eq!(out.net, init);
        let t = out.history.totals();
        assert!(t.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12));
    }

    #[test]
    fn same_seed_same_bytes() {
        let data = separable(20);
        let cfg = TrainConfig { epochs: 5, ..small_cfg() };
        let s = CategorySamples { virtual_samples: &data, ..Default::default() };
        let a = train_category(s, dims(), &cfg).unwrap();
        let b = train_category(s, dims(), &cfg).unwrap();
        let bytes = |n: &CategoryNet| n.flatten().iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>();
        assert_eq!(bytes(&a.net), bytes(&b.net));
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn divergence_reports_last_good() {
        let data = separable(10);
        let cfg = TrainConfig { learning_rate: 1e200, momentum: 0.0, epochs: 5, ..small_cfg() };
        let s = CategorySamples { virtual_samples: &data, ..Default::default() };
        match train_category(s, dims(), &cfg) {
            Err(TrainError::Divergence { last_good, .. }) => {
                assert!(last_good.iter().all(|x| x.is_finite()));
            }
            other => panic!("expected divergence, got {:?}", other.map(|t| t.history)),
        }
    }

    #[test]
    fn invalid_config_and_empty_samples() {
        let bad = TrainConfig { eta_hard: 0.5, ..small_cfg() };
        assert!(matches!(
            train_category(CategorySamples::default(), dims(), &bad),
            Err(TrainError::InvalidConfig(_))
        ));
        assert!(matches!(
            train_category(CategorySamples::default(), dims(), &small_cfg()),
            Err(TrainError::NoSamples)
        ));
    }

    #[test]
    fn csv_header() {
        let h = LossHistory { epochs: vec![LossBreakdown::default()] };
        let csv = h.to_csv();
        assert!(csv.starts_with("epoch,loss_total,loss_virtual,loss_hard_aware,loss_pair,loss_triplet,loss_listwise\n1,0,"));
    }
}
