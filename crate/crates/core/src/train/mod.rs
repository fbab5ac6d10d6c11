//! Category and feature networks, their losses and the SGD trainer.

pub mod checkpoint;
pub mod losses;
pub mod network;
pub mod nn;
pub mod trainer;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use losses::{LossError, PairForm};
pub use network::{
    category_loss, feature_loss, predict_category, CategoryLossConfig, CategoryNet, FeatureLossConfig, FeatureNet,
    LossBreakdown, NetDims, Relevance,
};
pub use trainer::{
    initial_feature_net, train_category, train_category_from, train_feature, CategorySamples, FeatureSamples,
    LossHistory, NetworkKind, TrainConfig, TrainError, Trained,
};
