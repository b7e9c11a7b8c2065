//! Pixel embedding extractor, cosine classification head and the ArcFace
//! training loop used for pre-training.

mod extractor;
mod features;
mod head;
mod loss;
mod optim;
mod train;

pub use extractor::{
    extract_features, Activations, ExtractorConfig, ExtractorParams, InputChannels,
    INPUT_CHANNELS,
};
pub use features::FeatureMap;
pub use head::{cosine_logits, predict, CosineClassifier, ScoreMap};
pub use loss::{arcface_loss, arcface_pixel_terms, margin_cosine, softmax_cross_entropy, LossReport};
pub use optim::Adam;
pub use train::{
    backward_passes, loss_and_gradients, pretrain, train_step, Gradients, LabeledScene,
    Optimizer, PretrainConfig, PretrainOutcome, SegmentationModel,
};
pub(crate) use train::backprop_scores;

/// Rounds to the nearest `f32`. Model parameters are kept on this grid.
#[inline]
pub(crate) fn to_storage(x: f64) -> f64 {
    x as f32 as f64
}
