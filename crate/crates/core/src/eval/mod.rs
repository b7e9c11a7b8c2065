//! Segmentation metrics, the distillation baseline and experiment harnesses.

mod distill;
mod experiment;
mod metrics;

pub use distill::{
    distill_finetune, distill_loss_and_gradients, pixel_kl, DistillConfig, DistillOutcome, DistillSample,
};
pub use experiment::{
    evaluate, generate_scenes, imprint_support, margin_sweep, run_experiment, touch_support, ExperimentConfig,
    ExperimentOutcome, ExperimentReport, ExperimentScenes, ImprintOutcome, MaskStats, MethodRow, SupportMasks,
    SweepReport, MARGINS,
};
pub use metrics::{confusion, confusion_over, metrics, ClassMapping, ClassMetrics, ConfusionMatrix, MetricsReport};
