//! Splits, augmentation, the training loop, evaluation and ablation.

mod augment;
mod eval;
mod pipeline;
mod split;
mod train;

pub use augment::{apply_draw, augment, AugmentDraw};
pub use eval::{
    ablation_from_examples, ablation_run, evaluate, evaluate_examples, AblationReport, AblationRow, ConfusionMatrix,
    EvalReport, Prediction,
};
pub use pipeline::{
    extract_examples, parallel_map, Example, FeaturePipeline, FeatureTable, ImageAnalysis, ImagePipeline,
};
pub use split::{split_counts, split_dataset, SplitOutcome, MIN_CLASS_FOR_SPLIT};
pub use train::{train, train_examples, Adam, EpochRecord, PlateauScheduler, TrainHistory, TrainOutcome};
