//! Training, evaluation, ablation and interpretability experiments.

mod ablate;
mod checkpoint;
mod config;
mod eval;
mod metrics;
mod similarity;
mod train;

pub use ablate::{ablate_components, ablate_losses, component_variants, run_grid, Cell, Row, Table};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{
    fingerprint, AblateConfig, EvalConfig, ExperimentConfig, LossFlags, SynthRunConfig, TrainConfig,
};
pub use eval::{choose_holdout, evaluate, format_mean_std, run_once, run_seeds, score_network, summarize, EvalReport, SeedSummary};
pub use metrics::{auc, mean_std, pearson, Correlation};
pub use similarity::{attention_profiles, run_similarity, similarity_analysis, stage_set_similarity, SimilarityReport};
pub use train::{build_network, fit, train_network, validation_loss, EpochRecord, TrainedModel};
