//! Training, evaluation, ensembling, the hyperparameter grid, ablations and
//! the pretraining variance study.

mod config;
mod eval;
mod experiments;
mod train;

pub use config::{digest, GridConfig, PretrainConfig, TrainConfig};
pub use eval::{
    argmax, candidate_margins, choose, ensemble, evaluate, ChoiceLog, EvalReport, EvalTask,
};
pub use experiments::{
    best_run, format_table, pretraining_study, run_ablation, run_grid, std_dev,
    train_and_evaluate, AblationRow, GridRun, PretrainStudy,
};
pub use train::{
    backbone_frozen, build_model, feature_cache, group_loss, pretrain, train, FeatureCache,
    TrainOutcome,
};
