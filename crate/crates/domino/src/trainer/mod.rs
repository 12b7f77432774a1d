//! Training machinery: RAdam, the OneCycle schedule, graph pretraining, the
//! frozen-encoder linear-evaluation protocol, and the manifest runner.

mod experiment;
mod linear_eval;
mod onecycle;
mod pretrain;
mod radam;

pub use experiment::{run_experiment, write_losses, RunSummary};
pub use linear_eval::{
    extract_features, fit_linear_probe, linear_eval, EvalOutcome, FeatureSet, ProbeOutcome,
};
pub use onecycle::{onecycle_lr, FINAL_DIV, WARMUP_FRACTION};
pub use pretrain::{
    init_model, kept_batches, modality_configs, pretrain, LossRow, PretrainResult, TrainOpts,
};
pub use radam::{RAdam, RAdamHyper};
