//! The navigation agent: configuration, parameters, rollouts, training and
//! evaluation.

mod config;
mod params;
pub(crate) mod policy;
mod rollout;
mod train;

pub use config::{AgentConfig, DataConfig, LrTable, Mode};
pub use params::{AgentParams, ParamDims, PolicyParams, CHECKPOINT_FORMAT_VERSION};
pub use policy::{
    discounted_returns, encode_instruction, il_loss, rl_loss, score_candidates, total_loss, InstructionEncoding,
    LossBreakdown, RlLoss, StepScores,
};
pub use rollout::{read_view, Resources, ViewReading};
pub use train::{
    build_dataset, build_resources, evaluate_policy, full_model_grad_check, train, train_from, Dataset, EpochRecord,
    EvalOutput, TraceCandidate, TraceObject, TraceStep, TrainReport,
};
