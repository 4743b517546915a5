//! The constant-memory attentive neural process.
//!
//! Conditioning pushes the embedded context through `K` stacked blocks,
//! `LEMB_i = CMAB_i(LEMB_{i−1}, CONTEXT)`. Querying embeds target inputs and
//! cross-attends to each `LEMB_i` in turn before a small predictor emits a
//! Gaussian mean and standard deviation per target. Updating folds new
//! context pairs into every block's stream and recomputes only the
//! constant-size stages.

mod model;
mod taped;
mod tasks;
mod train;

pub use model::{nll, CmanpModel, ConditionedState, Predictions, STD_FLOOR};
pub use taped::{taped_loss, CmanpObjective};
pub use tasks::{context_marginal_nll, gen_sine_tasks, sine_task, TaskBatch, MAX_POINTS, X_RANGE};
pub use train::{evaluate, train, EvalReport, LossRecord, TrainConfig, TrainOutcome};
