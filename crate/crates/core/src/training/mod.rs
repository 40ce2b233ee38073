//! Pretraining and finetuning loops, the optimizer and evaluation.

mod config;
mod eval;
mod optim;
mod trainer;

pub use config::{Mode, Setting, TrainConfig};
pub use eval::{evaluate, predict_task, score_task, task_context, token_f1, EvalReport, TaskScore, MAX_DECODE};
pub use optim::Adam;
pub use trainer::{
    batch_gradients, finetune, item_losses, pretrain, sample_batch, Batch, BatchGradients, BatchItem, LogRow, Trainer,
};
