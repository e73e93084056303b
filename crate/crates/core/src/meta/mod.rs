//! Episodic meta-training and inference-time adaptation.

mod ablation;
mod adapt;
mod config;
mod loss;
mod runlog;
mod task;
mod trainer;

pub use ablation::{median, run_ablation, run_trial, write_sweep_csv, AblationAxis, SweepRow, Trial};
pub use adapt::{adapt_and_render, adapt_task, evaluate, fine_tune, task_seed, AdaptResult};
pub use config::{TrainConfig, PROFILES};
pub use loss::{adapted_nodes, draw_rays, task_loss, FineDepths, RayBatch, RaySource, TaskLoss, ViewSet};
pub use runlog::{LogRow, RunLog};
pub use task::{sample_task_batch, EpochSampler, Split, Task, TaskDataset};
pub use trainer::{EvalSummary, Trainer};
