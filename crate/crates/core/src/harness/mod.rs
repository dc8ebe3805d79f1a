//! Configuration, training loop, metrics, checkpoints and attention export.

mod checkpoint;
mod config;
mod metrics;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{OptimizerKind, Task, TrainConfig};
pub use metrics::{export_attention, metrics_header, read_metrics, MetricsRow};
pub use train::{
    evaluate, evaluate_params, load_task, resume_training, run_training, EvalMetrics, TaskData, TrainSummary,
    MNIST_TEST_IMAGES, MNIST_TEST_LABELS, MNIST_TRAIN_IMAGES, MNIST_TRAIN_LABELS,
};
