//! Point attention transformer networks, training and checkpoints.

pub mod checkpoint;
pub mod config;
mod net;
mod train;

pub use config::{format_plan, parse_plan, Block, Downsample, Embedding, NormChoice, PatConfig, Task};
pub use net::{
    check_label, class_scores, element_wise_loss, predict_from_logits, AttnBlock, EmbedLayer, Forward, GssReport,
    Head, Label, PatModel,
};
pub use train::{
    augment, clip_global_norm, env_threads, evaluate, metrics_csv, thread_pool, train, Adam, Control, EvalReport,
    MetricRow, Sample, TrainOptions, TrainState, ADAM_BETAS, ADAM_EPS, JITTER_SIGMA, METRICS_HEADER,
};
