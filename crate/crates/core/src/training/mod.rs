//! Optimizer, schedule, losses, augmentation and the two-stage training procedure.

pub mod augment;
pub mod log;
pub mod optim;
pub mod perceptual;
pub mod pool;
pub mod run;

pub use augment::{augment, mixup, AugmentationConfig, Sample};
pub use log::MetricsLog;
pub use optim::{cosine_lr, AdamW, OptimizerConfig};
pub use perceptual::PerceptualExtractor;
pub use pool::{sample_checkpoint, CheckpointPool, Snapshot};
pub use run::{
    crnet_batch_loss, lrnet_batch_loss, train_crnet, train_lrnet, train_maskrefine, Batch, ColorLossSpace,
    LumaSource, TrainConfig, TRAIN_DTYPE,
};
