//! Desk-scale training: synthetic moving-shapes clips, miniature residual
//! networks, SGD and the pre-train then fine-tune comparison.

pub mod data;
pub mod pipeline;
pub mod tiny;
pub mod train;

pub use data::{gather, gen_moving_shapes, MovingShapesConfig, MovingShapesDataset, Task};
pub use pipeline::{pipeline_pretrain_finetune, PipelineConfig, PipelineReport, Stage};
pub use tiny::{build_tiny_net, build_tiny_net_with, TinyNetConfig, Variant};
pub use train::{evaluate, train, EpochRecord, LrSchedule, Samples, Sgd, TrainConfig, TrainOptions, TrainReport};
