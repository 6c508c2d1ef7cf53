use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{gen_moving_shapes, MovingShapesConfig, Task};
use super::tiny::{build_tiny_net_with, TinyNetConfig, Variant};
use super::train::{evaluate, train, EpochRecord, LrSchedule, Samples, TrainConfig, TrainOptions, TrainReport};
use crate::budget::{total_budget, DatasetSpec, Planner};
use crate::error::{Error, Result};
use crate::init::InitStrategy;
use crate::network::{transfer_2d_to_3d, Network, NetworkSpec};
use crate::sts::StaticRatio;
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub data: MovingShapesConfig,
    pub val_size: usize,
    /// Size of the separate image set used for pre-training; each image is
    /// one frame of an independently drawn clip.
    pub pretrain_images: usize,
    pub width: usize,
    pub variant: Variant,
    pub init: InitStrategy,
    /// Image pre-training of the 2D twin on the shape task.
    pub pretrain: TrainConfig,
    /// Fine-tuning on the joint task; `epochs` is the fine-tune cap.
    pub finetune: TrainConfig,
    /// Joint validation accuracy that ends a run.
    pub threshold: f64,
}

impl PipelineConfig {
    /// The seeded comparison used by the demo and the acceptance run.
    pub fn demo() -> Self {
        let schedule = LrSchedule::CosineWarmup { warmup_epochs: 1 };
        Self {
            data: MovingShapesConfig {
                n: 512,
                frames: 4,
                height: 16,
                width: 16,
                num_shapes: 6,
                num_motions: 2,
                noise: 0.15,
            },
            val_size: 256,
            pretrain_images: 2048,
            width: 16,
            variant: Variant::Sts,
            init: InitStrategy::Sts2d,
            pretrain: TrainConfig {
                epochs: 24,
                batch_size: 32,
                learning_rate: 0.1,
                momentum: 0.9,
                weight_decay: 1e-4,
                seed: 0,
                lr_schedule: schedule,
            },
            finetune: TrainConfig {
                epochs: 14,
                batch_size: 32,
                learning_rate: 0.2,
                momentum: 0.9,
                weight_decay: 1e-4,
                seed: 0,
                lr_schedule: schedule,
            },
            threshold: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub pretrain_accuracy: f64,
    /// Fine-tune epochs until the threshold, if reached.
    pub finetune_epochs: Option<usize>,
    /// Epoch cap of the from-scratch control, matched to the pre-train plus
    /// fine-tune budget.
    pub scratch_cap: usize,
    pub scratch_epochs: Option<usize>,
    pub pretrained_budget: u64,
    pub scratch_budget: u64,
    pub finetune_curve: Vec<f64>,
    pub scratch_curve: Vec<f64>,
}

impl PipelineReport {
    /// Fine-tune epochs over control epochs, charging a control that never
    /// reaches the threshold its full cap. `None` if the fine-tune run
    /// itself misses the threshold.
    pub fn epoch_ratio(&self) -> Option<f64> {
        let f = self.finetune_epochs? as f64;
        let s = self.scratch_epochs.unwrap_or(self.scratch_cap).max(1) as f64;
        Some(f / s)
    }
}

/// Stage of a pipeline run, for progress output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
    Scratch,
}

fn seeded(cfg: &TrainConfig, seed: u64, salt: u64) -> TrainConfig {
    TrainConfig {
        seed: seed.wrapping_mul(1000).wrapping_add(salt),
        ..*cfg
    }
}

/// Trains for `cfg.epochs`, or only evaluates the untrained network when
/// there are none.
fn train_or_evaluate<T: Element>(
    net: &mut Network<T>,
    train_set: Samples<'_>,
    val_set: Samples<'_>,
    cfg: &TrainConfig,
    opts: TrainOptions,
    mut on_record: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    if cfg.epochs > 0 {
        return train(net, train_set, Some(val_set), cfg, opts, on_record);
    }
    let (loss, accuracy) = evaluate(net, val_set, cfg.batch_size)?;
    let r = EpochRecord {
        epoch: 0,
        split: "val".into(),
        loss,
        accuracy,
    };
    on_record(&r);
    Ok(TrainReport {
        reached_at: opts.stop_at.filter(|&s| accuracy >= s).map(|_| 0),
        records: vec![r],
        epochs_run: 0,
    })
}

/// Pre-trains the 2D twin on single frames, transfers it into the 3D
/// network and fine-tunes on the joint task, then trains the same 3D network
/// from scratch under the same total image budget.
pub fn pipeline_pretrain_finetune<T: Element>(
    cfg: &PipelineConfig,
    seed: u64,
    mut on_record: impl FnMut(Stage, &EpochRecord),
) -> Result<PipelineReport> {
    if !(0.0..=1.0).contains(&cfg.threshold) {
        return Err(Error::config("threshold must lie in [0, 1]"));
    }
    let sized = |n| MovingShapesConfig { n, ..cfg.data };
    let base = seed.wrapping_mul(3);
    let train_data = gen_moving_shapes(base, &cfg.data)?;
    let val_data = gen_moving_shapes(base.wrapping_add(1), &sized(cfg.val_size))?;
    let image_data = gen_moving_shapes(base.wrapping_add(2), &sized(cfg.pretrain_images))?;
    let net_cfg = |variant, num_classes| TinyNetConfig {
        variant,
        input_channels: 1,
        width: cfg.width,
        num_classes,
        ratio: StaticRatio::OneToOne,
    };
    let spec2d = build_tiny_net_with(&net_cfg(Variant::TwoD, train_data.num_classes(Task::Shape)))?;
    let spec3d = build_tiny_net_with(&net_cfg(cfg.variant, train_data.num_classes(Task::Joint)))?;
    let body = |spec: &NetworkSpec| {
        spec.params()
            .into_iter()
            .filter(|p| !p.name.starts_with("head."))
            .collect::<Vec<_>>()
    };
    if body(&spec3d.twin_2d()) != body(&spec2d) {
        return Err(Error::shape("2D twin and 3D network disagree in channel plan"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = image_data.images();
    let val_images = val_data.images();
    let mut net2d = Network::<T>::init(spec2d, &mut rng)?;
    let pre = if cfg.pretrain.epochs > 0 {
        train(
            &mut net2d,
            Samples::new(&images, image_data.labels(Task::Shape))?,
            Some(Samples::new(&val_images, val_data.labels(Task::Shape))?),
            &seeded(&cfg.pretrain, seed, 1),
            TrainOptions {
                skip_initial_train_eval: true,
                ..Default::default()
            },
            |r| on_record(Stage::Pretrain, r),
        )?
    } else {
        TrainReport::default()
    };

    let clips = train_data.clips.tensor();
    let val_clips = val_data.clips.tensor();
    let joint = Samples::new(clips, train_data.labels(Task::Joint))?;
    let val_joint = Samples::new(val_clips, val_data.labels(Task::Joint))?;
    let opts = TrainOptions {
        stop_at: Some(cfg.threshold),
        skip_initial_train_eval: true,
    };

    let mut net3d = transfer_2d_to_3d::<T>(&net2d.to_checkpoint(), &spec3d, &cfg.init, &mut rng)?;
    let fine = train_or_evaluate(
        &mut net3d,
        joint,
        val_joint,
        &seeded(&cfg.finetune, seed, 2),
        opts,
        |r| on_record(Stage::Finetune, r),
    )?;

    let n = train_data.len() as u64;
    let frames = train_data.frames() as u64;
    let planner = Planner::new(
        DatasetSpec::new("moving-shapes-frames", image_data.len() as u64, 1)?,
        DatasetSpec::new("moving-shapes", n, frames)?,
    );
    let pretrained_budget = total_budget(&planner.plan(frames, cfg.pretrain.epochs as u64, cfg.finetune.epochs as u64));
    let scratch_cap = (pretrained_budget / (n * frames)) as usize;
    let scratch_budget = total_budget(&planner.baseline(frames, scratch_cap as u64));

    let mut scratch_net = transfer_2d_to_3d::<T>(&net2d.to_checkpoint(), &spec3d, &InitStrategy::Scratch, &mut rng)?;
    let scratch = train_or_evaluate(
        &mut scratch_net,
        joint,
        val_joint,
        &TrainConfig {
            epochs: scratch_cap,
            ..seeded(&cfg.finetune, seed, 3)
        },
        opts,
        |r| on_record(Stage::Scratch, r),
    )?;

    Ok(PipelineReport {
        seed,
        pretrain_accuracy: pre.last("val").map_or(0.0, |r| r.accuracy),
        finetune_epochs: fine.reached_at,
        scratch_cap,
        scratch_epochs: scratch.reached_at,
        pretrained_budget,
        scratch_budget,
        finetune_curve: fine.val_accuracy(),
        scratch_curve: scratch.val_accuracy(),
    })
}
