use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stslab::harness::{
    build_tiny_net, gather, gen_moving_shapes, pipeline_pretrain_finetune, train, LrSchedule, MovingShapesConfig,
    PipelineConfig, Samples, Task, TrainConfig, TrainOptions, Variant,
};
use stslab::init::InitStrategy;
use stslab::network::{transfer_2d_to_3d, Network};
use stslab::tensor::{slice_time, Tensor, VideoBatch};

fn data(n: usize, seed: u64) -> stslab::harness::MovingShapesDataset {
    gen_moving_shapes(
        seed,
        &MovingShapesConfig {
            n,
            frames: 4,
            height: 16,
            width: 16,
            num_shapes: 3,
            num_motions: 2,
            noise: 0.1,
        },
    )
    .unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        learning_rate: 0.05,
        lr_schedule: LrSchedule::Constant,
        ..Default::default()
    }
}

#[test]
fn transferred_network_sees_each_frame_like_its_twin() {
    let d = data(24, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut net2d = Network::<f64>::init(build_tiny_net(Variant::TwoD, 4, 3).unwrap(), &mut rng).unwrap();
    let images = d.images();
    train(&mut net2d, Samples::new(&images, d.labels(Task::Shape)).unwrap(), None, &quick(1), TrainOptions::default(), |_| {}).unwrap();

    let clips: Tensor<f64> = gather(d.clips.tensor(), &[0, 1, 2]);
    let video = VideoBatch::new(clips.clone()).unwrap();
    for (variant, init) in [(Variant::Sts, InitStrategy::Sts2d), (Variant::Full, InitStrategy::ZeroInit), (Variant::Temporal, InitStrategy::ZeroInit)] {
        let spec3d = build_tiny_net(variant, 4, 3).unwrap();
        let net3d = transfer_2d_to_3d::<f64>(&net2d.to_checkpoint(), &spec3d, &init, &mut rng).unwrap();
        let trace3d = net3d.trace(&clips).unwrap();
        let pre_pool = trace3d.iter().position(|(l, _)| l == "pool").unwrap() - 1;
        let y3d = VideoBatch::new(trace3d[pre_pool].1.clone()).unwrap();
        let mut pooled = vec![0.0; net3d.features(&clips).unwrap().len()];
        for f in 0..video.frames() {
            let frame = slice_time(&video, f).unwrap();
            let trace2d = net2d.trace(&frame).unwrap();
            let y2d = VideoBatch::new(trace2d[pre_pool].1.clone()).unwrap();
            assert!(slice_time(&y3d, f).unwrap().bits_eq(&slice_time(&y2d, 0).unwrap()), "{variant} frame {f}");
            for (p, v) in pooled.iter_mut().zip(net2d.features(&frame).unwrap().data()) {
                *p += v / video.frames() as f64;
            }
        }
        let feats = net3d.features(&clips).unwrap();
        assert!(feats.max_abs_diff(&Tensor::from_vec(feats.dims(), pooled).unwrap()).unwrap() < 1e-12);
    }
}

#[test]
fn every_variant_overfits_eight_clips_within_200_steps() {
    let d = data(8, 2);
    let clips = d.clips.tensor();
    for variant in [Variant::Temporal, Variant::Full, Variant::Sts, Variant::TwoD] {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Network::<f32>::init(build_tiny_net(variant, 4, 6).unwrap(), &mut rng).unwrap();
        let set = Samples::new(clips, d.labels(Task::Joint)).unwrap();
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 8,
            learning_rate: 0.05,
            weight_decay: 0.0,
            lr_schedule: LrSchedule::Constant,
            ..Default::default()
        };
        let opts = TrainOptions {
            stop_at: Some(1.0),
            skip_initial_train_eval: true,
        };
        let report = train(&mut net, set, Some(set), &cfg, opts, |_| {}).unwrap();
        assert!(report.reached_at.is_some(), "{variant}: {:?}", report.last("val"));
        let first = report.split("train").next().unwrap().loss;
        assert!(report.last("train").unwrap().loss <= first, "{variant}");
    }
}

#[test]
fn identical_seed_and_config_give_identical_checkpoints() {
    let d = data(20, 3);
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = Network::<f32>::init(build_tiny_net(Variant::Sts, 4, 6).unwrap(), &mut rng).unwrap();
        let set = Samples::new(d.clips.tensor(), d.labels(Task::Joint)).unwrap();
        let report = train(&mut net, set, Some(set), &quick(2), TrainOptions::default(), |_| {}).unwrap();
        (net.to_checkpoint(), report)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert!(a.bits_eq(&b));
    assert_eq!(ra, rb);
}

fn tiny_pipeline(pretrain_epochs: usize, finetune_epochs: usize) -> PipelineConfig {
    PipelineConfig {
        data: MovingShapesConfig {
            n: 48,
            frames: 4,
            height: 16,
            width: 16,
            num_shapes: 3,
            num_motions: 2,
            noise: 0.1,
        },
        val_size: 60,
        pretrain_images: 96,
        width: 2,
        variant: Variant::Sts,
        init: InitStrategy::Sts2d,
        pretrain: TrainConfig {
            epochs: pretrain_epochs,
            batch_size: 16,
            ..Default::default()
        },
        finetune: TrainConfig {
            epochs: finetune_epochs,
            batch_size: 16,
            ..Default::default()
        },
        threshold: 0.9,
    }
}

#[test]
fn scratch_control_without_budget_is_at_chance() {
    let report = pipeline_pretrain_finetune::<f32>(&tiny_pipeline(0, 0), 5, |_, _| {}).unwrap();
    assert_eq!(report.scratch_cap, 0);
    assert_eq!(report.scratch_curve.len(), 1);
    let chance = 1.0 / 6.0;
    assert!((report.scratch_curve[0] - chance).abs() <= 0.1, "{}", report.scratch_curve[0]);
}

#[test]
fn pipeline_budgets_are_matched_and_reported() {
    let report = pipeline_pretrain_finetune::<f32>(&tiny_pipeline(4, 2), 1, |_, _| {}).unwrap();
    // 4 image epochs over 96 frames plus 2 clip epochs over 48 clips of 4 frames.
    assert_eq!(report.pretrained_budget, 4 * 96 + 2 * 48 * 4);
    assert_eq!(report.scratch_cap, 4);
    assert_eq!(report.scratch_budget, 4 * 48 * 4);
    assert!(report.finetune_curve.len() <= 3 && report.scratch_curve.len() <= 5);
    assert!(report.pretrain_accuracy > 0.0);
}

#[test]
fn odd_width_is_rejected() {
    let mut cfg = tiny_pipeline(1, 1);
    cfg.width = 3;
    assert!(pipeline_pretrain_finetune::<f32>(&cfg, 0, |_, _| {}).is_err());
}
