use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stslab::budget::{budget_multiplier, total_budget, DatasetSpec, Planner};
use stslab::conv::{conv2d, conv3d, naive_conv, ConvSpec};
use stslab::init::{inflate_2d_to_3d, zero_init_3d, Checkpoint, InflationRates};
use stslab::probe::{slice_kernel, stack_kernels};
use stslab::rf::{impulse_footprint, rf_of_layer, rf_of_stack, RfLayer};
use stslab::sts::{assemble_baseline_weights, split_baseline_weights, sts_forward, StsConfig, StsParams};
use stslab::tensor::{
    concat_channels, flatten_cols, flatten_rows, slice_time, split_channels, unflatten_cols, unflatten_rows, Tensor,
    VideoBatch,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(dims: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::random_uniform(dims, -1.0, 1.0, &mut rng(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flatten_rows_and_cols_are_bijections(
        n in 1usize..3, c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()
    ) {
        let x = uniform(&[n, c, h, w], seed);
        let rows = flatten_rows(&x).unwrap();
        prop_assert_eq!(rows.dims(), &[n, c, h * w]);
        prop_assert!(unflatten_rows(&rows, h, w).unwrap().bits_eq(&x));
        let cols = flatten_cols(&x).unwrap();
        prop_assert!(unflatten_cols(&cols, h, w).unwrap().bits_eq(&x));
        // Row raster visits (r, q) at r * w + q, column raster at q * h + r.
        let (r, q) = (h - 1, w / 2);
        prop_assert_eq!(rows.get(&[0, 0, r * w + q]).unwrap(), x.get(&[0, 0, r, q]).unwrap());
        prop_assert_eq!(cols.get(&[0, 0, q * h + r]).unwrap(), x.get(&[0, 0, r, q]).unwrap());
    }

    #[test]
    fn concat_then_split_is_identity(
        n in 1usize..3, a in 0usize..4, b in 0usize..4, t in 1usize..3, s in 1usize..4, seed in any::<u64>()
    ) {
        let x = uniform(&[n, a, t, s, s], seed);
        let y = uniform(&[n, b, t, s, s], seed ^ 1);
        let joined = concat_channels(&x, &y).unwrap();
        let (l, r) = split_channels(&joined, a).unwrap();
        prop_assert!(l.bits_eq(&x) && r.bits_eq(&y));
    }

    #[test]
    fn conv3d_matches_naive_and_is_linear(
        c in 1usize..4, o in 1usize..4, kt in 1usize..4, kh in 1usize..4, kw in 1usize..4,
        dt in 0usize..3, dh in 0usize..4, dw in 0usize..4, stride in 1usize..3, seed in any::<u64>()
    ) {
        let (t, h, w) = (kt + dt, kh + dh, kw + dw);
        let spec = ConvSpec::new(&[kt, kh, kw]).with_stride(&[1, stride, stride]);
        let x1 = uniform(&[2, c, t, h, w], seed);
        let x2 = uniform(&[2, c, t, h, w], seed ^ 7);
        let wt = uniform(&[o, c, kt, kh, kw], seed ^ 11);
        let y1 = conv3d(&x1, &wt, &spec).unwrap();
        prop_assert!(y1.max_abs_diff(&naive_conv(&x1, &wt, &spec).unwrap()).unwrap() < 1e-12);
        let sum = conv3d(&x1.add(&x2).unwrap(), &wt, &spec).unwrap();
        let parts = y1.add(&conv3d(&x2, &wt, &spec).unwrap()).unwrap();
        prop_assert!(sum.max_abs_diff(&parts).unwrap() < 1e-12);
    }

    #[test]
    fn grouped_conv2d_matches_naive(
        g in 1usize..4, cg in 1usize..3, og in 1usize..3, s in 2usize..7, k in 1usize..4, d in 1usize..4,
        pad in prop::option::of(0usize..6), seed in any::<u64>()
    ) {
        let mut spec = ConvSpec::new(&[k, k]).with_dilation(&[d, d]).with_groups(g);
        if let Some(p) = pad {
            prop_assume!(s + 2 * p > d * (k - 1));
            spec = spec.with_padding(&[p, p]);
        }
        let x = uniform(&[1, g * cg, s, s], seed);
        let w = uniform(&[g * og, cg, k, k], seed ^ 3);
        let fast = conv2d(&x, &w, &spec).unwrap();
        prop_assert!(fast.max_abs_diff(&naive_conv(&x, &w, &spec).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn zero_init_matches_per_frame_2d(
        c in 1usize..4, o in 1usize..4, t in 1usize..5, s in 1usize..6, k in prop::sample::select(vec![1usize, 3, 5]),
        seed in any::<u64>()
    ) {
        let x = uniform(&[1, c, t, s, s], seed);
        let w2d = uniform(&[o, c, k, k], seed ^ 5);
        let w3d = zero_init_3d(&w2d).unwrap();
        prop_assert!(w3d.bits_eq(&inflate_2d_to_3d(&w2d, &InflationRates::from_fractions([(0, 1), (1, 1), (0, 1)]).unwrap()).unwrap()));
        let y = VideoBatch::new(conv3d(&x, &w3d, &ConvSpec::new(&[3, k, k])).unwrap()).unwrap();
        let xv = VideoBatch::new(x).unwrap();
        for f in 0..t {
            let frame = conv2d(&slice_time(&xv, f).unwrap(), &w2d, &ConvSpec::new(&[k, k])).unwrap();
            prop_assert!(slice_time(&y, f).unwrap().bits_eq(&frame));
        }
    }

    #[test]
    fn slicing_then_stacking_reassembles(o in 1usize..4, c in 1usize..4, k in 1usize..4, seed in any::<u64>()) {
        let w = uniform(&[o, c, 3, k, k], seed);
        let slices = [0, 1, 2].map(|t| slice_kernel(&w, t).unwrap());
        prop_assert!(stack_kernels(&slices).unwrap().bits_eq(&w));
    }

    #[test]
    fn sts_split_and_assemble_round_trip(
        half in 1usize..5, k in prop::sample::select(vec![1usize, 3, 5]), seed in any::<u64>()
    ) {
        let c = 2 * half;
        let cfg = StsConfig::new(c, c, k, k).unwrap();
        let theta = uniform(&cfg.baseline_dims(), seed);
        let p = split_baseline_weights(&theta, &cfg).unwrap();
        prop_assert!(assemble_baseline_weights(&p, &cfg).unwrap().bits_eq(&theta));
    }

    #[test]
    fn sts_without_flattened_kernels_is_frame_conv_plus_3d_conv(
        half in 1usize..4, t in 1usize..4, s in 2usize..6, seed in any::<u64>()
    ) {
        let c = 2 * half;
        let cfg = StsConfig::new(c, c, 3, 3).unwrap();
        let mut p = StsParams::<f64>::init_fresh(&cfg, &mut rng(seed));
        p.alpha0 = Tensor::zeros(p.alpha0.dims());
        p.alpha2 = Tensor::zeros(p.alpha2.dims());
        let x = uniform(&[1, c, t, s, s], seed ^ 9);
        let y = sts_forward(&x, &p, &cfg).unwrap();
        let a1 = p.alpha1.clone().reshape(&[half, c, 1, 3, 3]).unwrap();
        let stat = conv3d(&x, &a1, &ConvSpec::new(&[1, 3, 3])).unwrap();
        let dynamic = conv3d(&x, &p.beta, &ConvSpec::new(&[3, 3, 3])).unwrap();
        let expected = concat_channels(&stat, &dynamic).unwrap();
        prop_assert!(y.max_abs_diff(&expected).unwrap() <= 1e-12);
    }

    #[test]
    fn checkpoint_bytes_round_trip(entries in 0usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut ckpt = Checkpoint::new();
        for i in 0..entries {
            let dims: Vec<usize> = (0..(1 + i % 5)).map(|j| 1 + (i + j) % 3).collect();
            if i % 2 == 0 {
                ckpt.insert(format!("p{i}.weight"), Tensor::<f32>::random_uniform(&dims, -5.0, 5.0, &mut r)).unwrap();
            } else {
                ckpt.insert(format!("p{i}.bias"), Tensor::<f64>::random_uniform(&dims, -5.0, 5.0, &mut r)).unwrap();
            }
        }
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        prop_assert!(back.bits_eq(&ckpt));
    }

    #[test]
    fn budget_is_additive_and_monotone(
        pre in 0u64..400, fine in 0u64..200, extra in 1u64..50, frames in 1u64..64
    ) {
        let planner = Planner::new(DatasetSpec::builtin("imagenet").unwrap(), DatasetSpec::builtin("k400").unwrap());
        let plan = planner.plan(frames, pre, fine);
        prop_assert_eq!(total_budget(&plan), plan.pretrain_budget() + plan.finetune_budget());
        let more = planner.plan(frames, pre + extra, fine);
        prop_assert!(total_budget(&more) > total_budget(&plan));
        let base = planner.baseline(frames, 256);
        let (a, b) = (budget_multiplier(&plan, &base).unwrap(), budget_multiplier(&more, &base).unwrap());
        prop_assert!(b.ratio() > a.ratio());
    }

    #[test]
    fn composed_rf_matches_impulse_footprint(
        layers in prop::collection::vec((prop::sample::select(vec![1usize, 3, 5]), 1usize..3, 1usize..3), 1..4),
        seed in any::<u64>()
    ) {
        let specs: Vec<ConvSpec> = layers.iter().map(|&(k, s, d)| ConvSpec::new(&[k, k]).with_dilation(&[d, d]).with_stride(&[s, s])).collect();
        let symbolic = rf_of_stack(&specs.iter().map(|s| rf_of_layer(&RfLayer::Conv(s.clone())).unwrap()).collect::<Vec<_>>());
        let mut r = rng(seed);
        let weights: Vec<Tensor<f64>> = specs.iter().map(|s| Tensor::random_uniform(&[2, 2, s.kernel[0], s.kernel[1]], 0.1, 1.0, &mut r)).collect();
        let extent = 4 * symbolic.height + 16;
        let mut out = extent;
        for s in &specs {
            out = s.output_extents(&[out, out]).unwrap()[0];
        }
        let measured = impulse_footprint(&specs, &weights, (extent, extent), (out / 2, out / 2)).unwrap();
        prop_assert_eq!(measured, symbolic);
    }
}
