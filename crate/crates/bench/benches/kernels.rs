use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stslab::conv::{conv3d, conv3d_backward, naive_conv};
use stslab::sts::{sts_backward, sts_forward};
use stslab::{ConvSpec, StsConfig, StsParams, Tensor};

fn inputs(c: usize) -> (Tensor<f32>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::random_uniform(&[2, c, 4, 16, 16], -1.0, 1.0, &mut rng);
    (x, rng)
}

fn conv(cr: &mut Criterion) {
    let (x, mut rng) = inputs(16);
    let spec = ConvSpec::new(&[3, 3, 3]);
    let w = Tensor::<f32>::random_uniform(&[16, 16, 3, 3, 3], -1.0, 1.0, &mut rng);
    let y = conv3d(&x, &w, &spec).unwrap();
    cr.bench_function("conv3d 16->16 3x3x3", |b| b.iter(|| conv3d(black_box(&x), &w, &spec).unwrap()));
    cr.bench_function("conv3d backward", |b| b.iter(|| conv3d_backward(black_box(&x), &w, &spec, &y).unwrap()));
    let dw = ConvSpec::new(&[3, 3, 3]).with_groups(16);
    let wd = Tensor::<f32>::random_uniform(&[16, 1, 3, 3, 3], -1.0, 1.0, &mut rng);
    cr.bench_function("conv3d channel-wise", |b| b.iter(|| conv3d(black_box(&x), &wd, &dw).unwrap()));
    cr.bench_function("naive conv3d channel-wise", |b| b.iter(|| naive_conv(black_box(&x), &wd, &dw).unwrap()));
}

fn sts(cr: &mut Criterion) {
    let (x, mut rng) = inputs(16);
    for groups in [1, 16] {
        let cfg = StsConfig::new(16, 16, 3, 3).unwrap().with_groups(groups).unwrap();
        let p = StsParams::<f32>::init_fresh(&cfg, &mut rng);
        let y = sts_forward(&x, &p, &cfg).unwrap();
        cr.bench_function(&format!("sts forward groups {groups}"), |b| {
            b.iter(|| sts_forward(black_box(&x), &p, &cfg).unwrap())
        });
        cr.bench_function(&format!("sts backward groups {groups}"), |b| {
            b.iter(|| sts_backward(black_box(&x), &p, &cfg, &y).unwrap())
        });
    }
}

criterion_group!(benches, conv, sts);
criterion_main!(benches);
