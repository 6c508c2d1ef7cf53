//! Temporal slicing of 3D networks and linear probing of frozen features.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{AnyTensor, Checkpoint};
use crate::network::{ConvLayer, Layer, NetworkSpec};
use crate::tensor::{concat_leading, Element, Tensor};

/// `w3d[:, :, t]` of a `(C_out, C_in/g, 3, Kh, Kw)` kernel.
pub fn slice_kernel<T: Element>(w3d: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    let d = w3d.dims();
    if d.len() != 5 || d[2] != 3 {
        return Err(Error::shape(format!("expected a (C_out, C_in/g, 3, Kh, Kw) kernel, got {d:?}")));
    }
    if t > 2 {
        return Err(Error::Index { index: t, len: 3 });
    }
    let plane = d[3] * d[4];
    let mut out = Vec::with_capacity(d[0] * d[1] * plane);
    for filt in w3d.data().chunks_exact(3 * plane) {
        out.extend_from_slice(&filt[t * plane..(t + 1) * plane]);
    }
    Ok(Tensor::from_parts(vec![d[0], d[1], d[3], d[4]], out))
}

/// Inverse of [`slice_kernel`] over all three temporal indices.
pub fn stack_kernels<T: Element>(slices: &[Tensor<T>; 3]) -> Result<Tensor<T>> {
    let d = slices[0].dims();
    if d.len() != 4 || slices.iter().any(|s| s.dims() != d) {
        return Err(Error::shape("slices must be equally shaped 4D kernels"));
    }
    let plane = d[2] * d[3];
    let mut out = Vec::with_capacity(3 * slices[0].len());
    if plane > 0 {
        let chunks: Vec<_> = slices.iter().map(|s| s.data().chunks_exact(plane)).collect();
        let [mut a, mut b, mut c] = <[_; 3]>::try_from(chunks).ok().expect("three slices");
        while let (Some(x), Some(y), Some(z)) = (a.next(), b.next(), c.next()) {
            out.extend_from_slice(x);
            out.extend_from_slice(y);
            out.extend_from_slice(z);
        }
    }
    Ok(Tensor::from_parts(vec![d[0], d[1], 3, d[2], d[3]], out))
}

fn slice_any(w: &AnyTensor, t: usize) -> Result<AnyTensor> {
    Ok(match w {
        AnyTensor::F32(x) => AnyTensor::F32(slice_kernel(x, t)?),
        AnyTensor::F64(x) => AnyTensor::F64(slice_kernel(x, t)?),
    })
}

fn entry<'a>(ckpt: &'a Checkpoint, name: &str) -> Result<&'a AnyTensor> {
    ckpt.get(name)
        .ok_or_else(|| Error::config(format!("checkpoint lacks {name}")))
}

fn probe_layers(layers: &[Layer], ckpt: &Checkpoint, t: usize, out: &mut Checkpoint) -> Result<Vec<Layer>> {
    let mut res = Vec::with_capacity(layers.len());
    for l in layers {
        let probed = match l {
            Layer::Conv(c) => {
                let w = entry(ckpt, &c.weight_name())?;
                match c.kernel[0] {
                    1 => out.set(c.weight_name(), w.clone()),
                    3 => out.set(c.weight_name(), slice_any(w, t)?),
                    kt => {
                        return Err(Error::config(format!(
                            "{}: temporal extent {kt} cannot be probed",
                            c.name
                        )))
                    }
                }
                let mut c2 = c.clone();
                c2.kernel[0] = 1;
                c2.stride[0] = 1;
                c2.padding[0] = 0;
                Layer::Conv(c2)
            }
            Layer::Sts { name, config } => {
                let beta = slice_any(entry(ckpt, &format!("{name}.beta"))?, t)?;
                let alpha = entry(ckpt, &format!("{name}.alpha{t}"))?.clone();
                if t == 1 {
                    let w = match (&alpha, &beta) {
                        (AnyTensor::F32(a), AnyTensor::F32(b)) => AnyTensor::F32(concat_leading(a, b)?),
                        (AnyTensor::F64(a), AnyTensor::F64(b)) => AnyTensor::F64(concat_leading(a, b)?),
                        _ => return Err(Error::format(format!("{name}: mixed dtypes"))),
                    };
                    let conv = ConvLayer::new(name.clone(), config.c_in, config.c_out, [1, config.kernel[1], config.kernel[2]])
                        .with_groups(config.groups);
                    out.set(conv.weight_name(), w);
                    Layer::Conv(conv)
                } else {
                    out.set(format!("{name}.static"), alpha);
                    out.set(format!("{name}.dynamic"), beta);
                    Layer::StsSlice {
                        name: name.clone(),
                        t,
                        config: *config,
                    }
                }
            }
            Layer::StsSlice { name, .. } => {
                return Err(Error::config(format!("{name}: layer is already a temporal slice")));
            }
            Layer::Residual { body, shortcut } => Layer::Residual {
                body: probe_layers(body, ckpt, t, out)?,
                shortcut: probe_layers(shortcut, ckpt, t, out)?,
            },
            Layer::BatchNorm { name, .. } => {
                for k in ["weight", "bias", "running_mean", "running_var"] {
                    let key = format!("{name}.{k}");
                    out.set(key.clone(), entry(ckpt, &key)?.clone());
                }
                l.clone()
            }
            Layer::Linear { name, .. } => {
                for k in ["weight", "bias"] {
                    let key = format!("{name}.{k}");
                    out.set(key.clone(), entry(ckpt, &key)?.clone());
                }
                l.clone()
            }
            Layer::Relu | Layer::GlobalAvgPool => l.clone(),
        };
        res.push(probed);
    }
    Ok(res)
}

/// The 2D network seen through temporal index `t` of every kernel.
///
/// Temporal convolutions keep slice `t`, spatial layers and normalization
/// statistics are carried over unchanged. An STS layer probed at `t = 1`
/// becomes one plain convolution (`alpha1` stacked on the centre slice of
/// `beta`); at other indices it becomes a [`Layer::StsSlice`] whose static
/// block applies the flattened row (`t = 0`) or column (`t = 2`) operator.
pub fn probe_network(spec: &NetworkSpec, ckpt: &Checkpoint, t: usize) -> Result<(NetworkSpec, Checkpoint)> {
    if t > 2 {
        return Err(Error::Index { index: t, len: 3 });
    }
    spec.validate()?;
    let mut out = Checkpoint::new();
    let layers = probe_layers(&spec.layers, ckpt, t, &mut out)?;
    let probed = NetworkSpec::new(spec.input_channels, layers)?;
    Ok((probed, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Share of samples held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for LinearProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.5,
            weight_decay: 0.0,
            val_fraction: 0.25,
            seed: 0,
        }
    }
}

/// Trains a softmax classifier on `features` by full-batch gradient descent
/// after a seeded train/validation split and returns validation accuracy.
pub fn linear_probe(features: &Tensor<f64>, labels: &[usize], cfg: &LinearProbeConfig) -> Result<f64> {
    let n = labels.len();
    if features.rank() != 2 || features.dims()[0] != n {
        return Err(Error::shape(format!(
            "features {:?} do not match {n} labels",
            features.dims()
        )));
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::config("validation fraction must lie in [0, 1)"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_val = ((n as f64) * cfg.val_fraction).round() as usize;
    let (val, train) = order.split_at(n_val.min(n));
    let val = if val.is_empty() { train } else { val };
    let pick = |idx: &[usize]| {
        let d = features.dims()[1];
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&features.data()[i * d..(i + 1) * d]);
        }
        (Tensor::from_parts(vec![idx.len(), d], data), idx.iter().map(|&i| labels[i]).collect::<Vec<_>>())
    };
    let (xt, yt) = pick(train);
    let (xv, yv) = pick(val);
    let (w, b) = fit_linear(&xt, &yt, cfg)?;
    Ok(accuracy(&xv, &yv, &w, &b))
}

/// Softmax regression weights `(K, D)` and biases `(K)`.
pub fn fit_linear(x: &Tensor<f64>, y: &[usize], cfg: &LinearProbeConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, d) = (x.dims()[0], x.dims()[1]);
    if n == 0 {
        return Err(Error::config("no training samples"));
    }
    let k = y.iter().max().map_or(0, |m| m + 1);
    if y.iter().all(|&c| c == y[0]) {
        return Err(Error::config("linear probe needs at least two classes"));
    }
    let mut w = vec![0.0; k * d];
    let mut b = vec![0.0; k];
    for _ in 0..cfg.epochs {
        let mut gw = vec![0.0; k * d];
        let mut gb = vec![0.0; k];
        for (row, &label) in x.data().chunks_exact(d).zip(y) {
            let logits: Vec<f64> = (0..k)
                .map(|c| b[c] + row.iter().zip(&w[c * d..(c + 1) * d]).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = ex.iter().sum();
            for c in 0..k {
                let g = (ex[c] / z - if c == label { 1.0 } else { 0.0 }) / n as f64;
                gb[c] += g;
                for (gwi, xi) in gw[c * d..(c + 1) * d].iter_mut().zip(row) {
                    *gwi += g * xi;
                }
            }
        }
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= cfg.learning_rate * (gi + cfg.weight_decay * *wi);
        }
        for (bi, gi) in b.iter_mut().zip(&gb) {
            *bi -= cfg.learning_rate * gi;
        }
    }
    Ok((w, b))
}

fn accuracy(x: &Tensor<f64>, y: &[usize], w: &[f64], b: &[f64]) -> f64 {
    let d = x.dims()[1];
    let k = b.len();
    let correct = x
        .data()
        .chunks_exact(d.max(1))
        .zip(y)
        .filter(|(row, &label)| {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for c in 0..k {
                let v = b[c] + row.iter().zip(&w[c * d..(c + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            best == label
        })
        .count();
    correct as f64 / y.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::zero_init_3d;
    use rand::Rng;

    /// Box-Muller standard normal.
    fn normal(rng: &mut impl Rng) -> f64 {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    #[test]
    fn slice_zero_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w2 = Tensor::<f64>::random_uniform(&[4, 2, 3, 3], -1.0, 1.0, &mut rng);
        let w3 = zero_init_3d(&w2).unwrap();
        assert!(slice_kernel(&w3, 1).unwrap().bits_eq(&w2));
        assert!(slice_kernel(&w3, 0).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(slice_kernel(&w3, 3).is_err());
    }

    #[test]
    fn reassembly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for dims in [[3, 2, 3, 3, 3], [2, 1, 3, 1, 1], [1, 4, 3, 5, 3]] {
            let w = Tensor::<f64>::random_uniform(&dims, -1.0, 1.0, &mut rng);
            let s = [0, 1, 2].map(|t| slice_kernel(&w, t).unwrap());
            assert_eq!(s[0].dims(), &[dims[0], dims[1], dims[3], dims[4]]);
            assert!(stack_kernels(&s).unwrap().bits_eq(&w));
        }
    }

    #[test]
    fn separable_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let centre = if c == 0 { -2.0 } else { 2.0 };
            data.push(centre + 0.5 * normal(&mut rng));
            data.push(centre + 0.5 * normal(&mut rng));
            labels.push(c);
        }
        let x = Tensor::from_vec(&[n, 2], data).unwrap();
        let acc = linear_probe(&x, &labels, &LinearProbeConfig::default()).unwrap();
        assert!(acc >= 0.95, "accuracy {acc}");
    }

    #[test]
    fn random_labels_stay_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 800;
        let x = Tensor::<f64>::random_uniform(&[n, 8], -1.0, 1.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let acc = linear_probe(&x, &labels, &LinearProbeConfig::default()).unwrap();
        assert!((acc - 0.25).abs() <= 0.1, "accuracy {acc}");
    }

    #[test]
    fn zero_features_predict_majority() {
        let labels: Vec<usize> = (0..40).map(|i| usize::from(i % 4 == 0)).collect();
        let x = Tensor::zeros(&[40, 3]);
        let (w, b) = fit_linear(&x, &labels, &LinearProbeConfig::default()).unwrap();
        let majority = labels.iter().filter(|&&c| c == 0).count() as f64 / 40.0;
        assert_eq!(accuracy(&x, &labels, &w, &b), majority);
    }

    #[test]
    fn single_class_rejected() {
        let x = Tensor::zeros(&[10, 2]);
        assert!(linear_probe(&x, &[1; 10], &LinearProbeConfig::default()).is_err());
    }
}
