//! Layer-list networks over `(N, C, T, H, W)` activations with a recorded
//! backward pass. Images enter as `(N, C, H, W)` and run with `T = 1`.

mod spec;
mod transfer;

use indexmap::IndexMap;
use rand::Rng;

use crate::conv::{self, Geometry};
use crate::error::{Error, Result};
use crate::init::{zero_init_3d, AnyTensor, Checkpoint};
use crate::probe::slice_kernel;
use crate::sts::{sts_backward, sts_forward, StsConfig, StsParams};
use crate::tensor::{Element, Tensor};

pub use spec::{ConvLayer, Layer, NetworkSpec, ParamInfo, ParamRole};
pub use transfer::transfer_2d_to_3d;

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

pub type Grads<T> = IndexMap<String, Tensor<T>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Running statistics.
    Eval,
}

enum Record<T> {
    Conv { x: Tensor<T> },
    Sts { x: Tensor<T> },
    StsSlice { x: Tensor<T>, params: StsParams<T> },
    Norm { xhat: Vec<T>, inv_std: Vec<T>, batch: bool },
    Relu { y: Tensor<T> },
    Residual { body: Vec<Record<T>>, shortcut: Vec<Record<T>> },
    Pool { dims: Vec<usize> },
    Linear { x: Tensor<T> },
}

/// Saved activations of one forward pass.
pub struct Tape<T> {
    records: Vec<Record<T>>,
    /// `(layer name, batch mean, unbiased batch variance)`.
    norm_stats: Vec<(String, Vec<f64>, Vec<f64>)>,
}

struct Ctx<T> {
    mode: Mode,
    record: bool,
    norm_stats: Vec<(String, Vec<f64>, Vec<f64>)>,
    trace: Option<Vec<(String, Tensor<T>)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    spec: NetworkSpec,
    params: IndexMap<String, Tensor<T>>,
}

fn as_video<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    match x.rank() {
        5 => Ok(x.clone()),
        4 => {
            let d = x.dims();
            x.clone().reshape(&[d[0], d[1], 1, d[2], d[3]])
        }
        r => Err(Error::shape(format!("network input must be rank 4 or 5, got rank {r}"))),
    }
}

fn w5(dims: &[usize]) -> Vec<usize> {
    if dims.len() == 4 {
        vec![dims[0], dims[1], 1, dims[2], dims[3]]
    } else {
        dims.to_vec()
    }
}

fn conv_geometry<T: Element>(x: &Tensor<T>, w: &Tensor<T>, c: &ConvLayer) -> Result<Geometry> {
    Geometry::new(x.dims(), &w5(w.dims()), &c.conv_spec(), c.c_out, 0)
}

fn uniform<T: Element>(dims: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::random_uniform(dims, -bound, bound, rng)
}

fn init_layers<T: Element>(layers: &[Layer], rng: &mut impl Rng, out: &mut IndexMap<String, Tensor<T>>) {
    for l in layers {
        match l {
            Layer::Conv(c) => {
                let dims = c.weight_dims();
                let fan: usize = dims[1..].iter().product();
                out.insert(c.weight_name(), uniform(&dims, (6.0 / fan as f64).sqrt(), rng));
            }
            Layer::Sts { name, config } => {
                let p = StsParams::<T>::init_fresh(config, rng);
                out.insert(format!("{name}.alpha0"), p.alpha0);
                out.insert(format!("{name}.alpha1"), p.alpha1);
                out.insert(format!("{name}.alpha2"), p.alpha2);
                out.insert(format!("{name}.beta"), p.beta);
            }
            Layer::StsSlice { name, config, .. } => {
                let p = StsParams::<T>::init_fresh(config, rng);
                out.insert(format!("{name}.static"), p.alpha1);
                let dynamic = slice_kernel(&p.beta, 1).expect("beta has three slices");
                out.insert(format!("{name}.dynamic"), dynamic);
            }
            Layer::BatchNorm { name, channels, .. } => {
                let c = [*channels];
                out.insert(format!("{name}.weight"), Tensor::full(&c, T::one()));
                out.insert(format!("{name}.bias"), Tensor::zeros(&c));
                out.insert(format!("{name}.running_mean"), Tensor::zeros(&c));
                out.insert(format!("{name}.running_var"), Tensor::full(&c, T::one()));
            }
            Layer::Linear { name, c_in, c_out } => {
                let bound = 1.0 / (*c_in as f64).sqrt();
                out.insert(format!("{name}.weight"), uniform(&[*c_out, *c_in], bound, rng));
                out.insert(format!("{name}.bias"), Tensor::zeros(&[*c_out]));
            }
            Layer::Residual { body, shortcut } => {
                init_layers(body, rng, out);
                init_layers(shortcut, rng, out);
            }
            Layer::Relu | Layer::GlobalAvgPool => {}
        }
    }
}

fn label(l: &Layer) -> String {
    match l {
        Layer::Conv(c) => c.name.clone(),
        Layer::Sts { name, .. }
        | Layer::StsSlice { name, .. }
        | Layer::BatchNorm { name, .. }
        | Layer::Linear { name, .. } => name.clone(),
        Layer::Relu => "relu".into(),
        Layer::Residual { .. } => "residual".into(),
        Layer::GlobalAvgPool => "pool".into(),
    }
}

impl<T: Element> Network<T> {
    /// Fresh parameters: fan-in scaled uniform convolutions, identity
    /// normalization, small uniform head.
    pub fn init(spec: NetworkSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = IndexMap::new();
        init_layers(&spec.layers, rng, &mut params);
        Self::from_params(spec, params)
    }

    pub fn from_params(spec: NetworkSpec, mut params: IndexMap<String, Tensor<T>>) -> Result<Self> {
        spec.validate()?;
        let infos = spec.params();
        if params.len() != infos.len() {
            return Err(Error::config(format!(
                "network has {} parameters, {} given",
                infos.len(),
                params.len()
            )));
        }
        let mut ordered = IndexMap::with_capacity(infos.len());
        for info in infos {
            let t = params
                .shift_remove(&info.name)
                .ok_or_else(|| Error::config(format!("missing parameter {}", info.name)))?;
            if t.dims() != info.dims.as_slice() {
                return Err(Error::shape(format!(
                    "parameter {} has dims {:?}, expected {:?}",
                    info.name,
                    t.dims(),
                    info.dims
                )));
            }
            ordered.insert(info.name, t);
        }
        Ok(Self { spec, params: ordered })
    }

    /// Loads every parameter the spec names; extra checkpoint entries are
    /// ignored.
    pub fn from_checkpoint(spec: NetworkSpec, ckpt: &Checkpoint) -> Result<Self> {
        let mut params = IndexMap::new();
        for info in spec.params() {
            params.insert(info.name.clone(), ckpt.tensor::<T>(&info.name)?);
        }
        Self::from_params(spec, params)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (k, v) in &self.params {
            c.set(k.clone(), AnyTensor::from_tensor(v));
        }
        c
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<T>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::config(format!("no parameter named {name:?}")))
    }

    /// Replaces one parameter, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("no parameter named {name:?}")))?;
        if slot.dims() != value.dims() {
            return Err(Error::shape(format!(
                "parameter {name} has dims {:?}, got {:?}",
                slot.dims(),
                value.dims()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.spec
            .params()
            .into_iter()
            .filter(|p| p.role == ParamRole::Trainable)
            .map(|p| p.name)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.spec
            .params()
            .iter()
            .filter(|p| p.role == ParamRole::Trainable)
            .map(|p| p.dims.iter().product::<usize>())
            .sum()
    }

    fn p(&self, name: String) -> &Tensor<T> {
        &self.params[&name]
    }

    /// Inference with running statistics.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut ctx = Ctx {
            mode: Mode::Eval,
            record: false,
            norm_stats: Vec::new(),
            trace: None,
        };
        self.run(&self.spec.layers, as_video(x)?, &mut ctx).map(|(y, _)| y)
    }

    /// Forward pass that keeps what [`Network::backward`] needs.
    pub fn forward_tape(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tape<T>)> {
        let mut ctx = Ctx {
            mode,
            record: true,
            norm_stats: Vec::new(),
            trace: None,
        };
        let (y, records) = self.run(&self.spec.layers, as_video(x)?, &mut ctx)?;
        Ok((
            y,
            Tape {
                records,
                norm_stats: ctx.norm_stats,
            },
        ))
    }

    /// Every intermediate output in evaluation mode, labelled by layer.
    pub fn trace(&self, x: &Tensor<T>) -> Result<Vec<(String, Tensor<T>)>> {
        let mut ctx = Ctx {
            mode: Mode::Eval,
            record: false,
            norm_stats: Vec::new(),
            trace: Some(Vec::new()),
        };
        self.run(&self.spec.layers, as_video(x)?, &mut ctx)?;
        Ok(ctx.trace.unwrap_or_default())
    }

    /// Pooled features: the output of the top-level layers up to and
    /// including the global pool.
    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let end = self
            .spec
            .layers
            .iter()
            .position(|l| matches!(l, Layer::GlobalAvgPool))
            .ok_or_else(|| Error::config("network has no global pool"))?;
        let mut ctx = Ctx {
            mode: Mode::Eval,
            record: false,
            norm_stats: Vec::new(),
            trace: None,
        };
        self.run(&self.spec.layers[..=end], as_video(x)?, &mut ctx).map(|(y, _)| y)
    }

    /// Folds the batch statistics of a training pass into the running
    /// statistics.
    pub fn update_running_stats(&mut self, tape: &Tape<T>) -> Result<()> {
        let m = BN_MOMENTUM;
        for (name, mean, var) in &tape.norm_stats {
            for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
                let key = format!("{name}.{suffix}");
                let r = self
                    .params
                    .get_mut(&key)
                    .ok_or_else(|| Error::config(format!("no parameter named {key:?}")))?;
                for (v, b) in r.data_mut().iter_mut().zip(batch) {
                    *v = T::from_f64_lossy((1.0 - m) * v.as_f64() + m * b);
                }
            }
        }
        Ok(())
    }

    fn run(&self, layers: &[Layer], mut x: Tensor<T>, ctx: &mut Ctx<T>) -> Result<(Tensor<T>, Vec<Record<T>>)> {
        let mut records = Vec::new();
        for l in layers {
            let (y, rec) = self.run_layer(l, x, ctx)?;
            if let Some(tr) = ctx.trace.as_mut() {
                tr.push((label(l), y.clone()));
            }
            if ctx.record {
                records.push(rec.expect("recorded"));
            }
            x = y;
        }
        Ok((x, records))
    }

    fn run_layer(&self, l: &Layer, x: Tensor<T>, ctx: &mut Ctx<T>) -> Result<(Tensor<T>, Option<Record<T>>)> {
        let keep = ctx.record;
        match l {
            Layer::Conv(c) => {
                let w = self.p(c.weight_name());
                let g = conv_geometry(&x, w, c)?;
                let y = Tensor::from_parts(g.output_dims(3), conv::forward(x.data(), w.data(), &g));
                Ok((y, keep.then(|| Record::Conv { x })))
            }
            Layer::Sts { name, config } => {
                let p = self.sts_params(name)?;
                let y = sts_forward(&x, &p, config)?;
                Ok((y, keep.then(|| Record::Sts { x })))
            }
            Layer::StsSlice { name, t, config } => {
                let p = self.slice_params(name, *t, config)?;
                let y = sts_forward(&x, &p, config)?;
                Ok((y, keep.then(|| Record::StsSlice { x, params: p })))
            }
            Layer::BatchNorm { name, channels, eps } => {
                let (y, rec) = self.norm_forward(name, *channels, *eps, &x, ctx)?;
                Ok((y, keep.then_some(rec)))
            }
            Layer::Relu => {
                let y = x.map(|v| if v > T::zero() { v } else { T::zero() });
                let rec = keep.then(|| Record::Relu { y: y.clone() });
                Ok((y, rec))
            }
            Layer::Residual { body, shortcut } => {
                let (a, rb) = self.run(body, x.clone(), ctx)?;
                let (b, rs) = if shortcut.is_empty() {
                    (x, Vec::new())
                } else {
                    self.run(shortcut, x, ctx)?
                };
                let y = a.add(&b)?;
                Ok((y, keep.then_some(Record::Residual { body: rb, shortcut: rs })))
            }
            Layer::GlobalAvgPool => {
                let d = x.dims().to_vec();
                if d.len() != 5 {
                    return Err(Error::shape(format!("pooling needs (N,C,T,H,W), got {d:?}")));
                }
                let (t, hw) = (d[2], d[3] * d[4]);
                let y: Vec<T> = x
                    .data()
                    .chunks_exact(t * hw)
                    .map(|clip| {
                        let frames: f64 = clip
                            .chunks_exact(hw)
                            .map(|f| f.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64)
                            .sum();
                        T::from_f64_lossy(frames / t as f64)
                    })
                    .collect();
                Ok((Tensor::from_parts(vec![d[0], d[1]], y), keep.then_some(Record::Pool { dims: d })))
            }
            Layer::Linear { name, c_in, c_out } => {
                if x.rank() != 2 || x.dims()[1] != *c_in {
                    return Err(Error::shape(format!("{name}: expected (N, {c_in}), got {:?}", x.dims())));
                }
                let w = self.p(format!("{name}.weight"));
                let b = self.p(format!("{name}.bias"));
                let n = x.dims()[0];
                let mut y = Vec::with_capacity(n * c_out);
                for row in x.data().chunks_exact(*c_in) {
                    for (o, wr) in w.data().chunks_exact(*c_in).enumerate() {
                        let mut acc = b.data()[o];
                        for (a, bw) in row.iter().zip(wr) {
                            acc += *a * *bw;
                        }
                        y.push(acc);
                    }
                }
                Ok((Tensor::from_parts(vec![n, *c_out], y), keep.then_some(Record::Linear { x })))
            }
        }
    }

    fn sts_params(&self, name: &str) -> Result<StsParams<T>> {
        Ok(StsParams {
            alpha0: self.p(format!("{name}.alpha0")).clone(),
            alpha1: self.p(format!("{name}.alpha1")).clone(),
            alpha2: self.p(format!("{name}.alpha2")).clone(),
            beta: self.p(format!("{name}.beta")).clone(),
        })
    }

    /// Full STS parameters that act like the slice on any clip: `alpha_t`
    /// alone in the static block and the dynamic slice in the centre tap.
    fn slice_params(&self, name: &str, t: usize, cfg: &StsConfig) -> Result<StsParams<T>> {
        let mut p = StsParams::zeros(cfg);
        let s = self.p(format!("{name}.static")).clone();
        match t {
            0 => p.alpha0 = s,
            1 => p.alpha1 = s,
            _ => p.alpha2 = s,
        }
        p.beta = zero_init_3d(self.p(format!("{name}.dynamic")))?;
        Ok(p)
    }

    fn norm_forward(
        &self,
        name: &str,
        channels: usize,
        eps: f64,
        x: &Tensor<T>,
        ctx: &mut Ctx<T>,
    ) -> Result<(Tensor<T>, Record<T>)> {
        let d = x.dims();
        if d.len() < 2 || d[1] != channels {
            return Err(Error::shape(format!("{name}: expected {channels} channels, got {d:?}")));
        }
        let (n, plane) = (d[0], d[2..].iter().product::<usize>());
        let gamma = self.p(format!("{name}.weight")).data();
        let beta = self.p(format!("{name}.bias")).data();
        let batch = ctx.mode == Mode::Train;
        let (mean, var) = if batch {
            let m = (n * plane) as f64;
            if m < 2.0 {
                return Err(Error::shape(format!("{name}: batch statistics need more than one value")));
            }
            let mut mean = vec![0.0; channels];
            let mut sq = vec![0.0; channels];
            for (i, chunk) in x.data().chunks_exact(plane).enumerate() {
                let c = i % channels;
                for v in chunk {
                    mean[c] += v.as_f64();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m);
            for (i, chunk) in x.data().chunks_exact(plane).enumerate() {
                let c = i % channels;
                for v in chunk {
                    let e = v.as_f64() - mean[c];
                    sq[c] += e * e;
                }
            }
            let var: Vec<f64> = sq.iter().map(|s| s / m).collect();
            let unbiased = sq.iter().map(|s| s / (m - 1.0)).collect();
            ctx.norm_stats.push((name.to_string(), mean.clone(), unbiased));
            (mean, var)
        } else {
            let rm = self.p(format!("{name}.running_mean")).data().iter().map(|v| v.as_f64()).collect();
            let rv = self.p(format!("{name}.running_var")).data().iter().map(|v| v.as_f64()).collect();
            (rm, rv)
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::from_f64_lossy(1.0 / (v + eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&v| T::from_f64_lossy(v)).collect();
        let mut xhat = Vec::with_capacity(x.len());
        let mut y = Vec::with_capacity(x.len());
        for (i, chunk) in x.data().chunks_exact(plane).enumerate() {
            let c = i % channels;
            for &v in chunk {
                let h = (v - mean_t[c]) * inv_std[c];
                xhat.push(h);
                y.push(gamma[c] * h + beta[c]);
            }
        }
        Ok((Tensor::from_parts(d.to_vec(), y), Record::Norm { xhat, inv_std, batch }))
    }

    /// Gradients of every trainable parameter, in spec order.
    pub fn backward(&self, tape: &Tape<T>, grad_out: &Tensor<T>) -> Result<Grads<T>> {
        let mut acc: IndexMap<String, Tensor<T>> = IndexMap::new();
        self.back(&self.spec.layers, &tape.records, grad_out.clone(), &mut acc, false)?;
        let mut out = IndexMap::new();
        for name in self.trainable_names() {
            let g = match acc.shift_remove(&name) {
                Some(g) => g,
                None => Tensor::zeros(self.params[&name].dims()),
            };
            out.insert(name, g);
        }
        Ok(out)
    }

    /// Like [`Network::backward`] but also returns the input gradient.
    pub fn backward_with_input(&self, tape: &Tape<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Grads<T>)> {
        let mut acc: IndexMap<String, Tensor<T>> = IndexMap::new();
        let gx = self.back(&self.spec.layers, &tape.records, grad_out.clone(), &mut acc, true)?;
        let mut out = IndexMap::new();
        for name in self.trainable_names() {
            let g = acc
                .shift_remove(&name)
                .unwrap_or_else(|| Tensor::zeros(self.params[&name].dims()));
            out.insert(name, g);
        }
        Ok((gx.expect("input gradient requested"), out))
    }

    fn back(
        &self,
        layers: &[Layer],
        records: &[Record<T>],
        mut g: Tensor<T>,
        acc: &mut IndexMap<String, Tensor<T>>,
        need_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        if layers.len() != records.len() {
            return Err(Error::config("tape does not match the network"));
        }
        for (i, (l, rec)) in layers.iter().zip(records).enumerate().rev() {
            let need = need_input || i > 0;
            g = match self.back_layer(l, rec, g, acc, need)? {
                Some(gx) => gx,
                None => return Ok(None),
            };
        }
        Ok(Some(g))
    }

    fn add_grad(acc: &mut IndexMap<String, Tensor<T>>, name: String, g: Tensor<T>) -> Result<()> {
        match acc.get_mut(&name) {
            Some(t) => t.add_assign(&g),
            None => {
                acc.insert(name, g);
                Ok(())
            }
        }
    }

    fn back_layer(
        &self,
        l: &Layer,
        rec: &Record<T>,
        g: Tensor<T>,
        acc: &mut IndexMap<String, Tensor<T>>,
        need_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        match (l, rec) {
            (Layer::Conv(c), Record::Conv { x }) => {
                let w = self.p(c.weight_name());
                let geo = conv_geometry(x, w, c)?;
                let gw = conv::backward_weight(x.data(), g.data(), &geo);
                Self::add_grad(acc, c.weight_name(), Tensor::from_parts(w.dims().to_vec(), gw))?;
                if !need_input {
                    return Ok(None);
                }
                let gx = conv::backward_input(g.data(), w.data(), &geo);
                Ok(Some(Tensor::from_parts(x.dims().to_vec(), gx)))
            }
            (Layer::Sts { name, config }, Record::Sts { x }) => {
                let p = self.sts_params(name)?;
                let (gx, gp) = sts_backward(x, &p, config, &g)?;
                Self::add_grad(acc, format!("{name}.alpha0"), gp.alpha0)?;
                Self::add_grad(acc, format!("{name}.alpha1"), gp.alpha1)?;
                Self::add_grad(acc, format!("{name}.alpha2"), gp.alpha2)?;
                Self::add_grad(acc, format!("{name}.beta"), gp.beta)?;
                Ok(Some(gx))
            }
            (Layer::StsSlice { name, t, config }, Record::StsSlice { x, params }) => {
                let (gx, gp) = sts_backward(x, params, config, &g)?;
                let gs = match t {
                    0 => gp.alpha0,
                    1 => gp.alpha1,
                    _ => gp.alpha2,
                };
                Self::add_grad(acc, format!("{name}.static"), gs)?;
                Self::add_grad(acc, format!("{name}.dynamic"), slice_kernel(&gp.beta, 1)?)?;
                Ok(Some(gx))
            }
            (Layer::BatchNorm { name, channels, .. }, Record::Norm { xhat, inv_std, batch }) => {
                let c_n = *channels;
                let d = g.dims().to_vec();
                let plane: usize = d[2..].iter().product();
                let m = (d[0] * plane) as f64;
                let gamma = self.p(format!("{name}.weight")).data();
                let mut sum_g = vec![0.0f64; c_n];
                let mut sum_gx = vec![0.0f64; c_n];
                for (i, (gc, hc)) in g.data().chunks_exact(plane).zip(xhat.chunks_exact(plane)).enumerate() {
                    let c = i % c_n;
                    for (a, h) in gc.iter().zip(hc) {
                        sum_g[c] += a.as_f64();
                        sum_gx[c] += a.as_f64() * h.as_f64();
                    }
                }
                let cast = |v: &[f64]| Tensor::from_parts(vec![c_n], v.iter().map(|&x| T::from_f64_lossy(x)).collect());
                Self::add_grad(acc, format!("{name}.weight"), cast(&sum_gx))?;
                Self::add_grad(acc, format!("{name}.bias"), cast(&sum_g))?;
                let mut gx = Vec::with_capacity(g.len());
                for (i, (gc, hc)) in g.data().chunks_exact(plane).zip(xhat.chunks_exact(plane)).enumerate() {
                    let c = i % c_n;
                    let k = gamma[c] * inv_std[c];
                    if *batch {
                        let mg = T::from_f64_lossy(sum_g[c] / m);
                        let mgx = T::from_f64_lossy(sum_gx[c] / m);
                        gx.extend(gc.iter().zip(hc).map(|(&a, &h)| k * (a - mg - h * mgx)));
                    } else {
                        gx.extend(gc.iter().map(|&a| k * a));
                    }
                }
                Ok(Some(Tensor::from_parts(d, gx)))
            }
            (Layer::Relu, Record::Relu { y }) => {
                g.zip_with(y, |a, v| if v > T::zero() { a } else { T::zero() }).map(Some)
            }
            (Layer::Residual { body, shortcut }, Record::Residual { body: rb, shortcut: rs }) => {
                let ga = self.back(body, rb, g.clone(), acc, true)?.expect("input gradient");
                let gb = if shortcut.is_empty() {
                    g
                } else {
                    self.back(shortcut, rs, g, acc, true)?.expect("input gradient")
                };
                ga.add(&gb).map(Some)
            }
            (Layer::GlobalAvgPool, Record::Pool { dims }) => {
                let vol: usize = dims[2..].iter().product();
                let scale = T::from_f64_lossy(1.0 / vol as f64);
                let mut gx = Vec::with_capacity(dims.iter().product());
                for &v in g.data() {
                    gx.extend(std::iter::repeat(v * scale).take(vol));
                }
                Ok(Some(Tensor::from_parts(dims.clone(), gx)))
            }
            (Layer::Linear { name, c_in, c_out }, Record::Linear { x }) => {
                let w = self.p(format!("{name}.weight"));
                let n = x.dims()[0];
                let mut gw = vec![T::zero(); c_out * c_in];
                let mut gb = vec![T::zero(); *c_out];
                let mut gx = vec![T::zero(); n * c_in];
                for s in 0..n {
                    let xr = &x.data()[s * c_in..(s + 1) * c_in];
                    let gr = &g.data()[s * c_out..(s + 1) * c_out];
                    for o in 0..*c_out {
                        let go = gr[o];
                        gb[o] += go;
                        let wr = &w.data()[o * c_in..(o + 1) * c_in];
                        for i in 0..*c_in {
                            gw[o * c_in + i] += go * xr[i];
                            gx[s * c_in + i] += go * wr[i];
                        }
                    }
                }
                Self::add_grad(acc, format!("{name}.weight"), Tensor::from_parts(vec![*c_out, *c_in], gw))?;
                Self::add_grad(acc, format!("{name}.bias"), Tensor::from_parts(vec![*c_out], gb))?;
                Ok(Some(Tensor::from_parts(vec![n, *c_in], gx)))
            }
            _ => Err(Error::config("tape does not match the network")),
        }
    }
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits.
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    if logits.rank() != 2 || logits.dims()[0] != labels.len() {
        return Err(Error::shape(format!(
            "logits {:?} do not match {} labels",
            logits.dims(),
            labels.len()
        )));
    }
    let (n, k) = (logits.dims()[0], logits.dims()[1]);
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * k);
    for (row, &y) in logits.data().chunks_exact(k).zip(labels) {
        if y >= k {
            return Err(Error::Index { index: y, len: k });
        }
        let mx = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = row.iter().map(|v| (v.as_f64() - mx).exp()).collect();
        let z: f64 = ex.iter().sum();
        loss += z.ln() + mx - row[y].as_f64();
        for (j, e) in ex.iter().enumerate() {
            let p = e / z - if j == y { 1.0 } else { 0.0 };
            grad.push(T::from_f64_lossy(p / n as f64));
        }
    }
    Ok((loss / n as f64, Tensor::from_parts(vec![n, k], grad)))
}

/// Index of the largest entry of each row; the first wins ties.
pub fn argmax_rows<T: Element>(x: &Tensor<T>) -> Vec<usize> {
    let k = x.dims().last().copied().unwrap_or(1).max(1);
    x.data()
        .chunks_exact(k)
        .map(|r| {
            let mut best = 0;
            for (i, v) in r.iter().enumerate() {
                if *v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
