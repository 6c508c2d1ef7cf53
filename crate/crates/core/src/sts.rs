//! Spatial-temporal separable (STS) convolution.
//!
//! The output channels of a `3 x Kh x Kw` convolution are split into a
//! leading static block and a trailing dynamic block. Per frame, the static
//! block sums three spatial operators: a `Kh*Kw`-tap 1D convolution over the
//! row-raster flattened frame (`alpha0`), a `Kh x Kw` 2D convolution
//! (`alpha1`) and a `Kh*Kw`-tap 1D convolution over the column-raster
//! flattened frame (`alpha2`). The dynamic block is an ordinary 3D
//! convolution (`beta`). Both blocks keep the grouping of the full layer, so
//! the parameters are an exact re-slicing of a `(C_out, C_in/g, 3, Kh, Kw)`
//! kernel.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{self, ConvSpec, Geometry};
use crate::error::{Error, Result};
use crate::tensor::{concat_channels, concat_leading, slice_leading, split_channels, transpose_hw, Element, Tensor};

/// Static-to-dynamic channel ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum StaticRatio {
    #[default]
    #[serde(rename = "1:1")]
    OneToOne,
    #[serde(rename = "1:2")]
    OneToTwo,
    #[serde(rename = "2:1")]
    TwoToOne,
}

impl StaticRatio {
    /// Static fraction of the output channels as `(numerator, denominator)`.
    pub fn fraction(self) -> (usize, usize) {
        match self {
            StaticRatio::OneToOne => (1, 2),
            StaticRatio::OneToTwo => (1, 3),
            StaticRatio::TwoToOne => (2, 3),
        }
    }
}

impl fmt::Display for StaticRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StaticRatio::OneToOne => "1:1",
            StaticRatio::OneToTwo => "1:2",
            StaticRatio::TwoToOne => "2:1",
        })
    }
}

impl FromStr for StaticRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1:1" => Ok(StaticRatio::OneToOne),
            "1:2" => Ok(StaticRatio::OneToTwo),
            "2:1" => Ok(StaticRatio::TwoToOne),
            _ => Err(Error::config(format!("unknown static ratio {s:?}; expected 1:1, 1:2 or 2:1"))),
        }
    }
}

/// How the flattened 1D convolutions treat frame edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowPadMode {
    /// Zero-pad the whole flattened sequence; taps may reach into the
    /// neighbouring row (or column).
    #[default]
    WholeSequence,
    /// Taps never leave their own row (or column).
    PerRow,
}

impl FromStr for RowPadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whole-sequence" => Ok(RowPadMode::WholeSequence),
            "per-row" => Ok(RowPadMode::PerRow),
            _ => Err(Error::config(format!("unknown row pad mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StsConfig {
    pub c_in: usize,
    pub c_out: usize,
    /// `(Kt, Kh, Kw)`; `Kt` must be 3.
    pub kernel: [usize; 3],
    #[serde(default)]
    pub ratio: StaticRatio,
    #[serde(default = "one")]
    pub groups: usize,
    #[serde(default)]
    pub row_pad_mode: RowPadMode,
}

fn one() -> usize {
    1
}

impl StsConfig {
    pub fn new(c_in: usize, c_out: usize, kh: usize, kw: usize) -> Result<Self> {
        let cfg = Self {
            c_in,
            c_out,
            kernel: [3, kh, kw],
            ratio: StaticRatio::OneToOne,
            groups: 1,
            row_pad_mode: RowPadMode::WholeSequence,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_ratio(mut self, ratio: StaticRatio) -> Result<Self> {
        self.ratio = ratio;
        self.validate()?;
        Ok(self)
    }

    pub fn with_groups(mut self, groups: usize) -> Result<Self> {
        self.groups = groups;
        self.validate()?;
        Ok(self)
    }

    pub fn with_row_pad_mode(mut self, mode: RowPadMode) -> Self {
        self.row_pad_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let [kt, kh, kw] = self.kernel;
        if kt != 3 {
            return Err(Error::config(format!("STS needs a temporal kernel of 3, got {kt}")));
        }
        if kh == 0 || kw == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::config(format!(
                "STS spatial kernel must be odd on both axes, got {kh}x{kw}"
            )));
        }
        if self.groups == 0 || self.c_in % self.groups != 0 || self.c_out % self.groups != 0 {
            return Err(Error::config(format!(
                "channels in={} out={} not divisible by groups={}",
                self.c_in, self.c_out, self.groups
            )));
        }
        let s = self.static_out();
        if s == 0 || s >= self.c_out {
            return Err(Error::config(format!(
                "ratio {} on {} output channels leaves an empty group (static={s})",
                self.ratio, self.c_out
            )));
        }
        Ok(())
    }

    /// `round_half_up(c_out * fraction)`.
    pub fn static_out(&self) -> usize {
        let (num, den) = self.ratio.fraction();
        (2 * self.c_out * num + den) / (2 * den)
    }

    pub fn dynamic_out(&self) -> usize {
        self.c_out - self.static_out()
    }

    pub fn cin_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    /// Tap count of the flattened 1D kernels.
    pub fn line_len(&self) -> usize {
        self.kernel[1] * self.kernel[2]
    }

    pub fn alpha_dims(&self) -> [usize; 4] {
        [self.static_out(), self.cin_per_group(), self.kernel[1], self.kernel[2]]
    }

    pub fn beta_dims(&self) -> [usize; 5] {
        [self.dynamic_out(), self.cin_per_group(), 3, self.kernel[1], self.kernel[2]]
    }

    pub fn baseline_dims(&self) -> [usize; 5] {
        [self.c_out, self.cin_per_group(), 3, self.kernel[1], self.kernel[2]]
    }

    /// The equivalent plain 3D convolution.
    pub fn baseline_spec(&self) -> ConvSpec {
        ConvSpec::new(&self.kernel).with_groups(self.groups)
    }

    fn spatial_spec(&self) -> ConvSpec {
        ConvSpec::new(&[1, self.kernel[1], self.kernel[2]]).with_groups(self.groups)
    }

    /// 1D taps over axes `(T, L)` of a `(N, C, T, L)` view.
    fn line_spec(&self) -> ConvSpec {
        ConvSpec::new(&[1, self.line_len()]).with_groups(self.groups)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StsParams<T> {
    /// Row operator, `(static_out, C_in/g, Kh, Kw)`, applied as `Kh*Kw` taps.
    pub alpha0: Tensor<T>,
    /// Spatial `Kh x Kw` kernel.
    pub alpha1: Tensor<T>,
    /// Column operator, same layout as `alpha0`.
    pub alpha2: Tensor<T>,
    /// `(dynamic_out, C_in/g, 3, Kh, Kw)`.
    pub beta: Tensor<T>,
}

impl<T: Element> StsParams<T> {
    pub fn zeros(cfg: &StsConfig) -> Self {
        let a = cfg.alpha_dims();
        Self {
            alpha0: Tensor::zeros(&a),
            alpha1: Tensor::zeros(&a),
            alpha2: Tensor::zeros(&a),
            beta: Tensor::zeros(&cfg.beta_dims()),
        }
    }

    /// Fresh layer: `alpha1` and `beta` fan-in scaled uniform, `alpha0` and
    /// `alpha2` zero.
    pub fn init_fresh(cfg: &StsConfig, rng: &mut impl Rng) -> Self {
        let a = cfg.alpha_dims();
        let fan_a = (cfg.cin_per_group() * cfg.line_len()) as f64;
        let fan_b = fan_a * 3.0;
        let (ba, bb) = ((6.0 / fan_a).sqrt(), (6.0 / fan_b).sqrt());
        Self {
            alpha0: Tensor::zeros(&a),
            alpha1: Tensor::random_uniform(&a, -ba, ba, rng),
            alpha2: Tensor::zeros(&a),
            beta: Tensor::random_uniform(&cfg.beta_dims(), -bb, bb, rng),
        }
    }

    pub fn check(&self, cfg: &StsConfig) -> Result<()> {
        let a = cfg.alpha_dims();
        for (name, t) in [("alpha0", &self.alpha0), ("alpha1", &self.alpha1), ("alpha2", &self.alpha2)] {
            if t.dims() != a {
                return Err(Error::shape(format!("{name} has dims {:?}, expected {a:?}", t.dims())));
            }
        }
        if self.beta.dims() != cfg.beta_dims() {
            return Err(Error::shape(format!(
                "beta has dims {:?}, expected {:?}",
                self.beta.dims(),
                cfg.beta_dims()
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.alpha0.len() + self.alpha1.len() + self.alpha2.len() + self.beta.len()
    }
}

struct Branches {
    spatial: Geometry,
    rows: Geometry,
    cols: Geometry,
    dynamic: Geometry,
}

fn branches(cfg: &StsConfig, x_dims: &[usize]) -> Result<Branches> {
    cfg.validate()?;
    if x_dims.len() != 5 {
        return Err(Error::shape(format!("STS input must be (N,C,T,H,W), got {x_dims:?}")));
    }
    if x_dims[1] != cfg.c_in {
        return Err(Error::shape(format!(
            "STS layer expects {} input channels, got {}",
            cfg.c_in, x_dims[1]
        )));
    }
    let [n, c, t, h, w] = [x_dims[0], x_dims[1], x_dims[2], x_dims[3], x_dims[4]];
    let (so, cg, [_, kh, kw]) = (cfg.static_out(), cfg.cin_per_group(), cfg.kernel);
    let l = cfg.line_len();
    let spatial = Geometry::new(x_dims, &[so, cg, 1, kh, kw], &cfg.spatial_spec(), cfg.c_out, 0)?;
    let mut rows = Geometry::new(&[n, c, t, h * w], &[so, cg, 1, l], &cfg.line_spec(), cfg.c_out, 0)?;
    let mut cols = Geometry::new(&[n, c, t, w * h], &[so, cg, 1, l], &cfg.line_spec(), cfg.c_out, 0)?;
    if cfg.row_pad_mode == RowPadMode::PerRow {
        rows = rows.with_segment(w)?;
        cols = cols.with_segment(h)?;
    }
    let dynamic = Geometry::new(x_dims, &cfg.beta_dims(), &cfg.baseline_spec(), cfg.c_out, so)?;
    Ok(Branches {
        spatial,
        rows,
        cols,
        dynamic,
    })
}

fn to_cols<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    transpose_hw(x)
}

/// STS forward pass; output is `(N, c_out, T, H, W)` with the static block
/// in the leading channels.
pub fn sts_forward<T: Element>(x: &Tensor<T>, p: &StsParams<T>, cfg: &StsConfig) -> Result<Tensor<T>> {
    p.check(cfg)?;
    let b = branches(cfg, x.dims())?;
    let d = x.dims();
    let so = cfg.static_out();

    let mut stat = conv::forward(x.data(), p.alpha0.data(), &b.rows);
    let spatial = conv::forward(x.data(), p.alpha1.data(), &b.spatial);
    for (s, v) in stat.iter_mut().zip(&spatial) {
        *s += *v;
    }
    let xt = to_cols(x)?;
    let cols = conv::forward(xt.data(), p.alpha2.data(), &b.cols);
    let cols = transpose_hw(&Tensor::from_parts(vec![d[0], so, d[2], d[4], d[3]], cols))?;
    for (s, v) in stat.iter_mut().zip(cols.data()) {
        *s += *v;
    }
    let stat = Tensor::from_parts(vec![d[0], so, d[2], d[3], d[4]], stat);

    let dynamic = conv::forward(x.data(), p.beta.data(), &b.dynamic);
    let dynamic = Tensor::from_parts(vec![d[0], cfg.dynamic_out(), d[2], d[3], d[4]], dynamic);
    concat_channels(&stat, &dynamic)
}

/// Gradients of [`sts_forward`] with respect to the input and every
/// parameter group. The input gradient accumulates row, spatial, column and
/// then dynamic contributions, in that order.
pub fn sts_backward<T: Element>(
    x: &Tensor<T>,
    p: &StsParams<T>,
    cfg: &StsConfig,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, StsParams<T>)> {
    p.check(cfg)?;
    let b = branches(cfg, x.dims())?;
    let d = x.dims();
    let expected = [d[0], cfg.c_out, d[2], d[3], d[4]];
    if grad_out.dims() != expected {
        return Err(Error::shape(format!(
            "grad_out dims {:?} differ from forward output {expected:?}",
            grad_out.dims()
        )));
    }
    let so = cfg.static_out();
    let (gs, gd) = split_channels(grad_out, so)?;

    let g_alpha0 = conv::backward_weight(x.data(), gs.data(), &b.rows);
    let mut gx = conv::backward_input(gs.data(), p.alpha0.data(), &b.rows);

    let g_alpha1 = conv::backward_weight(x.data(), gs.data(), &b.spatial);
    let gx_spatial = conv::backward_input(gs.data(), p.alpha1.data(), &b.spatial);
    for (a, v) in gx.iter_mut().zip(&gx_spatial) {
        *a += *v;
    }

    let xt = to_cols(x)?;
    let gst = to_cols(&gs)?;
    let g_alpha2 = conv::backward_weight(xt.data(), gst.data(), &b.cols);
    let gx_cols = conv::backward_input(gst.data(), p.alpha2.data(), &b.cols);
    let gx_cols = transpose_hw(&Tensor::from_parts(vec![d[0], d[1], d[2], d[4], d[3]], gx_cols))?;
    for (a, v) in gx.iter_mut().zip(gx_cols.data()) {
        *a += *v;
    }

    let g_beta = conv::backward_weight(x.data(), gd.data(), &b.dynamic);
    let gx_dyn = conv::backward_input(gd.data(), p.beta.data(), &b.dynamic);
    for (a, v) in gx.iter_mut().zip(&gx_dyn) {
        *a += *v;
    }

    let a = cfg.alpha_dims().to_vec();
    Ok((
        Tensor::from_parts(d.to_vec(), gx),
        StsParams {
            alpha0: Tensor::from_parts(a.clone(), g_alpha0),
            alpha1: Tensor::from_parts(a.clone(), g_alpha1),
            alpha2: Tensor::from_parts(a, g_alpha2),
            beta: Tensor::from_parts(cfg.beta_dims().to_vec(), g_beta),
        },
    ))
}

/// Trainable parameter count: three static kernels plus the dynamic 3D
/// kernel.
pub fn sts_param_count(cfg: &StsConfig) -> Result<u64> {
    cfg.validate()?;
    let per_tap = (cfg.cin_per_group() * cfg.line_len()) as u64;
    Ok(3 * cfg.static_out() as u64 * per_tap + cfg.dynamic_out() as u64 * 3 * per_tap)
}

/// Exact MAC count of [`sts_forward`] for `input_shape = (N, C, T, H, W)`,
/// summed over the four branches.
pub fn sts_mac_count(cfg: &StsConfig, input_shape: &[usize]) -> Result<u64> {
    let b = branches(cfg, input_shape)?;
    Ok(b.rows.macs() + b.spatial.macs() + b.cols.macs() + b.dynamic.macs())
}

/// Re-slices a baseline `(C_out, C_in/g, 3, Kh, Kw)` kernel: leading
/// `static_out` filters become `alpha0..alpha2` (temporal slices 0, 1, 2),
/// the rest become `beta`.
pub fn split_baseline_weights<T: Element>(theta: &Tensor<T>, cfg: &StsConfig) -> Result<StsParams<T>> {
    cfg.validate()?;
    if theta.dims() != cfg.baseline_dims() {
        return Err(Error::shape(format!(
            "baseline kernel dims {:?}, expected {:?}",
            theta.dims(),
            cfg.baseline_dims()
        )));
    }
    let so = cfg.static_out();
    let alpha = slice_leading(theta, 0, so)?;
    let beta = slice_leading(theta, so, cfg.c_out)?;
    let [kh, kw] = [cfg.kernel[1], cfg.kernel[2]];
    let plane = kh * kw;
    let mut slices: [Vec<T>; 3] = Default::default();
    for filt in alpha.data().chunks_exact(3 * plane) {
        for (t, s) in slices.iter_mut().enumerate() {
            s.extend_from_slice(&filt[t * plane..(t + 1) * plane]);
        }
    }
    let a = cfg.alpha_dims().to_vec();
    let [s0, s1, s2] = slices;
    Ok(StsParams {
        alpha0: Tensor::from_parts(a.clone(), s0),
        alpha1: Tensor::from_parts(a.clone(), s1),
        alpha2: Tensor::from_parts(a, s2),
        beta,
    })
}

/// Inverse of [`split_baseline_weights`].
pub fn assemble_baseline_weights<T: Element>(p: &StsParams<T>, cfg: &StsConfig) -> Result<Tensor<T>> {
    p.check(cfg)?;
    let plane = cfg.line_len();
    let mut alpha = Vec::with_capacity(3 * p.alpha1.len());
    for f in 0..p.alpha1.len() / plane {
        for s in [&p.alpha0, &p.alpha1, &p.alpha2] {
            alpha.extend_from_slice(&s.data()[f * plane..(f + 1) * plane]);
        }
    }
    let [so, cg, kh, kw] = cfg.alpha_dims();
    let alpha = Tensor::from_parts(vec![so, cg, 3, kh, kw], alpha);
    concat_leading(&alpha, &p.beta)
}
