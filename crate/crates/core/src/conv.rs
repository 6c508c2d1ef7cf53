//! Grouped 1D/2D/3D cross-correlation with analytic gradients, plus the
//! nested-loop reference used as an oracle.
//!
//! All three dimensionalities run through one kernel that treats the spatial
//! axes as `(T, H, W)`, left-padding lower ranks with unit axes. Every output
//! element is reduced in the fixed order input channel, then kernel tap
//! (row-major over `(kt, kh, kw)`), so splitting work across threads never
//! changes a bit of the result.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
    pub dilation: Vec<usize>,
    pub groups: usize,
}

impl ConvSpec {
    /// Unit stride and dilation, one group, "same" padding `(k - 1) / 2`.
    pub fn new(kernel: &[usize]) -> Self {
        Self {
            kernel: kernel.to_vec(),
            stride: vec![1; kernel.len()],
            padding: kernel.iter().map(|&k| k.saturating_sub(1) / 2).collect(),
            dilation: vec![1; kernel.len()],
            groups: 1,
        }
    }

    pub fn with_stride(mut self, stride: &[usize]) -> Self {
        self.stride = stride.to_vec();
        self
    }

    pub fn with_padding(mut self, padding: &[usize]) -> Self {
        self.padding = padding.to_vec();
        self
    }

    /// Sets dilation and resets padding to "same" for the dilated extent.
    pub fn with_dilation(mut self, dilation: &[usize]) -> Self {
        self.dilation = dilation.to_vec();
        self.padding = self
            .kernel
            .iter()
            .zip(dilation)
            .map(|(&k, &d)| (k + (k.saturating_sub(1)) * (d.saturating_sub(1))).saturating_sub(1) / 2)
            .collect();
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn rank(&self) -> usize {
        self.kernel.len()
    }

    /// `k + (k - 1)(d - 1)` along `axis`.
    pub fn effective_kernel(&self, axis: usize) -> usize {
        let k = self.kernel[axis];
        k + (k - 1) * (self.dilation[axis] - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.kernel.len();
        if r == 0 || r > 3 {
            return Err(Error::config(format!("convolution rank {r} not in 1..=3")));
        }
        if self.stride.len() != r || self.padding.len() != r || self.dilation.len() != r {
            return Err(Error::config(format!(
                "per-axis settings must all have length {r}: {self:?}"
            )));
        }
        if self.kernel.contains(&0) || self.stride.contains(&0) || self.dilation.contains(&0) {
            return Err(Error::config(format!(
                "kernel, stride and dilation must be positive: {self:?}"
            )));
        }
        if self.groups == 0 {
            return Err(Error::config("groups must be positive"));
        }
        Ok(())
    }

    /// Output extents for the given spatial input extents.
    pub fn output_extents(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        if input.len() != self.rank() {
            return Err(Error::shape(format!(
                "{}-d convolution on spatial extents {input:?}",
                self.rank()
            )));
        }
        (0..self.rank())
            .map(|a| {
                let padded = input[a] + 2 * self.padding[a];
                let k = self.effective_kernel(a);
                if k > padded {
                    return Err(Error::shape(format!(
                        "effective kernel {k} exceeds padded extent {padded} on axis {a}"
                    )));
                }
                Ok((padded - k) / self.stride[a] + 1)
            })
            .collect()
    }
}

/// Everything the kernel needs, lifted to three spatial axes.
///
/// A weight block may cover only part of a layer's output channels
/// (`out_offset..out_offset + c_out` of `c_out_total`); group membership is
/// decided by the position in the full layer. STS uses this to run its
/// static and dynamic branches as slices of one grouped convolution.
#[derive(Debug, Clone)]
pub(crate) struct Geometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub c_out_total: usize,
    pub out_offset: usize,
    pub groups: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub dilation: [usize; 3],
    /// Taps along the last axis may not cross segment boundaries.
    pub segment: Option<usize>,
}

fn lift<const DEFAULT: usize>(v: &[usize]) -> [usize; 3] {
    let mut out = [DEFAULT; 3];
    out[3 - v.len()..].copy_from_slice(v);
    out
}

impl Geometry {
    pub fn new(
        x_dims: &[usize],
        w_dims: &[usize],
        spec: &ConvSpec,
        c_out_total: usize,
        out_offset: usize,
    ) -> Result<Self> {
        spec.validate()?;
        let r = spec.rank();
        if x_dims.len() != r + 2 || w_dims.len() != r + 2 {
            return Err(Error::shape(format!(
                "{r}-d convolution needs rank-{} input and weights, got {x_dims:?} and {w_dims:?}",
                r + 2
            )));
        }
        if w_dims[2..] != spec.kernel[..] {
            return Err(Error::shape(format!(
                "weight dims {w_dims:?} disagree with kernel {:?}",
                spec.kernel
            )));
        }
        let (c_in, c_out, g) = (x_dims[1], w_dims[0], spec.groups);
        if c_in % g != 0 || c_out_total % g != 0 {
            return Err(Error::shape(format!(
                "channels in={c_in} out={c_out_total} not divisible by groups={g}"
            )));
        }
        if w_dims[1] != c_in / g {
            return Err(Error::shape(format!(
                "weights expect {} input channels per group, input has {c_in} over {g} groups",
                w_dims[1]
            )));
        }
        if out_offset + c_out > c_out_total {
            return Err(Error::shape("weight block exceeds layer output channels"));
        }
        let output = spec.output_extents(&x_dims[2..])?;
        Ok(Self {
            batch: x_dims[0],
            c_in,
            c_out,
            c_out_total,
            out_offset,
            groups: g,
            input: lift::<1>(&x_dims[2..]),
            output: lift::<1>(&output),
            kernel: lift::<1>(&spec.kernel),
            stride: lift::<1>(&spec.stride),
            padding: lift::<0>(&spec.padding),
            dilation: lift::<1>(&spec.dilation),
            segment: None,
        })
    }

    pub fn with_segment(mut self, segment: usize) -> Result<Self> {
        if self.stride[2] != 1
            || self.output[2] != self.input[2]
            || segment == 0
            || self.input[2] % segment != 0
        {
            return Err(Error::config(
                "segmented taps need unit stride, length-preserving padding and an exact segment split",
            ));
        }
        self.segment = Some(segment);
        Ok(self)
    }

    fn cin_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    fn group_of(&self, o: usize) -> usize {
        (o + self.out_offset) / (self.c_out_total / self.groups)
    }

    /// Local output channels belonging to group `grp`.
    fn outputs_of_group(&self, grp: usize) -> std::ops::Range<usize> {
        let per = self.c_out_total / self.groups;
        let lo = (grp * per).max(self.out_offset);
        let hi = ((grp + 1) * per).min(self.out_offset + self.c_out);
        if lo >= hi {
            0..0
        } else {
            lo - self.out_offset..hi - self.out_offset
        }
    }

    fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }

    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.output.iter().product()
    }

    pub fn output_dims(&self, rank: usize) -> Vec<usize> {
        let mut d = vec![self.batch, self.c_out];
        d.extend_from_slice(&self.output[3 - rank..]);
        d
    }

    pub fn macs(&self) -> u64 {
        (self.batch * self.c_out * self.out_vol() * self.cin_per_group() * self.kvol()) as u64
    }

    /// Output index range along `axis` whose tap `k` lands inside the input,
    /// and the input offset `i*s + off` for output index `i`. An empty range
    /// is `(0, 0, 0)`.
    fn valid_range(&self, axis: usize, k: usize) -> (usize, usize, isize) {
        let s = self.stride[axis] as isize;
        let off = (k * self.dilation[axis]) as isize - self.padding[axis] as isize;
        let len = self.input[axis] as isize;
        // smallest i with i*s + off >= 0, largest with i*s + off < len
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = if len - off <= 0 { 0 } else { (len - off + s - 1) / s };
        let hi = hi.min(self.output[axis] as isize);
        if lo >= hi {
            return (0, 0, 0);
        }
        (lo as usize, hi as usize, off)
    }

    /// Contiguous `[j0, j1)` runs of last-axis outputs for tap `k`.
    fn last_axis_runs(&self, k: usize) -> Vec<(usize, usize, isize)> {
        let (lo, hi, off) = self.valid_range(2, k);
        match self.segment {
            None if lo == hi => Vec::new(),
            None => vec![(lo, hi, off)],
            Some(seg) => (0..self.input[2] / seg)
                .filter_map(|s| {
                    let start = (s * seg) as isize;
                    let end = ((s + 1) * seg) as isize;
                    let j0 = start.max(start - off).max(lo as isize);
                    let j1 = end.min(end - off).min(hi as isize);
                    (j0 < j1).then_some((j0 as usize, j1 as usize, off))
                })
                .collect(),
        }
    }

    fn taps(&self) -> Vec<Tap> {
        let [kt, kh, kw] = self.kernel;
        let mut taps = Vec::with_capacity(kt * kh * kw);
        for a in 0..kt {
            let t = self.valid_range(0, a);
            for b in 0..kh {
                let h = self.valid_range(1, b);
                for c in 0..kw {
                    taps.push(Tap {
                        t,
                        h,
                        w_runs: self.last_axis_runs(c),
                    });
                }
            }
        }
        taps
    }

    /// True when a tap maps whole output rows onto whole contiguous input
    /// rows, so the `(h, w)` loops collapse into one slice.
    fn rows_collapse(&self, tap: &Tap) -> bool {
        self.segment.is_none()
            && self.stride[1] == 1
            && self.stride[2] == 1
            && self.input[2] == self.output[2]
            && tap.w_runs.len() == 1
            && tap.w_runs[0] == (0, self.output[2], 0)
    }
}

struct Tap {
    t: (usize, usize, isize),
    h: (usize, usize, isize),
    w_runs: Vec<(usize, usize, isize)>,
}

#[inline]
fn axpy<T: Element>(dst: &mut [T], src: &[T], a: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Dot product with eight interleaved partial sums, combined in a fixed
/// order.
#[inline]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (x, y) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn in_index(i: usize, s: usize, off: isize) -> usize {
    (i as isize * s as isize + off) as usize
}

pub(crate) fn forward<T: Element>(x: &[T], w: &[T], g: &Geometry) -> Vec<T> {
    let (in_vol, out_vol, kvol, cin_g) = (g.in_vol(), g.out_vol(), g.kvol(), g.cin_per_group());
    let [_, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let [st, sh, sw] = g.stride;
    let taps = g.taps();
    let mut out = vec![T::zero(); g.batch * g.c_out * out_vol];
    if out_vol == 0 {
        return out;
    }
    out.par_chunks_mut(out_vol)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (n, o) = (idx / g.c_out, idx % g.c_out);
            let grp = g.group_of(o);
            for ci in 0..cin_g {
                let c = grp * cin_g + ci;
                let xin = &x[(n * g.c_in + c) * in_vol..][..in_vol];
                let wrow = &w[(o * cin_g + ci) * kvol..][..kvol];
                for (tap, &wv) in taps.iter().zip(wrow) {
                    let collapse = g.rows_collapse(tap);
                    for t in tap.t.0..tap.t.1 {
                        let it = in_index(t, st, tap.t.2);
                        let obase = t * oh * ow;
                        let ibase = it * ih * iw;
                        if collapse {
                            let (h0, h1) = (tap.h.0, tap.h.1);
                            let ih0 = in_index(h0, sh, tap.h.2);
                            let len = (h1 - h0) * ow;
                            axpy(
                                &mut plane[obase + h0 * ow..][..len],
                                &xin[ibase + ih0 * iw..][..len],
                                wv,
                            );
                            continue;
                        }
                        for h in tap.h.0..tap.h.1 {
                            let irow = &xin[ibase + in_index(h, sh, tap.h.2) * iw..][..iw];
                            let orow = &mut plane[obase + h * ow..][..ow];
                            for &(j0, j1, off) in &tap.w_runs {
                                if sw == 1 {
                                    let i0 = in_index(j0, 1, off);
                                    axpy(&mut orow[j0..j1], &irow[i0..i0 + (j1 - j0)], wv);
                                } else {
                                    for j in j0..j1 {
                                        orow[j] += wv * irow[in_index(j, sw, off)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

pub(crate) fn backward_input<T: Element>(grad_out: &[T], w: &[T], g: &Geometry) -> Vec<T> {
    let (in_vol, out_vol, kvol, cin_g) = (g.in_vol(), g.out_vol(), g.kvol(), g.cin_per_group());
    let [_, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let [st, sh, sw] = g.stride;
    let taps = g.taps();
    let mut gx = vec![T::zero(); g.batch * g.c_in * in_vol];
    if in_vol == 0 {
        return gx;
    }
    gx.par_chunks_mut(in_vol).enumerate().for_each(|(idx, plane)| {
        let (n, c) = (idx / g.c_in, idx % g.c_in);
        let (grp, ci) = (c / cin_g, c % cin_g);
        for o in g.outputs_of_group(grp) {
            let gout = &grad_out[(n * g.c_out + o) * out_vol..][..out_vol];
            let wrow = &w[(o * cin_g + ci) * kvol..][..kvol];
            for (tap, &wv) in taps.iter().zip(wrow) {
                let collapse = g.rows_collapse(tap);
                for t in tap.t.0..tap.t.1 {
                    let it = in_index(t, st, tap.t.2);
                    let obase = t * oh * ow;
                    let ibase = it * ih * iw;
                    if collapse {
                        let (h0, h1) = (tap.h.0, tap.h.1);
                        let ih0 = in_index(h0, sh, tap.h.2);
                        let len = (h1 - h0) * ow;
                        axpy(
                            &mut plane[ibase + ih0 * iw..][..len],
                            &gout[obase + h0 * ow..][..len],
                            wv,
                        );
                        continue;
                    }
                    for h in tap.h.0..tap.h.1 {
                        let irow = &mut plane[ibase + in_index(h, sh, tap.h.2) * iw..][..iw];
                        let orow = &gout[obase + h * ow..][..ow];
                        for &(j0, j1, off) in &tap.w_runs {
                            if sw == 1 {
                                let i0 = in_index(j0, 1, off);
                                axpy(&mut irow[i0..i0 + (j1 - j0)], &orow[j0..j1], wv);
                            } else {
                                for j in j0..j1 {
                                    irow[in_index(j, sw, off)] += wv * orow[j];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

pub(crate) fn backward_weight<T: Element>(x: &[T], grad_out: &[T], g: &Geometry) -> Vec<T> {
    let (in_vol, out_vol, kvol, cin_g) = (g.in_vol(), g.out_vol(), g.kvol(), g.cin_per_group());
    let [_, ih, iw] = g.input;
    let [_, oh, ow] = g.output;
    let [st, sh, sw] = g.stride;
    let taps = g.taps();
    let mut gw = vec![T::zero(); g.c_out * cin_g * kvol];
    gw.par_chunks_mut(cin_g * kvol)
        .enumerate()
        .for_each(|(o, wgrad)| {
            let grp = g.group_of(o);
            for ci in 0..cin_g {
                let c = grp * cin_g + ci;
                for (k, tap) in taps.iter().enumerate() {
                    let collapse = g.rows_collapse(tap);
                    let mut acc = T::zero();
                    for n in 0..g.batch {
                        let xin = &x[(n * g.c_in + c) * in_vol..][..in_vol];
                        let gout = &grad_out[(n * g.c_out + o) * out_vol..][..out_vol];
                        for t in tap.t.0..tap.t.1 {
                            let it = in_index(t, st, tap.t.2);
                            let obase = t * oh * ow;
                            let ibase = it * ih * iw;
                            if collapse {
                                let (h0, h1) = (tap.h.0, tap.h.1);
                                let ih0 = in_index(h0, sh, tap.h.2);
                                let len = (h1 - h0) * ow;
                                acc += dot(&xin[ibase + ih0 * iw..][..len], &gout[obase + h0 * ow..][..len]);
                                continue;
                            }
                            for h in tap.h.0..tap.h.1 {
                                let irow = &xin[ibase + in_index(h, sh, tap.h.2) * iw..][..iw];
                                let orow = &gout[obase + h * ow..][..ow];
                                for &(j0, j1, off) in &tap.w_runs {
                                    if sw == 1 {
                                        let i0 = in_index(j0, 1, off);
                                        acc += dot(&irow[i0..i0 + (j1 - j0)], &orow[j0..j1]);
                                    } else {
                                        for j in j0..j1 {
                                            acc += irow[in_index(j, sw, off)] * orow[j];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    wgrad[ci * kvol + k] = acc;
                }
            }
        });
    gw
}

fn check_grad_out<T: Element>(grad_out: &Tensor<T>, g: &Geometry, rank: usize) -> Result<()> {
    let expected = g.output_dims(rank);
    if grad_out.dims() != expected.as_slice() {
        return Err(Error::shape(format!(
            "grad_out dims {:?} differ from forward output {expected:?}",
            grad_out.dims()
        )));
    }
    Ok(())
}

fn conv_nd<T: Element>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec, rank: usize) -> Result<Tensor<T>> {
    if spec.rank() != rank {
        return Err(Error::config(format!(
            "{rank}-d convolution given a {}-d spec",
            spec.rank()
        )));
    }
    let g = Geometry::new(x.dims(), w.dims(), spec, w.dims()[0], 0)?;
    let out = forward(x.data(), w.data(), &g);
    Ok(Tensor::from_parts(g.output_dims(rank), out))
}

fn conv_nd_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
    rank: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if spec.rank() != rank {
        return Err(Error::config(format!(
            "{rank}-d convolution given a {}-d spec",
            spec.rank()
        )));
    }
    let g = Geometry::new(x.dims(), w.dims(), spec, w.dims()[0], 0)?;
    check_grad_out(grad_out, &g, rank)?;
    let gx = backward_input(grad_out.data(), w.data(), &g);
    let gw = backward_weight(x.data(), grad_out.data(), &g);
    Ok((
        Tensor::from_parts(x.dims().to_vec(), gx),
        Tensor::from_parts(w.dims().to_vec(), gw),
    ))
}

/// `x: (N, C_in, L)`, `w: (C_out, C_in/groups, K)`.
pub fn conv1d<T: Element>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    conv_nd(x, w, spec, 1)
}

/// `x: (N, C_in, H, W)`, `w: (C_out, C_in/groups, Kh, Kw)`.
pub fn conv2d<T: Element>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    conv_nd(x, w, spec, 2)
}

/// `x: (N, C_in, T, H, W)`, `w: (C_out, C_in/groups, Kt, Kh, Kw)`.
pub fn conv3d<T: Element>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    conv_nd(x, w, spec, 3)
}

pub fn conv1d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    conv_nd_backward(x, w, spec, grad_out, 1)
}

pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    conv_nd_backward(x, w, spec, grad_out, 2)
}

pub fn conv3d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    conv_nd_backward(x, w, spec, grad_out, 3)
}

/// Exact multiply-accumulate count of the forward pass, padded taps
/// included. `input_shape` is `(N, C_in, spatial...)`.
pub fn mac_count(spec: &ConvSpec, input_shape: &[usize], out_channels: usize) -> Result<u64> {
    spec.validate()?;
    if input_shape.len() != spec.rank() + 2 {
        return Err(Error::shape(format!(
            "input shape {input_shape:?} does not match a {}-d spec",
            spec.rank()
        )));
    }
    let (n, c_in) = (input_shape[0], input_shape[1]);
    if c_in % spec.groups != 0 || out_channels % spec.groups != 0 {
        return Err(Error::shape("channels not divisible by groups"));
    }
    let out: u64 = spec
        .output_extents(&input_shape[2..])?
        .iter()
        .map(|&e| e as u64)
        .product();
    let kvol: u64 = spec.kernel.iter().map(|&k| k as u64).product();
    Ok(n as u64 * out_channels as u64 * out * (c_in / spec.groups) as u64 * kvol)
}

/// Direct nested-loop evaluation, dispatched on the spec's rank. Shares no
/// code with the optimized kernel.
pub fn naive_conv<T: Element>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    let r = spec.rank();
    if x.rank() != r + 2 || w.rank() != r + 2 {
        return Err(Error::shape(format!(
            "naive {r}-d convolution on {:?} with weights {:?}",
            x.dims(),
            w.dims()
        )));
    }
    let g = spec.groups;
    let (n, c_in, c_out) = (x.dims()[0], x.dims()[1], w.dims()[0]);
    if c_in % g != 0 || c_out % g != 0 || w.dims()[1] * g != c_in || w.dims()[2..] != spec.kernel[..] {
        return Err(Error::shape(format!(
            "inconsistent grouped shapes {:?} / {:?} with groups {g}",
            x.dims(),
            w.dims()
        )));
    }
    let out_ext = spec.output_extents(&x.dims()[2..])?;
    let mut dims = vec![n, c_out];
    dims.extend_from_slice(&out_ext);
    let cin_g = c_in / g;
    let cout_g = c_out / g;
    let s = &spec.stride;
    let p = &spec.padding;
    let d = &spec.dilation;
    let k = &spec.kernel;
    let xd = x.dims();
    let sample = |idx: &[isize], b: usize, c: usize| -> T {
        for (a, &i) in idx.iter().enumerate() {
            if i < 0 || i >= xd[a + 2] as isize {
                return T::zero();
            }
        }
        let mut full = vec![b, c];
        full.extend(idx.iter().map(|&i| i as usize));
        x.get(&full).expect("in-bounds index")
    };
    let pos = |o: usize, kk: usize, a: usize| -> isize {
        (o * s[a] + kk * d[a]) as isize - p[a] as isize
    };
    let out = match r {
        1 => Tensor::from_fn(&dims, |i| {
            let (b, o, l) = (i[0], i[1], i[2]);
            let grp = o / cout_g;
            let mut acc = T::zero();
            for ci in 0..cin_g {
                for u in 0..k[0] {
                    let xv = sample(&[pos(l, u, 0)], b, grp * cin_g + ci);
                    acc += w.get(&[o, ci, u]).unwrap() * xv;
                }
            }
            acc
        }),
        2 => Tensor::from_fn(&dims, |i| {
            let (b, o, y, z) = (i[0], i[1], i[2], i[3]);
            let grp = o / cout_g;
            let mut acc = T::zero();
            for ci in 0..cin_g {
                for u in 0..k[0] {
                    for v in 0..k[1] {
                        let xv = sample(&[pos(y, u, 0), pos(z, v, 1)], b, grp * cin_g + ci);
                        acc += w.get(&[o, ci, u, v]).unwrap() * xv;
                    }
                }
            }
            acc
        }),
        _ => Tensor::from_fn(&dims, |i| {
            let (b, o, t, y, z) = (i[0], i[1], i[2], i[3], i[4]);
            let grp = o / cout_g;
            let mut acc = T::zero();
            for ci in 0..cin_g {
                for a in 0..k[0] {
                    for u in 0..k[1] {
                        for v in 0..k[2] {
                            let xv = sample(
                                &[pos(t, a, 0), pos(y, u, 1), pos(z, v, 2)],
                                b,
                                grp * cin_g + ci,
                            );
                            acc += w.get(&[o, ci, a, u, v]).unwrap() * xv;
                        }
                    }
                }
            }
            acc
        }),
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::random_uniform(dims, -1.0, 1.0, rng)
    }

    #[test]
    fn taps_missing_the_whole_input_are_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = ConvSpec::new(&[1, 3, 3]).with_dilation(&[1, 3, 3]).with_padding(&[0, 3, 3]);
        let x = rand(&[1, 2, 2, 1, 1], &mut rng);
        let w = rand(&[2, 2, 1, 3, 3], &mut rng);
        let y = conv3d(&x, &w, &spec).unwrap();
        assert!(y.max_abs_diff(&naive_conv(&x, &w, &spec).unwrap()).unwrap() < 1e-12);
        let r = rand(y.dims(), &mut rng);
        let (gx, gw) = conv3d_backward(&x, &w, &spec, &r).unwrap();
        // Both sides of the adjoint identity equal sum(y * r).
        let yr = y.dot(&r).unwrap();
        assert!((x.dot(&gx).unwrap() - yr).abs() < 1e-12);
        assert!((w.dot(&gw).unwrap() - yr).abs() < 1e-12);
    }

    #[test]
    fn pointwise_unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand(&[2, 1, 5, 5], &mut rng);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &w, &ConvSpec::new(&[1, 1])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand(&[1, 3, 4, 4], &mut rng);
        let w = Tensor::zeros(&[2, 3, 3, 3]);
        let y = conv2d(&x, &w, &ConvSpec::new(&[3, 3])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv1d_unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand(&[1, 1, 9], &mut rng);
        let y = conv1d(&x, &Tensor::full(&[1, 1, 1], 1.0), &ConvSpec::new(&[1])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv1d_ones_kernel_over_flattened_frame() {
        let x = Tensor::<f64>::full(&[1, 1, 9], 1.0);
        let w = Tensor::full(&[1, 1, 9], 1.0);
        let y = conv1d(&x, &w, &ConvSpec::new(&[9])).unwrap();
        assert_eq!(y.dims(), &[1, 1, 9]);
        assert_eq!(y.data()[4], 9.0);
        // edges only see the taps that land inside the sequence
        assert_eq!(y.data()[0], 5.0);
    }

    #[test]
    fn conv3d_center_impulse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand(&[1, 1, 3, 4, 4], &mut rng);
        let w = Tensor::from_fn(&[1, 1, 3, 3, 3], |i| if i[2..] == [1, 1, 1] { 1.0 } else { 0.0 });
        let y = conv3d(&x, &w, &ConvSpec::new(&[3, 3, 3])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn channelwise_conv_isolates_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand(&[1, 4, 3, 5, 5], &mut rng);
        let w = rand(&[4, 1, 3, 3, 3], &mut rng);
        let spec = ConvSpec::new(&[3, 3, 3]).with_groups(4);
        let y = conv3d(&x, &w, &spec).unwrap();
        let mut x2 = x.clone();
        let plane = 3 * 5 * 5;
        for v in &mut x2.data_mut()[..plane] {
            *v += 10.0;
        }
        let y2 = conv3d(&x2, &w, &spec).unwrap();
        assert_ne!(y.data()[..plane], y2.data()[..plane]);
        assert_eq!(y.data()[plane..], y2.data()[plane..]);
    }

    #[test]
    fn strided_dilated_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand(&[2, 4, 7, 9], &mut rng);
        let w = rand(&[6, 2, 3, 2], &mut rng);
        let spec = ConvSpec::new(&[3, 2])
            .with_groups(2)
            .with_stride(&[2, 3])
            .with_dilation(&[2, 1])
            .with_padding(&[1, 2]);
        let a = conv2d(&x, &w, &spec).unwrap();
        let b = naive_conv(&x, &w, &spec).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn backward_zero_grad_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand(&[1, 2, 3, 4, 4], &mut rng);
        let w = rand(&[2, 2, 3, 3, 3], &mut rng);
        let spec = ConvSpec::new(&[3, 3, 3]);
        let g = Tensor::zeros(&[1, 2, 3, 4, 4]);
        let (gx, gw) = conv3d_backward(&x, &w, &spec, &g).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_weight_gradient_is_sum_of_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand(&[1, 1, 4, 4], &mut rng);
        let w = Tensor::full(&[1, 1, 1, 1], 0.5);
        let g = rand(&[1, 1, 4, 4], &mut rng);
        let (_, gw) = conv2d_backward(&x, &w, &ConvSpec::new(&[1, 1]), &g).unwrap();
        let expect: f64 = x.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        assert!((gw.data()[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn backward_rejects_wrong_grad_shape() {
        let x = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        let g = Tensor::zeros(&[1, 1, 4, 5]);
        assert!(conv2d_backward(&x, &w, &ConvSpec::new(&[3, 3]), &g).is_err());
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::zeros(&[2, 2, 3, 3]);
        assert!(conv2d(&x, &w, &ConvSpec::new(&[3, 3])).is_err());
        let w = Tensor::zeros(&[3, 1, 3, 3]);
        assert!(conv2d(&x, &w, &ConvSpec::new(&[3, 3]).with_groups(2)).is_err());
        let w = Tensor::zeros(&[2, 3, 7, 7]);
        assert!(conv2d(&x, &w, &ConvSpec::new(&[7, 7]).with_padding(&[0, 0])).is_err());
    }

    #[test]
    fn mac_counts() {
        assert_eq!(mac_count(&ConvSpec::new(&[1, 1]), &[1, 1, 4, 4], 1).unwrap(), 16);
        let (h, w, c) = (6u64, 7u64, 5u64);
        let m2 = mac_count(&ConvSpec::new(&[3, 3]), &[1, 5, 6, 7], 5).unwrap();
        assert_eq!(m2, h * w * 9 * c * c);
        let m1 = mac_count(&ConvSpec::new(&[9]), &[1, 5, 42], 5).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn segmented_taps_stay_inside_rows() {
        // two rows of three; a length-3 all-ones kernel summed per row
        let x = Tensor::<f64>::from_vec(&[1, 1, 6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = Tensor::<f64>::full(&[1, 1, 3], 1.0);
        let spec = ConvSpec::new(&[3]);
        let g = Geometry::new(x.dims(), w.dims(), &spec, 1, 0)
            .unwrap()
            .with_segment(3)
            .unwrap();
        let y = forward(x.data(), w.data(), &g);
        assert_eq!(y, vec![3.0, 6.0, 5.0, 9.0, 15.0, 11.0]);
        let whole = conv1d(&x, &w, &spec).unwrap();
        assert_eq!(whole.data(), &[3.0, 6.0, 9.0, 12.0, 15.0, 11.0]);
    }
}
