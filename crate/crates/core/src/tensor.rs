//! Dense row-major tensors and the frame-level reshapes used by STS
//! convolution: temporal slicing, row/column raster flattening and channel
//! concatenation.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, Deref};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    /// Code used by the checkpoint format.
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => f.write_str("f32"),
            DType::F64 => f.write_str("f64"),
        }
    }
}

/// Scalar types a [`Tensor`] can hold.
pub trait Element:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + AddAssign
    + Sum
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    const DTYPE: DType;

    fn from_f64_lossy(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    /// `bytes` must be exactly `DTYPE.size_of()` long.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Dense n-dimensional array, row-major (last dimension fastest).
///
/// Zero-length axes are permitted so that empty channel blocks can take part
/// in concatenation; every other invariant (`product(dims) == data.len()`,
/// finite entries) is checked on construction.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview = &self.data[..self.data.len().min(8)];
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("data", &preview)
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {expected} elements, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::from_vec"));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    /// Skips the finiteness scan; for kernels whose outputs are finite by
    /// construction from finite inputs.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        let len = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; len],
        }
    }

    /// Panics if `f` yields a non-finite value.
    pub fn from_fn(dims: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut idx = vec![0usize; dims.len()];
        for _ in 0..len {
            let v = f(&idx);
            assert!(v.is_finite(), "Tensor::from_fn produced a non-finite value at {idx:?}");
            data.push(v);
            for axis in (0..dims.len()).rev() {
                idx[axis] += 1;
                if idx[axis] < dims[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        Self {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn random_uniform(dims: &[usize], low: f64, high: f64, rng: &mut impl Rng) -> Self {
        let len: usize = dims.iter().product();
        let data = (0..len)
            .map(|_| T::from_f64_lossy(rng.gen_range(low..high)))
            .collect();
        Self {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the buffer; the tensor's owner is responsible for
    /// keeping entries finite.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.dims.len() {
            return Err(Error::shape(format!(
                "index of rank {} for tensor of rank {}",
                index.len(),
                self.dims.len()
            )));
        }
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.dims) {
            if i >= d {
                return Err(Error::Index { index: i, len: d });
            }
            off = off * d + i;
        }
        Ok(off)
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        let len: usize = dims.iter().product();
        if len != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "element-wise op on {:?} and {:?}",
                self.dims, other.dims
            )));
        }
        Ok(Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "in-place add of {:?} into {:?}",
                other.dims, self.dims
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "dot of {:?} and {:?}",
                self.dims, other.dims
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    /// Largest absolute element-wise difference; `None` when dims differ.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.dims != other.dims {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
                .fold(0.0, f64::max),
        )
    }

    /// Exact equality including the sign of zero is not required; `-0 == 0`.
    pub fn values_eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.data.iter().zip(&other.data).all(|(a, b)| a == b)
    }

    pub fn bits_eq(&self, other: &Self) -> bool {
        if self.dims != other.dims {
            return false;
        }
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (&x, &y) in self.data.iter().zip(&other.data) {
            a.clear();
            b.clear();
            x.write_le(&mut a);
            y.write_le(&mut b);
            if a != b {
                return false;
            }
        }
        true
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }
}

/// A `(N, C, T, H, W)` clip batch with every axis at least one long.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoBatch<T>(Tensor<T>);

impl<T: Element> VideoBatch<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        if tensor.rank() != 5 || tensor.dims().contains(&0) {
            return Err(Error::shape(format!(
                "video batch needs 5 non-empty axes (N,C,T,H,W), got {:?}",
                tensor.dims()
            )));
        }
        Ok(Self(tensor))
    }

    pub fn batch(&self) -> usize {
        self.0.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.0.dims[1]
    }

    pub fn frames(&self) -> usize {
        self.0.dims[2]
    }

    pub fn height(&self) -> usize {
        self.0.dims[3]
    }

    pub fn width(&self) -> usize {
        self.0.dims[4]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }
}

impl<T> Deref for VideoBatch<T> {
    type Target = Tensor<T>;

    fn deref(&self) -> &Tensor<T> {
        &self.0
    }
}

fn expect_rank<T: Element>(x: &Tensor<T>, rank: usize, op: &str) -> Result<()> {
    if x.rank() != rank {
        return Err(Error::shape(format!(
            "{op} expects a rank-{rank} tensor, got {:?}",
            x.dims()
        )));
    }
    Ok(())
}

/// Frame `t` of every clip: `out[n,c,h,w] = v[n,c,t,h,w]`.
pub fn slice_time<T: Element>(v: &VideoBatch<T>, t: usize) -> Result<Tensor<T>> {
    let [n, c, frames, h, w] = [v.batch(), v.channels(), v.frames(), v.height(), v.width()];
    if t >= frames {
        return Err(Error::Index {
            index: t,
            len: frames,
        });
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * c * plane);
    for chunk in v.data().chunks_exact(frames * plane) {
        out.extend_from_slice(&chunk[t * plane..(t + 1) * plane]);
    }
    Ok(Tensor::from_parts(vec![n, c, h, w], out))
}

/// Inverse of [`slice_time`] over all frames: stacks `(N,C,H,W)` frames into
/// a `(N,C,T,H,W)` batch.
pub fn stack_time<T: Element>(frames: &[Tensor<T>]) -> Result<VideoBatch<T>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::shape("stack_time needs at least one frame"))?;
    expect_rank(first, 4, "stack_time")?;
    if frames.iter().any(|f| f.dims() != first.dims()) {
        return Err(Error::shape("stack_time frames differ in shape"));
    }
    let [n, c, h, w] = [first.dims[0], first.dims[1], first.dims[2], first.dims[3]];
    let plane = h * w;
    let t = frames.len();
    let mut out = Vec::with_capacity(n * c * t * plane);
    for nc in 0..n * c {
        for f in frames {
            out.extend_from_slice(&f.data[nc * plane..(nc + 1) * plane]);
        }
    }
    VideoBatch::new(Tensor::from_parts(vec![n, c, t, h, w], out))
}

/// Row raster: `out[n,c,h*W+w] = x[n,c,h,w]`. Pure relabelling in row-major
/// layout.
pub fn flatten_rows<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(x, 4, "flatten_rows")?;
    let d = x.dims();
    Ok(Tensor::from_parts(
        vec![d[0], d[1], d[2] * d[3]],
        x.data.clone(),
    ))
}

pub fn unflatten_rows<T: Element>(x: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    expect_rank(x, 3, "unflatten_rows")?;
    let d = x.dims();
    if d[2] != height * width {
        return Err(Error::shape(format!(
            "sequence of length {} cannot unflatten to {height}x{width}",
            d[2]
        )));
    }
    Ok(Tensor::from_parts(
        vec![d[0], d[1], height, width],
        x.data.clone(),
    ))
}

/// Swaps the last two axes of a tensor of rank >= 2.
pub fn transpose_hw<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 2 {
        return Err(Error::shape("transpose_hw needs rank >= 2"));
    }
    let r = x.rank();
    let (h, w) = (x.dims[r - 2], x.dims[r - 1]);
    let mut dims = x.dims.clone();
    dims.swap(r - 2, r - 1);
    let plane = h * w;
    let mut out = vec![T::zero(); x.len()];
    if plane > 0 {
        for (src, dst) in x.data.chunks_exact(plane).zip(out.chunks_exact_mut(plane)) {
            for i in 0..h {
                for j in 0..w {
                    dst[j * h + i] = src[i * w + j];
                }
            }
        }
    }
    Ok(Tensor::from_parts(dims, out))
}

/// Column raster: `out[n,c,w*H+h] = x[n,c,h,w]`.
pub fn flatten_cols<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(x, 4, "flatten_cols")?;
    flatten_rows(&transpose_hw(x)?)
}

pub fn unflatten_cols<T: Element>(x: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let cols = unflatten_rows(x, width, height)?;
    transpose_hw(&cols)
}

/// Concatenates along axis 1; `a` occupies the leading channels.
pub fn concat_channels<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() < 2 || a.rank() != b.rank() {
        return Err(Error::shape(format!(
            "concat_channels on {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let same_rest = a.dims[0] == b.dims[0] && a.dims[2..] == b.dims[2..];
    if !same_rest {
        return Err(Error::shape(format!(
            "concat_channels: non-channel dims differ ({:?} vs {:?})",
            a.dims(),
            b.dims()
        )));
    }
    let inner: usize = a.dims[2..].iter().product();
    let (ca, cb) = (a.dims[1], b.dims[1]);
    let n = a.dims[0];
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        out.extend_from_slice(&a.data[i * ca * inner..(i + 1) * ca * inner]);
        out.extend_from_slice(&b.data[i * cb * inner..(i + 1) * cb * inner]);
    }
    let mut dims = a.dims.clone();
    dims[1] = ca + cb;
    Ok(Tensor::from_parts(dims, out))
}

/// Splits along axis 1 into channels `[0, at)` and `[at, C)`.
pub fn split_channels<T: Element>(y: &Tensor<T>, at: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    if y.rank() < 2 {
        return Err(Error::shape("split_channels needs rank >= 2"));
    }
    let c = y.dims[1];
    if at > c {
        return Err(Error::Index { index: at, len: c });
    }
    let inner: usize = y.dims[2..].iter().product();
    let n = y.dims[0];
    let mut lead = Vec::with_capacity(n * at * inner);
    let mut trail = Vec::with_capacity(n * (c - at) * inner);
    for i in 0..n {
        let base = i * c * inner;
        lead.extend_from_slice(&y.data[base..base + at * inner]);
        trail.extend_from_slice(&y.data[base + at * inner..base + c * inner]);
    }
    let mut da = y.dims.clone();
    da[1] = at;
    let mut db = y.dims.clone();
    db[1] = c - at;
    Ok((Tensor::from_parts(da, lead), Tensor::from_parts(db, trail)))
}

/// Leading-axis slice `[start, end)`; used for output-channel blocks of
/// weight tensors.
pub fn slice_leading<T: Element>(x: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
    if x.rank() == 0 || start > end || end > x.dims[0] {
        return Err(Error::shape(format!(
            "leading slice {start}..{end} of {:?}",
            x.dims()
        )));
    }
    let inner: usize = x.dims[1..].iter().product();
    let mut dims = x.dims.clone();
    dims[0] = end - start;
    Ok(Tensor::from_parts(
        dims,
        x.data[start * inner..end * inner].to_vec(),
    ))
}

/// Concatenates along the leading axis.
pub fn concat_leading<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() == 0 || a.rank() != b.rank() || a.dims[1..] != b.dims[1..] {
        return Err(Error::shape(format!(
            "concat_leading on {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut dims = a.dims.clone();
    dims[0] += b.dims[0];
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Ok(Tensor::from_parts(dims, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frame(values: &[f64], h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_vec(&[1, 1, h, w], values.to_vec()).unwrap()
    }

    #[test]
    fn slice_time_single_frame_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::<f64>::random_uniform(&[2, 3, 1, 4, 5], -1.0, 1.0, &mut rng);
        let v = VideoBatch::new(t.clone()).unwrap();
        let s = slice_time(&v, 0).unwrap();
        assert_eq!(s.dims(), &[2, 3, 4, 5]);
        assert_eq!(s.data(), t.data());
    }

    #[test]
    fn slice_time_of_time_ramp_is_constant() {
        let v = Tensor::<f64>::from_fn(&[2, 2, 4, 3, 3], |i| i[2] as f64);
        let v = VideoBatch::new(v).unwrap();
        let s = slice_time(&v, 2).unwrap();
        assert!(s.data().iter().all(|&x| x == 2.0));
    }

    #[test]
    fn slice_time_matches_direct_indexing() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = VideoBatch::new(Tensor::<f64>::random_uniform(&[1, 2, 3, 4, 4], -1.0, 1.0, &mut rng)).unwrap();
        let s = slice_time(&v, 1).unwrap();
        for c in 0..2 {
            for h in 0..4 {
                for w in 0..4 {
                    assert_eq!(s.get(&[0, c, h, w]).unwrap(), v.get(&[0, c, 1, h, w]).unwrap());
                }
            }
        }
    }

    #[test]
    fn slice_time_out_of_range() {
        let v = VideoBatch::new(Tensor::<f64>::zeros(&[1, 1, 3, 2, 2])).unwrap();
        assert!(matches!(slice_time(&v, 3), Err(Error::Index { index: 3, len: 3 })));
    }

    #[test]
    fn stack_time_inverts_slicing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = VideoBatch::new(Tensor::<f64>::random_uniform(&[2, 3, 4, 2, 5], -1.0, 1.0, &mut rng)).unwrap();
        let frames: Vec<_> = (0..4).map(|t| slice_time(&v, t).unwrap()).collect();
        assert_eq!(stack_time(&frames).unwrap(), v);
    }

    #[test]
    fn video_batch_rejects_bad_rank() {
        assert!(VideoBatch::new(Tensor::<f64>::zeros(&[1, 2, 3, 4])).is_err());
        assert!(VideoBatch::new(Tensor::<f64>::zeros(&[1, 2, 0, 4, 4])).is_err());
    }

    #[test]
    fn flatten_rows_and_cols_of_2x2() {
        let x = frame(&[1.0, 2.0, 3.0, 4.0], 2, 2);
        assert_eq!(flatten_rows(&x).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(flatten_cols(&x).unwrap().data(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn flatten_degenerate_axes_keep_values() {
        let x = frame(&[1.0, 2.0, 3.0], 1, 3);
        assert_eq!(flatten_rows(&x).unwrap().data(), x.data());
        let y = frame(&[1.0, 2.0, 3.0], 3, 1);
        assert_eq!(flatten_cols(&y).unwrap().data(), y.data());
    }

    #[test]
    fn flatten_cols_index_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::random_uniform(&[2, 2, 4, 3], -1.0, 1.0, &mut rng);
        let f = flatten_cols(&x).unwrap();
        for n in 0..2 {
            for c in 0..2 {
                for h in 0..4 {
                    for w in 0..3 {
                        assert_eq!(f.get(&[n, c, w * 4 + h]).unwrap(), x.get(&[n, c, h, w]).unwrap());
                    }
                }
            }
        }
    }

    #[test]
    fn flatten_wrong_rank() {
        let x = Tensor::<f64>::zeros(&[2, 3, 4]);
        assert!(matches!(flatten_rows(&x), Err(Error::Shape(_))));
        assert!(matches!(flatten_cols(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn concat_with_empty_block() {
        let a = Tensor::<f64>::from_fn(&[1, 2, 3, 3], |i| (i[1] * 9 + i[2] * 3 + i[3]) as f64);
        let empty = Tensor::<f64>::zeros(&[1, 0, 3, 3]);
        assert_eq!(concat_channels(&a, &empty).unwrap(), a);
    }

    #[test]
    fn concat_blocks_slice_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::<f64>::random_uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::random_uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut rng);
        let y = concat_channels(&a, &b).unwrap();
        assert_eq!(y.dims(), &[1, 5, 4, 4]);
        for c in 0..5 {
            for h in 0..4 {
                for w in 0..4 {
                    let expect = if c < 2 {
                        a.get(&[0, c, h, w]).unwrap()
                    } else {
                        b.get(&[0, c - 2, h, w]).unwrap()
                    };
                    assert_eq!(y.get(&[0, c, h, w]).unwrap(), expect);
                }
            }
        }
    }

    #[test]
    fn concat_rejects_mismatched_spatial_dims() {
        let a = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let b = Tensor::<f64>::zeros(&[1, 2, 4, 5]);
        assert!(concat_channels(&a, &b).is_err());
    }

    #[test]
    fn from_vec_checks_length_and_finiteness() {
        assert!(Tensor::<f64>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
        assert!(matches!(
            Tensor::<f64>::from_vec(&[1], vec![f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }
}
