//! Dense NHWC tensors and the handful of kernels every layer is built from.
//!
//! Feature maps are `[batch, height, width, channels]`, row-major, with the
//! channel index varying fastest. Convolution kernels are
//! `[kernel_h, kernel_w, in_channels, out_channels]`.
//!
//! All kernels use a fixed loop nest. Work is split across threads only along
//! the batch axis, and per-sample partial results are combined in sample
//! order, so results are bitwise identical regardless of thread count.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type of a [`Tensor`].
pub trait Element:
    Float
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    const DTYPE: DType;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn of(v: f64) -> Self {
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

    fn of(v: f64) -> Self {
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

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Formats a shape as `1×56×56×32`.
pub struct ShapeDisplay<'a>(pub &'a [usize]);

impl fmt::Display for ShapeDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("×")?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}]", ShapeDisplay(&self.shape))?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim(
                "tensor",
                format!("extents must be >= 1, got [{}]", ShapeDisplay(&shape)),
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!(
                    "shape [{}] holds {n} values but buffer has {}",
                    ShapeDisplay(&shape),
                    data.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor whose shape is known to match the buffer.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn scalar(v: T) -> Self {
        Tensor::from_parts(vec![1], vec![v])
    }

    /// Samples i.i.d. `N(0, std^2)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Samples i.i.d. uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.random_range(lo..hi))).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    /// Splits a rank-4 shape into `(n, h, w, c)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, h, w, c] => Ok((n, h, w, c)),
            _ => Err(Error::dim(
                "dims4",
                format!("expected N×h×w×c, got [{}]", ShapeDisplay(&self.shape)),
            )),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::dim(
                "dims2",
                format!("expected a matrix, got [{}]", ShapeDisplay(&self.shape)),
            )),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(
                op,
                format!(
                    "[{}] vs [{}]",
                    ShapeDisplay(&self.shape),
                    ShapeDisplay(&other.shape)
                ),
            ));
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    /// `Σ self ⊙ other`, accumulated in f64.
    pub fn dot(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Fails with a numeric fault naming `site` if any value is NaN or infinite.
    pub fn check_finite(&self, site: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NumericFault(site.to_string()))
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        )
    }

    /// Returns the `index`-th slice along the leading axis, keeping it as an extent of 1.
    pub fn batch_item(&self, index: usize) -> Self {
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::from_parts(shape, self.data[index * per..(index + 1) * per].to_vec())
    }

    /// Stacks tensors of identical shape along a new leading axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Input("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for item in items {
            first.expect_same_shape(item, "stack")?;
            data.extend_from_slice(&item.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_parts(shape, data))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output extent `ceil(d / stride)`, zero padding split `(floor, ceil)`.
    Same,
    /// No padding; output extent `floor((d - k) / stride) + 1`.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn new(kernel_h: usize, kernel_w: usize, stride: usize, padding: Padding) -> Self {
        ConvSpec {
            kernel_h,
            kernel_w,
            stride,
            padding,
        }
    }

    pub fn same(k: usize, stride: usize) -> Self {
        Self::new(k, k, stride, Padding::Same)
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride == 0 {
            return Err(Error::dim(
                op,
                format!(
                    "kernel {}×{} stride {} must all be >= 1",
                    self.kernel_h, self.kernel_w, self.stride
                ),
            ));
        }
        Ok(())
    }

    /// Output extent and leading pad for one spatial axis.
    pub fn axis(&self, dim: usize, k: usize, op: &'static str) -> Result<(usize, usize)> {
        window_axis(dim, k, self.stride, self.padding, op)
    }
}

/// `(output extent, leading pad)` of a sliding window along one axis.
pub fn window_axis(
    dim: usize,
    k: usize,
    stride: usize,
    padding: Padding,
    op: &'static str,
) -> Result<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = dim.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(dim);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if dim < k {
                return Err(Error::dim(
                    op,
                    format!("window {k} larger than input extent {dim} under VALID padding"),
                ));
            }
            Ok(((dim - k) / stride + 1, 0))
        }
    }
}

struct ConvGeometry {
    n: usize,
    h: usize,
    w: usize,
    ci: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeometry {
    fn new<T: Element>(input: &Tensor<T>, kernel: &Tensor<T>, spec: ConvSpec) -> Result<Self> {
        spec.validate("conv2d")?;
        let (n, h, w, ci) = input.dims4()?;
        let (kh, kw, kci, co) = kernel.dims4()?;
        if kci != ci || kh != spec.kernel_h || kw != spec.kernel_w {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "input [{}] kernel [{}] spec {}×{}",
                    ShapeDisplay(input.shape()),
                    ShapeDisplay(kernel.shape()),
                    spec.kernel_h,
                    spec.kernel_w
                ),
            ));
        }
        let (oh, pad_top) = spec.axis(h, kh, "conv2d")?;
        let (ow, pad_left) = spec.axis(w, kw, "conv2d")?;
        Ok(ConvGeometry {
            n,
            h,
            w,
            ci,
            co,
            kh,
            kw,
            stride: spec.stride,
            oh,
            ow,
            pad_top,
            pad_left,
        })
    }

    fn in_len(&self) -> usize {
        self.h * self.w * self.ci
    }

    fn out_len(&self) -> usize {
        self.oh * self.ow * self.co
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.oh, self.ow, self.co]
    }

    /// Source coordinate for output `o` and tap `k`, if it lands inside the input.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, dim: usize) -> Option<usize> {
        let pos = (o * stride + k).checked_sub(pad)?;
        (pos < dim).then_some(pos)
    }
}

/// 2-D cross-correlation (no kernel flip) of an NHWC batch.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input, kernel, spec)?;
    let mut out = vec![T::zero(); g.n * g.out_len()];
    let k = kernel.data();
    out.par_chunks_mut(g.out_len())
        .zip(input.data().par_chunks(g.in_len()))
        .for_each(|(o, x)| {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let acc = &mut o[(oy * g.ow + ox) * g.co..][..g.co];
                    for ky in 0..g.kh {
                        let Some(iy) = ConvGeometry::src(oy, ky, g.stride, g.pad_top, g.h) else {
                            continue;
                        };
                        for kx in 0..g.kw {
                            let Some(ix) = ConvGeometry::src(ox, kx, g.stride, g.pad_left, g.w)
                            else {
                                continue;
                            };
                            let px = &x[(iy * g.w + ix) * g.ci..][..g.ci];
                            let tap = &k[(ky * g.kw + kx) * g.ci * g.co..][..g.ci * g.co];
                            for (i, &v) in px.iter().enumerate() {
                                let row = &tap[i * g.co..][..g.co];
                                for (a, &wv) in acc.iter_mut().zip(row) {
                                    *a += v * wv;
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(Tensor::from_parts(g.out_shape(), out))
}

/// Gradients of `Σ upstream ⊙ conv2d(input, kernel)` with respect to input and kernel.
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    spec: ConvSpec,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = ConvGeometry::new(input, kernel, spec)?;
    if upstream.shape() != g.out_shape().as_slice() {
        return Err(Error::dim(
            "conv2d_backward",
            format!(
                "upstream [{}] vs forward output [{}]",
                ShapeDisplay(upstream.shape()),
                ShapeDisplay(&g.out_shape())
            ),
        ));
    }
    let k = kernel.data();
    let mut grad_input = vec![T::zero(); input.len()];
    let partials: Vec<Vec<T>> = grad_input
        .par_chunks_mut(g.in_len())
        .zip(input.data().par_chunks(g.in_len()))
        .zip(upstream.data().par_chunks(g.out_len()))
        .map(|((gx, x), up)| {
            let mut gk = vec![T::zero(); kernel.len()];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let gy = &up[(oy * g.ow + ox) * g.co..][..g.co];
                    for ky in 0..g.kh {
                        let Some(iy) = ConvGeometry::src(oy, ky, g.stride, g.pad_top, g.h) else {
                            continue;
                        };
                        for kx in 0..g.kw {
                            let Some(ix) = ConvGeometry::src(ox, kx, g.stride, g.pad_left, g.w)
                            else {
                                continue;
                            };
                            let base = (iy * g.w + ix) * g.ci;
                            let tap_off = (ky * g.kw + kx) * g.ci * g.co;
                            for i in 0..g.ci {
                                let row = &k[tap_off + i * g.co..][..g.co];
                                let mut s = T::zero();
                                for (&wv, &d) in row.iter().zip(gy) {
                                    s += wv * d;
                                }
                                gx[base + i] += s;
                                let v = x[base + i];
                                let grow = &mut gk[tap_off + i * g.co..][..g.co];
                                for (a, &d) in grow.iter_mut().zip(gy) {
                                    *a += v * d;
                                }
                            }
                        }
                    }
                }
            }
            gk
        })
        .collect();
    let mut grad_kernel = vec![T::zero(); kernel.len()];
    for p in &partials {
        for (a, &b) in grad_kernel.iter_mut().zip(p) {
            *a += b;
        }
    }
    Ok((
        Tensor::from_parts(input.shape().to_vec(), grad_input),
        Tensor::from_parts(kernel.shape().to_vec(), grad_kernel),
    ))
}

/// Winner positions recorded by [`maxpool2d`], as flat offsets into the input buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

/// Max pooling. SAME padding uses a −∞ sentinel that never wins over a real value.
/// Ties go to the first element in row-major scan order.
pub fn maxpool2d<T: Element>(
    input: &Tensor<T>,
    pool_h: usize,
    pool_w: usize,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<T>, PoolIndices)> {
    if pool_h == 0 || pool_w == 0 || stride == 0 {
        return Err(Error::dim("maxpool2d", "pool extents and stride must be >= 1"));
    }
    let (n, h, w, c) = input.dims4()?;
    let (oh, pt) = window_axis(h, pool_h, stride, padding, "maxpool2d")?;
    let (ow, pl) = window_axis(w, pool_w, stride, padding, "maxpool2d")?;
    let x = input.data();
    let mut out = vec![T::neg_infinity(); n * oh * ow * c];
    let mut arg = vec![usize::MAX; out.len()];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let obase = ((b * oh + oy) * ow + ox) * c;
                for ky in 0..pool_h {
                    let Some(iy) = ConvGeometry::src(oy, ky, stride, pt, h) else {
                        continue;
                    };
                    for kx in 0..pool_w {
                        let Some(ix) = ConvGeometry::src(ox, kx, stride, pl, w) else {
                            continue;
                        };
                        let ibase = ((b * h + iy) * w + ix) * c;
                        for ch in 0..c {
                            let v = x[ibase + ch];
                            if arg[obase + ch] == usize::MAX || v > out[obase + ch] {
                                out[obase + ch] = v;
                                arg[obase + ch] = ibase + ch;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![n, oh, ow, c], out),
        PoolIndices {
            input_shape: input.shape().to_vec(),
            argmax: arg,
        },
    ))
}

/// Routes each upstream value to the input position that won its window.
pub fn maxpool2d_backward<T: Element>(
    indices: &PoolIndices,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    if upstream.len() != indices.argmax.len() {
        return Err(Error::dim(
            "maxpool2d_backward",
            format!(
                "upstream has {} values, pooling produced {}",
                upstream.len(),
                indices.argmax.len()
            ),
        ));
    }
    let mut grad = Tensor::zeros(&indices.input_shape);
    let g = grad.data_mut();
    for (&i, &d) in indices.argmax.iter().zip(upstream.data()) {
        g[i] += d;
    }
    Ok(grad)
}

/// `a · b` for matrices `[m,k] · [k,n]`.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!(
                "inner dims differ: [{}] · [{}]",
                ShapeDisplay(a.shape()),
                ShapeDisplay(b.shape())
            ),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..][..n];
        for p in 0..k {
            let av = ad[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&bd[p * n..][..n]) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose<T: Element>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.dims2()?;
    let d = a.data();
    let mut out = Vec::with_capacity(m * n);
    for j in 0..n {
        for i in 0..m {
            out.push(d[i * n + j]);
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Pads the spatial axes of an NHWC tensor with `fill`.
pub fn pad2d<T: Element>(
    input: &Tensor<T>,
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
    fill: T,
) -> Result<Tensor<T>> {
    let (n, h, w, c) = input.dims4()?;
    let (ph, pw) = (h + top + bottom, w + left + right);
    let mut out = vec![fill; n * ph * pw * c];
    let x = input.data();
    for b in 0..n {
        for y in 0..h {
            let src = &x[((b * h + y) * w) * c..][..w * c];
            let dst = &mut out[((b * ph + y + top) * pw + left) * c..][..w * c];
            dst.copy_from_slice(src);
        }
    }
    Ok(Tensor::from_parts(vec![n, ph, pw, c], out))
}

/// Extracts the `height × width` window starting at `(top, left)`.
pub fn crop2d<T: Element>(
    input: &Tensor<T>,
    top: usize,
    left: usize,
    height: usize,
    width: usize,
) -> Result<Tensor<T>> {
    let (n, h, w, c) = input.dims4()?;
    if height == 0 || width == 0 || top + height > h || left + width > w {
        return Err(Error::dim(
            "crop2d",
            format!(
                "window {height}×{width} at ({top},{left}) outside [{}]",
                ShapeDisplay(input.shape())
            ),
        ));
    }
    let x = input.data();
    let mut out = Vec::with_capacity(n * height * width * c);
    for b in 0..n {
        for y in top..top + height {
            out.extend_from_slice(&x[((b * h + y) * w + left) * c..][..width * c]);
        }
    }
    Ok(Tensor::from_parts(vec![n, height, width, c], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, rel_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Direct six-deep loop, written independently of the production kernel.
    fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, same: bool) -> Tensor<f64> {
        let (n, h, w, ci) = x.dims4().unwrap();
        let (kh, kw, _, co) = k.dims4().unwrap();
        let (oh, ow, pt, pl) = if same {
            let oh = h.div_ceil(stride);
            let ow = w.div_ceil(stride);
            let ph = ((oh - 1) * stride + kh).saturating_sub(h);
            let pw = ((ow - 1) * stride + kw).saturating_sub(w);
            (oh, ow, ph / 2, pw / 2)
        } else {
            ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
        };
        let mut out = Tensor::zeros(&[n, oh, ow, co]);
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for o in 0..co {
                        let mut s = 0.0;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pt as isize;
                                let ix = (ox * stride + kx) as isize - pl as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                for i in 0..ci {
                                    let xv = x.data()
                                        [((b * h + iy as usize) * w + ix as usize) * ci + i];
                                    let kv = k.data()[((ky * kw + kx) * ci + i) * co + o];
                                    s += xv * kv;
                                }
                            }
                        }
                        out.data_mut()[((b * oh + oy) * ow + ox) * co + o] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_sum_of_nine_ones() {
        let x = Tensor::<f32>::full(&[1, 3, 3, 1], 1.0);
        let k = Tensor::<f32>::full(&[3, 3, 1, 1], 1.0);
        let y = conv2d(&x, &k, ConvSpec::new(3, 3, 1, Padding::Valid)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_same_stride_two_halves_extent() {
        let x = Tensor::<f32>::zeros(&[1, 224, 224, 3]);
        let k = Tensor::<f32>::zeros(&[7, 7, 3, 2]);
        let y = conv2d(&x, &k, ConvSpec::same(7, 2)).unwrap();
        assert_eq!(y.shape(), &[1, 112, 112, 2]);
    }

    #[test]
    fn conv_same_stride_one_preserves_extent() {
        for k in [1, 3, 5, 7] {
            let x = Tensor::<f32>::zeros(&[1, 9, 6, 1]);
            let kern = Tensor::<f32>::zeros(&[k, k, 1, 1]);
            let y = conv2d(&x, &kern, ConvSpec::same(k, 1)).unwrap();
            assert_eq!(y.shape(), &[1, 9, 6, 1], "k={k}");
        }
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut r = rng(7);
        for (stride, same) in [(1, false), (1, true), (2, true), (2, false)] {
            let x = Tensor::<f64>::randn(&[1, 8, 8, 2], 1.0, &mut r);
            let k = Tensor::<f64>::randn(&[3, 3, 2, 4], 1.0, &mut r);
            let pad = if same { Padding::Same } else { Padding::Valid };
            let y = conv2d(&x, &k, ConvSpec::new(3, 3, stride, pad)).unwrap();
            let want = conv_oracle(&x, &k, stride, same);
            assert_eq!(y.shape(), want.shape());
            assert!(y.max_abs_diff(&want) <= 1e-6);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 4, 4, 2]);
        let k = Tensor::<f32>::zeros(&[3, 3, 3, 1]);
        let err = conv2d(&x, &k, ConvSpec::same(3, 1)).unwrap_err().to_string();
        assert!(err.contains("1×4×4×2") && err.contains("3×3×3×1"), "{err}");
    }

    #[test]
    fn conv_backward_zero_upstream() {
        let mut r = rng(1);
        let x = Tensor::<f32>::randn(&[2, 5, 5, 3], 1.0, &mut r);
        let k = Tensor::<f32>::randn(&[3, 3, 3, 2], 1.0, &mut r);
        let spec = ConvSpec::same(3, 2);
        let up = Tensor::zeros(conv2d(&x, &k, spec).unwrap().shape());
        let (gx, gk) = conv2d_backward(&x, &k, spec, &up).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gk.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_backward_pointwise_kernel_is_matrix_product() {
        let mut r = rng(2);
        let x = Tensor::<f64>::randn(&[2, 3, 3, 2], 1.0, &mut r);
        let k = Tensor::<f64>::randn(&[1, 1, 2, 3], 1.0, &mut r);
        let spec = ConvSpec::same(1, 1);
        let up = Tensor::<f64>::randn(&[2, 3, 3, 3], 1.0, &mut r);
        let (_, gk) = conv2d_backward(&x, &k, spec, &up).unwrap();
        for i in 0..2 {
            for o in 0..3 {
                let want: f64 = (0..18).map(|p| x.data()[p * 2 + i] * up.data()[p * 3 + o]).sum();
                assert!((gk.data()[i * 3 + o] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        for seed in 0..5 {
            let mut r = rng(100 + seed);
            let x = Tensor::<f64>::randn(&[2, 5, 6, 2], 1.0, &mut r);
            let k = Tensor::<f64>::randn(&[3, 3, 2, 3], 1.0, &mut r);
            let spec = ConvSpec::same(3, 2);
            let up = Tensor::<f64>::randn(conv2d(&x, &k, spec).unwrap().shape(), 1.0, &mut r);
            let (gx, gk) = conv2d_backward(&x, &k, spec, &up).unwrap();
            let nx = central_difference(&x, 1e-6, |x| conv2d(x, &k, spec).unwrap().dot(&up));
            let nk = central_difference(&k, 1e-6, |k| conv2d(&x, k, spec).unwrap().dot(&up));
            assert!(rel_error(&gx, &nx) <= 1e-5);
            assert!(rel_error(&gk, &nk) <= 1e-5);
        }
    }

    #[test]
    fn maxpool_small_window() {
        let x = Tensor::<f32>::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = maxpool2d(&x, 2, 2, 2, Padding::Valid).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx.argmax, vec![3]);
    }

    #[test]
    fn maxpool_same_extent() {
        let x = Tensor::<f32>::zeros(&[1, 112, 112, 1]);
        let (y, _) = maxpool2d(&x, 3, 3, 2, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[1, 56, 56, 1]);
    }

    #[test]
    fn maxpool_negative_window_ignores_padding() {
        let x = Tensor::<f32>::full(&[1, 3, 3, 1], -5.0);
        let (y, _) = maxpool2d(&x, 3, 3, 2, Padding::Same).unwrap();
        assert!(y.data().iter().all(|&v| v == -5.0));
    }

    #[test]
    fn maxpool_ties_pick_first_in_scan_order() {
        let x = Tensor::<f32>::full(&[1, 2, 2, 1], 1.0);
        let (_, idx) = maxpool2d(&x, 2, 2, 2, Padding::Valid).unwrap();
        assert_eq!(idx.argmax, vec![0]);
    }

    #[test]
    fn maxpool_valid_window_too_large() {
        let x = Tensor::<f32>::zeros(&[1, 2, 2, 1]);
        assert!(matches!(
            maxpool2d(&x, 3, 3, 1, Padding::Valid),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn maxpool_backward_conserves_mass_and_matches_fd() {
        for seed in 0..5 {
            let mut r = rng(200 + seed);
            let x = Tensor::<f64>::randn(&[2, 7, 6, 3], 1.0, &mut r);
            let (y, idx) = maxpool2d(&x, 3, 3, 2, Padding::Same).unwrap();
            let up = Tensor::<f64>::randn(y.shape(), 1.0, &mut r);
            let g = maxpool2d_backward(&idx, &up).unwrap();
            assert!((g.sum() - up.sum()).abs() < 1e-9);
            for (p, &v) in g.data().iter().enumerate() {
                if v != 0.0 {
                    assert!(idx.argmax.contains(&p));
                }
            }
            let num = central_difference(&x, 1e-6, |x| {
                maxpool2d(x, 3, 3, 2, Padding::Same).unwrap().0.dot(&up)
            });
            assert!(rel_error(&g, &num) <= 1e-5);
        }
    }

    #[test]
    fn matmul_small_cases() {
        let a = Tensor::<f64>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
        let eye = Tensor::<f64>::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul(&eye, &b).unwrap(), b);
        assert!(matmul(&b, &b).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut r = rng(3);
        let a = Tensor::<f64>::randn(&[7, 5], 1.0, &mut r);
        let b = Tensor::<f64>::randn(&[5, 3], 1.0, &mut r);
        let c = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..5 {
                    s += a.data()[i * 5 + p] * b.data()[p * 3 + j];
                }
                assert!((c.data()[i * 3 + j] - s).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn pad_zero_is_identity_and_center_placement() {
        let x = Tensor::<f32>::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pad2d(&x, 0, 0, 0, 0, 0.0).unwrap(), x);
        let p = pad2d(&x, 1, 1, 1, 1, 0.0).unwrap();
        assert_eq!(p.shape(), &[1, 4, 4, 1]);
        #[rustfmt::skip]
        let want = [0., 0., 0., 0.,
                    0., 1., 2., 0.,
                    0., 3., 4., 0.,
                    0., 0., 0., 0.];
        assert_eq!(p.data(), &want);
    }

    #[test]
    fn stack_and_batch_item() {
        let a = Tensor::<f32>::full(&[2, 2, 1], 1.0);
        let b = Tensor::<f32>::full(&[2, 2, 1], 2.0);
        let s = Tensor::stack(&[a, b]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2, 1]);
        assert!(s.batch_item(1).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0, 2], vec![]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn pad_then_crop_round_trips(
            h in 1usize..6, w in 1usize..6, c in 1usize..3,
            t in 0usize..3, b in 0usize..3, l in 0usize..3, rr in 0usize..3,
            seed in 0u64..1000,
        ) {
            let x = Tensor::<f32>::randn(&[2, h, w, c], 1.0, &mut rng(seed));
            let p = pad2d(&x, t, b, l, rr, 7.5).unwrap();
            proptest::prop_assert_eq!(p.shape(), &[2, h + t + b, w + l + rr, c]);
            let back = crop2d(&p, t, l, h, w).unwrap();
            proptest::prop_assert_eq!(back, x);
        }
    }
}
