//! Dense `(N, C, H, W)` tensors and the numerical primitives built on them.
//!
//! All storage is row-major with the width axis fastest. Convolutions are
//! stride 1 with zero "same" padding; the kernel anchor is the kernel centre.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Floating point element type of a tensor.
pub trait Scalar:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    /// Short dtype name used in reports.
    const NAME: &'static str;

    fn of(v: f64) -> Self;

    fn f64(self) -> f64;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

/// Shape of a 4-D tensor as `(batch, channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements per batch item.
    pub fn item(&self) -> usize {
        self.c * self.h * self.w
    }
}

impl Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::dim("Tensor::from_vec", shape.len(), data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.len() != self.data.len() {
            return Err(Error::dim("Tensor::reshape", self.shape, shape));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// Copies batch items `range` into a new tensor.
    pub fn batch_slice(&self, items: &[usize]) -> Self {
        let item = self.shape.item();
        let mut data = Vec::with_capacity(items.len() * item);
        for &i in items {
            data.extend_from_slice(&self.data[i * item..(i + 1) * item]);
        }
        Tensor {
            shape: Shape::new(items.len(), self.shape.c, self.shape.h, self.shape.w),
            data,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// A centre-anchored 2-D kernel with odd side lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2D<T> {
    kh: usize,
    kw: usize,
    values: Vec<T>,
}

impl<T: Scalar> Kernel2D<T> {
    pub fn new(kh: usize, kw: usize, values: Vec<T>) -> Result<Self> {
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Parameter(format!(
                "kernel sides must be odd, got {kh}x{kw}"
            )));
        }
        if values.len() != kh * kw {
            return Err(Error::dim("Kernel2D::new", kh * kw, values.len()));
        }
        Ok(Kernel2D { kh, kw, values })
    }

    pub fn zeros(kh: usize, kw: usize) -> Self {
        assert!(kh % 2 == 1 && kw % 2 == 1, "kernel sides must be odd");
        Kernel2D {
            kh,
            kw,
            values: vec![T::zero(); kh * kw],
        }
    }

    pub fn kh(&self) -> usize {
        self.kh
    }

    pub fn kw(&self) -> usize {
        self.kw
    }

    pub fn anchor(&self) -> (usize, usize) {
        ((self.kh - 1) / 2, (self.kw - 1) / 2)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> T {
        self.values[y * self.kw + x]
    }

    /// Value at an offset relative to the anchor, zero outside the window.
    pub fn at_offset(&self, dy: isize, dx: isize) -> T {
        let (ay, ax) = self.anchor();
        let y = ay as isize + dy;
        let x = ax as isize + dx;
        if y < 0 || x < 0 || y >= self.kh as isize || x >= self.kw as isize {
            T::zero()
        } else {
            self.at(y as usize, x as usize)
        }
    }

    /// 180 degree rotation about the anchor.
    pub fn rotated(&self) -> Self {
        let mut values = self.values.clone();
        values.reverse();
        Kernel2D {
            kh: self.kh,
            kw: self.kw,
            values,
        }
    }

    /// Zero-pads (or must already fit) to a larger odd canvas, keeping the anchor centred.
    pub fn padded_to(&self, kh: usize, kw: usize) -> Self {
        assert!(kh >= self.kh && kw >= self.kw && kh % 2 == 1 && kw % 2 == 1);
        let oy = (kh - self.kh) / 2;
        let ox = (kw - self.kw) / 2;
        let mut out = Self::zeros(kh, kw);
        for y in 0..self.kh {
            for x in 0..self.kw {
                out.values[(y + oy) * kw + x + ox] = self.at(y, x);
            }
        }
        out
    }

    pub fn sum(&self) -> T {
        self.values.iter().copied().sum()
    }
}

/// Kernels for every `(out_channel, in_channel)` pair, all of one size.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank<T> {
    out_channels: usize,
    in_channels: usize,
    kh: usize,
    kw: usize,
    data: Vec<T>,
}

impl<T: Scalar> KernelBank<T> {
    pub fn zeros(out_channels: usize, in_channels: usize, kh: usize, kw: usize) -> Self {
        assert!(kh % 2 == 1 && kw % 2 == 1, "kernel sides must be odd");
        KernelBank {
            out_channels,
            in_channels,
            kh,
            kw,
            data: vec![T::zero(); out_channels * in_channels * kh * kw],
        }
    }

    pub fn from_vec(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        data: Vec<T>,
    ) -> Result<Self> {
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Parameter(format!(
                "kernel sides must be odd, got {kh}x{kw}"
            )));
        }
        let expected = out_channels * in_channels * kh * kw;
        if data.len() != expected {
            return Err(Error::dim("KernelBank::from_vec", expected, data.len()));
        }
        Ok(KernelBank {
            out_channels,
            in_channels,
            kh,
            kw,
            data,
        })
    }

    pub fn from_kernels(
        out_channels: usize,
        in_channels: usize,
        kernels: &[Kernel2D<T>],
    ) -> Result<Self> {
        if kernels.len() != out_channels * in_channels {
            return Err(Error::dim(
                "KernelBank::from_kernels",
                out_channels * in_channels,
                kernels.len(),
            ));
        }
        let (kh, kw) = kernels
            .first()
            .map(|k| (k.kh, k.kw))
            .ok_or_else(|| Error::Parameter("empty kernel list".into()))?;
        let mut data = Vec::with_capacity(kernels.len() * kh * kw);
        for k in kernels {
            if k.kh != kh || k.kw != kw {
                return Err(Error::dim(
                    "KernelBank::from_kernels",
                    format!("{kh}x{kw}"),
                    format!("{}x{}", k.kh, k.kw),
                ));
            }
            data.extend_from_slice(&k.values);
        }
        Ok(KernelBank {
            out_channels,
            in_channels,
            kh,
            kw,
            data,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kh(&self) -> usize {
        self.kh
    }

    pub fn kw(&self) -> usize {
        self.kw
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn kernel(&self, out: usize, inp: usize) -> &[T] {
        let k = self.kh * self.kw;
        let start = (out * self.in_channels + inp) * k;
        &self.data[start..start + k]
    }

    pub fn kernel_mut(&mut self, out: usize, inp: usize) -> &mut [T] {
        let k = self.kh * self.kw;
        let start = (out * self.in_channels + inp) * k;
        &mut self.data[start..start + k]
    }

    pub fn to_kernel(&self, out: usize, inp: usize) -> Kernel2D<T> {
        Kernel2D {
            kh: self.kh,
            kw: self.kw,
            values: self.kernel(out, inp).to_vec(),
        }
    }

    /// Every kernel rotated by 180 degrees.
    pub fn rotated(&self) -> Self {
        let k = self.kh * self.kw;
        let mut data = self.data.clone();
        for chunk in data.chunks_mut(k) {
            chunk.reverse();
        }
        KernelBank { data, ..*self }
    }

    /// Swaps the in/out channel roles (kernels themselves are untouched).
    pub fn transposed(&self) -> Self {
        let mut out = Self::zeros(self.in_channels, self.out_channels, self.kh, self.kw);
        for o in 0..self.out_channels {
            for i in 0..self.in_channels {
                out.kernel_mut(i, o).copy_from_slice(self.kernel(o, i));
            }
        }
        out
    }
}

/// `out[i] += k * src[i]` over equal-length slices.
#[inline]
pub(crate) fn axpy<T: Scalar>(out: &mut [T], k: T, src: &[T]) {
    for (o, &s) in out.iter_mut().zip(src) {
        *o += k * s;
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Accumulates `k * src` shifted by `(oy, ox)` into `out`:
/// `out[y, x] += k * src[y + oy, x + ox]` wherever the source is in range.
/// Both planes have the same `h x w` extent.
#[inline]
pub(crate) fn shifted_axpy<T: Scalar>(
    out: &mut [T],
    src: &[T],
    h: usize,
    w: usize,
    oy: isize,
    ox: isize,
    k: T,
) {
    let (y0, y1) = valid_range(h, oy);
    let (x0, x1) = valid_range(w, ox);
    if y0 >= y1 || x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + oy) as usize;
        let dst = &mut out[y * w + x0..y * w + x1];
        let s0 = (x0 as isize + ox) as usize;
        axpy(dst, k, &src[sy * w + s0..sy * w + s0 + (x1 - x0)]);
    }
}

/// `sum_{y,x} a[y, x] * b[y + oy, x + ox]` over the in-range part.
#[inline]
pub(crate) fn shifted_dot<T: Scalar>(a: &[T], b: &[T], h: usize, w: usize, oy: isize, ox: isize) -> T {
    let (y0, y1) = valid_range(h, oy);
    let (x0, x1) = valid_range(w, ox);
    let mut acc = T::zero();
    if y0 >= y1 || x0 >= x1 {
        return acc;
    }
    for y in y0..y1 {
        let sy = (y as isize + oy) as usize;
        let s0 = (x0 as isize + ox) as usize;
        acc += dot(&a[y * w + x0..y * w + x1], &b[sy * w + s0..sy * w + s0 + (x1 - x0)]);
    }
    acc
}

/// Range of `i` in `0..len` such that `i + off` is also in `0..len`.
#[inline]
fn valid_range(len: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off).clamp(0, len as isize) as usize;
    (lo.min(len), hi)
}

/// Stride-1, zero-"same"-padded 2-D correlation:
/// `out[n,i,y,x] = bias[i] + sum_{s,dy,dx} k[i,s][dy,dx] * in[n,s,y+dy-ay,x+dx-ax]`.
///
/// Output planes are computed independently in a fixed `(s, dy, dx)` order, so
/// the result does not depend on how rayon partitions the work.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernels: &KernelBank<T>, bias: &[T]) -> Result<Tensor<T>> {
    let sh = input.shape();
    if kernels.in_channels() != sh.c {
        return Err(Error::dim("conv2d input channels", kernels.in_channels(), sh.c));
    }
    if bias.len() != kernels.out_channels() {
        return Err(Error::dim("conv2d bias", kernels.out_channels(), bias.len()));
    }
    let out_shape = Shape::new(sh.n, kernels.out_channels(), sh.h, sh.w);
    let mut out = Tensor::zeros(out_shape);
    let plane = sh.plane();
    if plane == 0 {
        return Ok(out);
    }
    let (kh, kw) = (kernels.kh(), kernels.kw());
    let (ay, ax) = ((kh / 2) as isize, (kw / 2) as isize);
    let f = kernels.out_channels();
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, dst)| {
            let (n, i) = (idx / f, idx % f);
            dst.fill(bias[i]);
            for s in 0..sh.c {
                let src = input.plane(n, s);
                let k = kernels.kernel(i, s);
                for dy in 0..kh {
                    for dx in 0..kw {
                        shifted_axpy(
                            dst,
                            src,
                            sh.h,
                            sh.w,
                            dy as isize - ay,
                            dx as isize - ax,
                            k[dy * kw + dx],
                        );
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, kernels and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &KernelBank<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, KernelBank<T>, Vec<T>)> {
    let sh = input.shape();
    let gs = grad_out.shape();
    if gs != Shape::new(sh.n, kernels.out_channels(), sh.h, sh.w) {
        return Err(Error::dim(
            "conv2d_backward grad_out",
            Shape::new(sh.n, kernels.out_channels(), sh.h, sh.w),
            gs,
        ));
    }
    let f = kernels.out_channels();
    // d in[n,s,p] = sum_i sum_d k[i,s][d] g[n,i,p-(d-a)]: a correlation with the
    // rotated, channel-transposed bank.
    let back = kernels.transposed().rotated();
    let grad_in = conv2d(grad_out, &back, &vec![T::zero(); sh.c])?;
    let grad_k = kernel_grad(input, grad_out, kernels.kh(), kernels.kw(), false)?;
    let grad_b = (0..f)
        .map(|i| {
            let mut acc = T::zero();
            for n in 0..sh.n {
                acc += grad_out.plane(n, i).iter().copied().sum::<T>();
            }
            acc
        })
        .collect();
    Ok((grad_in, grad_k, grad_b))
}

/// Gradient of a correlation (or, with `convolution = true`, a true
/// convolution) with respect to its `kh x kw` kernels:
/// correlation: `dk[i,s][d] = sum_{n,p} g[n,i,p] * in[n,s,p+d-a]`,
/// convolution: `dk[i,s][u] = sum_{n,p} g[n,i,p] * in[n,s,p-u]` with `u` centred.
pub fn kernel_grad<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    kh: usize,
    kw: usize,
    convolution: bool,
) -> Result<KernelBank<T>> {
    let sh = input.shape();
    let gs = grad_out.shape();
    if gs.n != sh.n || gs.h != sh.h || gs.w != sh.w {
        return Err(Error::dim("kernel_grad", sh, gs));
    }
    let f = gs.c;
    let mut bank = KernelBank::zeros(f, sh.c, kh, kw);
    let ksz = kh * kw;
    let (ay, ax) = ((kh / 2) as isize, (kw / 2) as isize);
    bank.data_mut()
        .par_chunks_mut(ksz * sh.c)
        .enumerate()
        .for_each(|(i, chunk)| {
            for s in 0..sh.c {
                let dst = &mut chunk[s * ksz..(s + 1) * ksz];
                for dy in 0..kh {
                    for dx in 0..kw {
                        let (mut oy, mut ox) = (dy as isize - ay, dx as isize - ax);
                        if convolution {
                            oy = -oy;
                            ox = -ox;
                        }
                        let mut acc = T::zero();
                        for n in 0..sh.n {
                            acc += shifted_dot(grad_out.plane(n, i), input.plane(n, s), sh.h, sh.w, oy, ox);
                        }
                        dst[dy * kw + dx] = acc;
                    }
                }
            }
        });
    Ok(bank)
}

fn check_same<T: Scalar>(context: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(context, a.shape(), b.shape()));
    }
    Ok(())
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: x.shape,
        data: x.data.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
    }
}

/// Masks `grad` where the pre-activation is `<= 0` (the gradient at exactly 0 is 0).
pub fn relu_backward<T: Scalar>(grad: &Tensor<T>, pre: &Tensor<T>) -> Result<Tensor<T>> {
    check_same("relu_backward", grad, pre)?;
    Ok(Tensor {
        shape: grad.shape,
        data: grad
            .data
            .iter()
            .zip(&pre.data)
            .map(|(&g, &p)| if p > T::zero() { g } else { T::zero() })
            .collect(),
    })
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same("add", a, b)?;
    Ok(Tensor {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect(),
    })
}

pub fn scale<T: Scalar>(a: &Tensor<T>, k: T) -> Tensor<T> {
    Tensor {
        shape: a.shape,
        data: a.data.iter().map(|&x| x * k).collect(),
    }
}

pub fn sum<T: Scalar>(a: &Tensor<T>) -> T {
    a.data.iter().copied().sum()
}

/// Largest element, or `None` for an empty tensor.
pub fn max<T: Scalar>(a: &Tensor<T>) -> Option<T> {
    a.data.iter().copied().reduce(|m, v| if v > m { v } else { m })
}

/// Flat index of the first maximal element.
pub fn argmax<T: Scalar>(values: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    fn random_bank(rng: &mut ChaCha8Rng, f: usize, s: usize, k: usize) -> KernelBank<f64> {
        let data = (0..f * s * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        KernelBank::from_vec(f, s, k, k, data).unwrap()
    }

    /// Six nested loops straight from the definition.
    fn conv_oracle(input: &Tensor<f64>, k: &KernelBank<f64>, bias: &[f64]) -> Tensor<f64> {
        let sh = input.shape();
        let (kh, kw) = (k.kh(), k.kw());
        let (ay, ax) = ((kh / 2) as isize, (kw / 2) as isize);
        Tensor::from_fn(Shape::new(sh.n, k.out_channels(), sh.h, sh.w), |n, i, y, x| {
            let mut acc = bias[i];
            for s in 0..sh.c {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let yy = y as isize + dy as isize - ay;
                        let xx = x as isize + dx as isize - ax;
                        if yy >= 0 && xx >= 0 && (yy as usize) < sh.h && (xx as usize) < sh.w {
                            acc += k.kernel(i, s)[dy * kw + dx] * input.get(n, s, yy as usize, xx as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn box_sum_with_zero_padding() {
        let input = Tensor::full(Shape::new(1, 1, 3, 3), 1.0f64);
        let k = KernelBank::from_vec(1, 1, 3, 3, vec![1.0; 9]).unwrap();
        let out = conv2d(&input, &k, &[0.0]).unwrap();
        assert_eq!(out.get(0, 0, 1, 1), 9.0);
        assert_eq!(out.get(0, 0, 0, 0), 4.0);
        assert_eq!(out.get(0, 0, 2, 2), 4.0);
        assert_eq!(out.get(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn identity_kernel_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, Shape::new(2, 1, 5, 7));
        let k = KernelBank::from_vec(1, 1, 1, 1, vec![1.0]).unwrap();
        assert_eq!(conv2d(&x, &k, &[0.0]).unwrap(), x);
    }

    #[test]
    fn matches_loop_oracle_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(&mut rng, Shape::new(2, 3, 8, 8));
        let k = random_bank(&mut rng, 4, 3, 5);
        let bias: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = conv2d(&x, &k, &bias).unwrap();
        let want = conv_oracle(&x, &k, &bias);
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn matches_loop_oracle_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor(&mut rng, Shape::new(1, 4, 8, 8));
        let k = random_bank(&mut rng, 4, 4, 3);
        let bias = vec![0.25; 4];
        let want = conv_oracle(&x, &k, &bias);
        let bank32 = KernelBank::from_vec(4, 4, 3, 3, k.data().iter().map(|&v| v as f32).collect()).unwrap();
        let got = conv2d(&x.cast::<f32>(), &bank32, &[0.25f32; 4]).unwrap();
        assert!(got.cast::<f64>().max_abs_diff(&want) < 1e-5);
    }

    #[test]
    fn channel_mismatch_is_a_dimension_error() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 4, 4));
        let k = KernelBank::zeros(1, 3, 3, 3);
        assert!(matches!(conv2d(&x, &k, &[0.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn one_hot_kernel_translates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, Shape::new(1, 1, 6, 6));
        let mut k = KernelBank::zeros(1, 1, 5, 5);
        // offset (dy, dx) = (3, 0) relative to the 5x5 window => sample y + 1, x - 2
        k.kernel_mut(0, 0)[3 * 5] = 1.0;
        let out = conv2d(&x, &k, &[0.0]).unwrap();
        for y in 0..6 {
            for xx in 0..6 {
                let (sy, sx) = (y as isize + 1, xx as isize - 2);
                let want = if sy < 6 && sx >= 0 { x.get(0, 0, sy as usize, sx as usize) } else { 0.0 };
                assert_eq!(out.get(0, 0, y, xx), want);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(&mut rng, Shape::new(2, 2, 5, 5));
        let k = random_bank(&mut rng, 3, 2, 3);
        let r = random_tensor(&mut rng, Shape::new(2, 3, 5, 5));
        let loss = |x: &Tensor<f64>, k: &KernelBank<f64>| -> f64 {
            let out = conv2d(x, k, &[0.1, 0.2, 0.3]).unwrap();
            out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let (gi, gk, gb) = conv2d_backward(&x, &k, &r).unwrap();
        let h = 1e-5;
        for j in 0..x.data().len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[j] += h;
            m.data_mut()[j] -= h;
            let fd = (loss(&p, &k) - loss(&m, &k)) / (2.0 * h);
            assert!((fd - gi.data()[j]).abs() < 1e-8, "input {j}");
        }
        for j in 0..k.data().len() {
            let (mut p, mut m) = (k.clone(), k.clone());
            p.data_mut()[j] += h;
            m.data_mut()[j] -= h;
            let fd = (loss(&x, &p) - loss(&x, &m)) / (2.0 * h);
            assert!((fd - gk.data()[j]).abs() < 1e-8, "kernel {j}");
        }
        for i in 0..3 {
            let want: f64 = (0..2).map(|n| r.plane(n, i).iter().sum::<f64>()).sum();
            assert!((gb[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_family() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = Tensor::full(Shape::new(1, 1, 1, 3), 5.0);
        assert_eq!(relu_backward(&g, &x).unwrap().data(), &[0.0, 0.0, 5.0]);
        let ones = Tensor::full(Shape::new(2, 3, 2, 2), 1.0f64);
        assert_eq!(sum(&ones), 24.0);
        assert_eq!(max(&x), Some(2.0));
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), Some(1));
        assert_eq!(add(&x, &x).unwrap().data(), &[-2.0, 0.0, 4.0]);
        assert_eq!(scale(&x, 0.5).data(), &[-0.5, 0.0, 1.0]);
        assert!(add(&x, &ones).is_err());
    }

    proptest! {
        #[test]
        fn conv_is_linear(seed in 0u64..1000, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_tensor(&mut rng, Shape::new(1, 2, 6, 6));
            let b = random_tensor(&mut rng, Shape::new(1, 2, 6, 6));
            let k = random_bank(&mut rng, 2, 2, 3);
            let zero = [0.0, 0.0];
            let lhs = conv2d(&add(&scale(&a, alpha), &scale(&b, beta)).unwrap(), &k, &zero).unwrap();
            let rhs = add(
                &scale(&conv2d(&a, &k, &zero).unwrap(), alpha),
                &scale(&conv2d(&b, &k, &zero).unwrap(), beta),
            ).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        }

        #[test]
        fn conv_matches_oracle_on_random_shapes(
            seed in 0u64..1000, n in 1usize..3, c in 1usize..5, f in 1usize..5,
            h in 1usize..9, w in 1usize..9, k in prop::sample::select(vec![1usize, 3, 5]),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(&mut rng, Shape::new(n, c, h, w));
            let bank = random_bank(&mut rng, f, c, k);
            let bias: Vec<f64> = (0..f).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = conv2d(&x, &bank, &bias).unwrap();
            prop_assert!(got.max_abs_diff(&conv_oracle(&x, &bank, &bias)) < 1e-12);
        }
    }
}
