//! Dense 4-D tensors in batch-channel-height-width order.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Floating point element type. Implemented for `f32` and `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Serialize
    + for<'de> Deserialize<'de>
    + 'static
{
    const NAME: &'static str;

    fn of(v: f64) -> Self;

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `c = alpha * a * b + beta * c` on strided row/column major views.
    ///
    /// # Safety
    /// The strides must describe views that lie within the backing slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    fn of(v: f64) -> Self {
        v
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    fn of(v: f64) -> Self {
        v as f32
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Layout of one operand passed to [`gemm`].
#[derive(Debug, Clone, Copy)]
pub(crate) enum Op {
    /// Row-major as stored.
    N,
    /// Transposed view of a row-major buffer.
    T,
}

/// `c (m x n) = a (m x k) * b (k x n) + beta * c`, all buffers row-major.
/// `ta`/`tb` select a transposed view of a stored `k x m` / `n x k` matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: Op,
    b: &[T],
    tb: Op,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = match ta {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    // SAFETY: the asserts above bound every strided view by its slice.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Tensor dimensions `(n, c, h, w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(shape_err!("zero-sized dimension in {self}"));
        }
        Ok(())
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one spatial map.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements in one sample.
    pub fn sample(&self) -> usize {
        self.c * self.h * self.w
    }
}

impl Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

impl From<(usize, usize, usize, usize)> for Shape {
    fn from((n, c, h, w): (usize, usize, usize, usize)) -> Self {
        Self::new(n, c, h, w)
    }
}

/// Dense tensor with data stored row-major in `n -> c -> h -> w` order.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Tensor<T = f64> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: impl Into<Shape>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Result<Self> {
        let shape = shape.into();
        shape.validate()?;
        Ok(Self {
            shape,
            data: vec![value; shape.numel()],
        })
    }

    pub fn from_vec(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        shape.validate()?;
        if data.len() != shape.numel() {
            return Err(shape_err!(
                "data length {} does not match shape {shape}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    /// Build from `f64` values, converting to `T`.
    pub fn from_f64(shape: impl Into<Shape>, data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    /// Zero tensor of the same shape.
    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape,
            data: vec![T::zero(); self.data.len()],
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, y: usize, x: usize) -> usize {
        let s = &self.shape;
        ((i * s.c + j) * s.h + y) * s.w + x
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, y: usize, x: usize) -> T {
        self.data[self.offset(i, j, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize, y: usize, x: usize) -> &mut T {
        let o = self.offset(i, j, y, x);
        &mut self.data[o]
    }

    /// The `h x w` map of sample `i`, channel `j`.
    pub fn plane(&self, i: usize, j: usize) -> &[T] {
        let p = self.shape.plane();
        let o = (i * self.shape.c + j) * p;
        &self.data[o..o + p]
    }

    pub fn plane_mut(&mut self, i: usize, j: usize) -> &mut [T] {
        let p = self.shape.plane();
        let o = (i * self.shape.c + j) * p;
        &mut self.data[o..o + p]
    }

    /// All channels of sample `i`.
    pub fn sample(&self, i: usize) -> &[T] {
        let s = self.shape.sample();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn reshape(self, shape: impl Into<Shape>) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    fn check_same(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "{what}: shape mismatch {} vs {}",
                self.shape,
                other.shape
            ));
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same(other, "elementwise op")?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&a| f(a)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|a| a * k)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// In-place `self += k * other`.
    pub fn axpy(&mut self, k: T, other: &Self) -> Result<()> {
        self.check_same(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    /// Sum of all entries, accumulated left to right.
    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    /// Zero border of `pad` pixels on every side of each map.
    pub fn pad2d(&self, pad: usize) -> Self {
        if pad == 0 {
            return self.clone();
        }
        let s = self.shape;
        let out_shape = Shape::new(s.n, s.c, s.h + 2 * pad, s.w + 2 * pad);
        let mut data = vec![T::zero(); out_shape.numel()];
        for i in 0..s.n {
            for j in 0..s.c {
                let src = self.plane(i, j);
                let base = (i * s.c + j) * out_shape.plane();
                for y in 0..s.h {
                    let dst = base + (y + pad) * out_shape.w + pad;
                    data[dst..dst + s.w].copy_from_slice(&src[y * s.w..(y + 1) * s.w]);
                }
            }
        }
        Self {
            shape: out_shape,
            data,
        }
    }

    /// Window of size `h x w` starting at `(top, left)` in every map.
    pub fn crop2d(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        let s = self.shape;
        if h == 0 || w == 0 || top + h > s.h || left + w > s.w {
            return Err(shape_err!(
                "crop {h}x{w} at ({top},{left}) outside {}x{}",
                s.h,
                s.w
            ));
        }
        let out_shape = Shape::new(s.n, s.c, h, w);
        let mut data = Vec::with_capacity(out_shape.numel());
        for i in 0..s.n {
            for j in 0..s.c {
                let src = self.plane(i, j);
                for y in top..top + h {
                    data.extend_from_slice(&src[y * s.w + left..y * s.w + left + w]);
                }
            }
        }
        Ok(Self {
            shape: out_shape,
            data,
        })
    }

    /// Per-channel mean and biased variance over `(n, h, w)`.
    pub fn moments(&self) -> (Vec<T>, Vec<T>) {
        let s = self.shape;
        let count = T::of((s.n * s.plane()) as f64);
        let mut mean = vec![T::zero(); s.c];
        for i in 0..s.n {
            for (j, m) in mean.iter_mut().enumerate() {
                for &v in self.plane(i, j) {
                    *m += v;
                }
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        let mut var = vec![T::zero(); s.c];
        for i in 0..s.n {
            for j in 0..s.c {
                let mu = mean[j];
                for &v in self.plane(i, j) {
                    let d = v - mu;
                    var[j] += d * d;
                }
            }
        }
        for v in &mut var {
            *v /= count;
        }
        (mean, var)
    }

    /// Copy of channels `start..start + len`.
    pub fn channels(&self, start: usize, len: usize) -> Result<Self> {
        let s = self.shape;
        if len == 0 || start + len > s.c {
            return Err(shape_err!(
                "channel slice {start}+{len} outside {} channels",
                s.c
            ));
        }
        let p = s.plane();
        let mut data = Vec::with_capacity(s.n * len * p);
        for i in 0..s.n {
            let o = (i * s.c + start) * p;
            data.extend_from_slice(&self.data[o..o + len * p]);
        }
        Ok(Self {
            shape: Shape::new(s.n, len, s.h, s.w),
            data,
        })
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let s0 = first.shape;
        let mut c = 0;
        for p in parts {
            let s = p.shape;
            if s.n != s0.n || s.h != s0.h || s.w != s0.w {
                return Err(shape_err!("concat mismatch {} vs {}", s, s0));
            }
            c += s.c;
        }
        let shape = Shape::new(s0.n, c, s0.h, s0.w);
        let mut data = Vec::with_capacity(shape.numel());
        for i in 0..s0.n {
            for p in parts {
                data.extend_from_slice(p.sample(i));
            }
        }
        Ok(Self { shape, data })
    }

    /// Samples `idx` gathered into a new batch.
    pub fn gather(&self, idx: &[usize]) -> Result<Self> {
        let s = self.shape;
        let mut data = Vec::with_capacity(idx.len() * s.sample());
        for &i in idx {
            if i >= s.n {
                return Err(shape_err!("sample {i} outside batch of {}", s.n));
            }
            data.extend_from_slice(self.sample(i));
        }
        Self::from_vec(Shape::new(idx.len(), s.c, s.h, s.w), data)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().f64())
            .fold(0.0, f64::max))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs().f64()).fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}
