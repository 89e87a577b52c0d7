//! Dense 4-D tensors in (batch, channel, height, width) layout.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftNum;

use crate::error::{Error, Result};

/// Element type tag, also used as the on-disk dtype tag in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

/// Floating point element type. Implemented for `f32` (default compute) and `f64`
/// (gradient checks).
pub trait Real:
    Float + FromPrimitive + FftNum + Default + Debug + Display + Send + Sync + Sum + 'static
{
    const DTYPE: DType;

    /// `c = alpha * op(a) * op(b) + beta * c`, all row-major. `op(a)` is m×k, `op(b)` is k×n.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );

    /// Cached per-thread FFT plan of length `len`.
    fn fft_plan(len: usize, inverse: bool) -> std::sync::Arc<dyn rustfft::Fft<Self>>;

    fn to_le_bytes_into(self, out: &mut Vec<u8>);
    fn from_le_slice(bytes: &[u8]) -> Self;

    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

macro_rules! impl_real {
    ($t:ty, $tag:expr, $gemm:path) => {
        impl Real for $t {
            const DTYPE: DType = $tag;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: the slices are at least as long as the strided extents above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
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

            fn fft_plan(len: usize, inverse: bool) -> std::sync::Arc<dyn rustfft::Fft<Self>> {
                thread_local! {
                    static PLANNER: std::cell::RefCell<rustfft::FftPlanner<$t>> =
                        std::cell::RefCell::new(rustfft::FftPlanner::new());
                }
                PLANNER.with(|p| {
                    let mut p = p.borrow_mut();
                    if inverse {
                        p.plan_fft_inverse(len)
                    } else {
                        p.plan_fft_forward(len)
                    }
                })
            }

            fn to_le_bytes_into(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn from_le_slice(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(bytes);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_real!(f32, DType::F32, matrixmultiply::sgemm);
impl_real!(f64, DType::F64, matrixmultiply::dgemm);

pub type Shape = [usize; 4];

pub fn numel(shape: Shape) -> usize {
    shape.iter().product()
}

/// Dense (batch, channel, height, width) array with contiguous row-major storage.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

pub type Tensor4 = Tensor<f32>;

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; numel(shape)],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(Error::shape(
                "tensor",
                format!("{} elements for shape {:?}", data.len(), shape),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: Shape, data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&x| T::c(x)).collect())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    /// Standard normal samples scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::c(z * std)
            })
            .collect();
        Self { shape, data }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| T::c(lo + (hi - lo) * rng.random::<f64>()))
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn bytes(&self) -> usize {
        self.data.len() * T::DTYPE.size()
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

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(b, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.index(b, c, h, w);
        self.data[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs().f64()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|x| x.f64()).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len().max(1) as f64
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
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

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|x| U::c(x.f64())).collect(),
        }
    }

    /// Largest absolute difference divided by the largest magnitude of `reference`.
    pub fn rel_linf(&self, reference: &Self) -> f64 {
        assert_eq!(self.shape, reference.shape);
        let diff = self
            .data
            .iter()
            .zip(&reference.data)
            .fold(0.0f64, |m, (a, b)| m.max((a.f64() - b.f64()).abs()));
        diff / reference.max_abs().max(1e-30)
    }

    /// Copy of batch items `[start, start + len)`.
    pub fn batch_slice(&self, start: usize, len: usize) -> Self {
        let per = numel([1, self.shape[1], self.shape[2], self.shape[3]]);
        Self {
            shape: [len, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[start * per..(start + len) * per].to_vec(),
        }
    }

    /// Stack same-shaped tensors along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "empty list"))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.len()).sum());
        let mut b = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", t.shape, first.shape),
                ));
            }
            b += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Self {
            shape: [b, c, h, w],
            data,
        })
    }

    /// Spatial crop `[y, y + h) × [x, x + w)` on every batch item and channel.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        let [b, c, ih, iw] = self.shape;
        if y + h > ih || x + w > iw {
            return Err(Error::shape(
                "crop",
                format!("({y},{x},{h},{w}) outside {ih}x{iw}"),
            ));
        }
        let mut data = Vec::with_capacity(b * c * h * w);
        for bc in 0..b * c {
            for r in 0..h {
                let start = (bc * ih + y + r) * iw + x;
                data.extend_from_slice(&self.data[start..start + w]);
            }
        }
        Ok(Self {
            shape: [b, c, h, w],
            data,
        })
    }

    /// Reflect-pad bottom and right edges to the requested size (no edge repeat).
    pub fn reflect_pad_to(&self, h: usize, w: usize) -> Result<Self> {
        let [b, c, ih, iw] = self.shape;
        if h < ih || w < iw || (h > ih && ih < 2) || (w > iw && iw < 2) {
            return Err(Error::shape(
                "reflect_pad",
                format!("{ih}x{iw} -> {h}x{w}"),
            ));
        }
        let reflect = |i: usize, n: usize| -> usize {
            if i < n {
                return i;
            }
            let period = 2 * (n - 1);
            let m = i % period;
            if m < n {
                m
            } else {
                period - m
            }
        };
        let mut out = Self::zeros([b, c, h, w]);
        for bc in 0..b * c {
            for r in 0..h {
                let sr = reflect(r, ih);
                for col in 0..w {
                    let sc = reflect(col, iw);
                    out.data[(bc * h + r) * w + col] = self.data[(bc * ih + sr) * iw + sc];
                }
            }
        }
        Ok(out)
    }

    /// Reverse the width (and optionally height) axis.
    pub fn flip(&self, horizontal: bool, vertical: bool) -> Self {
        let [b, c, h, w] = self.shape;
        let mut out = self.clone();
        for bc in 0..b * c {
            for r in 0..h {
                let sr = if vertical { h - 1 - r } else { r };
                for col in 0..w {
                    let sc = if horizontal { w - 1 - col } else { col };
                    out.data[(bc * h + r) * w + col] = self.data[(bc * h + sr) * w + sc];
                }
            }
        }
        out
    }
}
