//! Dense channel-major tensors and the elementwise operators the network needs.
//!
//! Every operator is generic over [`Real`] so the same code path runs in `f32`
//! for training/inference and in `f64` for finite-difference checks.

use std::fmt;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point scalar usable as tensor storage.
pub trait Real: Float + Default + Sum + Send + Sync + fmt::Debug + fmt::Display + 'static {
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// C×H×W array stored channel-major, then row, then column.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

/// The `f32` tensor that carries images and feature maps.
pub type ImageTensor = Tensor<f32>;

impl<T: Real> Tensor<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, T::zero())
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        let shape = Shape::new(channels, height, width);
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(channels, height, width);
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "buffer of {} values does not fill a {shape} tensor",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let shape = Shape::new(channels, height, width);
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.channels(), self.height(), self.width())
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.shape.channels
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.shape.height
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.shape.width
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.shape.plane();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.shape.plane();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub(crate) fn ensure_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{what}: {} vs {}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.ensure_same_shape(other, "add")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: T) {
        for v in &mut self.data {
            *v = *v * k;
        }
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v.as_f64()).sum::<f64>() / self.data.len() as f64
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

pub fn activation<T: Real>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => input.map(|v| v.max(T::zero())),
        Activation::Tanh => input.map(|v| v.tanh()),
    }
}

/// Multiplies `grad_out` by the activation derivative evaluated at the forward input.
pub fn activation_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>, kind: Activation) -> Result<Tensor<T>> {
    input.ensure_same_shape(grad_out, "activation backward")?;
    let data = input
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&x, &g)| match kind {
            Activation::Relu => {
                if x > T::zero() {
                    g
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                g * (T::one() - t * t)
            }
        })
        .collect();
    Ok(Tensor {
        shape: input.shape,
        data,
    })
}

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::shape(format!(
            "concat needs equal spatial dims: {} vs {}",
            a.shape, b.shape
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Ok(Tensor {
        shape: Shape::new(a.channels() + b.channels(), a.height(), a.width()),
        data,
    })
}

/// Adjoint of [`concat_channels`]: the first `at` channels and the rest.
pub fn split_channels<T: Real>(t: &Tensor<T>, at: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    if at > t.channels() {
        return Err(Error::shape(format!("cannot split {} at channel {at}", t.shape)));
    }
    let cut = at * t.shape.plane();
    let (h, w) = (t.height(), t.width());
    Ok((
        Tensor {
            shape: Shape::new(at, h, w),
            data: t.data[..cut].to_vec(),
        },
        Tensor {
            shape: Shape::new(t.channels() - at, h, w),
            data: t.data[cut..].to_vec(),
        },
    ))
}

/// 2×2 stride-2 max pooling; odd trailing rows/columns are dropped.
/// Returns the pooled tensor and, per output element, the flat input index it came from.
pub fn max_pool2<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = (input.channels(), input.height() / 2, input.width() / 2);
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "max pool needs at least 2x2 spatial input, got {}",
            input.shape
        )));
    }
    let mut out = Tensor::zeros(c, h, w);
    let mut arg = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut best = input.index(ch, 2 * y, 2 * x);
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = input.index(ch, 2 * y + dy, 2 * x + dx);
                    if input.data[i] > input.data[best] {
                        best = i;
                    }
                }
                out.set(ch, y, x, input.data[best]);
                arg.push(best);
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool2_backward<T: Real>(input_shape: Shape, argmax: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape(format!(
            "pool gradient of {} values for {} pooled outputs",
            grad_out.len(),
            argmax.len()
        )));
    }
    let mut g = Tensor::zeros(input_shape.channels, input_shape.height, input_shape.width);
    for (&i, &v) in argmax.iter().zip(&grad_out.data) {
        g.data[i] = g.data[i] + v;
    }
    Ok(g)
}
