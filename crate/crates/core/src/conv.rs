//! Reference 3×3 / stride 1 / zero-pad 1 convolution with exact gradients.
//!
//! The convolution is evaluated as nine shifted matrix products over a
//! zero-padded copy of the input. Each output row is computed on the padded
//! width (W+2), so a tap `(dy, dx)` is just a constant offset into the padded
//! plane; the two wrap-around columns per row are discarded. All products and
//! sums are carried out in `f64` and rounded to `T` once at the end.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

/// Weights `[out][in][ky][kx]` and one bias per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub out_channels: usize,
    pub in_channels: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvLayer<T> {
    pub fn zeros(out_channels: usize, in_channels: usize) -> Self {
        ConvLayer {
            out_channels,
            in_channels,
            weight: vec![T::zero(); out_channels * in_channels * TAPS],
            bias: vec![T::zero(); out_channels],
        }
    }

    /// Weights drawn from `Normal(0, std)`, zero bias.
    pub fn normal<R: Rng>(out_channels: usize, in_channels: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let mut layer = Self::zeros(out_channels, in_channels);
        for w in &mut layer.weight {
            *w = T::lit(dist.sample(rng));
        }
        layer
    }

    #[inline]
    pub fn weight_index(&self, o: usize, c: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + c) * KERNEL + ky) * KERNEL + kx
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn macs_per_pixel(&self) -> u64 {
        (self.out_channels * self.in_channels * TAPS) as u64
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, KERNEL, KERNEL]
    }

    pub fn cast<U: Real>(&self) -> ConvLayer<U> {
        ConvLayer {
            out_channels: self.out_channels,
            in_channels: self.in_channels,
            weight: self.weight.iter().map(|v| U::lit(v.as_f64())).collect(),
            bias: self.bias.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.channels() != self.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got input {} (layer {}x{}x3x3)",
                self.in_channels,
                input.shape(),
                self.out_channels,
                self.in_channels
            )));
        }
        if input.height() == 0 || input.width() == 0 {
            return Err(Error::shape(format!("empty conv input {}", input.shape())));
        }
        Ok(())
    }

    fn weight_f64(&self) -> Vec<f64> {
        self.weight.iter().map(|v| v.as_f64()).collect()
    }
}

/// Zero-padded `f64` copy of a tensor, one (H+2)×(W+2) plane per channel.
struct Padded {
    data: Vec<f64>,
    plane: usize,
    row: usize,
}

impl Padded {
    fn zeros(channels: usize, height: usize, width: usize) -> Self {
        let row = width + 2;
        let plane = (height + 2) * row;
        Padded {
            data: vec![0.0; channels * plane],
            plane,
            row,
        }
    }

    fn from_tensor<T: Real>(t: &Tensor<T>) -> Self {
        let (h, w) = (t.height(), t.width());
        let mut p = Self::zeros(t.channels(), h, w);
        for c in 0..t.channels() {
            let src = t.plane(c);
            for y in 0..h {
                let dst = c * p.plane + (y + 1) * p.row + 1;
                for (d, s) in p.data[dst..dst + w].iter_mut().zip(&src[y * w..(y + 1) * w]) {
                    *d = s.as_f64();
                }
            }
        }
        p
    }

    #[inline]
    fn tap_offset(&self, tap: usize) -> usize {
        (tap / KERNEL) * self.row + tap % KERNEL
    }
}

/// Matrix view for `matrixmultiply::dgemm`: base offset and (row, col) strides.
#[derive(Clone, Copy)]
struct View {
    offset: usize,
    rs: usize,
    cs: usize,
}

impl View {
    fn extent(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs + 1
    }
}

/// `c[m×n] = beta·c + a[m×k]·b[k×n]` over bounds-checked slices.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], av: View, b: &[f64], bv: View, beta: f64, c: &mut [f64], cv: View) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(av.extent(m, k) <= a.len());
    assert!(bv.extent(k, n) <= b.len());
    assert!(cv.extent(m, n) <= c.len());
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// `out[o,y,x] = bias[o] + Σ_{c,dy,dx} w[o,c,dy,dx] · in_padded[c, y+dy, x+dx]`.
pub fn conv2d_forward<T: Real>(input: &Tensor<T>, layer: &ConvLayer<T>) -> Result<Tensor<T>> {
    layer.check_input(input)?;
    let (h, w) = (input.height(), input.width());
    let (cin, cout) = (layer.in_channels, layer.out_channels);
    let pad = Padded::from_tensor(input);
    let wts = layer.weight_f64();
    let ld = h * pad.row;
    let n = ld - 2;

    let mut acc = vec![0.0f64; cout * ld];
    for (o, row) in acc.chunks_exact_mut(ld).enumerate() {
        row.fill(layer.bias[o].as_f64());
    }
    for tap in 0..TAPS {
        gemm(
            cout,
            cin,
            n,
            &wts,
            View {
                offset: tap,
                rs: cin * TAPS,
                cs: TAPS,
            },
            &pad.data,
            View {
                offset: pad.tap_offset(tap),
                rs: pad.plane,
                cs: 1,
            },
            1.0,
            &mut acc,
            View {
                offset: 0,
                rs: ld,
                cs: 1,
            },
        );
    }

    let mut out = Tensor::zeros(cout, h, w);
    for o in 0..cout {
        let plane = out.plane_mut(o);
        for y in 0..h {
            let src = &acc[o * ld + y * pad.row..][..w];
            for (d, s) in plane[y * w..(y + 1) * w].iter_mut().zip(src) {
                *d = T::lit(*s);
            }
        }
    }
    Ok(out)
}

/// Gradients of `Σ grad_out ⊙ conv2d_forward(input, layer)`.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub layer: Option<ConvLayer<T>>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    layer: &ConvLayer<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, ConvLayer<T>)> {
    let g = conv2d_backward_select(input, layer, grad_out, true, true)?;
    Ok((g.input.unwrap(), g.layer.unwrap()))
}

/// Input gradient only; used where parameters are frozen.
pub fn conv2d_backward_input<T: Real>(
    input: &Tensor<T>,
    layer: &ConvLayer<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let g = conv2d_backward_select(input, layer, grad_out, true, false)?;
    Ok(g.input.unwrap())
}

pub fn conv2d_backward_select<T: Real>(
    input: &Tensor<T>,
    layer: &ConvLayer<T>,
    grad_out: &Tensor<T>,
    want_input: bool,
    want_params: bool,
) -> Result<ConvGrads<T>> {
    layer.check_input(input)?;
    let (h, w) = (input.height(), input.width());
    let (cin, cout) = (layer.in_channels, layer.out_channels);
    let expected = Shape::new(cout, h, w);
    if grad_out.shape() != expected {
        return Err(Error::shape(format!(
            "conv grad_out is {}, forward output is {expected}",
            grad_out.shape()
        )));
    }

    let row = w + 2;
    let ld = h * row;
    let n = ld - 2;
    // grad_out laid out on the padded width; the wrap-around columns stay zero.
    let mut gout = vec![0.0f64; cout * ld];
    for o in 0..cout {
        let src = grad_out.plane(o);
        for y in 0..h {
            let dst = &mut gout[o * ld + y * row..][..w];
            for (d, s) in dst.iter_mut().zip(&src[y * w..(y + 1) * w]) {
                *d = s.as_f64();
            }
        }
    }

    let layer_grad = if want_params {
        let pad = Padded::from_tensor(input);
        let mut gw = vec![0.0f64; layer.weight.len()];
        for tap in 0..TAPS {
            gemm(
                cout,
                n,
                cin,
                &gout,
                View {
                    offset: 0,
                    rs: ld,
                    cs: 1,
                },
                &pad.data,
                View {
                    offset: pad.tap_offset(tap),
                    rs: 1,
                    cs: pad.plane,
                },
                0.0,
                &mut gw,
                View {
                    offset: tap,
                    rs: cin * TAPS,
                    cs: TAPS,
                },
            );
        }
        let gb = (0..cout)
            .map(|o| T::lit(grad_out.plane(o).iter().map(|v| v.as_f64()).sum()))
            .collect();
        Some(ConvLayer {
            out_channels: cout,
            in_channels: cin,
            weight: gw.into_iter().map(T::lit).collect(),
            bias: gb,
        })
    } else {
        None
    };

    let input_grad = if want_input {
        let wts = layer.weight_f64();
        let mut gpad = Padded::zeros(cin, h, w);
        for tap in 0..TAPS {
            let off = gpad.tap_offset(tap);
            let plane = gpad.plane;
            gemm(
                cin,
                cout,
                n,
                &wts,
                View {
                    offset: tap,
                    rs: TAPS,
                    cs: cin * TAPS,
                },
                &gout,
                View {
                    offset: 0,
                    rs: ld,
                    cs: 1,
                },
                1.0,
                &mut gpad.data,
                View {
                    offset: off,
                    rs: plane,
                    cs: 1,
                },
            );
        }
        let mut gi = Tensor::zeros(cin, h, w);
        for c in 0..cin {
            let plane = gi.plane_mut(c);
            for y in 0..h {
                let src = &gpad.data[c * gpad.plane + (y + 1) * gpad.row + 1..][..w];
                for (d, s) in plane[y * w..(y + 1) * w].iter_mut().zip(src) {
                    *d = T::lit(*s);
                }
            }
        }
        Some(gi)
    } else {
        None
    };

    Ok(ConvGrads {
        input: input_grad,
        layer: layer_grad,
    })
}
