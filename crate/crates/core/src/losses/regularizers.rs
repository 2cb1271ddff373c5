//! Map smoothness, noise energy and colour-balance terms.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::menet::MapStack;
use crate::tensor::{Real, Tensor};

/// `(1/I) Σ_i mean[(∂x E_i)² + (∂y E_i)²]` with forward differences (zero on the last row/column).
pub fn loss_ill<T: Real>(e_stack: &MapStack<T>) -> Result<(f64, MapStack<T>)> {
    let iters = e_stack.iterations();
    if iters == 0 {
        return Err(Error::InvalidArgument("empty illumination stack".into()));
    }
    let (h, w) = (e_stack.height(), e_stack.width());
    let norm = (iters * h * w) as f64;
    let mut loss = 0.0;
    let mut grad = MapStack::zeros(iters, h, w);
    for i in 0..iters {
        let e = e_stack.map(i);
        let mut g = vec![0.0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                if x + 1 < w {
                    let d = (e[p + 1] - e[p]).as_f64();
                    loss += d * d;
                    g[p + 1] += 2.0 * d / norm;
                    g[p] -= 2.0 * d / norm;
                }
                if y + 1 < h {
                    let d = (e[p + w] - e[p]).as_f64();
                    loss += d * d;
                    g[p + w] += 2.0 * d / norm;
                    g[p] -= 2.0 * d / norm;
                }
            }
        }
        for (d, s) in grad.map_mut(i).iter_mut().zip(g) {
            *d = T::lit(s);
        }
    }
    Ok((loss / norm, grad))
}

/// `(1/I) Σ_i mean(N_i²)`.
pub fn loss_noi<T: Real>(n_stack: &MapStack<T>) -> Result<(f64, MapStack<T>)> {
    let t = n_stack.as_tensor();
    if n_stack.iterations() == 0 {
        return Err(Error::InvalidArgument("empty noise stack".into()));
    }
    let norm = t.len() as f64;
    let loss = t.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / norm;
    let grad = t.map(|v| T::lit(2.0 * v.as_f64() / norm));
    Ok((loss, MapStack::new(grad)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ColorMode {
    /// Per-pixel channel differences averaged over the image.
    #[default]
    Literal,
    /// Differences of per-channel mean intensities.
    ChannelMean,
}

impl FromStr for ColorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(ColorMode::Literal),
            "channel_mean" | "channel-mean" => Ok(ColorMode::ChannelMean),
            other => Err(Error::Config(format!("unknown colour mode `{other}`"))),
        }
    }
}

const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

pub fn loss_col<T: Real>(enhanced: &Tensor<T>, mode: ColorMode) -> Result<(f64, Tensor<T>)> {
    if enhanced.channels() != 3 {
        return Err(Error::shape(format!(
            "colour loss needs 3 channels, got {}",
            enhanced.shape()
        )));
    }
    let n = (enhanced.height() * enhanced.width()) as f64;
    let planes = [enhanced.plane(0), enhanced.plane(1), enhanced.plane(2)];
    let mut grad = enhanced.zeros_like();
    match mode {
        ColorMode::Literal => {
            let mut loss = 0.0;
            let pixels = planes[0].iter().zip(planes[1]).zip(planes[2]);
            for (p, ((&c0, &c1), &c2)) in pixels.enumerate() {
                let v = [c0.as_f64(), c1.as_f64(), c2.as_f64()];
                let mut g = [0.0f64; 3];
                for (m, k) in PAIRS {
                    let d = v[m] - v[k];
                    loss += d * d;
                    g[m] += 2.0 * d / n;
                    g[k] -= 2.0 * d / n;
                }
                for (c, gc) in g.into_iter().enumerate() {
                    grad.plane_mut(c)[p] = T::lit(gc);
                }
            }
            Ok((loss / n, grad))
        }
        ColorMode::ChannelMean => {
            let mu = planes.map(|pl| pl.iter().map(|v| v.as_f64()).sum::<f64>() / n);
            let mut loss = 0.0;
            let mut g = [0.0f64; 3];
            for (m, k) in PAIRS {
                let d = mu[m] - mu[k];
                loss += d * d;
                g[m] += 2.0 * d / n;
                g[k] -= 2.0 * d / n;
            }
            for (c, gc) in g.into_iter().enumerate() {
                grad.plane_mut(c).fill(T::lit(gc));
            }
            Ok((loss, grad))
        }
    }
}
