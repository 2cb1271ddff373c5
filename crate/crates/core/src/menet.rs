//! The map-estimation network.
//!
//! Five shared Conv&ReLU layers with skip concatenations feed two Conv&Tanh
//! heads. Wiring (channels):
//!
//! ```text
//! c1 = relu(conv1(x))            3 -> 32
//! c2 = relu(conv2(c1))          32 -> 32
//! c3 = relu(conv3(c1 ++ c2))    64 -> 32
//! c4 = relu(conv4(c2 ++ c3))    64 -> 32
//! c5 = relu(conv5(c3 ++ c4))    64 -> 32
//! E  = 1 + tanh(head_e(c4 ++ c5))   64 -> I
//! N  =     tanh(head_n(c4 ++ c5))   64 -> I
//! ```
//!
//! `E_i` is the per-iteration inverse-illumination gain in `[0, 2]` and `N_i`
//! the noise map in `[-1, 1]`; an all-zero network yields `E ≡ 1`, `N ≡ 0`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::{conv2d_backward, conv2d_backward_select, conv2d_forward, ConvLayer};
use crate::error::{Error, Result};
use crate::tensor::{activation, activation_backward, concat_channels, split_channels, Activation, Real, Tensor};

pub const DEFAULT_ITERATIONS: usize = 8;
pub const FEATURES: usize = 32;
pub const INIT_STD: f64 = 0.02;

/// Stack of `I` single-channel maps, one per enhancement iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct MapStack<T>(Tensor<T>);

impl<T: Real> MapStack<T> {
    pub fn new(maps: Tensor<T>) -> Self {
        MapStack(maps)
    }

    pub fn filled(iterations: usize, height: usize, width: usize, value: T) -> Self {
        MapStack(Tensor::filled(iterations, height, width, value))
    }

    pub fn zeros(iterations: usize, height: usize, width: usize) -> Self {
        Self::filled(iterations, height, width, T::zero())
    }

    pub fn iterations(&self) -> usize {
        self.0.channels()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn map(&self, i: usize) -> &[T] {
        self.0.plane(i)
    }

    pub fn map_mut(&mut self, i: usize) -> &mut [T] {
        self.0.plane_mut(i)
    }

    pub fn as_tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn as_tensor_mut(&mut self) -> &mut Tensor<T> {
        &mut self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeNetParams<T> {
    pub conv1: ConvLayer<T>,
    pub conv2: ConvLayer<T>,
    pub conv3: ConvLayer<T>,
    pub conv4: ConvLayer<T>,
    pub conv5: ConvLayer<T>,
    pub head_e: ConvLayer<T>,
    pub head_n: ConvLayer<T>,
}

pub const LAYER_NAMES: [&str; 7] = ["conv1", "conv2", "conv3", "conv4", "conv5", "head_e", "head_n"];

/// `(out, in)` channels of every layer for a network producing `iterations` maps.
pub fn layer_dims(iterations: usize) -> [(usize, usize); 7] {
    let f = FEATURES;
    [
        (f, 3),
        (f, f),
        (f, 2 * f),
        (f, 2 * f),
        (f, 2 * f),
        (iterations, 2 * f),
        (iterations, 2 * f),
    ]
}

impl<T: Real> MeNetParams<T> {
    pub fn zeros(iterations: usize) -> Self {
        Self::from_fn(iterations, |o, i| ConvLayer::zeros(o, i))
    }

    fn from_fn(iterations: usize, mut f: impl FnMut(usize, usize) -> ConvLayer<T>) -> Self {
        let d = layer_dims(iterations);
        MeNetParams {
            conv1: f(d[0].0, d[0].1),
            conv2: f(d[1].0, d[1].1),
            conv3: f(d[2].0, d[2].1),
            conv4: f(d[3].0, d[3].1),
            conv5: f(d[4].0, d[4].1),
            head_e: f(d[5].0, d[5].1),
            head_n: f(d[6].0, d[6].1),
        }
    }

    /// Weights from `Normal(0, std)` with a seeded ChaCha stream, zero biases.
    pub fn init(seed: u64, iterations: usize, std: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_fn(iterations, |o, i| ConvLayer::normal(o, i, std, &mut rng))
    }

    pub fn iterations(&self) -> usize {
        self.head_e.out_channels
    }

    pub fn layers(&self) -> [(&'static str, &ConvLayer<T>); 7] {
        [
            (LAYER_NAMES[0], &self.conv1),
            (LAYER_NAMES[1], &self.conv2),
            (LAYER_NAMES[2], &self.conv3),
            (LAYER_NAMES[3], &self.conv4),
            (LAYER_NAMES[4], &self.conv5),
            (LAYER_NAMES[5], &self.head_e),
            (LAYER_NAMES[6], &self.head_n),
        ]
    }

    pub fn layers_mut(&mut self) -> [(&'static str, &mut ConvLayer<T>); 7] {
        [
            (LAYER_NAMES[0], &mut self.conv1),
            (LAYER_NAMES[1], &mut self.conv2),
            (LAYER_NAMES[2], &mut self.conv3),
            (LAYER_NAMES[3], &mut self.conv4),
            (LAYER_NAMES[4], &mut self.conv5),
            (LAYER_NAMES[5], &mut self.head_e),
            (LAYER_NAMES[6], &mut self.head_n),
        ]
    }

    /// Every parameter buffer in checkpoint order (weight then bias per layer).
    pub fn buffers(&self) -> Vec<&[T]> {
        self.layers()
            .into_iter()
            .flat_map(|(_, l)| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [T]> {
        self.layers_mut()
            .into_iter()
            .flat_map(|(_, l)| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn cast<U: Real>(&self) -> MeNetParams<U> {
        MeNetParams {
            conv1: self.conv1.cast(),
            conv2: self.conv2.cast(),
            conv3: self.conv3.cast(),
            conv4: self.conv4.cast(),
            conv5: self.conv5.cast(),
            head_e: self.head_e.cast(),
            head_n: self.head_n.cast(),
        }
    }
}

/// Seeded `Normal(0, 0.02)` initialization of the standard 8-iteration network.
pub fn init_params(seed: u64) -> MeNetParams<f32> {
    MeNetParams::init(seed, DEFAULT_ITERATIONS, INIT_STD)
}

pub fn count_params<T: Real>(params: &MeNetParams<T>) -> usize {
    params.layers().iter().map(|(_, l)| l.param_count()).sum()
}

/// Multiply-accumulates for one forward pass of the 8-iteration network over H×W.
pub fn count_macs(height: usize, width: usize) -> u64 {
    let per_pixel: u64 = layer_dims(DEFAULT_ITERATIONS)
        .iter()
        .map(|&(o, i)| (o * i * 9) as u64)
        .sum();
    height as u64 * width as u64 * per_pixel
}

/// Layer inputs and pre-activations retained for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    input: Tensor<T>,
    pre: [Tensor<T>; 5],
    act: [Tensor<T>; 5],
    pre_e: Tensor<T>,
    pre_n: Tensor<T>,
}

pub fn forward<T: Real>(
    image: &Tensor<T>,
    params: &MeNetParams<T>,
) -> Result<(MapStack<T>, MapStack<T>, ForwardCache<T>)> {
    if image.channels() != 3 {
        return Err(Error::shape(format!(
            "network input must have 3 channels, got {}",
            image.shape()
        )));
    }
    let relu = |t: &Tensor<T>| activation(t, Activation::Relu);

    let p1 = conv2d_forward(image, &params.conv1)?;
    let a1 = relu(&p1);
    let p2 = conv2d_forward(&a1, &params.conv2)?;
    let a2 = relu(&p2);
    let p3 = conv2d_forward(&concat_channels(&a1, &a2)?, &params.conv3)?;
    let a3 = relu(&p3);
    let p4 = conv2d_forward(&concat_channels(&a2, &a3)?, &params.conv4)?;
    let a4 = relu(&p4);
    let p5 = conv2d_forward(&concat_channels(&a3, &a4)?, &params.conv5)?;
    let a5 = relu(&p5);

    let heads_in = concat_channels(&a4, &a5)?;
    let pre_e = conv2d_forward(&heads_in, &params.head_e)?;
    let pre_n = conv2d_forward(&heads_in, &params.head_n)?;
    let e = pre_e.map(|v| T::one() + v.tanh());
    let n = pre_n.map(|v| v.tanh());

    let cache = ForwardCache {
        input: image.clone(),
        pre: [p1, p2, p3, p4, p5],
        act: [a1, a2, a3, a4, a5],
        pre_e,
        pre_n,
    };
    Ok((MapStack(e), MapStack(n), cache))
}

/// Parameter gradients of `Σ grad_e ⊙ E + grad_n ⊙ N`.
pub fn backward<T: Real>(
    cache: &ForwardCache<T>,
    params: &MeNetParams<T>,
    grad_e: &MapStack<T>,
    grad_n: &MapStack<T>,
) -> Result<MeNetParams<T>> {
    let [a1, a2, a3, a4, a5] = &cache.act;
    let [p1, p2, p3, p4, p5] = &cache.pre;
    let relu_back = |pre: &Tensor<T>, g: &Tensor<T>| activation_backward(pre, g, Activation::Relu);
    let f = FEATURES;

    // dE/dt = 1, so the E head sees grad_e directly through tanh'.
    let ge = activation_backward(&cache.pre_e, &grad_e.0, Activation::Tanh)?;
    let gn = activation_backward(&cache.pre_n, &grad_n.0, Activation::Tanh)?;

    let heads_in = concat_channels(a4, a5)?;
    let (mut gh, g_head_e) = conv2d_backward(&heads_in, &params.head_e, &ge)?;
    let (gh_n, g_head_n) = conv2d_backward(&heads_in, &params.head_n, &gn)?;
    gh.add_assign(&gh_n)?;
    let (mut g_a4, g_a5) = split_channels(&gh, f)?;

    let g_p5 = relu_back(p5, &g_a5)?;
    let (g_in, g_conv5) = conv2d_backward(&concat_channels(a3, a4)?, &params.conv5, &g_p5)?;
    let (mut g_a3, g) = split_channels(&g_in, f)?;
    g_a4.add_assign(&g)?;

    let g_p4 = relu_back(p4, &g_a4)?;
    let (g_in, g_conv4) = conv2d_backward(&concat_channels(a2, a3)?, &params.conv4, &g_p4)?;
    let (mut g_a2, g) = split_channels(&g_in, f)?;
    g_a3.add_assign(&g)?;

    let g_p3 = relu_back(p3, &g_a3)?;
    let (g_in, g_conv3) = conv2d_backward(&concat_channels(a1, a2)?, &params.conv3, &g_p3)?;
    let (mut g_a1, g) = split_channels(&g_in, f)?;
    g_a2.add_assign(&g)?;

    let g_p2 = relu_back(p2, &g_a2)?;
    let (g, g_conv2) = conv2d_backward(a1, &params.conv2, &g_p2)?;
    g_a1.add_assign(&g)?;

    let g_p1 = relu_back(p1, &g_a1)?;
    let g_conv1 = conv2d_backward_select(&cache.input, &params.conv1, &g_p1, false, true)?
        .layer
        .expect("parameter gradient requested");

    Ok(MeNetParams {
        conv1: g_conv1,
        conv2: g_conv2,
        conv3: g_conv3,
        conv4: g_conv4,
        conv5: g_conv5,
        head_e: g_head_e,
        head_n: g_head_n,
    })
}
