//! Semantic fidelity: squared feature distance under a frozen convolutional prefix.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::{conv2d_backward_input, conv2d_forward, ConvLayer};
use crate::error::{Error, Result};
use crate::tensor::{activation, activation_backward, max_pool2, max_pool2_backward, Activation, Real, Shape, Tensor};
use crate::weights::WeightFile;

/// Frozen, deterministic feature map with an input gradient.
pub trait FeatureExtractor<T: Real>: Sync {
    type Trace: Send;

    fn forward(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Self::Trace)>;

    /// Gradient with respect to the image of `Σ grad_features ⊙ F(image)`.
    fn input_gradient(&self, trace: &Self::Trace, grad_features: &Tensor<T>) -> Result<Tensor<T>>;

    fn features(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(image)?.0)
    }
}

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// `(out, in)` channels of the four prefix convolutions.
pub const PREFIX_DIMS: [(usize, usize); 4] = [(64, 3), (64, 64), (128, 64), (128, 128)];

/// conv-relu-conv-relu-pool-conv-relu-conv-relu, features after the fourth ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct VggPrefix<T> {
    pub convs: [ConvLayer<T>; 4],
}

pub struct VggTrace<T> {
    normalized: Tensor<T>,
    pre: [Tensor<T>; 4],
    act: [Tensor<T>; 3],
    pool_in: Shape,
    argmax: Vec<usize>,
    pooled: Tensor<T>,
}

impl<T: Real> VggPrefix<T> {
    /// Seeded He-normal weights; stands in for pretrained weights in tests.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = PREFIX_DIMS.map(|(o, i)| {
            let std = (2.0 / (9 * i) as f64).sqrt();
            ConvLayer::<f64>::normal(o, i, std, &mut rng).cast::<T>()
        });
        VggPrefix { convs }
    }

    /// Loads `fx.conv{1..4}.{weight,bias}` from a DLWT file.
    pub fn from_weight_file(path: &Path) -> Result<Self> {
        let file = WeightFile::read(path)?;
        Self::from_weights(&file)
    }

    pub fn from_weights(file: &WeightFile) -> Result<Self> {
        let mut convs: Vec<ConvLayer<T>> = Vec::with_capacity(4);
        for (i, &(o, inp)) in PREFIX_DIMS.iter().enumerate() {
            let w = file.require(&format!("fx.conv{}.weight", i + 1), &[o, inp, 3, 3])?;
            let b = file.require(&format!("fx.conv{}.bias", i + 1), &[o])?;
            convs.push(ConvLayer {
                out_channels: o,
                in_channels: inp,
                weight: w.iter().map(|&v| T::lit(v as f64)).collect(),
                bias: b.iter().map(|&v| T::lit(v as f64)).collect(),
            });
        }
        let convs: [ConvLayer<T>; 4] = convs.try_into().expect("four layers");
        Ok(VggPrefix { convs })
    }

    pub fn cast<U: Real>(&self) -> VggPrefix<U> {
        VggPrefix {
            convs: [
                self.convs[0].cast(),
                self.convs[1].cast(),
                self.convs[2].cast(),
                self.convs[3].cast(),
            ],
        }
    }
}

impl<T: Real> FeatureExtractor<T> for VggPrefix<T> {
    type Trace = VggTrace<T>;

    fn forward(&self, image: &Tensor<T>) -> Result<(Tensor<T>, VggTrace<T>)> {
        if image.channels() != 3 || image.height() < 2 || image.width() < 2 {
            return Err(Error::InvalidArgument(format!(
                "feature extractor needs a 3-channel image of at least 2x2, got {}",
                image.shape()
            )));
        }
        let mut normalized = image.clone();
        for c in 0..3 {
            let (m, s) = (T::lit(IMAGENET_MEAN[c]), T::lit(IMAGENET_STD[c]));
            normalized.plane_mut(c).iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        let relu = |t: &Tensor<T>| activation(t, Activation::Relu);
        let p1 = conv2d_forward(&normalized, &self.convs[0])?;
        let a1 = relu(&p1);
        let p2 = conv2d_forward(&a1, &self.convs[1])?;
        let a2 = relu(&p2);
        let (pooled, argmax) = max_pool2(&a2)?;
        let p3 = conv2d_forward(&pooled, &self.convs[2])?;
        let a3 = relu(&p3);
        let p4 = conv2d_forward(&a3, &self.convs[3])?;
        let features = relu(&p4);
        let pool_in = a2.shape();
        Ok((
            features,
            VggTrace {
                normalized,
                pre: [p1, p2, p3, p4],
                act: [a1, a2, a3],
                pool_in,
                argmax,
                pooled,
            },
        ))
    }

    fn input_gradient(&self, trace: &VggTrace<T>, grad_features: &Tensor<T>) -> Result<Tensor<T>> {
        let [p1, p2, p3, p4] = &trace.pre;
        let [a1, _, a3] = &trace.act;
        let relu_back = |pre: &Tensor<T>, g: &Tensor<T>| activation_backward(pre, g, Activation::Relu);
        let g = relu_back(p4, grad_features)?;
        let g = conv2d_backward_input(a3, &self.convs[3], &g)?;
        let g = relu_back(p3, &g)?;
        let g = conv2d_backward_input(&trace.pooled, &self.convs[2], &g)?;
        let g = max_pool2_backward(trace.pool_in, &trace.argmax, &g)?;
        let g = relu_back(p2, &g)?;
        let g = conv2d_backward_input(a1, &self.convs[1], &g)?;
        let g = relu_back(p1, &g)?;
        let mut g = conv2d_backward_input(&trace.normalized, &self.convs[0], &g)?;
        for (c, s) in IMAGENET_STD.iter().enumerate() {
            let inv = T::lit(1.0 / s);
            g.plane_mut(c).iter_mut().for_each(|v| *v = *v * inv);
        }
        Ok(g)
    }
}

/// Mean squared feature distance against precomputed reference features.
pub fn loss_sem_against<T: Real, F: FeatureExtractor<T>>(
    enhanced: &Tensor<T>,
    reference: &Tensor<T>,
    fx: &F,
) -> Result<(f64, Tensor<T>)> {
    let (feat, trace) = fx.forward(enhanced)?;
    feat.ensure_same_shape(reference, "semantic features")?;
    let n = feat.len() as f64;
    let mut loss = 0.0;
    let mut gfeat = feat.zeros_like();
    for ((g, a), b) in gfeat.data_mut().iter_mut().zip(feat.data()).zip(reference.data()) {
        let d = a.as_f64() - b.as_f64();
        loss += d * d;
        *g = T::lit(2.0 * d / n);
    }
    let grad = fx.input_gradient(&trace, &gfeat)?;
    Ok((loss / n, grad))
}

/// `mean((F(enhanced) − F(original))²)`; only `enhanced` receives a gradient.
pub fn loss_sem<T: Real, F: FeatureExtractor<T>>(
    enhanced: &Tensor<T>,
    original: &Tensor<T>,
    fx: &F,
) -> Result<(f64, Tensor<T>)> {
    enhanced.ensure_same_shape(original, "semantic loss inputs")?;
    let reference = fx.features(original)?;
    loss_sem_against(enhanced, &reference, fx)
}
