//! Finite-difference audit of every analytic gradient, in f64 on small random instances.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{conv2d_backward, conv2d_forward, ConvLayer};
use crate::enhancer::{enhance, enhance_backward};
use crate::error::{Error, Result};
use crate::finite_diff::{directional_derivative, finite_diff_entries, finite_diff_gradient, relative_error};
use crate::losses::{
    build_weight_map, loss_cen, loss_col, loss_ill, loss_noi, loss_sem, total_loss, ColorMode, LossWeights, VggPrefix,
};
use crate::menet::{self, MapStack, MeNetParams, LAYER_NAMES};
use crate::tensor::{activation, activation_backward, max_pool2, max_pool2_backward, Activation, Tensor};

pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-6;

/// Every component name the suite reports, in report order.
pub const COMPONENTS: [&str; 28] = [
    "conv.input",
    "conv.weight",
    "conv.bias",
    "relu",
    "tanh",
    "maxpool",
    "menet.conv1",
    "menet.conv2",
    "menet.conv3",
    "menet.conv4",
    "menet.conv5",
    "menet.head_e",
    "menet.head_n",
    "enhancer.s0",
    "enhancer.e",
    "enhancer.n",
    "loss.col",
    "loss.col_channel_mean",
    "loss.cen",
    "loss.ill",
    "loss.sem",
    "loss.noi",
    "loss.total.e",
    "loss.total.n",
    "pipeline.conv1",
    "pipeline.conv3",
    "pipeline.head_e",
    "pipeline.head_n",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentResult {
    pub name: &'static str,
    pub max_rel_error: f64,
}

impl ComponentResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub components: Vec<ComponentResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(ComponentResult::passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.components.iter().filter(|c| !c.passed()).map(|c| c.name).collect()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:>14}  status", "component", "max_rel_error")?;
        for c in &self.components {
            let status = if c.passed() { "ok" } else { "FAIL" };
            writeln!(f, "{:<24} {:>14.3e}  {status}", c.name, c.max_rel_error)?;
        }
        let failed = self.failures();
        if failed.is_empty() {
            write!(f, "all {} components within {TOLERANCE:e}", self.components.len())
        } else {
            write!(f, "failed: {}", failed.join(", "))
        }
    }
}

struct Suite {
    rng: ChaCha8Rng,
    /// Component whose analytic gradient is negated before comparison.
    fault: Option<String>,
    results: Vec<ComponentResult>,
}

fn flat(v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(1, 1, v.len(), v.to_vec()).expect("length matches")
}

fn sample_indices(rng: &mut ChaCha8Rng, len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    (0..count).map(|_| rng.gen_range(0..len)).collect()
}

impl Suite {
    fn uniform(&mut self, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> Tensor<f64> {
        let rng = &mut self.rng;
        Tensor::from_fn(c, h, w, |_, _, _| rng.gen_range(lo..hi))
    }

    /// Records the worst relative error of one component, applying the fault if requested.
    fn record(&mut self, name: &'static str, pairs: &[(Vec<f64>, Vec<f64>)]) {
        let negate = self.fault.as_deref() == Some(name);
        let worst = pairs
            .iter()
            .map(|(analytic, numeric)| {
                let a: Vec<f64> = analytic.iter().map(|v| if negate { -v } else { *v }).collect();
                relative_error(&a, numeric)
            })
            .fold(0.0, f64::max);
        self.results.push(ComponentResult {
            name,
            max_rel_error: worst,
        });
    }

    fn primitives(&mut self) -> Result<()> {
        let x = self.uniform(4, 7, 6, -1.0, 1.0);
        let mut layer = ConvLayer::<f64>::normal(5, 4, 0.5, &mut self.rng);
        layer.bias.iter_mut().for_each(|b| *b = self.rng.gen_range(-0.5..0.5));
        let g = self.uniform(5, 7, 6, -1.0, 1.0);
        let (gi, gl) = conv2d_backward(&x, &layer, &g)?;
        let probe = |x: &Tensor<f64>, l: &ConvLayer<f64>| conv2d_forward(x, l).map(|y| y.dot(&g)).unwrap_or(f64::NAN);
        let fd_in = finite_diff_gradient(|t| probe(t, &layer), &x, EPS);
        let fd_w = finite_diff_gradient(
            |t| {
                let mut l = layer.clone();
                l.weight.copy_from_slice(t.data());
                probe(&x, &l)
            },
            &flat(&layer.weight),
            EPS,
        );
        let fd_b = finite_diff_gradient(
            |t| {
                let mut l = layer.clone();
                l.bias.copy_from_slice(t.data());
                probe(&x, &l)
            },
            &flat(&layer.bias),
            EPS,
        );
        self.record("conv.input", &[(gi.into_vec(), fd_in.into_vec())]);
        self.record("conv.weight", &[(gl.weight.clone(), fd_w.into_vec())]);
        self.record("conv.bias", &[(gl.bias.clone(), fd_b.into_vec())]);

        for (name, kind) in [("relu", Activation::Relu), ("tanh", Activation::Tanh)] {
            // Keep ReLU inputs away from the kink so the differences stay one-sided-free.
            let x = self
                .uniform(2, 5, 5, 0.05, 1.0)
                .map(|v| if v < 0.5 { v - 0.55 } else { v });
            let g = self.uniform(2, 5, 5, -1.0, 1.0);
            let an = activation_backward(&x, &g, kind)?;
            let fd = finite_diff_gradient(|t| activation(t, kind).dot(&g), &x, EPS);
            self.record(name, &[(an.into_vec(), fd.into_vec())]);
        }

        let x = self.uniform(3, 6, 8, -1.0, 1.0);
        let (pooled, arg) = max_pool2(&x)?;
        let g = self.uniform(pooled.channels(), pooled.height(), pooled.width(), -1.0, 1.0);
        let an = max_pool2_backward(x.shape(), &arg, &g)?;
        let fd = finite_diff_gradient(|t| max_pool2(t).map(|(p, _)| p.dot(&g)).unwrap_or(f64::NAN), &x, EPS);
        self.record("maxpool", &[(an.into_vec(), fd.into_vec())]);
        Ok(())
    }

    /// He-scaled random parameters with nonzero biases, so every head stays out of saturation.
    fn network_params(&mut self, iterations: usize) -> MeNetParams<f64> {
        let mut p = MeNetParams::<f64>::zeros(iterations);
        for (_, layer) in p.layers_mut() {
            let std = (1.0 / (layer.in_channels * 9) as f64).sqrt();
            *layer = ConvLayer::normal(layer.out_channels, layer.in_channels, std, &mut self.rng);
            layer.bias.iter_mut().for_each(|b| *b = self.rng.gen_range(-0.1..0.1));
        }
        p
    }

    fn network(&mut self) -> Result<()> {
        let params = self.network_params(4);
        let img = self.uniform(3, 6, 7, 0.0, 1.0);
        let ge = MapStack::new(self.uniform(4, 6, 7, -1.0, 1.0));
        let gn = MapStack::new(self.uniform(4, 6, 7, -1.0, 1.0));
        let objective = |p: &MeNetParams<f64>| {
            menet::forward(&img, p)
                .map(|(e, n, _)| e.as_tensor().dot(ge.as_tensor()) + n.as_tensor().dot(gn.as_tensor()))
                .unwrap_or(f64::NAN)
        };
        let (_, _, cache) = menet::forward(&img, &params)?;
        let grads = menet::backward(&cache, &params, &ge, &gn)?;

        for (li, name) in COMPONENTS[6..13].iter().enumerate() {
            assert_eq!(*name, format!("menet.{}", LAYER_NAMES[li]));
            let mut pairs = Vec::new();
            for (bi, is_bias) in [(2 * li, false), (2 * li + 1, true)] {
                let at = flat(params.buffers()[bi]);
                let idx = sample_indices(&mut self.rng, at.len(), if is_bias { 4 } else { 8 });
                let fd = finite_diff_entries(
                    |t| {
                        let mut p = params.clone();
                        p.buffers_mut()[bi].copy_from_slice(t.data());
                        objective(&p)
                    },
                    &at,
                    &idx,
                    EPS,
                );
                let an: Vec<f64> = idx.iter().map(|&i| grads.buffers()[bi][i]).collect();
                pairs.push((an, fd));
            }
            self.record(name, &pairs);
        }
        Ok(())
    }

    fn enhancer(&mut self) -> Result<()> {
        let s0 = self.uniform(3, 6, 6, 0.0, 1.0);
        let e = MapStack::new(self.uniform(8, 6, 6, 0.5, 2.0));
        let n = MapStack::new(self.uniform(8, 6, 6, -0.2, 0.2));
        let g = self.uniform(3, 6, 6, -1.0, 1.0);
        let grads = enhance_backward(&s0, &e, &n, &g)?;
        let value = |s0: &Tensor<f64>, e: &MapStack<f64>, n: &MapStack<f64>| {
            enhance(s0, e, n).map(|r| r.final_image.dot(&g)).unwrap_or(f64::NAN)
        };
        let fd_s0 = finite_diff_gradient(|t| value(t, &e, &n), &s0, EPS);
        let fd_e = finite_diff_gradient(|t| value(&s0, &MapStack::new(t.clone()), &n), e.as_tensor(), EPS);
        let fd_n = finite_diff_gradient(|t| value(&s0, &e, &MapStack::new(t.clone())), n.as_tensor(), EPS);
        self.record("enhancer.s0", &[(grads.s0.into_vec(), fd_s0.into_vec())]);
        self.record(
            "enhancer.e",
            &[(grads.e_stack.into_tensor().into_vec(), fd_e.into_vec())],
        );
        self.record(
            "enhancer.n",
            &[(grads.n_stack.into_tensor().into_vec(), fd_n.into_vec())],
        );
        Ok(())
    }

    fn losses(&mut self) -> Result<()> {
        for (name, mode) in [
            ("loss.col", ColorMode::Literal),
            ("loss.col_channel_mean", ColorMode::ChannelMean),
        ] {
            let img = self.uniform(3, 8, 8, 0.0, 1.0);
            let (_, an) = loss_col(&img, mode)?;
            let fd = finite_diff_gradient(|t| loss_col(t, mode).map(|r| r.0).unwrap_or(f64::NAN), &img, EPS);
            self.record(name, &[(an.into_vec(), fd.into_vec())]);
        }

        let img = self.uniform(3, 32, 32, 0.0, 1.0);
        let wmap = build_weight_map(2, 2);
        let (_, an) = loss_cen(&img, &wmap, 0.6)?;
        let fd = finite_diff_gradient(|t| loss_cen(t, &wmap, 0.6).map(|r| r.0).unwrap_or(f64::NAN), &img, EPS);
        self.record("loss.cen", &[(an.into_vec(), fd.into_vec())]);

        let e = MapStack::new(self.uniform(8, 6, 6, 0.5, 2.0));
        let (_, an) = loss_ill(&e)?;
        let fd = finite_diff_gradient(
            |t| loss_ill(&MapStack::new(t.clone())).map(|r| r.0).unwrap_or(f64::NAN),
            e.as_tensor(),
            EPS,
        );
        self.record("loss.ill", &[(an.into_tensor().into_vec(), fd.into_vec())]);

        let fx = VggPrefix::<f64>::random(self.rng.gen());
        let original = self.uniform(3, 8, 8, 0.0, 1.0);
        let enhanced = self.uniform(3, 8, 8, 0.0, 1.0);
        let (_, an) = loss_sem(&enhanced, &original, &fx)?;
        let fd = finite_diff_gradient(
            |t| loss_sem(t, &original, &fx).map(|r| r.0).unwrap_or(f64::NAN),
            &enhanced,
            EPS,
        );
        self.record("loss.sem", &[(an.into_vec(), fd.into_vec())]);

        let n = MapStack::new(self.uniform(8, 6, 6, -1.0, 1.0));
        let (_, an) = loss_noi(&n)?;
        let fd = finite_diff_gradient(
            |t| loss_noi(&MapStack::new(t.clone())).map(|r| r.0).unwrap_or(f64::NAN),
            n.as_tensor(),
            EPS,
        );
        self.record("loss.noi", &[(an.into_tensor().into_vec(), fd.into_vec())]);
        Ok(())
    }

    fn total(&mut self) -> Result<()> {
        let (h, w) = (16, 16);
        let fx = VggPrefix::<f64>::random(self.rng.gen());
        let weights = LossWeights::default();
        let s0 = self.uniform(3, h, w, 0.0, 0.4);
        let e = MapStack::new(self.uniform(8, h, w, 0.9, 1.3));
        let n = MapStack::new(self.uniform(8, h, w, -0.05, 0.05));
        let value = |e: &MapStack<f64>, n: &MapStack<f64>| {
            enhance(&s0, e, n)
                .and_then(|r| total_loss(&s0, &r, e, n, &weights, ColorMode::Literal, &fx))
                .map(|t| t.total)
                .unwrap_or(f64::NAN)
        };
        let result = enhance(&s0, &e, &n)?;
        let t = total_loss(&s0, &result, &e, &n, &weights, ColorMode::Literal, &fx)?;
        for (name, stack, grad) in [("loss.total.e", &e, &t.grad_e), ("loss.total.n", &n, &t.grad_n)] {
            let is_e = name.ends_with(".e");
            let f = |x: &Tensor<f64>| {
                let probe = MapStack::new(x.clone());
                if is_e {
                    value(&probe, &n)
                } else {
                    value(&e, &probe)
                }
            };
            let idx = sample_indices(&mut self.rng, stack.as_tensor().len(), 12);
            let fd = finite_diff_entries(f, stack.as_tensor(), &idx, EPS);
            let an: Vec<f64> = idx.iter().map(|&i| grad.as_tensor().data()[i]).collect();
            let dir = self.uniform(8, h, w, -1.0, 1.0);
            let fd_dir = directional_derivative(f, stack.as_tensor(), &dir, EPS);
            let an_dir = grad.as_tensor().dot(&dir);
            self.record(name, &[(an, fd), (vec![an_dir], vec![fd_dir])]);
        }
        Ok(())
    }

    /// Parameters → maps → enhancement → total loss, checked along random parameter directions.
    fn pipeline(&mut self) -> Result<()> {
        let (h, w) = (16, 16);
        let params = self.network_params(8);
        let fx = VggPrefix::<f64>::random(self.rng.gen());
        let weights = LossWeights::default();
        let img = self.uniform(3, h, w, 0.0, 0.4);
        let value = |p: &MeNetParams<f64>| -> Result<f64> {
            let (e, n, _) = menet::forward(&img, p)?;
            let r = enhance(&img, &e, &n)?;
            Ok(total_loss(&img, &r, &e, &n, &weights, ColorMode::Literal, &fx)?.total)
        };
        let (e, n, cache) = menet::forward(&img, &params)?;
        let r = enhance(&img, &e, &n)?;
        let t = total_loss(&img, &r, &e, &n, &weights, ColorMode::Literal, &fx)?;
        let grads = menet::backward(&cache, &params, &t.grad_e, &t.grad_n)?;

        for (name, layer) in [
            ("pipeline.conv1", 0),
            ("pipeline.conv3", 2),
            ("pipeline.head_e", 5),
            ("pipeline.head_n", 6),
        ] {
            let mut pairs = Vec::new();
            for bi in [2 * layer, 2 * layer + 1] {
                let at = flat(params.buffers()[bi]);
                let dir = self.uniform(1, 1, at.len(), -1.0, 1.0);
                let fd = directional_derivative(
                    |x| {
                        let mut p = params.clone();
                        p.buffers_mut()[bi].copy_from_slice(x.data());
                        value(&p).unwrap_or(f64::NAN)
                    },
                    &at,
                    &dir,
                    EPS,
                );
                let an = flat(grads.buffers()[bi]).dot(&dir);
                pairs.push((vec![an], vec![fd]));
            }
            self.record(name, &pairs);
        }
        Ok(())
    }
}

/// Runs the whole suite. `fault` negates the analytic gradient of the named component.
pub fn run_gradcheck(seed: u64, fault: Option<&str>) -> Result<GradcheckReport> {
    if let Some(name) = fault.filter(|f| !COMPONENTS.contains(f)) {
        return Err(Error::InvalidArgument(format!("unknown gradient component `{name}`")));
    }
    let mut suite = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        fault: fault.map(str::to_owned),
        results: Vec::new(),
    };
    suite.primitives()?;
    suite.network()?;
    suite.enhancer()?;
    suite.losses()?;
    suite.total()?;
    suite.pipeline()?;
    assert_eq!(suite.results.iter().map(|r| r.name).collect::<Vec<_>>(), COMPONENTS);
    Ok(GradcheckReport {
        seed,
        components: suite.results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_suite_passes_and_is_repeatable() {
        let a = run_gradcheck(0, None).unwrap();
        assert!(a.passed(), "{a}");
        assert_eq!(a.components.len(), COMPONENTS.len());
        let b = run_gradcheck(0, None).unwrap();
        assert_eq!(a.to_string(), b.to_string());
    }

    #[test]
    fn injected_fault_is_named() {
        let r = run_gradcheck(1, Some("loss.cen")).unwrap();
        assert_eq!(r.failures(), vec!["loss.cen"]);
        assert!(r.to_string().contains("failed: loss.cen"));
    }
}
