//! Zero-reference training objective and its gradients.

mod lightness;
mod regularizers;
mod semantic;

pub use lightness::{build_weight_map, loss_cen, patch_means, PatchMeanGrid, SpatialWeightMap, PATCH_SIZE};
pub use regularizers::{loss_col, loss_ill, loss_noi, ColorMode};
pub use semantic::{
    loss_sem, loss_sem_against, FeatureExtractor, VggPrefix, VggTrace, IMAGENET_MEAN, IMAGENET_STD, PREFIX_DIMS,
};

use crate::enhancer::{enhance_backward, EnhancementResult};
use crate::error::{Error, Result};
use crate::menet::MapStack;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_col: f64,
    pub lambda_cen: f64,
    pub lambda_ill: f64,
    pub lambda_sem: f64,
    pub lambda_noi: f64,
    /// Well-illumination level the patch means are pulled toward.
    pub well_lit_level: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_col: 1600.0,
            lambda_cen: 50.0,
            lambda_ill: 10.0,
            lambda_sem: 0.001,
            lambda_noi: 50.0,
            well_lit_level: 0.6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_col,
            self.lambda_cen,
            self.lambda_ill,
            self.lambda_sem,
            self.lambda_noi,
            self.well_lit_level,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Unweighted component values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub col: f64,
    pub cen: f64,
    pub ill: f64,
    pub sem: f64,
    pub noi: f64,
}

impl LossBreakdown {
    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("col", self.col),
            ("cen", self.cen),
            ("ill", self.ill),
            ("sem", self.sem),
            ("noi", self.noi),
        ]
    }

    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.lambda_col * self.col
            + w.lambda_cen * self.cen
            + w.lambda_ill * self.ill
            + w.lambda_sem * self.sem
            + w.lambda_noi * self.noi
    }
}

pub struct TotalLoss<T> {
    pub total: f64,
    pub parts: LossBreakdown,
    /// `∂L/∂S_I` from the image-space terms.
    pub grad_final: Tensor<T>,
    /// `∂L/∂E`, including the path through the enhancement iteration.
    pub grad_e: MapStack<T>,
    /// `∂L/∂N`, including the path through the enhancement iteration.
    pub grad_n: MapStack<T>,
}

/// Weighted sum of all five terms on the unclamped `S_I`, with gradients chained to the map stacks.
pub fn total_loss<T: Real, F: FeatureExtractor<T>>(
    s0: &Tensor<T>,
    result: &EnhancementResult<T>,
    e_stack: &MapStack<T>,
    n_stack: &MapStack<T>,
    weights: &LossWeights,
    color_mode: ColorMode,
    fx: &F,
) -> Result<TotalLoss<T>> {
    let reference = fx.features(s0)?;
    total_loss_with_reference(s0, result, e_stack, n_stack, weights, color_mode, fx, &reference)
}

/// As [`total_loss`], reusing precomputed features of `s0`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_with_reference<T: Real, F: FeatureExtractor<T>>(
    s0: &Tensor<T>,
    result: &EnhancementResult<T>,
    e_stack: &MapStack<T>,
    n_stack: &MapStack<T>,
    weights: &LossWeights,
    color_mode: ColorMode,
    fx: &F,
    s0_features: &Tensor<T>,
) -> Result<TotalLoss<T>> {
    let r = &result.final_image;
    let grid = patch_means(r)?;
    let wmap = build_weight_map(grid.rows, grid.cols);

    let (col, g_col) = loss_col(r, color_mode)?;
    let (cen, g_cen) = loss_cen(r, &wmap, weights.well_lit_level)?;
    let (sem, g_sem) = loss_sem_against(r, s0_features, fx)?;
    let (ill, g_ill) = loss_ill(e_stack)?;
    let (noi, g_noi) = loss_noi(n_stack)?;
    let parts = LossBreakdown {
        col,
        cen,
        ill,
        sem,
        noi,
    };

    let lam = T::lit;
    let mut grad_final = r.zeros_like();
    for (term, k) in [
        (&g_col, weights.lambda_col),
        (&g_cen, weights.lambda_cen),
        (&g_sem, weights.lambda_sem),
    ] {
        let k = lam(k);
        for (d, s) in grad_final.data_mut().iter_mut().zip(term.data()) {
            *d = *d + k * *s;
        }
    }

    let chain = enhance_backward(s0, e_stack, n_stack, &grad_final)?;
    let mut grad_e = chain.e_stack;
    let mut grad_n = chain.n_stack;
    for (d, s) in grad_e
        .as_tensor_mut()
        .data_mut()
        .iter_mut()
        .zip(g_ill.as_tensor().data())
    {
        *d = *d + lam(weights.lambda_ill) * *s;
    }
    for (d, s) in grad_n
        .as_tensor_mut()
        .data_mut()
        .iter_mut()
        .zip(g_noi.as_tensor().data())
    {
        *d = *d + lam(weights.lambda_noi) * *s;
    }

    Ok(TotalLoss {
        total: parts.weighted_total(weights),
        parts,
        grad_final,
        grad_e,
        grad_n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enhancer::enhance;
    use crate::finite_diff::{directional_derivative, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Instance {
        s0: Tensor<f64>,
        e: MapStack<f64>,
        n: MapStack<f64>,
    }

    fn instance(h: usize, w: usize, seed: u64) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Instance {
            s0: Tensor::from_fn(3, h, w, |_, _, _| rng.gen_range(0.0..0.4)),
            e: MapStack::new(Tensor::from_fn(8, h, w, |_, _, _| rng.gen_range(0.9..1.3))),
            n: MapStack::new(Tensor::from_fn(8, h, w, |_, _, _| rng.gen_range(-0.05..0.05))),
        }
    }

    fn eval(inst: &Instance, w: &LossWeights, fx: &VggPrefix<f64>) -> TotalLoss<f64> {
        let r = enhance(&inst.s0, &inst.e, &inst.n).unwrap();
        total_loss(&inst.s0, &r, &inst.e, &inst.n, w, ColorMode::Literal, fx).unwrap()
    }

    fn zero_weights() -> LossWeights {
        LossWeights {
            lambda_col: 0.0,
            lambda_cen: 0.0,
            lambda_ill: 0.0,
            lambda_sem: 0.0,
            lambda_noi: 0.0,
            well_lit_level: 0.6,
        }
    }

    #[test]
    fn default_coefficients() {
        let w = LossWeights::default();
        assert_eq!(
            [
                w.lambda_col,
                w.lambda_cen,
                w.lambda_ill,
                w.lambda_sem,
                w.lambda_noi,
                w.well_lit_level
            ],
            [1600.0, 50.0, 10.0, 0.001, 50.0, 0.6]
        );
    }

    #[test]
    fn zero_lambdas_give_zero() {
        let fx = VggPrefix::random(0);
        assert_eq!(eval(&instance(16, 16, 1), &zero_weights(), &fx).total, 0.0);
    }

    #[test]
    fn identity_maps_on_well_lit_gray_vanish() {
        let fx = VggPrefix::random(0);
        let inst = Instance {
            s0: Tensor::filled(3, 32, 32, 0.6),
            e: MapStack::filled(8, 32, 32, 1.0),
            n: MapStack::zeros(8, 32, 32),
        };
        let t = eval(&inst, &LossWeights::default(), &fx);
        assert!(t.total.abs() < 1e-28, "{:?}", t.parts);
    }

    #[test]
    fn total_is_weighted_sum_of_independent_components() {
        let fx = VggPrefix::random(3);
        let inst = instance(32, 32, 2);
        let w = LossWeights::default();
        let t = eval(&inst, &w, &fx);
        let r = enhance(&inst.s0, &inst.e, &inst.n).unwrap().final_image;
        let grid = patch_means(&r).unwrap();
        let parts = [
            (w.lambda_col, loss_col(&r, ColorMode::Literal).unwrap().0),
            (
                w.lambda_cen,
                loss_cen(&r, &build_weight_map(grid.rows, grid.cols), 0.6).unwrap().0,
            ),
            (w.lambda_ill, loss_ill(&inst.e).unwrap().0),
            (w.lambda_sem, loss_sem(&r, &inst.s0, &fx).unwrap().0),
            (w.lambda_noi, loss_noi(&inst.n).unwrap().0),
        ];
        let expected: f64 = parts.iter().map(|(l, v)| *l * v).sum();
        assert!((t.total - expected).abs() < 1e-6 * expected.max(1.0));
    }

    #[test]
    fn linear_in_each_lambda() {
        let fx = VggPrefix::random(3);
        let inst = instance(16, 16, 4);
        let base = LossWeights::default();
        let t0 = eval(&inst, &base, &fx).total;
        for k in 0..5 {
            let mut w = base;
            let slot = [
                &mut w.lambda_col,
                &mut w.lambda_cen,
                &mut w.lambda_ill,
                &mut w.lambda_sem,
                &mut w.lambda_noi,
            ];
            let old = *slot[k];
            *slot[k] = old + 2.0;
            let t1 = eval(&inst, &w, &fx).total;
            let mut w2 = base;
            let slot = [
                &mut w2.lambda_col,
                &mut w2.lambda_cen,
                &mut w2.lambda_ill,
                &mut w2.lambda_sem,
                &mut w2.lambda_noi,
            ];
            *slot[k] = old + 4.0;
            let t2 = eval(&inst, &w2, &fx).total;
            assert!(((t2 - t1) - (t1 - t0)).abs() < 1e-9 * t2.abs().max(1.0));
        }
    }

    #[test]
    fn stack_gradients_match_directional_derivatives() {
        let fx = VggPrefix::random(7);
        let inst = instance(16, 16, 5);
        let w = LossWeights::default();
        let t = eval(&inst, &w, &fx);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for which in ["e", "n"] {
            let base = if which == "e" { &inst.e } else { &inst.n };
            let dir = Tensor::from_fn(8, 16, 16, |_, _, _| rng.gen_range(-1.0..1.0));
            let f = |x: &Tensor<f64>| {
                let mut probe = Instance {
                    s0: inst.s0.clone(),
                    e: inst.e.clone(),
                    n: inst.n.clone(),
                };
                *(if which == "e" { &mut probe.e } else { &mut probe.n }) = MapStack::new(x.clone());
                eval(&probe, &w, &fx).total
            };
            let fd = directional_derivative(f, base.as_tensor(), &dir, 1e-6);
            let g = if which == "e" { &t.grad_e } else { &t.grad_n };
            let an = g.as_tensor().dot(&dir);
            assert!(relative_error(&[an], &[fd]) < 1e-4, "{which}: {an} vs {fd}");
        }
    }
}
