//! Iterative Retinex peel-off: `S_i = (S_{i-1} − N_i) ⊙ E_i`.
//!
//! The single-channel maps are broadcast over the three colour channels.
//! Intermediates are never clamped; only the exported image is.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imageio;
use crate::menet::MapStack;
use crate::tensor::{Real, Tensor};

/// Smallest `|E_i|` [`invert`] accepts.
pub const MIN_INVERTIBLE_GAIN: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct EnhancementResult<T> {
    /// `S_I`, the reflectance estimate.
    pub final_image: Tensor<T>,
    /// `S_1 .. S_I`, unclamped.
    pub intermediates: Vec<Tensor<T>>,
    /// `S_I` clamped to `[0, 1]`.
    pub export: Tensor<T>,
}

fn check_stacks<T: Real>(image: &Tensor<T>, e: &MapStack<T>, n: &MapStack<T>) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::shape(format!(
            "enhancer needs a 3-channel image, got {}",
            image.shape()
        )));
    }
    for (name, s) in [("E", e), ("N", n)] {
        if s.height() != image.height() || s.width() != image.width() {
            return Err(Error::shape(format!(
                "{name} stack is {}x{}, image is {}",
                s.height(),
                s.width(),
                image.shape()
            )));
        }
    }
    if e.iterations() != n.iterations() {
        return Err(Error::shape(format!(
            "E stack has {} maps, N stack has {}",
            e.iterations(),
            n.iterations()
        )));
    }
    if e.iterations() == 0 {
        return Err(Error::InvalidArgument("iteration count must be at least 1".into()));
    }
    Ok(())
}

fn step<T: Real>(prev: &Tensor<T>, e: &[T], n: &[T]) -> Tensor<T> {
    let mut next = prev.clone();
    for c in 0..3 {
        for ((s, &ei), &ni) in next.plane_mut(c).iter_mut().zip(e).zip(n) {
            *s = (*s - ni) * ei;
        }
    }
    next
}

pub fn enhance<T: Real>(s0: &Tensor<T>, e_stack: &MapStack<T>, n_stack: &MapStack<T>) -> Result<EnhancementResult<T>> {
    check_stacks(s0, e_stack, n_stack)?;
    let mut intermediates = Vec::with_capacity(e_stack.iterations());
    let mut current = s0.clone();
    for i in 0..e_stack.iterations() {
        current = step(&current, e_stack.map(i), n_stack.map(i));
        intermediates.push(current.clone());
    }
    let export = current.clamp(T::zero(), T::one());
    Ok(EnhancementResult {
        final_image: current,
        intermediates,
        export,
    })
}

pub struct EnhanceGrads<T> {
    pub s0: Tensor<T>,
    pub e_stack: MapStack<T>,
    pub n_stack: MapStack<T>,
}

/// Reverse-mode pass through the iteration given `∂L/∂S_I`.
pub fn enhance_backward<T: Real>(
    s0: &Tensor<T>,
    e_stack: &MapStack<T>,
    n_stack: &MapStack<T>,
    grad_final: &Tensor<T>,
) -> Result<EnhanceGrads<T>> {
    check_stacks(s0, e_stack, n_stack)?;
    s0.ensure_same_shape(grad_final, "enhance grad_final")?;
    let iters = e_stack.iterations();
    let (h, w) = (s0.height(), s0.width());

    let mut states = Vec::with_capacity(iters);
    states.push(s0.clone());
    for i in 0..iters - 1 {
        let next = step(&states[i], e_stack.map(i), n_stack.map(i));
        states.push(next);
    }

    let mut g = grad_final.clone();
    let mut ge = MapStack::zeros(iters, h, w);
    let mut gn = MapStack::zeros(iters, h, w);
    for i in (0..iters).rev() {
        let prev = &states[i];
        let (e, n) = (e_stack.map(i), n_stack.map(i));
        let ge_i = ge.map_mut(i);
        for p in 0..h * w {
            let mut acc_e = 0.0f64;
            let mut acc_s = 0.0f64;
            for c in 0..3 {
                let gs = g.plane(c)[p].as_f64();
                acc_e += gs * (prev.plane(c)[p] - n[p]).as_f64();
                acc_s += gs;
            }
            ge_i[p] = T::lit(acc_e);
            gn.map_mut(i)[p] = T::lit(-acc_s * e[p].as_f64());
        }
        for c in 0..3 {
            for (gv, &ev) in g.plane_mut(c).iter_mut().zip(e) {
                *gv = *gv * ev;
            }
        }
    }
    Ok(EnhanceGrads {
        s0: g,
        e_stack: ge,
        n_stack: gn,
    })
}

/// Undo [`enhance`]: `S_{i-1} = S_i ⊘ E_i + N_i`, newest map first.
pub fn invert<T: Real>(final_image: &Tensor<T>, e_stack: &MapStack<T>, n_stack: &MapStack<T>) -> Result<Tensor<T>> {
    check_stacks(final_image, e_stack, n_stack)?;
    for i in 0..e_stack.iterations() {
        if let Some(p) = e_stack
            .map(i)
            .iter()
            .position(|v| v.abs().as_f64() < MIN_INVERTIBLE_GAIN)
        {
            return Err(Error::IllConditioned(format!(
                "|E_{}| = {} at pixel {p} is below {MIN_INVERTIBLE_GAIN}",
                i + 1,
                e_stack.map(i)[p].abs()
            )));
        }
    }
    let mut s = final_image.clone();
    for i in (0..e_stack.iterations()).rev() {
        let (e, n) = (e_stack.map(i), n_stack.map(i));
        for c in 0..3 {
            for ((v, &ei), &ni) in s.plane_mut(c).iter_mut().zip(e).zip(n) {
                *v = *v / ei + ni;
            }
        }
    }
    Ok(s)
}

/// Writes `{stem}_iter{i}.png`, `{stem}_E{i}.png` and `{stem}_N{i}.png` (1-based `i`).
///
/// Intermediates are clamped to `[0,1]`, gains map `[0,2] → [0,255]` and noise
/// maps `[-1,1] → [0,255]`.
pub fn export_maps(
    dir: &Path,
    stem: &str,
    result: &EnhancementResult<f32>,
    e_stack: &MapStack<f32>,
    n_stack: &MapStack<f32>,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (i, s) in result.intermediates.iter().enumerate() {
        let path = dir.join(format!("{stem}_iter{}.png", i + 1));
        imageio::save_png(&s.clamp(0.0, 1.0), &path)?;
        written.push(path);
    }
    let (h, w) = (e_stack.height(), e_stack.width());
    for i in 0..e_stack.iterations() {
        let e = Tensor::from_vec(1, h, w, e_stack.map(i).iter().map(|v| v * 0.5).collect())?;
        let path = dir.join(format!("{stem}_E{}.png", i + 1));
        imageio::save_png(&e.clamp(0.0, 1.0), &path)?;
        written.push(path);

        let n = Tensor::from_vec(1, h, w, n_stack.map(i).iter().map(|v| (v + 1.0) * 0.5).collect())?;
        let path = dir.join(format!("{stem}_N{}.png", i + 1));
        imageio::save_png(&n.clamp(0.0, 1.0), &path)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finite_diff::{finite_diff_gradient, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stacks(iters: usize, h: usize, w: usize, e: f32, n: f32) -> (MapStack<f32>, MapStack<f32>) {
        (MapStack::filled(iters, h, w, e), MapStack::filled(iters, h, w, n))
    }

    #[test]
    fn identity_maps_leave_image_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s0 = Tensor::from_fn(3, 5, 4, |_, _, _| rng.gen_range(0.0f32..1.0));
        let (e, n) = stacks(8, 5, 4, 1.0, 0.0);
        let r = enhance(&s0, &e, &n).unwrap();
        assert_eq!(r.final_image, s0);
        assert_eq!(r.intermediates.len(), 8);
        assert_eq!(r.intermediates[7], r.final_image);
    }

    #[test]
    fn constant_recurrence_matches_scalar_oracle() {
        let mut s = 0.3f64;
        for _ in 0..8 {
            s = (s - 0.01) * 1.2;
        }
        assert!((s - 1.091_956_07).abs() < 1e-8);
        let s0 = Tensor::filled(3, 4, 4, 0.3f32);
        let (e, n) = stacks(8, 4, 4, 1.2, 0.01);
        let r = enhance(&s0, &e, &n).unwrap();
        assert!(r.final_image.data().iter().all(|&v| (v as f64 - s).abs() < 1e-6));
        assert!(r.export.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn single_iteration_doubles() {
        let s0 = Tensor::filled(3, 2, 2, 0.25f32);
        let (e, n) = stacks(1, 2, 2, 2.0, 0.0);
        let r = enhance(&s0, &e, &n).unwrap();
        assert!(r.final_image.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn shape_and_iteration_errors() {
        let s0 = Tensor::filled(3, 2, 2, 0.25f32);
        let (e, n) = stacks(2, 2, 3, 1.0, 0.0);
        assert!(matches!(enhance(&s0, &e, &n), Err(Error::Shape(_))));
        let (e, n) = stacks(0, 2, 2, 1.0, 0.0);
        assert!(matches!(enhance(&s0, &e, &n), Err(Error::InvalidArgument(_))));
        let (e, _) = stacks(2, 2, 2, 1.0, 0.0);
        let (_, n) = stacks(3, 2, 2, 1.0, 0.0);
        assert!(matches!(enhance(&s0, &e, &n), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_zero_and_identity_cases() {
        let s0 = Tensor::filled(3, 3, 3, 0.4f64);
        let e = MapStack::filled(8, 3, 3, 1.0);
        let n = MapStack::filled(8, 3, 3, 0.0);
        let g0 = enhance_backward(&s0, &e, &n, &Tensor::zeros(3, 3, 3)).unwrap();
        assert!(g0
            .s0
            .data()
            .iter()
            .chain(g0.e_stack.as_tensor().data())
            .all(|&v| v == 0.0));
        let gf = Tensor::from_fn(3, 3, 3, |c, y, x| (c + 2 * y + 3 * x) as f64 * 0.1);
        let g = enhance_backward(&s0, &e, &n, &gf).unwrap();
        assert_eq!(g.s0, gf);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (h, w, iters) = (4, 4, 8);
        let s0 = Tensor::from_fn(3, h, w, |_, _, _| rng.gen_range(0.0..1.0));
        let e = MapStack::new(Tensor::from_fn(iters, h, w, |_, _, _| rng.gen_range(0.5..1.5)));
        let n = MapStack::new(Tensor::from_fn(iters, h, w, |_, _, _| rng.gen_range(-0.1..0.1)));
        let gf = Tensor::from_fn(3, h, w, |_, _, _| rng.gen_range(-1.0..1.0));
        let g = enhance_backward(&s0, &e, &n, &gf).unwrap();

        let fd_s = finite_diff_gradient(|x| enhance(x, &e, &n).unwrap().final_image.dot(&gf), &s0, 1e-3);
        assert!(relative_error(g.s0.data(), fd_s.data()) < 1e-5);
        let fd_e = finite_diff_gradient(
            |x| {
                enhance(&s0, &MapStack::new(x.clone()), &n)
                    .unwrap()
                    .final_image
                    .dot(&gf)
            },
            e.as_tensor(),
            1e-3,
        );
        assert!(relative_error(g.e_stack.as_tensor().data(), fd_e.data()) < 1e-5);
        let fd_n = finite_diff_gradient(
            |x| {
                enhance(&s0, &e, &MapStack::new(x.clone()))
                    .unwrap()
                    .final_image
                    .dot(&gf)
            },
            n.as_tensor(),
            1e-3,
        );
        assert!(relative_error(g.n_stack.as_tensor().data(), fd_n.data()) < 1e-5);
    }

    #[test]
    fn invert_cases() {
        let fin = Tensor::filled(3, 2, 2, 0.5f32);
        let (e, n) = stacks(1, 2, 2, 2.0, 0.0);
        assert!(invert(&fin, &e, &n).unwrap().data().iter().all(|&v| v == 0.25));
        let (e, n) = stacks(8, 2, 2, 1.0, 0.0);
        assert_eq!(invert(&fin, &e, &n).unwrap(), fin);
        let (mut e, n) = stacks(2, 2, 2, 1.0, 0.0);
        e.map_mut(1)[3] = 0.05;
        assert!(matches!(invert(&fin, &e, &n), Err(Error::IllConditioned(_))));
    }

    proptest::proptest! {
        #[test]
        fn enhance_then_invert_roundtrips(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (5, 6);
            let s0 = Tensor::from_fn(3, h, w, |_, _, _| rng.gen_range(0.0f32..1.0));
            let e = MapStack::new(Tensor::from_fn(8, h, w, |_, _, _| rng.gen_range(0.5f32..2.0)));
            let n = MapStack::new(Tensor::from_fn(8, h, w, |_, _, _| rng.gen_range(-0.1f32..0.1)));
            let r = enhance(&s0, &e, &n).unwrap();
            let back = invert(&r.final_image, &e, &n).unwrap();
            proptest::prop_assert!(back.max_abs_diff(&s0) < 1e-5);
        }

        #[test]
        fn gains_above_one_without_noise_brighten(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s0 = Tensor::from_fn(3, 4, 4, |_, _, _| rng.gen_range(0.0f32..1.0));
            let e = MapStack::new(Tensor::from_fn(8, 4, 4, |_, _, _| rng.gen_range(1.0f32..2.0)));
            let n = MapStack::zeros(8, 4, 4);
            let r = enhance(&s0, &e, &n).unwrap();
            for (a, b) in r.final_image.data().iter().zip(s0.data()) {
                proptest::prop_assert!(a >= b);
            }
        }
    }
}
