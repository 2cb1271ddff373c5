use crate::error::{Error, Result};
use crate::menet::MeNetParams;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &MeNetParams<f32>) -> Self {
        let zeros = |b: &&[f32]| vec![0.0f32; b.len()];
        let buffers = params.buffers();
        AdamState {
            m: buffers.iter().map(zeros).collect(),
            v: buffers.iter().map(zeros).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut MeNetParams<f32>,
    grads: &MeNetParams<f32>,
    state: &mut AdamState,
    lr: f32,
) -> Result<()> {
    if lr.is_nan() || lr <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    let gbufs = grads.buffers();
    let mut pbufs = params.buffers_mut();
    if gbufs.len() != pbufs.len()
        || state.m.len() != pbufs.len()
        || pbufs
            .iter()
            .zip(&gbufs)
            .zip(&state.m)
            .any(|((p, g), m)| p.len() != g.len() || p.len() != m.len())
    {
        return Err(Error::shape("adam: parameter, gradient and moment buffers disagree"));
    }

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let lr = lr as f64;
    for (((p, g), m), v) in pbufs.iter_mut().zip(&gbufs).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.len() {
            let gi = g[i] as f64;
            let mi = BETA1 * m[i] as f64 + (1.0 - BETA1) * gi;
            let vi = BETA2 * v[i] as f64 + (1.0 - BETA2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            p[i] = (p[i] as f64 - lr * m_hat / (v_hat.sqrt() + EPSILON)) as f32;
        }
    }
    Ok(())
}
