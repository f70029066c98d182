use serde::{Deserialize, Serialize};

use super::grad::Gradients;
use crate::error::{Error, Result};
use crate::model::{EncoderParams, GAMMA_TENSOR, TENSOR_NAMES};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates for one flat parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Moments {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One AdamW update of `p` at step `t` (1-based) with decoupled decay.
pub fn adamw_update(
    p: &mut [f64],
    g: &[f64],
    moments: &mut Moments,
    t: u64,
    cfg: &AdamWConfig,
    decay: bool,
) -> Result<()> {
    if g.len() != p.len() || moments.m.len() != p.len() || moments.v.len() != p.len() {
        return Err(Error::Dimension {
            what: "optimizer state",
            expected: p.len(),
            actual: g.len().min(moments.m.len()).min(moments.v.len()),
        });
    }
    if t == 0 {
        return Err(Error::Invalid("AdamW step counter starts at 1".into()));
    }
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    let wd = if decay { cfg.weight_decay } else { 0.0 };
    for k in 0..p.len() {
        let m = &mut moments.m[k];
        let v = &mut moments.v[k];
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g[k];
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g[k] * g[k];
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        p[k] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + wd * p[k]);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub moments: Vec<Moments>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(params: &EncoderParams, config: AdamWConfig) -> Self {
        AdamWState {
            config,
            moments: params.tensors().iter().map(|t| Moments::zeros(t.len())).collect(),
            step: 0,
        }
    }
}

/// Updates every tensor. Gamma is updated only when trainable and is never
/// weight-decayed.
pub fn adamw_step(params: &mut EncoderParams, grads: &Gradients, state: &mut AdamWState) -> Result<()> {
    if state.moments.len() != TENSOR_NAMES.len() {
        return Err(Error::Dimension {
            what: "optimizer tensors",
            expected: TENSOR_NAMES.len(),
            actual: state.moments.len(),
        });
    }
    state.step += 1;
    let trainable = params.gamma_trainable;
    let cfg = state.config;
    let t = state.step;
    for (k, ((p, g), mom)) in params
        .tensors_mut()
        .into_iter()
        .zip(&grads.tensors)
        .zip(&mut state.moments)
        .enumerate()
    {
        if k == GAMMA_TENSOR && !trainable {
            continue;
        }
        adamw_update(p, g, mom, t, &cfg, k != GAMMA_TENSOR)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_only_decays() {
        let cfg = AdamWConfig::default();
        let mut p = vec![2.0, -3.0, 0.5];
        let before = p.clone();
        let mut m = Moments::zeros(3);
        adamw_update(&mut p, &[0.0; 3], &mut m, 1, &cfg, true).unwrap();
        for (a, b) in p.iter().zip(&before) {
            assert_eq!(*a, b * (1.0 - cfg.lr * cfg.weight_decay));
        }
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = AdamWConfig::default();
        let g = [0.3, -2.0, 1e-3];
        let mut p = vec![1.0, 1.0, -4.0];
        let before = p.clone();
        let mut m = Moments::zeros(3);
        adamw_update(&mut p, &g, &mut m, 1, &cfg, true).unwrap();
        for k in 0..3 {
            let expected = before[k] - cfg.lr * (g[k] / (g[k].abs() + cfg.eps) + cfg.weight_decay * before[k]);
            assert!((p[k] - expected).abs() < 1e-15, "{k}");
        }
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        // f(x) = (x - 3)^2, minimiser of f + decay sits slightly towards 0
        let cfg = AdamWConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut x = vec![-2.0];
        let mut m = Moments::zeros(1);
        let mut dist = Vec::new();
        for t in 1..=1000 {
            let g = [2.0 * (x[0] - 3.0)];
            adamw_update(&mut x, &g, &mut m, t, &cfg, true).unwrap();
            dist.push((x[0] - 3.0).abs());
        }
        // distance shrinks monotonically until it reaches the lr-sized
        // neighbourhood
        let burn_in = 10;
        let settle = dist.iter().position(|&d| d < 0.05).expect("converges");
        assert!(settle > burn_in);
        for w in dist[burn_in..settle].windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(dist[999] < 1e-2);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![0.0; 2];
        let mut m = Moments::zeros(2);
        assert!(adamw_update(&mut p, &[1.0], &mut m, 1, &AdamWConfig::default(), true).is_err());
    }
}
