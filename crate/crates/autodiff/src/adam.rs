//! Adam with bias correction.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::{ParamGrads, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: IndexMap<String, Tensor>,
    v: IndexMap<String, Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape())))
                .collect::<IndexMap<_, _>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.v.get(name)
    }
}

/// Applies one Adam update to every parameter in `params`.
pub fn adam_step(params: &mut ParamStore, grads: &ParamGrads, state: &mut AdamState) -> Result<()> {
    // Validate everything up front so a failure leaves `params` untouched.
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let m = state
            .m
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        for other in [g.shape(), m.shape()] {
            if other != p.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: other.to_vec(),
                });
            }
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - (beta1 as f64).powi(t);
    let bc2 = 1.0 - (beta2 as f64).powi(t);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let g = grads[&name].data();
        let m = state.m.get_mut(&name).expect("validated").data_mut();
        let v = state.v.get_mut(&name).expect("validated").data_mut();
        let p = params.get_mut(&name)?.data_mut();
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] as f64 / bc1;
            let v_hat = v[i] as f64 / bc2;
            p[i] -= (lr as f64 * m_hat / (v_hat.sqrt() + eps as f64)) as f32;
        }
    }
    Ok(())
}

/// Euclidean norm over all gradient entries.
pub fn global_norm(grads: &ParamGrads) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for t in grads.values_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::from_vec(vec![p]));
        s
    }

    fn grad(g: f32) -> ParamGrads {
        let mut m = ParamGrads::new();
        m.insert("p".to_string(), Tensor::from_vec(vec![g]));
        m
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = single(1.5);
        let mut st = AdamState::new(&params, AdamConfig::default());
        adam_step(&mut params, &grad(0.0), &mut st).unwrap();
        assert_eq!(params.get("p").unwrap().data(), &[1.5]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = single(1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut st = AdamState::new(&params, cfg);
        adam_step(&mut params, &grad(1.0), &mut st).unwrap();
        assert!((params.get("p").unwrap().data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = single(1.0);
        let mut st = AdamState::new(&params, AdamConfig::default());
        let mut g = ParamGrads::new();
        g.insert("p".to_string(), Tensor::zeros(&[2]));
        assert!(adam_step(&mut params, &g, &mut st).is_err());
        assert_eq!(st.step, 0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = ParamGrads::new();
        g.insert("a".into(), Tensor::from_vec(vec![3.0, 4.0]));
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - 5.0).abs() < 1e-9);
        assert!((global_norm(&g) - 1.0).abs() < 1e-6);
    }
}
