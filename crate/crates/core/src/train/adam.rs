//! Adam with bias correction over named parameter sets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
        }
    }
}

/// One Adam step in place: moments update, bias correction, parameter move.
pub fn adam_update(
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    param.ensure_same_shape(grad)?;
    param.ensure_same_shape(&state.m)?;
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for (((p, &g), mi), vi) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
        *p -= lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over every tensor of a [`ParamSet`]; missing gradients count as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub config: AdamConfig,
    pub states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, config: AdamConfig) -> Self {
        let states = params
            .iter()
            .map(|(k, t)| (k.clone(), AdamState::new(t.shape())))
            .collect();
        Self { lr, config, states }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        if let Some(extra) = grads.keys().find(|k| !params.contains(k)) {
            return Err(Error::MissingComponent(format!("gradient for unknown parameter {extra}")));
        }
        for (name, p) in params.iter_mut() {
            let state = self
                .states
                .get_mut(name)
                .ok_or_else(|| Error::MissingComponent(format!("optimizer state for {name}")))?;
            match grads.get(name) {
                Some(g) => adam_update(p, g, state, self.lr, &self.config)?,
                None => adam_update(p, &Tensor::zeros(p.shape()), state, self.lr, &self.config)?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut s = AdamState::new(&[3]);
        adam_update(&mut p, &Tensor::zeros(&[3]), &mut s, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.t, 1);
        assert!(adam_update(&mut p, &Tensor::zeros(&[2]), &mut s, 0.1, &AdamConfig::default()).is_err());
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let mut p = Tensor::zeros(&[1]);
        let mut s = AdamState::new(&[1]);
        let g = Tensor::full(&[1], 0.37);
        let lr = 0.01;
        let mut last = 0.0;
        for _ in 0..1000 {
            last = p.data()[0];
            adam_update(&mut p, &g, &mut s, lr, &AdamConfig::default()).unwrap();
        }
        let step = last - p.data()[0];
        assert!((step - lr).abs() / lr < 0.01, "{step}");
    }

    #[test]
    fn matches_straight_line_reference() {
        // f(x) = Σ a_i (x_i − c_i)²
        let a = [1.0, 3.0, 0.2];
        let c = [0.5, -1.0, 2.0];
        let mut p = Tensor::from_vec(&[3], vec![0.0, 0.0, 0.0]).unwrap();
        let mut s = AdamState::new(&[3]);
        let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
        let mut x = [0.0f64; 3];
        let mut m = [0.0f64; 3];
        let mut v = [0.0f64; 3];
        for t in 1..=10 {
            let g = Tensor::from_fn(&[3], |i| 2.0 * a[i] * (p.data()[i] - c[i]));
            adam_update(&mut p, &g, &mut s, lr, &AdamConfig::default()).unwrap();
            for i in 0..3 {
                let gi = 2.0 * a[i] * (x[i] - c[i]);
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] / (1.0 - f64::powi(b1, t));
                let vh = v[i] / (1.0 - f64::powi(b2, t));
                x[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        for i in 0..3 {
            assert!((p.data()[i] - x[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn optimizer_over_param_set() {
        let mut ps = ParamSet::new(0);
        ps.insert("a", Tensor::full(&[2], 1.0)).unwrap();
        ps.insert("b", Tensor::full(&[1], 1.0)).unwrap();
        let mut opt = Adam::new(&ps, 0.1, AdamConfig::default());
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::full(&[2], 1.0));
        opt.step(&mut ps, &grads).unwrap();
        assert!((ps.get("a").unwrap().data()[0] - 0.9).abs() < 1e-6);
        assert_eq!(ps.get("b").unwrap().data()[0], 1.0);
        grads.insert("zzz".to_string(), Tensor::full(&[1], 1.0));
        assert!(opt.step(&mut ps, &grads).is_err());
    }
}
