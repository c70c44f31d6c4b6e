//! Bias-corrected Adam.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::ParamGradient;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// Rebuilds an optimizer from saved moments.
    pub fn from_state(step: u64, m: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if m.len() != v.len() {
            return Err(Error::Length {
                context: "adam moments",
                expected: m.len(),
                got: v.len(),
            });
        }
        Ok(Self {
            step,
            m,
            v,
            ..Self::new(0)
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Descends `params` along `grad` and returns the norm of the applied update.
    ///
    /// Entries where `frozen` is true are neither updated nor tracked. State is
    /// untouched when the gradient is rejected.
    pub fn update(&mut self, params: &mut [f64], grad: &ParamGradient, lr: f64, frozen: Option<&[bool]>) -> Result<f64> {
        let g = grad.dtheta();
        for (context, len) in [("adam parameters", params.len()), ("adam gradient", g.len())] {
            if len != self.m.len() {
                return Err(Error::Length {
                    context,
                    expected: self.m.len(),
                    got: len,
                });
            }
        }
        if let Some(mask) = frozen {
            if mask.len() != self.m.len() {
                return Err(Error::Length {
                    context: "frozen mask",
                    expected: self.m.len(),
                    got: mask.len(),
                });
            }
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        self.step += 1;
        let c1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        let mut sq = 0.0;
        for k in 0..params.len() {
            if frozen.is_some_and(|m| m[k]) {
                continue;
            }
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g[k];
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g[k] * g[k];
            let m_hat = self.m[k] / c1;
            let v_hat = self.v[k] / c2;
            let delta = lr * m_hat / (libm::sqrt(v_hat) + self.eps);
            params[k] -= delta;
            sq += delta * delta;
        }
        Ok(libm::sqrt(sq))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut adam = Adam::new(3);
        let mut p = vec![0.5, -1.0, 2.0];
        let n = adam.update(&mut p, &ParamGradient::zeros(3), 1e-2, None).unwrap();
        assert_eq!(p, vec![0.5, -1.0, 2.0]);
        assert_eq!(n, 0.0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so |Δ| = lr·|g|/(|g| + eps)
        for g in [0.05f64, 0.7, -4.0, 250.0, 1e-3] {
            let want = 1e-3 * g.abs() / (g.abs() + DEFAULT_EPS);
            let mut adam = Adam::new(2);
            let mut p = vec![0.0, 1.0];
            adam.update(&mut p, &ParamGradient::from_vec(vec![g, g]), 1e-3, None).unwrap();
            for (after, before) in p.iter().zip([0.0, 1.0]) {
                let moved = (before - after) * g.signum();
                assert!((moved - want).abs() <= 1e-12 * want, "g={g}: {moved}");
                if g.abs() >= 0.05 {
                    assert!((moved - 1e-3).abs() <= 1e-6 * 1e-3);
                }
            }
        }
    }

    #[test]
    fn rejects_non_finite_and_keeps_state() {
        let mut adam = Adam::new(2);
        let mut p = vec![1.0, 2.0];
        let bad = ParamGradient::from_vec(vec![f64::NAN, 0.0]);
        assert_eq!(adam.update(&mut p, &bad, 1e-3, None), Err(Error::NonFinite("gradient")));
        assert_eq!(adam.step_count(), 0);
        assert_eq!(p, vec![1.0, 2.0]);
        assert!(adam.update(&mut p, &ParamGradient::zeros(3), 1e-3, None).is_err());
        assert!(adam.update(&mut p, &ParamGradient::zeros(2), 0.0, None).is_err());
    }

    #[test]
    fn frozen_entries_stay_put() {
        let mut adam = Adam::new(3);
        let mut p = vec![0.0; 3];
        let mask = [false, true, false];
        adam.update(&mut p, &ParamGradient::from_vec(vec![1.0; 3]), 0.1, Some(&mask)).unwrap();
        assert_eq!(p[1], 0.0);
        assert!(p[0] < 0.0 && p[2] < 0.0);
        assert_eq!(adam.first_moment()[1], 0.0);
    }

    #[test]
    fn restored_state_continues_identically() {
        let grads: Vec<ParamGradient> = (0..6).map(|k| ParamGradient::from_vec(vec![k as f64 - 2.5, 1.0 / (k + 1) as f64])).collect();
        let mut a = Adam::new(2);
        let mut pa = vec![0.1, 0.2];
        for g in &grads[..3] {
            a.update(&mut pa, g, 1e-2, None).unwrap();
        }
        let mut b = Adam::from_state(a.step_count(), a.first_moment().to_vec(), a.second_moment().to_vec()).unwrap();
        let mut pb = pa.clone();
        for g in &grads[3..] {
            a.update(&mut pa, g, 1e-2, None).unwrap();
            b.update(&mut pb, g, 1e-2, None).unwrap();
        }
        assert_eq!(pa, pb);
    }

    proptest! {
        #[test]
        fn update_never_exceeds_lr_per_coordinate_on_first_step(g in prop::collection::vec(-1e3f64..1e3, 1..16), lr in 1e-6f64..1.0) {
            let mut adam = Adam::new(g.len());
            let mut p = vec![0.0; g.len()];
            adam.update(&mut p, &ParamGradient::from_vec(g), lr, None).unwrap();
            prop_assert!(p.iter().all(|v| v.abs() <= lr * (1.0 + 1e-12)));
        }
    }
}
