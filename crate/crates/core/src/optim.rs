// SPDX-License-Identifier: Apache-2.0

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: applied as `p -= lr · wd · p`, independent of the moments.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S: Scalar = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor<S>>,
    pub second_moment: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParameterStore<S>, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }

    /// One update with gradients in store order.
    pub fn step(&mut self, params: &mut ParameterStore<S>, grads: &[Tensor<S>]) -> Result<()> {
        if grads.len() != params.len() || self.first_moment.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} params, {} grads, {} moments",
                    params.len(),
                    grads.len(),
                    self.first_moment.len()
                ),
            ));
        }
        for ((i, (name, p)), g) in params.iter().enumerate().zip(grads) {
            if p.shape() != g.shape() || self.first_moment[i].shape() != p.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("'{name}' is {:?}, gradient {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let (ob1, ob2) = (S::one() - b1, S::one() - b2);
        let step_size = S::lit(c.learning_rate / bc1);
        let inv_bc2_sqrt = S::lit(1.0 / bc2.sqrt());
        let eps = S::lit(c.eps);
        let decay = S::lit(c.learning_rate * c.weight_decay);

        for (((p, g), m), v) in params
            .values_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + ob1 * gv;
                *vv = b2 * *vv + ob2 * gv * gv;
                let update = step_size * *mv / ((*vv).sqrt() * inv_bc2_sqrt + eps);
                *pv = *pv - decay * *pv - update;
            }
        }
        Ok(())
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sq_norm().f64()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = S::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale_inplace(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::scalar(w)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = single(1.25);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(&p, cfg);
        for _ in 0..5 {
            st.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data(), &[1.25]);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_has_learning_rate_magnitude() {
        // m̂ = g and v̂ = g² after bias correction, so |Δ| = lr·|g|/(|g| + eps).
        let mut p = single(0.0);
        let cfg = AdamConfig {
            learning_rate: 1e-2,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(&p, cfg);
        st.step(&mut p, &[Tensor::scalar(3.0)]).unwrap();
        let expected = -1e-2 * 3.0 / (3.0 + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn minimises_quadratic_bowl() {
        let mut p = single(1.0);
        let cfg = AdamConfig {
            learning_rate: 0.05,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(&p, cfg);
        let mut steps = 0;
        while p.get("w").unwrap().data()[0].powi(2) >= 1e-6 {
            let w = p.get("w").unwrap().data()[0];
            st.step(&mut p, &[Tensor::scalar(2.0 * w)]).unwrap();
            steps += 1;
            assert!(steps <= 2000, "not converged");
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = single(1.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        assert!(st.step(&mut p, &[Tensor::zeros(&[2])]).is_err());
        assert!(st.step(&mut p, &[]).is_err());
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::<f64>::new(&[2], vec![3.0, 4.0]).unwrap()];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        assert_eq!(clip_global_norm(&mut g, 10.0), 1.0);
    }
}
