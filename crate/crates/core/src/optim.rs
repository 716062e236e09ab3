//! Adam with bias correction and a fixed learning rate.

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    /// First moments, in parameter order.
    pub m: Vec<Tensor<T>>,
    /// Second moments, in parameter order.
    pub v: Vec<Tensor<T>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()).expect("parameter shape is valid"))
                .collect::<Vec<_>>()
        };
        Adam {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::MissingGradient(format!(
                "{} gradients and {} moments for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        for ((_, p), (name, g)) in params.iter().zip(grads.iter()) {
            if p.name != name || p.value.shape() != g.shape() {
                return Err(Error::MissingGradient(p.name.clone()));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powf(self.t as f64);
        let c2 = 1.0 - beta2.powf(self.t as f64);
        for (((param, (_, g)), m), v) in params.iter_mut().zip(grads.iter()).zip(&mut self.m).zip(&mut self.v) {
            let (pd, md, vd) = (param.value.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                let gi = gi.as_f64();
                let mi = beta1 * md[i].as_f64() + (1.0 - beta1) * gi;
                let vi = beta2 * vd[i].as_f64() + (1.0 - beta2) * gi * gi;
                md[i] = T::of(mi);
                vd[i] = T::of(vi);
                let step = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                pd[i] = T::of(pd[i].as_f64() - step);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_f64(&[1], &[v]).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = one_param(0.7);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        let g = Gradients::zeros_like(&s);
        adam.update(&mut s, &g).unwrap();
        assert_eq!(s.value(s.id("w").unwrap()).data(), &[0.7]);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let mut s = one_param(0.0);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        let mut g = Gradients::zeros_like(&s);
        g.iter_mut().next().unwrap().data_mut()[0] = 0.5;
        adam.update(&mut s, &g).unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * 0.5 / (0.5 + eps).
        let expected = -1e-4 * 0.5 / (0.5 + 1e-8);
        assert!((s.value(s.id("w").unwrap()).data()[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut s = one_param(0.0);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        let mut other = ParamStore::<f64>::new();
        other.add("u", Tensor::zeros(&[1]).unwrap()).unwrap();
        let g = Gradients::zeros_like(&other);
        assert!(matches!(adam.update(&mut s, &g), Err(Error::MissingGradient(_))));
        let empty = Gradients::zeros_like(&ParamStore::<f64>::new());
        assert!(adam.update(&mut s, &empty).is_err());
    }
}
