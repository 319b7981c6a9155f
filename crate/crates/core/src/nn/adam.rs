//! Adaptive moment estimation over a parameterized component.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::{c, Parameterized, Real};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Keeps first/second moment estimates keyed by parameter name; names come
/// from the component's fixed visit order, so updates are deterministic.
pub struct Adam<F> {
    state: BTreeMap<String, (ArrayD<F>, ArrayD<F>)>,
    step_count: u64,
}

impl<F: Real> Adam<F> {
    pub fn new() -> Self {
        Adam {
            state: BTreeMap::new(),
            step_count: 0,
        }
    }

    pub fn step<M: Parameterized<F>>(&mut self, model: &mut M, lr: f64) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = c::<F>(1.0 / (1.0 - BETA1.powf(t)));
        let bc2 = c::<F>(1.0 / (1.0 - BETA2.powf(t)));
        let (b1, b2) = (c::<F>(BETA1), c::<F>(BETA2));
        let (one_m_b1, one_m_b2) = (F::one() - b1, F::one() - b2);
        let eps = c::<F>(ADAM_EPS);
        let lr = c::<F>(lr);
        let state = &mut self.state;
        model.visit_params("", &mut |name, p| {
            let (m, v) = state.entry(name.to_string()).or_insert_with(|| {
                (ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim()))
            });
            let value = p.value.as_slice_mut().unwrap();
            let grad = p.grad.as_slice().unwrap();
            let m = m.as_slice_mut().unwrap();
            let v = v.as_slice_mut().unwrap();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + one_m_b1 * g;
                v[i] = b2 * v[i] + one_m_b2 * g * g;
                let mhat = m[i] * bc1;
                let vhat = v[i] * bc2;
                value[i] = value[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
}

impl<F: Real> Default for Adam<F> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;

    struct Quad {
        p: Param<f64>,
    }

    impl Parameterized<f64> for Quad {
        fn visit_params(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            f("p", &mut self.p);
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut model = Quad {
            p: Param::new(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[3]), 2.0)),
        };
        let mut opt = Adam::new();
        for _ in 0..400 {
            // f(p) = 0.5 * |p|^2, grad = p
            let g = model.p.value.clone();
            model.p.grad.assign(&g);
            opt.step(&mut model, 0.05);
            model.p.zero_grad();
        }
        assert!(model.p.value.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn first_step_is_lr_sized() {
        let mut model = Quad {
            p: Param::new(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1]), 1.0)),
        };
        model.p.grad.fill(0.3);
        let mut opt = Adam::new();
        opt.step(&mut model, 0.001);
        // bias-corrected first step moves by ~lr regardless of grad scale
        assert!((model.p.value[[0]] - (1.0 - 0.001)).abs() < 1e-6);
    }
}
