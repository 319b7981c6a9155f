//! Batch normalization over (batch, time, freq) per channel, plus the ELU
//! activation.

use ndarray::{Array1, Array4, Axis};

use super::{c, Param, Parameterized, Real};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm2d<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub channels: usize,
}

/// Activations saved by the training-mode forward pass.
pub struct BnCtx<F> {
    pub xhat: Array4<F>,
    pub inv_std: Array1<F>,
}

/// Running-statistics update computed by the forward pass; the training loop
/// applies it so that the forward itself stays a pure function.
pub struct BnStats<F> {
    pub mean: Array1<F>,
    pub var_unbiased: Array1<F>,
}

impl<F: Real> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(ndarray::ArrayD::ones(ndarray::IxDyn(&[channels]))),
            beta: Param::zeros(ndarray::Ix1(channels)),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            channels,
        }
    }

    /// Training forward with batch statistics.
    pub fn forward_train(&self, x: &Array4<F>) -> (Array4<F>, BnCtx<F>, BnStats<F>) {
        let (b, ch, t, f) = x.dim();
        debug_assert_eq!(ch, self.channels);
        let n = (b * t * f) as f64;
        let mut mean = Array1::zeros(ch);
        let mut var = Array1::zeros(ch);
        for cidx in 0..ch {
            let plane = x.index_axis(Axis(1), cidx);
            let m = plane.sum() / c::<F>(n);
            let v = plane.iter().map(|&u| (u - m) * (u - m)).fold(F::zero(), |a, b| a + b)
                / c::<F>(n);
            mean[cidx] = m;
            var[cidx] = v;
        }
        let inv_std = var.mapv(|v| F::one() / (v + c::<F>(BN_EPS)).sqrt());
        let mut xhat = x.clone();
        let mut out = Array4::zeros(x.raw_dim());
        let gamma = self.gamma.value.as_slice().unwrap();
        let beta = self.beta.value.as_slice().unwrap();
        for cidx in 0..ch {
            let m = mean[cidx];
            let is = inv_std[cidx];
            let (g, bta) = (gamma[cidx], beta[cidx]);
            let mut xh = xhat.index_axis_mut(Axis(1), cidx);
            let mut o = out.index_axis_mut(Axis(1), cidx);
            ndarray::Zip::from(&mut o).and(&mut xh).for_each(|ov, xv| {
                *xv = (*xv - m) * is;
                *ov = g * *xv + bta;
            });
        }
        let bessel = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let stats = BnStats {
            mean,
            var_unbiased: var.mapv(|v| v * c::<F>(bessel)),
        };
        (out, BnCtx { xhat, inv_std }, stats)
    }

    /// Folds fresh batch statistics into the running estimates.
    pub fn update_running(&mut self, stats: &BnStats<F>) {
        let m = c::<F>(BN_MOMENTUM);
        let keep = F::one() - m;
        for i in 0..self.channels {
            self.running_mean[i] = keep * self.running_mean[i] + m * stats.mean[i];
            self.running_var[i] = keep * self.running_var[i] + m * stats.var_unbiased[i];
        }
    }

    /// Inference forward with running statistics.
    pub fn forward_eval(&self, x: &Array4<F>) -> Array4<F> {
        let mut out = x.clone();
        let gamma = self.gamma.value.as_slice().unwrap();
        let beta = self.beta.value.as_slice().unwrap();
        for cidx in 0..self.channels {
            let m = self.running_mean[cidx];
            let is = F::one() / (self.running_var[cidx] + c::<F>(BN_EPS)).sqrt();
            let (g, bta) = (gamma[cidx], beta[cidx]);
            out.index_axis_mut(Axis(1), cidx)
                .mapv_inplace(|v| g * (v - m) * is + bta);
        }
        out
    }

    pub fn backward(&mut self, ctx: &BnCtx<F>, dy: &Array4<F>) -> Array4<F> {
        let (b, ch, t, f) = dy.dim();
        let n = c::<F>((b * t * f) as f64);
        let mut dx = Array4::zeros(dy.raw_dim());
        let gamma = self.gamma.value.as_slice().unwrap().to_vec();
        let dgamma = self.gamma.grad.as_slice_mut().unwrap();
        let dbeta = self.beta.grad.as_slice_mut().unwrap();
        for cidx in 0..ch {
            let xh = ctx.xhat.index_axis(Axis(1), cidx);
            let dyc = dy.index_axis(Axis(1), cidx);
            let sum_dy = dyc.sum();
            let sum_dy_xhat = ndarray::Zip::from(&dyc)
                .and(&xh)
                .fold(F::zero(), |acc, &d, &x| acc + d * x);
            dgamma[cidx] = dgamma[cidx] + sum_dy_xhat;
            dbeta[cidx] = dbeta[cidx] + sum_dy;
            let scale = gamma[cidx] * ctx.inv_std[cidx] / n;
            let mut dxc = dx.index_axis_mut(Axis(1), cidx);
            ndarray::Zip::from(&mut dxc)
                .and(&dyc)
                .and(&xh)
                .for_each(|o, &d, &x| {
                    *o = scale * (n * d - sum_dy - x * sum_dy_xhat);
                });
        }
        dx
    }
}

impl<F: Real> Parameterized<F> for BatchNorm2d<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

/// ELU with alpha = 1.
pub fn elu_forward<F: Real>(x: &Array4<F>) -> Array4<F> {
    x.mapv(|v| if v > F::zero() { v } else { v.exp() - F::one() })
}

/// Backward from the saved output (ELU is invertible on sign).
pub fn elu_backward<F: Real>(y: &Array4<F>, dy: &Array4<F>) -> Array4<F> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
        if yv <= F::zero() {
            *d = *d * (yv + F::one());
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::component_rng;
    use rand::Rng;

    #[test]
    fn bn_train_normalizes_batch() {
        let mut rng = component_rng(1, "bn");
        let x = Array4::from_shape_fn((4, 3, 5, 6), |_| rng.gen_range(-2.0..2.0) + 1.5);
        let bn = BatchNorm2d::<f64>::new(3);
        let (_y, ctx, _stats) = bn.forward_train(&x);
        for cidx in 0..3 {
            let xh = ctx.xhat.index_axis(Axis(1), cidx);
            let n = xh.len() as f64;
            let mean = xh.sum() / n;
            let var = xh.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4); // eps-shifted
        }
    }

    #[test]
    fn bn_eval_is_deterministic_affine() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.running_mean = ndarray::array![0.5, -0.25];
        bn.running_var = ndarray::array![4.0, 1.0];
        let x = Array4::<f64>::from_elem((1, 2, 1, 1), 1.0);
        let y = bn.forward_eval(&x);
        assert!((y[[0, 0, 0, 0]] - (1.0 - 0.5) / (4.0f64 + 1e-5).sqrt()).abs() < 1e-9);
        assert!((y[[0, 1, 0, 0]] - 1.25 / (1.0f64 + 1e-5).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn bn_gradients_match_finite_differences() {
        let mut rng = component_rng(2, "bn");
        let x = Array4::from_shape_fn((3, 2, 2, 4), |_| rng.gen_range(-1.0..1.0));
        let proj = Array4::from_shape_fn((3, 2, 2, 4), |_| rng.gen_range(-1.0..1.0));
        let mut bn = BatchNorm2d::<f64>::new(2);
        // non-trivial affine params
        bn.gamma.value.as_slice_mut().unwrap().copy_from_slice(&[1.3, 0.7]);
        bn.beta.value.as_slice_mut().unwrap().copy_from_slice(&[0.2, -0.4]);
        let (_, ctx, _) = bn.forward_train(&x);
        bn.zero_grads();
        let dx = bn.backward(&ctx, &proj);
        let worst = crate::nn::gradcheck::max_param_grad_error(
            &mut bn,
            |m| (m.forward_train(&x).0 * &proj).sum(),
            4,
            1e-6,
            3,
        );
        assert!(worst < 1e-7, "param grad error {worst}");
        // input grad FD
        let mut xp = x.clone();
        let h = 1e-6;
        for &(s, cc, tt, ff) in &[(0usize, 0usize, 0usize, 0usize), (2, 1, 1, 3)] {
            xp[[s, cc, tt, ff]] += h;
            let up = (bn.forward_train(&xp).0 * &proj).sum();
            xp[[s, cc, tt, ff]] -= 2.0 * h;
            let down = (bn.forward_train(&xp).0 * &proj).sum();
            xp[[s, cc, tt, ff]] += h;
            let numeric = (up - down) / (2.0 * h);
            let analytic = dx[[s, cc, tt, ff]];
            assert!(
                (analytic - numeric).abs() / numeric.abs().max(1e-8) < 1e-5,
                "{analytic} vs {numeric}"
            );
        }
    }

    #[test]
    fn elu_shapes_and_values() {
        let x: Array4<f64> = ndarray::array![[[[1.5, -1.0, 0.0, -3.0]]]];
        let y = elu_forward(&x);
        assert!((y[[0, 0, 0, 0]] - 1.5).abs() < 1e-12);
        assert!((y[[0, 0, 0, 1]] - ((-1.0f64).exp() - 1.0)).abs() < 1e-12);
        assert_eq!(y[[0, 0, 0, 2]], 0.0);
        let dy = Array4::ones(x.raw_dim());
        let dx = elu_backward(&y, &dy);
        assert_eq!(dx[[0, 0, 0, 0]], 1.0);
        assert!((dx[[0, 0, 0, 1]] - (-1.0f64).exp()).abs() < 1e-12);
    }
}
