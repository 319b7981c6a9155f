//! Fully connected layer and the clamped softmax cross-entropy head.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha12Rng;

use super::{c, uniform_init, Param, Parameterized, Real};

#[derive(Debug, Clone)]
pub struct Linear<F> {
    /// (out, in)
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub in_features: usize,
    pub out_features: usize,
}

impl<F: Real> Linear<F> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut ChaCha12Rng) -> Self {
        let limit = 1.0 / (in_features as f64).sqrt();
        Linear {
            weight: Param::new(uniform_init(&[out_features, in_features], limit, rng)),
            bias: Param::new(uniform_init(&[out_features], limit, rng)),
            in_features,
            out_features,
        }
    }

    /// (B, in) -> (B, out)
    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let w = self.weight.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut y = x.dot(&w.t());
        let b = self.bias.value.as_slice().unwrap();
        for mut row in y.rows_mut() {
            for (v, bias) in row.iter_mut().zip(b) {
                *v = *v + *bias;
            }
        }
        y
    }

    pub fn backward(&mut self, x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
        let w = self.weight.value.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        let mut wg = self.weight.grad.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
        wg += &dy.t().dot(x);
        let bg = self.bias.grad.as_slice_mut().unwrap();
        for row in dy.rows() {
            for (g, v) in bg.iter_mut().zip(row) {
                *g = *g + *v;
            }
        }
        dy.dot(&w)
    }
}

impl<F: Real> Parameterized<F> for Linear<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Probability clamp for the cross-entropy: predictions are confined to
/// [1e-7, 1 - 1e-7] so the loss stays finite.
pub const PROB_CLAMP: f64 = 1e-7;

/// Softmax of two logits; returns (p_genuine, p_replay).
pub fn softmax2<F: Real>(logits: (F, F)) -> (F, F) {
    let m = if logits.0 > logits.1 { logits.0 } else { logits.1 };
    let e0 = (logits.0 - m).exp();
    let e1 = (logits.1 - m).exp();
    let s = e0 + e1;
    (e0 / s, e1 / s)
}

/// Mean clamped binary cross-entropy over a batch of 2-class logits, and its
/// gradient with respect to the logits.
pub fn softmax_bce<F: Real>(logits: &Array2<F>, labels: &[usize]) -> (F, Array2<F>) {
    let b = logits.nrows();
    assert_eq!(b, labels.len());
    let lo = c::<F>(PROB_CLAMP);
    let hi = F::one() - lo;
    let inv_b = c::<F>(1.0 / b as f64);
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = F::zero();
    for (i, &y) in labels.iter().enumerate() {
        let (p0, p1) = softmax2((logits[[i, 0]], logits[[i, 1]]));
        let p_replay = p1;
        let clamped = p_replay.max(lo).min(hi);
        let term = if y == 1 {
            -clamped.ln()
        } else {
            -(F::one() - clamped).ln()
        };
        loss = loss + term;
        if p_replay > lo && p_replay < hi {
            // standard softmax cross-entropy gradient
            let t0 = if y == 0 { F::one() } else { F::zero() };
            let t1 = F::one() - t0;
            grad[[i, 0]] = (p0 - t0) * inv_b;
            grad[[i, 1]] = (p1 - t1) * inv_b;
        }
        // inside the clamp region the loss is flat in the logits
    }
    (loss * inv_b, grad)
}

/// The spec-level scalar op: clamped binary cross-entropy of one prediction.
pub fn bce_loss(p_replay: f64, label: u8) -> f64 {
    let p = p_replay.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Weighted total: bce + lambda_orth * orth + lambda_sparse * sparse.
pub fn total_loss(bce: f64, l_orth: f64, l_sparse: f64, lambda_orth: f64, lambda_sparse: f64) -> f64 {
    bce + lambda_orth * l_orth + lambda_sparse * l_sparse
}

/// Mean row-wise Euclidean projection used by tests.
#[cfg(test)]
pub(crate) fn onehot(label: usize) -> Array1<f64> {
    let mut v = Array1::zeros(2);
    v[label] = 1.0;
    v
}
