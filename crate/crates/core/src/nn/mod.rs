//! Minimal dense/convolutional/recurrent network stack with hand-derived
//! backward passes.
//!
//! Everything is generic over [`Real`] so training can run in f32 while
//! gradient verification runs in f64. Backward passes accumulate into
//! per-parameter `.grad` buffers; optimizers and checkpoints address
//! parameters through [`visit`](Param) callbacks in a fixed declaration
//! order, which keeps updates deterministic.

pub mod adam;
pub mod conv;
pub mod dense;
pub mod gru;
pub mod norm;
pub mod pool;

use ndarray::{ArrayD, Dimension, IxDyn};
use rand::distributions::uniform::SampleUniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

pub use adam::Adam;
pub use conv::Conv2d;
pub use dense::{softmax2, Linear};
pub use gru::BiGru;
pub use norm::BatchNorm2d;
pub use pool::DualPoolFreq;

/// Element type of all network math.
pub trait Real:
    ndarray::NdFloat + num_traits::FromPrimitive + SampleUniform + serde::Serialize
{
    /// Magnitude floor used in backward passes that divide by |z|^3.
    const MAG_GUARD: Self;
}

impl Real for f32 {
    const MAG_GUARD: f32 = 1e-6;
}

impl Real for f64 {
    const MAG_GUARD: f64 = 1e-30;
}

/// Shorthand f64 -> F conversion.
#[inline]
pub fn c<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("f64 conversion")
}

/// One learnable tensor and its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
}

impl<F: Real> Param<F> {
    pub fn new(value: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zeros<D: Dimension>(dim: D) -> Self {
        Param::new(ArrayD::zeros(IxDyn(dim.slice())))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Uniform init in [-limit, limit] from a dedicated stream.
pub fn uniform_init<F: Real>(dim: &[usize], limit: f64, rng: &mut ChaCha12Rng) -> ArrayD<F> {
    let n: usize = dim.iter().product();
    let lim = c::<F>(limit);
    let data: Vec<F> = (0..n).map(|_| rng.gen_range(-lim..=lim)).collect();
    ArrayD::from_shape_vec(IxDyn(dim), data).expect("shape/product mismatch")
}

/// Seeded stream for one named component.
pub fn component_rng(seed: u64, component: &str) -> ChaCha12Rng {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in component.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    ChaCha12Rng::seed_from_u64(seed ^ h)
}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// GEMM outputs are not always C-order (degenerate inner dimensions come back
/// F-order); force standard layout before reshaping.
pub fn into_standard<F: Real, D: Dimension>(
    a: ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Walks every parameter of a component in declaration order.
pub trait Parameterized<F: Real> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>));

    fn zero_grads(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central finite-difference verification used by layer unit tests.

    use super::*;

    /// Relative error between analytic and numeric directional derivatives on
    /// `n_probe` single-coordinate perturbations of every parameter tensor.
    ///
    /// `loss` must be a pure function of the parameters reachable through
    /// `visit`.
    pub fn max_param_grad_error<M>(
        model: &mut M,
        mut loss: impl FnMut(&mut M) -> f64,
        n_probe: usize,
        step: f64,
        seed: u64,
    ) -> f64
    where
        M: Parameterized<f64>,
    {
        // gather analytic grads first
        let mut names = Vec::new();
        model.visit_params("", &mut |name, p| names.push((name.to_string(), p.len())));
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for (name, len) in names {
            for _ in 0..n_probe {
                let idx = rng.gen_range(0..len);
                let mut analytic = f64::NAN;
                model.visit_params("", &mut |n, p| {
                    if n == name {
                        analytic = p.grad.as_slice().unwrap()[idx];
                    }
                });
                let mut poke = |delta: f64, m: &mut M| {
                    m.visit_params("", &mut |n, p| {
                        if n == name {
                            p.value.as_slice_mut().unwrap()[idx] += delta;
                        }
                    });
                };
                poke(step, model);
                let up = loss(model);
                poke(-2.0 * step, model);
                let down = loss(model);
                poke(step, model);
                let numeric = (up - down) / (2.0 * step);
                // absolute floor: exactly-zero gradients (e.g. a bias feeding
                // batch norm) read as finite-difference noise
                let abs_err = (analytic - numeric).abs();
                let err = if abs_err < 1e-7 {
                    0.0
                } else {
                    abs_err / analytic.abs().max(numeric.abs())
                };
                if err > worst {
                    worst = err;
                    eprintln!(
                        "gradcheck worst: {name}[{idx}] analytic={analytic:.6e} numeric={numeric:.6e} err={err:.3e}"
                    );
                }
            }
        }
        worst
    }
}
