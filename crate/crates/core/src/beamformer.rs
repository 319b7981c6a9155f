//! Learned adaptive beamformer: a small CNN that maps the stacked
//! real/imaginary channel spectra to complex per-bin combination weights,
//! the weighted-sum combination itself, and the two weight regularizers.
//!
//! Complex tensors are carried as 2N real channels ordered
//! `[re_1..re_N, im_1..im_N]`.

use ndarray::{Array2, Array3, Array4, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp::{ComplexSpectrogram, StftParams};
use crate::error::{Error, Result};
use crate::nn::{
    c, component_rng, norm::BnCtx, norm::BnStats, BatchNorm2d, Conv2d, Param, Parameterized, Real,
};

/// Epsilon guarding the normalized orthogonality denominator.
pub const ORTH_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamformerConfig {
    pub hidden_channels: usize,
    pub kernel: (usize, usize),
}

impl Default for BeamformerConfig {
    fn default() -> Self {
        BeamformerConfig {
            hidden_channels: 16,
            kernel: (3, 3),
        }
    }
}

/// Conv2d -> BatchNorm -> ELU -> Conv2d, fully convolutional over (T, F).
#[derive(Debug, Clone)]
pub struct BeamformerNet<F> {
    pub conv1: Conv2d<F>,
    pub bn: BatchNorm2d<F>,
    pub conv2: Conv2d<F>,
    pub n_channels: usize,
    pub config: BeamformerConfig,
}

pub struct BeamformerTape<F> {
    bn_ctx: BnCtx<F>,
    pub bn_stats: BnStats<F>,
    elu_out: Array4<F>,
}

impl<F: Real> BeamformerNet<F> {
    /// Deterministic initialization from a seed.
    pub fn seeded(n_channels: usize, config: BeamformerConfig, seed: u64) -> Result<Self> {
        if n_channels < 1 {
            return Err(Error::Parameter(format!(
                "beamformer needs at least one channel, got {n_channels}"
            )));
        }
        if config.hidden_channels < 1 {
            return Err(Error::Parameter("hidden_channels must be positive".into()));
        }
        if config.kernel.0 % 2 == 0 || config.kernel.1 % 2 == 0 {
            return Err(Error::Parameter(format!(
                "same-padding needs odd kernel sides, got {:?}",
                config.kernel
            )));
        }
        let mut rng = component_rng(seed, "beamformer");
        Ok(BeamformerNet {
            conv1: Conv2d::new(2 * n_channels, config.hidden_channels, config.kernel, &mut rng),
            bn: BatchNorm2d::new(config.hidden_channels),
            conv2: Conv2d::new(config.hidden_channels, 2 * n_channels, config.kernel, &mut rng),
            n_channels,
            config,
        })
    }

    fn check_input(&self, x: &Array4<F>) -> Result<()> {
        if x.dim().1 != 2 * self.n_channels {
            return Err(Error::Shape(format!(
                "beamformer built for {} channels (2N = {}), input has {} stacked channels",
                self.n_channels,
                2 * self.n_channels,
                x.dim().1
            )));
        }
        Ok(())
    }

    /// Training forward: (B, 2N, T, F) -> weights (B, 2N, T, F).
    pub fn forward_train(&self, x: &Array4<F>) -> Result<(Array4<F>, BeamformerTape<F>)> {
        self.check_input(x)?;
        let conv1_out = self.conv1.forward(x)?;
        let (bn_out, bn_ctx, bn_stats) = self.bn.forward_train(&conv1_out);
        drop(conv1_out);
        let elu_out = crate::nn::norm::elu_forward(&bn_out);
        let w = self.conv2.forward(&elu_out)?;
        Ok((
            w,
            BeamformerTape {
                bn_ctx,
                bn_stats,
                elu_out,
            },
        ))
    }

    /// Inference forward with running batch-norm statistics.
    pub fn forward_eval(&self, x: &Array4<F>) -> Result<Array4<F>> {
        self.check_input(x)?;
        let h = self.conv1.forward(x)?;
        let h = self.bn.forward_eval(&h);
        let h = crate::nn::norm::elu_forward(&h);
        self.conv2.forward(&h)
    }

    /// Accumulates parameter gradients; input gradient is not needed because
    /// the spectrogram is data.
    pub fn backward(&mut self, x: &Array4<F>, tape: &BeamformerTape<F>, dw: &Array4<F>) -> Result<()> {
        let delu = self.conv2.backward(&tape.elu_out, dw)?;
        let dbn = crate::nn::norm::elu_backward(&tape.elu_out, &delu);
        let dconv1 = self.bn.backward(&tape.bn_ctx, &dbn);
        let _ = self.conv1.backward(x, &dconv1)?;
        Ok(())
    }
}

impl<F: Real> Parameterized<F> for BeamformerNet<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.conv1.visit_params(&format!("{prefix}conv1"), f);
        self.bn.visit_params(&format!("{prefix}bn"), f);
        self.conv2.visit_params(&format!("{prefix}conv2"), f);
    }
}

/// Complex combination weights, shape [N x T x F].
#[derive(Debug, Clone)]
pub struct BeamformerWeights {
    pub values: Array3<Complex64>,
}

/// Single-channel beamformed spectrogram, shape [T x F].
#[derive(Debug, Clone)]
pub struct BeamformedSpectrogram {
    pub values: Array2<Complex64>,
    pub params: StftParams,
}

/// Stacks a complex spectrogram into 2N real channels.
pub fn stack_complex<F: Real>(spec: &ComplexSpectrogram) -> Array4<F> {
    let (n, t, fq) = spec.values.dim();
    let mut out = Array4::zeros((1, 2 * n, t, fq));
    for ch in 0..n {
        for tt in 0..t {
            for ff in 0..fq {
                let z = spec.values[[ch, tt, ff]];
                out[[0, ch, tt, ff]] = c::<F>(z.re);
                out[[0, n + ch, tt, ff]] = c::<F>(z.im);
            }
        }
    }
    out
}

fn unstack_complex<F: Real>(w: &Array4<F>) -> Array3<Complex64> {
    let (_, two_n, t, fq) = w.dim();
    let n = two_n / 2;
    let mut out = Array3::zeros((n, t, fq));
    for ch in 0..n {
        for tt in 0..t {
            for ff in 0..fq {
                out[[ch, tt, ff]] = Complex64::new(
                    w[[0, ch, tt, ff]].to_f64().unwrap(),
                    w[[0, n + ch, tt, ff]].to_f64().unwrap(),
                );
            }
        }
    }
    out
}

/// Inference-mode weight prediction for one spectrogram.
pub fn predict_weights<F: Real>(
    net: &BeamformerNet<F>,
    spec: &ComplexSpectrogram,
) -> Result<BeamformerWeights> {
    if spec.num_channels() != net.n_channels {
        return Err(Error::Shape(format!(
            "network built for N={} channels, spectrogram has {}",
            net.n_channels,
            spec.num_channels()
        )));
    }
    let x = stack_complex::<F>(spec);
    let w = net.forward_eval(&x)?;
    Ok(BeamformerWeights {
        values: unstack_complex(&w),
    })
}

/// Per-bin weighted sum across channels.
pub fn apply_beamforming(
    spec: &ComplexSpectrogram,
    weights: &BeamformerWeights,
) -> Result<BeamformedSpectrogram> {
    if spec.values.dim() != weights.values.dim() {
        return Err(Error::Shape(format!(
            "spectrogram {:?} vs weights {:?}",
            spec.values.dim(),
            weights.values.dim()
        )));
    }
    let (n, t, fq) = spec.values.dim();
    let mut out = Array2::zeros((t, fq));
    for ch in 0..n {
        for tt in 0..t {
            for ff in 0..fq {
                out[[tt, ff]] += spec.values[[ch, tt, ff]] * weights.values[[ch, tt, ff]];
            }
        }
    }
    Ok(BeamformedSpectrogram {
        values: out,
        params: spec.params,
    })
}

/// Batched Eq-style combination on stacked channels:
/// (B, 2N, T, F) x (B, 2N, T, F) -> (B, 2, T, F) with [re, im] output.
pub fn combine_forward<F: Real>(x: &Array4<F>, w: &Array4<F>) -> Array4<F> {
    let (b, two_n, t, fq) = x.dim();
    let n = two_n / 2;
    let mut out = Array4::zeros((b, 2, t, fq));
    for s in 0..b {
        for ch in 0..n {
            let xre = x.index_axis(Axis(0), s);
            let wre = w.index_axis(Axis(0), s);
            for tt in 0..t {
                for ff in 0..fq {
                    let (xr, xi) = (xre[[ch, tt, ff]], xre[[n + ch, tt, ff]]);
                    let (wr, wi) = (wre[[ch, tt, ff]], wre[[n + ch, tt, ff]]);
                    out[[s, 0, tt, ff]] = out[[s, 0, tt, ff]] + xr * wr - xi * wi;
                    out[[s, 1, tt, ff]] = out[[s, 1, tt, ff]] + xr * wi + xi * wr;
                }
            }
        }
    }
    out
}

/// Gradient of the combination with respect to the weights.
pub fn combine_backward_weights<F: Real>(x: &Array4<F>, dxhat: &Array4<F>) -> Array4<F> {
    let (b, two_n, t, fq) = x.dim();
    let n = two_n / 2;
    let mut dw = Array4::zeros((b, two_n, t, fq));
    for s in 0..b {
        for ch in 0..n {
            for tt in 0..t {
                for ff in 0..fq {
                    let (xr, xi) = (x[[s, ch, tt, ff]], x[[s, n + ch, tt, ff]]);
                    let (dr, di) = (dxhat[[s, 0, tt, ff]], dxhat[[s, 1, tt, ff]]);
                    dw[[s, ch, tt, ff]] = xr * dr + xi * di;
                    dw[[s, n + ch, tt, ff]] = -xi * dr + xr * di;
                }
            }
        }
    }
    dw
}

/// Batched orthogonality loss with gradient. Per bin the loss is
/// sum_{i<j} |w_i conj(w_j)|^2 / (||w||^4 + eps), which collapses to
/// ((S1^2 - S2)/2) / (S1^2 + eps) for S1 = sum |w_i|^2, S2 = sum |w_i|^4;
/// the value is averaged over bins and batch. Zero exactly when at most one
/// channel is active per bin, and invariant to rescaling the weights.
pub fn orthogonality_loss_batch<F: Real>(w: &Array4<F>) -> (F, Array4<F>) {
    let (b, two_n, t, fq) = w.dim();
    let n = two_n / 2;
    let eps = c::<F>(ORTH_EPS);
    let half = c::<F>(0.5);
    let two = c::<F>(2.0);
    let scale = c::<F>(1.0 / (b * t * fq) as f64);
    let mut grad = Array4::zeros(w.raw_dim());
    let mut loss = F::zero();
    let mut m = vec![F::zero(); n];
    for s in 0..b {
        for tt in 0..t {
            for ff in 0..fq {
                let mut s1 = F::zero();
                let mut s2 = F::zero();
                for ch in 0..n {
                    let re = w[[s, ch, tt, ff]];
                    let im = w[[s, n + ch, tt, ff]];
                    let mi = re * re + im * im;
                    m[ch] = mi;
                    s1 = s1 + mi;
                    s2 = s2 + mi * mi;
                }
                let num = (s1 * s1 - s2) * half;
                let den = s1 * s1 + eps;
                loss = loss + num / den;
                // d(num/den)/dm_i = ((S1 - m_i) den - num 2 S1) / den^2
                let den2 = den * den;
                for ch in 0..n {
                    let dmi = ((s1 - m[ch]) * den - num * two * s1) / den2;
                    let re = w[[s, ch, tt, ff]];
                    let im = w[[s, n + ch, tt, ff]];
                    grad[[s, ch, tt, ff]] = dmi * two * re * scale;
                    grad[[s, n + ch, tt, ff]] = dmi * two * im * scale;
                }
            }
        }
    }
    (loss * scale, grad)
}

/// Batched sparsity loss (mean complex modulus) with gradient.
pub fn sparsity_loss_batch<F: Real>(w: &Array4<F>) -> (F, Array4<F>) {
    let (b, two_n, t, fq) = w.dim();
    let n = two_n / 2;
    let scale = c::<F>(1.0 / (b * n * t * fq) as f64);
    let mut grad = Array4::zeros(w.raw_dim());
    let mut loss = F::zero();
    for s in 0..b {
        for ch in 0..n {
            for tt in 0..t {
                for ff in 0..fq {
                    let re = w[[s, ch, tt, ff]];
                    let im = w[[s, n + ch, tt, ff]];
                    let mag = (re * re + im * im).sqrt();
                    loss = loss + mag;
                    let safe = mag.max(F::MAG_GUARD);
                    grad[[s, ch, tt, ff]] = re / safe * scale;
                    grad[[s, n + ch, tt, ff]] = im / safe * scale;
                }
            }
        }
    }
    (loss * scale, grad)
}

fn weights_to_stacked(w: &BeamformerWeights) -> Array4<f64> {
    let (n, t, fq) = w.values.dim();
    let mut out = Array4::zeros((1, 2 * n, t, fq));
    for ch in 0..n {
        for tt in 0..t {
            for ff in 0..fq {
                out[[0, ch, tt, ff]] = w.values[[ch, tt, ff]].re;
                out[[0, n + ch, tt, ff]] = w.values[[ch, tt, ff]].im;
            }
        }
    }
    out
}

/// Mean over bins of the pairwise channel coherence of the weights.
pub fn orthogonality_loss(w: &BeamformerWeights) -> f64 {
    orthogonality_loss_batch(&weights_to_stacked(w)).0
}

/// Mean complex modulus of the weights.
pub fn sparsity_loss(w: &BeamformerWeights) -> f64 {
    sparsity_loss_batch(&weights_to_stacked(w)).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::MicrophoneId;
    use crate::dsp::stft_params_for;
    use ndarray::Array3;
    use rand::Rng;

    fn spec_of(values: Array3<Complex64>) -> ComplexSpectrogram {
        let n = values.dim().0;
        ComplexSpectrogram {
            values,
            params: stft_params_for(16000).unwrap(),
            channel_ids: (0..n)
                .map(|i| MicrophoneId::new(12 + i as i64).unwrap())
                .collect(),
        }
    }

    fn random_complex(n: usize, t: usize, f: usize, seed: u64) -> Array3<Complex64> {
        let mut rng = component_rng(seed, "cplx");
        Array3::from_shape_fn((n, t, f), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
    }

    #[test]
    fn init_is_deterministic_and_validates() {
        let a = BeamformerNet::<f64>::seeded(4, BeamformerConfig::default(), 0).unwrap();
        let mut b = BeamformerNet::<f64>::seeded(4, BeamformerConfig::default(), 0).unwrap();
        let wa = a.conv1.weight.value.clone();
        b.visit_params("", &mut |name, p| {
            if name == "conv1.weight" {
                assert_eq!(p.value, wa);
            }
        });
        assert!(BeamformerNet::<f64>::seeded(1, BeamformerConfig::default(), 0).is_ok());
        assert!(matches!(
            BeamformerNet::<f64>::seeded(0, BeamformerConfig::default(), 0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn predict_weights_shapes() {
        let net = BeamformerNet::<f64>::seeded(4, BeamformerConfig::default(), 1).unwrap();
        let spec = spec_of(random_complex(4, 6, 9, 2));
        let w = predict_weights(&net, &spec).unwrap();
        assert_eq!(w.values.dim(), (4, 6, 9));
        assert!(w.values.iter().all(|z| z.re.is_finite() && z.im.is_finite()));
        let wrong = spec_of(random_complex(2, 6, 9, 3));
        assert!(matches!(
            predict_weights(&net, &wrong),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn beamforming_identity_and_selector() {
        // N=1, unit weights: passthrough
        let spec = spec_of(random_complex(1, 3, 5, 4));
        let w = BeamformerWeights {
            values: Array3::from_elem((1, 3, 5), Complex64::new(1.0, 0.0)),
        };
        let out = apply_beamforming(&spec, &w).unwrap();
        for tt in 0..3 {
            for ff in 0..5 {
                assert_eq!(out.values[[tt, ff]], spec.values[[0, tt, ff]]);
            }
        }
        // N=2, select channel 1
        let spec2 = spec_of(random_complex(2, 3, 5, 5));
        let mut wv = Array3::from_elem((2, 3, 5), Complex64::new(0.0, 0.0));
        wv.index_axis_mut(Axis(0), 0).fill(Complex64::new(1.0, 0.0));
        let out2 = apply_beamforming(&spec2, &BeamformerWeights { values: wv }).unwrap();
        for tt in 0..3 {
            for ff in 0..5 {
                assert_eq!(out2.values[[tt, ff]], spec2.values[[0, tt, ff]]);
            }
        }
    }

    #[test]
    fn beamforming_matches_triple_loop_reference() {
        let mut rng = component_rng(6, "trials");
        for trial in 0..100 {
            let n = rng.gen_range(1..=4);
            let t = rng.gen_range(1..=8);
            let f = rng.gen_range(1..=8);
            let spec = spec_of(random_complex(n, t, f, 100 + trial));
            let w = BeamformerWeights {
                values: random_complex(n, t, f, 200 + trial),
            };
            let fast = apply_beamforming(&spec, &w).unwrap();
            for tt in 0..t {
                for ff in 0..f {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for ch in 0..n {
                        acc += spec.values[[ch, tt, ff]] * w.values[[ch, tt, ff]];
                    }
                    let denom = acc.norm().max(1e-12);
                    assert!(
                        (fast.values[[tt, ff]] - acc).norm() / denom <= 1e-6,
                        "trial {trial}"
                    );
                }
            }
        }
    }

    #[test]
    fn beamforming_is_bilinear() {
        let spec = spec_of(random_complex(3, 4, 5, 7));
        let w = BeamformerWeights {
            values: random_complex(3, 4, 5, 8),
        };
        let a = Complex64::new(1.7, -0.4);
        let scaled = spec_of(spec.values.mapv(|z| z * a));
        let out_scaled = apply_beamforming(&scaled, &w).unwrap();
        let out = apply_beamforming(&spec, &w).unwrap();
        for (y, x) in out_scaled.values.iter().zip(out.values.iter()) {
            assert!((y - x * a).norm() < 1e-9);
        }
    }

    #[test]
    fn orthogonality_loss_examples() {
        // one-hot weights per bin -> 0
        let mut wv = Array3::from_elem((3, 2, 2), Complex64::new(0.0, 0.0));
        wv.index_axis_mut(Axis(0), 1).fill(Complex64::new(0.7, -0.2));
        let w = BeamformerWeights { values: wv };
        assert!(orthogonality_loss(&w) < 1e-12);

        // N=2, w = (1,1)/sqrt(2) everywhere -> 0.25 per bin
        let inv = 1.0 / 2f64.sqrt();
        let w2 = BeamformerWeights {
            values: Array3::from_elem((2, 3, 4), Complex64::new(inv, 0.0)),
        };
        let l = orthogonality_loss(&w2);
        assert!((l - 0.25).abs() < 1e-6, "loss {l}");

        // scale invariance
        let w3 = BeamformerWeights {
            values: random_complex(3, 4, 5, 9),
        };
        let base = orthogonality_loss(&w3);
        let scaled = BeamformerWeights {
            values: w3.values.mapv(|z| z * 3.7),
        };
        assert!((orthogonality_loss(&scaled) - base).abs() < 1e-6);
    }

    #[test]
    fn sparsity_loss_examples() {
        let zero = BeamformerWeights {
            values: Array3::from_elem((2, 3, 4), Complex64::new(0.0, 0.0)),
        };
        assert_eq!(sparsity_loss(&zero), 0.0);
        let ones = BeamformerWeights {
            values: Array3::from_elem((2, 3, 4), Complex64::new(0.6, 0.8)),
        };
        assert!((sparsity_loss(&ones) - 1.0).abs() < 1e-12);
        // moduli {0, 2} in equal proportion -> mean 1
        let mut wv = Array3::from_elem((2, 3, 4), Complex64::new(0.0, 0.0));
        wv.index_axis_mut(Axis(0), 0).fill(Complex64::new(0.0, 2.0));
        let w = BeamformerWeights { values: wv };
        assert!((sparsity_loss(&w) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn regularizer_gradients_match_finite_differences() {
        let mut rng = component_rng(10, "w");
        let w = Array4::<f64>::from_shape_fn((1, 4, 3, 4), |_| rng.gen_range(-1.0..1.0) * 0.8);
        let h = 1e-6;
        let cases: [(&str, fn(&Array4<f64>) -> (f64, Array4<f64>)); 2] = [
            ("orth", orthogonality_loss_batch::<f64>),
            ("sparse", sparsity_loss_batch::<f64>),
        ];
        for (name, f) in cases {
            let (_, grad) = f(&w);
            let mut wp = w.clone();
            let mut checked = 0;
            for idx in [(0, 0, 0, 0), (0, 3, 2, 3), (0, 1, 1, 2), (0, 2, 0, 1)] {
                wp[idx] += h;
                let up = f(&wp).0;
                wp[idx] -= 2.0 * h;
                let down = f(&wp).0;
                wp[idx] += h;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grad[idx];
                assert!(
                    (analytic - numeric).abs() / numeric.abs().max(1e-6) < 1e-5,
                    "{name} {idx:?}: {analytic} vs {numeric}"
                );
                checked += 1;
            }
            assert_eq!(checked, 4);
        }
    }

    #[test]
    fn combine_gradients_match_finite_differences() {
        let mut rng = component_rng(11, "xw");
        let x = Array4::<f64>::from_shape_fn((2, 4, 3, 4), |_| rng.gen_range(-1.0..1.0));
        let w = Array4::<f64>::from_shape_fn((2, 4, 3, 4), |_| rng.gen_range(-1.0..1.0));
        let proj = Array4::<f64>::from_shape_fn((2, 2, 3, 4), |_| rng.gen_range(-1.0..1.0));
        let dw = combine_backward_weights(&x, &proj);
        let h = 1e-6;
        let mut wp = w.clone();
        for idx in [(0, 0, 0, 0), (1, 3, 2, 3), (0, 2, 1, 2)] {
            wp[idx] += h;
            let up = (combine_forward(&x, &wp) * &proj).sum();
            wp[idx] -= 2.0 * h;
            let down = (combine_forward(&x, &wp) * &proj).sum();
            wp[idx] += h;
            let numeric = (up - down) / (2.0 * h);
            assert!((dw[idx] - numeric).abs() < 1e-8, "{idx:?}");
        }
    }

    #[test]
    fn beamformer_net_gradcheck() {
        let mut net = BeamformerNet::<f64>::seeded(2, BeamformerConfig {
            hidden_channels: 3,
            kernel: (3, 3),
        }, 4)
        .unwrap();
        let mut rng = component_rng(12, "x");
        let x = Array4::<f64>::from_shape_fn((2, 4, 3, 5), |_| rng.gen_range(-1.0..1.0));
        let proj = Array4::<f64>::from_shape_fn((2, 4, 3, 5), |_| rng.gen_range(-1.0..1.0));
        let (_, tape) = net.forward_train(&x).unwrap();
        net.zero_grads();
        net.backward(&x, &tape, &proj).unwrap();
        let worst = crate::nn::gradcheck::max_param_grad_error(
            &mut net,
            |m| (m.forward_train(&x).unwrap().0 * &proj).sum(),
            4,
            1e-6,
            13,
        );
        assert!(worst < 1e-6, "beamformer grad error {worst}");
    }
}
