//! Feature construction from the beamformed spectrogram and the
//! convolutional-recurrent classifier.
//!
//! Features per bin are (magnitude, sin phase, cos phase). The classifier
//! stacks frequency-only convolution blocks (1x3 kernels, batch norm, ELU,
//! summed max+average pooling over frequency), two bidirectional GRU layers,
//! and a two-logit softmax head fed by the concatenated final forward state
//! and final backward state of the top GRU.

use ndarray::{s, Array2, Array3, Array4};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::beamformer::BeamformedSpectrogram;
use crate::error::{Error, Result};
use crate::nn::{
    c, component_rng, into_standard, norm::BnCtx, norm::BnStats, softmax2, BatchNorm2d, BiGru,
    Conv2d, DualPoolFreq, Linear, Param, Parameterized, Real,
};

/// (magnitude, sin phase, cos phase) per bin, shape [T x F x 3].
#[derive(Debug, Clone)]
pub struct FeatureTensor {
    pub values: Array3<f64>,
}

impl FeatureTensor {
    pub fn num_frames(&self) -> usize {
        self.values.dim().0
    }

    pub fn num_bins(&self) -> usize {
        self.values.dim().1
    }
}

/// Per-bin feature mapping; zero magnitude maps to phase channels (0, 1).
pub fn build_features(xhat: &BeamformedSpectrogram) -> FeatureTensor {
    let (t, fq) = xhat.values.dim();
    let mut out = Array3::zeros((t, fq, 3));
    for tt in 0..t {
        for ff in 0..fq {
            let z = xhat.values[[tt, ff]];
            let (m, sn, cs) = feature_triplet(z.re, z.im);
            out[[tt, ff, 0]] = m;
            out[[tt, ff, 1]] = sn;
            out[[tt, ff, 2]] = cs;
        }
    }
    FeatureTensor { values: out }
}

#[inline]
fn feature_triplet(re: f64, im: f64) -> (f64, f64, f64) {
    let m = (re * re + im * im).sqrt();
    if m == 0.0 {
        (0.0, 0.0, 1.0)
    } else {
        (m, im / m, re / m)
    }
}

/// Batched feature construction on stacked [re, im] channels:
/// (B, 2, T, F) -> (B, 3, T, F) ordered [magnitude, sin, cos].
pub fn features_forward<F: Real>(xhat: &Array4<F>) -> Array4<F> {
    let (b, _, t, fq) = xhat.dim();
    let mut out = Array4::zeros((b, 3, t, fq));
    for s in 0..b {
        for tt in 0..t {
            for ff in 0..fq {
                let re = xhat[[s, 0, tt, ff]];
                let im = xhat[[s, 1, tt, ff]];
                let m = (re * re + im * im).sqrt();
                if m == F::zero() {
                    out[[s, 2, tt, ff]] = F::one();
                } else {
                    out[[s, 0, tt, ff]] = m;
                    out[[s, 1, tt, ff]] = im / m;
                    out[[s, 2, tt, ff]] = re / m;
                }
            }
        }
    }
    out
}

/// Backward of the feature map; gradients vanish at exactly-zero bins.
pub fn features_backward<F: Real>(xhat: &Array4<F>, dfeat: &Array4<F>) -> Array4<F> {
    let (b, _, t, fq) = xhat.dim();
    let mut dx = Array4::zeros(xhat.raw_dim());
    for s in 0..b {
        for tt in 0..t {
            for ff in 0..fq {
                let re = xhat[[s, 0, tt, ff]];
                let im = xhat[[s, 1, tt, ff]];
                let m = (re * re + im * im).sqrt();
                if m == F::zero() {
                    continue;
                }
                let m_safe = m.max(F::MAG_GUARD);
                let m3 = m_safe * m_safe * m_safe;
                let dm = dfeat[[s, 0, tt, ff]];
                let dsin = dfeat[[s, 1, tt, ff]];
                let dcos = dfeat[[s, 2, tt, ff]];
                // d m / d(re, im) = (re, im) / m
                // d sin / d(re, im) = (-re im, re^2) / m^3
                // d cos / d(re, im) = (im^2, -re im) / m^3
                dx[[s, 0, tt, ff]] =
                    dm * re / m_safe + dsin * (-re * im) / m3 + dcos * (im * im) / m3;
                dx[[s, 1, tt, ff]] =
                    dm * im / m_safe + dsin * (re * re) / m3 + dcos * (-re * im) / m3;
            }
        }
    }
    dx
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub conv_channels: Vec<usize>,
    pub pool_factors: Vec<usize>,
    pub gru_hidden: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            conv_channels: vec![16, 32, 64],
            pool_factors: vec![4, 4, 8],
            gru_hidden: 128,
        }
    }
}

struct ConvBlock<F> {
    conv: Conv2d<F>,
    bn: BatchNorm2d<F>,
    pool: DualPoolFreq,
}

/// Three conv blocks -> two bidirectional GRUs -> dense softmax head.
/// Built for a fixed frequency-bin count; time length is free.
pub struct ClassifierNet<F> {
    blocks: Vec<ConvBlock<F>>,
    gru1: BiGru<F>,
    gru2: BiGru<F>,
    head: Linear<F>,
    pub freq_bins: usize,
    pub config: ClassifierConfig,
}

pub struct ClassifierTape<F> {
    block_inputs: Vec<Array4<F>>,
    bn_ctxs: Vec<BnCtx<F>>,
    pub bn_stats: Vec<BnStats<F>>,
    elu_outs: Vec<Array4<F>>,
    gru_input: Array3<F>,
    gru1_ctx: crate::nn::gru::BiGruCtx<F>,
    gru1_out: Array3<F>,
    gru2_ctx: crate::nn::gru::BiGruCtx<F>,
    gru2_out: Array3<F>,
    head_input: Array2<F>,
}

impl<F: Real> ClassifierNet<F> {
    pub fn seeded(freq_bins: usize, config: ClassifierConfig, seed: u64) -> Result<Self> {
        if config.conv_channels.is_empty()
            || config.conv_channels.len() != config.pool_factors.len()
        {
            return Err(Error::Parameter(
                "conv_channels and pool_factors must be non-empty and equal length".into(),
            ));
        }
        if config.gru_hidden < 1 {
            return Err(Error::Parameter("gru_hidden must be positive".into()));
        }
        let mut f_now = freq_bins;
        let mut rng = component_rng(seed, "classifier");
        let mut blocks = Vec::new();
        let mut c_in = 3usize;
        for (i, (&c_out, &pf)) in config
            .conv_channels
            .iter()
            .zip(&config.pool_factors)
            .enumerate()
        {
            let pool = DualPoolFreq::new(pf);
            let f_next = pool.out_bins(f_now);
            if f_next == 0 {
                return Err(Error::Parameter(format!(
                    "pool factor {pf} at block {i} exhausts {f_now} frequency bins"
                )));
            }
            blocks.push(ConvBlock {
                conv: Conv2d::new(c_in, c_out, (1, 3), &mut rng),
                bn: BatchNorm2d::new(c_out),
                pool,
            });
            c_in = c_out;
            f_now = f_next;
        }
        let gru_input = c_in * f_now;
        let h = config.gru_hidden;
        Ok(ClassifierNet {
            blocks,
            gru1: BiGru::new(gru_input, h, &mut rng),
            gru2: BiGru::new(2 * h, h, &mut rng),
            head: Linear::new(2 * h, 2, &mut rng),
            freq_bins,
            config,
        })
    }

    fn check_input(&self, feats: &Array4<F>) -> Result<()> {
        let (_, ch, _, fq) = feats.dim();
        if ch != 3 {
            return Err(Error::Shape(format!("expected 3 feature channels, got {ch}")));
        }
        if fq != self.freq_bins {
            return Err(Error::Shape(format!(
                "network built for {} frequency bins, input has {fq}",
                self.freq_bins
            )));
        }
        Ok(())
    }

    /// (B, C, T, Fp) -> (B, T, C * Fp)
    fn to_sequence(x: &Array4<F>) -> Array3<F> {
        let (b, ch, t, fp) = x.dim();
        let perm = into_standard(x.clone().permuted_axes([0, 2, 1, 3]));
        perm.into_shape_with_order((b, t, ch * fp)).unwrap()
    }

    fn from_sequence(d: &Array3<F>, ch: usize, fp: usize) -> Array4<F> {
        let (b, t, _) = d.dim();
        let r = d.view().into_shape_with_order((b, t, ch, fp)).unwrap();
        into_standard(r.to_owned().permuted_axes([0, 2, 1, 3]))
    }

    /// Final forward state and final backward state of the top GRU.
    fn summary_state(gru2_out: &Array3<F>, h: usize) -> Array2<F> {
        let (b, t, _) = gru2_out.dim();
        let mut out = Array2::zeros((b, 2 * h));
        out.slice_mut(s![.., 0..h])
            .assign(&gru2_out.slice(s![.., t - 1, 0..h]));
        out.slice_mut(s![.., h..2 * h])
            .assign(&gru2_out.slice(s![.., 0, h..2 * h]));
        out
    }

    pub fn forward_train(&self, feats: &Array4<F>) -> Result<(Array2<F>, ClassifierTape<F>)> {
        self.check_input(feats)?;
        let mut block_inputs = Vec::new();
        let mut bn_ctxs = Vec::new();
        let mut bn_stats = Vec::new();
        let mut elu_outs = Vec::new();
        let mut x = feats.clone();
        for blk in &self.blocks {
            block_inputs.push(x.clone());
            let co = blk.conv.forward(&x)?;
            let (bo, ctx, stats) = blk.bn.forward_train(&co);
            let eo = crate::nn::norm::elu_forward(&bo);
            x = blk.pool.forward(&eo)?;
            drop(co);
            bn_ctxs.push(ctx);
            bn_stats.push(stats);
            elu_outs.push(eo);
        }
        let gru_input = Self::to_sequence(&x);
        let (gru1_out, gru1_ctx) = self.gru1.forward(&gru_input);
        let (gru2_out, gru2_ctx) = self.gru2.forward(&gru1_out);
        let head_input = Self::summary_state(&gru2_out, self.config.gru_hidden);
        let logits = self.head.forward(&head_input);
        Ok((
            logits,
            ClassifierTape {
                block_inputs,
                bn_ctxs,
                bn_stats,
                elu_outs,
                gru_input,
                gru1_ctx,
                gru1_out,
                gru2_ctx,
                gru2_out,
                head_input,
            },
        ))
    }

    pub fn forward_eval(&self, feats: &Array4<F>) -> Result<Array2<F>> {
        self.check_input(feats)?;
        let mut x = feats.clone();
        for blk in &self.blocks {
            let co = blk.conv.forward(&x)?;
            let bo = blk.bn.forward_eval(&co);
            let eo = crate::nn::norm::elu_forward(&bo);
            x = blk.pool.forward(&eo)?;
        }
        let seq = Self::to_sequence(&x);
        let (g1, _) = self.gru1.forward(&seq);
        let (g2, _) = self.gru2.forward(&g1);
        let head_input = Self::summary_state(&g2, self.config.gru_hidden);
        Ok(self.head.forward(&head_input))
    }

    pub fn backward(
        &mut self,
        tape: &ClassifierTape<F>,
        dlogits: &Array2<F>,
    ) -> Result<Array4<F>> {
        let h = self.config.gru_hidden;
        let dhead_in = self.head.backward(&tape.head_input, dlogits);
        let (b, t, _) = tape.gru2_out.dim();
        let mut dgru2_out = Array3::zeros((b, t, 2 * h));
        dgru2_out
            .slice_mut(s![.., t - 1, 0..h])
            .assign(&dhead_in.slice(s![.., 0..h]));
        dgru2_out
            .slice_mut(s![.., 0, h..2 * h])
            .assign(&dhead_in.slice(s![.., h..2 * h]));
        let dgru1_out = self.gru2.backward(&tape.gru1_out, &tape.gru2_ctx, &dgru2_out);
        let dseq = self.gru1.backward(&tape.gru_input, &tape.gru1_ctx, &dgru1_out);

        let last = self.blocks.len() - 1;
        let (ch_last, fp_last) = {
            let (_, ch, _, fp) = tape.elu_outs[last].dim();
            (ch, self.blocks[last].pool.out_bins(fp))
        };
        let mut dx = Self::from_sequence(&dseq, ch_last, fp_last);
        for i in (0..self.blocks.len()).rev() {
            let blk = &mut self.blocks[i];
            let delu = blk.pool.backward(&tape.elu_outs[i], &dx);
            let dbn = crate::nn::norm::elu_backward(&tape.elu_outs[i], &delu);
            let dconv = blk.bn.backward(&tape.bn_ctxs[i], &dbn);
            dx = blk.conv.backward(&tape.block_inputs[i], &dconv)?;
        }
        Ok(dx)
    }
}

impl<F: Real> Parameterized<F> for ClassifierNet<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.conv.visit_params(&format!("{prefix}block{i}.conv"), f);
            blk.bn.visit_params(&format!("{prefix}block{i}.bn"), f);
        }
        self.gru1.visit_params(&format!("{prefix}gru1"), f);
        self.gru2.visit_params(&format!("{prefix}gru2"), f);
        self.head.visit_params(&format!("{prefix}head"), f);
    }
}

/// Probability that the input is a replay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub p_replay: f64,
}

impl Prediction {
    pub fn p_genuine(&self) -> f64 {
        1.0 - self.p_replay
    }
}

/// Inference on one feature tensor.
pub fn forward<F: Real>(net: &ClassifierNet<F>, feats: &FeatureTensor) -> Result<Prediction> {
    let (t, fq, _) = feats.values.dim();
    let mut x = Array4::zeros((1, 3, t, fq));
    for tt in 0..t {
        for ff in 0..fq {
            for ch in 0..3 {
                x[[0, ch, tt, ff]] = c::<F>(feats.values[[tt, ff, ch]]);
            }
        }
    }
    let logits = net.forward_eval(&x)?;
    let (_, p1) = softmax2((logits[[0, 0]], logits[[0, 1]]));
    Ok(Prediction {
        p_replay: p1.to_f64().unwrap(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::stft_params_for;
    use ndarray::Array2 as NdArray2;
    use rand::Rng;

    fn spectro(values: NdArray2<Complex64>) -> BeamformedSpectrogram {
        BeamformedSpectrogram {
            values,
            params: stft_params_for(16000).unwrap(),
        }
    }

    #[test]
    fn feature_triplets_are_analytic() {
        let z = NdArray2::from_elem((1, 3), Complex64::new(0.0, 0.0));
        let mut z = z;
        z[[0, 0]] = Complex64::new(3.0, 4.0);
        z[[0, 1]] = Complex64::new(-1.0, 0.0);
        z[[0, 2]] = Complex64::new(0.0, 0.0);
        let f = build_features(&spectro(z));
        assert_eq!(f.values.slice(s![0, 0, ..]).to_vec(), vec![5.0, 0.8, 0.6]);
        assert_eq!(f.values.slice(s![0, 1, ..]).to_vec(), vec![1.0, 0.0, -1.0]);
        assert_eq!(f.values.slice(s![0, 2, ..]).to_vec(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn features_satisfy_unit_circle_and_phase_wrap() {
        let mut rng = component_rng(1, "z");
        let z = NdArray2::from_shape_fn((4, 6), |_| {
            Complex64::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0))
        });
        let f = build_features(&spectro(z.clone()));
        for tt in 0..4 {
            for ff in 0..6 {
                let sn = f.values[[tt, ff, 1]];
                let cs = f.values[[tt, ff, 2]];
                assert!((sn * sn + cs * cs - 1.0).abs() < 1e-6);
            }
        }
        // adding a full turn to the phase changes nothing
        let rotated = z.mapv(|v| {
            let (r, theta) = v.to_polar();
            Complex64::from_polar(r, theta + 2.0 * std::f64::consts::PI)
        });
        let f2 = build_features(&spectro(rotated));
        for (a, b) in f.values.iter().zip(f2.values.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn feature_gradients_match_finite_differences() {
        let mut rng = component_rng(2, "x");
        let x = Array4::<f64>::from_shape_fn((2, 2, 3, 4), |_| rng.gen_range(-1.0..1.0) * 2.0);
        let proj = Array4::<f64>::from_shape_fn((2, 3, 3, 4), |_| rng.gen_range(-1.0..1.0));
        let dx = features_backward(&x, &proj);
        let h = 1e-6;
        let mut xp = x.clone();
        for idx in [(0, 0, 0, 0), (1, 1, 2, 3), (0, 1, 1, 2), (1, 0, 0, 1)] {
            xp[idx] += h;
            let up = (features_forward(&xp) * &proj).sum();
            xp[idx] -= 2.0 * h;
            let down = (features_forward(&xp) * &proj).sum();
            xp[idx] += h;
            let numeric = (up - down) / (2.0 * h);
            assert!(
                (dx[idx] - numeric).abs() / numeric.abs().max(1e-6) < 1e-5,
                "{idx:?}: {} vs {numeric}",
                dx[idx]
            );
        }
    }

    fn tiny_config() -> ClassifierConfig {
        ClassifierConfig {
            conv_channels: vec![2, 3],
            pool_factors: vec![2, 2],
            gru_hidden: 4,
        }
    }

    #[test]
    fn classifier_probabilities_sum_to_one() {
        let net = ClassifierNet::<f64>::seeded(9, tiny_config(), 3).unwrap();
        let mut rng = component_rng(4, "f");
        let feats = FeatureTensor {
            values: Array3::from_shape_fn((6, 9, 3), |_| rng.gen_range(0.0..1.0)),
        };
        let p = forward(&net, &feats).unwrap();
        assert!(p.p_replay >= 0.0 && p.p_replay <= 1.0);
        assert!((p.p_replay + p.p_genuine() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn classifier_rejects_wrong_bin_count() {
        let net = ClassifierNet::<f64>::seeded(9, tiny_config(), 3).unwrap();
        let feats = FeatureTensor {
            values: Array3::zeros((6, 13, 3)),
        };
        assert!(matches!(forward(&net, &feats), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_stack_never_mixes_time_steps() {
        // in inference mode, perturbing frame t only changes frame t of the
        // conv stack output; time mixing is reserved for the GRUs
        let net = ClassifierNet::<f64>::seeded(8, tiny_config(), 5).unwrap();
        let mut rng = component_rng(6, "f");
        let base = Array4::<f64>::from_shape_fn((1, 3, 5, 8), |_| rng.gen_range(0.1..1.0));
        let run_convs = |x: &Array4<f64>| -> Array4<f64> {
            let mut cur = x.clone();
            for blk in &net.blocks {
                let co = blk.conv.forward(&cur).unwrap();
                let bo = blk.bn.forward_eval(&co);
                let eo = crate::nn::norm::elu_forward(&bo);
                cur = blk.pool.forward(&eo).unwrap();
            }
            cur
        };
        let y0 = run_convs(&base);
        let mut poked = base.clone();
        poked[[0, 1, 2, 3]] += 0.5;
        let y1 = run_convs(&poked);
        let (_, ch, t, fp) = y0.dim();
        for tt in 0..t {
            let mut differs = false;
            for cc in 0..ch {
                for ff in 0..fp {
                    if (y0[[0, cc, tt, ff]] - y1[[0, cc, tt, ff]]).abs() > 1e-12 {
                        differs = true;
                    }
                }
            }
            assert_eq!(differs, tt == 2, "frame {tt}");
        }
    }

    #[test]
    fn classifier_gradcheck() {
        let mut net = ClassifierNet::<f64>::seeded(9, tiny_config(), 7).unwrap();
        let mut rng = component_rng(8, "f");
        let feats = Array4::<f64>::from_shape_fn((2, 3, 6, 9), |_| rng.gen_range(-1.0..1.0));
        let labels = [0usize, 1];
        let loss_fn = |m: &mut ClassifierNet<f64>| {
            let (logits, _) = m.forward_train(&feats).unwrap();
            crate::nn::dense::softmax_bce(&logits, &labels).0
        };
        let (logits, tape) = net.forward_train(&feats).unwrap();
        let (_, dlogits) = crate::nn::dense::softmax_bce(&logits, &labels);
        net.zero_grads();
        net.backward(&tape, &dlogits).unwrap();
        let worst = crate::nn::gradcheck::max_param_grad_error(&mut net, loss_fn, 3, 1e-5, 9);
        assert!(worst < 1e-5, "classifier grad error {worst}");
    }
}
