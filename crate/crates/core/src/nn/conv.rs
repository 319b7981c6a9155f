//! 2-D convolution with same-padding, built on im2col plus GEMM.

use ndarray::{Array2, Array4, ArrayView2, ArrayView4, Axis};
use rand_chacha::ChaCha12Rng;

use super::{uniform_init, Param, Parameterized, Real};
use crate::error::{Error, Result};

/// Stride-1 convolution, output spatial size equals input size.
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    /// (out_channels, in_channels * kh * kw), GEMM-ready layout.
    pub weight: Param<F>,
    /// (out_channels,)
    pub bias: Param<F>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
}

impl<F: Real> Conv2d<F> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let fan_in = in_channels * kernel.0 * kernel.1;
        let limit = 1.0 / (fan_in as f64).sqrt();
        Conv2d {
            weight: Param::new(uniform_init(&[out_channels, fan_in], limit, rng)),
            bias: Param::new(uniform_init(&[out_channels], limit, rng)),
            in_channels,
            out_channels,
            kernel,
        }
    }

    fn pad(&self) -> (usize, usize) {
        (self.kernel.0 / 2, self.kernel.1 / 2)
    }

    /// im2col for one sample: rows indexed by (cin, dh, dw), columns by (t, f).
    fn im2col(&self, x: ArrayView2<F>, cols: &mut Array2<F>, t_len: usize, f_len: usize)
    where
        F: Real,
    {
        // x here is one sample flattened as (cin, t*f); reshaped view below
        let (kh, kw) = self.kernel;
        let (ph, pw) = self.pad();
        cols.fill(F::zero());
        for cin in 0..self.in_channels {
            for dh in 0..kh {
                for dw in 0..kw {
                    let row = (cin * kh + dh) * kw + dw;
                    let mut out_row = cols.row_mut(row);
                    for t in 0..t_len {
                        let st = t as isize + dh as isize - ph as isize;
                        if st < 0 || st >= t_len as isize {
                            continue;
                        }
                        // valid output f range for this kernel offset
                        let f_lo = pw.saturating_sub(dw);
                        let f_hi = (f_len + pw).saturating_sub(dw).min(f_len);
                        if f_lo >= f_hi {
                            continue;
                        }
                        let src_lo = f_lo + dw - pw;
                        let src = x.row(cin);
                        let src_base = st as usize * f_len;
                        let dst_base = t * f_len;
                        for f in f_lo..f_hi {
                            out_row[dst_base + f] = src[src_base + src_lo + (f - f_lo)];
                        }
                    }
                }
            }
        }
    }

    fn check_shape(&self, x: &ArrayView4<F>) -> Result<(usize, usize, usize)> {
        let (b, cin, t, f) = x.dim();
        if cin != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {cin}",
                self.in_channels
            )));
        }
        Ok((b, t, f))
    }

    /// Forward over a batch (B, Cin, T, F) -> (B, Cout, T, F).
    pub fn forward(&self, x: &Array4<F>) -> Result<Array4<F>> {
        let (b, t, f) = self.check_shape(&x.view())?;
        let k = self.in_channels * self.kernel.0 * self.kernel.1;
        let mut out = Array4::zeros((b, self.out_channels, t, f));
        let mut cols = Array2::zeros((k, t * f));
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        for s in 0..b {
            let xs = x
                .index_axis(Axis(0), s)
                .into_shape_with_order((self.in_channels, t * f))
                .unwrap();
            self.im2col(xs, &mut cols, t, f);
            let y = w.dot(&cols); // (Cout, T*F)
            let mut dst = out.index_axis_mut(Axis(0), s);
            for co in 0..self.out_channels {
                let bias = self.bias.value.as_slice().unwrap()[co];
                let yrow = y.row(co);
                let mut drow = dst
                    .index_axis_mut(Axis(0), co)
                    .into_shape_with_order(t * f)
                    .unwrap();
                for (d, v) in drow.iter_mut().zip(yrow.iter()) {
                    *d = *v + bias;
                }
            }
        }
        Ok(out)
    }

    /// Backward: accumulates weight/bias grads, returns input grad.
    pub fn backward(&mut self, x: &Array4<F>, dy: &Array4<F>) -> Result<Array4<F>> {
        let (b, t, f) = self.check_shape(&x.view())?;
        let k = self.in_channels * self.kernel.0 * self.kernel.1;
        let (kh, kw) = self.kernel;
        let (ph, pw) = self.pad();
        let mut dx = Array4::zeros((b, self.in_channels, t, f));
        let mut cols = Array2::zeros((k, t * f));
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let mut dw = Array2::<F>::zeros((self.out_channels, k));
        let mut db = vec![F::zero(); self.out_channels];
        for s in 0..b {
            let xs = x
                .index_axis(Axis(0), s)
                .into_shape_with_order((self.in_channels, t * f))
                .unwrap();
            self.im2col(xs, &mut cols, t, f);
            let dys = dy
                .index_axis(Axis(0), s)
                .into_shape_with_order((self.out_channels, t * f))
                .unwrap();
            dw = dw + dys.dot(&cols.t());
            for co in 0..self.out_channels {
                db[co] = db[co] + dys.row(co).sum();
            }
            // dcols = W^T . dy  (K, T*F), scattered back to dx
            let dcols = w.t().dot(&dys);
            let mut dxs = dx.index_axis_mut(Axis(0), s);
            for cin in 0..self.in_channels {
                let mut dplane = dxs
                    .index_axis_mut(Axis(0), cin)
                    .into_shape_with_order(t * f)
                    .unwrap();
                for dh in 0..kh {
                    for dw_off in 0..kw {
                        let row = (cin * kh + dh) * kw + dw_off;
                        let src = dcols.row(row);
                        for tt in 0..t {
                            let st = tt as isize + dh as isize - ph as isize;
                            if st < 0 || st >= t as isize {
                                continue;
                            }
                            let f_lo = pw.saturating_sub(dw_off);
                            let f_hi = (f + pw).saturating_sub(dw_off).min(f);
                            if f_lo >= f_hi {
                                continue;
                            }
                            let src_lo = f_lo + dw_off - pw;
                            let dst_base = st as usize * f;
                            let col_base = tt * f;
                            for ff in f_lo..f_hi {
                                let d = dst_base + src_lo + (ff - f_lo);
                                dplane[d] = dplane[d] + src[col_base + ff];
                            }
                        }
                    }
                }
            }
        }
        let mut wg = self
            .weight
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        wg += &dw;
        let bg = self.bias.grad.as_slice_mut().unwrap();
        for (g, d) in bg.iter_mut().zip(db) {
            *g = *g + d;
        }
        Ok(dx)
    }
}

impl<F: Real> Parameterized<F> for Conv2d<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::component_rng;
    use ndarray::Array4;
    use rand::Rng;

    fn random_x(b: usize, c: usize, t: usize, f: usize, seed: u64) -> Array4<f64> {
        let mut rng = component_rng(seed, "x");
        Array4::from_shape_fn((b, c, t, f), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv_identity_kernel_passes_through() {
        let mut rng = component_rng(0, "conv");
        let mut conv = Conv2d::<f64>::new(1, 1, (3, 3), &mut rng);
        conv.weight.value.fill(0.0);
        conv.bias.value.fill(0.0);
        // center tap
        conv.weight.value.as_slice_mut().unwrap()[4] = 1.0;
        let x = random_x(2, 1, 4, 5, 1);
        let y = conv.forward(&x).unwrap();
        assert!(x.iter().zip(y.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = component_rng(7, "conv");
        let conv = Conv2d::<f64>::new(3, 4, (3, 3), &mut rng);
        let (b, t, f) = (2, 5, 6);
        let x = random_x(b, 3, t, f, 2);
        let y = conv.forward(&x).unwrap();
        let w = conv
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        for s in 0..b {
            for co in 0..4 {
                for tt in 0..t {
                    for ff in 0..f {
                        let mut acc = conv.bias.value.as_slice().unwrap()[co];
                        for ci in 0..3 {
                            for dh in 0..3usize {
                                for dw in 0..3usize {
                                    let st = tt as isize + dh as isize - 1;
                                    let sf = ff as isize + dw as isize - 1;
                                    if st < 0 || sf < 0 || st >= t as isize || sf >= f as isize {
                                        continue;
                                    }
                                    acc += w[[co, (ci * 3 + dh) * 3 + dw]]
                                        * x[[s, ci, st as usize, sf as usize]];
                                }
                            }
                        }
                        assert!((acc - y[[s, co, tt, ff]]).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = component_rng(3, "conv");
        let mut conv = Conv2d::<f64>::new(2, 3, (1, 3), &mut rng);
        let x = random_x(2, 2, 3, 7, 5);
        // loss = weighted sum of outputs, fixed projection
        let mut prng = component_rng(9, "proj");
        let proj = Array4::from_shape_fn((2, 3, 3, 7), |_| prng.gen_range(-1.0..1.0));
        let y = conv.forward(&x).unwrap();
        let _ = y;
        conv.zero_grads();
        let dx = conv.backward(&x, &proj).unwrap();
        let worst = crate::nn::gradcheck::max_param_grad_error(
            &mut conv,
            |c| (c.forward(&x).unwrap() * &proj).sum(),
            6,
            1e-5,
            11,
        );
        assert!(worst < 1e-7, "param grad error {worst}");
        // input grad via FD on a few coordinates
        let mut xp = x.clone();
        for &(s, c0, t0, f0) in &[(0usize, 0usize, 0usize, 0usize), (1, 1, 2, 6), (0, 1, 1, 3)] {
            let h = 1e-6;
            xp[[s, c0, t0, f0]] += h;
            let up = (conv.forward(&xp).unwrap() * &proj).sum();
            xp[[s, c0, t0, f0]] -= 2.0 * h;
            let down = (conv.forward(&xp).unwrap() * &proj).sum();
            xp[[s, c0, t0, f0]] += h;
            let numeric = (up - down) / (2.0 * h);
            let analytic = dx[[s, c0, t0, f0]];
            assert!(
                (analytic - numeric).abs() / numeric.abs().max(1e-8) < 1e-6,
                "input grad {analytic} vs {numeric}"
            );
        }
    }
}
