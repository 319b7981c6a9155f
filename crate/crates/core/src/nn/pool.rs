//! Frequency-axis pooling: parallel max and average paths, summed.

use ndarray::Array4;

use super::{c, Real};
use crate::error::{Error, Result};

/// Pools only the last (frequency) axis by `factor`, stride = width = factor.
/// Output is elementwise max-pool + average-pool. Trailing bins that do not
/// fill a window are dropped.
#[derive(Debug, Clone, Copy)]
pub struct DualPoolFreq {
    pub factor: usize,
}

impl DualPoolFreq {
    pub fn new(factor: usize) -> Self {
        DualPoolFreq { factor }
    }

    pub fn out_bins(&self, f_in: usize) -> usize {
        f_in / self.factor
    }

    pub fn forward<F: Real>(&self, x: &Array4<F>) -> Result<Array4<F>> {
        let (b, ch, t, f) = x.dim();
        let fo = self.out_bins(f);
        if fo == 0 {
            return Err(Error::Shape(format!(
                "cannot pool {f} bins by factor {}",
                self.factor
            )));
        }
        let inv = c::<F>(1.0 / self.factor as f64);
        let mut out = Array4::zeros((b, ch, t, fo));
        for s in 0..b {
            for cc in 0..ch {
                for tt in 0..t {
                    for fb in 0..fo {
                        let base = fb * self.factor;
                        let mut mx = x[[s, cc, tt, base]];
                        let mut sum = F::zero();
                        for k in 0..self.factor {
                            let v = x[[s, cc, tt, base + k]];
                            if v > mx {
                                mx = v;
                            }
                            sum = sum + v;
                        }
                        out[[s, cc, tt, fb]] = mx + sum * inv;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Routes max-path gradient to the argmax bin (first on ties) and spreads
    /// the average-path gradient uniformly.
    pub fn backward<F: Real>(&self, x: &Array4<F>, dy: &Array4<F>) -> Array4<F> {
        let (b, ch, t, f) = x.dim();
        let fo = self.out_bins(f);
        let inv = c::<F>(1.0 / self.factor as f64);
        let mut dx = Array4::zeros((b, ch, t, f));
        for s in 0..b {
            for cc in 0..ch {
                for tt in 0..t {
                    for fb in 0..fo {
                        let base = fb * self.factor;
                        let mut arg = 0usize;
                        let mut mx = x[[s, cc, tt, base]];
                        for k in 1..self.factor {
                            let v = x[[s, cc, tt, base + k]];
                            if v > mx {
                                mx = v;
                                arg = k;
                            }
                        }
                        let g = dy[[s, cc, tt, fb]];
                        dx[[s, cc, tt, base + arg]] = dx[[s, cc, tt, base + arg]] + g;
                        for k in 0..self.factor {
                            dx[[s, cc, tt, base + k]] = dx[[s, cc, tt, base + k]] + g * inv;
                        }
                    }
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::component_rng;
    use rand::Rng;

    #[test]
    fn pooling_values() {
        let x: Array4<f64> = ndarray::array![[[[1.0, 3.0, 2.0, 0.0, -1.0]]]];
        let pool = DualPoolFreq::new(2);
        let y = pool.forward(&x).unwrap();
        // windows [1,3], [2,0]; trailing -1 dropped
        assert_eq!(y.dim(), (1, 1, 1, 2));
        assert!((y[[0, 0, 0, 0]] - (3.0 + 2.0)).abs() < 1e-12);
        assert!((y[[0, 0, 0, 1]] - (2.0 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn pooling_gradient_matches_fd() {
        let mut rng = component_rng(4, "pool");
        let x = Array4::<f64>::from_shape_fn((2, 2, 3, 8), |_| rng.gen_range(-1.0..1.0));
        let proj = Array4::from_shape_fn((2, 2, 3, 2), |_| rng.gen_range(-1.0..1.0));
        let pool = DualPoolFreq::new(4);
        let dx = pool.backward(&x, &proj);
        let h = 1e-6;
        let mut xp = x.clone();
        for &(s, cc, tt, ff) in &[(0usize, 0, 0, 0usize), (1, 1, 2, 7), (0, 1, 1, 4)] {
            xp[[s, cc, tt, ff]] += h;
            let up = (pool.forward(&xp).unwrap() * &proj).sum();
            xp[[s, cc, tt, ff]] -= 2.0 * h;
            let down = (pool.forward(&xp).unwrap() * &proj).sum();
            xp[[s, cc, tt, ff]] += h;
            let numeric = (up - down) / (2.0 * h);
            let analytic = dx[[s, cc, tt, ff]];
            assert!(
                (analytic - numeric).abs() < 1e-6,
                "{analytic} vs {numeric}"
            );
        }
    }
}
