//! Gated recurrent units: single-direction cells and the bidirectional layer.
//!
//! Gate math follows the common convention with reset/update/new gates and
//! the reset gate applied to the recurrent contribution of the new gate:
//!   r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
//!   z = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
//!   n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
//!   h' = (1 - z) * n + z * h

use ndarray::{s, Array2, Array3};
use rand_chacha::ChaCha12Rng;

use super::{into_standard, sigmoid, uniform_init, Param, Parameterized, Real};

#[derive(Debug, Clone)]
pub struct GruCell<F> {
    /// (3H, I) rows ordered [r; z; n]
    pub w_ih: Param<F>,
    /// (3H, H)
    pub w_hh: Param<F>,
    pub b_ih: Param<F>,
    pub b_hh: Param<F>,
    pub input_size: usize,
    pub hidden_size: usize,
    pub reverse: bool,
}

/// Per-step activations saved for backward, indexed by processing step.
pub struct GruCtx<F> {
    r: Array3<F>,
    z: Array3<F>,
    n: Array3<F>,
    qn: Array3<F>,
    hprev: Array3<F>,
}

impl<F: Real> GruCell<F> {
    pub fn new(input_size: usize, hidden_size: usize, reverse: bool, rng: &mut ChaCha12Rng) -> Self {
        let limit = 1.0 / (hidden_size as f64).sqrt();
        GruCell {
            w_ih: Param::new(uniform_init(&[3 * hidden_size, input_size], limit, rng)),
            w_hh: Param::new(uniform_init(&[3 * hidden_size, hidden_size], limit, rng)),
            b_ih: Param::new(uniform_init(&[3 * hidden_size], limit, rng)),
            b_hh: Param::new(uniform_init(&[3 * hidden_size], limit, rng)),
            input_size,
            hidden_size,
            reverse,
        }
    }

    #[inline]
    fn time_index(&self, step: usize, t_len: usize) -> usize {
        if self.reverse {
            t_len - 1 - step
        } else {
            step
        }
    }

    /// x: (B, T, I) -> hidden sequence (B, T, H) in actual time order.
    pub fn forward(&self, x: &Array3<F>) -> (Array3<F>, GruCtx<F>) {
        let (b, t_len, i) = x.dim();
        debug_assert_eq!(i, self.input_size);
        let h = self.hidden_size;
        let w_ih = self.w_ih.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let w_hh = self.w_hh.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b_ih = self.b_ih.value.as_slice().unwrap();
        let b_hh = self.b_hh.value.as_slice().unwrap();

        // input projections for every step at once
        let x2d = x.view().into_shape_with_order((b * t_len, i)).unwrap();
        let mut p = into_standard(x2d.dot(&w_ih.t())); // (B*T, 3H)
        for mut row in p.rows_mut() {
            for (v, bias) in row.iter_mut().zip(b_ih) {
                *v = *v + *bias;
            }
        }
        let p3 = p.into_shape_with_order((b, t_len, 3 * h)).unwrap();

        let mut out = Array3::zeros((b, t_len, h));
        let mut ctx = GruCtx {
            r: Array3::zeros((t_len, b, h)),
            z: Array3::zeros((t_len, b, h)),
            n: Array3::zeros((t_len, b, h)),
            qn: Array3::zeros((t_len, b, h)),
            hprev: Array3::zeros((t_len, b, h)),
        };
        let mut hstate = Array2::<F>::zeros((b, h));
        for step in 0..t_len {
            let t = self.time_index(step, t_len);
            let mut q = hstate.dot(&w_hh.t()); // (B, 3H)
            for mut row in q.rows_mut() {
                for (v, bias) in row.iter_mut().zip(b_hh) {
                    *v = *v + *bias;
                }
            }
            ctx.hprev.slice_mut(s![step, .., ..]).assign(&hstate);
            let pt = p3.slice(s![.., t, ..]);
            for bb in 0..b {
                for j in 0..h {
                    let r = sigmoid(pt[[bb, j]] + q[[bb, j]]);
                    let z = sigmoid(pt[[bb, h + j]] + q[[bb, h + j]]);
                    let qn = q[[bb, 2 * h + j]];
                    let n = (pt[[bb, 2 * h + j]] + r * qn).tanh();
                    let hnew = (F::one() - z) * n + z * hstate[[bb, j]];
                    ctx.r[[step, bb, j]] = r;
                    ctx.z[[step, bb, j]] = z;
                    ctx.n[[step, bb, j]] = n;
                    ctx.qn[[step, bb, j]] = qn;
                    out[[bb, t, j]] = hnew;
                    hstate[[bb, j]] = hnew;
                }
            }
        }
        (out, ctx)
    }

    /// dout: (B, T, H) gradient on the full hidden sequence.
    pub fn backward(&mut self, x: &Array3<F>, ctx: &GruCtx<F>, dout: &Array3<F>) -> Array3<F> {
        let (b, t_len, i) = x.dim();
        let h = self.hidden_size;
        let w_ih = self.w_ih.value.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        let w_hh = self.w_hh.value.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();

        let mut dp = Array3::<F>::zeros((b, t_len, 3 * h));
        let mut dw_hh = Array2::<F>::zeros((3 * h, h));
        let mut db_hh = vec![F::zero(); 3 * h];
        let mut dh_carry = Array2::<F>::zeros((b, h));
        let mut dq = Array2::<F>::zeros((b, 3 * h));
        for step in (0..t_len).rev() {
            let t = self.time_index(step, t_len);
            for bb in 0..b {
                for j in 0..h {
                    let dh = dout[[bb, t, j]] + dh_carry[[bb, j]];
                    let r = ctx.r[[step, bb, j]];
                    let z = ctx.z[[step, bb, j]];
                    let n = ctx.n[[step, bb, j]];
                    let qn = ctx.qn[[step, bb, j]];
                    let hprev = ctx.hprev[[step, bb, j]];
                    let dz = dh * (hprev - n);
                    let dn = dh * (F::one() - z);
                    let dan = dn * (F::one() - n * n);
                    let dr = dan * qn;
                    let dqn = dan * r;
                    let dar = dr * r * (F::one() - r);
                    let daz = dz * z * (F::one() - z);
                    dq[[bb, j]] = dar;
                    dq[[bb, h + j]] = daz;
                    dq[[bb, 2 * h + j]] = dqn;
                    dp[[bb, t, j]] = dar;
                    dp[[bb, t, h + j]] = daz;
                    dp[[bb, t, 2 * h + j]] = dan;
                    dh_carry[[bb, j]] = dh * z;
                }
            }
            let hprev_t = ctx.hprev.slice(s![step, .., ..]);
            dh_carry = dh_carry + dq.dot(&w_hh);
            dw_hh = dw_hh + dq.t().dot(&hprev_t);
            for bb in 0..b {
                for g in 0..3 * h {
                    db_hh[g] = db_hh[g] + dq[[bb, g]];
                }
            }
        }

        let x2d = x.view().into_shape_with_order((b * t_len, i)).unwrap();
        let dp2d = dp.view().into_shape_with_order((b * t_len, 3 * h)).unwrap();
        let dx2d = into_standard(dp2d.dot(&w_ih)); // (B*T, I)
        let dw_ih = dp2d.t().dot(&x2d);

        let mut g = self.w_ih.grad.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
        g += &dw_ih;
        let mut g = self.w_hh.grad.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
        g += &dw_hh;
        {
            let gb = self.b_ih.grad.as_slice_mut().unwrap();
            for row in dp2d.rows() {
                for (g, v) in gb.iter_mut().zip(row) {
                    *g = *g + *v;
                }
            }
        }
        {
            let gb = self.b_hh.grad.as_slice_mut().unwrap();
            for (g, d) in gb.iter_mut().zip(db_hh) {
                *g = *g + d;
            }
        }
        dx2d.into_shape_with_order((b, t_len, i)).unwrap()
    }
}

impl<F: Real> Parameterized<F> for GruCell<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&format!("{prefix}.w_ih"), &mut self.w_ih);
        f(&format!("{prefix}.w_hh"), &mut self.w_hh);
        f(&format!("{prefix}.b_ih"), &mut self.b_ih);
        f(&format!("{prefix}.b_hh"), &mut self.b_hh);
    }
}

/// Forward and reverse cells whose hidden sequences are concatenated along
/// the feature axis.
#[derive(Debug, Clone)]
pub struct BiGru<F> {
    pub fwd: GruCell<F>,
    pub bwd: GruCell<F>,
}

pub struct BiGruCtx<F> {
    fwd: GruCtx<F>,
    bwd: GruCtx<F>,
}

impl<F: Real> BiGru<F> {
    pub fn new(input_size: usize, hidden_size: usize, rng: &mut ChaCha12Rng) -> Self {
        BiGru {
            fwd: GruCell::new(input_size, hidden_size, false, rng),
            bwd: GruCell::new(input_size, hidden_size, true, rng),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.fwd.hidden_size
    }

    /// (B, T, I) -> (B, T, 2H)
    pub fn forward(&self, x: &Array3<F>) -> (Array3<F>, BiGruCtx<F>) {
        let (hf, cf) = self.fwd.forward(x);
        let (hb, cb) = self.bwd.forward(x);
        let (b, t, h) = hf.dim();
        let mut out = Array3::zeros((b, t, 2 * h));
        out.slice_mut(s![.., .., 0..h]).assign(&hf);
        out.slice_mut(s![.., .., h..2 * h]).assign(&hb);
        (out, BiGruCtx { fwd: cf, bwd: cb })
    }

    pub fn backward(&mut self, x: &Array3<F>, ctx: &BiGruCtx<F>, dout: &Array3<F>) -> Array3<F> {
        let h = self.hidden_size();
        let df = dout.slice(s![.., .., 0..h]).to_owned();
        let db = dout.slice(s![.., .., h..2 * h]).to_owned();
        let dxf = self.fwd.backward(x, &ctx.fwd, &df);
        let dxb = self.bwd.backward(x, &ctx.bwd, &db);
        dxf + dxb
    }
}

impl<F: Real> Parameterized<F> for BiGru<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.fwd.visit_params(&format!("{prefix}.fwd"), f);
        self.bwd.visit_params(&format!("{prefix}.bwd"), f);
    }
}
