use rand::Rng;

use super::layers::orthogonal_init;
use crate::autograd::{kernels, AutogradError, CustomBackward, Param, Tape, Tensor, Var};

/// Gated recurrent unit with gate order `[r, z, n]`:
///
/// ```text
/// r  = σ(x·W_ir + b_ir + h·W_hr + b_hr)
/// z  = σ(x·W_iz + b_iz + h·W_hz + b_hz)
/// n  = tanh(x·W_in + b_in + r ⊙ (h·W_hn + b_hn))
/// h' = n + z ⊙ (h − n)
/// ```
#[derive(Clone, Debug)]
pub struct Gru {
    pub w_ih: Param,
    pub w_hh: Param,
    pub b_ih: Param,
    pub b_hh: Param,
}

struct StepCache {
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    ghn: Vec<f64>,
}

fn step(gx: &[f64], h: &[f64], w_hh: &[f64], b_hh: &[f64], cache: Option<&mut Vec<StepCache>>) -> Vec<f64> {
    let hd = h.len();
    let gh = kernels::affine(h, w_hh, b_hh);
    let mut r = vec![0.0; hd];
    let mut z = vec![0.0; hd];
    let mut n = vec![0.0; hd];
    let mut out = vec![0.0; hd];
    for j in 0..hd {
        r[j] = kernels::sigmoid(gx[j] + gh[j]);
        z[j] = kernels::sigmoid(gx[hd + j] + gh[hd + j]);
        n[j] = (gx[2 * hd + j] + r[j] * gh[2 * hd + j]).tanh();
        out[j] = n[j] + z[j] * (h[j] - n[j]);
    }
    if let Some(c) = cache {
        c.push(StepCache {
            r,
            z,
            n,
            ghn: gh[2 * hd..].to_vec(),
        });
    }
    out
}

impl Gru {
    pub fn new<R: Rng>(rng: &mut R, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            w_ih: Param::new(format!("{name}.w_ih"), orthogonal_init(rng, input, 3 * hidden, 1.0)),
            w_hh: Param::new(format!("{name}.w_hh"), orthogonal_init(rng, hidden, 3 * hidden, 1.0)),
            b_ih: Param::new(format!("{name}.b_ih"), Tensor::zeros(1, 3 * hidden)),
            b_hh: Param::new(format!("{name}.b_hh"), Tensor::zeros(1, 3 * hidden)),
        }
    }

    pub fn input(&self) -> usize {
        self.w_ih.value.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.value.rows()
    }

    /// One step without a tape.
    pub fn step_eval(&self, x: &[f64], h: &[f64]) -> Vec<f64> {
        let gx = kernels::affine(x, self.w_ih.value.data(), self.b_ih.value.data());
        step(&gx, h, self.w_hh.value.data(), self.b_hh.value.data(), None)
    }

    /// Unrolls over the rows of `xs` (`T×input`) from a zero hidden state,
    /// returning every hidden state as a `T×hidden` node.
    pub fn forward(&self, tape: &mut Tape, xs: Var) -> Result<Var, AutogradError> {
        let x = tape.value(xs);
        if x.cols() != self.input() {
            return Err(AutogradError::Shape {
                op: "gru",
                lhs: x.shape().to_vec(),
                rhs: self.w_ih.value.shape().to_vec(),
            });
        }
        let w_ih = tape.param(&self.w_ih);
        let w_hh = tape.param(&self.w_hh);
        let b_ih = tape.param(&self.b_ih);
        let b_hh = tape.param(&self.b_hh);
        let gx = tape.matmul(xs, w_ih)?;
        let gx = tape.add(gx, b_ih)?;
        let (out, cache) = {
            let gxv = tape.value(gx);
            let (t_len, hd) = (gxv.rows(), self.hidden());
            let mut h = vec![0.0; hd];
            let mut data = Vec::with_capacity(t_len * hd);
            let mut cache = Vec::with_capacity(t_len);
            let (whh, bhh) = (self.w_hh.value.data(), self.b_hh.value.data());
            for t in 0..t_len {
                h = step(gxv.row_slice(t), &h, whh, bhh, Some(&mut cache));
                data.extend_from_slice(&h);
            }
            (Tensor::new(t_len, hd, data)?, cache)
        };
        tape.custom(&[gx, w_hh, b_hh], out, Box::new(GruBackward { cache }))
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w_ih, &self.w_hh, &self.b_ih, &self.b_hh]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.b_ih, &mut self.b_hh]
    }
}

/// Backpropagation through time for the recurrent part; the input
/// projection is an ordinary matmul on the tape.
struct GruBackward {
    cache: Vec<StepCache>,
}

impl CustomBackward for GruBackward {
    fn name(&self) -> &'static str {
        "gru"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let w_hh = inputs[1];
        let (t_len, hd) = (output.rows(), output.cols());
        let g3 = 3 * hd;
        let mut d_gx = vec![0.0; t_len * g3];
        let mut d_gh = vec![0.0; t_len * g3];
        let mut dh_next = vec![0.0; hd];
        let zero = vec![0.0; hd];
        for t in (0..t_len).rev() {
            let c = &self.cache[t];
            let h_prev = if t == 0 { &zero[..] } else { output.row_slice(t - 1) };
            let gx = &mut d_gx[t * g3..(t + 1) * g3];
            let gh = &mut d_gh[t * g3..(t + 1) * g3];
            let mut dh_prev = vec![0.0; hd];
            for j in 0..hd {
                let dh = grad[t * hd + j] + dh_next[j];
                let (r, z, n) = (c.r[j], c.z[j], c.n[j]);
                let dn = dh * (1.0 - z);
                let dz = dh * (h_prev[j] - n);
                dh_prev[j] = dh * z;
                let dan = dn * (1.0 - n * n);
                let dar = dan * c.ghn[j] * r * (1.0 - r);
                let daz = dz * z * (1.0 - z);
                gx[j] = dar;
                gx[hd + j] = daz;
                gx[2 * hd + j] = dan;
                gh[j] = dar;
                gh[hd + j] = daz;
                gh[2 * hd + j] = dan * r;
            }
            kernels::matmul_grad_lhs(gh, w_hh.data(), &mut dh_prev, 1, hd, g3);
            dh_next = dh_prev;
        }
        let mut h_prev_all = vec![0.0; t_len * hd];
        if t_len > 1 {
            h_prev_all[hd..].copy_from_slice(&output.data()[..(t_len - 1) * hd]);
        }
        let mut d_whh = vec![0.0; hd * g3];
        kernels::matmul_grad_rhs(&h_prev_all, &d_gh, &mut d_whh, t_len, hd, g3);
        let mut d_bhh = vec![0.0; g3];
        for row in d_gh.chunks(g3) {
            d_bhh.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        vec![Some(d_gx), Some(d_whh), Some(d_bhh)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn tape_unroll_matches_step_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gru = Gru::new(&mut rng, "g", 5, 7);
        let xs = rand_t(&mut rng, 6, 5);
        let mut t = Tape::new();
        let xv = t.constant(xs.clone()).unwrap();
        let hs = gru.forward(&mut t, xv).unwrap();
        let mut h = vec![0.0; 7];
        for r in 0..6 {
            h = gru.step_eval(xs.row_slice(r), &h);
            assert_eq!(t.value(hs).row_slice(r), h.as_slice());
            assert!(h.iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn output_norm_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..20 {
            let gru = Gru::new(&mut rng, "g", 3, 4);
            let xs = rand_t(&mut rng, 5, 3);
            let weights = rand_t(&mut rng, 5, 4);
            let loss = |t: &mut Tape, hs: Var| -> Result<Var, AutogradError> {
                let w = t.constant(weights.clone())?;
                let y = t.mul(hs, w)?;
                let y = t.mul(y, y)?;
                t.sum(y)
            };
            // Input gradient through the whole unroll.
            let g = gru.clone();
            let err = grad_check(|t, x| {
                let hs = g.forward(t, x)?;
                loss(t, hs)
            }, &xs, 1e-5)
            .unwrap();
            assert!(err < 1e-4, "trial {trial} input: {err}");
            // Recurrent weights.
            let err = grad_check(|t, w| {
                let mut g2 = gru.clone();
                g2.w_hh.value = t.value(w).clone();
                let xv = t.constant(xs.clone())?;
                let hs = g2.forward_with_w_hh(t, xv, w)?;
                loss(t, hs)
            }, &gru.w_hh.value, 1e-5)
            .unwrap();
            assert!(err < 1e-4, "trial {trial} w_hh: {err}");
        }
    }

    impl Gru {
        /// Like `forward` but takes `W_hh` from an existing node.
        fn forward_with_w_hh(&self, tape: &mut Tape, xs: Var, w: Var) -> Result<Var, AutogradError> {
            let w_ih = tape.param(&self.w_ih);
            let b_ih = tape.param(&self.b_ih);
            let b_hh = tape.param(&self.b_hh);
            let gx = tape.matmul(xs, w_ih)?;
            let gx = tape.add(gx, b_ih)?;
            let gxv = tape.value(gx).clone();
            let mut h = vec![0.0; self.hidden()];
            let mut data = Vec::new();
            let mut cache = Vec::new();
            for r in 0..gxv.rows() {
                h = step(gxv.row_slice(r), &h, tape.value(w).data(), self.b_hh.value.data(), Some(&mut cache));
                data.extend_from_slice(&h);
            }
            let out = Tensor::new(gxv.rows(), self.hidden(), data)?;
            tape.custom(&[gx, w, b_hh], out, Box::new(GruBackward { cache }))
        }
    }
}
