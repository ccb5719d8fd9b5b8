use super::{Homography, HomographyError, PatchGrid};
use crate::autograd::{AutogradError, CustomBackward, Tape, Tensor, Var};

/// Value given to destination cells whose preimage leaves the source grid.
pub const VACANT: f64 = 0.5;

/// Bilinear sample location of one destination cell. Neighbours outside
/// the source read as [`VACANT`], so values fade continuously to the fill
/// over the one-cell ring around the grid.
#[derive(Clone, Copy)]
struct Sample {
    u0: isize,
    v0: isize,
    fu: f64,
    fv: f64,
    /// `Hinv·[i, j, 1]` before the perspective divide.
    p: [f64; 3],
}

fn locate(hinv: &Homography, i: usize, j: usize, rows: usize, cols: usize) -> Option<Sample> {
    let m = &hinv.0;
    let (u, v) = (i as f64, j as f64);
    let p = [
        m[0] * u + m[1] * v + m[2],
        m[3] * u + m[4] * v + m[5],
        m[6] * u + m[7] * v + m[8],
    ];
    if p[2] <= 1e-12 {
        return None;
    }
    let (us, vs) = if p[2] == 1.0 { (p[0], p[1]) } else { (p[0] / p[2], p[1] / p[2]) };
    if !(us > -1.0 && us < rows as f64 && vs > -1.0 && vs < cols as f64) {
        return None;
    }
    let (u0, v0) = (us.floor(), vs.floor());
    Some(Sample {
        u0: u0 as isize,
        v0: v0 as isize,
        fu: us - u0,
        fv: vs - v0,
        p,
    })
}

fn index(r: isize, c: isize, rows: usize, cols: usize) -> Option<usize> {
    (r >= 0 && c >= 0 && (r as usize) < rows && (c as usize) < cols).then(|| r as usize * cols + c as usize)
}

fn neighbours(s: &Sample) -> [(isize, isize); 4] {
    [(s.u0, s.v0), (s.u0, s.v0 + 1), (s.u0 + 1, s.v0), (s.u0 + 1, s.v0 + 1)]
}

fn corners_of(src: &[f64], s: &Sample, rows: usize, cols: usize) -> [f64; 4] {
    neighbours(s).map(|(r, c)| index(r, c, rows, cols).map_or(VACANT, |k| src[k]))
}

fn bilinear(q: [f64; 4], fu: f64, fv: f64) -> f64 {
    (1.0 - fu) * ((1.0 - fv) * q[0] + fv * q[1]) + fu * ((1.0 - fv) * q[2] + fv * q[3])
}

fn warp_values(src: &[f64], rows: usize, cols: usize, hinv: &Homography) -> (Vec<f64>, Vec<Option<Sample>>) {
    let mut out = vec![VACANT; rows * cols];
    let mut samples = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let s = locate(hinv, i, j, rows, cols);
            if let Some(s) = &s {
                out[i * cols + j] = bilinear(corners_of(src, s, rows, cols), s.fu, s.fv);
            }
            samples.push(s);
        }
    }
    (out, samples)
}

/// Inverse-mapping warp: destination cell `(i, j)` samples the source at
/// `H⁻¹·(i, j)` bilinearly; cells mapping a full cell or more outside the source are
/// [`VACANT`].
pub fn warp(grid: &PatchGrid, h: &Homography) -> Result<PatchGrid, HomographyError> {
    let hinv = h.inverse()?;
    let (out, _) = warp_values(grid.data(), grid.rows(), grid.cols(), &hinv);
    PatchGrid::new(grid.rows(), grid.cols(), out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

struct WarpBackward {
    rows: usize,
    cols: usize,
    hinv: Homography,
    samples: Vec<Option<Sample>>,
}

impl CustomBackward for WarpBackward {
    fn name(&self) -> &'static str {
        "warp"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let src = inputs[0].data();
        let (rows, cols) = (self.rows, self.cols);
        let mut d_src = vec![0.0; rows * cols];
        let mut d_hinv = [0.0; 9];
        for i in 0..rows {
            for j in 0..cols {
                let g = grad[i * cols + j];
                let Some(s) = &self.samples[i * cols + j] else { continue };
                if g == 0.0 {
                    continue;
                }
                let (fu, fv) = (s.fu, s.fv);
                let w = [(1.0 - fu) * (1.0 - fv), (1.0 - fu) * fv, fu * (1.0 - fv), fu * fv];
                for (wk, (r, c)) in w.iter().zip(neighbours(s)) {
                    if let Some(k) = index(r, c, rows, cols) {
                        d_src[k] += g * wk;
                    }
                }
                let q = corners_of(src, s, rows, cols);
                let d_fu = (1.0 - fv) * (q[2] - q[0]) + fv * (q[3] - q[1]);
                let d_fv = (1.0 - fu) * (q[1] - q[0]) + fu * (q[3] - q[2]);
                let [p0, p1, p2] = s.p;
                let x = [i as f64, j as f64, 1.0];
                let (gu, gv) = (g * d_fu, g * d_fv);
                for k in 0..3 {
                    d_hinv[k] += gu * x[k] / p2;
                    d_hinv[3 + k] += gv * x[k] / p2;
                    d_hinv[6 + k] -= (gu * p0 + gv * p1) * x[k] / (p2 * p2);
                }
            }
        }
        // dL/dH = −H⁻ᵀ (dL/dH⁻¹) H⁻ᵀ
        let m = &self.hinv.0;
        let mut tmp = [0.0; 9];
        for a in 0..3 {
            for b in 0..3 {
                tmp[a * 3 + b] = (0..3).map(|k| m[k * 3 + a] * d_hinv[k * 3 + b]).sum();
            }
        }
        let mut d_h = vec![0.0; 9];
        for a in 0..3 {
            for b in 0..3 {
                d_h[a * 3 + b] = -(0..3).map(|k| tmp[a * 3 + k] * m[b * 3 + k]).sum::<f64>();
            }
        }
        vec![Some(d_src), Some(d_h)]
    }
}

/// Records a warp: `grid` is the `1×(rows·cols)` source row, `h` the `3×3`
/// homography. Differentiable with respect to both.
pub fn warp_on_tape(tape: &mut Tape, grid: Var, h: Var, rows: usize, cols: usize) -> Result<Var, HomographyError> {
    let (src, hv) = (tape.value(grid), tape.value(h));
    if src.len() != rows * cols || hv.shape() != [3, 3] {
        return Err(AutogradError::Shape {
            op: "warp",
            lhs: src.shape().to_vec(),
            rhs: hv.shape().to_vec(),
        }
        .into());
    }
    let mut m = [0.0; 9];
    m.copy_from_slice(hv.data());
    let hinv = Homography(m).inverse()?;
    let (out, samples) = warp_values(src.data(), rows, cols, &hinv);
    let out = Tensor::new(1, rows * cols, out).map_err(HomographyError::from)?;
    Ok(tape.custom(
        &[grid, h],
        out,
        Box::new(WarpBackward {
            rows,
            cols,
            hinv,
            samples,
        }),
    )?)
}
