use super::HomographyError;
use crate::autograd::{AutogradError, CustomBackward, Tape, Tensor, Var};

/// 3×3 projective map acting on `[u, v, 1]` with `u` the row and `v` the
/// column coordinate, stored row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(pub [f64; 9]);

impl Homography {
    pub const IDENTITY: Self = Self([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

    pub fn translation(du: f64, dv: f64) -> Self {
        Self([1.0, 0.0, du, 0.0, 1.0, dv, 0.0, 0.0, 1.0])
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    pub fn inverse(&self) -> Result<Self, HomographyError> {
        let d = self.det();
        if !d.is_finite() || d.abs() <= 1e-9 {
            return Err(HomographyError::Singular { condition: f64::INFINITY });
        }
        let m = &self.0;
        let adj = [
            m[4] * m[8] - m[5] * m[7],
            m[2] * m[7] - m[1] * m[8],
            m[1] * m[5] - m[2] * m[4],
            m[5] * m[6] - m[3] * m[8],
            m[0] * m[8] - m[2] * m[6],
            m[2] * m[3] - m[0] * m[5],
            m[3] * m[7] - m[4] * m[6],
            m[1] * m[6] - m[0] * m[7],
            m[0] * m[4] - m[1] * m[3],
        ];
        // Dividing by a unit determinant must leave entries untouched so
        // exact translations invert exactly.
        Ok(Self(if d == 1.0 { adj } else { adj.map(|v| v / d) }))
    }

    /// `self · other`.
    pub fn compose(&self, other: &Self) -> Self {
        let (a, b) = (&self.0, &other.0);
        let mut out = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                out[i * 3 + j] = (0..3).map(|k| a[i * 3 + k] * b[k * 3 + j]).sum();
            }
        }
        Self(out)
    }

    /// Maps `(u, v)`; `None` when the point goes to infinity or behind.
    pub fn apply(&self, u: f64, v: f64) -> Option<(f64, f64)> {
        let m = &self.0;
        let w = m[6] * u + m[7] * v + m[8];
        if w.abs() < 1e-12 {
            return None;
        }
        let x = m[0] * u + m[1] * v + m[2];
        let y = m[3] * u + m[4] * v + m[5];
        if w == 1.0 {
            Some((x, y))
        } else {
            Some((x / w, y / w))
        }
    }
}

/// The four fixed corners in `(u, v)`, in the order of the offset vector.
pub fn corners(rows: usize, cols: usize) -> [(f64, f64); 4] {
    let (r, c) = ((rows - 1) as f64, (cols - 1) as f64);
    [(0.0, 0.0), (r, 0.0), (r, c), (0.0, c)]
}

/// How the tape differentiates through the linear solve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveGrad {
    #[default]
    Analytic,
    FiniteDifference,
}

struct System {
    a: [[f64; 8]; 8],
    b: [f64; 8],
}

fn assemble(offsets: &[f64; 8], rows: usize, cols: usize) -> System {
    let mut a = [[0.0; 8]; 8];
    let mut b = [0.0; 8];
    for (k, &(u, v)) in corners(rows, cols).iter().enumerate() {
        let up = u + offsets[2 * k];
        let vp = v + offsets[2 * k + 1];
        a[2 * k] = [u, v, 1.0, 0.0, 0.0, 0.0, -u * up, -v * up];
        a[2 * k + 1] = [0.0, 0.0, 0.0, u, v, 1.0, -u * vp, -v * vp];
        b[2 * k] = up;
        b[2 * k + 1] = vp;
    }
    System { a, b }
}

/// LU factors with partial pivoting, packed in place.
struct Lu {
    lu: [[f64; 8]; 8],
    perm: [usize; 8],
}

impl Lu {
    fn new(mut a: [[f64; 8]; 8]) -> Result<Self, HomographyError> {
        let norm1 = (0..8).map(|j| (0..8).map(|i| a[i][j].abs()).sum::<f64>()).fold(0.0, f64::max);
        let mut perm = [0, 1, 2, 3, 4, 5, 6, 7];
        for k in 0..8 {
            let p = (k..8).fold(k, |best, i| if a[i][k].abs() > a[best][k].abs() { i } else { best });
            if a[p][k].abs() <= 1e-12 * norm1.max(1.0) {
                return Err(HomographyError::Singular { condition: f64::INFINITY });
            }
            a.swap(k, p);
            perm.swap(k, p);
            for i in k + 1..8 {
                let f = a[i][k] / a[k][k];
                a[i][k] = f;
                for j in k + 1..8 {
                    a[i][j] -= f * a[k][j];
                }
            }
        }
        let lu = Self { lu: a, perm };
        // 1-norm condition estimate from the explicit inverse.
        let mut inv_norm = 0.0f64;
        for j in 0..8 {
            let mut e = [0.0; 8];
            e[j] = 1.0;
            let col = lu.solve(&e);
            inv_norm = inv_norm.max(col.iter().map(|v| v.abs()).sum());
        }
        let condition = norm1 * inv_norm;
        if !condition.is_finite() || condition > 1e12 {
            return Err(HomographyError::Singular { condition });
        }
        Ok(lu)
    }

    fn solve(&self, b: &[f64; 8]) -> [f64; 8] {
        let mut x = [0.0; 8];
        for i in 0..8 {
            x[i] = b[self.perm[i]];
        }
        for i in 0..8 {
            for j in 0..i {
                x[i] -= self.lu[i][j] * x[j];
            }
        }
        for i in (0..8).rev() {
            for j in i + 1..8 {
                x[i] -= self.lu[i][j] * x[j];
            }
            x[i] /= self.lu[i][i];
        }
        x
    }

    /// Solves `Aᵀ x = b`.
    fn solve_transposed(&self, b: &[f64; 8]) -> [f64; 8] {
        // A = Pᵀ L U, so Aᵀ = Uᵀ Lᵀ P.
        let mut y = *b;
        for i in 0..8 {
            for j in 0..i {
                y[i] -= self.lu[j][i] * y[j];
            }
            y[i] /= self.lu[i][i];
        }
        for i in (0..8).rev() {
            for j in i + 1..8 {
                y[i] -= self.lu[j][i] * y[j];
            }
        }
        let mut x = [0.0; 8];
        for i in 0..8 {
            x[self.perm[i]] = y[i];
        }
        x
    }
}

fn uniform(offsets: &[f64; 8]) -> Option<(f64, f64)> {
    let (du, dv) = (offsets[0], offsets[1]);
    (0..4)
        .all(|k| offsets[2 * k] == du && offsets[2 * k + 1] == dv)
        .then_some((du, dv))
}

fn to_h(h: &[f64; 8]) -> Homography {
    Homography([h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0])
}

/// Homography taking the fixed corners to the corners displaced by
/// `offsets = [Δu₁, Δv₁, …, Δu₄, Δv₄]`, normalized so `h₃₃ = 1`.
pub fn solve_homography(offsets: &[f64; 8], rows: usize, cols: usize) -> Result<Homography, HomographyError> {
    if offsets.iter().any(|v| !v.is_finite()) {
        return Err(HomographyError::NonFinite);
    }
    if let Some((du, dv)) = uniform(offsets) {
        return Ok(Homography::translation(du, dv));
    }
    let sys = assemble(offsets, rows, cols);
    let lu = Lu::new(sys.a)?;
    let h = to_h(&lu.solve(&sys.b));
    if h.det().abs() <= 1e-9 {
        return Err(HomographyError::Singular { condition: f64::INFINITY });
    }
    Ok(h)
}

/// Gradient of `Σ g·H` with respect to the offsets, through `H = A⁻¹b`:
/// `λ = A⁻ᵀ g`, `∂/∂b = λ`, `∂/∂A = −λ hᵀ`.
fn analytic_grad(offsets: &[f64; 8], rows: usize, cols: usize, g: &[f64]) -> Result<[f64; 8], HomographyError> {
    let sys = assemble(offsets, rows, cols);
    let lu = Lu::new(sys.a)?;
    let h = lu.solve(&sys.b);
    let mut gh = [0.0; 8];
    gh.copy_from_slice(&g[..8]);
    let lambda = lu.solve_transposed(&gh);
    let mut out = [0.0; 8];
    for (k, &(u, v)) in corners(rows, cols).iter().enumerate() {
        for (row, slot) in [(2 * k, 2 * k), (2 * k + 1, 2 * k + 1)] {
            // Row `row` of A holds −u·x′ and −v·x′ in its last two columns,
            // and b[row] = x′.
            let da6 = -lambda[row] * h[6];
            let da7 = -lambda[row] * h[7];
            out[slot] = lambda[row] + da6 * (-u) + da7 * (-v);
        }
    }
    Ok(out)
}

fn fd_grad(offsets: &[f64; 8], rows: usize, cols: usize, g: &[f64]) -> Result<[f64; 8], HomographyError> {
    const STEP: f64 = 1e-6;
    let base = solve_general(offsets, rows, cols)?;
    let mut out = [0.0; 8];
    for i in 0..8 {
        let mut o = *offsets;
        o[i] += STEP;
        let hp = solve_general(&o, rows, cols)?;
        out[i] = (0..8).map(|k| g[k] * (hp[k] - base[k]) / STEP).sum();
    }
    Ok(out)
}

fn solve_general(offsets: &[f64; 8], rows: usize, cols: usize) -> Result<[f64; 8], HomographyError> {
    let sys = assemble(offsets, rows, cols);
    Ok(Lu::new(sys.a)?.solve(&sys.b))
}

struct SolveBackward {
    offsets: [f64; 8],
    rows: usize,
    cols: usize,
    mode: SolveGrad,
}

impl CustomBackward for SolveBackward {
    fn name(&self) -> &'static str {
        "solve_homography"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let g = match self.mode {
            SolveGrad::Analytic => analytic_grad(&self.offsets, self.rows, self.cols, grad),
            SolveGrad::FiniteDifference => fd_grad(&self.offsets, self.rows, self.cols, grad),
        };
        // The forward pass already solved this system, so it cannot fail here.
        vec![Some(g.map(|v| v.to_vec()).unwrap_or_else(|_| vec![0.0; 8]))]
    }
}

/// Records the solve on a tape: `offsets` is `1×8`, the output `3×3`.
pub fn solve_on_tape(
    tape: &mut Tape,
    offsets: Var,
    rows: usize,
    cols: usize,
    mode: SolveGrad,
) -> Result<Var, HomographyError> {
    let o = tape.value(offsets);
    if o.len() != 8 {
        return Err(AutogradError::Shape {
            op: "solve_homography",
            lhs: o.shape().to_vec(),
            rhs: vec![1, 8],
        }
        .into());
    }
    let mut off = [0.0; 8];
    off.copy_from_slice(o.data());
    let h = solve_homography(&off, rows, cols)?;
    let out = Tensor::new(3, 3, h.0.to_vec()).map_err(HomographyError::from)?;
    Ok(tape.custom(
        &[offsets],
        out,
        Box::new(SolveBackward {
            offsets: off,
            rows,
            cols,
            mode,
        }),
    )?)
}
