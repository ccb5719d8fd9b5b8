use std::fmt;
use std::sync::Arc;

use super::AutogradError;

/// Dense row-major matrix of `f64`.
///
/// Every value in the crate is at most two-dimensional: scalars are `1×1`
/// and vectors are single rows. Storage sits behind an [`Arc`] so that
/// recording a parameter on a tape does not copy it; mutation goes through
/// [`Tensor::data_mut`], which copies only while a tape still holds a
/// reference.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AutogradError> {
        if rows * cols != data.len() {
            return Err(AutogradError::Shape {
                op: "tensor",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            rows,
            cols,
            data: Arc::new(data),
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: Arc::new(vec![0.0; rows * cols]),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: Arc::new(vec![value]),
        }
    }

    pub fn row(values: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: Arc::new(values),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self {
            rows: n,
            cols: n,
            data: Arc::new(data),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `1×1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

/// Dense kernels shared by the tape and by the tape-free inference paths.
pub mod kernels {
    /// `out[m×n] = a[m×k] · b[k×n]`.
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += aip * bv;
                }
            }
        }
        out
    }

    /// `out[m×k] += g[m×n] · bᵀ` where `b` is `k×n`.
    pub fn matmul_grad_lhs(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let g_row = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let b_row = &b[p * n..(p + 1) * n];
                let mut acc = 0.0;
                for (gv, bv) in g_row.iter().zip(b_row) {
                    acc += gv * bv;
                }
                out[i * k + p] += acc;
            }
        }
    }

    /// `out[k×n] += aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
    pub fn matmul_grad_rhs(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let g_row = &g[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let out_row = &mut out[p * n..(p + 1) * n];
                for (o, gv) in out_row.iter_mut().zip(g_row) {
                    *o += aip * gv;
                }
            }
        }
    }

    /// Row vector times matrix plus bias: `x[1×k] · w[k×n] + b[n]`.
    ///
    /// The bias is added after the product so results match a tape
    /// `matmul` followed by `add` bit for bit.
    pub fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut out = matmul(x, w, 1, x.len(), n);
        for (o, bv) in out.iter_mut().zip(b) {
            *o += bv;
        }
        out
    }

    pub fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }

    /// In-place log-softmax over consecutive branch segments of `row`.
    pub fn log_softmax_branches(row: &mut [f64], branches: &[usize]) {
        let mut start = 0;
        for &size in branches {
            let seg = &mut row[start..start + size];
            let max = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + seg.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in seg.iter_mut() {
                *v -= lse;
            }
            start += size;
        }
    }
}
