use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{kernels, AutogradError, Param, Tape, Tensor, Var};

/// Semi-orthogonal `rows×cols` matrix whose entries have RMS `gain/√rows`.
///
/// Orthonormalizes a Gaussian draw by modified Gram-Schmidt along the
/// shorter dimension.
pub fn orthogonal_init<R: Rng>(rng: &mut R, rows: usize, cols: usize, gain: f64) -> Tensor {
    let (short, long) = (rows.min(cols), rows.max(cols));
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(short);
    while q.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| rng.sample(StandardNormal)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= n);
        q.push(v);
    }
    // Unit vectors of length `long` carry entries of RMS 1/√long; rescale so
    // the typical entry is 1/√fan-in whichever side is longer.
    let scale = gain * (long as f64 / rows as f64).sqrt();
    let mut data = vec![0.0; rows * cols];
    for (i, u) in q.iter().enumerate() {
        for (j, &x) in u.iter().enumerate() {
            let (r, c) = if rows <= cols { (i, j) } else { (j, i) };
            data[r * cols + c] = x * scale;
        }
    }
    Tensor::new(rows, cols, data).expect("shape is consistent")
}

/// Fully connected layer `y = x·W + b` with `W` stored `in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, name: &str, input: usize, output: usize, gain: f64) -> Self {
        Self {
            w: Param::new(format!("{name}.w"), orthogonal_init(rng, input, output, gain)),
            b: Param::new(format!("{name}.b"), Tensor::zeros(1, output)),
        }
    }

    pub fn input(&self) -> usize {
        self.w.value.rows()
    }

    pub fn output(&self) -> usize {
        self.w.value.cols()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, AutogradError> {
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        let h = tape.matmul(x, w)?;
        tape.add(h, b)
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        kernels::affine(x, self.w.value.data(), self.b.value.data())
    }

    fn zero(&mut self) {
        self.w.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        self.b.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Multilayer perceptron with tanh between layers and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `sizes` lists every width from input to output. The last layer is
    /// initialized with `out_gain`.
    pub fn new<R: Rng>(rng: &mut R, name: &str, sizes: &[usize], out_gain: f64) -> Self {
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i + 1 == n { out_gain } else { 1.0 };
                Linear::new(rng, &format!("{name}.{i}"), sizes[i], sizes[i + 1], gain)
            })
            .collect();
        Self { layers }
    }

    pub fn input(&self) -> usize {
        self.layers[0].input()
    }

    pub fn output(&self) -> usize {
        self.layers.last().map_or(0, Linear::output)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, AutogradError> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i + 1 < self.layers.len() {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.eval(&h);
            if i + 1 < self.layers.len() {
                h.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        h
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }

    /// Sets every weight and bias to zero.
    pub fn zero(&mut self) {
        self.layers.iter_mut().for_each(Linear::zero);
    }
}
