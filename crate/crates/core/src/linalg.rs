//! Row-major dense matrices and the few kernels the model needs.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
    }

    /// Entries drawn from `U(-bound, bound)`.
    pub fn uniform<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        Matrix {
            rows,
            cols,
            data: uniform_vec(rows * cols, bound, rng),
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn uniform_vec<R: Rng>(n: usize, bound: f64, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

#[inline(always)]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline(always)]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn add_assign(y: &mut [f64], x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}

/// Dense affine layer `y = W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            w: Matrix::zeros(output, input),
            b: vec![0.0; output],
        }
    }

    /// Weights and bias from `U(±1/sqrt(fan_in))`.
    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        Linear {
            w: Matrix::uniform(output, input, bound, rng),
            b: uniform_vec(output, bound, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols
    }

    pub fn output_dim(&self) -> usize {
        self.w.rows
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.w.rows).map(|o| dot(self.w.row(o), x) + self.b[o]).collect()
    }

    /// Row-wise application to an `n × in` matrix.
    pub fn apply_rows(&self, x: &Matrix) -> Matrix {
        let (outputs, inputs) = (self.w.rows, self.w.cols);
        let mut wt = vec![0.0; inputs * outputs];
        for o in 0..outputs {
            for (k, &w) in self.w.row(o).iter().enumerate() {
                wt[k * outputs + o] = w;
            }
        }
        let mut out = Matrix::zeros(x.rows, outputs);
        for i in 0..x.rows {
            let yi = out.row_mut(i);
            for (k, &xk) in x.row(i).iter().enumerate() {
                axpy(xk, &wt[k * outputs..(k + 1) * outputs], yi);
            }
            add_assign(yi, &self.b);
        }
        out
    }

    /// Accumulates parameter gradients for one input and adds `W^T dy` to `dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear, dx: Option<&mut [f64]>) {
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            axpy(g, x, grad.w.row_mut(o));
            grad.b[o] += g;
        }
        if let Some(dx) = dx {
            for (o, &g) in dy.iter().enumerate() {
                if g != 0.0 {
                    axpy(g, self.w.row(o), dx);
                }
            }
        }
    }

    pub fn backward_rows(&self, x: &Matrix, dy: &Matrix, grad: &mut Linear) -> Matrix {
        let mut dx = Matrix::zeros(x.rows, x.cols);
        for i in 0..x.rows {
            let dxi = &mut dx.data[i * x.cols..(i + 1) * x.cols];
            self.backward(x.row(i), dy.row(i), grad, Some(dxi));
        }
        dx
    }
}

/// In-place softmax of `x`.
pub fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}
