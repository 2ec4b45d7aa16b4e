use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, Matrix};

/// Two-layer perceptron: `out = W2 tanh(W1 x + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpTrace {
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let mut layer = |rows: usize, cols: usize| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Matrix::from_vec(rows, cols, data)
        };
        let w1 = layer(hidden, input);
        let w2 = layer(output, hidden);
        Mlp {
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; output],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            w1: Matrix::zeros(self.w1.rows, self.w1.cols),
            b1: vec![0.0; self.b1.len()],
            w2: Matrix::zeros(self.w2.rows, self.w2.cols),
            b2: vec![0.0; self.b2.len()],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows
    }

    pub fn forward(&self, x: &[f64]) -> MlpTrace {
        let mut hidden = self.w1.matvec(x);
        for (h, b) in hidden.iter_mut().zip(&self.b1) {
            *h = (*h + b).tanh();
        }
        let mut output = self.w2.matvec(&hidden);
        for (o, b) in output.iter_mut().zip(&self.b2) {
            *o += b;
        }
        MlpTrace { hidden, output }
    }

    /// Accumulate parameter gradients into `grads` and return the gradient
    /// with respect to the input.
    pub fn backward(
        &self,
        x: &[f64],
        trace: &MlpTrace,
        d_out: &[f64],
        grads: &mut Mlp,
    ) -> Vec<f64> {
        grads.w2.add_outer(1.0, d_out, &trace.hidden);
        linalg::axpy(1.0, d_out, &mut grads.b2);
        let mut d_hidden = self.w2.matvec_t(d_out);
        for (d, h) in d_hidden.iter_mut().zip(&trace.hidden) {
            *d *= 1.0 - h * h;
        }
        grads.w1.add_outer(1.0, &d_hidden, x);
        linalg::axpy(1.0, &d_hidden, &mut grads.b1);
        self.w1.matvec_t(&d_hidden)
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Mlp) {
        linalg::axpy(alpha, &other.w1.data, &mut self.w1.data);
        linalg::axpy(alpha, &other.b1, &mut self.b1);
        linalg::axpy(alpha, &other.w2.data, &mut self.w2.data);
        linalg::axpy(alpha, &other.b2, &mut self.b2);
    }

    /// All parameters, flattened in a fixed order.
    pub fn params_mut(&mut self) -> [&mut [f64]; 4] {
        [
            &mut self.w1.data,
            &mut self.b1,
            &mut self.w2.data,
            &mut self.b2,
        ]
    }

    pub fn params(&self) -> [&[f64]; 4] {
        [&self.w1.data, &self.b1, &self.w2.data, &self.b2]
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| linalg::all_finite(p))
    }
}
