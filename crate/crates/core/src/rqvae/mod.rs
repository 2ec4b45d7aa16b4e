//! Residual-quantized autoencoder.
//!
//! `z = encoder(x)`, `z_hat = sum_i v_i[d_i]` from the residual quantizer and
//! `x_hat = decoder(z_hat)`. Training minimizes
//!
//! ```text
//! L = |x - x_hat|^2 + sum_i |sg(r_i) - v_i[d_i]|^2 + beta |r_i - sg(v_i[d_i])|^2
//! ```
//!
//! with a straight-through estimator carrying the decoder gradient back to
//! `z`. Codebooks are updated only by the first quantization term.

mod checkpoint;
mod kmeans;
mod mlp;
mod quantizer;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use kmeans::kmeans;
pub use mlp::{Mlp, MlpTrace};
pub use quantizer::{Codebook, CodebookStack, QuantizationResult};
pub use train::{
    init_codebooks, train, train_joint, Diverged, EpochLoss, TrainConfig, TrainError,
    TrainingInputs,
};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

pub const DEFAULT_BETA: f64 = 0.25;
pub const DEFAULT_HIDDEN: usize = 128;
pub const DEFAULT_CODE_DIM: usize = 32;
pub const DEFAULT_CODEBOOK_SIZE: usize = 256;
pub const DEFAULT_LEVELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RqvaeConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub code_dim: usize,
    pub codebook_size: usize,
    pub levels: usize,
    pub beta: f64,
}

impl RqvaeConfig {
    pub fn new(input_dim: usize) -> Self {
        RqvaeConfig {
            input_dim,
            hidden_dim: DEFAULT_HIDDEN,
            code_dim: DEFAULT_CODE_DIM,
            codebook_size: DEFAULT_CODEBOOK_SIZE,
            levels: DEFAULT_LEVELS,
            beta: DEFAULT_BETA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("code_dim", self.code_dim),
            ("codebook_size", self.codebook_size),
            ("levels", self.levels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("rqvae.{name} must be positive")));
            }
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("rqvae.beta must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RqvaeModel {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub stack: CodebookStack,
    pub beta: f64,
}

/// Everything computed by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardState {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub encoder_trace: MlpTrace,
    pub quant: QuantizationResult,
    pub decoder_trace: MlpTrace,
    pub recon_loss: f64,
    pub rq_loss: f64,
}

impl ForwardState {
    pub fn z(&self) -> &[f64] {
        &self.encoder_trace.output
    }

    pub fn x_hat(&self) -> &[f64] {
        &self.decoder_trace.output
    }

    pub fn total_loss(&self) -> f64 {
        self.recon_loss + self.rq_loss
    }
}

/// Gradients for every trainable tensor, plus the gradient with respect to
/// the encoder input (used to train upstream attention).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub codebooks: Vec<Matrix>,
    pub input: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &RqvaeModel) -> Self {
        Gradients {
            encoder: model.encoder.zeros_like(),
            decoder: model.decoder.zeros_like(),
            codebooks: model
                .stack
                .levels
                .iter()
                .map(|c| Matrix::zeros(c.size(), c.dim()))
                .collect(),
            input: vec![0.0; model.input_dim()],
        }
    }
}

impl RqvaeModel {
    /// Random MLP weights and zero codebooks; codebooks are meant to be
    /// filled by [`init_codebooks`] before training.
    pub fn new(config: &RqvaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Mlp::init(
            config.input_dim,
            config.hidden_dim,
            config.code_dim,
            &mut rng,
        );
        let decoder = Mlp::init(
            config.code_dim,
            config.hidden_dim,
            config.input_dim,
            &mut rng,
        );
        let levels = (0..config.levels)
            .map(|l| Codebook::new(l, Matrix::zeros(config.codebook_size, config.code_dim)))
            .collect::<Result<Vec<_>>>()?;
        Ok(RqvaeModel {
            encoder,
            decoder,
            stack: CodebookStack::new(levels)?,
            beta: config.beta,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn code_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        self.encoder.forward(x).output
    }

    /// Codeword tuple for an input vector.
    pub fn codes(&self, x: &[f64]) -> Vec<usize> {
        self.stack.quantize(&self.encode(x)).codes
    }

    /// Forward pass reconstructing `x` from itself.
    pub fn losses(&self, x: &[f64]) -> Result<ForwardState> {
        self.forward(x, x)
    }

    /// Forward pass with separate encoder input and reconstruction target.
    pub fn forward(&self, input: &[f64], target: &[f64]) -> Result<ForwardState> {
        if input.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                found: input.len(),
            });
        }
        let encoder_trace = self.encoder.forward(input);
        let quant = self.stack.quantize(&encoder_trace.output);
        let decoder_trace = self.decoder.forward(&quant.quantized);
        let recon_loss = linalg::squared_distance(target, &decoder_trace.output);
        // Both quantization terms share the value |r_i - v_i|^2; they differ
        // only in where the gradient goes.
        let rq_loss: f64 = self
            .stack
            .levels
            .iter()
            .zip(&quant.codes)
            .zip(&quant.residuals)
            .map(|((cb, &d), r)| (1.0 + self.beta) * linalg::squared_distance(r, cb.vector(d)))
            .sum();
        if !recon_loss.is_finite() || !rq_loss.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite loss (recon {recon_loss}, rq {rq_loss})"
            )));
        }
        Ok(ForwardState {
            input: input.to_vec(),
            target: target.to_vec(),
            encoder_trace,
            quant,
            decoder_trace,
            recon_loss,
            rq_loss,
        })
    }

    /// Accumulate the gradients of `state`'s total loss into `grads`.
    pub fn backward(&self, state: &ForwardState, grads: &mut Gradients) {
        let d_xhat: Vec<f64> = state
            .x_hat()
            .iter()
            .zip(&state.target)
            .map(|(xh, x)| 2.0 * (xh - x))
            .collect();
        // straight-through: dL/dz starts as dL/dz_hat
        let mut d_z = self.decoder.backward(
            &state.quant.quantized,
            &state.decoder_trace,
            &d_xhat,
            &mut grads.decoder,
        );

        for (level, (cb, &d)) in self.stack.levels.iter().zip(&state.quant.codes).enumerate() {
            let r = &state.quant.residuals[level];
            let v = cb.vector(d);
            // codebook term: d/dv |sg(r) - v|^2
            let g = grads.codebooks[level].row_mut(d);
            for ((gj, vj), rj) in g.iter_mut().zip(v).zip(r) {
                *gj += 2.0 * (vj - rj);
            }
            // commitment term: r_i = z - sum_{j<i} sg(v_j), so dr_i/dz = I
            for ((dz, rj), vj) in d_z.iter_mut().zip(r).zip(v) {
                *dz += 2.0 * self.beta * (rj - vj);
            }
        }

        let d_input =
            self.encoder
                .backward(&state.input, &state.encoder_trace, &d_z, &mut grads.encoder);
        linalg::axpy(1.0, &d_input, &mut grads.input);
    }

    /// Plain gradient step.
    pub fn apply(&mut self, grads: &Gradients, lr: f64) {
        self.encoder.add_scaled(-lr, &grads.encoder);
        self.decoder.add_scaled(-lr, &grads.decoder);
        for (cb, g) in self.stack.levels.iter_mut().zip(&grads.codebooks) {
            linalg::axpy(-lr, &g.data, &mut cb.vectors.data);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite()
            && self.decoder.is_finite()
            && self.stack.levels.iter().all(|c| c.vectors.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(beta: f64) -> RqvaeModel {
        let config = RqvaeConfig {
            input_dim: 2,
            hidden_dim: 3,
            code_dim: 2,
            codebook_size: 2,
            levels: 1,
            beta,
        };
        RqvaeModel::new(&config, 0).unwrap()
    }

    #[test]
    fn hand_sized_rq_loss() {
        // Encoder pinned to z = (1, 0). v_0 = (0, 0) and v_1 = (1, 1) are both
        // at distance 1, the tie goes to v_0, and L_rq = |z|^2 (1 + beta).
        let mut model = tiny(0.25);
        model.encoder.w2 = Matrix::zeros(2, 3);
        model.encoder.b2 = vec![1.0, 0.0];
        model.stack.levels[0].vectors = Matrix::from_vec(2, 2, vec![0.0, 0.0, 1.0, 1.0]);
        let state = model.losses(&[0.7, -0.3]).unwrap();
        assert_eq!(state.quant.codes, vec![0]);
        assert_eq!(state.rq_loss, 1.25);
    }

    #[test]
    fn rq_loss_vanishes_when_z_is_a_codeword() {
        let mut model = tiny(0.25);
        let x = [0.3, -0.2];
        let z = model.encode(&x);
        model.stack.levels[0].vectors.row_mut(1).copy_from_slice(&z);
        let state = model.losses(&x).unwrap();
        assert_eq!(state.quant.codes, vec![1]);
        assert_eq!(state.rq_loss, 0.0);
        assert!(state.recon_loss >= 0.0);
    }

    #[test]
    fn recon_loss_vanishes_with_exact_decoder() {
        // z is a codeword and the decoder maps it straight back to x.
        let mut model = tiny(0.25);
        let x = [0.1, 0.2];
        let z = model.encode(&x);
        model.stack.levels[0].vectors.row_mut(0).copy_from_slice(&z);
        model.decoder.w2 = Matrix::zeros(2, 3);
        model.decoder.b2 = x.to_vec();
        let state = model.losses(&x).unwrap();
        assert_eq!(state.recon_loss, 0.0);
        assert_eq!(state.rq_loss, 0.0);
    }

    #[test]
    fn zero_beta_removes_commitment_gradient() {
        let mut model = tiny(1.0);
        model.beta = 0.0;
        model.stack.levels[0].vectors = Matrix::from_vec(2, 2, vec![0.5, 0.5, -0.5, -0.5]);
        let x = [0.4, -0.9];
        let state = model.losses(&x).unwrap();

        let mut with_rq = Gradients::zeros_like(&model);
        model.backward(&state, &mut with_rq);

        // Only the reconstruction path remains for the encoder.
        let mut recon_only = Gradients::zeros_like(&model);
        let d_xhat: Vec<f64> = state
            .x_hat()
            .iter()
            .zip(&x)
            .map(|(a, b)| 2.0 * (a - b))
            .collect();
        let d_z = model.decoder.backward(
            &state.quant.quantized,
            &state.decoder_trace,
            &d_xhat,
            &mut recon_only.decoder,
        );
        model
            .encoder
            .backward(&x, &state.encoder_trace, &d_z, &mut recon_only.encoder);
        assert_eq!(with_rq.encoder, recon_only.encoder);
    }

    #[test]
    fn unselected_codes_get_no_gradient() {
        let mut model = tiny(0.25);
        model.stack.levels[0].vectors = Matrix::from_vec(2, 2, vec![0.0, 0.0, 50.0, 50.0]);
        let state = model.losses(&[0.1, 0.1]).unwrap();
        assert_eq!(state.quant.codes, vec![0]);
        let mut grads = Gradients::zeros_like(&model);
        model.backward(&state, &mut grads);
        assert_eq!(grads.codebooks[0].row(1), &[0.0, 0.0]);
    }

    #[test]
    fn config_validation() {
        let mut c = RqvaeConfig::new(8);
        assert!(c.validate().is_ok());
        c.beta = 0.0;
        assert!(c.validate().is_err());
        let mut c = RqvaeConfig::new(8);
        c.levels = 0;
        assert!(c.validate().is_err());
    }
}
