use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{kmeans, Gradients, RqvaeModel};
use crate::error::{Error, Result};
use crate::fusion::{AttentionParams, UserReviews};
use crate::linalg::{self, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub kmeans_iters: usize,
    pub reseed_dead_codes: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            kmeans_iters: 10,
            reseed_dead_codes: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Mean losses over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub recon: f64,
    pub rq: f64,
}

#[derive(Debug, Error)]
#[error("numerical divergence at epoch {epoch}, batch {batch}")]
pub struct Diverged {
    pub epoch: usize,
    pub batch: usize,
    /// Completed epochs before the failure.
    pub trace: Vec<EpochLoss>,
}

impl From<Diverged> for Error {
    fn from(d: Diverged) -> Self {
        Error::Divergence(d.to_string())
    }
}

/// Source of encoder inputs during training.
///
/// Fixed vectors ignore the input gradient; attention-fused inputs use it to
/// update the attention matrix.
pub trait TrainingInputs {
    fn len(&self) -> usize;

    fn input(&self, idx: usize) -> Result<Vec<f64>>;

    fn accumulate(&mut self, _idx: usize, _d_input: &[f64]) -> Result<()> {
        Ok(())
    }

    fn step(&mut self, _lr: f64, _batch_len: usize) {}

    fn is_finite(&self) -> bool {
        true
    }
}

struct FixedInputs<'a>(&'a [Vec<f64>]);

impl TrainingInputs for FixedInputs<'_> {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn input(&self, idx: usize) -> Result<Vec<f64>> {
        Ok(self.0[idx].clone())
    }
}

struct FusedInputs<'a> {
    attention: &'a mut AttentionParams,
    users: &'a [UserReviews],
    grad: Matrix,
}

impl TrainingInputs for FusedInputs<'_> {
    fn len(&self) -> usize {
        self.users.len()
    }

    fn input(&self, idx: usize) -> Result<Vec<f64>> {
        Ok(self.attention.fuse(&self.users[idx])?.x.into_inner())
    }

    fn accumulate(&mut self, idx: usize, d_input: &[f64]) -> Result<()> {
        let user = &self.users[idx];
        let g = self
            .attention
            .fusion_grad(&user.reviews, &user.id_vec, d_input)?;
        linalg::axpy(1.0, &g.data, &mut self.grad.data);
        Ok(())
    }

    fn step(&mut self, lr: f64, batch_len: usize) {
        linalg::axpy(
            -lr / batch_len as f64,
            &self.grad.data,
            &mut self.attention.a.data,
        );
        self.grad.data.iter_mut().for_each(|v| *v = 0.0);
    }

    fn is_finite(&self) -> bool {
        self.attention.a.is_finite()
    }
}

/// Fit each level's codebook by k-means on the residuals left by the levels
/// above it, starting from the current encoder outputs.
pub fn init_codebooks<R: Rng>(
    model: &mut RqvaeModel,
    inputs: &[Vec<f64>],
    iters: usize,
    rng: &mut R,
) {
    let mut residuals: Vec<Vec<f64>> = inputs.iter().map(|x| model.encode(x)).collect();
    for level in 0..model.stack.depth() {
        let k = model.stack.levels[level].size();
        let centroids = kmeans(&residuals, k, iters, rng);
        let codebook = &mut model.stack.levels[level];
        codebook.vectors = centroids;
        codebook.reset_usage();
        for r in residuals.iter_mut() {
            let d = codebook.nearest_code(r);
            linalg::axpy(-1.0, codebook.vector(d), r);
        }
    }
}

/// Train on fixed input vectors, each reconstructed from itself.
pub fn train(
    model: &mut RqvaeModel,
    inputs: &[Vec<f64>],
    config: &TrainConfig,
) -> Result<Vec<EpochLoss>, TrainError> {
    run(model, &mut FixedInputs(inputs), config)
}

/// Train the autoencoder and the attention matrix together. The fused
/// vector is both the encoder input and the reconstruction target, but only
/// the encoder side carries gradient back into the attention matrix.
pub fn train_joint(
    model: &mut RqvaeModel,
    attention: &mut AttentionParams,
    users: &[UserReviews],
    config: &TrainConfig,
) -> Result<Vec<EpochLoss>, TrainError> {
    let dim = attention.dim();
    let mut inputs = FusedInputs {
        attention,
        users,
        grad: Matrix::zeros(dim, dim),
    };
    run(model, &mut inputs, config)
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Diverged(#[from] Diverged),
    #[error(transparent)]
    Other(#[from] Error),
}

impl From<TrainError> for Error {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged(d) => d.into(),
            TrainError::Other(e) => e,
        }
    }
}

fn run<I: TrainingInputs>(
    model: &mut RqvaeModel,
    inputs: &mut I,
    config: &TrainConfig,
) -> Result<Vec<EpochLoss>, TrainError> {
    config.validate()?;
    let n = inputs.len();
    if n == 0 {
        return Err(Error::data("training needs at least one input").into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let initial = (0..n)
        .map(|i| inputs.input(i))
        .collect::<Result<Vec<_>>>()?;
    init_codebooks(model, &initial, config.kmeans_iters, &mut rng);
    drop(initial);

    let mut trace = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    let mut grads = Gradients::zeros_like(model);
    let levels = model.stack.depth();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        model.stack.levels.iter_mut().for_each(|c| c.reset_usage());
        let (mut recon_sum, mut rq_sum) = (0.0, 0.0);
        let mut last_residuals: Vec<Vec<Vec<f64>>> = vec![Vec::new(); levels];

        for (batch_no, batch) in order.chunks(config.batch_size).enumerate() {
            let diverged = || Diverged {
                epoch,
                batch: batch_no,
                trace: trace.clone(),
            };
            grads = zero(grads);
            last_residuals.iter_mut().for_each(Vec::clear);
            for &idx in batch {
                let x = inputs.input(idx)?;
                let state = match model.forward(&x, &x) {
                    Ok(s) => s,
                    Err(Error::Divergence(_)) => return Err(diverged().into()),
                    Err(e) => return Err(e.into()),
                };
                recon_sum += state.recon_loss;
                rq_sum += state.rq_loss;
                for (level, &d) in state.quant.codes.iter().enumerate() {
                    model.stack.levels[level].usage_counts[d] += 1;
                    last_residuals[level].push(state.quant.residuals[level].clone());
                }
                model.backward(&state, &mut grads);
                inputs.accumulate(idx, &grads.input)?;
                grads.input.iter_mut().for_each(|v| *v = 0.0);
            }
            model.apply(&grads, config.lr / batch.len() as f64);
            inputs.step(config.lr, batch.len());
            if !model.is_finite() || !inputs.is_finite() {
                return Err(diverged().into());
            }
        }

        trace.push(EpochLoss {
            epoch,
            recon: recon_sum / n as f64,
            rq: rq_sum / n as f64,
        });

        if config.reseed_dead_codes && epoch + 1 < config.epochs {
            for (codebook, pool) in model.stack.levels.iter_mut().zip(&last_residuals) {
                for k in 0..codebook.size() {
                    if codebook.usage_counts[k] == 0 && !pool.is_empty() {
                        let pick = rng.random_range(0..pool.len());
                        codebook.vectors.row_mut(k).copy_from_slice(&pool[pick]);
                    }
                }
            }
        }
    }
    Ok(trace)
}

fn zero(mut g: Gradients) -> Gradients {
    for p in g
        .encoder
        .params_mut()
        .into_iter()
        .chain(g.decoder.params_mut())
    {
        p.iter_mut().for_each(|v| *v = 0.0);
    }
    for m in g.codebooks.iter_mut() {
        m.data.iter_mut().for_each(|v| *v = 0.0);
    }
    g.input.iter_mut().for_each(|v| *v = 0.0);
    g
}
