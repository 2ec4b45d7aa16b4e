//! Attention pooling of a user's review embeddings, keyed by the embedding of
//! the user's original id.
//!
//! `alpha_i = softmax_i(e_i^T A o)` and `x = sum_i alpha_i e_i`, with a single
//! matrix `A` shared by every review and user.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::embed::Embedding;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Most recent reviews kept per user.
pub const MAX_REVIEWS: usize = 20;

const INIT_NOISE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub a: Matrix,
    pub seed: u64,
}

/// Review embeddings (chronological) and id embedding for one user.
#[derive(Debug, Clone, PartialEq)]
pub struct UserReviews {
    pub user_id: String,
    pub reviews: Vec<Embedding>,
    pub id_vec: Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedUserVector {
    pub user_id: String,
    pub x: Embedding,
}

impl AttentionParams {
    /// Identity plus small seeded Gaussian noise.
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_NOISE).expect("valid normal");
        let mut a = Matrix::identity(dim);
        for v in a.data.iter_mut() {
            *v += normal.sample(&mut rng);
        }
        AttentionParams { a, seed }
    }

    pub fn from_matrix(a: Matrix, seed: u64) -> Result<Self> {
        if a.rows != a.cols {
            return Err(Error::Dimension {
                expected: a.rows,
                found: a.cols,
            });
        }
        if !a.is_finite() {
            return Err(Error::Divergence("attention matrix is not finite".into()));
        }
        Ok(AttentionParams { a, seed })
    }

    pub fn dim(&self) -> usize {
        self.a.rows
    }

    fn check(&self, reviews: &[Embedding], id_vec: &Embedding) -> Result<()> {
        if reviews.is_empty() {
            return Err(Error::data("no reviews for user"));
        }
        let d = self.dim();
        for v in reviews.iter().chain(std::iter::once(id_vec)) {
            if v.dim() != d {
                return Err(Error::Dimension {
                    expected: d,
                    found: v.dim(),
                });
            }
        }
        Ok(())
    }

    pub fn logits(&self, reviews: &[Embedding], id_vec: &Embedding) -> Result<Vec<f64>> {
        self.check(reviews, id_vec)?;
        let key = self.a.matvec(id_vec);
        Ok(reviews.iter().map(|e| linalg::dot(e, &key)).collect())
    }

    pub fn attention_weights(&self, reviews: &[Embedding], id_vec: &Embedding) -> Result<Vec<f64>> {
        Ok(linalg::softmax(&self.logits(reviews, id_vec)?))
    }

    pub fn fuse_vector(&self, reviews: &[Embedding], id_vec: &Embedding) -> Result<Embedding> {
        let weights = self.attention_weights(reviews, id_vec)?;
        let mut x = vec![0.0; self.dim()];
        for (w, e) in weights.iter().zip(reviews) {
            linalg::axpy(*w, e, &mut x);
        }
        Embedding::new(x)
    }

    pub fn fuse(&self, user: &UserReviews) -> Result<FusedUserVector> {
        let x = self
            .fuse_vector(&user.reviews, &user.id_vec)
            .map_err(|e| match e {
                Error::Data(msg) => Error::Data(format!("{msg} {}", user.user_id)),
                other => other,
            })?;
        Ok(FusedUserVector {
            user_id: user.user_id.clone(),
            x,
        })
    }

    /// Gradient of `<upstream, x>` with respect to `A`.
    pub fn fusion_grad(
        &self,
        reviews: &[Embedding],
        id_vec: &Embedding,
        upstream: &[f64],
    ) -> Result<Matrix> {
        let weights = self.attention_weights(reviews, id_vec)?;
        if upstream.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                found: upstream.len(),
            });
        }
        let scores: Vec<f64> = reviews.iter().map(|e| linalg::dot(upstream, e)).collect();
        let mean: f64 = weights.iter().zip(&scores).map(|(w, s)| w * s).sum();
        // d logit_i / dA = e_i o^T, so dL/dA = (sum_i g_i e_i) o^T
        let mut left = vec![0.0; self.dim()];
        for ((w, s), e) in weights.iter().zip(&scores).zip(reviews) {
            linalg::axpy(w * (s - mean), e, &mut left);
        }
        let mut grad = Matrix::zeros(self.dim(), self.dim());
        grad.add_outer(1.0, &left, id_vec);
        Ok(grad)
    }
}
