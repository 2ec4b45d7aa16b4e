//! Residual quantization over a stack of codebooks.
//!
//! Level `i` picks the codeword nearest to the running residual `r_i`, and
//! the next residual is `r_{i+1} = r_i - v[d_i]`. The sum of the selected
//! vectors approximates the input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub level: usize,
    /// `K x d_code`
    pub vectors: Matrix,
    pub usage_counts: Vec<u64>,
}

impl Codebook {
    pub fn new(level: usize, vectors: Matrix) -> Result<Self> {
        if vectors.rows == 0 {
            return Err(Error::Config(
                "codebook must hold at least one vector".into(),
            ));
        }
        if !vectors.is_finite() {
            return Err(Error::Divergence(format!("codebook {level} is not finite")));
        }
        let k = vectors.rows;
        Ok(Codebook {
            level,
            vectors,
            usage_counts: vec![0; k],
        })
    }

    pub fn size(&self) -> usize {
        self.vectors.rows
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols
    }

    pub fn vector(&self, k: usize) -> &[f64] {
        self.vectors.row(k)
    }

    /// Index of the closest vector; the lowest index wins ties.
    pub fn nearest_code(&self, r: &[f64]) -> usize {
        debug_assert_eq!(r.len(), self.dim());
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for k in 0..self.size() {
            let dist = linalg::squared_distance(self.vector(k), r);
            if dist < best_dist {
                best = k;
                best_dist = dist;
            }
        }
        best
    }

    pub fn reset_usage(&mut self) {
        self.usage_counts.iter_mut().for_each(|c| *c = 0);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookStack {
    pub levels: Vec<Codebook>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult {
    pub codes: Vec<usize>,
    /// Sum of the selected vectors.
    pub quantized: Vec<f64>,
    /// `r_0 = z` through `r_p`.
    pub residuals: Vec<Vec<f64>>,
}

impl CodebookStack {
    pub fn new(levels: Vec<Codebook>) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| Error::Config("at least one codebook level is required".into()))?;
        let dim = first.dim();
        if let Some(bad) = levels.iter().find(|c| c.dim() != dim) {
            return Err(Error::Dimension {
                expected: dim,
                found: bad.dim(),
            });
        }
        Ok(CodebookStack { levels })
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn dim(&self) -> usize {
        self.levels[0].dim()
    }

    /// Number of distinct code tuples, `prod K_l`.
    pub fn capacity(&self) -> u128 {
        self.levels
            .iter()
            .map(|c| c.size() as u128)
            .fold(1u128, |acc, k| acc.saturating_mul(k))
    }

    pub fn quantize(&self, z: &[f64]) -> QuantizationResult {
        debug_assert_eq!(z.len(), self.dim());
        let mut residuals = Vec::with_capacity(self.depth() + 1);
        let mut codes = Vec::with_capacity(self.depth());
        let mut quantized = vec![0.0; z.len()];
        let mut r = z.to_vec();
        for codebook in &self.levels {
            let d = codebook.nearest_code(&r);
            let v = codebook.vector(d);
            linalg::axpy(1.0, v, &mut quantized);
            let next = linalg::sub(&r, v);
            residuals.push(r);
            r = next;
            codes.push(d);
        }
        residuals.push(r);
        QuantizationResult {
            codes,
            quantized,
            residuals,
        }
    }

    /// Sum of the vectors named by `codes`.
    pub fn decode_codes(&self, codes: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (codebook, &d) in self.levels.iter().zip(codes) {
            linalg::axpy(1.0, codebook.vector(d), &mut out);
        }
        out
    }
}
