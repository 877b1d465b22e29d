//! Synthetic least-squares tasks with a controlled ground-truth rank.

use serde::{Deserialize, Serialize};

use crate::network::{Batch, Targets};
use crate::numerics::svd::{singular_values, thin_q};
use crate::numerics::{Matrix, RandomSource};
use crate::{Error, Result};

/// Noise-free regression `y = W* x` with `x ~ N(0, I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeastSquaresTask {
    pub w_star: Matrix,
    pub m: usize,
    pub n: usize,
    pub target_rank: usize,
}

/// Builds `W* = U_k Σ_k V_kᵀ` from random orthonormal factors with singular
/// values drawn uniformly from `[0.5, 2]`.
pub fn gen_least_squares(
    m: usize,
    n: usize,
    target_rank: usize,
    rng: &mut RandomSource,
) -> Result<LeastSquaresTask> {
    if target_rank == 0 || target_rank > m.min(n) {
        return Err(Error::InvalidArgument(format!(
            "target rank {target_rank} must be in 1..={}",
            m.min(n)
        )));
    }
    let u = thin_q(&rng.normal_matrix(m, target_rank))?;
    let v = thin_q(&rng.normal_matrix(n, target_rank))?;
    let sigma: Vec<f64> = (0..target_rank).map(|_| rng.uniform_in(0.5, 2.0)).collect();
    let us = Matrix::from_fn(m, target_rank, |r, c| u.get(r, c) * sigma[c]);
    let w_star = us.matmul_t(&v)?;
    Ok(LeastSquaresTask {
        w_star,
        m,
        n,
        target_rank,
    })
}

impl LeastSquaresTask {
    /// `batch_size` columns of i.i.d. standard normal inputs with exact
    /// targets `W* X`.
    pub fn sample_batch(&self, batch_size: usize, rng: &mut RandomSource) -> Result<Batch> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument(
                "batch size must be at least 1".into(),
            ));
        }
        let inputs = rng.normal_matrix(self.n, batch_size);
        let targets = self.w_star.matmul(&inputs)?;
        Ok(Batch {
            inputs,
            targets: Targets::Dense(targets),
        })
    }

    /// Number of singular values above `1e-8 · σ_max`.
    pub fn numerical_rank(&self) -> Result<usize> {
        let s = singular_values(&self.w_star)?;
        let cutoff = 1e-8 * s[0];
        Ok(s.iter().filter(|&&v| v > cutoff).count())
    }
}
