//! Query-to-target contrastive objective.
//!
//! For a batch of normalized query embeddings `u` and target embeddings `v`
//! where `u[i]` pairs with `v[i]`:
//!
//! ```text
//! loss = -(1/B) sum_i log( exp(tau u_i.v_i) / sum_j exp(tau u_i.v_j) )
//! ```
//!
//! `tau` multiplies the dot products. Only the query-to-target direction is
//! computed.

use crate::diffcore::kernels;
use crate::error::{Error, Result};
use crate::scalar::{self, Scalar};
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f64 = 10.0;

/// Tolerance on the unit-norm precondition of [`contrastive_q2t`].
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { tau: DEFAULT_TAU }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("tau must be positive and finite, got {}", self.tau)));
        }
        Ok(())
    }
}

pub fn contrastive_q2t<T: Scalar>(u_hat: &Tensor<T>, v_hat: &Tensor<T>, tau: f64) -> Result<T> {
    LossConfig { tau }.validate()?;
    if !u_hat.is_matrix() || !v_hat.is_matrix() || u_hat.shape() != v_hat.shape() {
        return Err(Error::shape(
            "contrastive_q2t",
            format!("embeddings {:?} and {:?} must be equal-shaped matrices", u_hat.shape(), v_hat.shape()),
        ));
    }
    let b = u_hat.rows();
    if b < 2 {
        return Err(Error::config("contrastive loss needs a batch of at least 2"));
    }
    for (which, t) in [("query", u_hat), ("target", v_hat)] {
        for r in 0..b {
            let n = scalar::l2_norm(t.row(r)).as_f64();
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Data(format!("{which} row {r} has norm {n}, expected 1")));
            }
        }
    }
    let d = u_hat.cols();
    let tau = T::of(tau);
    let logits: Vec<T> = kernels::matmul_bt(u_hat.data(), v_hat.data(), b, d, b)
        .into_iter()
        .map(|x| x * tau)
        .collect();
    let (loss, _) = kernels::softmax_xent_diag(&logits, b, b);
    Ok(loss)
}
