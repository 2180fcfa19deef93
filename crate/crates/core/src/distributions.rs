//! Diagonal Gaussians parameterised by mean and log-variance.
//!
//! Densities and divergences reduce over the last axis, so a distribution
//! with shape `[.., L]` yields one value per leading index.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{normal_sample, Rng, Tape, Tensor, Var};

/// ½·ln(2π)
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiagGaussian {
    pub mean: Var,
    pub logvar: Var,
}

impl DiagGaussian {
    pub fn new(tape: &Tape, mean: Var, logvar: Var) -> Result<Self> {
        if tape.shape(mean) != tape.shape(logvar) {
            return Err(Error::dim(
                "diag_gaussian",
                format!(
                    "mean {:?} vs logvar {:?}",
                    tape.shape(mean),
                    tape.shape(logvar)
                ),
            ));
        }
        Ok(DiagGaussian { mean, logvar })
    }

    /// N(0, I) as constants.
    pub fn standard(tape: &mut Tape, shape: &[usize]) -> Self {
        let mean = tape.constant(Tensor::zeros(shape));
        let logvar = tape.constant(Tensor::zeros(shape));
        DiagGaussian { mean, logvar }
    }

    pub fn shape<'t>(&self, tape: &'t Tape) -> &'t [usize] {
        tape.shape(self.mean)
    }

    /// Same values, no gradient flow.
    pub fn detach(&self, tape: &mut Tape) -> Self {
        DiagGaussian {
            mean: tape.detach(self.mean),
            logvar: tape.detach(self.logvar),
        }
    }

    /// `mean + exp(½·logvar) ⊙ ε` for a caller-provided ε.
    pub fn sample_with(&self, tape: &mut Tape, eps: Tensor) -> Result<Var> {
        if eps.shape() != tape.shape(self.mean) {
            return Err(Error::dim(
                "sample_reparam",
                format!("noise {:?} vs mean {:?}", eps.shape(), tape.shape(self.mean)),
            ));
        }
        let eps = tape.constant(eps);
        let half = tape.scale(self.logvar, 0.5);
        let std = tape.exp(half);
        let noise = tape.mul(std, eps)?;
        tape.add(self.mean, noise)
    }

    /// Reparameterised draw with ε ~ N(0, I) from `rng`.
    pub fn sample(&self, tape: &mut Tape, rng: &mut Rng) -> Result<Var> {
        let eps = normal_sample(rng, tape.shape(self.mean));
        self.sample_with(tape, eps)
    }

    /// Log-density of `x`, summed over the last axis.
    pub fn log_prob(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if tape.shape(x) != tape.shape(self.mean) {
            return Err(Error::dim(
                "log_prob",
                format!("x {:?} vs mean {:?}", tape.shape(x), tape.shape(self.mean)),
            ));
        }
        let diff = tape.sub(x, self.mean)?;
        let sq = tape.square(diff);
        let neg_lv = tape.neg(self.logvar);
        let inv_var = tape.exp(neg_lv);
        let maha = tape.mul(sq, inv_var)?;
        let inner = tape.add(maha, self.logvar)?;
        let scaled = tape.scale(inner, -0.5);
        let shifted = tape.add_scalar(scaled, -HALF_LN_2PI);
        let last = tape.shape(shifted).len() - 1;
        tape.sum(shifted, Some(last))
    }
}

/// KL(q ‖ p) in closed form, summed over the last axis. Never negative.
pub fn kl_diag_gaussians(tape: &mut Tape, q: &DiagGaussian, p: &DiagGaussian) -> Result<Var> {
    if q.shape(tape) != p.shape(tape) {
        return Err(Error::dim(
            "kl_diag_gaussians",
            format!("q {:?} vs p {:?}", q.shape(tape), p.shape(tape)),
        ));
    }
    let lv_diff = tape.sub(p.logvar, q.logvar)?;
    let log_term = tape.scale(lv_diff, 0.5);
    let var_q = tape.exp(q.logvar);
    let dmean = tape.sub(q.mean, p.mean)?;
    let dmean_sq = tape.square(dmean);
    let numer = tape.add(var_q, dmean_sq)?;
    let neg_lp = tape.neg(p.logvar);
    let inv_var_p = tape.exp(neg_lp);
    let ratio = tape.mul(numer, inv_var_p)?;
    let ratio = tape.scale(ratio, 0.5);
    let sum = tape.add(log_term, ratio)?;
    let per_dim = tape.add_scalar(sum, -0.5);
    let last = tape.shape(per_dim).len() - 1;
    tape.sum(per_dim, Some(last))
}

/// Density of a 1-D Gaussian; used by quadrature checks.
pub fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
}
