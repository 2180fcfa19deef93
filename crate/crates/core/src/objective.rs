//! Training losses: the sequence ELBO with a configurable global prior, and
//! the four swap regularisers.
//!
//! Every term is a per-sequence quantity averaged over the batch. Frame-level
//! quantities (reconstruction, local KL, local swap KLs) are averaged over
//! time, so the magnitudes do not depend on `T`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::distributions::{kl_diag_gaussians, DiagGaussian};
use crate::error::{Error, Result};
use crate::model::{ForwardPass, Network, ParamVars};
use crate::tensor::{Rng, Tape, Tensor, Var};

/// Scalar values of every loss component for one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Expected log-likelihood per frame (higher is better).
    pub recon: f64,
    pub kl_local: f64,
    pub kl_global: f64,
    /// KL(q(v | x^{v:i→j}) ‖ q(v | x^j))
    pub swap_gv: f64,
    /// KL(q(z | x^{v:i→j}) ‖ q(z | x^i))
    pub swap_gz: f64,
    /// KL(q(v | x^{z:i→j}) ‖ q(v | x^i))
    pub swap_lv: f64,
    /// KL(q(z | x^{z:i→j}) ‖ q(z | x^j))
    pub swap_lz: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Unit-weighted minimisation objective over the components.
    pub fn weighted_total(&self) -> f64 {
        -self.recon
            + self.kl_local
            + self.kl_global
            + self.swap_gv
            + self.swap_gz
            + self.swap_lv
            + self.swap_lz
    }

    pub fn components(&self) -> [f64; 8] {
        [
            self.recon,
            self.kl_local,
            self.kl_global,
            self.swap_gv,
            self.swap_gz,
            self.swap_lv,
            self.swap_lz,
            self.total,
        ]
    }

    /// Running average helper: `self += other · w`.
    pub fn accumulate(&mut self, other: &LossBreakdown, w: f64) {
        self.recon += w * other.recon;
        self.kl_local += w * other.kl_local;
        self.kl_global += w * other.kl_global;
        self.swap_gv += w * other.swap_gv;
        self.swap_gz += w * other.swap_gz;
        self.swap_lv += w * other.swap_lv;
        self.swap_lz += w * other.swap_lz;
        self.total += w * other.total;
    }
}

/// Prior over the global latent.
#[derive(Clone, Debug, PartialEq)]
pub enum GlobalPriorSpec {
    Standard,
    /// Posterior of a frozen copy of the global encoder, keyed by parameter name.
    Informed(BTreeMap<String, Tensor>),
}

/// Which terms enter the objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LossSpec {
    /// Include the local KL against the transition prior.
    pub kl_local: bool,
    pub prior: GlobalPriorSpec,
    pub swaps: bool,
}

impl LossSpec {
    /// Reconstruction plus global KL to N(0, I); the local path is not scored.
    pub fn constrained() -> Self {
        LossSpec {
            kl_local: false,
            prior: GlobalPriorSpec::Standard,
            swaps: false,
        }
    }

    /// The plain sequence ELBO with a standard global prior.
    pub fn standard_elbo() -> Self {
        LossSpec {
            kl_local: true,
            prior: GlobalPriorSpec::Standard,
            swaps: false,
        }
    }

    pub fn informed(snapshot: BTreeMap<String, Tensor>, swaps: bool) -> Self {
        LossSpec {
            kl_local: true,
            prior: GlobalPriorSpec::Informed(snapshot),
            swaps,
        }
    }
}

/// (1/T)·Σ_t −½‖x_t − μ_t‖², averaged over the batch. `x` is [T, B, D].
pub fn reconstruction_term(tape: &mut Tape, recon: &DiagGaussian, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s != tape.shape(recon.mean) || s.len() != 3 {
        return Err(Error::dim(
            "reconstruction_term",
            format!("x {s:?} vs mean {:?}", tape.shape(recon.mean)),
        ));
    }
    let diff = tape.sub(x, recon.mean)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq, None)?;
    Ok(tape.scale(total, -0.5 / (s[0] * s[1]) as f64))
}

/// Frame-mean, batch-mean KL between two [T, B, L] Gaussians.
pub fn kl_local_term(tape: &mut Tape, q_z: &DiagGaussian, prior_z: &DiagGaussian) -> Result<Var> {
    let kl = kl_diag_gaussians(tape, q_z, prior_z)?;
    tape.mean(kl, None)
}

/// Batch-mean KL of q(v | x) to the chosen prior. The informed prior needs
/// the input batch `x` to evaluate the frozen encoder.
pub fn kl_global_term(
    tape: &mut Tape,
    net: &Network,
    q_v: &DiagGaussian,
    prior: &GlobalPriorSpec,
    x: Option<Var>,
) -> Result<Var> {
    let p = match prior {
        GlobalPriorSpec::Standard => {
            let shape = q_v.shape(tape).to_vec();
            DiagGaussian::standard(tape, &shape)
        }
        GlobalPriorSpec::Informed(snapshot) => {
            let x = x.ok_or_else(|| Error::contract("the informed prior needs the input batch"))?;
            let frozen = ParamVars::constants(tape, snapshot);
            Network::new(net.config, &frozen).encode_global(tape, x)?
        }
    };
    let kl = kl_diag_gaussians(tape, q_v, &p)?;
    tape.mean(kl, None)
}

/// Uniform random permutation of `0..n` without fixed points (identity for n = 1).
pub fn random_derangement(rng: &mut Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    if n < 2 {
        return p;
    }
    loop {
        rng.shuffle(&mut p);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            return p;
        }
    }
}

/// The four swap KLs, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct SwapTerms {
    pub gv: Var,
    pub gz: Var,
    pub lv: Var,
    pub lz: Var,
}

/// Swap each sequence's global or local latents with those of its partner
/// `pairing[i]`, decode to the mean, re-encode, and compare with the
/// partner's or own posterior. Targets carry no gradient.
pub fn swap_regularisers(
    tape: &mut Tape,
    net: &Network,
    pass: &ForwardPass,
    pairing: &[usize],
) -> Result<SwapTerms> {
    let b = tape.shape(pass.v)[0];
    if pairing.len() != b || pairing.iter().any(|&j| j >= b) {
        return Err(Error::contract(format!("pairing {pairing:?} for batch of {b}")));
    }
    if b > 1 && pairing.iter().enumerate().any(|(i, &j)| i == j) {
        return Err(Error::contract("pairing must not map a sequence to itself"));
    }
    let v_j = tape.gather(pass.v, 0, pairing)?;
    let z_j = tape.gather(pass.z, 1, pairing)?;
    let x_vswap = net.decode(tape, pass.z, v_j)?.mean;
    let x_zswap = net.decode(tape, z_j, pass.v)?.mean;

    let q_v_i = pass.q_v.detach(tape);
    let q_z_i = pass.q_z.detach(tape);
    let q_v_j = DiagGaussian {
        mean: tape.gather(q_v_i.mean, 0, pairing)?,
        logvar: tape.gather(q_v_i.logvar, 0, pairing)?,
    };
    let q_z_j = DiagGaussian {
        mean: tape.gather(q_z_i.mean, 1, pairing)?,
        logvar: tape.gather(q_z_i.logvar, 1, pairing)?,
    };

    let (qv_v, qz_v) = reencode(tape, net, x_vswap)?;
    let (qv_z, qz_z) = reencode(tape, net, x_zswap)?;
    let gv = kl_diag_gaussians(tape, &qv_v, &q_v_j)?;
    let gz = kl_diag_gaussians(tape, &qz_v, &q_z_i)?;
    let lv = kl_diag_gaussians(tape, &qv_z, &q_v_i)?;
    let lz = kl_diag_gaussians(tape, &qz_z, &q_z_j)?;
    Ok(SwapTerms {
        gv: tape.mean(gv, None)?,
        gz: tape.mean(gz, None)?,
        lv: tape.mean(lv, None)?,
        lz: tape.mean(lz, None)?,
    })
}

/// Posteriors of a decoded batch. A `v`-conditioned local encoder receives
/// the re-inferred posterior mean of `v`.
fn reencode(tape: &mut Tape, net: &Network, x: Var) -> Result<(DiagGaussian, DiagGaussian)> {
    let q_v = net.encode_global(tape, x)?;
    let q_z = net.encode_local(tape, x, Some(q_v.mean))?;
    Ok((q_v, q_z))
}

/// A loss evaluated on a tape: the objective node plus component values.
#[derive(Clone, Copy, Debug)]
pub struct LossOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub pass: ForwardPass,
}

/// Runs the model on `x` ([T, B, D]) and assembles the objective in `spec`.
///
/// Noise is drawn from `rng` in a fixed order (v, then z, then the swap
/// pairing when `pairing` is `None`), so a cloned generator reproduces the
/// same stochastic path.
pub fn compute_loss(
    tape: &mut Tape,
    net: &Network,
    x: Var,
    spec: &LossSpec,
    rng: &mut Rng,
    pairing: Option<&[usize]>,
) -> Result<LossOutput> {
    let pass = net.forward_with(tape, x, rng, spec.kl_local)?;
    let recon = reconstruction_term(tape, &pass.recon, x)?;
    let kl_global = kl_global_term(tape, net, &pass.q_v, &spec.prior, Some(x))?;
    let neg_recon = tape.neg(recon);
    let mut total = tape.add(neg_recon, kl_global)?;
    let mut breakdown = LossBreakdown {
        recon: tape.value(recon).item(),
        kl_global: tape.value(kl_global).item(),
        ..LossBreakdown::default()
    };
    if spec.kl_local {
        let prior_z = pass.prior_z.expect("prior requested");
        let kl_local = kl_local_term(tape, &pass.q_z, &prior_z)?;
        breakdown.kl_local = tape.value(kl_local).item();
        total = tape.add(total, kl_local)?;
    }
    if spec.swaps {
        let b = tape.shape(x)[1];
        let owned;
        let pairing = match pairing {
            Some(p) => p,
            None => {
                owned = random_derangement(rng, b);
                &owned
            }
        };
        let s = swap_regularisers(tape, net, &pass, pairing)?;
        breakdown.swap_gv = tape.value(s.gv).item();
        breakdown.swap_gz = tape.value(s.gz).item();
        breakdown.swap_lv = tape.value(s.lv).item();
        breakdown.swap_lz = tape.value(s.lz).item();
        for term in [s.gv, s.gz, s.lv, s.lz] {
            total = tape.add(total, term)?;
        }
    }
    breakdown.total = tape.value(total).item();
    Ok(LossOutput {
        total,
        breakdown,
        pass,
    })
}
