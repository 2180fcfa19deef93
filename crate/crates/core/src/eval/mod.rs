//! Evaluation: LDA probes under latent swaps, Fréchet distance of
//! reconstructions, and pitch accuracy.
//!
//! The swap protocol pairs each validation sequence `i` with a partner `j`
//! that differs on the probed factor, decodes `(z^i, v^j)` and `(z^j, v^i)`
//! and asks an LDA classifier (fitted on training-set posterior means of
//! `v`) which factor value the re-inferred `v` carries.

mod lda;
mod linalg;
mod metrics;

use serde::{Deserialize, Serialize};

pub use lda::{lda_fit, LdaModel};
pub use linalg::{cholesky, cholesky_solve, sym_matrix_sqrt, symmetric_eigen};
pub use metrics::{extract_pitch_contour, frechet_distance, macro_f1, raw_pitch_accuracy, GaussianStats};

use crate::error::{Error, Result};
use crate::model::{ModelParams, Network, ParamVars};
use crate::synthdata::{time_major_sequence, Dataset};
use crate::tensor::{Rng, Tape, Tensor};

pub const FACTOR_NAMES: [&str; 2] = ["instrument", "octave"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub seed: u64,
    /// Draw latents from the posteriors; `false` decodes posterior means.
    pub sample_latents: bool,
    /// Bin tolerance for pitch accuracy.
    pub rpa_tolerance: usize,
    /// Bins between octaves, used to shift reference contours after swaps.
    pub octave_offset: usize,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            seed: 0,
            sample_latents: true,
            rpa_tolerance: 1,
            octave_offset: 8,
            batch_size: 64,
        }
    }
}

/// Macro-F1 of one factor before and after each kind of swap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SwapReport {
    pub factor: usize,
    pub f1_pre: f64,
    pub f1_post_global: f64,
    pub f1_post_local: f64,
}

/// Decoded and re-encoded sequences of one swap pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SwapDecodes {
    pub pairing: Vec<usize>,
    /// Decoder means, one [T, D] tensor per sequence.
    pub recon: Vec<Tensor>,
    /// Decoded from (z^i, v^j).
    pub x_vswap: Vec<Tensor>,
    /// Decoded from (z^j, v^i).
    pub x_zswap: Vec<Tensor>,
    /// Posterior means of v, row-major [N, L_v].
    pub v_pre: Vec<f64>,
    pub v_post_global: Vec<f64>,
    pub v_post_local: Vec<f64>,
}

/// For each `i`, a uniformly drawn `j` whose label differs from `labels[i]`.
pub fn cross_label_pairing(labels: &[u8], rng: &mut Rng) -> Result<Vec<usize>> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &li)| {
            let candidates: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] != li).collect();
            if candidates.is_empty() {
                return Err(Error::contract(format!(
                    "sequence {i} (label {li}) has no partner with a different label"
                )));
            }
            Ok(candidates[rng.below(candidates.len())])
        })
        .collect()
}

fn chunks(n: usize, size: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(size.max(1)).map(move |s| (s..(s + size.max(1)).min(n)).collect())
}

/// Posterior means of v for every sequence, row-major [N, L_v].
pub fn posterior_means(params: &ModelParams, data: &Dataset, batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len() * params.config.l_v);
    for idx in chunks(data.len(), batch_size) {
        let mut tape = Tape::new();
        let vars = ParamVars::constants(&mut tape, &params.tensors);
        let net = Network::new(&params.config, &vars);
        let x = tape.constant(data.batch(&idx).x);
        let q = net.encode_global(&mut tape, x)?;
        out.extend_from_slice(tape.value(q.mean).data());
    }
    Ok(out)
}

/// Infers latents for every `i` and its partner `pairing[i]`, decodes the
/// reconstruction and both swaps, and re-infers v from each decode.
pub fn swap_decode(
    params: &ModelParams,
    data: &Dataset,
    pairing: &[usize],
    options: &EvalOptions,
    rng: &mut Rng,
) -> Result<SwapDecodes> {
    if pairing.len() != data.len() || pairing.iter().any(|&j| j >= data.len()) {
        return Err(Error::contract(format!(
            "pairing of length {} for {} sequences",
            pairing.len(),
            data.len()
        )));
    }
    let mut out = SwapDecodes {
        pairing: pairing.to_vec(),
        recon: Vec::new(),
        x_vswap: Vec::new(),
        x_zswap: Vec::new(),
        v_pre: Vec::new(),
        v_post_global: Vec::new(),
        v_post_local: Vec::new(),
    };
    for idx in chunks(data.len(), options.batch_size) {
        let partners: Vec<usize> = idx.iter().map(|&i| pairing[i]).collect();
        let mut tape = Tape::new();
        let vars = ParamVars::constants(&mut tape, &params.tensors);
        let net = Network::new(&params.config, &vars);
        let x_i = tape.constant(data.batch(&idx).x);
        let x_j = tape.constant(data.batch(&partners).x);

        let mut infer = |tape: &mut Tape, x| -> Result<_> {
            let q_v = net.encode_global(tape, x)?;
            let v = if options.sample_latents { q_v.sample(tape, rng)? } else { q_v.mean };
            let q_z = net.encode_local(tape, x, Some(v))?;
            let z = if options.sample_latents { q_z.sample(tape, rng)? } else { q_z.mean };
            Ok((q_v.mean, v, z))
        };
        let (v_mean_i, v_i, z_i) = infer(&mut tape, x_i)?;
        let (_, v_j, z_j) = infer(&mut tape, x_j)?;
        let recon = net.decode(&mut tape, z_i, v_i)?.mean;
        let x_vswap = net.decode(&mut tape, z_i, v_j)?.mean;
        let x_zswap = net.decode(&mut tape, z_j, v_i)?.mean;
        let post_g = net.encode_global(&mut tape, x_vswap)?.mean;
        let post_l = net.encode_global(&mut tape, x_zswap)?.mean;

        for b in 0..idx.len() {
            out.recon.push(time_major_sequence(tape.value(recon), b));
            out.x_vswap.push(time_major_sequence(tape.value(x_vswap), b));
            out.x_zswap.push(time_major_sequence(tape.value(x_zswap), b));
        }
        out.v_pre.extend_from_slice(tape.value(v_mean_i).data());
        out.v_post_global.extend_from_slice(tape.value(post_g).data());
        out.v_post_local.extend_from_slice(tape.value(post_l).data());
    }
    Ok(out)
}

/// Fits the probe on `train`, pairs `val` across labels of `factor`, and
/// scores the re-inferred v against the labels it should carry.
pub fn swap_classification_protocol(
    params: &ModelParams,
    train: &Dataset,
    val: &Dataset,
    factor: usize,
    options: &EvalOptions,
    rng: &mut Rng,
) -> Result<(SwapReport, SwapDecodes)> {
    if factor >= val.n_factors {
        return Err(Error::contract(format!("factor {factor} not present in the dataset")));
    }
    let l_v = params.config.l_v;
    let lda = lda_fit(&posterior_means(params, train, options.batch_size)?, l_v, &train.labels(factor))?;
    let labels = val.labels(factor);
    let pairing = cross_label_pairing(&labels, rng)?;
    let decodes = swap_decode(params, val, &pairing, options, rng)?;
    let partner_labels: Vec<u8> = pairing.iter().map(|&j| labels[j]).collect();
    let report = SwapReport {
        factor,
        f1_pre: macro_f1(&lda.predict(&decodes.v_pre)?, &labels)?,
        f1_post_global: macro_f1(&lda.predict(&decodes.v_post_global)?, &partner_labels)?,
        f1_post_local: macro_f1(&lda.predict(&decodes.v_post_local)?, &labels)?,
    };
    Ok((report, decodes))
}

/// Contour of `x` moved by `shift` bins (negative values clamp at 0).
fn shifted_contour(x: &Tensor, shift: i64) -> Vec<usize> {
    extract_pitch_contour(x)
        .into_iter()
        .map(|p| (p as i64 + shift).max(0) as usize)
        .collect()
}

fn mean_rpa(pairs: impl Iterator<Item = (Vec<usize>, Vec<usize>)>, tol: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for (pred, truth) in pairs {
        total += raw_pitch_accuracy(&pred, &truth, tol)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::contract("pitch accuracy over no sequences"));
    }
    Ok(total / n as f64)
}

/// Pitch accuracy of a reconstruction and both swaps. After a global swap
/// the melody of `i` should sound at the octave of `j`; after a local swap
/// the melody of `j` should sound at the octave of `i`.
pub fn swap_pitch_accuracy(
    val: &Dataset,
    decodes: &SwapDecodes,
    options: &EvalOptions,
) -> Result<(f64, f64, f64)> {
    let tol = options.rpa_tolerance;
    let octave_shift = |from: usize, to: usize| {
        (val.records[to].octave as i64 - val.records[from].octave as i64) * options.octave_offset as i64
    };
    let n = val.len();
    let pre = mean_rpa(
        (0..n).map(|i| (extract_pitch_contour(&decodes.recon[i]), extract_pitch_contour(&val.records[i].x))),
        tol,
    )?;
    let post_global = mean_rpa(
        (0..n).map(|i| {
            let j = decodes.pairing[i];
            (
                extract_pitch_contour(&decodes.x_vswap[i]),
                shifted_contour(&val.records[i].x, octave_shift(i, j)),
            )
        }),
        tol,
    )?;
    let post_local = mean_rpa(
        (0..n).map(|i| {
            let j = decodes.pairing[i];
            (
                extract_pitch_contour(&decodes.x_zswap[i]),
                shifted_contour(&val.records[j].x, octave_shift(j, i)),
            )
        }),
        tol,
    )?;
    Ok((pre, post_global, post_local))
}

/// Frames of every sequence stacked as rows of an [N·T, D] matrix.
pub fn frame_rows<'a>(seqs: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut d = 0;
    for s in seqs {
        d = s.shape()[1];
        data.extend_from_slice(s.data());
    }
    if d == 0 {
        return Err(Error::contract("no frames to stack"));
    }
    Tensor::new(&[data.len() / d, d], data)
}

/// Reconstruction metrics: mean squared error per value and the Fréchet
/// distance between frame statistics of reconstructions and inputs.
pub fn reconstruction_metrics(val: &Dataset, recon: &[Tensor]) -> Result<(f64, f64)> {
    if recon.len() != val.len() {
        return Err(Error::contract("one reconstruction per sequence is required"));
    }
    let mut se = 0.0;
    let mut count = 0usize;
    for (r, rec) in val.records.iter().zip(recon) {
        for (a, b) in r.x.data().iter().zip(rec.data()) {
            se += (a - b).powi(2);
        }
        count += r.x.len();
    }
    let real = GaussianStats::from_rows(&frame_rows(val.records.iter().map(|r| &r.x))?)?;
    let fake = GaussianStats::from_rows(&frame_rows(recon)?)?;
    Ok((se / count as f64, frechet_distance(&real, &fake)?))
}

/// Rows of the evaluation CSV.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<(String, String, f64)>,
}

pub const REPORT_HEADER: &str = "metric,factor,value";

impl EvalReport {
    fn push(&mut self, metric: &str, factor: &str, value: f64) {
        self.rows.push((metric.to_string(), factor.to_string(), value));
    }

    pub fn get(&self, metric: &str, factor: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|(m, f, _)| m == metric && f == factor)
            .map(|r| r.2)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for (m, f, v) in &self.rows {
            s.push_str(&format!("{m},{f},{v:e}\n"));
        }
        s
    }
}

/// Every metric for every factor in `val`. Swaps and the reconstruction use
/// latents drawn from a generator seeded by `options.seed`.
pub fn run_evaluation_suite(
    params: &ModelParams,
    train: &Dataset,
    val: &Dataset,
    options: &EvalOptions,
) -> Result<EvalReport> {
    params.validate()?;
    if val.bins() != params.config.d_input {
        return Err(Error::config(
            "d_input",
            format!("model expects {} bins, dataset has {}", params.config.d_input, val.bins()),
        ));
    }
    let mut report = EvalReport::default();
    for (factor, &name) in FACTOR_NAMES.iter().enumerate().take(val.n_factors) {
        let mut rng = Rng::derive(options.seed, factor as u64);
        let (swap, decodes) = swap_classification_protocol(params, train, val, factor, options, &mut rng)?;
        report.push("f1_pre", name, swap.f1_pre);
        report.push("f1_post_global", name, swap.f1_post_global);
        report.push("f1_post_local", name, swap.f1_post_local);
        let (pre, post_g, post_l) = swap_pitch_accuracy(val, &decodes, options)?;
        if factor == 0 {
            let (mse, frechet) = reconstruction_metrics(val, &decodes.recon)?;
            report.push("recon_mse", "all", mse);
            report.push("frechet_recon", "all", frechet);
            report.push("rpa_pre", "all", pre);
        }
        report.push("rpa_post_global", name, post_g);
        report.push("rpa_post_local", name, post_l);
    }
    Ok(report)
}
