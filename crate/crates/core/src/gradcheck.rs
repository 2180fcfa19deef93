//! Finite-difference verification of the tape's backward rules.
//!
//! Each check builds a small graph from random inputs, reduces its output
//! to a scalar with fixed random weights, and compares the reverse-mode
//! gradient of every input element against a central difference with step
//! `1e-4`. The relative error is `|a − n| / max(|a|, |n|, 1e-2)`; the floor
//! keeps near-zero gradients from inflating the ratio.

use std::collections::BTreeMap;
use std::fmt;

use crate::distributions::{kl_diag_gaussians, DiagGaussian};
use crate::error::Result;
use crate::model::{lstm_cell_step, LstmState, LstmWeights, ModelConfig, ModelParams, Network, ParamGroup, ParamVars};
use crate::objective::{compute_loss, random_derangement, LossSpec};
use crate::tensor::{Rng, Tape, Tensor, Var};

pub const STEP: f64 = 1e-4;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

/// Worst error of one named check across its trials.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn trials(&self) -> usize {
        self.checks.iter().map(|c| c.trials).sum()
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect()
    }

    fn record(&mut self, name: &str, tolerance: f64, err: f64) {
        match self.checks.iter_mut().find(|c| c.name == name) {
            Some(c) => {
                c.trials += 1;
                c.max_rel_err = c.max_rel_err.max(err);
            }
            None => self.checks.push(CheckResult {
                name: name.to_string(),
                trials: 1,
                max_rel_err: err,
                tolerance,
            }),
        }
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:<4} {:<22} trials={:<3} max_rel_err={:.3e} tol={:.0e}",
                if c.passed() { "ok" } else { "FAIL" },
                c.name,
                c.trials,
                c.max_rel_err,
                c.tolerance
            )?;
        }
        write!(
            f,
            "{} checks, {} trials: {}",
            self.checks.len(),
            self.trials(),
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

fn random_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = lo + (hi - lo) * rng.uniform();
    }
    t
}

/// Maximum relative error of `build`'s input gradients on `inputs`.
///
/// `build` receives one tape variable per input and returns any tensor;
/// the check reduces it with random weights drawn from `rng`.
pub fn check_graph(
    inputs: &[Tensor],
    rng: &mut Rng,
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        random_tensor(rng, tape.shape(out), -1.0, 1.0)
    };
    let eval = |values: &[Tensor], held: Option<&[Tensor]>| -> Result<(f64, Vec<Tensor>, Vec<Tensor>)> {
        let mut tape = match held {
            Some(h) => Tape::replaying_detached(h.to_vec()),
            None => Tape::new(),
        };
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w)?;
        let loss = tape.sum(prod, None)?;
        let value = tape.value(loss).item();
        if held.is_some() {
            return Ok((value, Vec::new(), Vec::new()));
        }
        let g = tape.backward(loss)?;
        Ok((value, vars.iter().map(|&v| g.wrt(v)).collect(), tape.detached_values()))
    };
    let (_, analytic, held) = eval(inputs, None)?;
    let held = Some(held.as_slice());
    let mut worst: f64 = 0.0;
    let mut values = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            let x0 = input.data()[e];
            values[k].data_mut()[e] = x0 + STEP;
            let (up, ..) = eval(&values, held)?;
            values[k].data_mut()[e] = x0 - STEP;
            let (down, ..) = eval(&values, held)?;
            values[k].data_mut()[e] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[k].data()[e], numeric));
        }
    }
    Ok(worst)
}

type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// (name, input shapes and value ranges, graph) for every differentiable op.
fn op_cases(rng: &mut Rng) -> Vec<(&'static str, Vec<Tensor>, Builder)> {
    let mut r = |shape: &[usize]| random_tensor(rng, shape, -1.5, 1.5);
    let pos = |t: Tensor| t.map(|v| v.abs() + 0.5);
    vec![
        ("matmul", vec![r(&[3, 4]), r(&[4, 2])], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("linear", vec![r(&[3, 4]), r(&[4, 2]), r(&[2])], Box::new(|t, v| t.linear(v[0], v[1], v[2]))),
        ("add_broadcast", vec![r(&[2, 3, 4]), r(&[3, 1])], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul_broadcast", vec![r(&[2, 3, 4]), r(&[4])], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![r(&[5])], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        ("add_scalar", vec![r(&[5])], Box::new(|t, v| Ok(t.add_scalar(v[0], 0.3)))),
        ("tanh", vec![r(&[6])], Box::new(|t, v| Ok(t.tanh(v[0])))),
        ("sigmoid", vec![r(&[6])], Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        ("exp", vec![r(&[6])], Box::new(|t, v| Ok(t.exp(v[0])))),
        ("log", vec![pos(r(&[6]))], Box::new(|t, v| t.log(v[0]))),
        ("neg", vec![r(&[6])], Box::new(|t, v| Ok(t.neg(v[0])))),
        ("square", vec![r(&[6])], Box::new(|t, v| Ok(t.square(v[0])))),
        (
            "map",
            vec![r(&[6])],
            Box::new(|t, v| Ok(t.map(v[0], f64::sin, |x, _| x.cos()))),
        ),
        ("sum_all", vec![r(&[3, 4])], Box::new(|t, v| t.sum(v[0], None))),
        ("sum_axis", vec![r(&[2, 3, 4])], Box::new(|t, v| t.sum(v[0], Some(1)))),
        ("mean_axis", vec![r(&[2, 3, 4])], Box::new(|t, v| t.mean(v[0], Some(2)))),
        ("concat", vec![r(&[2, 3]), r(&[2, 2])], Box::new(|t, v| t.concat(&[v[0], v[1]], 1))),
        ("slice", vec![r(&[4, 5])], Box::new(|t, v| t.slice(v[0], 1, 1, 4))),
        ("reshape", vec![r(&[2, 6])], Box::new(|t, v| t.reshape(v[0], &[3, 4]))),
        ("broadcast_to", vec![r(&[3, 1])], Box::new(|t, v| t.broadcast_to(v[0], &[2, 3, 4]))),
        ("gather", vec![r(&[3, 4, 2])], Box::new(|t, v| t.gather(v[0], 1, &[3, 0, 0, 2]))),
        (
            "lstm_cell_step",
            vec![r(&[2, 3]), r(&[3, 8]), r(&[2, 8]), r(&[8]), r(&[2, 2]), r(&[2, 2])],
            Box::new(|t, v| {
                let w = LstmWeights { wx: v[1], wh: v[2], b: v[3] };
                let s = lstm_cell_step(t, &w, v[0], LstmState { h: v[4], c: v[5] })?;
                t.concat(&[s.h, s.c], 1)
            }),
        ),
        (
            "kl_diag_gaussians",
            vec![r(&[2, 3]), r(&[2, 3]), r(&[2, 3]), r(&[2, 3])],
            Box::new(|t, v| {
                let q = DiagGaussian::new(t, v[0], v[1])?;
                let p = DiagGaussian::new(t, v[2], v[3])?;
                kl_diag_gaussians(t, &q, &p)
            }),
        ),
        (
            "log_prob",
            vec![r(&[2, 3]), r(&[2, 3]), r(&[2, 3])],
            Box::new(|t, v| DiagGaussian::new(t, v[0], v[1])?.log_prob(t, v[2])),
        ),
        (
            "sample_reparam",
            vec![r(&[2, 3]), r(&[2, 3])],
            Box::new(|t, v| {
                let eps = Tensor::new(&[2, 3], vec![0.3, -1.2, 0.8, 0.1, -0.4, 1.9])?;
                DiagGaussian::new(t, v[0], v[1])?.sample_with(t, eps)
            }),
        ),
    ]
}

/// Op-level checks, `trials` random draws per op.
pub fn check_ops(seed: u64, trials: usize) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::default();
    let mut rng = Rng::seed_from_u64(seed);
    for _ in 0..trials {
        for (name, inputs, build) in op_cases(&mut rng) {
            let err = check_graph(&inputs, &mut rng, &*build)?;
            report.record(name, OP_TOLERANCE, err);
        }
    }
    Ok(report)
}

fn small_model(inference: crate::model::InferenceMode, decoder: crate::model::DecoderMode) -> ModelConfig {
    ModelConfig {
        d_input: 5,
        seq_len: 4,
        l_v: 3,
        l_z: 2,
        enc_widths: vec![4, 4],
        trans_widths: vec![3, 3],
        birnn_width: 3,
        inference_mode: inference,
        decoder_mode: decoder,
    }
}

/// Full informed-stage loss (local KL, informed prior, swap terms) on a
/// small model with the noise, the pairing and the stop-gradient targets
/// held fixed. `samples`
/// parameter elements are chosen at random and perturbed one at a time.
pub fn check_end_to_end(config: &ModelConfig, seed: u64, samples: usize) -> Result<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    let params = ModelParams::init(config, &mut rng)?;
    let mut snapshot = params.group(ParamGroup::GlobalEncoder);
    for t in snapshot.values_mut() {
        for v in t.data_mut() {
            *v += 0.1 * rng.normal();
        }
    }
    let batch = 3;
    let x = random_tensor(&mut rng, &[config.seq_len, batch, config.d_input], 0.0, 1.0);
    let spec = LossSpec::informed(snapshot, true);
    let pairing = random_derangement(&mut rng, batch);
    let noise = rng.clone();

    type Eval = (f64, BTreeMap<String, Tensor>, Vec<Tensor>);
    let eval = |tensors: &BTreeMap<String, Tensor>, held: Option<&[Tensor]>| -> Result<Eval> {
        let mut tape = match held {
            Some(h) => Tape::replaying_detached(h.to_vec()),
            None => Tape::new(),
        };
        let vars = ParamVars::bind(&mut tape, tensors, |_| true);
        let net = Network::new(config, &vars);
        let xv = tape.constant(x.clone());
        let out = compute_loss(&mut tape, &net, xv, &spec, &mut noise.clone(), Some(&pairing))?;
        let value = tape.value(out.total).item();
        if held.is_some() {
            return Ok((value, BTreeMap::new(), Vec::new()));
        }
        let g = tape.backward(out.total)?;
        Ok((value, vars.collect_grads(&tape, &g), tape.detached_values()))
    };
    let (_, analytic, held) = eval(&params.tensors, None)?;
    let held = Some(held.as_slice());
    let names: Vec<&String> = params.tensors.keys().collect();
    let mut tensors = params.tensors.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let name = names[rng.below(names.len())];
        let e = rng.below(params.tensors[name].len());
        let x0 = params.tensors[name].data()[e];
        tensors.get_mut(name).expect("name").data_mut()[e] = x0 + STEP;
        let (up, ..) = eval(&tensors, held)?;
        tensors.get_mut(name).expect("name").data_mut()[e] = x0 - STEP;
        let (down, ..) = eval(&tensors, held)?;
        tensors.get_mut(name).expect("name").data_mut()[e] = x0;
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max(relative_error(analytic[name].data()[e], numeric));
    }
    Ok(worst)
}

/// The complete suite: every op over `trials` draws, plus end-to-end checks
/// of the informed-stage loss for each encoder/decoder combination.
pub fn run_suite(seed: u64, trials: usize) -> Result<GradcheckReport> {
    use crate::model::{DecoderMode, InferenceMode};
    let mut report = check_ops(seed, trials)?;
    for (k, (inf, dec)) in [
        (InferenceMode::Factorised, DecoderMode::Factorised),
        (InferenceMode::Full, DecoderMode::Enriched),
    ]
    .into_iter()
    .enumerate()
    {
        let name = if k == 0 { "loss_factorised" } else { "loss_full_enriched" };
        let err = check_end_to_end(&small_model(inf, dec), seed.wrapping_add(k as u64), 25)?;
        report.record(name, END_TO_END_TOLERANCE, err);
    }
    Ok(report)
}
