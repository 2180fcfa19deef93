use std::collections::BTreeMap;

use super::layers::{birnn, fcn, frames, gau, linear, lstm_cell_step, stack_rows, LstmState, LstmWeights};
use super::{DecoderMode, InferenceMode, ModelConfig};
use crate::distributions::DiagGaussian;
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Rng, Tape, Tensor, Var};

/// Parameters placed on a tape, looked up by name.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Adds every tensor as a leaf; trainable ones receive gradients.
    pub fn bind(
        tape: &mut Tape,
        tensors: &BTreeMap<String, Tensor>,
        trainable: impl Fn(&str) -> bool,
    ) -> Self {
        let vars = tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        ParamVars { vars }
    }

    pub fn constants(tape: &mut Tape, tensors: &BTreeMap<String, Tensor>) -> Self {
        Self::bind(tape, tensors, |_| false)
    }

    /// Uses existing tape variables as parameters.
    pub fn with(mut self, vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        self.vars.extend(vars);
        self
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Gradients of the trainable parameters, keyed by name.
    pub fn collect_grads(&self, tape: &Tape, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter(|(_, v)| tape.requires_grad(**v))
            .map(|(n, v)| (n.clone(), grads.wrt(*v)))
            .collect()
    }
}

/// Every distribution and sample of one pass through the model.
#[derive(Clone, Copy, Debug)]
pub struct ForwardPass {
    /// q(v | x), [B, L_v]
    pub q_v: DiagGaussian,
    pub v: Var,
    /// q(z_t | ·), [T, B, L_z]
    pub q_z: DiagGaussian,
    pub z: Var,
    /// p(z_t | z_<t), [T, B, L_z]; absent when the caller skipped the rollout.
    pub prior_z: Option<DiagGaussian>,
    /// p(x_t | ·) with unit variance, [T, B, D]
    pub recon: DiagGaussian,
}

/// The model's networks evaluated against one set of bound parameters.
#[derive(Clone, Copy)]
pub struct Network<'a> {
    pub config: &'a ModelConfig,
    pub vars: &'a ParamVars,
}

impl<'a> Network<'a> {
    pub fn new(config: &'a ModelConfig, vars: &'a ParamVars) -> Self {
        Network { config, vars }
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<(usize, usize)> {
        let s = tape.shape(x);
        if s.len() != 3 || s[2] != self.config.d_input {
            return Err(Error::dim(
                "model input",
                format!("expected [T, B, {}], got {s:?}", self.config.d_input),
            ));
        }
        Ok((s[0], s[1]))
    }

    /// q(v | x_{1:T}): per-frame FCN, mean over time, Gaussian head.
    pub fn encode_global(&self, tape: &mut Tape, x: Var) -> Result<DiagGaussian> {
        let (t, b) = self.check_input(tape, x)?;
        let rows = tape.reshape(x, &[t * b, self.config.d_input])?;
        let h = fcn(tape, self.vars, "global_enc", self.config.enc_widths.len(), rows)?;
        let width = tape.shape(h)[1];
        let h = tape.reshape(h, &[t, b, width])?;
        let pooled = tape.mean(h, Some(0))?;
        gau(tape, self.vars, "global_enc", pooled)
    }

    /// q(z_{1:T} | ·). The factorised encoder ignores `v`; the full one needs it.
    pub fn encode_local(&self, tape: &mut Tape, x: Var, v: Option<Var>) -> Result<DiagGaussian> {
        let (t, b) = self.check_input(tape, x)?;
        let l_z = self.config.l_z;
        let q = match self.config.inference_mode {
            InferenceMode::Factorised => {
                let rows = tape.reshape(x, &[t * b, self.config.d_input])?;
                let h = fcn(tape, self.vars, "local_enc", self.config.enc_widths.len(), rows)?;
                gau(tape, self.vars, "local_enc", h)?
            }
            InferenceMode::Full => {
                let v = v.ok_or_else(|| {
                    Error::contract("full inference needs the global latent v")
                })?;
                if tape.shape(v) != [b, self.config.l_v] {
                    return Err(Error::dim(
                        "encode_local",
                        format!("v {:?} for batch {b}, L_v {}", tape.shape(v), self.config.l_v),
                    ));
                }
                let vb = tape.broadcast_to(v, &[t, b, self.config.l_v])?;
                let joined = tape.concat(&[x, vb], 2)?;
                let steps = frames(tape, joined)?;
                let hs = birnn(tape, self.vars, "local_enc.birnn", &steps)?;
                let h = stack_rows(tape, &hs)?;
                gau(tape, self.vars, "local_enc", h)?
            }
        };
        let mean = tape.reshape(q.mean, &[t, b, l_z])?;
        let logvar = tape.reshape(q.logvar, &[t, b, l_z])?;
        DiagGaussian::new(tape, mean, logvar)
    }

    /// p(z_t | z_<t) with teacher forcing on `z`; p(z_1) = N(0, I).
    pub fn transition_prior(&self, tape: &mut Tape, z: Var) -> Result<DiagGaussian> {
        let s = tape.shape(z).to_vec();
        if s.len() != 3 || s[2] != self.config.l_z {
            return Err(Error::dim(
                "transition_prior",
                format!("expected [T, B, {}], got {s:?}", self.config.l_z),
            ));
        }
        let (t, b, l_z) = (s[0], s[1], s[2]);
        let first = DiagGaussian::standard(tape, &[1, b, l_z]);
        if t == 1 {
            return Ok(first);
        }
        let inputs = frames(tape, z)?;
        let layers = self
            .config
            .trans_widths
            .iter()
            .enumerate()
            .map(|(i, _)| LstmWeights::bind(self.vars, &format!("transition.lstm{i}")))
            .collect::<Result<Vec<_>>>()?;
        let mut states: Vec<LstmState> = layers
            .iter()
            .map(|w| {
                let hidden = w.hidden(tape);
                LstmState::zeros(tape, b, hidden)
            })
            .collect();
        let mut tops = Vec::with_capacity(t - 1);
        for input in &inputs[..t - 1] {
            let mut h = *input;
            for (w, state) in layers.iter().zip(states.iter_mut()) {
                *state = lstm_cell_step(tape, w, h, *state)?;
                h = state.h;
            }
            tops.push(h);
        }
        let h = stack_rows(tape, &tops)?;
        let rest = gau(tape, self.vars, "transition", h)?;
        let rest_mean = tape.reshape(rest.mean, &[t - 1, b, l_z])?;
        let rest_lv = tape.reshape(rest.logvar, &[t - 1, b, l_z])?;
        let mean = tape.concat(&[first.mean, rest_mean], 0)?;
        let logvar = tape.concat(&[first.logvar, rest_lv], 0)?;
        DiagGaussian::new(tape, mean, logvar)
    }

    /// p(x_t | ·) with unit variance.
    pub fn decode(&self, tape: &mut Tape, z: Var, v: Var) -> Result<DiagGaussian> {
        let zs = tape.shape(z).to_vec();
        if zs.len() != 3 || zs[2] != self.config.l_z {
            return Err(Error::dim(
                "decode",
                format!("z {zs:?} for L_z {}", self.config.l_z),
            ));
        }
        let (t, b) = (zs[0], zs[1]);
        if tape.shape(v) != [b, self.config.l_v] {
            return Err(Error::dim(
                "decode",
                format!("v {:?} for batch {b}, L_v {}", tape.shape(v), self.config.l_v),
            ));
        }
        let vb = tape.broadcast_to(v, &[t, b, self.config.l_v])?;
        let vb = tape.reshape(vb, &[t * b, self.config.l_v])?;
        let local = match self.config.decoder_mode {
            DecoderMode::Factorised => tape.reshape(z, &[t * b, self.config.l_z])?,
            DecoderMode::Enriched => {
                let steps = frames(tape, z)?;
                let ctx = birnn(tape, self.vars, "decoder.context", &steps)?;
                stack_rows(tape, &ctx)?
            }
        };
        let joined = tape.concat(&[local, vb], 1)?;
        let h = fcn(tape, self.vars, "decoder", self.config.enc_widths.len(), joined)?;
        let mean = linear(tape, self.vars, "decoder.mean", h)?;
        let mean = tape.reshape(mean, &[t, b, self.config.d_input])?;
        let logvar = tape.constant(Tensor::zeros(&[t, b, self.config.d_input]));
        DiagGaussian::new(tape, mean, logvar)
    }

    /// encode_global → sample v → encode_local → sample z → prior → decode.
    pub fn forward(&self, tape: &mut Tape, x: Var, rng: &mut Rng) -> Result<ForwardPass> {
        self.forward_with(tape, x, rng, true)
    }

    /// [`Network::forward`], optionally skipping the transition rollout.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        x: Var,
        rng: &mut Rng,
        with_prior: bool,
    ) -> Result<ForwardPass> {
        let q_v = self.encode_global(tape, x)?;
        let v = q_v.sample(tape, rng)?;
        let q_z = self.encode_local(tape, x, Some(v))?;
        let z = q_z.sample(tape, rng)?;
        let prior_z = if with_prior {
            Some(self.transition_prior(tape, z)?)
        } else {
            None
        };
        let recon = self.decode(tape, z, v)?;
        Ok(ForwardPass {
            q_v,
            v,
            q_z,
            z,
            prior_z,
            recon,
        })
    }
}
