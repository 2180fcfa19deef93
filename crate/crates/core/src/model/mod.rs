//! DSAE networks: global encoder, local encoder, transition prior, decoder.
//!
//! All sequence tensors are time-major: a batch of `B` sequences with `T`
//! frames of width `F` is stored as `[T, B, F]`, so one frame of the whole
//! batch is a contiguous `[B, F]` block.

mod layers;
mod network;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use layers::{lstm_cell_step, LstmState, LstmWeights};
pub use network::{ForwardPass, Network, ParamVars};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// q(z_t | x_t), one FCN shared across frames, independent of v.
    Factorised,
    /// q(z_t | x_{1:T}, v) through a bidirectional LSTM.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderMode {
    /// p(x_t | z_t, v).
    Factorised,
    /// p(x_t | z_{1:T}, v) with a bidirectional LSTM context over z.
    Enriched,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Frequency bins per frame.
    pub d_input: usize,
    pub seq_len: usize,
    pub l_v: usize,
    pub l_z: usize,
    /// Hidden widths of every FCN (encoders and decoder).
    pub enc_widths: Vec<usize>,
    pub trans_widths: Vec<usize>,
    /// Per-direction width of the bidirectional LSTMs.
    pub birnn_width: usize,
    pub inference_mode: InferenceMode,
    pub decoder_mode: DecoderMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_input: 32,
            seq_len: 24,
            l_v: 16,
            l_z: 16,
            enc_widths: vec![64, 64],
            trans_widths: vec![32, 32],
            birnn_width: 64,
            inference_mode: InferenceMode::Factorised,
            decoder_mode: DecoderMode::Factorised,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let scalars = [
            ("d_input", self.d_input),
            ("seq_len", self.seq_len),
            ("l_v", self.l_v),
            ("l_z", self.l_z),
            ("birnn_width", self.birnn_width),
        ];
        for (field, v) in scalars {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        for (field, widths) in [("enc_widths", &self.enc_widths), ("trans_widths", &self.trans_widths)] {
            if widths.is_empty() || widths.contains(&0) {
                return Err(Error::config(field, "needs one or more positive widths"));
            }
        }
        Ok(())
    }

    /// Every parameter name with its shape; a pure function of the config.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let last_enc = *self.enc_widths.last().expect("validated");

        fcn_shapes(&mut out, "global_enc", self.d_input, &self.enc_widths);
        gau_shapes(&mut out, "global_enc", last_enc, self.l_v);

        match self.inference_mode {
            InferenceMode::Factorised => {
                fcn_shapes(&mut out, "local_enc", self.d_input, &self.enc_widths);
                gau_shapes(&mut out, "local_enc", last_enc, self.l_z);
            }
            InferenceMode::Full => {
                let input = self.d_input + self.l_v;
                lstm_shapes(&mut out, "local_enc.birnn.fwd", input, self.birnn_width);
                lstm_shapes(&mut out, "local_enc.birnn.bwd", input, self.birnn_width);
                gau_shapes(&mut out, "local_enc", self.birnn_width, self.l_z);
            }
        }

        let mut input = self.l_z;
        for (i, &w) in self.trans_widths.iter().enumerate() {
            lstm_shapes(&mut out, &format!("transition.lstm{i}"), input, w);
            input = w;
        }
        gau_shapes(&mut out, "transition", input, self.l_z);

        let dec_input = match self.decoder_mode {
            DecoderMode::Factorised => self.l_z + self.l_v,
            DecoderMode::Enriched => {
                lstm_shapes(&mut out, "decoder.context.fwd", self.l_z, self.birnn_width);
                lstm_shapes(&mut out, "decoder.context.bwd", self.l_z, self.birnn_width);
                self.birnn_width + self.l_v
            }
        };
        fcn_shapes(&mut out, "decoder", dec_input, &self.enc_widths);
        linear_shapes(&mut out, "decoder.mean", last_enc, self.d_input);

        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

fn linear_shapes(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, input: usize, output: usize) {
    out.push((format!("{prefix}.w"), vec![input, output]));
    out.push((format!("{prefix}.b"), vec![output]));
}

fn fcn_shapes(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, input: usize, widths: &[usize]) {
    let mut fan_in = input;
    for (i, &w) in widths.iter().enumerate() {
        linear_shapes(out, &format!("{prefix}.fc{i}"), fan_in, w);
        fan_in = w;
    }
}

fn gau_shapes(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, input: usize, latent: usize) {
    linear_shapes(out, &format!("{prefix}.mean"), input, latent);
    linear_shapes(out, &format!("{prefix}.logvar"), input, latent);
}

fn lstm_shapes(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, input: usize, hidden: usize) {
    out.push((format!("{prefix}.wx"), vec![input, 4 * hidden]));
    out.push((format!("{prefix}.wh"), vec![hidden, 4 * hidden]));
    out.push((format!("{prefix}.b"), vec![4 * hidden]));
}

/// Parameter groups that training can freeze independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    GlobalEncoder,
    LocalEncoder,
    Transition,
    /// The enriched decoder's recurrent context over z_{1:T}.
    DecoderContext,
    Decoder,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        let mut parts = name.split('.');
        match parts.next() {
            Some("global_enc") => ParamGroup::GlobalEncoder,
            Some("local_enc") => ParamGroup::LocalEncoder,
            Some("transition") => ParamGroup::Transition,
            Some("decoder") if parts.next() == Some("context") => ParamGroup::DecoderContext,
            Some("decoder") => ParamGroup::Decoder,
            _ => panic!("parameter `{name}` belongs to no group"),
        }
    }
}

/// All generative (θ) and inference (φ) parameters of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Glorot-uniform matrices, zero biases, LSTM forget-gate bias 1.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let t = if shape.len() == 2 {
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let mut t = Tensor::zeros(&shape);
                for v in t.data_mut() {
                    *v = (2.0 * rng.uniform() - 1.0) * limit;
                }
                t
            } else if name.contains(".lstm") || name.contains(".fwd.") || name.contains(".bwd.") {
                // Gate order is [input, forget, cell, output].
                let hidden = shape[0] / 4;
                let mut t = Tensor::zeros(&shape);
                t.data_mut()[hidden..2 * hidden].fill(1.0);
                t
            } else {
                Tensor::zeros(&shape)
            };
            tensors.insert(name, t);
        }
        Ok(ModelParams {
            config: config.clone(),
            tensors,
        })
    }

    pub fn group(&self, group: ParamGroup) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter(|(n, _)| ParamGroup::of(n) == group)
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect()
    }

    /// Checks names and shapes against the config.
    pub fn validate(&self) -> Result<()> {
        let expected = self.config.param_shapes();
        if expected.len() != self.tensors.len() {
            return Err(Error::contract(format!(
                "expected {} parameters, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in expected {
            match self.tensors.get(&name) {
                None => return Err(Error::contract(format!("missing parameter `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::contract(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(t) if !t.is_finite() => {
                    return Err(Error::Numerical(format!("parameter `{name}` is not finite")))
                }
                _ => {}
            }
        }
        Ok(())
    }
}
