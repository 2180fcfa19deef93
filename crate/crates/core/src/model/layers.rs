use super::network::ParamVars;
use crate::distributions::DiagGaussian;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub(crate) fn linear(tape: &mut Tape, vars: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let w = vars.get(&format!("{prefix}.w"))?;
    let b = vars.get(&format!("{prefix}.b"))?;
    tape.linear(x, w, b)
}

/// Stack of tanh layers `{prefix}.fc0`, `{prefix}.fc1`, ... over rows of `x`.
pub(crate) fn fcn(
    tape: &mut Tape,
    vars: &ParamVars,
    prefix: &str,
    layers: usize,
    mut x: Var,
) -> Result<Var> {
    for i in 0..layers {
        let h = linear(tape, vars, &format!("{prefix}.fc{i}"), x)?;
        x = tape.tanh(h);
    }
    Ok(x)
}

/// Gaussian head: two linear maps to mean and log-variance.
pub(crate) fn gau(tape: &mut Tape, vars: &ParamVars, prefix: &str, h: Var) -> Result<DiagGaussian> {
    let mean = linear(tape, vars, &format!("{prefix}.mean"), h)?;
    let logvar = linear(tape, vars, &format!("{prefix}.logvar"), h)?;
    DiagGaussian::new(tape, mean, logvar)
}

#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    /// [in, 4H], gates ordered input, forget, cell, output.
    pub wx: Var,
    /// [H, 4H]
    pub wh: Var,
    /// [4H]
    pub b: Var,
}

impl LstmWeights {
    pub fn bind(vars: &ParamVars, prefix: &str) -> Result<Self> {
        Ok(LstmWeights {
            wx: vars.get(&format!("{prefix}.wx"))?,
            wh: vars.get(&format!("{prefix}.wh"))?,
            b: vars.get(&format!("{prefix}.b"))?,
        })
    }

    pub fn hidden(&self, tape: &Tape) -> usize {
        tape.shape(self.wh)[0]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(tape: &mut Tape, batch: usize, hidden: usize) -> Self {
        LstmState {
            h: tape.constant(Tensor::zeros(&[batch, hidden])),
            c: tape.constant(Tensor::zeros(&[batch, hidden])),
        }
    }
}

/// One LSTM step on `x` [B, in]; returns the new state, whose `h` is the output.
pub fn lstm_cell_step(
    tape: &mut Tape,
    w: &LstmWeights,
    x: Var,
    state: LstmState,
) -> Result<LstmState> {
    let hidden = w.hidden(tape);
    let in_width = tape.shape(w.wx)[0];
    let xs = tape.shape(x);
    if xs.len() != 2 || xs[1] != in_width {
        return Err(Error::dim(
            "lstm_cell_step",
            format!("input {xs:?} for input width {in_width}"),
        ));
    }
    let sh = tape.shape(state.h);
    if sh != [xs[0], hidden] || tape.shape(state.c) != sh {
        return Err(Error::dim(
            "lstm_cell_step",
            format!("state {sh:?} for batch {} and width {hidden}", xs[0]),
        ));
    }
    let from_x = tape.linear(x, w.wx, w.b)?;
    let from_h = tape.matmul(state.h, w.wh)?;
    let gates = tape.add(from_x, from_h)?;
    let i = tape.slice(gates, 1, 0, hidden)?;
    let f = tape.slice(gates, 1, hidden, 2 * hidden)?;
    let g = tape.slice(gates, 1, 2 * hidden, 3 * hidden)?;
    let o = tape.slice(gates, 1, 3 * hidden, 4 * hidden)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, state.c)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok(LstmState { h, c })
}

/// Runs one LSTM over `inputs` (each [B, in]) and returns every hidden state.
pub(crate) fn lstm_sequence(
    tape: &mut Tape,
    w: &LstmWeights,
    inputs: &[Var],
    reverse: bool,
) -> Result<Vec<Var>> {
    let batch = tape.shape(inputs[0])[0];
    let mut state = LstmState::zeros(tape, batch, w.hidden(tape));
    let mut out = vec![state.h; inputs.len()];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..inputs.len()).rev())
    } else {
        Box::new(0..inputs.len())
    };
    for t in order {
        state = lstm_cell_step(tape, w, inputs[t], state)?;
        out[t] = state.h;
    }
    Ok(out)
}

/// Bidirectional LSTM; the two directions' states are averaged per frame.
pub(crate) fn birnn(
    tape: &mut Tape,
    vars: &ParamVars,
    prefix: &str,
    inputs: &[Var],
) -> Result<Vec<Var>> {
    let fwd = LstmWeights::bind(vars, &format!("{prefix}.fwd"))?;
    let bwd = LstmWeights::bind(vars, &format!("{prefix}.bwd"))?;
    let hf = lstm_sequence(tape, &fwd, inputs, false)?;
    let hb = lstm_sequence(tape, &bwd, inputs, true)?;
    hf.into_iter()
        .zip(hb)
        .map(|(a, b)| {
            let s = tape.add(a, b)?;
            Ok(tape.scale(s, 0.5))
        })
        .collect()
}

/// Splits a time-major [T, B, F] tensor into T frames of [B, F].
pub(crate) fn frames(tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
    let shape = tape.shape(x).to_vec();
    let (t, b, f) = (shape[0], shape[1], shape[2]);
    (0..t)
        .map(|i| {
            let s = tape.slice(x, 0, i, i + 1)?;
            tape.reshape(s, &[b, f])
        })
        .collect()
}

/// Inverse of [`frames`]: T blocks of [B, F] into [T·B, F].
pub(crate) fn stack_rows(tape: &mut Tape, blocks: &[Var]) -> Result<Var> {
    tape.concat(blocks, 0)
}
