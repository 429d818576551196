//! Peephole LSTM cell, vanilla RNN baseline and the bidirectional wrapper.
//!
//! The cell follows the Graves formulation with full `n x n` peephole
//! matrices on the input, forget and output gates:
//!
//! ```text
//! i_t = sigmoid(W_i x_t + U_i h_{t-1} + V_i c_{t-1} + b_i)
//! f_t = sigmoid(W_f x_t + U_f h_{t-1} + V_f c_{t-1} + b_f)
//! o_t = sigmoid(W_o x_t + U_o h_{t-1} + V_o c_{t-1} + b_o)
//! c~_t = tanh(W_c x_t + U_c h_{t-1})
//! c_t = f_t * c_{t-1} + i_t * c~_t
//! h_t = o_t * tanh(c_t)
//! ```
//!
//! The candidate has neither a bias nor a peephole term.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::params::{Bound, ParamId, ParamKind, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};

/// Parameters of one gate: input, recurrent, peephole and bias terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateParams {
    pub w: ParamId,
    pub u: ParamId,
    pub v: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmParams {
    pub input_size: usize,
    pub hidden_size: usize,
    pub input_gate: GateParams,
    pub forget_gate: GateParams,
    pub output_gate: GateParams,
    pub w_c: ParamId,
    pub u_c: ParamId,
}

impl LstmParams {
    /// Registers a freshly initialized cell under `prefix`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_size: usize,
        hidden_size: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let (d, n) = (input_size, hidden_size);
        let mut gate = |store: &mut ParamStore, g: &str| GateParams {
            w: store.add_random(format!("{prefix}.W_{g}"), ParamKind::Weight, &[n, d], std, rng),
            u: store.add_random(format!("{prefix}.U_{g}"), ParamKind::Weight, &[n, n], std, rng),
            v: store.add_random(format!("{prefix}.V_{g}"), ParamKind::Weight, &[n, n], std, rng),
            b: store.add_random(format!("{prefix}.b_{g}"), ParamKind::Bias, &[n], std, rng),
        };
        let input_gate = gate(store, "i");
        let forget_gate = gate(store, "f");
        let output_gate = gate(store, "o");
        let w_c = store.add_random(format!("{prefix}.W_c"), ParamKind::Weight, &[n, d], std, rng);
        let u_c = store.add_random(format!("{prefix}.U_c"), ParamKind::Weight, &[n, n], std, rng);
        Self {
            input_size,
            hidden_size,
            input_gate,
            forget_gate,
            output_gate,
            w_c,
            u_c,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::with_capacity(14);
        for g in [self.input_gate, self.forget_gate, self.output_gate] {
            ids.extend([g.w, g.u, g.v, g.b]);
        }
        ids.extend([self.w_c, self.u_c]);
        ids
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zero(tape: &mut Tape, hidden_size: usize) -> Self {
        Self {
            h: tape.leaf(Tensor::zeros(&[hidden_size])),
            c: tape.leaf(Tensor::zeros(&[hidden_size])),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gates {
    pub input: Var,
    pub forget: Var,
    pub output: Var,
}

/// One cell update together with its intermediate activations.
#[derive(Debug, Clone, Copy)]
pub struct LstmStep {
    pub state: LstmState,
    pub gates: Gates,
    pub candidate: Var,
}

fn gate(tape: &mut Tape, bound: &Bound, p: &GateParams, x: Var, state: &LstmState) -> Result<Var> {
    let wx = tape.matmul(bound.var(p.w), x)?;
    let uh = tape.matmul(bound.var(p.u), state.h)?;
    let vc = tape.matmul(bound.var(p.v), state.c)?;
    let pre = tape.add_all(&[wx, uh, vc, bound.var(p.b)])?;
    tape.sigmoid(pre)
}

fn check_input(tape: &Tape, params: &LstmParams, x: Var, state: &LstmState) -> Result<()> {
    let mismatch = |lhs: &[usize], want: usize| TensorError::Shape {
        op: "lstm_step",
        lhs: lhs.to_vec(),
        rhs: vec![want],
    };
    if tape.value(x).shape() != [params.input_size] {
        return Err(mismatch(tape.value(x).shape(), params.input_size));
    }
    for v in [state.h, state.c] {
        if tape.value(v).shape() != [params.hidden_size] {
            return Err(mismatch(tape.value(v).shape(), params.hidden_size));
        }
    }
    Ok(())
}

/// Input, forget and output gates with peephole connections.
pub fn lstm_gates(
    tape: &mut Tape,
    bound: &Bound,
    params: &LstmParams,
    x: Var,
    state: &LstmState,
) -> Result<Gates> {
    check_input(tape, params, x, state)?;
    Ok(Gates {
        input: gate(tape, bound, &params.input_gate, x, state)?,
        forget: gate(tape, bound, &params.forget_gate, x, state)?,
        output: gate(tape, bound, &params.output_gate, x, state)?,
    })
}

/// `c_t = f * c_{t-1} + i * candidate`, `h_t = o * tanh(c_t)`.
pub fn apply_cell(tape: &mut Tape, gates: &Gates, candidate: Var, c_prev: Var) -> Result<LstmState> {
    let keep = tape.mul(gates.forget, c_prev)?;
    let write = tape.mul(gates.input, candidate)?;
    let c = tape.add(keep, write)?;
    let squashed = tape.tanh(c)?;
    let h = tape.mul(gates.output, squashed)?;
    Ok(LstmState { h, c })
}

pub fn lstm_step(
    tape: &mut Tape,
    bound: &Bound,
    params: &LstmParams,
    x: Var,
    state: &LstmState,
) -> Result<LstmStep> {
    let gates = lstm_gates(tape, bound, params, x, state)?;
    let wx = tape.matmul(bound.var(params.w_c), x)?;
    let uh = tape.matmul(bound.var(params.u_c), state.h)?;
    let pre = tape.add(wx, uh)?;
    let candidate = tape.tanh(pre)?;
    let state = apply_cell(tape, &gates, candidate, state.c)?;
    Ok(LstmStep {
        state,
        gates,
        candidate,
    })
}

/// Folds [`lstm_step`] over `xs`, starting from zeros unless `initial` is
/// given. Returns the state after every step.
pub fn lstm_forward(
    tape: &mut Tape,
    bound: &Bound,
    params: &LstmParams,
    xs: &[Var],
    initial: Option<LstmState>,
) -> Result<Vec<LstmState>> {
    if xs.is_empty() {
        return Err(TensorError::Invalid("empty input sequence".into()));
    }
    let mut state = match initial {
        Some(s) => s,
        None => LstmState::zero(tape, params.hidden_size),
    };
    let mut states = Vec::with_capacity(xs.len());
    for &x in xs {
        state = lstm_step(tape, bound, params, x, &state)?.state;
        states.push(state);
    }
    Ok(states)
}

/// Bidirectional pass: output `t` is the forward hidden state at `t`
/// concatenated with the backward hidden state at `t`, where the backward
/// cell reads the sequence in reverse starting from zeros.
pub fn bilstm_forward(
    tape: &mut Tape,
    bound: &Bound,
    forward: &LstmParams,
    backward: &LstmParams,
    xs: &[Var],
) -> Result<Vec<Var>> {
    let fwd = lstm_forward(tape, bound, forward, xs, None)?;
    let reversed: Vec<Var> = xs.iter().rev().copied().collect();
    let mut bwd = lstm_forward(tape, bound, backward, &reversed, None)?;
    bwd.reverse();
    fwd.iter()
        .zip(&bwd)
        .map(|(f, b)| tape.concat(&[f.h, b.h]))
        .collect()
}

/// Elman cell `h_t = tanh(W x_t + U h_{t-1} + b)`, kept as a baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RnnParams {
    pub input_size: usize,
    pub hidden_size: usize,
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
}

impl RnnParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_size: usize,
        hidden_size: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let (d, n) = (input_size, hidden_size);
        Self {
            input_size,
            hidden_size,
            w: store.add_random(format!("{prefix}.W"), ParamKind::Weight, &[n, d], std, rng),
            u: store.add_random(format!("{prefix}.U"), ParamKind::Weight, &[n, n], std, rng),
            b: store.add_random(format!("{prefix}.b"), ParamKind::Bias, &[n], std, rng),
        }
    }
}

pub fn rnn_step(tape: &mut Tape, bound: &Bound, params: &RnnParams, x: Var, h_prev: Var) -> Result<Var> {
    let wx = tape.matmul(bound.var(params.w), x)?;
    let uh = tape.matmul(bound.var(params.u), h_prev)?;
    let pre = tape.add_all(&[wx, uh, bound.var(params.b)])?;
    tape.tanh(pre)
}
