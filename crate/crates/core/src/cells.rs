//! Building blocks of a layer: the convolutional LSTM generative core, the
//! leaky time-scale blend and the action-driven gate.
//!
//! Parameter containers are generic over their leaf type so the same shape
//! describes stored weights (`Grid`) and weights bound to a tape (`Var`).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Grid, NumericsError, Tape, Var};

/// Width of the gate MLP's tanh hidden layer.
pub const GATE_HIDDEN: usize = 16;

/// Source of initial parameter values.
pub enum Initializer<'a> {
    Zeros,
    /// Uniform in `[-s, s]` with `s = sqrt(1 / fan_in)`.
    Uniform(&'a mut ChaCha8Rng),
}

impl Initializer<'_> {
    pub fn tensor(&mut self, shape: &[usize], fan_in: usize) -> Grid {
        match self {
            Initializer::Zeros => Grid::zeros(shape),
            Initializer::Uniform(rng) => {
                let s = (1.0 / fan_in as f64).sqrt();
                Grid::from_fn(shape, |_| rng.random_range(-s..=s))
            }
        }
    }
}

/// Kernel and bias of one square convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub kernel: T,
    pub bias: T,
}

impl Conv<Grid> {
    pub fn new(out: usize, inp: usize, k: usize, init: &mut Initializer) -> Self {
        Conv {
            kernel: init.tensor(&[out, inp, k, k], inp * k * k),
            bias: init.tensor(&[out], inp * k * k),
        }
    }
}

impl<T> Conv<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> Conv<U> {
        Conv {
            kernel: f(&format!("{prefix}.kernel"), &self.kernel),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}.kernel"), &mut self.kernel);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

impl Conv<Var> {
    pub fn apply(&self, tape: &mut Tape, input: Var, padding: usize) -> Result<Var, NumericsError> {
        tape.conv2d(input, self.kernel, self.bias, padding)
    }

    /// "Same" padding for the odd square kernel bound to this conv.
    pub fn kernel_padding(&self, tape: &Tape) -> usize {
        tape.value(self.kernel).shape()[2] / 2
    }
}

/// Weight matrix (out×in) and bias of a dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weight: T,
    pub bias: T,
}

impl Dense<Grid> {
    pub fn new(out: usize, inp: usize, init: &mut Initializer) -> Self {
        Dense {
            weight: init.tensor(&[out, inp], inp),
            bias: init.tensor(&[out], inp),
        }
    }
}

impl<T> Dense<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> Dense<U> {
        Dense {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Per-gate convolutions of a ConvLSTM. Each gate reads the channel
/// concatenation of the step input and the recurrent hidden grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmParams<T> {
    pub input_gate: Conv<T>,
    pub forget_gate: Conv<T>,
    pub output_gate: Conv<T>,
    pub candidate: Conv<T>,
}

impl ConvLstmParams<Grid> {
    pub fn new(
        input_channels: usize,
        hidden_channels: usize,
        kernel: usize,
        init: &mut Initializer,
    ) -> Self {
        let cin = input_channels + hidden_channels;
        ConvLstmParams {
            input_gate: Conv::new(hidden_channels, cin, kernel, init),
            forget_gate: Conv::new(hidden_channels, cin, kernel, init),
            output_gate: Conv::new(hidden_channels, cin, kernel, init),
            candidate: Conv::new(hidden_channels, cin, kernel, init),
        }
    }
}

impl<T> ConvLstmParams<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> ConvLstmParams<U> {
        ConvLstmParams {
            input_gate: self.input_gate.map(&format!("{prefix}.gate_i"), f),
            forget_gate: self.forget_gate.map(&format!("{prefix}.gate_f"), f),
            output_gate: self.output_gate.map(&format!("{prefix}.gate_o"), f),
            candidate: self.candidate.map(&format!("{prefix}.gate_g"), f),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        self.input_gate.for_each_mut(&format!("{prefix}.gate_i"), f);
        self.forget_gate.for_each_mut(&format!("{prefix}.gate_f"), f);
        self.output_gate.for_each_mut(&format!("{prefix}.gate_o"), f);
        self.candidate.for_each_mut(&format!("{prefix}.gate_g"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmState<T> {
    pub hidden: T,
    pub cell: T,
}

impl ConvLstmState<Grid> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ConvLstmState {
            hidden: Grid::zeros(&[channels, height, width]),
            cell: Grid::zeros(&[channels, height, width]),
        }
    }
}

/// One ConvLSTM update:
///
/// ```text
/// x  = input ⊕ hidden
/// i  = σ(conv_i(x))   f = σ(conv_f(x))   o = σ(conv_o(x))   g = tanh(conv_g(x))
/// c' = f ⊙ cell + i ⊙ g
/// h' = o ⊙ tanh(c')
/// ```
///
/// Returns the new state; `h'` is both its hidden grid and the step output.
pub fn convlstm_step(
    tape: &mut Tape,
    params: &ConvLstmParams<Var>,
    state: &ConvLstmState<Var>,
    input: Var,
) -> Result<ConvLstmState<Var>, NumericsError> {
    let x = tape.concat_channels(&[input, state.hidden])?;
    let pad = params.input_gate.kernel_padding(tape);
    let i = params.input_gate.apply(tape, x, pad)?;
    let i = tape.sigmoid(i);
    let f = params.forget_gate.apply(tape, x, pad)?;
    let f = tape.sigmoid(f);
    let o = params.output_gate.apply(tape, x, pad)?;
    let o = tape.sigmoid(o);
    let g = params.candidate.apply(tape, x, pad)?;
    let g = tape.tanh(g);
    let keep = tape.hadamard(f, state.cell)?;
    let write = tape.hadamard(i, g)?;
    let cell = tape.add(keep, write)?;
    let squashed = tape.tanh(cell);
    let hidden = tape.hadamard(o, squashed)?;
    Ok(ConvLstmState { hidden, cell })
}

/// The leaky-integrator state of one generative unit.
#[derive(Clone, Debug, PartialEq)]
pub struct LeakyState {
    pub blended: Grid,
    pub tau: f64,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum CellError {
    #[error("time constant must be finite and at least 1, got {0}")]
    InvalidTau(f64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("gating expects {expected} {what}, got {got}")]
    Arity {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

impl LeakyState {
    pub fn new(blended: Grid, tau: f64) -> Result<Self, CellError> {
        check_tau(tau)?;
        Ok(LeakyState { blended, tau })
    }

    /// `(1 − 1/τ)·blended + (1/τ)·fresh`.
    pub fn update(&self, fresh: &Grid) -> Result<LeakyState, CellError> {
        let (keep, take) = blend_coefficients(self.tau);
        let blended = self
            .blended
            .zip_map(fresh, "leaky_blend", |p, f| keep * p + take * f)?;
        Ok(LeakyState {
            blended,
            tau: self.tau,
        })
    }
}

pub(crate) fn check_tau(tau: f64) -> Result<(), CellError> {
    if tau.is_finite() && tau >= 1.0 {
        Ok(())
    } else {
        Err(CellError::InvalidTau(tau))
    }
}

/// `(1 − 1/τ, 1/τ)`.
pub fn blend_coefficients(tau: f64) -> (f64, f64) {
    let take = 1.0 / tau;
    (1.0 - take, take)
}

/// Tape form of [`LeakyState::update`].
pub fn leaky_blend(tape: &mut Tape, tau: f64, prev: Var, fresh: Var) -> Result<Var, NumericsError> {
    let (keep, take) = blend_coefficients(tau);
    tape.blend(keep, prev, take, fresh)
}

/// How the action gate combines generative units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GatingMode {
    /// Softmax weights over K units; the representation is their weighted sum.
    Mixture,
    /// A single unit scaled per channel by sigmoid gains.
    ChannelGate,
}

/// action → tanh(16) → K softmax weights or r sigmoid gains.
#[derive(Clone, Debug, PartialEq)]
pub struct GateMlpParams<T> {
    pub hidden: Dense<T>,
    pub output: Dense<T>,
}

impl GateMlpParams<Grid> {
    pub fn new(action_dim: usize, outputs: usize, init: &mut Initializer) -> Self {
        GateMlpParams {
            hidden: Dense::new(GATE_HIDDEN, action_dim, init),
            output: Dense::new(outputs, GATE_HIDDEN, init),
        }
    }

    pub fn outputs(&self) -> usize {
        self.output.bias.len()
    }
}

impl<T> GateMlpParams<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut impl FnMut(&str, &'a T) -> U) -> GateMlpParams<U> {
        GateMlpParams {
            hidden: self.hidden.map(&format!("{prefix}.hidden"), f),
            output: self.output.map(&format!("{prefix}.output"), f),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        self.hidden.for_each_mut(&format!("{prefix}.hidden"), f);
        self.output.for_each_mut(&format!("{prefix}.output"), f);
    }
}

pub fn gate_weights(
    tape: &mut Tape,
    params: &GateMlpParams<Var>,
    action: Var,
    mode: GatingMode,
) -> Result<Var, NumericsError> {
    let pre = tape.affine(params.hidden.weight, params.hidden.bias, action)?;
    let hidden = tape.tanh(pre);
    let logits = tape.affine(params.output.weight, params.output.bias, hidden)?;
    match mode {
        GatingMode::Mixture => tape.softmax(logits),
        GatingMode::ChannelGate => Ok(tape.sigmoid(logits)),
    }
}

/// Combines generative-unit outputs under the gate weights.
pub fn modulate(
    tape: &mut Tape,
    mode: GatingMode,
    weights: Var,
    units: &[Var],
) -> Result<Var, CellError> {
    match mode {
        GatingMode::Mixture => {
            let k = tape.value(weights).len();
            if k != units.len() {
                return Err(CellError::Arity {
                    what: "units",
                    expected: k,
                    got: units.len(),
                });
            }
            Ok(tape.weighted_sum(weights, units)?)
        }
        GatingMode::ChannelGate => {
            let [unit] = units else {
                return Err(CellError::Arity {
                    what: "units",
                    expected: 1,
                    got: units.len(),
                });
            };
            let channels = tape.value(*unit).shape()[0];
            let gains = tape.value(weights).len();
            if gains != channels {
                return Err(CellError::Arity {
                    what: "channel gains",
                    expected: channels,
                    got: gains,
                });
            }
            Ok(tape.channel_scale(weights, *unit)?)
        }
    }
}
