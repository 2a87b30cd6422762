//! The layered predictive-coding network and its per-timestep schedule.
//!
//! One step runs in three phases:
//!
//! 1. **Representation**, top layer first. Each generative unit of layer `l`
//!    runs a ConvLSTM on the layer's previous error, the upsampled and
//!    convolved representation of layer `l + 1` (already updated this step)
//!    and the layer's previous representation. The unit output is blended
//!    into the unit's leaky state with the layer's time constant, and the
//!    action gate combines the units into the representation `R_l`.
//! 2. **Prediction**: `X̂_l = f(conv(R_l))`, with `f` a relu that is also
//!    clamped to 1 on the pixel layer.
//! 3. **Target and error**, bottom layer first: `X_0` is the frame,
//!    `X_l = maxpool(relu(conv(E_{l-1})))`, and
//!    `E_l = [relu(X_l − X̂_l); relu(X̂_l − X_l)]`.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cells::{
    check_tau, convlstm_step, gate_weights, leaky_blend, modulate, CellError, Conv, ConvLstmParams,
    ConvLstmState, GateMlpParams, GatingMode, Initializer,
};
use crate::numerics::{self, Grid, NumericsError, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    /// The architecture is valid on its own but cannot process frames of the
    /// configured input shape.
    #[error("network does not fit the input: {0}")]
    InputMismatch(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("non-finite {quantity} in layer {layer}")]
    NonFinite { layer: usize, quantity: &'static str },
    #[error("{what} index {index} out of range (have {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Cell(#[from] CellError),
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Frame shape as channels, height, width.
    pub input_shape: [usize; 3],
    pub action_dim: usize,
    /// Time constant per layer; its length fixes the layer count.
    pub taus: Vec<f64>,
    /// Target channels `c_l`.
    pub target_channels: Vec<usize>,
    /// Representation channels `r_l`.
    pub repr_channels: Vec<usize>,
    /// Generative units per layer.
    pub units: usize,
    pub gating: GatingMode,
    pub kernel: usize,
    pub padding: usize,
    pub pool: usize,
    /// Per-layer weights of the error terms in the loss.
    pub loss_weights: Vec<f64>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_shape: [1, 8, 12],
            action_dim: 2,
            taus: vec![1.0, 1.3, 2.0],
            target_channels: vec![1, 8, 16],
            repr_channels: vec![8, 16, 32],
            units: 2,
            gating: GatingMode::Mixture,
            kernel: 3,
            padding: 1,
            pool: 2,
            loss_weights: vec![1.0, 0.1, 0.1],
        }
    }
}

impl NetworkConfig {
    pub fn layers(&self) -> usize {
        self.taus.len()
    }

    /// Spatial extent `(H / 2^l, W / 2^l)` of layer `l`.
    pub fn extent(&self, layer: usize) -> (usize, usize) {
        (self.input_shape[1] >> layer, self.input_shape[2] >> layer)
    }

    /// Input channels of layer `l`'s ConvLSTM, excluding the recurrent part.
    pub fn lstm_input_channels(&self, layer: usize) -> usize {
        let top_down = if layer + 1 < self.layers() {
            self.repr_channels[layer + 1]
        } else {
            0
        };
        2 * self.target_channels[layer] + top_down
    }

    /// Checks every hard invariant. Returns soft warnings (such as a time
    /// constant that shrinks going up) separately.
    pub fn validate(&self) -> Result<Vec<String>, NetworkError> {
        let n = self.layers();
        let bad = |m: String| Err(NetworkError::Config(m));
        if n == 0 {
            return bad("at least one layer is required".into());
        }
        for (name, len) in [
            ("target channels", self.target_channels.len()),
            ("representation channels", self.repr_channels.len()),
            ("loss weights", self.loss_weights.len()),
        ] {
            if len != n {
                return bad(format!("{len} {name} for {n} layers"));
            }
        }
        if self.input_shape.contains(&0) || self.action_dim == 0 {
            return bad("input shape and action dimension must be positive".into());
        }
        if self.target_channels.contains(&0) || self.repr_channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.units == 0 {
            return bad("at least one generative unit per layer is required".into());
        }
        if self.gating == GatingMode::ChannelGate && self.units != 1 {
            return bad(format!(
                "channel gating drives a single generative unit, got {}",
                self.units
            ));
        }
        if self.kernel.is_multiple_of(2) || self.padding != self.kernel / 2 {
            return bad(format!(
                "kernel {} with padding {} does not preserve extents",
                self.kernel, self.padding
            ));
        }
        if self.pool != 2 {
            return bad(format!("only 2×2 pooling is supported, got {}", self.pool));
        }
        for &tau in &self.taus {
            check_tau(tau).map_err(|e| NetworkError::Config(e.to_string()))?;
        }
        if self.loss_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("loss weights must be finite and nonnegative".into());
        }
        let mismatch = |m: String| Err(NetworkError::InputMismatch(m));
        if self.target_channels[0] != self.input_shape[0] {
            return mismatch(format!(
                "layer 0 target channels {} must equal frame channels {}",
                self.target_channels[0], self.input_shape[0]
            ));
        }
        let [_, h, w] = self.input_shape;
        let scale = 1usize << (n - 1);
        if h % scale != 0 || w % scale != 0 {
            return mismatch(format!(
                "a {h}×{w} frame cannot be halved {} times into integral extents",
                n - 1
            ));
        }
        let mut warnings = Vec::new();
        for l in 1..n {
            if self.taus[l] < self.taus[l - 1] {
                warnings.push(format!(
                    "time constant decreases from layer {} ({}) to layer {l} ({})",
                    l - 1,
                    self.taus[l - 1],
                    self.taus[l]
                ));
            }
        }
        Ok(warnings)
    }
}

/// Weights of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    /// One ConvLSTM per generative unit.
    pub units: Vec<ConvLstmParams<T>>,
    /// `r_l → c_l`, producing the prediction.
    pub predict: Conv<T>,
    /// `2·c_{l-1} → c_l`, producing the target from the error below (l ≥ 1).
    pub feedforward: Option<Conv<T>>,
    /// `r_{l+1} → r_{l+1}`, applied after upsampling the layer above (l < L).
    pub topdown: Option<Conv<T>>,
    pub gate: GateMlpParams<T>,
}

/// Every learnable tensor of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T = Grid> {
    pub layers: Vec<LayerParams<T>>,
}

impl NetworkParams<Grid> {
    pub fn new(config: &NetworkConfig, init: &mut Initializer) -> Result<Self, NetworkError> {
        config.validate()?;
        let n = config.layers();
        let k = config.kernel;
        let layers = (0..n)
            .map(|l| {
                let r = config.repr_channels[l];
                let c = config.target_channels[l];
                let units = (0..config.units)
                    .map(|_| ConvLstmParams::new(config.lstm_input_channels(l), r, k, init))
                    .collect();
                let predict = Conv::new(c, r, k, init);
                let feedforward =
                    (l > 0).then(|| Conv::new(c, 2 * config.target_channels[l - 1], k, init));
                let topdown = (l + 1 < n).then(|| {
                    let above = config.repr_channels[l + 1];
                    Conv::new(above, above, k, init)
                });
                let gate_outputs = match config.gating {
                    GatingMode::Mixture => config.units,
                    GatingMode::ChannelGate => r,
                };
                let gate = GateMlpParams::new(config.action_dim, gate_outputs, init);
                LayerParams {
                    units,
                    predict,
                    feedforward,
                    topdown,
                    gate,
                }
            })
            .collect();
        Ok(NetworkParams { layers })
    }

    pub fn zeros(config: &NetworkConfig) -> Result<Self, NetworkError> {
        Self::new(config, &mut Initializer::Zeros)
    }

    /// Seeded uniform initialization.
    pub fn seeded(config: &NetworkConfig, seed: u64) -> Result<Self, NetworkError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(config, &mut Initializer::Uniform(&mut rng))
    }

    pub fn named(&self) -> Vec<(String, &Grid)> {
        let mut out = Vec::new();
        self.map(&mut |name, g| out.push((name.to_string(), g)));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, g)| g.len()).sum()
    }

    /// Registers every tensor on `tape` as a trainable parameter.
    pub fn bind(&self, tape: &mut Tape) -> NetworkParams<Var> {
        self.map(&mut |_, g| tape.parameter(g.clone()))
    }

    /// Registers every tensor on `tape` as a constant.
    pub fn bind_constant(&self, tape: &mut Tape) -> NetworkParams<Var> {
        self.map(&mut |_, g| tape.constant(g.clone()))
    }
}

impl<T> NetworkParams<T> {
    /// Visits every tensor with its dotted name, e.g. `layer0.gu1.gate_f.kernel`.
    pub fn map<'a, U>(&'a self, f: &mut impl FnMut(&str, &'a T) -> U) -> NetworkParams<U> {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, lp)| {
                let p = format!("layer{l}");
                LayerParams {
                    units: lp
                        .units
                        .iter()
                        .enumerate()
                        .map(|(k, u)| u.map(&format!("{p}.gu{k}"), f))
                        .collect(),
                    predict: lp.predict.map(&format!("{p}.predict"), f),
                    feedforward: lp.feedforward.as_ref().map(|c| c.map(&format!("{p}.feedforward"), f)),
                    topdown: lp.topdown.as_ref().map(|c| c.map(&format!("{p}.topdown"), f)),
                    gate: lp.gate.map(&format!("{p}.gate"), f),
                }
            })
            .collect();
        NetworkParams { layers }
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&str, &mut T)) {
        for (l, lp) in self.layers.iter_mut().enumerate() {
            let p = format!("layer{l}");
            for (k, u) in lp.units.iter_mut().enumerate() {
                u.for_each_mut(&format!("{p}.gu{k}"), f);
            }
            lp.predict.for_each_mut(&format!("{p}.predict"), f);
            if let Some(c) = lp.feedforward.as_mut() {
                c.for_each_mut(&format!("{p}.feedforward"), f);
            }
            if let Some(c) = lp.topdown.as_mut() {
                c.for_each_mut(&format!("{p}.topdown"), f);
            }
            lp.gate.for_each_mut(&format!("{p}.gate"), f);
        }
    }
}

/// State of one generative unit: its ConvLSTM memory and its leaky blend
/// `R_l^{d,k}`. `lstm.hidden` holds the unit's latest raw output.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitState<T> {
    pub lstm: ConvLstmState<T>,
    pub blended: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerState<T> {
    pub units: Vec<UnitState<T>>,
    /// Gated representation `R_l`.
    pub representation: T,
    /// Error `E_l` with `2·c_l` channels.
    pub error: T,
    pub prediction: T,
    pub target: T,
}

/// Recurrent state of the whole network between timesteps.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState<T = Grid> {
    pub layers: Vec<LayerState<T>>,
}

impl NetworkState<Grid> {
    pub fn zeros(config: &NetworkConfig) -> Self {
        let layers = (0..config.layers())
            .map(|l| {
                let (h, w) = config.extent(l);
                let r = config.repr_channels[l];
                let c = config.target_channels[l];
                LayerState {
                    units: (0..config.units)
                        .map(|_| UnitState {
                            lstm: ConvLstmState::zeros(r, h, w),
                            blended: Grid::zeros(&[r, h, w]),
                        })
                        .collect(),
                    representation: Grid::zeros(&[r, h, w]),
                    error: Grid::zeros(&[2 * c, h, w]),
                    prediction: Grid::zeros(&[c, h, w]),
                    target: Grid::zeros(&[c, h, w]),
                }
            })
            .collect();
        NetworkState { layers }
    }

    pub fn bind(&self, tape: &mut Tape) -> NetworkState<Var> {
        self.map(&mut |g| tape.constant(g.clone()))
    }
}

impl NetworkState<Var> {
    pub fn values(&self, tape: &Tape) -> NetworkState<Grid> {
        self.map(&mut |v| tape.value(*v).clone())
    }
}

impl<T> NetworkState<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> NetworkState<U> {
        NetworkState {
            layers: self
                .layers
                .iter()
                .map(|ls| LayerState {
                    units: ls
                        .units
                        .iter()
                        .map(|u| UnitState {
                            lstm: ConvLstmState {
                                hidden: f(&u.lstm.hidden),
                                cell: f(&u.lstm.cell),
                            },
                            blended: f(&u.blended),
                        })
                        .collect(),
                    representation: f(&ls.representation),
                    error: f(&ls.error),
                    prediction: f(&ls.prediction),
                    target: f(&ls.target),
                })
                .collect(),
        }
    }
}

/// Snapshot of one layer after a step.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub representation: Grid,
    /// `R_l^{d,k}` per generative unit.
    pub blended: Vec<Grid>,
    /// Raw ConvLSTM output per generative unit.
    pub unit_outputs: Vec<Grid>,
    pub prediction: Grid,
    pub target: Grid,
    pub error: Grid,
    pub gate: Grid,
    pub error_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub layers: Vec<LayerTrace>,
}

/// Where layer 0's target comes from on a step.
#[derive(Clone, Copy, Debug)]
pub enum FrameSource {
    Recorded(Var),
    /// The network's own pixel prediction for this step, taken as a
    /// constant (closed-loop generation).
    OwnPrediction,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOptions {
    /// When false, unit outputs bypass the leaky blend entirely.
    pub leaky_blend: bool,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions { leaky_blend: true }
    }
}

/// Records one network step on `tape`.
///
/// Returns the new state and the per-layer gate outputs.
pub fn step_on_tape(
    tape: &mut Tape,
    config: &NetworkConfig,
    params: &NetworkParams<Var>,
    prev: &NetworkState<Var>,
    frame: FrameSource,
    action: Var,
    options: StepOptions,
) -> Result<(NetworkState<Var>, Vec<Var>), NetworkError> {
    let n = config.layers();
    let pad = config.padding;

    let mut units_next: Vec<Vec<UnitState<Var>>> = vec![Vec::new(); n];
    let mut reps: Vec<Option<Var>> = vec![None; n];
    let mut gates: Vec<Option<Var>> = vec![None; n];
    for l in (0..n).rev() {
        let lp = &params.layers[l];
        let ls = &prev.layers[l];
        let input = match (&lp.topdown, reps.get(l + 1).copied().flatten()) {
            (Some(td), Some(above)) => {
                let up = tape.upsample2(above)?;
                let td = td.apply(tape, up, pad)?;
                tape.concat_channels(&[ls.error, td])?
            }
            _ => ls.error,
        };
        let mut blended = Vec::with_capacity(lp.units.len());
        for (unit, us) in lp.units.iter().zip(&ls.units) {
            let lstm_state = ConvLstmState {
                hidden: ls.representation,
                cell: us.lstm.cell,
            };
            let next = convlstm_step(tape, unit, &lstm_state, input)?;
            let b = if options.leaky_blend {
                leaky_blend(tape, config.taus[l], us.blended, next.hidden)?
            } else {
                next.hidden
            };
            blended.push(b);
            units_next[l].push(UnitState {
                lstm: next,
                blended: b,
            });
        }
        let g = gate_weights(tape, &lp.gate, action, config.gating)?;
        reps[l] = Some(modulate(tape, config.gating, g, &blended)?);
        gates[l] = Some(g);
    }
    let reps: Vec<Var> = reps.into_iter().map(|r| r.expect("every layer visited")).collect();

    let predictions: Vec<Var> = (0..n)
        .map(|l| {
            let pre = params.layers[l].predict.apply(tape, reps[l], pad)?;
            Ok(if l == 0 {
                tape.relu_unit(pre)
            } else {
                tape.relu(pre)
            })
        })
        .collect::<Result<_, NetworkError>>()?;

    let mut targets = Vec::with_capacity(n);
    let mut errors: Vec<Var> = Vec::with_capacity(n);
    for l in 0..n {
        let target = if l == 0 {
            match frame {
                FrameSource::Recorded(v) => v,
                FrameSource::OwnPrediction => {
                    let copy = tape.value(predictions[0]).clone();
                    tape.constant(copy)
                }
            }
        } else {
            let ff = params.layers[l]
                .feedforward
                .as_ref()
                .expect("layers above 0 have a feedforward conv");
            let pre = ff.apply(tape, errors[l - 1], pad)?;
            let act = tape.relu(pre);
            tape.maxpool2(act)?
        };
        let up = tape.sub(target, predictions[l])?;
        let up = tape.relu(up);
        let down = tape.sub(predictions[l], target)?;
        let down = tape.relu(down);
        errors.push(tape.concat_channels(&[up, down])?);
        targets.push(target);
    }

    let layers = (0..n)
        .map(|l| LayerState {
            units: std::mem::take(&mut units_next[l]),
            representation: reps[l],
            error: errors[l],
            prediction: predictions[l],
            target: targets[l],
        })
        .collect();
    let state = NetworkState { layers };
    check_finite(tape, &state)?;
    Ok((state, gates.into_iter().map(|g| g.expect("every layer visited")).collect()))
}

fn check_finite(tape: &Tape, state: &NetworkState<Var>) -> Result<(), NetworkError> {
    for (layer, ls) in state.layers.iter().enumerate() {
        let checks: [(&'static str, Var); 3] = [
            ("representation", ls.representation),
            ("prediction", ls.prediction),
            ("error", ls.error),
        ];
        for (quantity, v) in checks {
            if !tape.value(v).is_finite() {
                return Err(NetworkError::NonFinite { layer, quantity });
            }
        }
    }
    Ok(())
}

fn check_inputs(config: &NetworkConfig, frame: &Grid, action: &Grid) -> Result<(), NetworkError> {
    if frame.shape() != config.input_shape {
        return Err(NetworkError::Input(format!(
            "frame shape {:?}, expected {:?}",
            frame.shape(),
            config.input_shape
        )));
    }
    if frame.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(NetworkError::Input("frame values must lie in [0, 1]".into()));
    }
    if action.shape() != [config.action_dim] {
        return Err(NetworkError::Input(format!(
            "action shape {:?}, expected [{}]",
            action.shape(),
            config.action_dim
        )));
    }
    Ok(())
}

fn trace_of(tape: &Tape, state: &NetworkState<Var>, gates: &[Var]) -> StepTrace {
    StepTrace {
        layers: state
            .layers
            .iter()
            .zip(gates)
            .map(|(ls, &g)| LayerTrace {
                representation: tape.value(ls.representation).clone(),
                blended: ls.units.iter().map(|u| tape.value(u.blended).clone()).collect(),
                unit_outputs: ls.units.iter().map(|u| tape.value(u.lstm.hidden).clone()).collect(),
                prediction: tape.value(ls.prediction).clone(),
                target: tape.value(ls.target).clone(),
                error: tape.value(ls.error).clone(),
                gate: tape.value(g).clone(),
                error_mean: tape.value(ls.error).mean(),
            })
            .collect(),
    }
}

/// Draws seeded parameters and a zero state.
pub fn init_network(
    config: &NetworkConfig,
    seed: u64,
) -> Result<(NetworkParams, NetworkState), NetworkError> {
    for w in config.validate()? {
        warn!("{w}");
    }
    Ok((NetworkParams::seeded(config, seed)?, NetworkState::zeros(config)))
}

/// Advances the network by one frame without recording gradients.
///
/// Returns the new state, a trace of every layer and the per-layer mean
/// error activation.
pub fn step(
    config: &NetworkConfig,
    params: &NetworkParams,
    state: &NetworkState,
    frame: &Grid,
    action: &Grid,
) -> Result<(NetworkState, StepTrace, Vec<f64>), NetworkError> {
    check_inputs(config, frame, action)?;
    step_with(config, params, state, Some(frame), action, StepOptions::default())
}

/// [`step`] with explicit options. `frame = None` feeds back the network's
/// own pixel prediction.
pub fn step_with(
    config: &NetworkConfig,
    params: &NetworkParams,
    state: &NetworkState,
    frame: Option<&Grid>,
    action: &Grid,
    options: StepOptions,
) -> Result<(NetworkState, StepTrace, Vec<f64>), NetworkError> {
    let mut tape = Tape::new();
    let bound = params.bind_constant(&mut tape);
    let prev = state.bind(&mut tape);
    let source = match frame {
        Some(f) => FrameSource::Recorded(tape.constant(f.clone())),
        None => FrameSource::OwnPrediction,
    };
    let a = tape.constant(action.clone());
    let (next, gates) = step_on_tape(&mut tape, config, &bound, &prev, source, a, options)?;
    let trace = trace_of(&tape, &next, &gates);
    let means = trace.layers.iter().map(|t| t.error_mean).collect();
    Ok((next.values(&tape), trace, means))
}

/// Result of running the network over a window from a zero state.
#[derive(Clone, Debug)]
pub struct WindowRun {
    pub loss: f64,
    /// Per-timestep, per-layer mean error activation.
    pub layer_errors: Vec<Vec<f64>>,
    pub traces: Vec<StepTrace>,
}

/// Loss node, per-step states and per-step gate outputs of a recorded window.
type RecordedWindow = (Var, Vec<NetworkState<Var>>, Vec<Vec<Var>>);

/// Records a whole window on `tape` and returns the loss node:
/// the λ-weighted mean error activation summed over layers and averaged over
/// timesteps `1..W`.
fn window_on_tape(
    tape: &mut Tape,
    config: &NetworkConfig,
    params: &NetworkParams<Var>,
    frames: &[Grid],
    actions: &[Grid],
    options: StepOptions,
) -> Result<RecordedWindow, NetworkError> {
    if frames.is_empty() {
        return Err(NetworkError::Input("empty sequence".into()));
    }
    if frames.len() < 2 {
        return Err(NetworkError::Input("a loss needs at least two timesteps".into()));
    }
    if frames.len() != actions.len() {
        return Err(NetworkError::Input(format!(
            "{} frames but {} actions",
            frames.len(),
            actions.len()
        )));
    }
    let mut state = NetworkState::zeros(config).bind(tape);
    let mut states = Vec::with_capacity(frames.len());
    let mut gates = Vec::with_capacity(frames.len());
    let mut total: Option<Var> = None;
    for (t, (frame, action)) in frames.iter().zip(actions).enumerate() {
        check_inputs(config, frame, action)?;
        let f = tape.constant(frame.clone());
        let a = tape.constant(action.clone());
        let (next, g) = step_on_tape(tape, config, params, &state, FrameSource::Recorded(f), a, options)?;
        if t > 0 {
            for (l, ls) in next.layers.iter().enumerate() {
                let weight = config.loss_weights[l];
                if weight == 0.0 {
                    continue;
                }
                let m = tape.mean(ls.error);
                let term = tape.scale(m, weight);
                total = Some(match total {
                    Some(acc) => tape.add(acc, term)?,
                    None => term,
                });
            }
        }
        states.push(next.clone());
        gates.push(g);
        state = next;
    }
    let total = match total {
        Some(v) => v,
        None => tape.constant(Grid::scalar(0.0)),
    };
    let loss = tape.scale(total, 1.0 / (frames.len() - 1) as f64);
    Ok((loss, states, gates))
}

/// Runs a window from a zero state and reports the loss, per-layer errors and
/// full traces.
pub fn run_sequence(
    config: &NetworkConfig,
    params: &NetworkParams,
    frames: &[Grid],
    actions: &[Grid],
) -> Result<WindowRun, NetworkError> {
    run_sequence_with(config, params, frames, actions, StepOptions::default())
}

pub fn run_sequence_with(
    config: &NetworkConfig,
    params: &NetworkParams,
    frames: &[Grid],
    actions: &[Grid],
    options: StepOptions,
) -> Result<WindowRun, NetworkError> {
    let mut tape = Tape::new();
    let bound = params.bind_constant(&mut tape);
    let (loss, states, gates) = window_on_tape(&mut tape, config, &bound, frames, actions, options)?;
    let traces: Vec<StepTrace> = states
        .iter()
        .zip(&gates)
        .map(|(s, g)| trace_of(&tape, s, g))
        .collect();
    Ok(WindowRun {
        loss: tape.value(loss).item(),
        layer_errors: traces
            .iter()
            .map(|t| t.layers.iter().map(|l| l.error_mean).collect())
            .collect(),
        traces,
    })
}

/// Window loss and its gradient with respect to every parameter.
pub fn loss_and_gradients(
    config: &NetworkConfig,
    params: &NetworkParams,
    frames: &[Grid],
    actions: &[Grid],
) -> Result<(f64, NetworkParams), NetworkError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let (loss, _, _) = window_on_tape(&mut tape, config, &bound, frames, actions, StepOptions::default())?;
    tape.backward(loss)?;
    let grads = bound.map(&mut |_, v| tape.grad(*v).expect("bound as parameter").clone());
    Ok((tape.value(loss).item(), grads))
}

/// Builder for [`numerics::grad_check`]: binds the flat parameter handles
/// back into the network structure and records the window loss.
pub fn window_loss_builder<'a>(
    config: &'a NetworkConfig,
    template: &'a NetworkParams,
    frames: &'a [Grid],
    actions: &'a [Grid],
) -> impl Fn(&mut Tape, &[Var]) -> Result<Var, NetworkError> + 'a {
    move |tape, vars| {
        let mut it = vars.iter().copied();
        let bound = template.map(&mut |_, _| it.next().expect("one handle per tensor"));
        let (loss, _, _) = window_on_tape(tape, config, &bound, frames, actions, StepOptions::default())?;
        Ok(loss)
    }
}

/// Emits the pixel prediction `X̂_0(t)` for `t < prime + horizon`.
///
/// Recorded frames drive the first `prime` steps. After that each step takes
/// its own pixel prediction as the observed frame, so the error signal is
/// zero and the network free-runs on its internal state and the recorded
/// actions.
pub fn rollout(
    config: &NetworkConfig,
    params: &NetworkParams,
    frames: &[Grid],
    actions: &[Grid],
    prime: usize,
    horizon: usize,
) -> Result<Vec<Grid>, NetworkError> {
    if prime == 0 {
        return Err(NetworkError::Input("rollout needs at least one primed frame".into()));
    }
    if prime + horizon > frames.len() || frames.len() != actions.len() {
        return Err(NetworkError::Input(format!(
            "prime {prime} + horizon {horizon} exceeds the {} recorded steps",
            frames.len().min(actions.len())
        )));
    }
    let mut state = NetworkState::zeros(config);
    let mut out = Vec::with_capacity(prime + horizon);
    for t in 0..prime + horizon {
        let frame = (t < prime).then(|| &frames[t]);
        if let Some(f) = frame {
            check_inputs(config, f, &actions[t])?;
        }
        let (next, trace, _) =
            step_with(config, params, &state, frame, &actions[t], StepOptions::default())?;
        out.push(trace.layers[0].prediction.clone());
        state = next;
    }
    Ok(out)
}

/// Decodes generative unit `unit` of layer `layer` through the layer's
/// prediction conv, giving the image that unit's leaky state would predict.
pub fn layer_image(
    config: &NetworkConfig,
    params: &NetworkParams,
    trace: &StepTrace,
    layer: usize,
    unit: usize,
) -> Result<Grid, NetworkError> {
    let lt = trace.layers.get(layer).ok_or(NetworkError::IndexOutOfRange {
        what: "layer",
        index: layer,
        len: trace.layers.len(),
    })?;
    let blended = lt.blended.get(unit).ok_or(NetworkError::IndexOutOfRange {
        what: "generative unit",
        index: unit,
        len: lt.blended.len(),
    })?;
    let lp = &params.layers[layer];
    let pre = numerics::conv2d(blended, &lp.predict.kernel, &lp.predict.bias, config.padding)?;
    Ok(if layer == 0 {
        numerics::relu_unit(&pre)
    } else {
        numerics::relu(&pre)
    })
}

/// Mean L1 change between consecutive grids relative to their mean L1 size:
/// `mean_t ‖R(t) − R(t−1)‖₁ / max(1e-12, mean_t ‖R(t)‖₁)`.
pub fn temporal_smoothness(series: &[Grid]) -> f64 {
    if series.len() < 2 {
        return 0.0;
    }
    let change: f64 = series
        .windows(2)
        .map(|w| w[1].data().iter().zip(w[0].data()).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .sum::<f64>()
        / (series.len() - 1) as f64;
    let size = series.iter().map(Grid::l1_norm).sum::<f64>() / series.len() as f64;
    change / size.max(1e-12)
}
