//! Optimization over recorded sequences, evaluation metrics and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::{Reader, Truncated, Writer};
use crate::data::Sequence;
use crate::network::{
    loss_and_gradients, step, temporal_smoothness, NetworkConfig, NetworkError, NetworkParams, NetworkState,
    StepTrace,
};
use crate::numerics::Grid;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MTAP";
pub const CHECKPOINT_VERSION: u32 = 1;
const ADAM_PREFIX: &str = "adam.";
const ADAM_STEP: &str = "adam.step";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{0} gradient tensors for {1} parameter tensors")]
    Arity(usize, usize),
    #[error("gradient shape {grad:?} does not match parameter shape {param:?} at tensor {index}")]
    ShapeMismatch {
        index: usize,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("dataset incompatible with the network: {0}")]
    Incompatible(String),
    #[error("training diverged in epoch {epoch}: {detail}")]
    NonFinite { epoch: usize, detail: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// First- and second-moment estimates for every tensor, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first: Vec<Grid>,
    pub second: Vec<Grid>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Zero moments for tensors of the given shapes and the usual defaults
    /// (α 1e-3, β₁ 0.9, β₂ 0.999, ε 1e-8).
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let first: Vec<Grid> = shapes.into_iter().map(Grid::zeros).collect();
        AdamState {
            second: first.clone(),
            first,
            step: 0,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn for_params(params: &NetworkParams, config: &TrainConfig) -> Self {
        let named = params.named();
        AdamState {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            ..AdamState::new(named.iter().map(|(_, g)| g.shape()))
        }
    }

    /// One bias-corrected Adam step over a flat list of tensors.
    pub fn update(&mut self, params: &mut [Grid], grads: &[Grid]) -> Result<(), TrainError> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(TrainError::Arity(grads.len(), params.len()));
        }
        for (index, ((p, g), m)) in params.iter().zip(grads).zip(&self.first).enumerate() {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(TrainError::ShapeMismatch {
                    index,
                    param: p.shape().to_vec(),
                    grad: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            let moments = m.data_mut().iter_mut().zip(v.data_mut());
            for ((pi, gi), (mi, vi)) in p.data_mut().iter_mut().zip(g.data()).zip(moments) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

fn flatten(params: &NetworkParams) -> Vec<Grid> {
    params.named().into_iter().map(|(_, g)| g.clone()).collect()
}

fn unflatten(template: &NetworkParams, flat: Vec<Grid>) -> NetworkParams {
    let mut it = flat.into_iter();
    template.map(&mut |_, _| it.next().expect("one tensor per parameter"))
}

/// Applies one Adam step to every network tensor.
pub fn adam_update(
    adam: &mut AdamState,
    params: &NetworkParams,
    grads: &NetworkParams,
) -> Result<NetworkParams, TrainError> {
    let mut flat = flatten(params);
    adam.update(&mut flat, &flatten(grads))?;
    Ok(unflatten(params, flat))
}

/// Global L2 norm over all tensors.
pub fn global_norm(grads: &[Grid]) -> f64 {
    grads.iter().map(Grid::sq_norm).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `threshold`, keeping the
/// direction. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Grid], threshold: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > threshold {
        let scale = threshold / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Timesteps per training window; each window starts from a zero state.
    pub window: usize,
    pub windows_per_epoch: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global L2 norm above which gradients are rescaled.
    pub clip_norm: f64,
    pub seed: u64,
    /// Evaluate on the full dataset every this many epochs.
    pub eval_every: usize,
    /// Stop once an epoch's mean loss falls below this value.
    pub early_stop: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            window: 20,
            windows_per_epoch: 30,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 5.0,
            seed: 0,
            eval_every: 50,
            early_stop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.window < 2 {
            return bad(format!("window must be at least 2, got {}", self.window));
        }
        if self.windows_per_epoch == 0 || self.eval_every == 0 {
            return bad("windows per epoch and evaluation cadence must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.epsilon > 0.0 && self.clip_norm > 0.0) {
            return bad("epsilon and clip norm must be positive".into());
        }
        Ok(())
    }
}

/// Checks that `data` can drive a network built from `config`.
pub fn check_compatible(config: &NetworkConfig, data: &Sequence) -> Result<(), TrainError> {
    config.validate()?;
    if data.frame_shape() != config.input_shape {
        return Err(TrainError::Incompatible(format!(
            "frames are {:?}, network expects {:?}",
            data.frame_shape(),
            config.input_shape
        )));
    }
    if data.action_dim() != config.action_dim {
        return Err(TrainError::Incompatible(format!(
            "actions have {} components, network expects {}",
            data.action_dim(),
            config.action_dim
        )));
    }
    Ok(())
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub adam: AdamState,
    /// Mean window loss of each completed epoch.
    pub loss_history: Vec<f64>,
    /// Metrics at every evaluation point, keyed by the number of completed epochs.
    pub evaluations: Vec<(usize, Metrics)>,
    pub stopped_early: bool,
}

/// Trains from freshly initialized optimizer state.
pub fn train(
    config: &NetworkConfig,
    params: &NetworkParams,
    data: &Sequence,
    train_config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let adam = AdamState::for_params(params, train_config);
    train_from(config, params, adam, data, train_config)
}

/// Trains starting from the given optimizer state.
///
/// Each epoch samples `windows_per_epoch` window starts from a generator
/// seeded once per run, and takes one clipped Adam step per window.
pub fn train_from(
    config: &NetworkConfig,
    params: &NetworkParams,
    mut adam: AdamState,
    data: &Sequence,
    train_config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_config.validate()?;
    check_compatible(config, data)?;
    let w = train_config.window;
    if data.len() < w {
        return Err(TrainError::Incompatible(format!(
            "dataset has {} steps, one window needs {w}",
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut params = params.clone();
    let mut outcome = TrainOutcome {
        params: params.clone(),
        adam: adam.clone(),
        loss_history: Vec::with_capacity(train_config.epochs),
        evaluations: Vec::new(),
        stopped_early: false,
    };
    for epoch in 0..train_config.epochs {
        let mut total = 0.0;
        for _ in 0..train_config.windows_per_epoch {
            let start = rng.random_range(0..=data.len() - w);
            let frames = &data.frames[start..start + w];
            let actions = &data.actions[start..start + w];
            let (loss, grads) = loss_and_gradients(config, &params, frames, actions).map_err(|e| match e {
                NetworkError::NonFinite { .. } => TrainError::NonFinite {
                    epoch,
                    detail: e.to_string(),
                },
                other => other.into(),
            })?;
            let mut flat = flatten(&grads);
            let norm = clip_global_norm(&mut flat, train_config.clip_norm);
            if !loss.is_finite() || !norm.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    detail: format!("loss {loss}, gradient norm {norm}"),
                });
            }
            let mut p = flatten(&params);
            adam.update(&mut p, &flat)?;
            params = unflatten(&params, p);
            total += loss;
        }
        let epoch_loss = total / train_config.windows_per_epoch as f64;
        outcome.loss_history.push(epoch_loss);
        info!("epoch {} loss {epoch_loss:.6}", epoch + 1);
        if (epoch + 1) % train_config.eval_every == 0 {
            let metrics = evaluate(config, &params, data)?;
            info!(
                "epoch {}: mse {:.6} baseline {:.6}",
                epoch + 1,
                metrics.mse,
                metrics.baseline_mse
            );
            outcome.evaluations.push((epoch + 1, metrics));
        }
        if train_config.early_stop.is_some_and(|th| epoch_loss < th) {
            outcome.stopped_early = true;
            break;
        }
    }
    outcome.params = params;
    outcome.adam = adam;
    Ok(outcome)
}

/// One-step prediction quality on a whole sequence.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    /// Mean squared error of `X̂_0(t)` against frame `t`, over `t ≥ 1`.
    pub mse: f64,
    /// Same, predicting frame `t` by frame `t − 1`.
    pub baseline_mse: f64,
    /// Mean error activation per layer over `t ≥ 1`.
    pub layer_error: Vec<f64>,
    /// Temporal smoothness of each layer's representation series.
    pub smoothness: Vec<f64>,
    /// `(t, mse, baseline_mse)` for every evaluated timestep.
    pub per_step: Vec<(usize, f64, f64)>,
}

fn mse(a: &Grid, b: &Grid) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Runs the network over the whole sequence from a zero state, feeding the
/// recorded frames, and scores its one-step predictions.
pub fn evaluate(config: &NetworkConfig, params: &NetworkParams, data: &Sequence) -> Result<Metrics, TrainError> {
    evaluate_with(config, params, data, |_, _| {})
}

/// [`evaluate`], handing every step's trace to `observe` as it is produced.
pub fn evaluate_with(
    config: &NetworkConfig,
    params: &NetworkParams,
    data: &Sequence,
    mut observe: impl FnMut(usize, &StepTrace),
) -> Result<Metrics, TrainError> {
    check_compatible(config, data)?;
    let layers = config.layers();
    let mut state = NetworkState::zeros(config);
    let mut reps: Vec<Vec<Grid>> = vec![Vec::with_capacity(data.len()); layers];
    let mut layer_error = vec![0.0; layers];
    let mut per_step = Vec::with_capacity(data.len() - 1);
    for (t, (frame, action)) in data.frames.iter().zip(&data.actions).enumerate() {
        let (next, trace, errors) = step(config, params, &state, frame, action)?;
        observe(t, &trace);
        for (l, lt) in trace.layers.iter().enumerate() {
            reps[l].push(lt.representation.clone());
        }
        if t > 0 {
            let prediction = &trace.layers[0].prediction;
            per_step.push((t, mse(prediction, frame), mse(&data.frames[t - 1], frame)));
            for (acc, e) in layer_error.iter_mut().zip(&errors) {
                *acc += e;
            }
        }
        state = next;
    }
    let n = per_step.len() as f64;
    Ok(Metrics {
        mse: per_step.iter().map(|s| s.1).sum::<f64>() / n,
        baseline_mse: per_step.iter().map(|s| s.2).sum::<f64>() / n,
        layer_error: layer_error.into_iter().map(|e| e / n).collect(),
        smoothness: reps.iter().map(|r| temporal_smoothness(r)).collect(),
        per_step,
    })
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic: expected \"MTAP\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0} (expected 1)")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Truncated(#[from] Truncated),
    #[error("invalid configuration blob: {0}")]
    Config(String),
    #[error("checkpoint inconsistent with its configuration: {0}")]
    Inconsistent(String),
}

/// Configuration blob stored in a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub params: NetworkParams,
    /// Optimizer state, absent for checkpoints written without one.
    pub adam: Option<AdamState>,
}

fn write_tensor(out: &mut Writer, name: &str, grid: &Grid) -> Result<(), CheckpointError> {
    let len = u16::try_from(name.len()).map_err(|_| CheckpointError::Inconsistent(format!("name too long: {name}")))?;
    out.u16(len);
    out.bytes(name.as_bytes());
    let rank = u8::try_from(grid.rank()).map_err(|_| CheckpointError::Inconsistent(format!("rank of {name}")))?;
    out.u8(rank);
    for &d in grid.shape() {
        out.u32(u32::try_from(d).map_err(|_| CheckpointError::Inconsistent(format!("extent of {name}")))?);
    }
    out.f64s(grid.data());
    Ok(())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>, CheckpointError> {
    let blob = serde_json::to_vec(&CheckpointConfig {
        network: ckpt.network.clone(),
        train: ckpt.train.clone(),
    })
    .map_err(|e| CheckpointError::Config(e.to_string()))?;
    let mut tensors: Vec<(String, &Grid)> = ckpt.params.named();
    let step_grid;
    if let Some(adam) = &ckpt.adam {
        if adam.first.len() != tensors.len() {
            return Err(CheckpointError::Inconsistent(format!(
                "optimizer tracks {} tensors, network has {}",
                adam.first.len(),
                tensors.len()
            )));
        }
        let names: Vec<String> = tensors.iter().map(|(n, _)| n.clone()).collect();
        for (name, m) in names.iter().zip(&adam.first) {
            tensors.push((format!("{ADAM_PREFIX}m.{name}"), m));
        }
        for (name, v) in names.iter().zip(&adam.second) {
            tensors.push((format!("{ADAM_PREFIX}v.{name}"), v));
        }
        step_grid = Grid::scalar(adam.step as f64);
        tensors.push((ADAM_STEP.to_string(), &step_grid));
    }
    let mut out = Writer::new();
    out.bytes(CHECKPOINT_MAGIC);
    out.u32(CHECKPOINT_VERSION);
    out.u32(blob.len() as u32);
    out.bytes(&blob);
    out.u32(tensors.len() as u32);
    for (name, grid) in &tensors {
        write_tensor(&mut out, name, grid)?;
    }
    Ok(out.into_bytes())
}

fn take(stored: &mut BTreeMap<String, Grid>, name: &str, shape: &[usize]) -> Result<Grid, CheckpointError> {
    let g = stored
        .remove(name)
        .ok_or_else(|| CheckpointError::Inconsistent(format!("missing tensor {name}")))?;
    if g.shape() != shape {
        return Err(CheckpointError::Inconsistent(format!(
            "tensor {name} has shape {:?}, configuration implies {shape:?}",
            g.shape()
        )));
    }
    Ok(g)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader::new(bytes);
    let magic: [u8; 4] = r.bytes(4)?.try_into().expect("four bytes");
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let blob_len = r.u32()? as usize;
    let blob = r.bytes(blob_len)?;
    let config: CheckpointConfig =
        serde_json::from_slice(blob).map_err(|e| CheckpointError::Config(e.to_string()))?;
    config
        .network
        .validate()
        .map_err(|e| CheckpointError::Config(e.to_string()))?;

    let count = r.u32()? as usize;
    let mut stored = BTreeMap::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.bytes(len)?)
            .map_err(|_| CheckpointError::Inconsistent("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n = shape.iter().product::<usize>();
        let grid = Grid::new(&shape, r.f64s(n)?)
            .map_err(|e| CheckpointError::Inconsistent(format!("tensor {name}: {e}")))?;
        if stored.insert(name.clone(), grid).is_some() {
            return Err(CheckpointError::Inconsistent(format!("duplicate tensor {name}")));
        }
    }
    if r.remaining() != 0 {
        return Err(CheckpointError::Inconsistent(format!("{} trailing bytes", r.remaining())));
    }

    let template = NetworkParams::zeros(&config.network).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let named = template.named();
    let flat = named
        .iter()
        .map(|(n, g)| take(&mut stored, n, g.shape()))
        .collect::<Result<Vec<_>, _>>()?;
    let params = unflatten(&template, flat);

    let adam = if stored.contains_key(ADAM_STEP) {
        let step = take(&mut stored, ADAM_STEP, &[1])?.item();
        let first = named
            .iter()
            .map(|(n, g)| take(&mut stored, &format!("{ADAM_PREFIX}m.{n}"), g.shape()))
            .collect::<Result<Vec<_>, _>>()?;
        let second = named
            .iter()
            .map(|(n, g)| take(&mut stored, &format!("{ADAM_PREFIX}v.{n}"), g.shape()))
            .collect::<Result<Vec<_>, _>>()?;
        if !(step >= 0.0 && step.fract() == 0.0) {
            return Err(CheckpointError::Inconsistent(format!("optimizer step {step}")));
        }
        Some(AdamState {
            first,
            second,
            step: step as u64,
            learning_rate: config.train.learning_rate,
            beta1: config.train.beta1,
            beta2: config.train.beta2,
            epsilon: config.train.epsilon,
        })
    } else {
        None
    };
    if let Some(extra) = stored.keys().next() {
        return Err(CheckpointError::Inconsistent(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        network: config.network,
        train: config.train,
        params,
        adam,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode_checkpoint(&fs::read(path)?)
}

/// Loads a checkpoint and compares its network configuration with the one
/// the caller expected. The file wins; each difference is logged and
/// returned.
pub fn load_checkpoint_expecting(
    path: &Path,
    expected: &NetworkConfig,
) -> Result<(Checkpoint, Vec<String>), CheckpointError> {
    let ckpt = load_checkpoint(path)?;
    let found = serde_json::to_value(&ckpt.network).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let wanted = serde_json::to_value(expected).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let mut warnings = Vec::new();
    if let (Some(found), Some(wanted)) = (found.as_object(), wanted.as_object()) {
        for (key, value) in found {
            if wanted.get(key) != Some(value) {
                let w = format!(
                    "checkpoint {key} = {value}, expected {}; using the checkpoint's value",
                    wanted.get(key).map(ToString::to_string).unwrap_or_default()
                );
                warn!("{w}");
                warnings.push(w);
            }
        }
    }
    Ok((ckpt, warnings))
}
