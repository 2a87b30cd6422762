//! Command-line entry points.
//!
//! Every command writes a JSON run manifest next to its primary output:
//! `<file>.manifest.json` for commands that produce one file and
//! `<dir>/manifest.json` for commands that fill a directory. Exit codes are
//! 0 on success, 1 for usage errors, 2 for runtime or data errors and 3 when
//! a gradient check fails.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::cells::GatingMode;
use crate::data::{self, DataError, SimConfig, TrackShape};
use crate::network::{self, layer_image, window_loss_builder, NetworkConfig, NetworkError, NetworkParams};
use crate::numerics::{grad_check, GradCheckOptions, Grid};
use crate::training::{
    self, check_compatible, evaluate_with, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError,
    TrainConfig, TrainError,
};

/// Largest relative gradient error the `gradcheck` command accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "mta-prednet", version, about = "Multiple-timescale, action-modulated predictive coding network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the line tracer and write a dataset file.
    GenData(GenDataArgs),
    /// Train a network on a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Write one-step predictions and their errors.
    Predict(PredictArgs),
    /// Prime on recorded frames, then run closed loop.
    Rollout(RolloutArgs),
    /// Decode each generative unit's state into images.
    DumpReps(DumpRepsArgs),
    /// Verify backpropagation against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TrackArg {
    Loop,
    SCurve,
}

impl From<TrackArg> for TrackShape {
    fn from(t: TrackArg) -> Self {
        match t {
            TrackArg::Loop => TrackShape::Loop,
            TrackArg::SCurve => TrackShape::SCurve,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GatingArg {
    Mixture,
    Channel,
}

impl From<GatingArg> for GatingMode {
    fn from(g: GatingArg) -> Self {
        match g {
            GatingArg::Mixture => GatingMode::Mixture,
            GatingArg::Channel => GatingMode::ChannelGate,
        }
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("must be a finite non-negative number, got {s}"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    match non_negative(s)? {
        v if v > 0.0 => Ok(v),
        _ => Err(format!("must be positive, got {s}")),
    }
}

#[derive(Debug, clap::Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Recorded timesteps (at least 2).
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(2..=u32::MAX as u64))]
    pub steps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "loop")]
    pub track: TrackArg,
    /// Standard deviation of Gaussian pixel noise.
    #[arg(long, default_value_t = 0.0, value_parser = non_negative)]
    pub noise: f64,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3, value_parser = positive)]
    pub lr: f64,
    #[arg(long, default_value_t = 20)]
    pub window: usize,
    #[arg(long, default_value_t = TrainConfig::default().windows_per_epoch)]
    pub windows_per_epoch: usize,
    /// Time constant per layer.
    #[arg(long, value_delimiter = ',', default_value = "1.0,1.3,2.0")]
    pub tau: Vec<f64>,
    /// Target channels per layer.
    #[arg(long, value_delimiter = ',', default_value = "1,8,16")]
    pub channels: Vec<usize>,
    /// Representation channels per layer.
    #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
    pub rchannels: Vec<usize>,
    /// Generative units per layer.
    #[arg(long, default_value_t = 2)]
    pub gus: usize,
    #[arg(long, value_enum, default_value = "mixture")]
    pub gating: GatingArg,
    /// Per-layer loss weights.
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.1,0.1")]
    pub lambda: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Global gradient-norm clipping threshold.
    #[arg(long, default_value_t = 5.0, value_parser = positive)]
    pub clip: f64,
    #[arg(long, default_value_t = TrainConfig::default().eval_every)]
    pub eval_every: usize,
    /// Stop once an epoch's mean loss drops below this value.
    #[arg(long, value_parser = positive)]
    pub early_stop: Option<f64>,
}

#[derive(Debug, clap::Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Steps driven by recorded frames.
    #[arg(long, default_value_t = 50)]
    pub prime: usize,
    /// Closed-loop steps after priming.
    #[arg(long, default_value_t = 100)]
    pub horizon: usize,
}

#[derive(Debug, clap::Args)]
pub struct DumpRepsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Layers to decode; all by default.
    #[arg(long, value_delimiter = ',')]
    pub layer: Vec<usize>,
    /// Generative units to decode; all by default.
    #[arg(long, value_delimiter = ',')]
    pub gu: Vec<usize>,
}

#[derive(Debug, clap::Args)]
pub struct GradcheckArgs {
    /// Output directory for the report.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1.0,1.3,2.0")]
    pub tau: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Entries probed per parameter tensor.
    #[arg(long, default_value_t = GradCheckOptions::default().samples_per_group)]
    pub samples: usize,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

/// Record of one invocation.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: u64,
    pub artifacts: Vec<PathBuf>,
    pub duration_secs: f64,
    pub metrics: Value,
}

impl RunManifest {
    fn write(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// `<path>` with `suffix` appended to its file name.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(OsString::from).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return 0;
            }
            let text = e.render().to_string();
            eprint!("{text}");
            if !text.contains("Usage:") {
                eprintln!("\n{}", usage_for(&args));
            }
            return 1;
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("\n{}", usage_for(&args));
            }
            e.exit_code()
        }
    }
}

/// Usage line of the subcommand named in `args`, or of the whole program.
fn usage_for(args: &[OsString]) -> clap::builder::StyledStr {
    let mut cmd = Cli::command();
    cmd.build();
    let name = args.get(1).and_then(|a| a.to_str()).map(str::to_owned);
    match name.and_then(|n| cmd.find_subcommand_mut(&n).cloned()) {
        Some(mut sub) => sub.render_usage(),
        None => cmd.render_usage(),
    }
}

fn execute(command: Command) -> Result<i32, CliError> {
    let started = Instant::now();
    match command {
        Command::GenData(a) => gen_data(a, started),
        Command::Train(a) => train(a, started),
        Command::Predict(a) => predict(a, started),
        Command::Rollout(a) => rollout(a, started),
        Command::DumpReps(a) => dump_reps(a, started),
        Command::Gradcheck(a) => gradcheck(a, started),
    }
}

fn gen_data(a: GenDataArgs, started: Instant) -> Result<i32, CliError> {
    let config = SimConfig {
        track: a.track.into(),
        seed: a.seed,
        noise: a.noise,
        ..SimConfig::default()
    };
    let seq = data::simulate(&config, a.steps as usize)?;
    data::save_dataset(&seq, &a.out)?;
    RunManifest {
        command: "gen-data".into(),
        config: json!({ "steps": a.steps, "simulator": config }),
        seed: a.seed,
        artifacts: vec![a.out.clone()],
        duration_secs: started.elapsed().as_secs_f64(),
        metrics: json!({ "fallback_steps": seq.fallback.len() }),
    }
    .write(&sibling(&a.out, ".manifest.json"))?;
    Ok(0)
}

/// Builds the network configuration from flags and the dataset's shape.
/// Flag combinations that are invalid on their own are usage errors; ones
/// that only clash with the dataset are data errors.
fn network_config(a: &TrainArgs, seq: &data::Sequence) -> Result<NetworkConfig, CliError> {
    let config = NetworkConfig {
        input_shape: seq.frame_shape(),
        action_dim: seq.action_dim(),
        taus: a.tau.clone(),
        target_channels: a.channels.clone(),
        repr_channels: a.rchannels.clone(),
        units: a.gus,
        gating: a.gating.into(),
        loss_weights: a.lambda.clone(),
        ..NetworkConfig::default()
    };
    // Flag-only problems are usage errors; a fit problem with the data is not.
    match config.validate() {
        Err(NetworkError::Config(m)) => Err(CliError::Usage(m)),
        Err(e) => Err(e.into()),
        Ok(_) => Ok(config),
    }
}

fn train(a: TrainArgs, started: Instant) -> Result<i32, CliError> {
    let train_config = TrainConfig {
        epochs: a.epochs,
        window: a.window,
        windows_per_epoch: a.windows_per_epoch,
        learning_rate: a.lr,
        clip_norm: a.clip,
        seed: a.seed,
        eval_every: a.eval_every,
        early_stop: a.early_stop,
        ..TrainConfig::default()
    };
    train_config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let seq = data::load_dataset(&a.data)?;
    let config = network_config(&a, &seq)?;
    let (params, _) = network::init_network(&config, a.seed)?;
    let outcome = training::train(&config, &params, &seq, &train_config)?;

    save_checkpoint(
        &Checkpoint {
            network: config.clone(),
            train: train_config.clone(),
            params: outcome.params.clone(),
            adam: Some(outcome.adam.clone()),
        },
        &a.out,
    )?;
    let loss_path = sibling(&a.out, ".loss.csv");
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in outcome.loss_history.iter().enumerate() {
        writeln!(csv, "{},{l}", e + 1).expect("writing to a string");
    }
    fs::write(&loss_path, csv)?;

    let metrics = training::evaluate(&config, &outcome.params, &seq)?;
    RunManifest {
        command: "train".into(),
        config: json!({ "network": config, "train": train_config, "data": a.data }),
        seed: a.seed,
        artifacts: vec![a.out.clone(), loss_path],
        duration_secs: started.elapsed().as_secs_f64(),
        metrics: json!({
            "epochs_run": outcome.loss_history.len(),
            "first_loss": outcome.loss_history.first(),
            "final_loss": outcome.loss_history.last(),
            "stopped_early": outcome.stopped_early,
            "mse": metrics.mse,
            "baseline_mse": metrics.baseline_mse,
            "layer_error": metrics.layer_error,
            "smoothness": metrics.smoothness,
        }),
    }
    .write(&sibling(&a.out, ".manifest.json"))?;
    Ok(0)
}

fn load_inputs(checkpoint: &Path, data_path: &Path) -> Result<(Checkpoint, data::Sequence), CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let seq = data::load_dataset(data_path)?;
    check_compatible(&ckpt.network, &seq)?;
    Ok((ckpt, seq))
}

fn mse_csv(rows: &[(usize, f64, f64)]) -> String {
    let mut csv = String::from("t,mse,baseline_mse\n");
    for (t, m, b) in rows {
        writeln!(csv, "{t},{m},{b}").expect("writing to a string");
    }
    csv
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn write_pairs(dir: &Path, truth: &[Grid], predicted: &[Grid]) -> Result<Vec<PathBuf>, CliError> {
    let true_dir = dir.join("true");
    let pred_dir = dir.join("pred");
    data::export_frames(truth, &true_dir)?;
    data::export_frames(predicted, &pred_dir)?;
    Ok(vec![true_dir, pred_dir])
}

fn predict(a: PredictArgs, started: Instant) -> Result<i32, CliError> {
    let (ckpt, seq) = load_inputs(&a.checkpoint, &a.data)?;
    let mut predictions = Vec::with_capacity(seq.len());
    let metrics = evaluate_with(&ckpt.network, &ckpt.params, &seq, |_, trace| {
        predictions.push(trace.layers[0].prediction.clone());
    })?;
    fs::create_dir_all(&a.out)?;
    let mut artifacts = write_pairs(&a.out, &seq.frames, &predictions)?;
    let csv_path = a.out.join("mse.csv");
    fs::write(&csv_path, mse_csv(&metrics.per_step))?;
    artifacts.push(csv_path);
    RunManifest {
        command: "predict".into(),
        config: json!({ "network": ckpt.network, "checkpoint": a.checkpoint, "data": a.data }),
        seed: ckpt.train.seed,
        artifacts,
        duration_secs: started.elapsed().as_secs_f64(),
        metrics: json!({
            "mse": metrics.mse,
            "baseline_mse": metrics.baseline_mse,
            "layer_error": metrics.layer_error,
            "smoothness": metrics.smoothness,
        }),
    }
    .write(&a.out.join("manifest.json"))?;
    Ok(0)
}

fn rollout(a: RolloutArgs, started: Instant) -> Result<i32, CliError> {
    let (ckpt, seq) = load_inputs(&a.checkpoint, &a.data)?;
    if a.prime == 0 || a.prime + a.horizon > seq.len() {
        return Err(CliError::Usage(format!(
            "need 1 ≤ prime and prime + horizon ≤ {} recorded steps, got prime {} and horizon {}",
            seq.len(),
            a.prime,
            a.horizon
        )));
    }
    let generated = network::rollout(&ckpt.network, &ckpt.params, &seq.frames, &seq.actions, a.prime, a.horizon)?;
    let n = generated.len();
    // Once the loop closes, the copy baseline can only hold the last frame it saw.
    let rows: Vec<(usize, f64, f64)> = (1..n)
        .map(|t| {
            let seen = &seq.frames[(t - 1).min(a.prime - 1)];
            (t, mse(&generated[t], &seq.frames[t]), mse(seen, &seq.frames[t]))
        })
        .collect();
    fs::create_dir_all(&a.out)?;
    let mut artifacts = write_pairs(&a.out, &seq.frames[..n], &generated)?;
    let csv_path = a.out.join("mse.csv");
    fs::write(&csv_path, mse_csv(&rows))?;
    artifacts.push(csv_path);
    let closed = &rows[(a.prime - 1).min(rows.len())..];
    RunManifest {
        command: "rollout".into(),
        config: json!({
            "network": ckpt.network,
            "checkpoint": a.checkpoint,
            "data": a.data,
            "prime": a.prime,
            "horizon": a.horizon,
        }),
        seed: ckpt.train.seed,
        artifacts,
        duration_secs: started.elapsed().as_secs_f64(),
        metrics: json!({
            "mse": mean(rows.iter().map(|r| r.1)),
            "baseline_mse": mean(rows.iter().map(|r| r.2)),
            "closed_loop_mse": mean(closed.iter().map(|r| r.1)),
            "closed_loop_baseline_mse": mean(closed.iter().map(|r| r.2)),
        }),
    }
    .write(&a.out.join("manifest.json"))?;
    Ok(0)
}

fn mse(a: &Grid, b: &Grid) -> f64 {
    mean(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)))
}

fn check_indices(what: &str, requested: &[usize], available: usize) -> Result<Vec<usize>, CliError> {
    if requested.is_empty() {
        return Ok((0..available).collect());
    }
    match requested.iter().find(|&&i| i >= available) {
        Some(i) => Err(CliError::Usage(format!("{what} {i} out of range (have {available})"))),
        None => Ok(requested.to_vec()),
    }
}

fn dump_reps(a: DumpRepsArgs, started: Instant) -> Result<i32, CliError> {
    let (ckpt, seq) = load_inputs(&a.checkpoint, &a.data)?;
    let config = &ckpt.network;
    let layers = check_indices("layer", &a.layer, config.layers())?;
    let units = check_indices("generative unit", &a.gu, config.units)?;

    // images[(layer, unit)][t]
    let mut images: Vec<Vec<Vec<Grid>>> = vec![vec![Vec::with_capacity(seq.len()); units.len()]; layers.len()];
    let mut failure = None;
    let metrics = evaluate_with(config, &ckpt.params, &seq, |_, trace| {
        for (li, &l) in layers.iter().enumerate() {
            for (ui, &k) in units.iter().enumerate() {
                match layer_image(config, &ckpt.params, trace, l, k) {
                    Ok(img) => images[li][ui].push(img),
                    Err(e) => failure = Some(e),
                }
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }

    fs::create_dir_all(&a.out)?;
    let mut artifacts = Vec::new();
    for (li, &l) in layers.iter().enumerate() {
        for (ui, &k) in units.iter().enumerate() {
            let dir = a.out.join(format!("layer{l}")).join(format!("gu{k}"));
            let series = &images[li][ui];
            if l == 0 {
                data::export_frames(series, &dir)?;
            } else {
                // Unbounded relu maps: scale each unit's series by its peak.
                let peak = series.iter().flat_map(|g| g.data().iter().copied()).fold(0.0, f64::max);
                let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
                let channels = series[0].shape()[0];
                for c in 0..channels {
                    let frames = series
                        .iter()
                        .map(|g| g.channel(c).map(|ch| ch.map(|v| (v * scale).min(1.0))))
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(NetworkError::from)?;
                    data::export_frames(&frames, &dir.join(format!("ch{c:02}")))?;
                }
            }
            artifacts.push(dir);
        }
    }
    let mut csv = String::from("layer,tau,smoothness\n");
    for (l, s) in metrics.smoothness.iter().enumerate() {
        writeln!(csv, "{l},{},{s}", config.taus[l]).expect("writing to a string");
    }
    let csv_path = a.out.join("smoothness.csv");
    fs::write(&csv_path, csv)?;
    artifacts.push(csv_path);
    RunManifest {
        command: "dump-reps".into(),
        config: json!({
            "network": config,
            "checkpoint": a.checkpoint,
            "data": a.data,
            "layers": layers,
            "units": units,
        }),
        seed: ckpt.train.seed,
        artifacts,
        duration_secs: started.elapsed().as_secs_f64(),
        metrics: json!({ "smoothness": metrics.smoothness }),
    }
    .write(&a.out.join("manifest.json"))?;
    Ok(0)
}

/// Timesteps in the gradient check's random sequence.
const GRADCHECK_STEPS: usize = 5;

fn gradcheck(a: GradcheckArgs, started: Instant) -> Result<i32, CliError> {
    let config = NetworkConfig {
        taus: a.tau.clone(),
        ..NetworkConfig::default()
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if a.samples == 0 {
        return Err(CliError::Usage("--samples must be positive".into()));
    }
    let params = NetworkParams::seeded(&config, a.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed.wrapping_add(1));
    let shape = config.input_shape;
    let frames: Vec<Grid> = (0..GRADCHECK_STEPS)
        .map(|_| Grid::from_fn(&shape, |_| rng.random_range(0.0..1.0)))
        .collect();
    let actions: Vec<Grid> = (0..GRADCHECK_STEPS)
        .map(|_| Grid::from_fn(&[config.action_dim], |_| rng.random_range(-1.0..1.0)))
        .collect();
    let named: Vec<(String, Grid)> = params.named().into_iter().map(|(n, g)| (n, g.clone())).collect();
    let options = GradCheckOptions {
        samples_per_group: a.samples,
        seed: a.seed,
        ..GradCheckOptions::default()
    };
    let builder = window_loss_builder(&config, &params, &frames, &actions);
    let report = grad_check(&named, builder, GRADCHECK_TOLERANCE, &options)?;

    let mut csv = String::from("group,checked,skipped_at_kinks,max_rel_error\n");
    for g in &report.groups {
        println!("{:<40} {:>3} checked {:>3} skipped  max rel error {:.3e}", g.name, g.checked, g.skipped_at_kinks, g.max_rel_error);
        writeln!(csv, "{},{},{},{}", g.name, g.checked, g.skipped_at_kinks, g.max_rel_error)
            .expect("writing to a string");
    }
    let passed = report.passed();
    println!(
        "{} groups, max relative error {:.3e} (tolerance {:.0e}): {}",
        report.groups.len(),
        report.max_rel_error(),
        GRADCHECK_TOLERANCE,
        if passed { "PASS" } else { "FAIL" }
    );
    fs::create_dir_all(&a.out)?;
    let csv_path = a.out.join("gradcheck.csv");
    fs::write(&csv_path, csv)?;
    RunManifest {
        command: "gradcheck".into(),
        config: json!({
            "network": config,
            "steps": GRADCHECK_STEPS,
            "step_size": options.step,
            "samples_per_group": options.samples_per_group,
            "tolerance": GRADCHECK_TOLERANCE,
        }),
        seed: a.seed,
        artifacts: vec![csv_path],
        duration_secs: started.elapsed().as_secs_f64(),
        metrics: json!({ "max_rel_error": report.max_rel_error(), "passed": passed }),
    }
    .write(&a.out.join("manifest.json"))?;
    Ok(if passed { 0 } else { 3 })
}
