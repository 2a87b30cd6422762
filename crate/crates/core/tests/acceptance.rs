//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod support;

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::{Duration, Instant};
use std::{fs, process};

use mta_prednet::cells::{gate_weights, GatingMode, LeakyState};
use mta_prednet::data::{self, DataError, SimConfig};
use mta_prednet::network::{
    run_sequence_with, step, NetworkConfig, NetworkParams, NetworkState, StepOptions,
};
use mta_prednet::numerics::{Grid, Tape};
use mta_prednet::training::{
    self, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError,
    TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{max_diff, random_stream, reference_step};
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_mta-prednet");

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($msg)+));
        }
    };
}

fn cli(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Gradient correctness through the gradcheck command.
fn gradients() -> Outcome {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut slowest = Duration::ZERO;
    for tau in ["1.0,1.3,2.0", "2.0,2.0,2.0"] {
        let out_dir = dir.path().join(tau);
        let started = Instant::now();
        let out = cli(&["gradcheck", "--out", path_str(&out_dir), "--tau", tau]);
        slowest = slowest.max(started.elapsed());
        let stdout = String::from_utf8_lossy(&out.stdout);
        ensure!(out.status.code() == Some(0), "tau {tau}: exit {:?}\n{stdout}", out.status.code());
        let csv = fs::read_to_string(out_dir.join("gradcheck.csv")).map_err(|e| e.to_string())?;
        let mut names = Vec::new();
        for line in csv.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            names.push(cols[0].to_string());
            let err: f64 = cols[3].parse().map_err(|_| format!("bad row {line}"))?;
            ensure!(err <= 1e-4, "tau {tau}: {} has relative error {err:e}", cols[0]);
            worst = worst.max(err);
        }
        let expected: Vec<String> = NetworkParams::seeded(&NetworkConfig::default(), 0)
            .map_err(|e| e.to_string())?
            .named()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        ensure!(names == expected, "tau {tau}: report groups differ from the parameter list");
    }
    ensure!(slowest < Duration::from_secs(120), "gradcheck took {slowest:?}");
    Ok(format!("max relative error {worst:.2e}, slowest run {:.1}s", slowest.as_secs_f64()))
}

/// One step against the independent nested-loop implementation.
fn oracle() -> Outcome {
    let mut worst = 0.0f64;
    let configs = [
        NetworkConfig::default(),
        NetworkConfig {
            units: 1,
            gating: GatingMode::ChannelGate,
            ..NetworkConfig::default()
        },
    ];
    for config in &configs {
        for seed in 0..5u64 {
            let params = NetworkParams::seeded(config, seed).map_err(|e| e.to_string())?;
            let (frames, actions) = random_stream(config, 100 + seed, 4);
            let mut state = NetworkState::zeros(config);
            for t in 0..frames.len() {
                let expected = reference_step(config, &params, &state, &frames[t], &actions[t]);
                let (next, _, _) = step(config, &params, &state, &frames[t], &actions[t]).map_err(|e| e.to_string())?;
                for (l, (r, got)) in expected.iter().zip(&next.layers).enumerate() {
                    let mut diffs = vec![
                        max_diff(&r.representation, &got.representation),
                        max_diff(&r.prediction, &got.prediction),
                        max_diff(&r.target, &got.target),
                        max_diff(&r.error, &got.error),
                    ];
                    for (k, u) in got.units.iter().enumerate() {
                        diffs.push(max_diff(&r.cells[k], &u.lstm.cell));
                        diffs.push(max_diff(&r.blended[k], &u.blended));
                    }
                    let d = diffs.into_iter().fold(0.0, f64::max);
                    ensure!(d <= 1e-12, "seed {seed}, t {t}, layer {l}: difference {d:e}");
                    worst = worst.max(d);
                }
                state = next;
            }
        }
    }
    Ok(format!("5 seeds x 4 steps x 2 gating modes, max difference {worst:.2e}"))
}

/// Geometric approach of the leaky blend to a frozen input.
fn leaky_dynamics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for tau in [1.0, 1.3, 2.0] {
        let start = Grid::from_fn(&[4, 3, 5], |_| rng.random_range(-2.0..2.0));
        let c = rng.random_range(-1.0..1.0);
        let frozen = Grid::filled(&[4, 3, 5], c);
        let mut state = LeakyState::new(start.clone(), tau).map_err(|e| e.to_string())?;
        for t in 1..=30i32 {
            state = state.update(&frozen).map_err(|e| e.to_string())?;
            for (r, r0) in state.blended.data().iter().zip(start.data()) {
                let predicted = (1.0 - 1.0 / tau).powi(t) * (r0 - c).abs();
                let d = ((r - c).abs() - predicted).abs();
                ensure!(d <= 1e-12, "tau {tau}, t {t}: deviation {d:e}");
                worst = worst.max(d);
            }
            if tau == 1.0 {
                ensure!(state.blended == frozen, "tau 1 is not an exact pass-through at t {t}");
            }
        }
    }
    Ok(format!("tau 1.0/1.3/2.0 over 30 steps, max deviation {worst:.2e}; tau 1 exact"))
}

/// With every tau at 1 the representation series equals the blend-free build.
fn reduction() -> Outcome {
    let config = NetworkConfig {
        taus: vec![1.0; 3],
        ..NetworkConfig::default()
    };
    for seed in 0..3u64 {
        let params = NetworkParams::seeded(&config, seed).map_err(|e| e.to_string())?;
        let (frames, actions) = random_stream(&config, seed, 12);
        let run = |leaky_blend| {
            run_sequence_with(&config, &params, &frames, &actions, StepOptions { leaky_blend })
                .map_err(|e| e.to_string())
        };
        let (with, without) = (run(true)?, run(false)?);
        for (t, (a, b)) in with.traces.iter().zip(&without.traces).enumerate() {
            for (l, (la, lb)) in a.layers.iter().zip(&b.layers).enumerate() {
                let same = la.representation.data().iter().zip(lb.representation.data()).all(|(x, y)| x.to_bits() == y.to_bits());
                ensure!(same, "seed {seed}, t {t}, layer {l}: representations differ");
            }
        }
        ensure!(with.loss.to_bits() == without.loss.to_bits(), "seed {seed}: losses differ");
    }
    Ok("3 seeds x 12 steps bit-identical".into())
}

/// Error units are nonnegative, one-sided, and follow the shape ladder.
fn error_units() -> Outcome {
    let config = NetworkConfig::default();
    let ladder = [[1, 8, 12], [8, 4, 6], [16, 2, 3]];
    let mut steps = 0;
    for seed in 0..4u64 {
        let params = NetworkParams::seeded(&config, seed).map_err(|e| e.to_string())?;
        let (frames, actions) = random_stream(&config, 50 + seed, 15);
        let mut state = NetworkState::zeros(&config);
        for t in 0..frames.len() {
            let (next, _, _) = step(&config, &params, &state, &frames[t], &actions[t]).map_err(|e| e.to_string())?;
            for (l, ls) in next.layers.iter().enumerate() {
                ensure!(ls.target.shape() == ladder[l], "layer {l} target shape {:?}", ls.target.shape());
                let c = config.target_channels[l];
                let [_, h, w] = ladder[l];
                ensure!(ls.error.shape() == [2 * c, h, w], "layer {l} error shape {:?}", ls.error.shape());
                let e = ls.error.data();
                ensure!(e.iter().all(|&v| v >= 0.0), "negative error at seed {seed}, t {t}, layer {l}");
                let half = c * h * w;
                ensure!(
                    (0..half).all(|i| e[i] == 0.0 || e[half + i] == 0.0),
                    "both halves positive at seed {seed}, t {t}, layer {l}"
                );
            }
            state = next;
            steps += 1;
        }
    }
    Ok(format!("{steps} random steps checked"))
}

/// Mixture weights form a distribution; a trained network reacts to actions.
fn gating() -> Outcome {
    let config = NetworkConfig::default();
    let params = NetworkParams::seeded(&config, 9).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let action = Grid::from_fn(&[2], |_| rng.random_range(-1.0..1.0));
        for lp in &params.layers {
            let mut tape = Tape::new();
            let bound = lp.gate.map("gate", &mut |_, g| tape.constant(g.clone()));
            let a = tape.constant(action.clone());
            let w = gate_weights(&mut tape, &bound, a, GatingMode::Mixture).map_err(|e| e.to_string())?;
            let w = tape.value(w);
            ensure!(w.data().iter().all(|&v| v >= 0.0), "negative weight {:?}", w.data());
            worst = worst.max((w.sum() - 1.0).abs());
        }
    }
    ensure!(worst <= 1e-6, "weights sum off by {worst:e}");

    let trained = trained_run()?;
    let ckpt = load_checkpoint(&trained.checkpoint).map_err(|e| e.to_string())?;
    let seq = data::load_dataset(&trained.data).map_err(|e| e.to_string())?;
    let mut state = NetworkState::zeros(&ckpt.network);
    for t in 0..100 {
        state = step(&ckpt.network, &ckpt.params, &state, &seq.frames[t], &seq.actions[t])
            .map_err(|e| e.to_string())?
            .0;
    }
    let frame = &seq.frames[100];
    let predict = |action: &Grid| -> Result<Grid, String> {
        let (_, trace, _) = step(&ckpt.network, &ckpt.params, &state, frame, action).map_err(|e| e.to_string())?;
        Ok(trace.layers[0].prediction.clone())
    };
    let left = predict(&Grid::from_vec(vec![-0.5, 0.5]))?;
    let right = predict(&Grid::from_vec(vec![0.5, -0.5]))?;
    let l2 = left.data().iter().zip(right.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    ensure!(l2 > 0.0, "trained predictions ignore the action");
    Ok(format!("1000 actions x 3 layers, max |sum - 1| {worst:.2e}; trained action effect L2 {l2:.3e}"))
}

struct TrainedRun {
    _dir: TempDir,
    data: PathBuf,
    checkpoint: PathBuf,
    seconds: f64,
    loss: Vec<f64>,
    mse: f64,
    baseline: f64,
    smoothness: Vec<f64>,
}

/// The default seed-0 run: `gen-data` then `train` with default flags.
fn trained_run() -> Result<&'static TrainedRun, String> {
    static RUN: OnceLock<Result<TrainedRun, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = TempDir::new().map_err(|e| e.to_string())?;
        let data = dir.path().join("loop.mtds");
        let checkpoint = dir.path().join("model.mtap");
        let out = cli(&["gen-data", "--out", path_str(&data)]);
        ensure!(out.status.success(), "gen-data failed: {}", String::from_utf8_lossy(&out.stderr));
        let started = Instant::now();
        let out = cli(&["train", "--data", path_str(&data), "--out", path_str(&checkpoint)]);
        let seconds = started.elapsed().as_secs_f64();
        ensure!(out.status.success(), "train failed: {}", String::from_utf8_lossy(&out.stderr));
        let csv = fs::read_to_string(dir.path().join("model.mtap.loss.csv")).map_err(|e| e.to_string())?;
        let loss = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).and_then(|v| v.parse().ok()).ok_or(format!("bad row {l}")))
            .collect::<Result<Vec<f64>, _>>()?;
        let ckpt = load_checkpoint(&checkpoint).map_err(|e| e.to_string())?;
        let seq = data::load_dataset(&data).map_err(|e| e.to_string())?;
        let metrics = training::evaluate(&ckpt.network, &ckpt.params, &seq).map_err(|e| e.to_string())?;
        Ok(TrainedRun {
            data,
            checkpoint,
            seconds,
            loss,
            mse: metrics.mse,
            baseline: metrics.baseline_mse,
            smoothness: metrics.smoothness,
            _dir: dir,
        })
    })
    .as_ref()
    .map_err(Clone::clone)
}

/// Beats the copy-last-frame baseline and lowers the loss.
fn learning() -> Outcome {
    let run = trained_run()?;
    ensure!(run.loss.len() == 200, "{} epochs recorded", run.loss.len());
    let first = run.loss[0];
    let trailing = run.loss[190..].iter().sum::<f64>() / 10.0;
    ensure!(run.mse < run.baseline, "mse {:.5} not below baseline {:.5}", run.mse, run.baseline);
    ensure!(trailing < first, "trailing loss {trailing:.5} not below first {first:.5}");
    ensure!(run.seconds <= 900.0, "training took {:.0}s", run.seconds);
    Ok(format!(
        "mse {:.5} < baseline {:.5}; trailing loss {trailing:.5} < first {first:.5}; {:.0}s",
        run.mse, run.baseline, run.seconds
    ))
}

/// The slowest layer changes least.
fn timescales() -> Outcome {
    let run = trained_run()?;
    let s = &run.smoothness;
    ensure!(s[2] < s[0], "S_2 {:.5} not below S_0 {:.5}", s[2], s[0]);
    Ok(format!("S = [{:.5}, {:.5}, {:.5}]", s[0], s[1], s[2]))
}

fn corrupt<T, E>(bytes: &[u8], decode: impl Fn(&[u8]) -> Result<T, E>) -> [Result<T, E>; 3] {
    let mut magic = bytes.to_vec();
    magic[0] ^= 0xff;
    let mut version = bytes.to_vec();
    version[4] = 2;
    [decode(&magic), decode(&version), decode(&bytes[..bytes.len() - 3])]
}

/// Bit-exact roundtrips and distinct corruption errors for both file formats.
fn persistence() -> Outcome {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let seq = data::simulate(&SimConfig { noise: 0.05, seed: 4, ..SimConfig::default() }, 60).map_err(|e| e.to_string())?;
    let path = dir.path().join("d.mtds");
    data::save_dataset(&seq, &path).map_err(|e| e.to_string())?;
    let back = data::load_dataset(&path).map_err(|e| e.to_string())?;
    let bits = |gs: &[Grid]| gs.iter().flat_map(|g| g.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    ensure!(bits(&back.frames) == bits(&seq.frames), "dataset frames differ");
    ensure!(bits(&back.actions) == bits(&seq.actions), "dataset actions differ");
    ensure!(back.dt.to_bits() == seq.dt.to_bits() && back.fallback == seq.fallback, "dataset metadata differs");
    let bytes = fs::read(&path).map_err(|e| e.to_string())?;
    match corrupt(&bytes, data::decode_dataset) {
        [Err(DataError::BadMagic(_)), Err(DataError::UnsupportedVersion(2)), Err(DataError::Truncated(_))] => {}
        other => return Err(format!("dataset corruption errors: {:?}", other.map(|r| r.err()))),
    }

    let network = NetworkConfig::default();
    let train = TrainConfig { epochs: 1, windows_per_epoch: 2, ..TrainConfig::default() };
    let params = NetworkParams::seeded(&network, 5).map_err(|e| e.to_string())?;
    let outcome = training::train(&network, &params, &seq, &train).map_err(|e| e.to_string())?;
    let ckpt = Checkpoint { network, train, params: outcome.params, adam: Some(outcome.adam) };
    let path = dir.path().join("c.mtap");
    save_checkpoint(&ckpt, &path).map_err(|e| e.to_string())?;
    let back = load_checkpoint(&path).map_err(|e| e.to_string())?;
    ensure!(back.network == ckpt.network && back.train == ckpt.train, "checkpoint config differs");
    let tensor_bits = |c: &Checkpoint| {
        let mut all: Vec<Vec<u64>> = c.params.named().iter().map(|(_, g)| g.data().iter().map(|v| v.to_bits()).collect()).collect();
        let adam = c.adam.as_ref().expect("optimizer state");
        all.extend(adam.first.iter().chain(&adam.second).map(|g| g.data().iter().map(|v| v.to_bits()).collect()));
        (all, adam.step)
    };
    ensure!(tensor_bits(&back) == tensor_bits(&ckpt), "checkpoint tensors differ");
    let bytes = encode_checkpoint(&ckpt).map_err(|e| e.to_string())?;
    ensure!(encode_checkpoint(&back).map_err(|e| e.to_string())? == bytes, "re-encoding changes bytes");
    match corrupt(&bytes, decode_checkpoint) {
        [Err(CheckpointError::BadMagic(_)), Err(CheckpointError::UnsupportedVersion(2)), Err(CheckpointError::Truncated(_))] => {}
        other => return Err(format!("checkpoint corruption errors: {:?}", other.map(|r| r.err()))),
    }
    Ok("dataset and checkpoint roundtrips bit-exact; magic/version/truncation errors distinct".into())
}

/// Files under `root`, relative, excluding manifests.
fn artifacts(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in fs::read_dir(dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else if !path.to_string_lossy().ends_with("manifest.json") {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

/// Every command reruns to byte-identical artifacts.
fn determinism() -> Outcome {
    let runs: Vec<TempDir> = (0..2).map(|_| TempDir::new().unwrap()).collect();
    for dir in &runs {
        let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
        let commands: Vec<Vec<String>> = vec![
            vec!["gen-data".into(), "--out".into(), p("d.mtds"), "--steps".into(), "80".into(), "--seed".into(), "7".into(), "--noise".into(), "0.02".into()],
            vec!["train".into(), "--data".into(), p("d.mtds"), "--out".into(), p("c.mtap"), "--epochs".into(), "2".into(), "--windows-per-epoch".into(), "3".into(), "--seed".into(), "7".into()],
            vec!["predict".into(), "--checkpoint".into(), p("c.mtap"), "--data".into(), p("d.mtds"), "--out".into(), p("predict")],
            vec!["rollout".into(), "--checkpoint".into(), p("c.mtap"), "--data".into(), p("d.mtds"), "--out".into(), p("rollout"), "--prime".into(), "30".into(), "--horizon".into(), "40".into()],
            vec!["dump-reps".into(), "--checkpoint".into(), p("c.mtap"), "--data".into(), p("d.mtds"), "--out".into(), p("reps")],
            vec!["gradcheck".into(), "--out".into(), p("gradcheck"), "--seed".into(), "7".into(), "--samples".into(), "2".into()],
        ];
        for args in &commands {
            let argv: Vec<&str> = args.iter().map(String::as_str).collect();
            let out = cli(&argv);
            ensure!(out.status.success(), "{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr));
        }
    }
    let (a, b) = (artifacts(runs[0].path()), artifacts(runs[1].path()));
    ensure!(a.len() == b.len(), "artifact counts differ");
    for ((pa, da), (pb, db)) in a.iter().zip(&b) {
        ensure!(pa == pb && da == db, "{} differs between runs", pa.display());
    }
    Ok(format!("6 commands, {} artifacts byte-identical", a.len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient correctness", gradients),
        ("oracle equivalence", oracle),
        ("leaky dynamics", leaky_dynamics),
        ("reduction invariant", reduction),
        ("error-unit invariants", error_units),
        ("gating", gating),
        ("end-to-end learning", learning),
        ("timescale signature", timescales),
        ("persistence", persistence),
        ("determinism", determinism),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let started = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail}) [{secs:.1}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({why}) [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        process::exit(1);
    }
}
