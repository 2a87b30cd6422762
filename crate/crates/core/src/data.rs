//! Synthetic line-tracer recordings, the dataset file and frame export.
//!
//! A differential-drive robot follows a dark line drawn on light ground. A
//! downward-looking camera sees a rectangular ground patch just ahead of the
//! axle and renders it at 8×12 pixels; row 0 is the far edge of the patch and
//! column 0 its left edge. The wheel velocities, normalized by the maximum
//! wheel speed, form the action stream.

use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::{Reader, Truncated, Writer};
use crate::numerics::Grid;

pub const DATASET_MAGIC: &[u8; 4] = b"MTDS";
pub const DATASET_VERSION: u32 = 1;
pub const FRAME_HEIGHT: usize = 8;
pub const FRAME_WIDTH: usize = 12;
pub const LINE_INTENSITY: f64 = 0.1;
pub const GROUND_INTENSITY: f64 = 0.9;
const SUBSAMPLES: usize = 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic: expected \"MTDS\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported dataset version {0} (expected 1)")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Truncated(#[from] Truncated),
    #[error("{what} value {value} at index {index} outside [{lo}, {hi}]")]
    Range {
        what: &'static str,
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("invalid sequence: {0}")]
    Invalid(String),
    #[error("invalid simulator configuration: {0}")]
    Config(String),
}

/// A recorded sensorimotor stream: frame `t` and the wheel velocities that
/// carried the robot into the pose it was taken from.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Grid>,
    pub actions: Vec<Grid>,
    pub dt: f64,
    /// Timesteps at which the controller had lost the line and drove straight.
    pub fallback: Vec<u32>,
}

impl Sequence {
    pub fn new(frames: Vec<Grid>, actions: Vec<Grid>, dt: f64, fallback: Vec<u32>) -> Result<Self, DataError> {
        let seq = Sequence {
            frames,
            actions,
            dt,
            fallback,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        let s = self.frames[0].shape();
        [s[0], s[1], s[2]]
    }

    pub fn action_dim(&self) -> usize {
        self.actions[0].len()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let t = self.frames.len();
        if t < 2 {
            return Err(DataError::Invalid(format!("need at least 2 timesteps, got {t}")));
        }
        if self.actions.len() != t {
            return Err(DataError::Invalid(format!("{t} frames but {} actions", self.actions.len())));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(DataError::Invalid(format!("dt must be positive, got {}", self.dt)));
        }
        let shape = self.frames[0].shape().to_vec();
        if shape.len() != 3 {
            return Err(DataError::Invalid(format!("frames must be C×H×W, got {shape:?}")));
        }
        let dim = self.actions[0].len();
        for (i, (f, a)) in self.frames.iter().zip(&self.actions).enumerate() {
            if f.shape() != shape.as_slice() {
                return Err(DataError::Invalid(format!("frame {i} has shape {:?}", f.shape())));
            }
            if a.rank() != 1 || a.len() != dim {
                return Err(DataError::Invalid(format!("action {i} has shape {:?}", a.shape())));
            }
            check_range("frame", f, 0.0, 1.0, i)?;
            check_range("action", a, -1.0, 1.0, i)?;
        }
        if let Some(&bad) = self.fallback.iter().find(|&&f| f as usize >= t) {
            return Err(DataError::Invalid(format!("fallback flag {bad} beyond {t} timesteps")));
        }
        Ok(())
    }
}

fn check_range(what: &'static str, g: &Grid, lo: f64, hi: f64, index: usize) -> Result<(), DataError> {
    match g.data().iter().find(|v| !(lo..=hi).contains(*v)) {
        Some(&value) => Err(DataError::Range {
            what,
            index,
            value,
            lo,
            hi,
        }),
        None => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrackShape {
    /// Rounded rectangle, counter-clockwise.
    Loop,
    /// Closed track mixing left and right bends.
    SCurve,
    /// A long straight line along +x.
    Straight,
}

#[derive(Clone, Debug, PartialEq)]
enum Segment {
    Line { start: [f64; 2], end: [f64; 2] },
    /// `sweep` is signed: positive turns left (counter-clockwise).
    Arc {
        center: [f64; 2],
        radius: f64,
        start_angle: f64,
        sweep: f64,
    },
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let d = sub(a, b);
    d[0].hypot(d[1])
}

fn polar(center: [f64; 2], radius: f64, angle: f64) -> [f64; 2] {
    [center[0] + radius * angle.cos(), center[1] + radius * angle.sin()]
}

impl Segment {
    fn nearest(&self, p: [f64; 2]) -> [f64; 2] {
        match *self {
            Segment::Line { start, end } => {
                let d = sub(end, start);
                let len2 = d[0] * d[0] + d[1] * d[1];
                let s = if len2 == 0.0 {
                    0.0
                } else {
                    let v = sub(p, start);
                    ((v[0] * d[0] + v[1] * d[1]) / len2).clamp(0.0, 1.0)
                };
                [start[0] + s * d[0], start[1] + s * d[1]]
            }
            Segment::Arc {
                center,
                radius,
                start_angle,
                sweep,
            } => {
                let v = sub(p, center);
                let angle = v[1].atan2(v[0]);
                // Offset of `angle` from the start, measured along the sweep.
                let along = (sweep.signum() * (angle - start_angle)).rem_euclid(std::f64::consts::TAU);
                if along <= sweep.abs() {
                    polar(center, radius, angle)
                } else {
                    let a = polar(center, radius, start_angle);
                    let b = polar(center, radius, start_angle + sweep);
                    if dist(p, a) <= dist(p, b) {
                        a
                    } else {
                        b
                    }
                }
            }
        }
    }
}

/// A track built from straight pieces and circular bends.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    segments: Vec<Segment>,
}

struct Turtle {
    pos: [f64; 2],
    heading: f64,
    segments: Vec<Segment>,
}

impl Turtle {
    fn new() -> Self {
        Turtle {
            pos: [0.0, 0.0],
            heading: 0.0,
            segments: Vec::new(),
        }
    }

    fn straight(mut self, length: f64) -> Self {
        let end = [
            self.pos[0] + length * self.heading.cos(),
            self.pos[1] + length * self.heading.sin(),
        ];
        self.segments.push(Segment::Line { start: self.pos, end });
        self.pos = end;
        self
    }

    /// Bends by `turn` radians (positive left) on a circle of `radius`.
    fn arc(mut self, radius: f64, turn: f64) -> Self {
        let side = turn.signum();
        let normal = self.heading + side * FRAC_PI_2;
        let center = polar(self.pos, radius, normal);
        let start_angle = normal + std::f64::consts::PI;
        self.segments.push(Segment::Arc {
            center,
            radius,
            start_angle,
            sweep: turn,
        });
        self.pos = polar(center, radius, start_angle + turn);
        self.heading += turn;
        self
    }
}

impl Track {
    /// Every stock track starts at the origin heading along +x.
    pub fn new(shape: TrackShape) -> Self {
        const R: f64 = 0.3;
        const Q: f64 = FRAC_PI_2;
        let t = Turtle::new();
        let t = match shape {
            TrackShape::Loop => t
                .straight(1.0)
                .arc(R, Q)
                .straight(0.4)
                .arc(R, Q)
                .straight(1.0)
                .arc(R, Q)
                .straight(0.4)
                .arc(R, Q),
            TrackShape::SCurve => t
                .straight(1.0)
                .arc(R, Q)
                .arc(R, Q)
                .arc(R, -Q)
                .arc(R, Q)
                .straight(0.4)
                .arc(R, Q)
                .straight(0.6)
                .arc(R, Q),
            TrackShape::Straight => Turtle {
                pos: [-1.0, 0.0],
                ..t
            }
            .straight(1.0e4),
        };
        Track { segments: t.segments }
    }

    /// Closest point of the track to `p`.
    pub fn nearest(&self, p: [f64; 2]) -> [f64; 2] {
        self.segments
            .iter()
            .map(|s| s.nearest(p))
            .min_by(|a, b| dist(p, *a).total_cmp(&dist(p, *b)))
            .expect("tracks are non-empty")
    }

    pub fn distance(&self, p: [f64; 2]) -> f64 {
        dist(p, self.nearest(p))
    }
}

/// Ground rectangle seen by the camera, in the robot frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorPatch {
    /// Distance from the axle to the near edge.
    pub near: f64,
    /// Extent along the heading; spans the frame's rows.
    pub depth: f64,
    /// Extent across the heading; spans the frame's columns.
    pub width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub track: TrackShape,
    pub line_half_width: f64,
    pub wheel_base: f64,
    pub max_wheel_speed: f64,
    /// Forward speed commanded when the line is centered.
    pub base_speed: f64,
    /// Angular velocity per metre of lateral line offset at the look-ahead
    /// point (the patch center).
    pub steering_gain: f64,
    pub sensor: SensorPatch,
    pub dt: f64,
    pub seed: u64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    /// Initial lateral displacement from the track start, positive to the left.
    pub start_offset: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            track: TrackShape::Loop,
            line_half_width: 0.015,
            wheel_base: 0.1,
            max_wheel_speed: 1.0,
            base_speed: 0.5,
            steering_gain: 30.0,
            sensor: SensorPatch {
                near: 0.04,
                depth: 0.16,
                width: 0.24,
            },
            dt: 0.02,
            seed: 0,
            noise: 0.0,
            start_offset: 0.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let positive = [
            ("line half-width", self.line_half_width),
            ("wheel base", self.wheel_base),
            ("max wheel speed", self.max_wheel_speed),
            ("sensor depth", self.sensor.depth),
            ("sensor width", self.sensor.width),
            ("dt", self.dt),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(DataError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("sensor near edge", self.sensor.near),
            ("steering gain", self.steering_gain),
            ("noise", self.noise),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DataError::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(self.base_speed.is_finite() && self.base_speed.abs() <= self.max_wheel_speed) {
            return Err(DataError::Config(format!(
                "base speed {} exceeds max wheel speed {}",
                self.base_speed, self.max_wheel_speed
            )));
        }
        if !self.start_offset.is_finite() {
            return Err(DataError::Config("start offset must be finite".into()));
        }
        Ok(())
    }

    fn look_ahead(&self) -> f64 {
        self.sensor.near + 0.5 * self.sensor.depth
    }

    /// Lateral distance beyond which the line counts as lost.
    fn capture_range(&self) -> f64 {
        0.5 * self.sensor.width
    }

    pub fn normalize(&self, wheels: [f64; 2]) -> Grid {
        Grid::from_vec(vec![wheels[0] / self.max_wheel_speed, wheels[1] / self.max_wheel_speed])
    }

    pub fn denormalize(&self, action: &Grid) -> [f64; 2] {
        [action.data()[0] * self.max_wheel_speed, action.data()[1] * self.max_wheel_speed]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    /// Robot-frame `(forward, left)` offset to world coordinates.
    fn to_world(self, forward: f64, left: f64) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [self.x + forward * c - left * s, self.y + forward * s + left * c]
    }

    /// World point to the robot's left-positive lateral coordinate.
    fn lateral(self, p: [f64; 2]) -> f64 {
        let (s, c) = self.heading.sin_cos();
        -(p[0] - self.x) * s + (p[1] - self.y) * c
    }

    /// One explicit Euler step of differential-drive kinematics.
    pub fn advance(self, wheels: [f64; 2], wheel_base: f64, dt: f64) -> Pose {
        let [vl, vr] = wheels;
        let v = 0.5 * (vl + vr);
        let omega = (vr - vl) / wheel_base;
        Pose {
            x: self.x + dt * v * self.heading.cos(),
            y: self.y + dt * v * self.heading.sin(),
            heading: self.heading + dt * omega,
        }
    }
}

/// Renders the camera frame seen from `pose`, without noise.
pub fn render(config: &SimConfig, track: &Track, pose: Pose) -> Grid {
    let patch = &config.sensor;
    let n = SUBSAMPLES as f64;
    let mut data = Vec::with_capacity(FRAME_HEIGHT * FRAME_WIDTH);
    for row in 0..FRAME_HEIGHT {
        for col in 0..FRAME_WIDTH {
            let mut covered = 0usize;
            for a in 0..SUBSAMPLES {
                let v = (row as f64 + (a as f64 + 0.5) / n) / FRAME_HEIGHT as f64;
                let forward = patch.near + patch.depth * (1.0 - v);
                for b in 0..SUBSAMPLES {
                    let u = (col as f64 + (b as f64 + 0.5) / n) / FRAME_WIDTH as f64;
                    let left = patch.width * (0.5 - u);
                    if track.distance(pose.to_world(forward, left)) <= config.line_half_width {
                        covered += 1;
                    }
                }
            }
            let coverage = covered as f64 / (n * n);
            data.push(LINE_INTENSITY * coverage + GROUND_INTENSITY * (1.0 - coverage));
        }
    }
    Grid::new(&[1, FRAME_HEIGHT, FRAME_WIDTH], data).expect("fixed frame shape")
}

/// Output of the line-following controller for one pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Command {
    /// Left and right wheel velocities.
    pub wheels: [f64; 2],
    /// Whether the line was out of range and the robot drove straight.
    pub fallback: bool,
}

/// Proportional steering on the lateral offset of the track point nearest
/// to the look-ahead point.
pub fn control(config: &SimConfig, track: &Track, pose: Pose) -> Command {
    let probe = pose.to_world(config.look_ahead(), 0.0);
    let target = track.nearest(probe);
    if dist(probe, target) > config.capture_range() {
        return Command {
            wheels: [config.base_speed; 2],
            fallback: true,
        };
    }
    let omega = config.steering_gain * pose.lateral(target);
    let half = 0.5 * omega * config.wheel_base;
    let clamp = |v: f64| v.clamp(-config.max_wheel_speed, config.max_wheel_speed);
    Command {
        wheels: [clamp(config.base_speed - half), clamp(config.base_speed + half)],
        fallback: false,
    }
}

/// Simulator internals for one timestep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimStep {
    pub pose: Pose,
    /// Wheel velocities recorded as this step's action.
    pub wheels: [f64; 2],
}

/// Runs the robot for `steps` timesteps and records what it sees and does.
pub fn simulate(config: &SimConfig, steps: usize) -> Result<Sequence, DataError> {
    simulate_with_trace(config, steps).map(|(seq, _)| seq)
}

/// [`simulate`], also returning the pose and wheel velocities of every step.
pub fn simulate_with_trace(config: &SimConfig, steps: usize) -> Result<(Sequence, Vec<SimStep>), DataError> {
    config.validate()?;
    if steps < 2 {
        return Err(DataError::Invalid(format!("need at least 2 steps, got {steps}")));
    }
    let track = Track::new(config.track);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.noise).map_err(|e| DataError::Config(e.to_string()))?;

    let mut pose = Pose {
        x: 0.0,
        y: config.start_offset,
        heading: 0.0,
    };
    let mut wheels = control(config, &track, pose).wheels;
    let mut frames = Vec::with_capacity(steps);
    let mut actions = Vec::with_capacity(steps);
    let mut trace = Vec::with_capacity(steps);
    let mut fallback = Vec::new();
    for t in 0..steps {
        let mut frame = render(config, &track, pose);
        if config.noise > 0.0 {
            for v in frame.data_mut() {
                *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        frames.push(frame);
        actions.push(config.normalize(wheels));
        trace.push(SimStep { pose, wheels });
        let cmd = control(config, &track, pose);
        if cmd.fallback {
            fallback.push(t as u32);
        }
        wheels = cmd.wheels;
        pose = pose.advance(wheels, config.wheel_base, config.dt);
    }
    Ok((Sequence::new(frames, actions, config.dt, fallback)?, trace))
}

/// Encodes a sequence in the dataset layout.
pub fn encode_dataset(seq: &Sequence) -> Result<Vec<u8>, DataError> {
    seq.validate()?;
    let count = u8::try_from(seq.fallback.len()).map_err(|_| {
        DataError::Invalid(format!(
            "{} fallback flags exceed the format's limit of 255",
            seq.fallback.len()
        ))
    })?;
    let [c, h, w] = seq.frame_shape();
    let mut out = Writer::new();
    out.bytes(DATASET_MAGIC);
    out.u32(DATASET_VERSION);
    for v in [seq.len(), c, h, w, seq.action_dim()] {
        out.u32(u32::try_from(v).map_err(|_| DataError::Invalid(format!("extent {v} exceeds u32")))?);
    }
    out.f64(seq.dt);
    out.u8(count);
    for f in &seq.fallback {
        out.u32(*f);
    }
    for f in &seq.frames {
        out.f64s(f.data());
    }
    for a in &seq.actions {
        out.f64s(a.data());
    }
    Ok(out.into_bytes())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Sequence, DataError> {
    let mut r = Reader::new(bytes);
    let magic: [u8; 4] = r.bytes(4)?.try_into().expect("four bytes");
    if &magic != DATASET_MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let t = r.u32()? as usize;
    let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let dim = r.u32()? as usize;
    let dt = r.f64()?;
    let count = r.u8()? as usize;
    let fallback = (0..count).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
    let frame_len = c * h * w;
    let frames = (0..t)
        .map(|_| Ok(Grid::new(&[c, h, w], r.f64s(frame_len)?).expect("extents match payload")))
        .collect::<Result<Vec<_>, DataError>>()?;
    let actions = (0..t)
        .map(|_| Ok(Grid::from_vec(r.f64s(dim)?)))
        .collect::<Result<Vec<_>, DataError>>()?;
    if r.remaining() != 0 {
        return Err(DataError::Invalid(format!(
            "{} trailing bytes after offset {}",
            r.remaining(),
            r.position()
        )));
    }
    Sequence::new(frames, actions, dt, fallback)
}

pub fn save_dataset(seq: &Sequence, path: &Path) -> Result<(), DataError> {
    fs::write(path, encode_dataset(seq)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Sequence, DataError> {
    decode_dataset(&fs::read(path)?)
}

/// Maps `[0, 1]` to a byte, rounding halves up.
pub fn to_byte(v: f64) -> u8 {
    (255.0 * v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Binary PGM (P5, maxval 255) of a single-channel grid with values in `[0, 1]`.
pub fn encode_pgm(image: &Grid) -> Result<Vec<u8>, DataError> {
    let (h, w) = match *image.shape() {
        [1, h, w] | [h, w] => (h, w),
        ref s => return Err(DataError::Invalid(format!("cannot write shape {s:?} as a grey image"))),
    };
    check_range("pixel", image, 0.0, 1.0, 0)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn write_pgm(image: &Grid, path: &Path) -> Result<(), DataError> {
    fs::write(path, encode_pgm(image)?)?;
    Ok(())
}

/// Writes `frame_00000.pgm`, `frame_00001.pgm`, … into `dir`, creating it if
/// needed.
pub fn export_frames(frames: &[Grid], dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    fs::create_dir_all(dir)?;
    frames
        .iter()
        .enumerate()
        .map(|(t, f)| {
            let path = dir.join(format!("frame_{t:05}.pgm"));
            write_pgm(f, &path)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight_config() -> SimConfig {
        SimConfig {
            track: TrackShape::Straight,
            ..SimConfig::default()
        }
    }

    #[test]
    fn turtle_tracks_close() {
        for shape in [TrackShape::Loop, TrackShape::SCurve] {
            let track = Track::new(shape);
            let first = match track.segments[0] {
                Segment::Line { start, .. } => start,
                _ => unreachable!(),
            };
            let last = match *track.segments.last().unwrap() {
                Segment::Arc {
                    center,
                    radius,
                    start_angle,
                    sweep,
                } => polar(center, radius, start_angle + sweep),
                _ => unreachable!(),
            };
            assert!(dist(first, last) < 1e-12, "{shape:?} ends at {last:?}");
        }
    }

    #[test]
    fn arc_nearest_point() {
        let track = Track {
            segments: vec![Segment::Arc {
                center: [0.0, 0.0],
                radius: 1.0,
                start_angle: 0.0,
                sweep: FRAC_PI_2,
            }],
        };
        let p = track.nearest([2.0, 2.0]);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!(dist(p, [s, s]) < 1e-12);
        // Outside the swept range the nearer endpoint wins.
        assert!(dist(track.nearest([1.0, -3.0]), [1.0, 0.0]) < 1e-12);
        assert!(dist(track.nearest([-3.0, 0.5]), [0.0, 1.0]) < 1e-12);
    }

    #[test]
    fn right_bend_sweeps_clockwise() {
        let t = Turtle::new().arc(0.5, -FRAC_PI_2);
        assert!(dist(t.pos, [0.5, -0.5]) < 1e-12);
        let track = Track { segments: t.segments };
        assert!(track.distance([0.5 * FRAC_PI_2.cos(), -0.5]) > 0.0);
        assert!(track.distance([0.0, 0.0]) < 1e-12);
    }

    #[test]
    fn centered_on_straight_track_drives_straight() {
        let seq = simulate(&straight_config(), 50).unwrap();
        for a in &seq.actions {
            assert_eq!(a.data()[0], a.data()[1]);
        }
        assert!(seq.fallback.is_empty());
        // A centered straight line renders identically every step.
        assert!(seq.frames.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn frames_show_the_line_in_the_middle_columns() {
        let seq = simulate(&straight_config(), 2).unwrap();
        let f = &seq.frames[0];
        for row in 0..FRAME_HEIGHT {
            assert!(f.at3(0, row, 5) < 0.5 && f.at3(0, row, 6) < 0.5);
            assert_eq!(f.at3(0, row, 0), GROUND_INTENSITY);
            assert_eq!(f.at3(0, row, 11), GROUND_INTENSITY);
        }
    }

    #[test]
    fn losing_the_line_falls_back_to_straight_driving() {
        let config = SimConfig {
            start_offset: 0.5,
            ..straight_config()
        };
        let seq = simulate(&config, 5).unwrap();
        assert_eq!(seq.fallback, vec![0, 1, 2, 3, 4]);
        let base = config.base_speed / config.max_wheel_speed;
        assert_eq!(seq.actions[1].data(), &[base, base]);
        assert!(seq.frames[0].data().iter().all(|&v| v == GROUND_INTENSITY));
    }

    #[test]
    fn noisy_frames_stay_in_range_and_are_seeded() {
        let config = SimConfig {
            noise: 0.3,
            seed: 4,
            ..SimConfig::default()
        };
        let a = simulate(&config, 20).unwrap();
        let b = simulate(&config, 20).unwrap();
        assert_eq!(a, b);
        let c = simulate(&SimConfig { seed: 5, ..config }, 20).unwrap();
        assert_ne!(a.frames, c.frames);
        assert!(a.frames.iter().all(|f| f.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn stays_on_both_stock_tracks() {
        for track in [TrackShape::Loop, TrackShape::SCurve] {
            let config = SimConfig {
                track,
                ..SimConfig::default()
            };
            let (seq, trace) = simulate_with_trace(&config, 1000).unwrap();
            assert!(seq.fallback.is_empty(), "{track:?}");
            let t = Track::new(track);
            let worst = trace
                .iter()
                .map(|s| t.distance([s.pose.x, s.pose.y]))
                .fold(0.0, f64::max);
            // The look-ahead controller cuts bends by a few centimetres.
            assert!(worst < 0.08, "{track:?} strays {worst}");
        }
    }

    #[test]
    fn too_few_steps_rejected() {
        assert!(matches!(simulate(&SimConfig::default(), 1), Err(DataError::Invalid(_))));
        let bad = SimConfig {
            wheel_base: 0.0,
            ..SimConfig::default()
        };
        assert!(matches!(simulate(&bad, 10), Err(DataError::Config(_))));
    }

    #[test]
    fn sequence_validation() {
        let f = Grid::zeros(&[1, 2, 2]);
        let a = Grid::zeros(&[2]);
        assert!(Sequence::new(vec![f.clone()], vec![a.clone()], 0.02, vec![]).is_err());
        assert!(Sequence::new(vec![f.clone(), f.clone()], vec![a.clone()], 0.02, vec![]).is_err());
        let hot = Grid::filled(&[1, 2, 2], 1.5);
        assert!(matches!(
            Sequence::new(vec![f.clone(), hot], vec![a.clone(), a.clone()], 0.02, vec![]),
            Err(DataError::Range { what: "frame", index: 1, .. })
        ));
        assert!(Sequence::new(vec![f.clone(), f.clone()], vec![a.clone(), a.clone()], 0.02, vec![2]).is_err());
        assert!(Sequence::new(vec![f.clone(), f], vec![a.clone(), a], 0.02, vec![1]).is_ok());
    }

    #[test]
    fn dataset_layout() {
        let f0 = Grid::new(&[1, 1, 2], vec![0.25, 0.5]).unwrap();
        let f1 = Grid::new(&[1, 1, 2], vec![1.0, 0.0]).unwrap();
        let seq = Sequence::new(
            vec![f0, f1],
            vec![Grid::from_vec(vec![-1.0]), Grid::from_vec(vec![0.5])],
            0.02,
            vec![1],
        )
        .unwrap();
        let bytes = encode_dataset(&seq).unwrap();
        assert_eq!(&bytes[..4], b"MTDS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let header: Vec<u32> = bytes[8..28]
            .chunks(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(header, vec![2, 1, 1, 2, 1]);
        assert_eq!(f64::from_le_bytes(bytes[28..36].try_into().unwrap()), 0.02);
        assert_eq!(bytes[36], 1);
        assert_eq!(u32::from_le_bytes(bytes[37..41].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 41 + 4 * 8 + 2 * 8);
        assert_eq!(f64::from_le_bytes(bytes[41..49].try_into().unwrap()), 0.25);
        assert_eq!(decode_dataset(&bytes).unwrap(), seq);
    }

    #[test]
    fn dataset_errors_are_distinct() {
        let seq = simulate(&SimConfig::default(), 3).unwrap();
        let bytes = encode_dataset(&seq).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(DataError::BadMagic(_))));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_dataset(&bad), Err(DataError::UnsupportedVersion(2))));

        // Header claims three frames, payload holds two and a bit.
        let cut = bytes.len() - 3 * 2 * 8 - 96 * 8 + 5;
        assert!(matches!(decode_dataset(&bytes[..cut]), Err(DataError::Truncated(_))));
        assert!(matches!(decode_dataset(&bytes[..2]), Err(DataError::Truncated(_))));

        let mut bad = bytes.clone();
        let offset = 4 + 4 + 5 * 4 + 8 + 1;
        bad[offset..offset + 8].copy_from_slice(&1.5f64.to_le_bytes());
        assert!(matches!(decode_dataset(&bad), Err(DataError::Range { .. })));

        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_dataset(&long), Err(DataError::Invalid(_))));
    }

    #[test]
    fn pgm_bytes() {
        assert_eq!(to_byte(0.5), 128);
        assert_eq!(to_byte(0.0), 0);
        assert_eq!(to_byte(1.0), 255);
        let img = Grid::new(&[1, 2, 3], vec![0.0, 0.5, 1.0, 0.2, 0.4, 0.6]).unwrap();
        let bytes = encode_pgm(&img).unwrap();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 128, 255, 51, 102, 153]);
        assert!(encode_pgm(&Grid::filled(&[1, 1, 1], 1.01)).is_err());
        assert!(encode_pgm(&Grid::zeros(&[2, 1, 1])).is_err());
    }

    #[test]
    fn export_names_frames() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("frames");
        let paths = export_frames(&[Grid::zeros(&[1, 2, 2]), Grid::filled(&[1, 2, 2], 1.0)], &out).unwrap();
        assert_eq!(paths[1].file_name().unwrap(), "frame_00001.pgm");
        let bytes = fs::read(&paths[1]).unwrap();
        assert!(bytes.ends_with(&[255; 4]));
        let bytes = fs::read(&paths[0]).unwrap();
        assert!(bytes.ends_with(&[0; 4]));
    }
}
