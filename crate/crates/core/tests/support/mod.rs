//! Shared helpers for the integration tests, including a straight-line
//! reference implementation of one network step that uses plain nested
//! loops and no tape.

#![allow(dead_code)]

use mta_prednet::cells::GatingMode;
use mta_prednet::network::{NetworkConfig, NetworkParams, NetworkState};
use mta_prednet::numerics::Grid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Channel-major feature map.
#[derive(Clone, Debug)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Map { c, h, w, v: vec![0.0; c * h * w] }
    }

    pub fn from_grid(g: &Grid) -> Self {
        let s = g.shape();
        Map { c: s[0], h: s[1], w: s[2], v: g.data().to_vec() }
    }

    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Map {
        Map { v: self.v.iter().map(|&x| f(x)).collect(), ..self.clone() }
    }

    fn zip(&self, o: &Map, f: impl Fn(f64, f64) -> f64) -> Map {
        assert_eq!((self.c, self.h, self.w), (o.c, o.h, o.w));
        Map { v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect(), ..self.clone() }
    }

    fn stack(parts: &[&Map]) -> Map {
        let (h, w) = (parts[0].h, parts[0].w);
        let mut v = Vec::new();
        for p in parts {
            assert_eq!((p.h, p.w), (h, w));
            v.extend_from_slice(&p.v);
        }
        Map { c: parts.iter().map(|p| p.c).sum(), h, w, v }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Zero-padded "same" cross-correlation, summed term by term.
fn conv(x: &Map, kernel: &Grid, bias: &Grid) -> Map {
    let ks = kernel.shape();
    let (cout, cin, k) = (ks[0], ks[1], ks[2]);
    assert_eq!(cin, x.c);
    let pad = (k / 2) as isize;
    let kv = kernel.data();
    let mut out = Map::zeros(cout, x.h, x.w);
    for o in 0..cout {
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut s = bias.data()[o];
                for i in 0..cin {
                    for dy in 0..k {
                        for dx in 0..k {
                            let iy = y as isize + dy as isize - pad;
                            let ix = xx as isize + dx as isize - pad;
                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                continue;
                            }
                            s += kv[((o * cin + i) * k + dy) * k + dx] * x.at(i, iy as usize, ix as usize);
                        }
                    }
                }
                out.v[(o * x.h + y) * x.w + xx] = s;
            }
        }
    }
    out
}

fn upsample(x: &Map) -> Map {
    let mut out = Map::zeros(x.c, 2 * x.h, 2 * x.w);
    for c in 0..x.c {
        for y in 0..2 * x.h {
            for xx in 0..2 * x.w {
                out.v[(c * 2 * x.h + y) * 2 * x.w + xx] = x.at(c, y / 2, xx / 2);
            }
        }
    }
    out
}

fn pool(x: &Map) -> Map {
    let mut out = Map::zeros(x.c, x.h / 2, x.w / 2);
    for c in 0..x.c {
        for y in 0..x.h / 2 {
            for xx in 0..x.w / 2 {
                let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(a, b)| x.at(c, 2 * y + a, 2 * xx + b))
                    .fold(f64::NEG_INFINITY, f64::max);
                out.v[(c * (x.h / 2) + y) * (x.w / 2) + xx] = m;
            }
        }
    }
    out
}

fn dense(w: &Grid, b: &Grid, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    (0..rows)
        .map(|r| b.data()[r] + (0..cols).map(|c| w.data()[r * cols + c] * x[c]).sum::<f64>())
        .collect()
}

/// Reference state of one layer after a step.
#[derive(Clone, Debug)]
pub struct RefLayer {
    pub cells: Vec<Map>,
    pub blended: Vec<Map>,
    pub representation: Map,
    pub prediction: Map,
    pub target: Map,
    pub error: Map,
}

/// One network step written out directly from the model equations.
pub fn reference_step(
    config: &NetworkConfig,
    params: &NetworkParams,
    prev: &NetworkState,
    frame: &Grid,
    action: &Grid,
) -> Vec<RefLayer> {
    let n = config.taus.len();
    let mut reps: Vec<Option<Map>> = vec![None; n];
    let mut cells = vec![Vec::new(); n];
    let mut blends = vec![Vec::new(); n];

    // Representations, top layer first.
    for l in (0..n).rev() {
        let lp = &params.layers[l];
        let ps = &prev.layers[l];
        let e_prev = Map::from_grid(&ps.error);
        let lstm_in = match &lp.topdown {
            Some(td) => {
                let above = reps[l + 1].as_ref().unwrap();
                let td = conv(&upsample(above), &td.kernel, &td.bias);
                Map::stack(&[&e_prev, &td])
            }
            None => e_prev,
        };
        let r_prev = Map::from_grid(&ps.representation);
        let x = Map::stack(&[&lstm_in, &r_prev]);
        let tau = config.taus[l];
        for (u, us) in lp.units.iter().zip(&ps.units) {
            let i = conv(&x, &u.input_gate.kernel, &u.input_gate.bias).map(sigmoid);
            let f = conv(&x, &u.forget_gate.kernel, &u.forget_gate.bias).map(sigmoid);
            let o = conv(&x, &u.output_gate.kernel, &u.output_gate.bias).map(sigmoid);
            let g = conv(&x, &u.candidate.kernel, &u.candidate.bias).map(f64::tanh);
            let c_prev = Map::from_grid(&us.lstm.cell);
            let c = f.zip(&c_prev, |a, b| a * b).zip(&i.zip(&g, |a, b| a * b), |a, b| a + b);
            let h = o.zip(&c.map(f64::tanh), |a, b| a * b);
            let old = Map::from_grid(&us.blended);
            let blended = old.zip(&h, |p, q| (1.0 - 1.0 / tau) * p + (1.0 / tau) * q);
            cells[l].push(c);
            blends[l].push(blended);
        }
        let hidden: Vec<f64> = dense(&lp.gate.hidden.weight, &lp.gate.hidden.bias, action.data())
            .into_iter()
            .map(f64::tanh)
            .collect();
        let logits = dense(&lp.gate.output.weight, &lp.gate.output.bias, &hidden);
        let rep = match config.gating {
            GatingMode::Mixture => {
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
                let weights: Vec<f64> = logits.iter().map(|v| (v - m).exp() / z).collect();
                let b0 = &blends[l][0];
                let mut r = Map::zeros(b0.c, b0.h, b0.w);
                for (wk, bk) in weights.iter().zip(&blends[l]) {
                    r = r.zip(bk, |a, b| a + wk * b);
                }
                r
            }
            GatingMode::ChannelGate => {
                let b0 = &blends[l][0];
                let per = b0.h * b0.w;
                let mut r = b0.clone();
                for (idx, v) in r.v.iter_mut().enumerate() {
                    *v *= sigmoid(logits[idx / per]);
                }
                r
            }
        };
        reps[l] = Some(rep);
    }

    // Predictions, targets and errors, bottom layer first.
    let mut out: Vec<RefLayer> = Vec::with_capacity(n);
    for l in 0..n {
        let lp = &params.layers[l];
        let rep = reps[l].take().unwrap();
        let pre = conv(&rep, &lp.predict.kernel, &lp.predict.bias);
        let prediction = if l == 0 { pre.map(|v| v.clamp(0.0, 1.0)) } else { pre.map(|v| v.max(0.0)) };
        let target = if l == 0 {
            Map::from_grid(frame)
        } else {
            let ff = lp.feedforward.as_ref().unwrap();
            pool(&conv(&out[l - 1].error, &ff.kernel, &ff.bias).map(|v| v.max(0.0)))
        };
        let up = target.zip(&prediction, |x, p| (x - p).max(0.0));
        let down = prediction.zip(&target, |p, x| (p - x).max(0.0));
        out.push(RefLayer {
            cells: std::mem::take(&mut cells[l]),
            blended: std::mem::take(&mut blends[l]),
            representation: rep,
            error: Map::stack(&[&up, &down]),
            prediction,
            target,
        });
    }
    out
}

pub fn max_diff(a: &Map, b: &Grid) -> f64 {
    assert_eq!(b.shape(), [a.c, a.h, a.w]);
    a.v.iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random frames in `[0, 1]` and actions in `[-1, 1]`.
pub fn random_stream(config: &NetworkConfig, seed: u64, steps: usize) -> (Vec<Grid>, Vec<Grid>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = (0..steps)
        .map(|_| Grid::from_fn(&config.input_shape, |_| rng.random_range(0.0..1.0)))
        .collect();
    let actions = (0..steps)
        .map(|_| Grid::from_fn(&[config.action_dim], |_| rng.random_range(-1.0..1.0)))
        .collect();
    (frames, actions)
}
