//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Every operation appends a node holding its value and the inputs it was
//! computed from. Nodes only ever reference earlier nodes, so the tape order
//! is a topological order and [`Tape::backward`] is a single reverse sweep.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use super::ops;
use super::{Grid, NumericsError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Parameter,
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        padding: usize,
    },
    Upsample2(Var),
    Maxpool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    ReluUnit(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Blend {
        keep: f64,
        prev: Var,
        take: f64,
        fresh: Var,
    },
    Concat(Vec<Var>),
    Affine {
        matrix: Var,
        bias: Var,
        input: Var,
    },
    Softmax(Var),
    WeightedSum {
        weights: Var,
        units: Vec<Var>,
    },
    ChannelScale {
        gains: Var,
        input: Var,
    },
    Mean(Var),
    Sum(Var),
    Scale(Var, f64),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Parameter => vec![],
            Op::Conv2d {
                input,
                kernels,
                bias,
                ..
            } => vec![*input, *kernels, *bias],
            Op::Upsample2(a)
            | Op::Relu(a)
            | Op::ReluUnit(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Softmax(a)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::Scale(a, _) => vec![*a],
            Op::Maxpool2 { input, .. } => vec![*input],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Hadamard(a, b) => vec![*a, *b],
            Op::Blend { prev, fresh, .. } => vec![*prev, *fresh],
            Op::Concat(parts) => parts.clone(),
            Op::Affine {
                matrix,
                bias,
                input,
            } => vec![*matrix, *bias, *input],
            Op::WeightedSum { weights, units } => {
                let mut v = vec![*weights];
                v.extend(units);
                v
            }
            Op::ChannelScale { gains, input } => vec![*gains, *input],
        }
    }
}

/// A value on the tape together with its provenance and, for parameters,
/// the persistent gradient accumulator.
#[derive(Debug)]
pub struct DifferentiableNode {
    value: Grid,
    grad: Option<Grid>,
    op: Op,
    requires_grad: bool,
}

impl DifferentiableNode {
    pub fn value(&self) -> &Grid {
        &self.value
    }

    /// Accumulated gradient; only parameter nodes keep one.
    pub fn grad(&self) -> Option<&Grid> {
        self.grad.as_ref()
    }

    pub fn is_parameter(&self) -> bool {
        matches!(self.op, Op::Parameter)
    }

    /// Tape positions of the operands this node was computed from.
    pub fn inputs(&self) -> Vec<Var> {
        self.op.inputs()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<DifferentiableNode>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &DifferentiableNode {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Grid {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Grid> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Records a value that gradients do not flow into.
    pub fn constant(&mut self, value: Grid) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Records a trainable leaf with a zeroed gradient accumulator.
    pub fn parameter(&mut self, value: Grid) -> Var {
        let v = self.push(value, Op::Parameter, true);
        let shape = self.nodes[v.0].value.shape().to_vec();
        self.nodes[v.0].grad = Some(Grid::zeros(&shape));
        v
    }

    fn push(&mut self, value: Grid, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(DifferentiableNode {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Grid, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Var,
        padding: usize,
    ) -> Result<Var, NumericsError> {
        let out = ops::conv2d(
            self.value(input),
            self.value(kernels),
            self.value(bias),
            padding,
        )?;
        Ok(self.derived(
            out,
            Op::Conv2d {
                input,
                kernels,
                bias,
                padding,
            },
        ))
    }

    pub fn upsample2(&mut self, input: Var) -> Result<Var, NumericsError> {
        let out = ops::upsample2(self.value(input))?;
        Ok(self.derived(out, Op::Upsample2(input)))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var, NumericsError> {
        let (out, argmax) = ops::maxpool2_with_argmax(self.value(input))?;
        Ok(self.derived(out, Op::Maxpool2 { input, argmax }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        self.derived(out, Op::Relu(input))
    }

    pub fn relu_unit(&mut self, input: Var) -> Var {
        let out = ops::relu_unit(self.value(input));
        self.derived(out, Op::ReluUnit(input))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = ops::sigmoid(self.value(input));
        self.derived(out, Op::Sigmoid(input))
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        let out = ops::tanh(self.value(input));
        self.derived(out, Op::Tanh(input))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = ops::sub(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = ops::hadamard(self.value(a), self.value(b))?;
        Ok(self.derived(out, Op::Hadamard(a, b)))
    }

    /// `keep * prev + take * fresh`.
    pub fn blend(&mut self, keep: f64, prev: Var, take: f64, fresh: Var) -> Result<Var, NumericsError> {
        let out = self
            .value(prev)
            .zip_map(self.value(fresh), "blend", |p, f| keep * p + take * f)?;
        Ok(self.derived(
            out,
            Op::Blend {
                keep,
                prev,
                take,
                fresh,
            },
        ))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = self.value(input).map(|v| factor * v);
        self.derived(out, Op::Scale(input, factor))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let grids: Vec<&Grid> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat_channels(&grids)?;
        Ok(self.derived(out, Op::Concat(parts.to_vec())))
    }

    pub fn affine(&mut self, matrix: Var, bias: Var, input: Var) -> Result<Var, NumericsError> {
        let out = ops::affine(self.value(matrix), self.value(bias), self.value(input))?;
        Ok(self.derived(
            out,
            Op::Affine {
                matrix,
                bias,
                input,
            },
        ))
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var, NumericsError> {
        let out = ops::softmax(self.value(input))?;
        Ok(self.derived(out, Op::Softmax(input)))
    }

    /// `Σ_k weights[k] · units[k]`.
    pub fn weighted_sum(&mut self, weights: Var, units: &[Var]) -> Result<Var, NumericsError> {
        let w = self.value(weights);
        if w.rank() != 1 || w.len() != units.len() || units.is_empty() {
            return Err(NumericsError::ShapeMismatch {
                op: "weighted_sum",
                detail: format!("{} weights for {} units", w.len(), units.len()),
            });
        }
        let mut out = Grid::zeros(self.value(units[0]).shape());
        for (k, &u) in units.iter().enumerate() {
            let g = self.value(u);
            out.expect_same_shape(g, "weighted_sum")?;
            out.add_scaled(g, w.data()[k]);
        }
        Ok(self.derived(
            out,
            Op::WeightedSum {
                weights,
                units: units.to_vec(),
            },
        ))
    }

    /// Multiplies channel `c` of a rank-3 grid by `gains[c]`.
    pub fn channel_scale(&mut self, gains: Var, input: Var) -> Result<Var, NumericsError> {
        let g = self.value(gains);
        let x = self.value(input);
        let (c, h, w) = x.chw()?;
        if g.shape() != [c] {
            return Err(NumericsError::ShapeMismatch {
                op: "channel_scale",
                detail: format!("{} gains for {c} channels", g.len()),
            });
        }
        let plane = h * w;
        let mut out = x.clone();
        for (ch, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let gain = g.data()[ch];
            chunk.iter_mut().for_each(|v| *v *= gain);
        }
        Ok(self.derived(out, Op::ChannelScale { gains, input }))
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let out = Grid::scalar(self.value(input).mean());
        self.derived(out, Op::Mean(input))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Grid::scalar(self.value(input).sum());
        self.derived(out, Op::Sum(input))
    }

    /// Clears every parameter's gradient accumulator.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.data_mut().fill(0.0);
            }
        }
    }

    /// Propagates d`loss`/d(node) back through the tape and adds the result
    /// into every reachable parameter's accumulator.
    ///
    /// Returns the accumulated gradients keyed by parameter handle.
    pub fn backward(&mut self, loss: Var) -> Result<BTreeMap<Var, Grid>, NumericsError> {
        if self.value(loss).shape() != [1] {
            return Err(NumericsError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut adjoint: Vec<Option<Grid>> = Vec::new();
        adjoint.resize_with(loss.0 + 1, || None);
        adjoint[loss.0] = Some(Grid::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adjoint[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Parameter = self.nodes[idx].op {
                self.nodes[idx]
                    .grad
                    .as_mut()
                    .expect("parameters carry an accumulator")
                    .add_scaled(&g, 1.0);
                continue;
            }
            for (input, contribution) in self.input_adjoints(idx, &g) {
                match &mut adjoint[input.0] {
                    Some(acc) => acc.add_scaled(&contribution, 1.0),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        Ok(self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.grad.as_ref().map(|g| (Var(i), g.clone())))
            .collect())
    }

    /// Adjoint contributions of node `idx` to each input that needs one.
    fn input_adjoints(&self, idx: usize, g: &Grid) -> Vec<(Var, Grid)> {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &node.value;
        let mut out = Vec::new();
        match &node.op {
            Op::Constant | Op::Parameter => {}
            Op::Conv2d {
                input,
                kernels,
                bias,
                padding,
            } => {
                let grads = ops::conv2d_backward(
                    val(*input),
                    val(*kernels),
                    *padding,
                    g,
                    [wants(*input), wants(*kernels), wants(*bias)],
                );
                out.extend(grads.input.map(|gi| (*input, gi)));
                out.extend(grads.kernels.map(|gk| (*kernels, gk)));
                out.extend(grads.bias.map(|gb| (*bias, gb)));
            }
            Op::Upsample2(a) => out.push((*a, ops::upsample2_backward(g))),
            Op::Maxpool2 { input, argmax } => {
                let mut gi = Grid::zeros(val(*input).shape());
                for (o, &src) in argmax.iter().enumerate() {
                    gi.data_mut()[src] += g.data()[o];
                }
                out.push((*input, gi));
            }
            Op::Relu(a) => {
                let gi = val(*a)
                    .zip_map(g, "relu", |x, d| if x > 0.0 { d } else { 0.0 })
                    .expect("same shape");
                out.push((*a, gi));
            }
            Op::ReluUnit(a) => {
                let gi = val(*a)
                    .zip_map(g, "relu_unit", |x, d| if x > 0.0 && x < 1.0 { d } else { 0.0 })
                    .expect("same shape");
                out.push((*a, gi));
            }
            Op::Sigmoid(a) => {
                let gi = y.zip_map(g, "sigmoid", |s, d| d * s * (1.0 - s)).expect("same shape");
                out.push((*a, gi));
            }
            Op::Tanh(a) => {
                let gi = y.zip_map(g, "tanh", |t, d| d * (1.0 - t * t)).expect("same shape");
                out.push((*a, gi));
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|d| -d)));
            }
            Op::Hadamard(a, b) => {
                if wants(*a) {
                    out.push((*a, ops::hadamard(g, val(*b)).expect("same shape")));
                }
                if wants(*b) {
                    out.push((*b, ops::hadamard(g, val(*a)).expect("same shape")));
                }
            }
            Op::Blend {
                keep,
                prev,
                take,
                fresh,
            } => {
                out.push((*prev, g.map(|d| keep * d)));
                out.push((*fresh, g.map(|d| take * d)));
            }
            Op::Scale(a, factor) => out.push((*a, g.map(|d| factor * d))),
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let shape = val(p).shape();
                    let n = val(p).len();
                    if wants(p) {
                        let slice = g.data()[offset..offset + n].to_vec();
                        out.push((p, Grid::new(shape, slice).expect("part shape")));
                    }
                    offset += n;
                }
            }
            Op::Affine {
                matrix,
                bias,
                input,
            } => {
                let m = val(*matrix);
                let x = val(*input);
                let (rows, cols) = (m.shape()[0], m.shape()[1]);
                if wants(*matrix) {
                    let gm = Grid::from_fn(&[rows, cols], |i| g.data()[i / cols] * x.data()[i % cols]);
                    out.push((*matrix, gm));
                }
                out.push((*bias, g.clone()));
                if wants(*input) {
                    let gx = Grid::from_fn(&[cols], |c| {
                        (0..rows).map(|r| m.data()[r * cols + c] * g.data()[r]).sum()
                    });
                    out.push((*input, gx));
                }
            }
            Op::Softmax(a) => {
                let dot: f64 = y.data().iter().zip(g.data()).map(|(s, d)| s * d).sum();
                let gi = y.zip_map(g, "softmax", |s, d| s * (d - dot)).expect("same shape");
                out.push((*a, gi));
            }
            Op::WeightedSum { weights, units } => {
                let w = val(*weights);
                if wants(*weights) {
                    let gw = units
                        .iter()
                        .map(|&u| val(u).data().iter().zip(g.data()).map(|(a, b)| a * b).sum())
                        .collect();
                    out.push((*weights, Grid::from_vec(gw)));
                }
                for (k, &u) in units.iter().enumerate() {
                    if wants(u) {
                        let wk = w.data()[k];
                        out.push((u, g.map(|d| wk * d)));
                    }
                }
            }
            Op::ChannelScale { gains, input } => {
                let x = val(*input);
                let gains_v = val(*gains);
                let plane = x.len() / gains_v.len();
                if wants(*gains) {
                    let gg = x
                        .data()
                        .chunks(plane)
                        .zip(g.data().chunks(plane))
                        .map(|(xs, ds)| xs.iter().zip(ds).map(|(a, b)| a * b).sum())
                        .collect();
                    out.push((*gains, Grid::from_vec(gg)));
                }
                if wants(*input) {
                    let mut gi = g.clone();
                    for (ch, chunk) in gi.data_mut().chunks_mut(plane).enumerate() {
                        let gain = gains_v.data()[ch];
                        chunk.iter_mut().for_each(|v| *v *= gain);
                    }
                    out.push((*input, gi));
                }
            }
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                out.push((*a, Grid::filled(val(*a).shape(), g.item() / n)));
            }
            Op::Sum(a) => out.push((*a, Grid::filled(val(*a).shape(), g.item()))),
        }
        out.retain(|(v, _)| wants(*v));
        out
    }

    /// Walks back from `output` through the purely linear reduction ops
    /// (sum, mean, scale, add, sub) and returns the first nonlinear nodes
    /// reached, each with the constant factor by which every one of its
    /// elements enters `output`.
    pub fn linear_tail(&self, output: Var) -> BTreeMap<Var, f64> {
        let mut pending: BTreeMap<Var, f64> = BTreeMap::new();
        let mut frontier = BTreeMap::new();
        pending.insert(output, 1.0);
        // Highest index first, so every node's coefficient is complete
        // before it is expanded.
        while let Some((v, c)) = pending.pop_last() {
            let node = &self.nodes[v.0];
            let scalar_in = |a: Var| self.nodes[a.0].value.len() == node.value.len();
            let mut push = |a: Var, k: f64| *pending.entry(a).or_insert(0.0) += k;
            match &node.op {
                Op::Sum(a) => push(*a, c),
                Op::Mean(a) => push(*a, c / self.nodes[a.0].value.len() as f64),
                Op::Scale(a, f) => push(*a, c * f),
                Op::Add(a, b) if scalar_in(*a) && node.value.len() == 1 => {
                    push(*a, c);
                    push(*b, c);
                }
                Op::Sub(a, b) if scalar_in(*a) && node.value.len() == 1 => {
                    push(*a, c);
                    push(*b, -c);
                }
                _ => *frontier.entry(v).or_insert(0.0) += c,
            }
        }
        frontier
    }

    /// Fingerprint of every piecewise-linear branch taken on this tape: the
    /// sign pattern of relu inputs, the clamp regime of unit relus and every
    /// maxpool argmax. Two evaluations with equal fingerprints lie on the same
    /// smooth piece of the loss.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for &v in self.nodes[a.0].value.data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::ReluUnit(a) => {
                    for &v in self.nodes[a.0].value.data() {
                        ((v > 0.0) as u8 + (v >= 1.0) as u8).hash(&mut h);
                    }
                }
                Op::Maxpool2 { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }
}
