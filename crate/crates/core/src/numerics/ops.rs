//! Forward kernels on plain [`Grid`]s and the adjoint kernels the tape uses
//! to push gradients back through them.

use super::{Grid, NumericsError};

fn conv_extents(
    input: &Grid,
    kernels: &Grid,
    padding: usize,
) -> Result<ConvGeometry, NumericsError> {
    let (cin, h, w) = input.chw()?;
    let [cout, kcin, kh, kw] = kernels.shape()[..] else {
        return Err(NumericsError::InvalidShape(format!(
            "conv2d kernels must be out×in×kh×kw, got {:?}",
            kernels.shape()
        )));
    };
    if kcin != cin {
        return Err(NumericsError::ShapeMismatch {
            op: "conv2d",
            detail: format!("kernels expect {kcin} input channels, input has {cin}"),
        });
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(NumericsError::ShapeMismatch {
            op: "conv2d",
            detail: format!("{kh}×{kw} kernel does not fit {h}×{w} input with padding {padding}"),
        });
    }
    Ok(ConvGeometry {
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh: h + 2 * padding - kh + 1,
        ow: w + 2 * padding - kw + 1,
        padding,
    })
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    padding: usize,
}

impl ConvGeometry {
    /// Rows of the unfolded input: one per (input channel, kernel row, kernel column).
    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Visits every in-bounds (patch row, output position, input offset)
    /// triple as contiguous runs along the output row.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let j = (ci * self.kh + ky) * self.kw + kx;
                    let lo = self.padding.saturating_sub(kx);
                    let hi = (self.w + self.padding).saturating_sub(kx).min(self.ow);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..self.oh {
                        let Some(iy) = (oy + ky).checked_sub(self.padding).filter(|&iy| iy < self.h) else {
                            continue;
                        };
                        let src = (ci * self.h + iy) * self.w + lo + kx - self.padding;
                        f(j, oy * self.ow + lo, src, hi - lo);
                    }
                }
            }
        }
    }

    /// Unfolds the padded input into a `patch_len × positions` matrix.
    fn im2col(&self, src: &[f64]) -> Vec<f64> {
        let p = self.positions();
        let mut cols = vec![0.0; self.patch_len() * p];
        self.for_each_run(|j, pos, at, n| {
            cols[j * p + pos..j * p + pos + n].copy_from_slice(&src[at..at + n]);
        });
        cols
    }

    /// Adjoint of [`ConvGeometry::im2col`]: sums unfolded entries back onto the input.
    fn col2im(&self, cols: &[f64], dst: &mut [f64]) {
        let p = self.positions();
        self.for_each_run(|j, pos, at, n| {
            for (d, s) in dst[at..at + n].iter_mut().zip(&cols[j * p + pos..j * p + pos + n]) {
                *d += s;
            }
        });
    }
}

/// `c (m×n) += a (m×k) · b (k×n)` with explicit row and column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_strides: [isize; 2], b: &[f64], b_strides: [isize; 2], c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the callers size `a`, `b` and `c` for the given extents and
    // strides, and `c` does not alias either input.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides[0],
            a_strides[1],
            b.as_ptr(),
            b_strides[0],
            b_strides[1],
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Stride-1 cross-correlation with zero padding.
pub fn conv2d(
    input: &Grid,
    kernels: &Grid,
    bias: &Grid,
    padding: usize,
) -> Result<Grid, NumericsError> {
    let g = conv_extents(input, kernels, padding)?;
    if bias.shape() != [g.cout] {
        return Err(NumericsError::ShapeMismatch {
            op: "conv2d",
            detail: format!("bias {:?} for {} output channels", bias.shape(), g.cout),
        });
    }
    let (j, p) = (g.patch_len(), g.positions());
    let cols = g.im2col(input.data());
    let mut out = Vec::with_capacity(g.cout * p);
    for &b in bias.data() {
        out.extend(std::iter::repeat_n(b, p));
    }
    let (jj, pp) = (j as isize, p as isize);
    gemm(g.cout, j, p, kernels.data(), [jj, 1], &cols, [pp, 1], &mut out);
    Grid::new(&[g.cout, g.oh, g.ow], out)
}

/// Gradients of a [`conv2d`] with respect to its input, kernels and bias.
pub struct ConvGrads {
    pub input: Option<Grid>,
    pub kernels: Option<Grid>,
    pub bias: Option<Grid>,
}

pub(crate) fn conv2d_backward(
    input: &Grid,
    kernels: &Grid,
    padding: usize,
    grad_out: &Grid,
    want: [bool; 3],
) -> ConvGrads {
    let g = conv_extents(input, kernels, padding).expect("validated in forward pass");
    let (j, p) = (g.patch_len(), g.positions());
    let (jj, pp) = (j as isize, p as isize);
    let go = grad_out.data();
    let g_in = want[0].then(|| {
        // dcols = Kᵀ · dOut, then fold back onto the input.
        let mut dcols = vec![0.0; j * p];
        gemm(j, g.cout, p, kernels.data(), [1, jj], go, [pp, 1], &mut dcols);
        let mut d = vec![0.0; input.len()];
        g.col2im(&dcols, &mut d);
        Grid::new(input.shape(), d).expect("input shape")
    });
    let g_k = want[1].then(|| {
        // dK = dOut · colsᵀ.
        let cols = g.im2col(input.data());
        let mut d = vec![0.0; kernels.len()];
        gemm(g.cout, p, j, go, [pp, 1], &cols, [1, pp], &mut d);
        Grid::new(kernels.shape(), d).expect("kernel shape")
    });
    let g_b = want[2].then(|| Grid::from_vec(go.chunks(p).map(|plane| plane.iter().sum()).collect()));
    ConvGrads {
        input: g_in,
        kernels: g_k,
        bias: g_b,
    }
}

/// Nearest-neighbour ×2 upsampling: every cell becomes a 2×2 block.
pub fn upsample2(input: &Grid) -> Result<Grid, NumericsError> {
    let (c, h, w) = input.chw()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[(ch * oh + y) * ow + x] = input.at3(ch, y / 2, x / 2);
            }
        }
    }
    Grid::new(&[c, oh, ow], out)
}

pub(crate) fn upsample2_backward(grad_out: &Grid) -> Grid {
    let (c, oh, ow) = grad_out.chw().expect("rank 3");
    let (h, w) = (oh / 2, ow / 2);
    let mut g = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                g[(ch * h + y / 2) * w + x / 2] += grad_out.at3(ch, y, x);
            }
        }
    }
    Grid::new(&[c, h, w], g).expect("rank 3")
}

/// 2×2 non-overlapping max pooling.
pub fn maxpool2(input: &Grid) -> Result<Grid, NumericsError> {
    maxpool2_with_argmax(input).map(|(out, _)| out)
}

/// Max pooling plus the flat input index chosen for every output cell.
/// Ties go to the first maximum in row-major window order.
pub(crate) fn maxpool2_with_argmax(input: &Grid) -> Result<(Grid, Vec<usize>), NumericsError> {
    let (c, h, w) = input.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(NumericsError::OddExtent { height: h, width: w });
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = (ch * h + 2 * y) * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (ch * h + 2 * y + dy) * w + 2 * x + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                arg.push(best);
            }
        }
    }
    Ok((Grid::new(&[c, oh, ow], out)?, arg))
}

pub fn relu(input: &Grid) -> Grid {
    input.map(|v| v.max(0.0))
}

/// Relu with an upper clamp at 1, used where outputs are pixel intensities.
pub fn relu_unit(input: &Grid) -> Grid {
    input.map(|v| v.clamp(0.0, 1.0))
}

pub fn sigmoid(input: &Grid) -> Grid {
    input.map(sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn tanh(input: &Grid) -> Grid {
    input.map(f64::tanh)
}

pub fn add(a: &Grid, b: &Grid) -> Result<Grid, NumericsError> {
    a.zip_map(b, "add", |x, y| x + y)
}

pub fn sub(a: &Grid, b: &Grid) -> Result<Grid, NumericsError> {
    a.zip_map(b, "sub", |x, y| x - y)
}

pub fn hadamard(a: &Grid, b: &Grid) -> Result<Grid, NumericsError> {
    a.zip_map(b, "hadamard", |x, y| x * y)
}

/// Stacks rank-3 grids along the channel axis, in operand order.
pub fn concat_channels(parts: &[&Grid]) -> Result<Grid, NumericsError> {
    let first = parts.first().ok_or_else(|| NumericsError::ShapeMismatch {
        op: "concat_channels",
        detail: "no operands".into(),
    })?;
    let (_, h, w) = first.chw()?;
    let mut channels = 0;
    for p in parts {
        let (c, ph, pw) = p.chw()?;
        if (ph, pw) != (h, w) {
            return Err(NumericsError::ShapeMismatch {
                op: "concat_channels",
                detail: format!("spatial extent {ph}×{pw} vs {h}×{w}"),
            });
        }
        channels += c;
    }
    let mut data = Vec::with_capacity(channels * h * w);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Grid::new(&[channels, h, w], data)
}

/// Dense layer `matrix · x + bias` with `matrix` shaped out×in.
pub fn affine(matrix: &Grid, bias: &Grid, x: &Grid) -> Result<Grid, NumericsError> {
    let [rows, cols] = matrix.shape()[..] else {
        return Err(NumericsError::InvalidShape(format!(
            "affine matrix must be rank 2, got {:?}",
            matrix.shape()
        )));
    };
    if x.shape() != [cols] || bias.shape() != [rows] {
        return Err(NumericsError::ShapeMismatch {
            op: "affine",
            detail: format!(
                "matrix {rows}×{cols}, input {:?}, bias {:?}",
                x.shape(),
                bias.shape()
            ),
        });
    }
    let m = matrix.data();
    let out = (0..rows)
        .map(|r| {
            bias.data()[r]
                + m[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(x.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        })
        .collect();
    Ok(Grid::from_vec(out))
}

pub fn softmax(x: &Grid) -> Result<Grid, NumericsError> {
    if x.rank() != 1 {
        return Err(NumericsError::InvalidShape(format!(
            "softmax expects a vector, got {:?}",
            x.shape()
        )));
    }
    let max = x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.data().iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(Grid::from_vec(exps.into_iter().map(|e| e / total).collect()))
}
