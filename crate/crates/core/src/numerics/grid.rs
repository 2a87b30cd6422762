use std::fmt;

use super::NumericsError;

/// Dense row-major tensor of `f64` values.
///
/// Rank 1 holds vectors, rank 2 dense matrices, rank 3 feature maps laid out
/// as channels × height × width.
#[derive(Clone, PartialEq)]
pub struct Grid {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, NumericsError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(NumericsError::InvalidShape(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::InvalidShape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Grid {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Grid::new(shape, vec![value; n]).expect("positive extents")
    }

    /// Rank-1 grid of length one.
    pub fn scalar(value: f64) -> Self {
        Grid {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Grid::new(&[n], data).expect("non-empty vector")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Grid::new(shape, (0..n).map(&mut f).collect()).expect("positive extents")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a shape-`[1]` grid.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Extents of a rank-3 grid as `(channels, height, width)`.
    pub fn chw(&self) -> Result<(usize, usize, usize), NumericsError> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(NumericsError::InvalidShape(format!(
                "expected channels×height×width, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        let (_, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    /// Channel `c` of a rank-3 grid as a `1×H×W` grid.
    pub fn channel(&self, c: usize) -> Result<Grid, NumericsError> {
        let (cs, h, w) = self.chw()?;
        if c >= cs {
            return Err(NumericsError::InvalidShape(format!(
                "channel {c} out of range for {cs} channels"
            )));
        }
        let plane = h * w;
        Grid::new(&[1, h, w], self.data[c * plane..(c + 1) * plane].to_vec())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Grid, NumericsError> {
        Grid::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(
        &self,
        other: &Grid,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Grid, NumericsError> {
        self.expect_same_shape(other, op)?;
        Ok(Grid {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += scale * other`, shapes must agree.
    pub fn add_scaled(&mut self, other: &Grid, scale: f64) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn expect_same_shape(&self, other: &Grid, op: &'static str) -> Result<(), NumericsError> {
        if self.shape != other.shape {
            return Err(NumericsError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Grid) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Grid{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", …")?;
        }
        write!(f, "]")
    }
}
