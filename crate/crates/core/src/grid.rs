//! Uniform cell-centred grids on `[-L, L]` and the discrete calculus used by
//! the solvers.

use crate::error::{Error, Result};

/// Cells below this fraction of the field maximum are treated as empty when
/// forming ratios such as `∇p / p`.
pub const MASK_FRACTION: f64 = 1e-14;
/// Denominator floor for masked ratios.
pub const RATIO_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    half_width: f64,
    n_cells: usize,
}

impl Grid {
    pub fn new(half_width: f64, n_cells: usize) -> Result<Self> {
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "half width must be positive, got {half_width}"
            )));
        }
        if n_cells < 4 {
            return Err(Error::InvalidParameter(format!(
                "need at least 4 cells, got {n_cells}"
            )));
        }
        Ok(Self {
            half_width,
            n_cells,
        })
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn dx(&self) -> f64 {
        2.0 * self.half_width / self.n_cells as f64
    }

    /// Centre of cell `i`.
    pub fn x(&self, i: usize) -> f64 {
        -self.half_width + (i as f64 + 0.5) * self.dx()
    }

    /// Position of face `j`, `0 ..= n_cells`.
    pub fn face(&self, j: usize) -> f64 {
        -self.half_width + j as f64 * self.dx()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_cells).map(|i| self.x(i)).collect()
    }

    /// The same domain with twice as many cells.
    pub fn refined(&self) -> Self {
        Self {
            half_width: self.half_width,
            n_cells: 2 * self.n_cells,
        }
    }

    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        (0..self.n_cells).map(|i| f(self.x(i))).collect()
    }

    fn check_len(&self, len: usize, what: &str) -> Result<()> {
        if len != self.n_cells {
            return Err(Error::GridMismatch(format!(
                "{what} has {len} entries, grid has {} cells",
                self.n_cells
            )));
        }
        Ok(())
    }

    /// Central differences inside, one-sided second-order stencils at the ends.
    pub fn gradient(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len(v.len(), "field")?;
        let n = v.len();
        let h = self.dx();
        let mut out = vec![0.0; n];
        out[0] = (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * h);
        out[n - 1] = (3.0 * v[n - 1] - 4.0 * v[n - 2] + v[n - 3]) / (2.0 * h);
        for i in 1..n - 1 {
            out[i] = (v[i + 1] - v[i - 1]) / (2.0 * h);
        }
        Ok(out)
    }

    pub fn laplacian(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_len(v.len(), "field")?;
        let n = v.len();
        let h2 = self.dx() * self.dx();
        let mut out = vec![0.0; n];
        out[0] = (2.0 * v[0] - 5.0 * v[1] + 4.0 * v[2] - v[3]) / h2;
        out[n - 1] = (2.0 * v[n - 1] - 5.0 * v[n - 2] + 4.0 * v[n - 3] - v[n - 4]) / h2;
        for i in 1..n - 1 {
            out[i] = (v[i + 1] - 2.0 * v[i] + v[i - 1]) / h2;
        }
        Ok(out)
    }

    /// `(J[i+1] - J[i]) / dx` for fluxes on the `n_cells + 1` faces.
    pub fn face_divergence(&self, flux: &[f64]) -> Result<Vec<f64>> {
        if flux.len() != self.n_cells + 1 {
            return Err(Error::GridMismatch(format!(
                "face flux has {} entries, expected {}",
                flux.len(),
                self.n_cells + 1
            )));
        }
        let h = self.dx();
        Ok(flux.windows(2).map(|w| (w[1] - w[0]) / h).collect())
    }

    /// Midpoint rule.
    pub fn integrate(&self, v: &[f64]) -> f64 {
        v.iter().sum::<f64>() * self.dx()
    }

    /// Linear interpolation between cell centres. Between the outer centre and
    /// the wall the boundary cell value is used; outside the domain the nearest
    /// boundary cell is used as well.
    pub fn interpolate(&self, v: &[f64], x: f64) -> f64 {
        let (i, w) = self.locate(x);
        v[i] * (1.0 - w) + v[(i + 1).min(self.n_cells - 1)] * w
    }

    /// Index of the centre left of `x` and the linear weight of its right
    /// neighbour, clamped to the grid.
    pub fn locate(&self, x: f64) -> (usize, f64) {
        let s = (x + self.half_width) / self.dx() - 0.5;
        if !(s > 0.0) {
            return (0, 0.0);
        }
        let last = (self.n_cells - 1) as f64;
        if s >= last {
            return (self.n_cells - 1, 0.0);
        }
        let i = s.floor();
        (i as usize, s - i)
    }
}

/// `num / p` with the empty-cell convention: zero where `p` is below
/// `MASK_FRACTION * p_max`.
pub fn masked_ratio(num: f64, p: f64, p_max: f64) -> f64 {
    if p < MASK_FRACTION * p_max || p <= 0.0 {
        0.0
    } else {
        num / p.max(RATIO_FLOOR)
    }
}

pub fn max_value(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

/// A density sampled at cell centres.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub time: f64,
}

impl DensityField {
    pub fn new(grid: Grid, values: Vec<f64>, time: f64) -> Result<Self> {
        grid.check_len(values.len(), "density")?;
        if let Some((i, &v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(Error::InvalidDensity(format!(
                "value {v} at cell {i} is negative or not finite"
            )));
        }
        Ok(Self { grid, values, time })
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> f64, time: f64) -> Result<Self> {
        Self::new(grid, grid.sample(f), time)
    }

    pub fn mass(&self) -> f64 {
        self.grid.integrate(&self.values)
    }

    /// Rescales to the given total mass.
    pub fn normalized(mut self, mass: f64) -> Result<Self> {
        let current = self.mass();
        if !(current > 0.0) {
            return Err(Error::InvalidDensity("zero total mass".into()));
        }
        let s = mass / current;
        self.values.iter_mut().for_each(|v| *v *= s);
        Ok(self)
    }

    pub fn max(&self) -> f64 {
        max_value(&self.values)
    }

    pub fn moment(&self, k: i32) -> f64 {
        let g = self.grid;
        self.values
            .iter()
            .enumerate()
            .map(|(i, p)| g.x(i).powi(k) * p)
            .sum::<f64>()
            * g.dx()
    }

    pub fn mean(&self) -> f64 {
        self.moment(1) / self.mass()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.moment(2) / self.mass() - m * m
    }
}

/// Gaussian density with the given mean and variance.
pub fn gaussian(mean: f64, variance: f64) -> impl Fn(f64) -> f64 {
    let norm = 1.0 / (2.0 * std::f64::consts::PI * variance).sqrt();
    move |x| norm * (-(x - mean).powi(2) / (2.0 * variance)).exp()
}
