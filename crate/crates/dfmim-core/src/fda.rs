//! Functional-data primitives: equally spaced grids on [0,1], discretized
//! curves, trapezoidal inner products, and the four benchmark coefficient
//! functions used by the simulation scenarios.

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;

/// Tolerance for the equal-spacing check on grid construction.
const SPACING_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FdaError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("curve has {got} values but its grid has {want} points")]
    LengthMismatch { got: usize, want: usize },
    #[error("curve values must be finite")]
    NonFinite,
    #[error("curves live on different grids")]
    GridMismatch,
    #[error("coefficient index {0} is out of 1..=4")]
    BadBetaIndex(usize),
}

/// Equally spaced evaluation grid over [0,1].
///
/// Grids are shared by `Rc` so that every curve in a dataset points at the
/// same abscissae; `PartialEq` compares contents, so two independently built
/// grids of the same size still compare equal.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    points: Rc<Vec<f64>>,
}

impl Grid {
    /// The equally spaced grid {i/(n-1)} for i = 0..n-1.
    pub fn new(n: usize) -> Result<Self, FdaError> {
        if n < 2 {
            return Err(FdaError::InvalidGrid(format!("need n >= 2, got {n}")));
        }
        let h = 1.0 / (n - 1) as f64;
        let mut points = Vec::with_capacity(n);
        for i in 0..n {
            points.push(i as f64 * h);
        }
        // Force exact endpoints; i*h accumulates no error for the last
        // index but the invariant is cheap to pin down.
        points[n - 1] = 1.0;
        Self::from_points(points)
    }

    /// Validates an arbitrary point list against the grid invariants.
    pub fn from_points(points: Vec<f64>) -> Result<Self, FdaError> {
        let n = points.len();
        if n < 2 {
            return Err(FdaError::InvalidGrid(format!("need n >= 2, got {n}")));
        }
        if points[0] != 0.0 || points[n - 1] != 1.0 {
            return Err(FdaError::InvalidGrid(
                "grid must start at 0 and end at 1".into(),
            ));
        }
        let h = 1.0 / (n - 1) as f64;
        for w in points.windows(2) {
            if w[1] <= w[0] {
                return Err(FdaError::InvalidGrid("points must be strictly increasing".into()));
            }
            if libm::fabs((w[1] - w[0]) - h) >= SPACING_TOL {
                return Err(FdaError::InvalidGrid(format!(
                    "points are not equally spaced (expected step {h})"
                )));
            }
        }
        Ok(Self {
            points: Rc::new(points),
        })
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    /// Step between adjacent points.
    pub fn spacing(&self) -> f64 {
        1.0 / (self.n() - 1) as f64
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn point(&self, i: usize) -> f64 {
        self.points[i]
    }

    /// Fast shared-grid test: pointer identity first, contents second.
    pub fn same_as(&self, other: &Grid) -> bool {
        Rc::ptr_eq(&self.points, &other.points) || self.points == other.points
    }

    /// New grid with a midpoint inserted in every interval (n -> 2n-1).
    pub fn refined(&self) -> Grid {
        Grid::new(2 * self.n() - 1).expect("refinement of a valid grid is valid")
    }
}

/// One discretized function on a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    grid: Grid,
    values: Vec<f64>,
}

impl Curve {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self, FdaError> {
        if values.len() != grid.n() {
            return Err(FdaError::LengthMismatch {
                got: values.len(),
                want: grid.n(),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(FdaError::NonFinite);
        }
        Ok(Self { grid, values })
    }

    /// Samples `f` at every grid point.
    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> f64) -> Result<Self, FdaError> {
        let values = grid.points().iter().map(|&t| f(t)).collect();
        Curve::new(grid, values)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Composite trapezoidal approximation of the L2 inner product
    /// integral of `self * other` over [0,1].
    pub fn inner_product(&self, other: &Curve) -> Result<f64, FdaError> {
        if !self.grid.same_as(&other.grid) {
            return Err(FdaError::GridMismatch);
        }
        Ok(trapezoid_product(&self.values, &other.values, self.grid.spacing()))
    }

    /// Elementwise transform onto the same grid.
    pub fn pointwise(&self, kind: PointwiseKind) -> Curve {
        let values = self
            .values
            .iter()
            .map(|&v| match kind {
                PointwiseKind::Square => v * v,
                PointwiseKind::Abs => libm::fabs(v),
            })
            .collect();
        Curve {
            grid: self.grid.clone(),
            values,
        }
    }
}

/// Elementwise curve transforms used by the benchmark scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointwiseKind {
    Square,
    Abs,
}

/// Trapezoid rule for the inner product of two sample vectors with equal
/// spacing `h`: endpoints weighted h/2, interior points weighted h.
pub(crate) fn trapezoid_product(a: &[f64], b: &[f64], h: f64) -> f64 {
    let n = a.len();
    let mut acc = 0.5 * (a[0] * b[0] + a[n - 1] * b[n - 1]);
    for i in 1..n - 1 {
        acc += a[i] * b[i];
    }
    acc * h
}

/// A `p`-channel functional observation on one shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiCurve {
    channels: Vec<Curve>,
}

impl MultiCurve {
    pub fn new(channels: Vec<Curve>) -> Result<Self, FdaError> {
        let first = channels.first().ok_or(FdaError::GridMismatch)?;
        let grid = first.grid().clone();
        if !channels.iter().all(|c| c.grid().same_as(&grid)) {
            return Err(FdaError::GridMismatch);
        }
        Ok(Self { channels })
    }

    pub fn p(&self) -> usize {
        self.channels.len()
    }

    pub fn grid(&self) -> &Grid {
        self.channels[0].grid()
    }

    pub fn channel(&self, j: usize) -> &Curve {
        &self.channels[j]
    }

    pub fn channels(&self) -> &[Curve] {
        &self.channels
    }
}

/// The benchmark coefficient functions sampled on `grid`:
/// β₁ = 5 sin(2πt), β₂ = 5 sin(3πt), β₃ = 3 cos(2πt), β₄ = 3 cos(3πt).
pub fn beta_curve(j: usize, grid: &Grid) -> Result<Curve, FdaError> {
    let f: fn(f64) -> f64 = match j {
        1 => |t| 5.0 * libm::sin(2.0 * core::f64::consts::PI * t),
        2 => |t| 5.0 * libm::sin(3.0 * core::f64::consts::PI * t),
        3 => |t| 3.0 * libm::cos(2.0 * core::f64::consts::PI * t),
        4 => |t| 3.0 * libm::cos(3.0 * core::f64::consts::PI * t),
        _ => return Err(FdaError::BadBetaIndex(j)),
    };
    Curve::from_fn(grid.clone(), f)
}
