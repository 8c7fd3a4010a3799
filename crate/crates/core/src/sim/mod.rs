//! One-dimensional forced Burgers turbulence, solved pseudo-spectrally, with a
//! per-element Smagorinsky eddy-viscosity closure.
//!
//! Governing equation on a periodic domain:
//!
//! ```text
//! du/dt + d(u^2/2)/dx = d/dx[(nu + nu_t) du/dx] + A (u - mean(u))
//! nu_t = (Cs * Delta)^2 * sqrt(2) * |du/dx|
//! ```
//!
//! `Cs` is constant inside each element and `Delta` is the element width.

pub mod dataset;
pub mod dns;
pub mod fft;
mod solver;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use solver::{eddy_viscosity, spectral_filter, Solver, SolverConfig, BLOW_UP_THRESHOLD, MAX_CS};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("Smagorinsky coefficient {0} outside [0, {MAX_CS}]")]
    OutOfRangeCs(f64),
    #[error("expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("solution blew up at t = {time}")]
    BlowUp { time: f64 },
    #[error("time step {dt} exceeds the stability bound {bound}")]
    UnstableTimestep { dt: f64, bound: f64 },
    #[error("incompatible grids: {0}")]
    IncompatibleGrids(String),
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub n_points: usize,
    pub n_elements: usize,
    pub domain_length: f64,
}

impl Grid {
    pub fn new(n_points: usize, n_elements: usize) -> Result<Self, SimError> {
        Self::with_length(n_points, n_elements, 2.0 * std::f64::consts::PI)
    }

    pub fn with_length(n_points: usize, n_elements: usize, domain_length: f64) -> Result<Self, SimError> {
        if n_points < 2 || n_points % 2 != 0 {
            return Err(SimError::InvalidGrid(format!("n_points {n_points} must be even and >= 2")));
        }
        if n_elements == 0 || n_points % n_elements != 0 {
            return Err(SimError::InvalidGrid(format!(
                "{n_elements} elements do not divide {n_points} points"
            )));
        }
        if n_points < 2 * n_elements {
            return Err(SimError::InvalidGrid("need at least two points per element".into()));
        }
        if !(domain_length > 0.0) {
            return Err(SimError::InvalidGrid("domain length must be positive".into()));
        }
        Ok(Self { n_points, n_elements, domain_length })
    }

    pub fn points_per_element(&self) -> usize {
        self.n_points / self.n_elements
    }

    pub fn dx(&self) -> f64 {
        self.domain_length / self.n_points as f64
    }

    /// Filter width of the closure: the element width.
    pub fn filter_width(&self) -> f64 {
        self.domain_length / self.n_elements as f64
    }

    pub fn nyquist(&self) -> usize {
        self.n_points / 2
    }

    pub fn coordinates(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| i as f64 * self.dx()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub grid: Grid,
    pub u: Vec<f64>,
    pub time: f64,
}

impl FlowField {
    pub fn new(grid: Grid, u: Vec<f64>, time: f64) -> Result<Self, SimError> {
        if u.len() != grid.n_points {
            return Err(SimError::ShapeMismatch { expected: grid.n_points, got: u.len() });
        }
        Ok(Self { grid, u, time })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self { grid, u: vec![0.0; grid.n_points], time: 0.0 }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> f64) -> Self {
        let u = grid.coordinates().into_iter().map(f).collect();
        Self { grid, u, time: 0.0 }
    }

    /// Velocity samples of element `e`.
    pub fn element(&self, e: usize) -> &[f64] {
        let m = self.grid.points_per_element();
        &self.u[e * m..(e + 1) * m]
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().all(|v| v.is_finite())
    }

    /// Half the mean square velocity.
    pub fn energy(&self) -> f64 {
        0.5 * self.u.iter().map(|v| v * v).sum::<f64>() / self.u.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.u.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}
