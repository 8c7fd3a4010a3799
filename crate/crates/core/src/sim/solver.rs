use std::f64::consts::{PI, SQRT_2};
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::Fft;
use serde::{Deserialize, Serialize};

use super::fft::{self, wavenumber};
use super::{FlowField, Grid, SimError};

pub const MAX_CS: f64 = 0.5;
pub const BLOW_UP_THRESHOLD: f64 = 1e6;
/// Safety factor of the explicit time-step bound.
const CFL: f64 = 0.5;

// Williamson low-storage RK3.
const RK_A: [f64; 3] = [0.0, -5.0 / 9.0, -153.0 / 128.0];
const RK_B: [f64; 3] = [1.0 / 3.0, 15.0 / 16.0, 8.0 / 15.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub viscosity: f64,
    /// Linear forcing gain A (1/time).
    pub forcing: f64,
    pub dt: f64,
    /// Evaluate the flux on a grid padded to twice the resolution so the
    /// quadratic term is alias-free.
    pub dealias: bool,
}

impl SolverConfig {
    fn validate(&self) -> Result<(), SimError> {
        if !(self.viscosity >= 0.0) || !self.forcing.is_finite() || !(self.dt > 0.0) {
            return Err(SimError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

fn check_cs(cs: &[f64], n_elements: usize) -> Result<(), SimError> {
    if cs.len() != n_elements {
        return Err(SimError::ShapeMismatch { expected: n_elements, got: cs.len() });
    }
    match cs.iter().find(|c| !(0.0..=MAX_CS).contains(*c)) {
        Some(&bad) => Err(SimError::OutOfRangeCs(bad)),
        None => Ok(()),
    }
}

#[inline]
fn smagorinsky(cs: f64, delta: f64, gradient: f64) -> f64 {
    let l = cs * delta;
    l * l * SQRT_2 * gradient.abs()
}

/// Pointwise eddy viscosity for one element from its velocity-gradient
/// samples: `(Cs * delta)^2 * sqrt(2 S S)` with `S = du/dx`.
pub fn eddy_viscosity(du_dx: &[f64], cs: f64, delta: f64) -> Result<Vec<f64>, SimError> {
    if !(0.0..=MAX_CS).contains(&cs) {
        return Err(SimError::OutOfRangeCs(cs));
    }
    if !(delta > 0.0) {
        return Err(SimError::InvalidConfig(format!("filter width {delta} must be positive")));
    }
    Ok(du_dx.iter().map(|&g| smagorinsky(cs, delta, g)).collect())
}

/// Sharp spectral cut-off: keeps the modes `|k|` below the target Nyquist
/// wavenumber and samples the result on the target grid.
pub fn spectral_filter(field: &FlowField, target: Grid) -> Result<FlowField, SimError> {
    let src = field.grid;
    if (src.domain_length - target.domain_length).abs() > 1e-12 * src.domain_length {
        return Err(SimError::IncompatibleGrids("domain lengths differ".into()));
    }
    if target.n_points > src.n_points {
        return Err(SimError::IncompatibleGrids(format!(
            "target has {} points, source only {}",
            target.n_points, src.n_points
        )));
    }
    if target.n_points == src.n_points {
        return Ok(FlowField { grid: target, u: field.u.clone(), time: field.time });
    }
    let (n, nt) = (src.n_points, target.n_points);
    let cut = (nt / 2) as i64;
    let coeffs = fft::forward(&field.u);
    let mut coarse = vec![Complex64::new(0.0, 0.0); nt];
    for (i, c) in coeffs.iter().enumerate() {
        let k = wavenumber(i, n);
        if k.abs() < cut {
            coarse[k.rem_euclid(nt as i64) as usize] = *c;
        }
    }
    Ok(FlowField { grid: target, u: fft::inverse_real(&coarse), time: field.time })
}

/// Pseudo-spectral solver bound to one grid. Owns FFT plans and scratch
/// space, so one instance should be reused across steps.
pub struct Solver {
    grid: Grid,
    cfg: SolverConfig,
    n: usize,
    m: usize,
    fwd_n: Arc<dyn Fft<f64>>,
    inv_n: Arc<dyn Fft<f64>>,
    fwd_m: Arc<dyn Fft<f64>>,
    inv_m: Arc<dyn Fft<f64>>,
    /// Physical wavenumber per bin; zero on the Nyquist bin.
    k: Vec<f64>,
    /// Bin of the padded grid holding each base-grid bin.
    pad_index: Vec<usize>,
    /// Element owning each point of the padded grid.
    element_of: Vec<usize>,
    pad: Vec<Complex64>,
    q: Vec<Complex64>,
    rhs: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl Solver {
    pub fn new(grid: Grid, cfg: SolverConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let n = grid.n_points;
        let m = if cfg.dealias { 2 * n } else { n };
        let k0 = 2.0 * PI / grid.domain_length;
        let k = (0..n)
            .map(|i| if i == n / 2 { 0.0 } else { k0 * wavenumber(i, n) as f64 })
            .collect();
        let pad_index = (0..n).map(|i| wavenumber(i, n).rem_euclid(m as i64) as usize).collect();
        let element_of = (0..m).map(|j| j * grid.n_elements / m).collect();
        let fwd_m = fft::plan_forward(m);
        let inv_m = fft::plan_inverse(m);
        let scratch_len = fwd_m
            .get_inplace_scratch_len()
            .max(inv_m.get_inplace_scratch_len());
        Ok(Self {
            grid,
            cfg,
            n,
            m,
            fwd_n: fft::plan_forward(n),
            inv_n: fft::plan_inverse(n),
            fwd_m,
            inv_m,
            k,
            pad_index,
            element_of,
            pad: vec![Complex64::default(); m],
            q: vec![Complex64::default(); n],
            rhs: vec![Complex64::default(); n],
            scratch: vec![Complex64::default(); scratch_len.max(1)],
        })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn config(&self) -> SolverConfig {
        self.cfg
    }

    pub fn set_dt(&mut self, dt: f64) -> Result<(), SimError> {
        let cfg = SolverConfig { dt, ..self.cfg };
        cfg.validate()?;
        self.cfg = cfg;
        Ok(())
    }

    fn check_field(&self, field: &FlowField) -> Result<(), SimError> {
        if field.grid != self.grid || field.u.len() != self.n {
            return Err(SimError::ShapeMismatch { expected: self.n, got: field.u.len() });
        }
        Ok(())
    }

    /// Normalized Fourier coefficients with the Nyquist bin cleared.
    pub fn to_spectral(&self, u: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = u.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.fwd_n.process(&mut buf);
        let scale = 1.0 / self.n as f64;
        buf.iter_mut().for_each(|c| *c *= scale);
        buf[self.n / 2] = Complex64::default();
        buf
    }

    pub fn to_physical(&self, coeffs: &[Complex64]) -> Vec<f64> {
        let mut buf = coeffs.to_vec();
        self.inv_n.process(&mut buf);
        buf.iter().map(|c| c.re).collect()
    }

    /// Eddy viscosity at every grid point; the gradient is taken spectrally
    /// over the whole field and then split by element.
    pub fn eddy_viscosity_field(&self, field: &FlowField, cs: &[f64]) -> Result<Vec<f64>, SimError> {
        self.check_field(field)?;
        check_cs(cs, self.grid.n_elements)?;
        let grad = fft::derivative(&field.u, self.grid.domain_length);
        let m = self.grid.points_per_element();
        let delta = self.grid.filter_width();
        let mut out = Vec::with_capacity(self.n);
        for (e, &c) in cs.iter().enumerate() {
            out.extend(eddy_viscosity(&grad[e * m..(e + 1) * m], c, delta)?);
        }
        Ok(out)
    }

    /// Explicit stability bound
    /// `0.5 * min(dx / max|u|, dx^2 / (2 (nu + max nu_t)))`.
    pub fn stable_dt(&self, field: &FlowField, cs: &[f64]) -> Result<f64, SimError> {
        let nu_t = self.eddy_viscosity_field(field, cs)?;
        let dx = self.grid.dx();
        let umax = field.max_abs();
        let convective = if umax > 0.0 { dx / umax } else { f64::INFINITY };
        let nu = self.cfg.viscosity + nu_t.iter().fold(0.0f64, |a, &b| a.max(b));
        let diffusive = if nu > 0.0 { dx * dx / (2.0 * nu) } else { f64::INFINITY };
        Ok(CFL * convective.min(diffusive))
    }

    fn compute_rhs(&mut self, uh: &[Complex64], cs: &[f64]) {
        let (n, m) = (self.n, self.m);
        let delta = self.grid.filter_width();
        let any_closure = cs.iter().any(|&c| c > 0.0);

        // u + i du/dx in one transform: coefficient c * (1 - k).
        self.pad.iter_mut().for_each(|c| *c = Complex64::default());
        for i in 0..n {
            if i == n / 2 {
                continue;
            }
            self.pad[self.pad_index[i]] = uh[i] * (1.0 - self.k[i]);
        }
        self.inv_m.process_with_scratch(&mut self.pad, &mut self.scratch);

        for (j, z) in self.pad.iter_mut().enumerate() {
            let (u, ux) = (z.re, z.im);
            let mut flux = -0.5 * u * u;
            if any_closure {
                flux += smagorinsky(cs[self.element_of[j]], delta, ux) * ux;
            }
            *z = Complex64::new(flux, 0.0);
        }
        self.fwd_m.process_with_scratch(&mut self.pad, &mut self.scratch);

        let inv_m = 1.0 / m as f64;
        let (nu, a) = (self.cfg.viscosity, self.cfg.forcing);
        for i in 0..n {
            let k = self.k[i];
            self.rhs[i] = if k == 0.0 {
                Complex64::default()
            } else {
                let flux = self.pad[self.pad_index[i]] * inv_m;
                Complex64::new(0.0, k) * flux + uh[i] * (a - nu * k * k)
            };
        }
    }

    /// One RK3 step of size `dt` in spectral space.
    pub(crate) fn step_spectral(&mut self, uh: &mut [Complex64], cs: &[f64], dt: f64) {
        self.q.iter_mut().for_each(|c| *c = Complex64::default());
        for s in 0..3 {
            self.compute_rhs(uh, cs);
            for i in 0..self.n {
                self.q[i] = self.q[i] * RK_A[s] + self.rhs[i] * dt;
                uh[i] += self.q[i] * RK_B[s];
            }
        }
    }

    fn step_dt(&mut self, field: &FlowField, cs: &[f64], dt: f64) -> Result<FlowField, SimError> {
        let mut uh = self.to_spectral(&field.u);
        self.step_spectral(&mut uh, cs, dt);
        let u = self.to_physical(&uh);
        let time = field.time + dt;
        if u.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP_THRESHOLD) {
            return Err(SimError::BlowUp { time });
        }
        Ok(FlowField { grid: self.grid, u, time })
    }

    /// Advances by the configured `dt`, holding `cs_per_element` fixed.
    pub fn step(&mut self, field: &FlowField, cs_per_element: &[f64]) -> Result<FlowField, SimError> {
        self.check_field(field)?;
        check_cs(cs_per_element, self.grid.n_elements)?;
        self.step_dt(field, cs_per_element, self.cfg.dt)
    }

    /// Advances by `duration` with repeated steps of the configured `dt`; the
    /// last step is shortened to land on `duration` exactly.
    pub fn advance(
        &mut self,
        field: &FlowField,
        cs_per_element: &[f64],
        duration: f64,
    ) -> Result<FlowField, SimError> {
        self.check_field(field)?;
        check_cs(cs_per_element, self.grid.n_elements)?;
        if !(duration >= 0.0) {
            return Err(SimError::InvalidConfig(format!("negative duration {duration}")));
        }
        if duration == 0.0 {
            return Ok(field.clone());
        }
        let dt = self.cfg.dt;
        let bound = self.stable_dt(field, cs_per_element)?;
        if dt > bound * (1.0 + 1e-12) {
            return Err(SimError::UnstableTimestep { dt, bound });
        }
        let ratio = duration / dt;
        let whole = ratio.round();
        let (n_steps, last) = if (ratio - whole).abs() < 1e-9 && whole >= 1.0 {
            (whole as usize, dt)
        } else {
            let n = ratio.ceil() as usize;
            (n, duration - (n - 1) as f64 * dt)
        };
        let start = field.time;
        let mut current = field.clone();
        for s in 0..n_steps {
            let h = if s + 1 == n_steps { last } else { dt };
            current = self.step_dt(&current, cs_per_element, h)?;
        }
        current.time = start + duration;
        Ok(current)
    }
}
