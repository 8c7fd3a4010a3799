//! Reference data: independent forced-turbulence realizations at high
//! resolution, each spun up to a statistically steady state.

use std::f64::consts::PI;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::fft::wavenumber;
use super::{FlowField, Grid, SimError, Solver, SolverConfig};
use crate::spectra::EnergySpectrum;

#[derive(Debug, Error)]
pub enum DnsError {
    #[error("energy not statistically steady after t = {spin_up}: windowed means vary by {variation:.3}")]
    NotStatisticallySteady { spin_up: f64, variation: f64 },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid DNS configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DnsConfig {
    pub n_points: usize,
    pub viscosity: f64,
    /// Initial forcing gain; rescaled during calibration when
    /// `target_energy` is set.
    pub forcing: f64,
    pub target_energy: Option<f64>,
    /// Relative energy mismatch accepted by the calibration.
    pub calibration_tolerance: f64,
    pub calibration_iterations: usize,
    pub spin_up: f64,
    /// Additional half-spin-up extensions allowed before giving up on
    /// steadiness.
    pub max_extensions: usize,
    /// Maximum variation of the windowed mean energy over the second half.
    pub steadiness_tolerance: f64,
    pub initial_energy: f64,
    /// Highest wavenumber excited by the random initial condition.
    pub initial_kmax: usize,
}

impl Default for DnsConfig {
    fn default() -> Self {
        Self {
            n_points: 2048,
            viscosity: 0.005,
            forcing: 0.3,
            target_energy: Some(0.15),
            calibration_tolerance: 0.02,
            calibration_iterations: 3,
            spin_up: 20.0,
            max_extensions: 2,
            steadiness_tolerance: 0.05,
            initial_energy: 0.125,
            initial_kmax: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DnsOutput {
    pub grid: Grid,
    pub viscosity: f64,
    /// Forcing gain after calibration.
    pub forcing: f64,
    pub snapshots: Vec<FlowField>,
    /// Time average over the second half of every spin-up.
    pub mean_spectrum: EnergySpectrum,
    /// Mean energy of the last calibration run (or the realizations when no
    /// calibration was requested).
    pub mean_energy: f64,
}

struct Realization {
    field: FlowField,
    spectrum_sum: Vec<f64>,
    weight: f64,
    mean_energy: f64,
}

/// Random-phase field with amplitude `1/k` for `k = 1..=kmax`, scaled to the
/// requested energy.
fn initial_condition(grid: Grid, kmax: usize, energy: f64, rng: &mut ChaCha8Rng) -> FlowField {
    let n = grid.n_points;
    let mut coeffs = vec![Complex64::default(); n];
    for k in 1..=kmax.min(n / 2 - 1) {
        let phase = rng.random_range(0.0..2.0 * PI);
        let c = Complex64::from_polar(1.0 / k as f64, phase);
        coeffs[k] = c;
        coeffs[n - k] = c.conj();
    }
    let u = super::fft::inverse_real(&coeffs);
    let mut field = FlowField { grid, u, time: 0.0 };
    let scale = (energy / field.energy()).sqrt();
    field.u.iter_mut().for_each(|v| *v *= scale);
    field
}

/// Largest relative deviation of four consecutive window means from their
/// average.
fn window_variation(samples: &[(f64, f64)]) -> f64 {
    const WINDOWS: usize = 4;
    if samples.len() < WINDOWS {
        return f64::INFINITY;
    }
    let chunk = samples.len() / WINDOWS;
    let means: Vec<f64> = (0..WINDOWS)
        .map(|w| {
            let part = &samples[w * chunk..(w + 1) * chunk];
            let weight: f64 = part.iter().map(|s| s.0).sum();
            part.iter().map(|s| s.0 * s.1).sum::<f64>() / weight
        })
        .collect();
    let avg = means.iter().sum::<f64>() / WINDOWS as f64;
    means.iter().map(|m| (m - avg).abs() / avg).fold(0.0, f64::max)
}

fn spin_up(cfg: &DnsConfig, forcing: f64, rng: &mut ChaCha8Rng) -> Result<Realization, DnsError> {
    let grid = Grid::new(cfg.n_points, 1)?;
    let solver_cfg = SolverConfig { viscosity: cfg.viscosity, forcing, dt: 1.0, dealias: true };
    let mut solver = Solver::new(grid, solver_cfg)?;
    let init = initial_condition(grid, cfg.initial_kmax, cfg.initial_energy, rng);
    let mut uh = solver.to_spectral(&init.u);
    let nyq = grid.nyquist();
    let cs = [0.0];

    let mut t = 0.0;
    let mut end = cfg.spin_up;
    let mut extensions = 0;
    // (dt, energy) samples and the dt-weighted spectrum over the second half.
    let mut samples: Vec<(f64, f64)> = Vec::new();
    let mut spectrum_sum = vec![0.0; nyq + 1];
    let mut weight = 0.0;
    let mut u = init.u;
    loop {
        while t < end - 1e-12 {
            let field = FlowField { grid, u, time: t };
            let dt = solver.stable_dt(&field, &cs)?.min(end - t);
            solver.step_spectral(&mut uh, &cs, dt);
            t += dt;
            u = solver.to_physical(&uh);
            if u.iter().any(|v| !v.is_finite()) {
                return Err(SimError::BlowUp { time: t }.into());
            }
            if t > end - 0.5 * cfg.spin_up {
                let mut energy = 0.0;
                for (i, c) in uh.iter().enumerate() {
                    let e = 0.5 * c.norm_sqr();
                    spectrum_sum[wavenumber(i, grid.n_points).unsigned_abs() as usize] += e * dt;
                    energy += e;
                }
                weight += dt;
                samples.push((dt, energy));
            }
        }
        let variation = window_variation(&samples);
        debug!("spin-up to t = {t:.2}: window variation {variation:.4}");
        if variation < cfg.steadiness_tolerance {
            break;
        }
        if extensions == cfg.max_extensions {
            return Err(DnsError::NotStatisticallySteady { spin_up: t, variation });
        }
        extensions += 1;
        end += 0.5 * cfg.spin_up;
        // Restart the averaging window on the new second half.
        samples.clear();
        spectrum_sum.iter_mut().for_each(|s| *s = 0.0);
        weight = 0.0;
    }
    let mean_energy = samples.iter().map(|s| s.0 * s.1).sum::<f64>() / weight;
    Ok(Realization { field: FlowField { grid, u, time: t }, spectrum_sum, weight, mean_energy })
}

fn realization_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Calibrates the forcing (if requested), then spins up `n_snapshots`
/// independent realizations. Deterministic in `seed`.
pub fn generate_dns_dataset(cfg: &DnsConfig, n_snapshots: usize, seed: u64) -> Result<DnsOutput, DnsError> {
    if n_snapshots == 0 {
        return Err(DnsError::InvalidConfig("need at least one snapshot".into()));
    }
    if !(cfg.spin_up > 0.0) || !(cfg.initial_energy > 0.0) || cfg.initial_kmax == 0 {
        return Err(DnsError::InvalidConfig(format!("{cfg:?}")));
    }
    let mut forcing = cfg.forcing;
    let mut calibration_energy = None;
    if let Some(target) = cfg.target_energy {
        // Steady energy scales with the square of the forcing gain.
        for it in 0..cfg.calibration_iterations {
            let run = spin_up(cfg, forcing, &mut realization_rng(seed, u64::MAX - it as u64))?;
            info!("calibration {it}: A = {forcing:.5}, E = {:.5}", run.mean_energy);
            calibration_energy = Some(run.mean_energy);
            if ((run.mean_energy - target) / target).abs() < cfg.calibration_tolerance {
                break;
            }
            forcing *= (target / run.mean_energy).sqrt();
        }
    }

    let grid = Grid::new(cfg.n_points, 1)?;
    let mut snapshots = Vec::with_capacity(n_snapshots);
    let mut spectrum = vec![0.0; grid.nyquist() + 1];
    let mut weight = 0.0;
    let mut energy_sum = 0.0;
    for i in 0..n_snapshots {
        let run = spin_up(cfg, forcing, &mut realization_rng(seed, i as u64))?;
        info!("realization {i}: mean energy {:.5}", run.mean_energy);
        for (s, v) in spectrum.iter_mut().zip(&run.spectrum_sum) {
            *s += v;
        }
        weight += run.weight;
        energy_sum += run.mean_energy;
        snapshots.push(run.field);
    }
    spectrum.iter_mut().for_each(|s| *s /= weight);
    Ok(DnsOutput {
        grid,
        viscosity: cfg.viscosity,
        forcing,
        snapshots,
        mean_spectrum: EnergySpectrum { e_k: spectrum },
        mean_energy: calibration_energy.unwrap_or(energy_sum / n_snapshots as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectra::energy_spectrum;

    fn small() -> DnsConfig {
        DnsConfig {
            n_points: 256,
            viscosity: 0.02,
            forcing: 0.3,
            target_energy: None,
            spin_up: 12.0,
            ..Default::default()
        }
    }

    #[test]
    fn initial_condition_energy_and_band() {
        let grid = Grid::new(64, 1).unwrap();
        let f = initial_condition(grid, 8, 0.125, &mut ChaCha8Rng::seed_from_u64(1));
        assert!((f.energy() - 0.125).abs() < 1e-12);
        let spectrum = energy_spectrum(&f);
        assert!(spectrum.e_k[9..].iter().all(|&e| e < 1e-25));
        assert!(spectrum.e_k[0] < 1e-25);
    }

    #[test]
    fn window_variation_of_constant_is_zero() {
        assert_eq!(window_variation(&[(0.1, 2.0); 40]), 0.0);
        let ramp: Vec<(f64, f64)> = (0..40).map(|i| (1.0, 1.0 + i as f64)).collect();
        assert!(window_variation(&ramp) > 0.5);
    }

    #[test]
    fn deterministic_and_positive_spectrum() {
        let cfg = small();
        let a = generate_dns_dataset(&cfg, 2, 7).unwrap();
        let b = generate_dns_dataset(&cfg, 2, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.snapshots.len(), 2);
        assert_ne!(a.snapshots[0].u, a.snapshots[1].u);
        assert!(a.mean_spectrum.e_k[1..=64].iter().all(|&e| e > 0.0));
        assert!(a.snapshots.iter().all(|s| s.is_finite()));
    }

    #[test]
    fn calibration_moves_energy_towards_target() {
        let cfg = DnsConfig { target_energy: Some(0.05), calibration_iterations: 2, ..small() };
        let out = generate_dns_dataset(&cfg, 1, 3).unwrap();
        assert!(out.forcing < cfg.forcing);
        assert!((out.mean_energy - 0.05).abs() / 0.05 < 0.25, "energy {}", out.mean_energy);
    }

    #[test]
    fn unsteady_spin_up_is_reported() {
        // Energy still growing exponentially from a tiny initial state.
        let cfg = DnsConfig { spin_up: 0.5, max_extensions: 1, forcing: 3.0, initial_energy: 1e-8, ..small() };
        assert!(matches!(
            generate_dns_dataset(&cfg, 1, 1),
            Err(DnsError::NotStatisticallySteady { .. })
        ));
    }
}
