//! Energy spectra, the spectrum error and the reward derived from it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::fft;
use crate::sim::FlowField;

#[derive(Debug, Error, PartialEq)]
pub enum SpectraError {
    #[error("reference spectrum is zero at k = {0}")]
    ZeroReferenceMode(usize),
    #[error("k_max {k_max} exceeds the available {available} wavenumbers")]
    KMaxOutOfRange { k_max: usize, available: usize },
    #[error("invalid reward configuration: {0}")]
    InvalidConfig(String),
}

/// `e_k[k]` for integer wavenumbers `k = 0..=nyquist`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySpectrum {
    pub e_k: Vec<f64>,
}

impl EnergySpectrum {
    pub fn total(&self) -> f64 {
        self.e_k.iter().sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { e_k: self.e_k.iter().map(|e| e * factor).collect() }
    }
}

/// `E(k) = (|u_k|^2 + |u_-k|^2) / 2` with 1/N-normalized coefficients, so the
/// spectrum sums to half the mean square velocity.
pub fn energy_spectrum(field: &FlowField) -> EnergySpectrum {
    let n = field.u.len();
    let coeffs = fft::forward(&field.u);
    let mut e_k = vec![0.0; n / 2 + 1];
    for (i, c) in coeffs.iter().enumerate() {
        e_k[fft::wavenumber(i, n).unsigned_abs() as usize] += 0.5 * c.norm_sqr();
    }
    EnergySpectrum { e_k }
}

/// Mean squared relative error over `k = 1..=k_max`.
pub fn spectrum_error(
    e_les: &EnergySpectrum,
    e_dns: &EnergySpectrum,
    k_max: usize,
) -> Result<f64, SpectraError> {
    let available = e_les.e_k.len().min(e_dns.e_k.len()).saturating_sub(1);
    if k_max == 0 || k_max > available {
        return Err(SpectraError::KMaxOutOfRange { k_max, available });
    }
    let mut sum = 0.0;
    for k in 1..=k_max {
        let reference = e_dns.e_k[k];
        if reference == 0.0 {
            return Err(SpectraError::ZeroReferenceMode(k));
        }
        sum += ((reference - e_les.e_k[k]) / reference).powi(2);
    }
    Ok(sum / k_max as f64)
}

/// `2 exp(-l / alpha) - 1`, bounded in (-1, 1] and decreasing in `l`.
pub fn reward(l: f64, alpha: f64) -> f64 {
    2.0 * (-l / alpha).exp() - 1.0
}

/// The exponent sign exactly as first written, `2 exp(l / alpha) - 1`. Kept
/// for comparison only: it is unbounded and rewards large errors.
pub fn reward_literal(l: f64, alpha: f64) -> f64 {
    2.0 * (l / alpha).exp() - 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub k_max: usize,
    pub alpha: f64,
    #[serde(default)]
    pub literal: bool,
}

impl RewardConfig {
    pub fn validate(&self, nyquist: usize) -> Result<(), SpectraError> {
        if self.k_max < 1 || self.k_max > nyquist {
            return Err(SpectraError::KMaxOutOfRange { k_max: self.k_max, available: nyquist });
        }
        if !(self.alpha > 0.0) {
            return Err(SpectraError::InvalidConfig(format!("alpha {} must be positive", self.alpha)));
        }
        Ok(())
    }

    pub fn reward(&self, l: f64) -> f64 {
        if self.literal {
            reward_literal(l, self.alpha)
        } else {
            reward(l, self.alpha)
        }
    }

    /// Spectrum error of `field` against `reference` and the matching reward.
    pub fn evaluate(&self, field: &FlowField, reference: &EnergySpectrum) -> Result<(f64, f64), SpectraError> {
        let l = spectrum_error(&energy_spectrum(field), reference, self.k_max)?;
        Ok((l, self.reward(l)))
    }
}
