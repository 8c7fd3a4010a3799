//! Thin helpers over `rustfft` for real periodic signals.
//!
//! Coefficients are normalized by 1/N, so `coeffs[0]` is the mean and a unit
//! sine has coefficients of magnitude 1/2 at ±k.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub(crate) fn plan_forward(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n))
}

pub(crate) fn plan_inverse(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n))
}

/// Signed wavenumber of FFT bin `i` on an `n`-point grid. The Nyquist bin of
/// an even grid maps to `+n/2`.
pub fn wavenumber(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

pub fn forward(u: &[f64]) -> Vec<Complex64> {
    let n = u.len();
    let mut buf: Vec<Complex64> = u.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    plan_forward(n).process(&mut buf);
    let scale = 1.0 / n as f64;
    buf.iter_mut().for_each(|c| *c *= scale);
    buf
}

/// Inverse of [`forward`]; discards the (round-off) imaginary part.
pub fn inverse_real(coeffs: &[Complex64]) -> Vec<f64> {
    let mut buf = coeffs.to_vec();
    plan_inverse(buf.len()).process(&mut buf);
    buf.iter().map(|c| c.re).collect()
}

/// Spectral first derivative on a periodic grid of length `domain_length`.
/// The Nyquist mode is dropped because its derivative is not real.
pub fn derivative(u: &[f64], domain_length: f64) -> Vec<f64> {
    let n = u.len();
    let k0 = 2.0 * std::f64::consts::PI / domain_length;
    let mut coeffs = forward(u);
    for (i, c) in coeffs.iter_mut().enumerate() {
        let k = wavenumber(i, n);
        if n % 2 == 0 && i == n / 2 {
            *c = Complex64::new(0.0, 0.0);
        } else {
            *c *= Complex64::new(0.0, k0 * k as f64);
        }
    }
    inverse_real(&coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn derivative_of_sine() {
        let n = 32;
        let x: Vec<f64> = (0..n).map(|i| 2.0 * PI * i as f64 / n as f64).collect();
        let u: Vec<f64> = x.iter().map(|x| (3.0 * x).sin()).collect();
        let du = derivative(&u, 2.0 * PI);
        for (d, x) in du.iter().zip(&x) {
            assert!((d - 3.0 * (3.0 * x).cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip() {
        let u: Vec<f64> = (0..24).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let back = inverse_real(&forward(&u));
        for (a, b) in u.iter().zip(&back) {
            assert!((a - b).abs() < 1e-13);
        }
    }
}
