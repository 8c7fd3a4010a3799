//! Gaussian in pre-squash space, mapped to `(0, 0.5)` by `a = sigmoid(z) / 2`.

use rand::Rng;
use rand_distr::StandardNormal;

use super::PolicyError;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Pre-squash samples are clamped so the action stays strictly inside its
/// support in floating point.
pub const Z_CLAMP: f64 = 30.0;
pub const ACTION_MAX: f64 = 0.5;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn squash(z: f64) -> f64 {
    ACTION_MAX * sigmoid(z)
}

/// Inverse of [`squash`], accurate near both ends of the support.
#[inline]
pub fn unsquash(a: f64) -> f64 {
    a.ln() - (ACTION_MAX - a).ln()
}

/// `ln |da/dz|` for `a = sigmoid(z) / 2`.
#[inline]
fn log_jacobian(z: f64) -> f64 {
    ACTION_MAX.ln() - softplus(-z) - softplus(z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    /// Pre-squash mean per element.
    pub mu: Vec<f64>,
    pub log_std: f64,
}

impl ActionDistribution {
    pub fn std(&self) -> f64 {
        self.log_std.exp()
    }

    /// Squashed mean, used for evaluation.
    pub fn deterministic(&self) -> Vec<f64> {
        self.mu.iter().map(|&m| squash(m.clamp(-Z_CLAMP, Z_CLAMP))).collect()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> (Vec<f64>, f64) {
        let std = self.std();
        let action: Vec<f64> = self
            .mu
            .iter()
            .map(|&m| {
                let eps: f64 = rng.sample(StandardNormal);
                squash((m + std * eps).clamp(-Z_CLAMP, Z_CLAMP))
            })
            .collect();
        let log_prob = self.log_prob_of(&action).expect("squashed samples lie inside the support");
        (action, log_prob)
    }

    /// Log density of `action` under the squashed distribution.
    pub fn log_prob_of(&self, action: &[f64]) -> Result<f64, PolicyError> {
        if action.len() != self.mu.len() {
            return Err(PolicyError::ShapeMismatch { expected: self.mu.len(), got: action.len() });
        }
        let std = self.std();
        let mut total = 0.0;
        for (&a, &m) in action.iter().zip(&self.mu) {
            if !(a > 0.0 && a < ACTION_MAX) {
                return Err(PolicyError::OutOfSupport(a));
            }
            let z = unsquash(a);
            let n = (z - m) / std;
            total += -0.5 * n * n - self.log_std - HALF_LN_2PI - log_jacobian(z);
        }
        Ok(total)
    }

    /// Per-element `d log_prob / d mu` and the total `d log_prob / d log_std`.
    pub fn log_prob_grad(&self, action: &[f64]) -> Result<(Vec<f64>, f64), PolicyError> {
        let var = (2.0 * self.log_std).exp();
        let mut d_mu = Vec::with_capacity(action.len());
        let mut d_log_std = 0.0;
        for (&a, &m) in action.iter().zip(&self.mu) {
            if !(a > 0.0 && a < ACTION_MAX) {
                return Err(PolicyError::OutOfSupport(a));
            }
            let diff = unsquash(a) - m;
            d_mu.push(diff / var);
            d_log_std += diff * diff / var - 1.0;
        }
        Ok((d_mu, d_log_std))
    }

    /// Entropy of the pre-squash Gaussian, summed over elements.
    pub fn gaussian_entropy(&self) -> f64 {
        self.mu.len() as f64 * (0.5 + HALF_LN_2PI + self.log_std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn squash_round_trip() {
        for z in [-29.0, -5.0, -0.3, 0.0, 2.0, 17.0] {
            assert!((unsquash(squash(z)) - z).abs() < 1e-9 * (1.0 + z.abs()), "{z}");
        }
        assert_eq!(squash(0.0), 0.25);
    }

    #[test]
    fn near_deterministic_sampling() {
        let dist = ActionDistribution { mu: vec![0.7, -1.2], log_std: -20.0 };
        let (a, lp) = dist.sample(&mut ChaCha8Rng::seed_from_u64(3));
        for (x, m) in a.iter().zip(&dist.mu) {
            assert!((x - squash(*m)).abs() < 1e-9);
        }
        assert!(lp.is_finite());
    }

    #[test]
    fn density_integrates_to_one() {
        // Midpoint rule over the pre-squash variable (density times da/dz).
        for (mu, log_std) in [(0.0, -1.0), (1.5, 0.3), (-2.0, -0.5)] {
            let dist = ActionDistribution { mu: vec![mu], log_std };
            let n = 200_000;
            let (lo, hi) = (-Z_CLAMP, Z_CLAMP);
            let h = (hi - lo) / n as f64;
            let mut total = 0.0;
            for i in 0..n {
                let z = lo + (i as f64 + 0.5) * h;
                let a = squash(z);
                if a <= 0.0 || a >= ACTION_MAX {
                    continue;
                }
                total += dist.log_prob_of(&[a]).unwrap().exp() * log_jacobian(z).exp() * h;
            }
            assert!((total - 1.0).abs() < 1e-3, "{mu} {log_std}: {total}");
        }
    }

    #[test]
    fn out_of_support() {
        let dist = ActionDistribution { mu: vec![0.0], log_std: -1.0 };
        assert_eq!(dist.log_prob_of(&[0.6]), Err(PolicyError::OutOfSupport(0.6)));
        assert_eq!(dist.log_prob_of(&[0.0]), Err(PolicyError::OutOfSupport(0.0)));
        assert!(dist.log_prob_of(&[0.1, 0.2]).is_err());
    }

    #[test]
    fn symmetric_about_quarter() {
        let dist = ActionDistribution { mu: vec![0.0], log_std: -0.4 };
        for a in [0.01, 0.1, 0.2, 0.24] {
            let lhs = dist.log_prob_of(&[a]).unwrap();
            let rhs = dist.log_prob_of(&[0.5 - a]).unwrap();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn sampled_log_prob_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dist = ActionDistribution { mu: vec![0.3, -2.0, 1.1, 0.0], log_std: -1.0 };
        for _ in 0..100 {
            let (a, lp) = dist.sample(&mut rng);
            assert!(a.iter().all(|&x| x > 0.0 && x < 0.5));
            assert!((dist.log_prob_of(&a).unwrap() - lp).abs() < 1e-12);
        }
        let again = dist.sample(&mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(again, dist.sample(&mut ChaCha8Rng::seed_from_u64(5)));
    }

    #[test]
    fn log_prob_grad_matches_finite_differences() {
        let dist = ActionDistribution { mu: vec![0.3, -0.8], log_std: -0.7 };
        let a = [0.2, 0.05];
        let (d_mu, d_ls) = dist.log_prob_grad(&a).unwrap();
        let h = 1e-6;
        for e in 0..2 {
            let mut p = dist.clone();
            p.mu[e] += h;
            let up = p.log_prob_of(&a).unwrap();
            p.mu[e] -= 2.0 * h;
            let fd = (up - p.log_prob_of(&a).unwrap()) / (2.0 * h);
            assert!((fd - d_mu[e]).abs() < 1e-6);
        }
        let mut p = dist.clone();
        p.log_std += h;
        let up = p.log_prob_of(&a).unwrap();
        p.log_std -= 2.0 * h;
        let fd = (up - p.log_prob_of(&a).unwrap()) / (2.0 * h);
        assert!((fd - d_ls).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn actions_stay_in_support(mu in -50.0f64..50.0, log_std in LOG_STD_MIN..LOG_STD_MAX, seed in 0u64..1000) {
            let dist = ActionDistribution { mu: vec![mu; 3], log_std };
            let (a, lp) = dist.sample(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert!(a.iter().all(|&x| x > 0.0 && x < ACTION_MAX));
            prop_assert!(lp.is_finite());
        }
    }
}
