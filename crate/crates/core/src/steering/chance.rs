//! Chi-square quantiles and the Gaussian norm-quantile upper bound.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::NormMode;
use crate::error::{Error, Result};

/// `m(eps, n)`: the `1 - eps` quantile of a chi-square law with `n` degrees of
/// freedom.
pub fn chi2_quantile(eps: f64, n: usize) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::invalid(format!("risk level {eps} outside (0, 1)")));
    }
    if n == 0 {
        return Err(Error::invalid("chi-square needs at least one degree of freedom"));
    }
    let law = ChiSquared::new(n as f64).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(law.inverse_cdf(1.0 - eps).max(0.0))
}

/// Norm of a covariance factor: spectral in exact mode, Frobenius otherwise.
pub fn factor_norm(m: &DMatrix<f64>, mode: NormMode) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    match mode {
        NormMode::Exact => m.singular_values().max(),
        NormMode::Surrogate => m.norm(),
    }
}

/// `||mean_offset|| + sqrt(m(eps, n)) ||cov_factor||`, an upper bound on the
/// `1 - eps` quantile of `||x - a||` for `x ~ N(a + mean_offset, F F^T)`.
pub fn quantile_upper_bound(
    mean_offset: &DVector<f64>,
    cov_factor: &DMatrix<f64>,
    eps: f64,
    n: usize,
    mode: NormMode,
) -> Result<f64> {
    if mean_offset.len() != n || cov_factor.nrows() != n {
        return Err(Error::DimensionMismatch {
            context: "quantile bound dimension",
            expected: n,
            found: mean_offset.len(),
        });
    }
    Ok(mean_offset.norm() + chi2_quantile(eps, n)?.sqrt() * factor_norm(cov_factor, mode))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Regularized lower incomplete gamma by its power series.
    fn reg_gamma_p(a: f64, x: f64) -> f64 {
        let mut term = 1.0 / a;
        let mut sum = term;
        for n in 1..2000 {
            term *= x / (a + n as f64);
            sum += term;
            if term < sum * 1e-17 {
                break;
            }
        }
        let ln_gamma_a = if a == 1.5 {
            (0.5 * std::f64::consts::PI.sqrt()).ln()
        } else {
            panic!("oracle only covers a = 3/2")
        };
        (sum.ln() + a * x.ln() - x - ln_gamma_a).exp()
    }

    fn bisect_quantile(eps: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, 100.0);
        while hi - lo > 1e-12 {
            let mid = 0.5 * (lo + hi);
            if reg_gamma_p(1.5, mid / 2.0) < 1.0 - eps {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn matches_incomplete_gamma_oracle() {
        for eps in [0.001, 0.01, 0.05, 0.5] {
            let oracle = bisect_quantile(eps);
            let q = chi2_quantile(eps, 3).unwrap();
            assert!((q - oracle).abs() < 1e-8, "eps {eps}: {q} vs {oracle}");
        }
        assert!((bisect_quantile(0.001) - 16.266).abs() < 1e-3);
        assert!((bisect_quantile(0.01) - 11.345).abs() < 1e-3);
    }

    #[test]
    fn quantile_vanishes_as_risk_approaches_one() {
        assert!(chi2_quantile(1.0 - 1e-12, 3).unwrap() < 1e-6);
        assert!(chi2_quantile(0.0, 3).is_err());
        assert!(chi2_quantile(1.0, 3).is_err());
        assert!(chi2_quantile(0.1, 0).is_err());
    }

    #[test]
    fn bound_special_cases() {
        let m = DVector::from_vec(vec![3.0, 4.0, 0.0]);
        let zero = DMatrix::zeros(3, 5);
        for mode in [NormMode::Exact, NormMode::Surrogate] {
            assert_eq!(quantile_upper_bound(&m, &zero, 0.001, 3, mode).unwrap(), 5.0);
        }
        let q = quantile_upper_bound(&DVector::zeros(3), &DMatrix::identity(3, 3), 0.001, 3, NormMode::Exact).unwrap();
        assert!((q - 4.033).abs() < 1e-3);
        assert!(quantile_upper_bound(&m, &zero, 0.001, 2, NormMode::Exact).is_err());
    }

    #[test]
    fn frobenius_dominates_spectral() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let f = DMatrix::from_fn(3, 9, |_, _| rng.random_range(-1.0..1.0));
            let m = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let s = quantile_upper_bound(&m, &f, 0.001, 3, NormMode::Exact).unwrap();
            let fr = quantile_upper_bound(&m, &f, 0.001, 3, NormMode::Surrogate).unwrap();
            assert!(fr >= s - 1e-14);
        }
    }
}
