//! Gaussian kernel, weighted norms, and the correntropy weight pair.
//!
//! The robust gain rescales the prior and observation covariances by the
//! pair of kernel weights computed here. Both weights are evaluated at the
//! empirical prediction mean, which makes the prior weight identically one;
//! it is still computed through the literal formula so future variants can
//! plug in a non-degenerate prior residual.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Kernel bandwidth policy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KernelBandwidth {
    /// Fixed bandwidth `sigma > 0`.
    Fixed(f64),
    /// Per-step bandwidth `1 / ||innovation||`, clamped to the engine's cap.
    Adaptive,
    /// The `sigma -> infinity` limit; both weights are forced to 1 and the
    /// robust engine coincides with the plain one.
    Infinite,
}

impl KernelBandwidth {
    pub fn validate(&self) -> Result<()> {
        match self {
            KernelBandwidth::Fixed(sigma) if !(sigma.is_finite() && *sigma > 0.0) => {
                Err(Error::Domain(format!(
                    "fixed kernel bandwidth must be positive and finite, got {sigma}"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// The pair of correntropy weights: `l_r` scales the observation trust,
/// `l_c` the prior trust. Both lie in (0, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightPair {
    pub l_r: f64,
    pub l_c: f64,
}

impl WeightPair {
    /// Unit weights recover the plain ensemble Kalman gain.
    pub fn unit() -> Self {
        WeightPair { l_r: 1.0, l_c: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [("l_r", self.l_r), ("l_c", self.l_c)] {
            if !(value > 0.0 && value <= 1.0) {
                return Err(Error::Domain(format!(
                    "correntropy weight {name} must lie in (0, 1], got {value}"
                )));
            }
        }
        Ok(())
    }
}

/// Gaussian kernel `exp(-residual^2 / (2 sigma^2))`.
pub fn gaussian_kernel(residual: f64, sigma: f64) -> Result<f64> {
    if residual.is_nan() || residual < 0.0 {
        return Err(Error::Domain(format!(
            "kernel residual must be nonnegative, got {residual}"
        )));
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::Domain(format!(
            "kernel bandwidth must be positive, got {sigma}"
        )));
    }
    Ok((-(residual * residual) / (2.0 * sigma * sigma)).exp())
}

/// Weighted norm `sqrt(x^T A^-1 x)`, computed by solving `A z = x` rather
/// than forming the inverse. `A` must be SPD; no regularization happens
/// here (the filter layer jitters before calling in).
pub fn weighted_norm(x: &DVector<f64>, weight: &DMatrix<f64>) -> Result<f64> {
    if weight.nrows() != x.len() || weight.ncols() != x.len() {
        return Err(Error::Dimension(format!(
            "weighted norm needs a {n}x{n} matrix for a length-{n} vector, got {}x{}",
            weight.nrows(),
            weight.ncols(),
            n = x.len()
        )));
    }
    let chol = nalgebra::linalg::Cholesky::new(weight.clone()).ok_or_else(|| {
        Error::NotPositiveDefinite("weighted-norm matrix failed its factorization".into())
    })?;
    let z = chol.solve(x);
    // rounding can push x^T z a hair below zero for tiny x
    Ok(x.dot(&z).max(0.0).sqrt())
}

/// Computes the correntropy weight pair at the prediction mean:
/// `l_r = G_sigma(||y - h(m_hat)||_R)` and
/// `l_c = G_sigma(||m_hat - m_hat||_C) = G_sigma(0) = 1`.
///
/// `sigma = f64::INFINITY` encodes the infinite-bandwidth policy and
/// short-circuits to unit weights without touching the linear solves.
pub fn weights<F>(
    y: &DVector<f64>,
    m_hat: &DVector<f64>,
    c_hat: &DMatrix<f64>,
    r: &DMatrix<f64>,
    observe: F,
    sigma: f64,
) -> Result<WeightPair>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    if sigma == f64::INFINITY {
        return Ok(WeightPair::unit());
    }
    let innovation = y - observe(m_hat);
    let obs_residual = weighted_norm(&innovation, r)?;
    #[allow(clippy::eq_op)]
    let prior_diff = m_hat - m_hat; // prior residual evaluated at the mean itself
    let prior_residual = weighted_norm(&prior_diff, c_hat)?;
    Ok(WeightPair {
        l_r: gaussian_kernel(obs_residual, sigma)?,
        l_c: gaussian_kernel(prior_residual, sigma)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_is_one_at_origin() {
        for sigma in [0.1, 1.0, 100.0] {
            assert_eq!(gaussian_kernel(0.0, sigma).unwrap(), 1.0);
        }
    }

    #[test]
    fn kernel_analytic_point() {
        let sigma = 3.0;
        let value = gaussian_kernel(sigma * std::f64::consts::SQRT_2, sigma).unwrap();
        assert!((value - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn kernel_rejects_bad_arguments() {
        assert!(matches!(gaussian_kernel(1.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(gaussian_kernel(1.0, -2.0), Err(Error::Domain(_))));
        assert!(matches!(
            gaussian_kernel(1.0, f64::NAN),
            Err(Error::Domain(_))
        ));
        assert!(matches!(gaussian_kernel(-1.0, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn kernel_is_monotone_in_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let a: f64 = rng.random::<f64>() * 10.0;
            let b: f64 = a + rng.random::<f64>() * 10.0 + 1e-9;
            let sigma = 0.5 + rng.random::<f64>() * 5.0;
            assert!(
                gaussian_kernel(a, sigma).unwrap() > gaussian_kernel(b, sigma).unwrap(),
                "kernel not decreasing at ({a}, {b}, {sigma})"
            );
        }
    }

    #[test]
    fn kernel_at_infinite_bandwidth_is_exactly_one() {
        for residual in [0.0, 1.0, 1e8] {
            assert_eq!(gaussian_kernel(residual, f64::INFINITY).unwrap(), 1.0);
        }
    }

    #[test]
    fn weighted_norm_examples() {
        let identity = DMatrix::identity(3, 3);
        assert_eq!(weighted_norm(&DVector::zeros(3), &identity).unwrap(), 0.0);
        let x = dvector![3.0, 4.0, 0.0];
        assert!((weighted_norm(&x, &identity).unwrap() - 5.0).abs() < 1e-12);
        // A = diag(4), x = (2): sqrt(2 * 0.25 * 2) = 1
        assert!((weighted_norm(&dvector![2.0], &dmatrix![4.0]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_norm_rejects_bad_inputs() {
        assert!(matches!(
            weighted_norm(&dvector![1.0, 2.0], &dmatrix![1.0]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            weighted_norm(&dvector![1.0], &dmatrix![0.0]),
            Err(Error::NotPositiveDefinite(_))
        ));
    }

    #[test]
    fn weights_with_zero_innovation_are_unit() {
        let m_hat = dvector![0.5, -0.5];
        let c_hat = DMatrix::identity(2, 2);
        let r = dmatrix![1.0];
        let y = dvector![0.0]; // h sums the state -> y = h(m_hat) exactly
        let pair = weights(&y, &m_hat, &c_hat, &r, |x| dvector![x[0] + x[1]], 2.0).unwrap();
        assert_eq!(pair.l_r, 1.0);
        assert_eq!(pair.l_c, 1.0);
    }

    #[test]
    fn weights_with_infinite_policy_are_unit() {
        let m_hat = dvector![10.0];
        let c_hat = dmatrix![3.0];
        let r = dmatrix![0.5];
        let y = dvector![-40.0];
        let pair = weights(&y, &m_hat, &c_hat, &r, |x| x.clone(), f64::INFINITY).unwrap();
        assert_eq!(pair, WeightPair::unit());
    }

    #[test]
    fn weights_scalar_value() {
        // innovation 3, R = 1, sigma = 5 -> l_r = exp(-9/50)
        let pair = weights(
            &dvector![3.0],
            &dvector![0.0],
            &dmatrix![1.0],
            &dmatrix![1.0],
            |x| x.clone(),
            5.0,
        )
        .unwrap();
        assert!((pair.l_r - 0.83527).abs() < 1e-5);
        assert_eq!(pair.l_c, 1.0);
    }

    #[test]
    fn prior_weight_is_always_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let m_hat = dvector![rng.random::<f64>() * 10.0 - 5.0, rng.random::<f64>()];
            let y = dvector![rng.random::<f64>() * 20.0 - 10.0];
            let c_scale = 0.5 + rng.random::<f64>();
            let pair = weights(
                &y,
                &m_hat,
                &(DMatrix::identity(2, 2) * c_scale),
                &dmatrix![0.7],
                |x| dvector![x[0] - x[1]],
                0.3 + rng.random::<f64>() * 9.0,
            )
            .unwrap();
            assert_eq!(pair.l_c, 1.0);
            assert!(pair.l_r > 0.0 && pair.l_r <= 1.0);
        }
    }

    #[test]
    fn observation_weight_decays_with_innovation_and_grows_with_bandwidth() {
        let c_hat = dmatrix![1.0];
        let r = dmatrix![1.0];
        let m_hat = dvector![0.0];
        let at = |y: f64, sigma: f64| {
            weights(&dvector![y], &m_hat, &c_hat, &r, |x| x.clone(), sigma)
                .unwrap()
                .l_r
        };
        assert!(at(1.0, 2.0) > at(3.0, 2.0));
        // |l_r - 1| shrinks monotonically along a doubling bandwidth sequence
        let mut last_gap = f64::INFINITY;
        let mut sigma = 1.0;
        for _ in 0..12 {
            let gap = (at(2.5, sigma) - 1.0).abs();
            assert!(gap < last_gap, "gap {gap} at sigma {sigma}");
            last_gap = gap;
            sigma *= 2.0;
        }
        assert!(last_gap < 1e-6);
    }
}
