use crate::error::{Error, Result};
use crate::linalg::{sqrt_factorize, SmallMatrix};
use crate::scalar::Scalar;

use super::{CoefficientModel, RegularityBudget};

/// Log-Heston model on `R × [0, ∞)`, state `(log price, variance)`:
///
/// ```text
/// dX_1 = (r − q − X_2/2) dt + √X_2 dW_1
/// dX_2 = κ(θ − X_2) dt + ζ √X_2 (ϱ dW_1 + √(1−ϱ²) dW_2)
/// ```
///
/// so `a = [[1, ϱζ], [ϱζ, ζ²]]`, `b = (r − q − x_2/2, κ(θ − x_2))` and, with
/// killing, `c = −r`.
#[derive(Clone, Debug, PartialEq)]
pub struct HestonModel<T> {
    pub kappa: T,
    pub theta: T,
    pub zeta: T,
    pub rho: T,
    pub r: T,
    pub q: T,
    pub with_killing: bool,
    a: SmallMatrix<T>,
    factor: SmallMatrix<T>,
}

impl<T: Scalar> HestonModel<T> {
    pub fn new(kappa: T, theta: T, zeta: T, rho: T, r: T, q: T, with_killing: bool) -> Result<Self> {
        let bad = |name, reason: &str| Err(Error::InvalidParameter { name, reason: reason.to_string() });
        if !(kappa > T::zero()) {
            return bad("kappa", "must be positive");
        }
        if !(theta > T::zero()) {
            return bad("theta", "must be positive");
        }
        if !(zeta != T::zero() && zeta.is_finite()) {
            return bad("zeta", "must be non-zero");
        }
        if !(rho > -T::one() && rho < T::one()) {
            return bad("rho", "must lie in (-1, 1)");
        }
        if !(r >= T::zero()) {
            return bad("r", "must be non-negative");
        }
        if !q.is_finite() {
            return bad("q", "must be finite");
        }
        let cross = rho * zeta;
        let a = SmallMatrix::from_rows(&[&[T::one(), cross], &[cross, zeta * zeta]]);
        let factor = sqrt_factorize(&a)?;
        Ok(Self { kappa, theta, zeta, rho, r, q, with_killing, a, factor })
    }

    /// κθ: the normal drift on the boundary `x_2 = 0`.
    pub fn boundary_drift(&self) -> T {
        self.kappa * self.theta
    }

    /// `2κθ ≥ ζ²`.
    pub fn feller_satisfied(&self) -> bool {
        T::lit(2.0) * self.kappa * self.theta >= self.zeta * self.zeta
    }

    /// Closed-form `E[X_2(t)]` from `dE/dt = κ(θ − E)`.
    pub fn variance_mean(&self, v0: T, t: T) -> T {
        self.theta + (v0 - self.theta) * (-self.kappa * t).exp()
    }

    pub fn a_matrix(&self) -> &SmallMatrix<T> {
        &self.a
    }
}

impl HestonModel<f64> {
    /// κ = 1.5, θ = 0.04, ζ = 0.3, ϱ = −0.5, r = 0.02, q = 0.
    pub fn reference(with_killing: bool) -> Self {
        Self::new(1.5, 0.04, 0.3, -0.5, 0.02, 0.0, with_killing).expect("reference parameters are valid")
    }
}

impl<T: Scalar> CoefficientModel<T> for HestonModel<T> {
    fn dim(&self) -> usize {
        2
    }

    fn diffusion(&self, _t: T, _x: &[T], out: &mut SmallMatrix<T>) {
        out.clone_from(&self.a);
    }

    fn drift(&self, _t: T, x: &[T], out: &mut [T]) {
        out[0] = self.r - self.q - T::half() * x[1];
        out[1] = self.kappa * (self.theta - x[1]);
    }

    fn killing(&self, _t: T, _x: &[T]) -> T {
        if self.with_killing {
            -self.r
        } else {
            T::zero()
        }
    }

    fn volatility_factor(&self, _t: T, _x: &[T], out: &mut SmallMatrix<T>) {
        out.clone_from(&self.factor);
    }

    fn time_homogeneous(&self) -> bool {
        true
    }

    fn declared_budget(&self) -> Option<RegularityBudget> {
        let d_min = crate::linalg::min_eigenvalue(&self.a).as_f64();
        let nu = self.boundary_drift().as_f64();
        Some(RegularityBudget { delta: 0.5 * d_min, k: 10.0, nu: 0.5 * nu, alpha: 0.5 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_drift_is_kappa_theta() {
        let m = HestonModel::reference(false);
        let mut b = [0.0; 2];
        m.drift(0.0, &[0.7, 0.0], &mut b);
        assert!((b[1] - 0.06).abs() < 1e-15);
        assert!(b[1] > 0.0);
        assert!((b[0] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn sigma_reproduces_xd_a() {
        let m = HestonModel::reference(false);
        let xd = 0.37f64;
        let mut s = SmallMatrix::zeros(2);
        m.volatility_factor(0.0, &[0.0, xd], &mut s);
        let sigma = s.scale(xd.sqrt());
        let expected = m.a_matrix().scale(xd);
        assert!(sigma.gram().max_abs_diff(&expected) < 1e-15);
        assert_eq!(m.a_matrix()[(0, 1)], -0.15);
    }

    #[test]
    fn killing_switch() {
        assert_eq!(HestonModel::reference(false).killing(0.0, &[0.0, 0.1]), 0.0);
        assert_eq!(HestonModel::reference(true).killing(0.0, &[0.0, 0.1]), -0.02);
    }

    #[test]
    fn parameter_domain() {
        assert!(HestonModel::new(0.0, 0.04, 0.3, -0.5, 0.02, 0.0, false).is_err());
        assert!(HestonModel::new(1.5, -0.04, 0.3, -0.5, 0.02, 0.0, false).is_err());
        assert!(HestonModel::new(1.5, 0.04, 0.0, -0.5, 0.02, 0.0, false).is_err());
        assert!(HestonModel::new(1.5, 0.04, 0.3, 1.0, 0.02, 0.0, false).is_err());
        assert!(HestonModel::new(1.5, 0.04, 0.3, -0.5, -0.02, 0.0, false).is_err());
        assert!(HestonModel::new(1.5f32, 0.04, 0.3, -0.5, 0.02, 0.0, false).is_ok());
    }

    #[test]
    fn feller_and_first_moment() {
        let m = HestonModel::reference(false);
        assert!(m.feller_satisfied());
        let e = m.variance_mean(0.09, 1.0);
        assert!((e - (0.04 + 0.05 * (-1.5f64).exp())).abs() < 1e-15);
        assert!((e - 0.05116).abs() < 1e-5);
    }
}
