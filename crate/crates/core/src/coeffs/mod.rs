//! Coefficient models `(a, b, c)` of the degenerate generator
//!
//! ```text
//! A_t v(x) = ½ Σ_ij x_d a_ij(t,x) v_{x_i x_j}(x) + Σ_i b_i(t,x) v_{x_i}(x)
//! ```
//!
//! and the zeroth-order (killing) term `c`. The factor ½ is kept explicit
//! everywhere in this crate: a model stores `a` such that the diffusion matrix
//! of the associated SDE is `σσᵀ = x_d a`, i.e. `σ = √x_d ς` with `ςςᵀ = a`.
//! PDE operators written without the ½ (`Σ x_d ã_ij u_ij`) correspond to
//! `ã = a / 2`.

mod heston;
mod validate;

pub use heston::HestonModel;
pub use validate::{
    validate_coefficients, ClauseReport, HolderClause, ValidationConfig, ValidationReport, Witness,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SpaceTimePoint;
use crate::linalg::{cholesky_into, symmetric_eigen, SmallMatrix};
use crate::scalar::Scalar;

/// Constants `(δ, K, ν, α)` a model declares for its ellipticity, bounds,
/// boundary inflow and Hölder regularity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularityBudget {
    pub delta: f64,
    #[serde(rename = "K")]
    pub k: f64,
    pub nu: f64,
    pub alpha: f64,
}

impl RegularityBudget {
    pub fn new(delta: f64, k: f64, nu: f64, alpha: f64) -> Result<Self> {
        let b = Self { delta, k, nu, alpha };
        b.check()?;
        Ok(b)
    }

    pub fn check(&self) -> Result<()> {
        for (name, v) in [("delta", self.delta), ("K", self.k), ("nu", self.nu)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter { name, reason: format!("{v} is not strictly positive") });
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameter { name: "alpha", reason: format!("{} not in (0,1)", self.alpha) });
        }
        Ok(())
    }
}

/// Where a model's evaluators come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Analytic,
    Gridded,
}

/// Coefficients `a(t,x)` (symmetric `d × d`), `b(t,x)` and `c(t,x)` on
/// `[0, ∞) × H̄`. Evaluators must be pure.
pub trait CoefficientModel<T: Scalar>: Send + Sync {
    fn dim(&self) -> usize;

    /// Writes `a(t, x)`.
    fn diffusion(&self, t: T, x: &[T], out: &mut SmallMatrix<T>);

    /// Writes `b(t, x)`.
    fn drift(&self, t: T, x: &[T], out: &mut [T]);

    /// `c(t, x)`.
    fn killing(&self, _t: T, _x: &[T]) -> T {
        T::zero()
    }

    /// Writes `ς(t, x)` with `ςςᵀ = a(t, x)`: the Cholesky factor, or a
    /// symmetric square root with eigenvalues floored at zero when `a` is only
    /// semidefinite.
    fn volatility_factor(&self, t: T, x: &[T], out: &mut SmallMatrix<T>) {
        let mut a = SmallMatrix::zeros(self.dim());
        self.diffusion(t, x, &mut a);
        factor_or_psd_root(&a, out);
    }

    fn provenance(&self) -> Provenance {
        Provenance::Analytic
    }

    /// True when no coefficient depends on `t`.
    fn time_homogeneous(&self) -> bool {
        false
    }

    fn declared_budget(&self) -> Option<RegularityBudget> {
        None
    }
}

/// Cholesky when possible, PSD square root otherwise.
pub fn factor_or_psd_root<T: Scalar>(a: &SmallMatrix<T>, out: &mut SmallMatrix<T>) {
    if cholesky_into(a, out).is_ok() {
        return;
    }
    let n = a.dim();
    let (vals, vecs) = symmetric_eigen(a);
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = vecs[(i, j)] * vals[j].positive_part().sqrt();
        }
    }
}

macro_rules! forward_model {
    ($ty:ty) => {
        impl<T: Scalar, M: CoefficientModel<T> + ?Sized> CoefficientModel<T> for $ty {
            fn dim(&self) -> usize {
                (**self).dim()
            }
            fn diffusion(&self, t: T, x: &[T], out: &mut SmallMatrix<T>) {
                (**self).diffusion(t, x, out)
            }
            fn drift(&self, t: T, x: &[T], out: &mut [T]) {
                (**self).drift(t, x, out)
            }
            fn killing(&self, t: T, x: &[T]) -> T {
                (**self).killing(t, x)
            }
            fn volatility_factor(&self, t: T, x: &[T], out: &mut SmallMatrix<T>) {
                (**self).volatility_factor(t, x, out)
            }
            fn provenance(&self) -> Provenance {
                (**self).provenance()
            }
            fn time_homogeneous(&self) -> bool {
                (**self).time_homogeneous()
            }
            fn declared_budget(&self) -> Option<RegularityBudget> {
                (**self).declared_budget()
            }
        }
    };
}

forward_model!(&M);
forward_model!(Box<M>);
forward_model!(std::sync::Arc<M>);

/// Evaluate `A_t v` at `p` given `∇v` and the Hessian of `v`.
pub fn apply_generator<T: Scalar, M: CoefficientModel<T> + ?Sized>(
    model: &M,
    gradient: &[T],
    hessian: &SmallMatrix<T>,
    p: &SpaceTimePoint<T>,
) -> Result<T> {
    let d = model.dim();
    if p.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: p.dim() });
    }
    if gradient.len() != d || hessian.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: gradient.len().min(hessian.dim()) });
    }
    p.check_half_space()?;
    if !hessian.is_symmetric(T::lit(1e-10)) {
        return Err(Error::NotSymmetric(hessian.max_asymmetry().as_f64()));
    }
    let mut ws = GeneratorWorkspace::new(d);
    Ok(ws.apply(model, p.t, &p.x, gradient, hessian))
}

/// Scratch buffers for repeated generator evaluation along paths.
#[derive(Clone, Debug)]
pub struct GeneratorWorkspace<T> {
    a: SmallMatrix<T>,
    b: Vec<T>,
}

impl<T: Scalar> GeneratorWorkspace<T> {
    pub fn new(d: usize) -> Self {
        Self { a: SmallMatrix::zeros(d), b: vec![T::zero(); d] }
    }

    /// `½ x_d ⟨a, H⟩ + b·∇v`; the second-order part is skipped on `x_d = 0`.
    pub fn apply<M: CoefficientModel<T> + ?Sized>(
        &mut self,
        model: &M,
        t: T,
        x: &[T],
        gradient: &[T],
        hessian: &SmallMatrix<T>,
    ) -> T {
        model.drift(t, x, &mut self.b);
        let first: T = self.b.iter().zip(gradient).map(|(&b, &g)| b * g).sum();
        let xd = x[x.len() - 1];
        if xd == T::zero() {
            return first;
        }
        model.diffusion(t, x, &mut self.a);
        T::half() * xd * self.a.frobenius(hessian) + first
    }

    /// Same as [`apply`](Self::apply) with the product `x_d · Hessian` supplied
    /// directly, so it stays finite up to the boundary.
    pub fn apply_weighted<M: CoefficientModel<T> + ?Sized>(
        &mut self,
        model: &M,
        t: T,
        x: &[T],
        gradient: &[T],
        xd_hessian: &SmallMatrix<T>,
    ) -> T {
        model.drift(t, x, &mut self.b);
        let first: T = self.b.iter().zip(gradient).map(|(&b, &g)| b * g).sum();
        model.diffusion(t, x, &mut self.a);
        T::half() * self.a.frobenius(xd_hessian) + first
    }
}

/// Spatially constant coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantCoefficients<T> {
    pub a: SmallMatrix<T>,
    pub b: Vec<T>,
    pub c: T,
    factor: SmallMatrix<T>,
}

impl<T: Scalar> ConstantCoefficients<T> {
    pub fn new(a: SmallMatrix<T>, b: Vec<T>, c: T) -> Result<Self> {
        if a.dim() != b.len() {
            return Err(Error::DimensionMismatch { expected: a.dim(), got: b.len() });
        }
        if !a.is_symmetric(T::lit(1e-12)) {
            return Err(Error::NotSymmetric(a.max_asymmetry().as_f64()));
        }
        let mut factor = SmallMatrix::zeros(a.dim());
        factor_or_psd_root(&a, &mut factor);
        Ok(Self { a, b, c, factor })
    }

    /// `a ≡ 0, b ≡ 0, c ≡ 0`.
    pub fn zero(d: usize) -> Self {
        Self::new(SmallMatrix::zeros(d), vec![T::zero(); d], T::zero()).expect("zero model")
    }
}

impl<T: Scalar> CoefficientModel<T> for ConstantCoefficients<T> {
    fn dim(&self) -> usize {
        self.b.len()
    }
    fn diffusion(&self, _t: T, _x: &[T], out: &mut SmallMatrix<T>) {
        out.clone_from(&self.a);
    }
    fn drift(&self, _t: T, _x: &[T], out: &mut [T]) {
        out.copy_from_slice(&self.b);
    }
    fn killing(&self, _t: T, _x: &[T]) -> T {
        self.c
    }
    fn volatility_factor(&self, _t: T, _x: &[T], out: &mut SmallMatrix<T>) {
        out.clone_from(&self.factor);
    }
    fn time_homogeneous(&self) -> bool {
        true
    }
}

/// Which part of the generator a [`BrokenGenerator`] drops.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BreakMode {
    Drift,
    Diffusion,
}

impl std::str::FromStr for BreakMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "drift" => Ok(Self::Drift),
            "diffusion" => Ok(Self::Diffusion),
            other => Err(format!("unknown break mode `{other}` (expected drift|diffusion)")),
        }
    }
}

/// A model with its drift or its diffusion set to zero. Used as a negative
/// control: statistics built from the broken generator must fail.
#[derive(Clone, Debug)]
pub struct BrokenGenerator<M> {
    pub inner: M,
    pub mode: BreakMode,
}

impl<T: Scalar, M: CoefficientModel<T>> CoefficientModel<T> for BrokenGenerator<M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn diffusion(&self, t: T, x: &[T], out: &mut SmallMatrix<T>) {
        match self.mode {
            BreakMode::Diffusion => out.fill(T::zero()),
            BreakMode::Drift => self.inner.diffusion(t, x, out),
        }
    }
    fn drift(&self, t: T, x: &[T], out: &mut [T]) {
        match self.mode {
            BreakMode::Drift => out.iter_mut().for_each(|v| *v = T::zero()),
            BreakMode::Diffusion => self.inner.drift(t, x, out),
        }
    }
    fn killing(&self, t: T, x: &[T]) -> T {
        self.inner.killing(t, x)
    }
    fn volatility_factor(&self, t: T, x: &[T], out: &mut SmallMatrix<T>) {
        match self.mode {
            BreakMode::Diffusion => out.fill(T::zero()),
            BreakMode::Drift => self.inner.volatility_factor(t, x, out),
        }
    }
    fn time_homogeneous(&self) -> bool {
        self.inner.time_homogeneous()
    }
}

/// Replaces every coefficient by NaN on the open lower half-space `x_d < 0`.
/// A scheme that never queries outside `H̄` is unaffected.
#[derive(Clone, Debug)]
pub struct PoisonedExtension<M>(pub M);

impl<T: Scalar, M: CoefficientModel<T>> CoefficientModel<T> for PoisonedExtension<M> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn diffusion(&self, t: T, x: &[T], out: &mut SmallMatrix<T>) {
        if x[x.len() - 1] < T::zero() {
            out.fill(T::nan());
        } else {
            self.0.diffusion(t, x, out)
        }
    }
    fn drift(&self, t: T, x: &[T], out: &mut [T]) {
        if x[x.len() - 1] < T::zero() {
            out.iter_mut().for_each(|v| *v = T::nan());
        } else {
            self.0.drift(t, x, out)
        }
    }
    fn killing(&self, t: T, x: &[T]) -> T {
        if x[x.len() - 1] < T::zero() {
            T::nan()
        } else {
            self.0.killing(t, x)
        }
    }
    fn volatility_factor(&self, t: T, x: &[T], out: &mut SmallMatrix<T>) {
        if x[x.len() - 1] < T::zero() {
            out.fill(T::nan());
        } else {
            self.0.volatility_factor(t, x, out)
        }
    }
    fn time_homogeneous(&self) -> bool {
        self.0.time_homogeneous()
    }
}

/// Coefficients read backwards in time: `(t, x) ↦ coeff(T − t, x)`.
#[derive(Clone, Debug)]
pub struct TimeReversed<M> {
    pub inner: M,
    pub horizon: f64,
}

impl<T: Scalar, M: CoefficientModel<T>> CoefficientModel<T> for TimeReversed<M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn diffusion(&self, t: T, x: &[T], out: &mut SmallMatrix<T>) {
        self.inner.diffusion(T::lit(self.horizon) - t, x, out)
    }
    fn drift(&self, t: T, x: &[T], out: &mut [T]) {
        self.inner.drift(T::lit(self.horizon) - t, x, out)
    }
    fn killing(&self, t: T, x: &[T]) -> T {
        self.inner.killing(T::lit(self.horizon) - t, x)
    }
    fn volatility_factor(&self, t: T, x: &[T], out: &mut SmallMatrix<T>) {
        self.inner.volatility_factor(T::lit(self.horizon) - t, x, out)
    }
    fn provenance(&self) -> Provenance {
        self.inner.provenance()
    }
    fn time_homogeneous(&self) -> bool {
        self.inner.time_homogeneous()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(t: f64, x: &[f64]) -> SpaceTimePoint<f64> {
        SpaceTimePoint::new(t, x.to_vec()).unwrap()
    }

    #[test]
    fn zero_derivatives_give_zero() {
        let m = HestonModel::new(1.5, 0.04, 0.3, -0.5, 0.02, 0.0, true).unwrap();
        let v = apply_generator(&m, &[0.0, 0.0], &SmallMatrix::zeros(2), &pt(0.3, &[0.1, 0.5])).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn boundary_picks_out_normal_drift() {
        let m = HestonModel::new(1.5, 0.04, 0.3, -0.5, 0.02, 0.0, false).unwrap();
        let h = SmallMatrix::from_rows(&[&[3.0, 1.0], &[1.0, 7.0]]);
        let v = apply_generator(&m, &[0.0, 1.0], &h, &pt(0.0, &[0.4, 0.0])).unwrap();
        assert!((v - 1.5 * 0.04).abs() < 1e-15);
    }

    #[test]
    fn one_dimensional_hand_value() {
        let m = ConstantCoefficients::new(SmallMatrix::from_rows(&[&[2.0]]), vec![0.0], 0.0).unwrap();
        let v = apply_generator(&m, &[0.0], &SmallMatrix::from_rows(&[&[1.0]]), &pt(0.0, &[3.0])).unwrap();
        assert_eq!(v, 3.0);
    }

    #[test]
    fn rejects_asymmetric_hessian() {
        let m = ConstantCoefficients::<f64>::zero(2);
        let h = SmallMatrix::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]);
        assert!(matches!(
            apply_generator(&m, &[0.0, 0.0], &h, &pt(0.0, &[0.0, 1.0])),
            Err(Error::NotSymmetric(_))
        ));
    }

    #[test]
    fn broken_generator_drops_parts() {
        let m = HestonModel::new(1.5, 0.04, 0.3, -0.5, 0.02, 0.0, false).unwrap();
        let no_drift = BrokenGenerator { inner: m.clone(), mode: BreakMode::Drift };
        let p = pt(0.0, &[0.0, 0.0]);
        let g = apply_generator(&no_drift, &[1.0, 1.0], &SmallMatrix::zeros(2), &p).unwrap();
        assert_eq!(g, 0.0);
        let no_diff = BrokenGenerator { inner: m, mode: BreakMode::Diffusion };
        let mut a = SmallMatrix::zeros(2);
        no_diff.diffusion(0.0, &[0.0, 1.0], &mut a);
        assert_eq!(a, SmallMatrix::zeros(2));
        assert_eq!("drift".parse::<BreakMode>().unwrap(), BreakMode::Drift);
        assert!("both".parse::<BreakMode>().is_err());
    }

    #[test]
    fn budget_validation() {
        assert!(RegularityBudget::new(0.1, 1.0, 0.1, 0.5).is_ok());
        assert!(RegularityBudget::new(0.0, 1.0, 0.1, 0.5).is_err());
        assert!(RegularityBudget::new(0.1, 1.0, 0.1, 1.0).is_err());
    }

    fn heston() -> HestonModel<f64> {
        HestonModel::new(1.5, 0.04, 0.3, -0.5, 0.02, 0.01, true).unwrap()
    }

    proptest! {
        #[test]
        fn generator_is_linear(
            x1 in -3.0f64..3.0, xd in 0.0f64..4.0, t in 0.0f64..2.0,
            g1 in prop::array::uniform2(-2.0f64..2.0), g2 in prop::array::uniform2(-2.0f64..2.0),
            h1 in prop::array::uniform3(-2.0f64..2.0), h2 in prop::array::uniform3(-2.0f64..2.0),
            alpha in -2.0f64..2.0, beta in -2.0f64..2.0,
        ) {
            let m = heston();
            let p = pt(t, &[x1, xd]);
            let hm = |h: [f64; 3]| SmallMatrix::from_rows(&[&[h[0], h[1]], &[h[1], h[2]]]);
            let (a1, a2) = (hm(h1), hm(h2));
            let lhs_g = [alpha * g1[0] + beta * g2[0], alpha * g1[1] + beta * g2[1]];
            let lhs_h = SmallMatrix::from_fn(2, |i, j| alpha * a1[(i, j)] + beta * a2[(i, j)]);
            let lhs = apply_generator(&m, &lhs_g, &lhs_h, &p).unwrap();
            let rhs = alpha * apply_generator(&m, &g1, &a1, &p).unwrap() + beta * apply_generator(&m, &g2, &a2, &p).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }

        #[test]
        fn boundary_ignores_hessian(x1 in -3.0f64..3.0, h in prop::array::uniform3(-50.0f64..50.0), g in prop::array::uniform2(-2.0f64..2.0)) {
            let m = heston();
            let p = pt(0.5, &[x1, 0.0]);
            let hm = SmallMatrix::from_rows(&[&[h[0], h[1]], &[h[1], h[2]]]);
            let with = apply_generator(&m, &g, &hm, &p).unwrap();
            let without = apply_generator(&m, &g, &SmallMatrix::zeros(2), &p).unwrap();
            prop_assert_eq!(with, without);
        }
    }
}
