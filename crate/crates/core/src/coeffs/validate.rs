//! Sampling-based check of the coefficient conditions: boundary inflow,
//! near-boundary ellipticity/bounds/cycloidal Hölder continuity (on
//! `x_d ≤ 2`), interior ellipticity/parabolic Hölder continuity of `x_d a`
//! (on `x_d ≥ 2`) and linear growth.
//!
//! Sampling can certify failure (a witness violating an inequality) but only
//! provides evidence of success.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{holder_seminorm_estimate, HolderEstimate, Metric, Region, SpaceTimePoint};
use crate::linalg::{min_eigenvalue, SmallMatrix};
use crate::rng::keyed_uniform;
use crate::scalar::Scalar;

use super::{CoefficientModel, RegularityBudget};

/// The near/far split `x_d = 2`.
pub const NEAR_FAR_SPLIT: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationConfig {
    /// Time window `[0, t_max]`.
    pub t_max: f64,
    /// Tangential box `[−R, R]^{d−1}`.
    pub tangential_radius: f64,
    /// Far region is `x_d ∈ [2, 2 + far_height]`.
    pub far_height: f64,
    pub point_budget: usize,
    pub pair_budget: usize,
    /// Exponents at which Hölder quotients are reported.
    pub alphas: Vec<f64>,
    pub seed: u64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            t_max: 1.0,
            tangential_radius: 2.0,
            far_height: 8.0,
            point_budget: 4000,
            pair_budget: 4000,
            alphas: vec![0.25, 0.5, 0.75],
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub t: f64,
    pub x: Vec<f64>,
}

impl<T: Scalar> From<&SpaceTimePoint<T>> for Witness {
    fn from(p: &SpaceTimePoint<T>) -> Self {
        Self { t: p.t.as_f64(), x: p.x.iter().map(|v| v.as_f64()).collect() }
    }
}

/// One inequality, its empirical extremum and the point achieving it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClauseReport {
    pub clause: String,
    pub description: String,
    pub passed: bool,
    /// Sampled extremum of the constrained quantity.
    pub empirical: f64,
    /// Declared bound it is compared with.
    pub bound: f64,
    pub witness: Option<Witness>,
}

/// Hölder quotients of every coefficient component at every reported `α`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolderClause {
    pub clause: String,
    pub metric: Metric,
    pub passed: bool,
    /// Largest seminorm over components at the declared `α`.
    pub empirical: f64,
    pub bound: f64,
    pub worst_component: String,
    pub witness: Option<[Witness; 2]>,
    /// `(component, estimates per α)`.
    pub components: Vec<(String, Vec<HolderEstimate>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub declared: RegularityBudget,
    pub passed: bool,
    pub clauses: Vec<ClauseReport>,
    pub holder: Vec<HolderClause>,
    /// Tightest constants consistent with the samples (`α` as declared).
    pub empirical: EmpiricalConstants,
    pub note: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalConstants {
    pub delta: f64,
    #[serde(rename = "K")]
    pub k: f64,
    pub nu: f64,
    pub alpha: f64,
}

impl EmpiricalConstants {
    /// A budget the sampled model satisfies, if the constants are admissible.
    pub fn as_budget(&self) -> Option<RegularityBudget> {
        RegularityBudget::new(self.delta, self.k, self.nu, self.alpha).ok()
    }
}

impl ValidationReport {
    pub fn clause(&self, name: &str) -> Option<&ClauseReport> {
        self.clauses.iter().find(|c| c.clause == name)
    }

    pub fn holder_clause(&self, name: &str) -> Option<&HolderClause> {
        self.holder.iter().find(|c| c.clause == name)
    }
}

struct Probe<'m, T, M: ?Sized> {
    model: &'m M,
    a: SmallMatrix<T>,
    b: Vec<T>,
}

impl<'m, T: Scalar, M: CoefficientModel<T> + ?Sized> Probe<'m, T, M> {
    fn new(model: &'m M) -> Self {
        let d = model.dim();
        Self { model, a: SmallMatrix::zeros(d), b: vec![T::zero(); d] }
    }

    fn eval(&mut self, p: &SpaceTimePoint<T>) -> Result<T> {
        self.model.diffusion(p.t, &p.x, &mut self.a);
        self.model.drift(p.t, &p.x, &mut self.b);
        let c = self.model.killing(p.t, &p.x);
        if !self.a.is_finite() || self.b.iter().any(|v| !v.is_finite()) || !c.is_finite() {
            return Err(Error::Evaluation { t: p.t.as_f64(), x: p.x.iter().map(|v| v.as_f64()).collect() });
        }
        Ok(c)
    }
}

fn sample<T: Scalar>(region: &Region, seed: u64, k: u64, boundary: bool) -> SpaceTimePoint<T> {
    let d = region.dim();
    let u = |j: u64| keyed_uniform(seed, &[k, 11, j]);
    let t = region.t0 + (region.t1 - region.t0) * u(0);
    let x = (0..d)
        .map(|i| {
            if boundary && i == d - 1 {
                T::zero()
            } else {
                T::lit(region.lower[i] + (region.upper[i] - region.lower[i]) * u(1 + i as u64))
            }
        })
        .collect();
    SpaceTimePoint::unchecked(T::lit(t), x)
}

#[derive(Default)]
struct Extremum {
    value: f64,
    witness: Option<Witness>,
    set: bool,
}

impl Extremum {
    fn max(&mut self, v: f64, p: &SpaceTimePoint<impl Scalar>) {
        if !self.set || v > self.value {
            *self = Self { value: v, witness: Some(p.into()), set: true };
        }
    }
    fn min(&mut self, v: f64, p: &SpaceTimePoint<impl Scalar>) {
        if !self.set || v < self.value {
            *self = Self { value: v, witness: Some(p.into()), set: true };
        }
    }
}

/// Check the coefficient conditions for `model` against `budget` (or the
/// model's declared budget).
pub fn validate_coefficients<T, M>(
    model: &M,
    budget: Option<RegularityBudget>,
    cfg: &ValidationConfig,
) -> Result<ValidationReport>
where
    T: Scalar,
    M: CoefficientModel<T> + ?Sized,
{
    let declared = budget
        .or_else(|| model.declared_budget())
        .ok_or(Error::InvalidParameter { name: "budget", reason: "no budget declared or supplied".into() })?;
    declared.check()?;
    let d = model.dim();
    let r = cfg.tangential_radius;
    let mut lower = vec![-r; d];
    let mut upper = vec![r; d];
    lower[d - 1] = 0.0;
    upper[d - 1] = NEAR_FAR_SPLIT;
    let near = Region::new(0.0, cfg.t_max, lower.clone(), upper.clone())?;
    lower[d - 1] = NEAR_FAR_SPLIT;
    upper[d - 1] = NEAR_FAR_SPLIT + cfg.far_height;
    let far = Region::new(0.0, cfg.t_max, lower, upper)?;

    let mut probe = Probe::new(model);
    let (mut c_max, mut bd_min, mut near_ell, mut near_sup, mut far_ell, mut growth, mut asym) = (
        Extremum::default(),
        Extremum::default(),
        Extremum::default(),
        Extremum::default(),
        Extremum::default(),
        Extremum::default(),
        Extremum::default(),
    );

    for k in 0..cfg.point_budget as u64 {
        // boundary layer
        let p = sample::<T>(&near, cfg.seed, 3 * k, true);
        let c = probe.eval(&p)?;
        bd_min.min(probe.b[d - 1].as_f64(), &p);
        c_max.max(c.as_f64(), &p);

        for (region, is_near, salt) in [(&near, true, 3 * k + 1), (&far, false, 3 * k + 2)] {
            let p = sample::<T>(region, cfg.seed, salt, false);
            let c = probe.eval(&p)?;
            let xd = p.xd().as_f64();
            c_max.max(c.as_f64(), &p);
            asym.max(probe.a.max_asymmetry().as_f64(), &p);
            let lam = min_eigenvalue(&probe.a).as_f64();
            let a_abs = probe.a.as_slice().iter().map(|v| v.as_f64().abs());
            if is_near {
                near_ell.min(lam, &p);
                let sup = a_abs.clone().fold(0.0, f64::max)
                    + probe.b.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max)
                    + c.as_f64().abs();
                near_sup.max(sup, &p);
            } else {
                far_ell.min(xd * lam, &p);
            }
            let lin = xd * a_abs.sum::<f64>()
                + probe.b.iter().map(|v| v.as_f64().abs()).sum::<f64>()
                + c.as_f64().abs();
            growth.max(lin / (1.0 + p.spatial_norm().as_f64()), &p);
        }
    }

    let clause = |name: &str, desc: &str, e: Extremum, bound: f64, passed: bool| ClauseReport {
        clause: name.into(),
        description: desc.into(),
        passed,
        empirical: e.value,
        bound,
        witness: e.witness,
    };
    let asym_v = asym.value;
    let (c_v, bd_v, ne_v, ns_v, fe_v, g_v) =
        (c_max.value, bd_min.value, near_ell.value, near_sup.value, far_ell.value, growth.value);
    let clauses = vec![
        clause("symmetry", "a(t,x) symmetric", asym, 1e-10, asym_v <= 1e-10),
        clause("killing_upper_bound", "c(t,x) ≤ K", c_max, declared.k, c_v <= declared.k),
        clause("boundary_inflow", "b_d(t,x',0) ≥ ν", bd_min, declared.nu, bd_v >= declared.nu),
        clause("near_ellipticity", "λ_min(a) ≥ δ on x_d ≤ 2", near_ell, declared.delta, ne_v >= declared.delta),
        clause(
            "near_sup_bound",
            "max|a_ij| + max|b_i| + |c| ≤ K on x_d ≤ 2",
            near_sup,
            declared.k,
            ns_v <= declared.k,
        ),
        clause("far_ellipticity", "λ_min(x_d a) ≥ δ on x_d ≥ 2", far_ell, declared.delta, fe_v >= declared.delta),
        clause(
            "linear_growth",
            "Σ|x_d a_ij| + Σ|b_i| + |c| ≤ K(1 + |x|)",
            growth,
            declared.k,
            g_v <= declared.k,
        ),
    ];

    let holder = vec![
        holder_clause(model, &near, Metric::Cycloidal, false, &declared, cfg)?,
        holder_clause(model, &far, Metric::Parabolic, true, &declared, cfg)?,
    ];

    let k_emp = [c_v, ns_v, g_v, holder[0].empirical, holder[1].empirical]
        .into_iter()
        .fold(f64::MIN_POSITIVE, f64::max);
    let empirical = EmpiricalConstants { delta: ne_v.min(fe_v), k: k_emp, nu: bd_v, alpha: declared.alpha };
    let passed = clauses.iter().all(|c| c.passed) && holder.iter().all(|h| h.passed);
    Ok(ValidationReport {
        declared,
        passed,
        clauses,
        holder,
        empirical,
        note: "sampling-based: a failed clause is certified by its witness; passed clauses are evidence only".into(),
    })
}

fn holder_clause<T, M>(
    model: &M,
    region: &Region,
    metric: Metric,
    weight_a_by_xd: bool,
    declared: &RegularityBudget,
    cfg: &ValidationConfig,
) -> Result<HolderClause>
where
    T: Scalar,
    M: CoefficientModel<T> + ?Sized,
{
    let d = model.dim();
    let mut names = Vec::new();
    for i in 0..d {
        for j in i..d {
            names.push((format!("{}a_{}{}", if weight_a_by_xd { "x_d·" } else { "" }, i + 1, j + 1), 0usize, i, j));
        }
    }
    for i in 0..d {
        names.push((format!("b_{}", i + 1), 1, i, 0));
    }
    names.push(("c".to_string(), 2, 0, 0));

    let mut alphas = cfg.alphas.clone();
    if !alphas.iter().any(|&a| a == declared.alpha) {
        alphas.push(declared.alpha);
    }
    let mut components = Vec::new();
    let (mut worst, mut worst_name, mut witness) = (0.0f64, String::new(), None);
    for (name, kind, i, j) in names {
        let field = |p: &SpaceTimePoint<T>| -> T {
            match kind {
                0 => {
                    let mut a = SmallMatrix::zeros(d);
                    model.diffusion(p.t, &p.x, &mut a);
                    if weight_a_by_xd {
                        p.xd() * a[(i, j)]
                    } else {
                        a[(i, j)]
                    }
                }
                1 => {
                    let mut b = vec![T::zero(); d];
                    model.drift(p.t, &p.x, &mut b);
                    b[i]
                }
                _ => model.killing(p.t, &p.x),
            }
        };
        let mut per_alpha = Vec::new();
        for &alpha in &alphas {
            let est = holder_seminorm_estimate(field, region, alpha, metric, cfg.pair_budget, cfg.seed ^ 0xa5a5)?;
            if alpha == declared.alpha && (est.seminorm > worst || worst_name.is_empty()) {
                worst = est.seminorm;
                worst_name = name.clone();
                witness = est.witness.as_ref().map(|(p, q)| [Witness::from(p), Witness::from(q)]);
            }
            per_alpha.push(est);
        }
        components.push((name, per_alpha));
    }
    let clause = match metric {
        Metric::Cycloidal => "near_holder_cycloidal",
        Metric::Parabolic => "far_holder_parabolic",
    };
    Ok(HolderClause {
        clause: clause.into(),
        metric,
        passed: worst <= declared.k,
        empirical: worst,
        bound: declared.k,
        worst_component: worst_name,
        witness,
        components,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{ConstantCoefficients, HestonModel};

    fn small_cfg() -> ValidationConfig {
        ValidationConfig { point_budget: 600, pair_budget: 600, ..Default::default() }
    }

    #[test]
    fn heston_passes_reference_budget() {
        let m = HestonModel::reference(true);
        let budget = RegularityBudget::new(0.05, 10.0, 0.05, 0.5).unwrap();
        let rep = validate_coefficients(&m, Some(budget), &small_cfg()).unwrap();
        assert!(rep.passed, "{rep:#?}");
        let inflow = rep.clause("boundary_inflow").unwrap();
        assert!((inflow.empirical - 0.06).abs() < 1e-12);
        let ell = rep.clause("near_ellipticity").unwrap();
        assert!((ell.empirical - 0.0659).abs() < 1e-3);
    }

    #[test]
    fn zero_boundary_drift_fails_inflow() {
        let a = SmallMatrix::identity(2);
        let m = ConstantCoefficients::new(a, vec![0.3, 0.0], 0.0).unwrap();
        for nu in [1e-6, 0.05, 1.0] {
            let budget = RegularityBudget::new(0.05, 10.0, nu, 0.5).unwrap();
            let rep = validate_coefficients(&m, Some(budget), &small_cfg()).unwrap();
            let c = rep.clause("boundary_inflow").unwrap();
            assert!(!c.passed);
            assert_eq!(c.witness.as_ref().unwrap().x[1], 0.0);
            assert!(!rep.passed);
        }
    }

    #[test]
    fn self_reported_budget_passes() {
        let m = HestonModel::reference(false);
        let cfg = small_cfg();
        let first = validate_coefficients(&m, None, &cfg).unwrap();
        let budget = first.empirical.as_budget().unwrap();
        let second = validate_coefficients(&m, Some(budget), &cfg).unwrap();
        assert!(second.passed, "{second:#?}");
    }

    #[test]
    fn evaluation_failure_reports_point() {
        struct Nan;
        impl CoefficientModel<f64> for Nan {
            fn dim(&self) -> usize {
                1
            }
            fn diffusion(&self, _t: f64, x: &[f64], out: &mut SmallMatrix<f64>) {
                out[(0, 0)] = if x[0] > 1.0 { f64::NAN } else { 1.0 };
            }
            fn drift(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
                out[0] = 1.0;
            }
        }
        let budget = RegularityBudget::new(0.05, 10.0, 0.05, 0.5).unwrap();
        let err = validate_coefficients(&Nan, Some(budget), &small_cfg()).unwrap_err();
        match err {
            Error::Evaluation { x, .. } => assert!(x[0] > 1.0),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn report_serializes_one_object_per_clause() {
        let m = HestonModel::reference(true);
        let rep = validate_coefficients(&m, None, &small_cfg()).unwrap();
        let v = serde_json::to_value(&rep).unwrap();
        assert_eq!(v["clauses"].as_array().unwrap().len(), 7);
        assert_eq!(v["holder"].as_array().unwrap().len(), 2);
        assert!(v["empirical"]["K"].as_f64().unwrap() > 0.0);
    }
}
