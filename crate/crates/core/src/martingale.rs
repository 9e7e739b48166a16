//! Martingale-problem diagnostics along simulated paths.
//!
//! For a test function `v` the process
//! `M^v_t = v(t, X_t) − v(s, X_s) − ∫_s^t (v_u + A_u v)(u, X_u) du`
//! must be a martingale. [`martingale_increments`] builds `M^v` with
//! left-endpoint quadrature, [`martingale_test`] checks
//! `E[φ(X|[s,t_i]) (M_{t_{i+1}} − M_{t_i})] = 0` for adapted probes `φ`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffs::{CoefficientModel, GeneratorWorkspace};
use crate::error::{Error, Result};
use crate::geometry::SpaceTimePoint;
use crate::linalg::SmallMatrix;
use crate::rng::{keyed_u64, keyed_uniform, NoiseStream, CHANNEL_BROWNIAN};
use crate::sdesim::{fill_sigma, simulate_path_into, simulate_sde, PathEnsemble, Scheme, SimConfig, TimeGrid};
use crate::stats::{ks_permutation_quantile, ks_two_sample, quantile, MeanEstimate};

type Matrix = SmallMatrix<f64>;
type ScalarFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
type MatrixFn = Arc<dyn Fn(f64, &[f64], &mut Matrix) + Send + Sync>;

/// Second-order information of a test function.
#[derive(Clone)]
pub enum Hessian {
    /// The plain Hessian `v_{x_i x_j}`.
    Plain(MatrixFn),
    /// The product `x_d v_{x_i x_j}` as one evaluator, continuous up to
    /// `x_d = 0` even where the Hessian itself blows up.
    Weighted(MatrixFn),
}

/// A test function `v(t, x)` with its derivatives.
#[derive(Clone)]
pub struct TestFunction {
    pub name: String,
    pub dim: usize,
    value: ScalarFn,
    time_derivative: ScalarFn,
    gradient: VectorFn,
    hessian: Hessian,
    /// Centre and radius of a ball containing the support, if compact.
    pub support: Option<(Vec<f64>, f64)>,
}

impl std::fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TestFunction").field("name", &self.name).field("dim", &self.dim).finish()
    }
}

/// Result of the finite-difference consistency probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfCheck {
    pub points: usize,
    pub max_relative_error: f64,
}

impl TestFunction {
    /// Builds a test function and verifies the derivative evaluators against
    /// central differences at seeded random points (relative tolerance 1e-4).
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        value: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        time_derivative: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        hessian: Hessian,
        support: Option<(Vec<f64>, f64)>,
    ) -> Result<Self> {
        let v = Self {
            name: name.into(),
            dim,
            value: Arc::new(value),
            time_derivative: Arc::new(time_derivative),
            gradient: Arc::new(gradient),
            hessian,
            support,
        };
        let check = v.self_check(200, 0x7E57)?;
        if check.max_relative_error > 1e-4 {
            return Err(Error::DerivativeCheck(format!(
                "`{}`: derivative evaluators disagree with finite differences (relative error {:.3e})",
                v.name, check.max_relative_error
            )));
        }
        Ok(v)
    }

    /// `v(x) = c · x`.
    pub fn linear(coeffs: Vec<f64>) -> Self {
        let d = coeffs.len();
        let c1 = coeffs.clone();
        let c2 = coeffs.clone();
        Self::new(
            "linear",
            d,
            move |_, x| c1.iter().zip(x).map(|(a, b)| a * b).sum(),
            |_, _| 0.0,
            move |_, _, g| g.copy_from_slice(&c2),
            Hessian::Weighted(Arc::new(|_, _, h: &mut Matrix| h.fill(0.0))),
            None,
        )
        .expect("linear functions pass the derivative check")
    }

    /// `v ≡ c`.
    pub fn constant(dim: usize, c: f64) -> Self {
        Self::new(
            "constant",
            dim,
            move |_, _| c,
            |_, _| 0.0,
            |_, _, g| g.fill(0.0),
            Hessian::Weighted(Arc::new(|_, _, h: &mut Matrix| h.fill(0.0))),
            None,
        )
        .expect("constants pass the derivative check")
    }

    /// `v(t, x) = (T − t) x_d`.
    pub fn time_weighted_height(dim: usize, horizon: f64) -> Self {
        Self::new(
            "time_weighted_height",
            dim,
            move |t, x| (horizon - t) * x[x.len() - 1],
            |_, x| -x[x.len() - 1],
            move |t, _, g| {
                g.fill(0.0);
                let n = g.len();
                g[n - 1] = horizon - t;
            },
            Hessian::Weighted(Arc::new(|_, _, h: &mut Matrix| h.fill(0.0))),
            None,
        )
        .expect("affine functions pass the derivative check")
    }

    /// Smooth bump `exp(1 − 1/(1 − |x − c|²/R²))` on the ball `|x − c| < R`,
    /// zero outside, with value 1 at the centre.
    pub fn radial_bump(center: Vec<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::InvalidParameter { name: "radius", reason: "must be positive".into() });
        }
        let d = center.len();
        let r2 = radius * radius;
        let profile = move |x: &[f64], c: &[f64]| -> Option<(f64, f64, f64)> {
            let s = x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / r2;
            if s >= 1.0 {
                return None;
            }
            let w = 1.0 / (1.0 - s);
            let phi = (1.0 - w).exp();
            // φ'(s), φ''(s)
            Some((phi, -phi * w * w, phi * (w.powi(4) - 2.0 * w.powi(3))))
        };
        let (c1, c2, c3) = (center.clone(), center.clone(), center.clone());
        Self::new(
            "radial_bump",
            d,
            move |_, x| profile(x, &c1).map_or(0.0, |p| p.0),
            |_, _| 0.0,
            move |_, x, g| match profile(x, &c2) {
                None => g.fill(0.0),
                Some((_, d1, _)) => {
                    for i in 0..g.len() {
                        g[i] = d1 * 2.0 * (x[i] - c2[i]) / r2;
                    }
                }
            },
            Hessian::Plain(Arc::new(move |_, x, h: &mut Matrix| match profile(x, &c3) {
                None => h.fill(0.0),
                Some((_, d1, d2)) => {
                    let n = h.dim();
                    for i in 0..n {
                        for j in 0..n {
                            let yi = x[i] - c3[i];
                            let yj = x[j] - c3[j];
                            h[(i, j)] = d2 * 4.0 * yi * yj / (r2 * r2) + if i == j { d1 * 2.0 / r2 } else { 0.0 };
                        }
                    }
                }
            })),
            Some((center, radius)),
        )
    }

    /// `α v + β w`.
    pub fn combine(alpha: f64, v: &TestFunction, beta: f64, w: &TestFunction) -> Result<Self> {
        if v.dim != w.dim {
            return Err(Error::DimensionMismatch { expected: v.dim, got: w.dim });
        }
        let d = v.dim;
        let (v1, w1) = (v.clone(), w.clone());
        let (v2, w2) = (v.clone(), w.clone());
        let (v3, w3) = (v.clone(), w.clone());
        let (v4, w4) = (v.clone(), w.clone());
        Ok(Self {
            name: format!("{alpha}*{}+{beta}*{}", v.name, w.name),
            dim: d,
            value: Arc::new(move |t, x| alpha * v1.value(t, x) + beta * w1.value(t, x)),
            time_derivative: Arc::new(move |t, x| alpha * v2.time_derivative(t, x) + beta * w2.time_derivative(t, x)),
            gradient: Arc::new(move |t, x, g| {
                let mut gw = vec![0.0; g.len()];
                v3.gradient(t, x, g);
                w3.gradient(t, x, &mut gw);
                g.iter_mut().zip(&gw).for_each(|(a, b)| *a = alpha * *a + beta * b);
            }),
            hessian: Hessian::Weighted(Arc::new(move |t, x, h: &mut Matrix| {
                let mut hw = Matrix::zeros(h.dim());
                v4.weighted_hessian(t, x, h);
                w4.weighted_hessian(t, x, &mut hw);
                for (a, b) in h.as_mut_slice().iter_mut().zip(hw.as_slice()) {
                    *a = alpha * *a + beta * b;
                }
            })),
            support: None,
        })
    }

    #[inline]
    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        (self.value)(t, x)
    }

    #[inline]
    pub fn time_derivative(&self, t: f64, x: &[f64]) -> f64 {
        (self.time_derivative)(t, x)
    }

    #[inline]
    pub fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.gradient)(t, x, out)
    }

    pub fn has_weighted_hessian(&self) -> bool {
        matches!(self.hessian, Hessian::Weighted(_))
    }

    /// `x_d · Hessian`.
    pub fn weighted_hessian(&self, t: f64, x: &[f64], out: &mut Matrix) {
        match &self.hessian {
            Hessian::Weighted(f) => f(t, x, out),
            Hessian::Plain(f) => {
                f(t, x, out);
                let xd = x[x.len() - 1];
                out.as_mut_slice().iter_mut().for_each(|v| *v *= xd);
            }
        }
    }

    /// Central-difference comparison of `v_t`, `∇v` and `x_d ∇²v` at seeded
    /// points around the support (or in `[−2, 2]^{d−1} × [0.05, 3]`).
    pub fn self_check(&self, points: usize, seed: u64) -> Result<SelfCheck> {
        let d = self.dim;
        if d == 0 {
            return Err(Error::InvalidParameter { name: "dim", reason: "must be at least 1".into() });
        }
        let eps = 1e-5 * self.support.as_ref().map_or(1.0, |(_, r)| r.min(1.0));
        let mut worst = 0.0f64;
        let (mut g, mut gp, mut gm) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        let mut h = Matrix::zeros(d);
        for k in 0..points as u64 {
            let u = |j: u64| keyed_uniform(seed, &[k, j]);
            let x: Vec<f64> = (0..d)
                .map(|i| match &self.support {
                    Some((c, r)) => c[i] + r * (2.0 * u(i as u64) - 1.0),
                    None => 4.0 * u(i as u64) - 2.0,
                })
                .collect();
            let mut x = x;
            x[d - 1] = x[d - 1].abs().max(0.05) + 2.0 * eps;
            let t = u(99);
            let mut err = |an: f64, fd: f64, scale: f64| worst = worst.max((an - fd).abs() / (1.0 + scale));
            let scale = self.value(t, &x).abs();
            let vt = (self.value(t + eps, &x) - self.value(t - eps, &x)) / (2.0 * eps);
            err(self.time_derivative(t, &x), vt, scale);
            self.gradient(t, &x, &mut g);
            self.weighted_hessian(t, &x, &mut h);
            let gscale = g.iter().fold(scale, |m, v| m.max(v.abs()));
            for i in 0..d {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[i] += eps;
                xm[i] -= eps;
                err(g[i], (self.value(t, &xp) - self.value(t, &xm)) / (2.0 * eps), gscale);
                self.gradient(t, &xp, &mut gp);
                self.gradient(t, &xm, &mut gm);
                for j in 0..d {
                    let fd = x[d - 1] * (gp[j] - gm[j]) / (2.0 * eps);
                    let hs = h.as_slice().iter().fold(gscale, |m, v| m.max(v.abs()));
                    err(h[(i, j)], fd, hs);
                }
            }
        }
        Ok(SelfCheck { points, max_relative_error: worst })
    }
}

/// `M^v` at every grid node of every path, `[path][node]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MartingalePaths {
    pub n_paths: usize,
    pub n_nodes: usize,
    pub values: Vec<f64>,
}

impl MartingalePaths {
    #[inline]
    pub fn path(&self, p: usize) -> &[f64] {
        &self.values[p * self.n_nodes..(p + 1) * self.n_nodes]
    }
}

/// `M^v` along every path, compensator by left-endpoint quadrature.
pub fn martingale_increments<M: CoefficientModel<f64> + ?Sized>(
    ens: &PathEnsemble<f64>,
    model: &M,
    v: &TestFunction,
) -> Result<MartingalePaths> {
    let d = ens.dim;
    if model.dim() != d || v.dim != d {
        return Err(Error::DimensionMismatch { expected: d, got: if model.dim() != d { model.dim() } else { v.dim } });
    }
    let nodes = ens.grid.n_nodes();
    let h = ens.grid.step();
    let mut values = vec![0.0; ens.n_paths() * nodes];
    values.par_chunks_mut(nodes).enumerate().for_each(|(p, out)| {
        let mut ws = GeneratorWorkspace::new(d);
        let (mut g, mut hess) = (vec![0.0; d], Matrix::zeros(d));
        let path = ens.path(p);
        let t0 = ens.grid.node(0);
        let v0 = v.value(t0, &path[..d]);
        let mut compensator = 0.0;
        out[0] = 0.0;
        for k in 0..nodes - 1 {
            let t = ens.grid.node(k);
            let x = &path[k * d..(k + 1) * d];
            let inside = v.support.as_ref().map_or(true, |(c, r)| {
                x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>() < r * r
            });
            if inside {
                v.gradient(t, x, &mut g);
                v.weighted_hessian(t, x, &mut hess);
                compensator += (v.time_derivative(t, x) + ws.apply_weighted(model, t, x, &g, &hess)) * h;
            }
            let xn = &path[(k + 1) * d..(k + 2) * d];
            out[k + 1] = v.value(ens.grid.node(k + 1), xn) - v0 - compensator;
        }
    });
    Ok(MartingalePaths { n_paths: ens.n_paths(), n_nodes: nodes, values })
}

/// The part of a path up to (and including) a node. Probes only ever see this.
pub struct TruncatedPath<'a> {
    pub times: &'a [f64],
    /// `[node][d]`, ending at the left endpoint.
    pub states: &'a [f64],
    pub dim: usize,
}

impl TruncatedPath<'_> {
    pub fn last(&self) -> &[f64] {
        &self.states[self.states.len() - self.dim..]
    }
}

type ProbeFn = Arc<dyn Fn(&TruncatedPath<'_>) -> f64 + Send + Sync>;

/// An adapted functional `φ(X|[s, t_i])`.
#[derive(Clone)]
pub struct Probe {
    pub name: String,
    f: ProbeFn,
}

impl Probe {
    pub fn new(name: impl Into<String>, f: impl Fn(&TruncatedPath<'_>) -> f64 + Send + Sync + 'static) -> Self {
        Self { name: name.into(), f: Arc::new(f) }
    }

    pub fn constant() -> Self {
        Self::new("one", |_| 1.0)
    }

    /// `x_i` at the left endpoint (0-based `i`).
    pub fn coordinate(i: usize) -> Self {
        Self::new(format!("x_{}", i + 1), move |p| p.last()[i])
    }

    /// Running maximum of `x_i` up to the left endpoint.
    pub fn running_max(i: usize) -> Self {
        Self::new(format!("max_x_{}", i + 1), move |p| {
            p.states.chunks(p.dim).map(|s| s[i]).fold(f64::NEG_INFINITY, f64::max)
        })
    }

    pub fn eval(&self, p: &TruncatedPath<'_>) -> f64 {
        (self.f)(p)
    }
}

impl std::fmt::Debug for Probe {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Probe").field("name", &self.name).finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    /// `z_crit < |z| ≤ z_fail`.
    Inconclusive,
    Fail,
    /// Zero sample variance; excluded.
    Degenerate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncrementStatistic {
    pub t_left: f64,
    pub t_right: f64,
    pub probe: String,
    pub mean: f64,
    pub se: f64,
    pub z: f64,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub test_function: String,
    pub n_paths: usize,
    pub z_crit: f64,
    pub z_fail: f64,
    pub statistics: Vec<IncrementStatistic>,
    pub max_abs_z: f64,
    /// No statistic failed (inconclusive ones do not fail the test).
    pub passed: bool,
    /// Every non-degenerate `|z| ≤ z_crit`.
    pub all_within_crit: bool,
}

/// Standardized tests of `E[φ (M_{t_{i+1}} − M_{t_i})] = 0` for every pair of
/// consecutive `levels` (node indices) and every probe.
pub fn martingale_test(
    name: &str,
    ens: &PathEnsemble<f64>,
    m: &MartingalePaths,
    levels: &[usize],
    probes: &[Probe],
    z_crit: f64,
    z_fail: f64,
) -> Result<MartingaleReport> {
    if levels.len() < 2 {
        return Err(Error::InvalidParameter { name: "levels", reason: "need at least two levels".into() });
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) || *levels.last().unwrap() >= m.n_nodes {
        return Err(Error::InvalidParameter { name: "levels", reason: "must be increasing node indices".into() });
    }
    let d = ens.dim;
    let times = ens.grid.nodes();
    let mut statistics = Vec::new();
    for w in levels.windows(2) {
        let (l, r) = (w[0], w[1]);
        for probe in probes {
            let samples: Vec<f64> = (0..m.n_paths)
                .into_par_iter()
                .map(|p| {
                    let tp = TruncatedPath { times: &times[..=l], states: &ens.path(p)[..(l + 1) * d], dim: d };
                    let mp = m.path(p);
                    probe.eval(&tp) * (mp[r] - mp[l])
                })
                .collect();
            let est = MeanEstimate::from_samples(&samples);
            let z = est.z();
            let verdict = if !(est.se > 1e-300) {
                Verdict::Degenerate
            } else if z.abs() <= z_crit {
                Verdict::Pass
            } else if z.abs() <= z_fail {
                Verdict::Inconclusive
            } else {
                Verdict::Fail
            };
            statistics.push(IncrementStatistic {
                t_left: times[l],
                t_right: times[r],
                probe: probe.name.clone(),
                mean: est.mean,
                se: est.se,
                z: if verdict == Verdict::Degenerate { 0.0 } else { z },
                verdict,
            });
        }
    }
    let max_abs_z = statistics.iter().map(|s| s.z.abs()).fold(0.0, f64::max);
    Ok(MartingaleReport {
        test_function: name.to_string(),
        n_paths: m.n_paths,
        z_crit,
        z_fail,
        passed: statistics.iter().all(|s| s.verdict != Verdict::Fail),
        all_within_crit: statistics.iter().all(|s| matches!(s.verdict, Verdict::Pass | Verdict::Degenerate)),
        statistics,
        max_abs_z,
    })
}

/// Per-path Itô-formula residual statistics at one step size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualLevel {
    pub step: f64,
    pub mean_abs_residual: f64,
    pub se: f64,
    pub n_paths: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub test_function: String,
    pub levels: Vec<ResidualLevel>,
    /// `residual(h/2) / residual(h)` for successive levels.
    pub ratios: Vec<f64>,
    /// Least-squares slope of `log residual` against `log h`.
    pub observed_order: f64,
}

/// `v(T, X_T) − v(s, X_s) − Σ (v_t + A v) h − Σ ∇v · σ √h Z` per path, with
/// `Z` regenerated from the ensemble's noise streams. Requires an ensemble
/// from [`simulate_sde`] of `model` and the product-form Hessian of `v`.
pub fn ito_formula_residual<M: CoefficientModel<f64> + ?Sized>(
    ens: &PathEnsemble<f64>,
    model: &M,
    v: &TestFunction,
) -> Result<ResidualLevel> {
    if !v.has_weighted_hessian() {
        return Err(Error::MissingEvaluator("x_d-weighted Hessian"));
    }
    let d = ens.dim;
    if model.dim() != d || v.dim != d {
        return Err(Error::DimensionMismatch { expected: d, got: v.dim });
    }
    if ens.drivers.is_some() || ens.integrability.is_some() {
        return Err(Error::InvalidParameter { name: "ensemble", reason: "noise replay needs an SDE ensemble".into() });
    }
    let grid = ens.grid;
    let h = grid.step();
    let sqrt_h = h.sqrt();
    let residuals: Vec<f64> = (0..ens.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut ws = GeneratorWorkspace::new(d);
            let (mut g, mut hess, mut factor) = (vec![0.0; d], Matrix::zeros(d), Matrix::zeros(d));
            let (mut sigma, mut z) = (vec![0.0; d * d], vec![0.0; d]);
            let mut noise = NoiseStream::new(ens.seed, ens.path_ids[p], CHANNEL_BROWNIAN, d);
            let path = ens.path(p);
            let mut rhs = 0.0;
            for k in 0..grid.n_steps() {
                let t = grid.node(k);
                let x = &path[k * d..(k + 1) * d];
                v.gradient(t, x, &mut g);
                v.weighted_hessian(t, x, &mut hess);
                rhs += (v.time_derivative(t, x) + ws.apply_weighted(model, t, x, &g, &hess)) * h;
                fill_sigma(model, t, x, &mut factor, &mut sigma);
                noise.next_normals(&mut z);
                for i in 0..d {
                    let dw: f64 = (0..d).map(|j| sigma[i * d + j] * z[j]).sum();
                    rhs += g[i] * dw * sqrt_h;
                }
            }
            let n = grid.n_steps();
            let lhs = v.value(grid.node(n), &path[n * d..]) - v.value(grid.node(0), &path[..d]);
            (lhs - rhs).abs()
        })
        .collect();
    let est = MeanEstimate::from_samples(&residuals);
    Ok(ResidualLevel { step: h, mean_abs_residual: est.mean, se: est.se, n_paths: est.n })
}

/// [`ito_formula_residual`] over a ladder of step counts on `[s, s + horizon]`.
pub fn ito_residual_ladder<M: CoefficientModel<f64> + ?Sized>(
    model: &M,
    start: &SpaceTimePoint<f64>,
    horizon: f64,
    steps: &[usize],
    cfg: &SimConfig,
    v: &TestFunction,
) -> Result<ResidualReport> {
    let mut levels = Vec::new();
    for &n in steps {
        let grid = TimeGrid::with_steps(start.t, start.t + horizon, n)?;
        let ens = simulate_sde(model, start, &grid, cfg)?;
        levels.push(ito_formula_residual(&ens, model, v)?);
    }
    let ratios = levels.windows(2).map(|w| w[1].mean_abs_residual / w[0].mean_abs_residual).collect();
    let (lx, ly): (Vec<f64>, Vec<f64>) =
        levels.iter().map(|l| (l.step.ln(), l.mean_abs_residual.max(1e-300).ln())).unzip();
    let (order, _) = crate::stats::linear_fit(&lx, &ly);
    Ok(ResidualReport { test_function: v.name.clone(), levels, ratios, observed_order: order })
}

/// Configuration of the strong-Markov restart test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartConfig {
    /// Stop at the first node with `x_d ≤ level`.
    pub level: f64,
    /// ... or at `start.t + t_cap`.
    pub t_cap: f64,
    /// Continuation horizon `u`.
    pub horizon: f64,
    pub step: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub restart_seed: u64,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_min_per_bin")]
    pub min_per_bin: usize,
    #[serde(default = "default_ks_threshold")]
    pub ks_threshold: f64,
    /// Added to `X(τ)` before restarting; a negative control.
    #[serde(default)]
    pub perturbation: Option<Vec<f64>>,
    /// Permutation resamples for the reported null quantile (0 disables).
    #[serde(default)]
    pub null_resamples: usize,
}

fn default_bins() -> usize {
    4
}
fn default_min_per_bin() -> usize {
    500
}
fn default_ks_threshold() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartBin {
    pub xd_low: f64,
    pub xd_high: f64,
    pub count: usize,
    /// One KS distance per test function.
    pub ks: Vec<f64>,
    pub ks_null_95: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartReport {
    pub paths: usize,
    pub hits: usize,
    pub bins: Vec<RestartBin>,
    pub merged_bins: usize,
    pub max_ks: f64,
    pub ks_threshold: f64,
    pub passed: bool,
}

/// A scalar functional `g(x)` of the state at `τ + u`.
pub type StateFunctional = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

pub fn coordinate_functionals(d: usize) -> Vec<StateFunctional> {
    (0..d).map(|i| Arc::new(move |x: &[f64]| x[i]) as StateFunctional).collect()
}

/// Compares `g(X(τ + u))` along the original paths with `g` of fresh
/// simulations restarted from `(τ, X(τ))` with independent noise, in quantile
/// bins of `X_d(τ)`. Only paths that hit the level are used.
pub fn strong_markov_restart_test<M: CoefficientModel<f64> + ?Sized>(
    model: &M,
    start: &SpaceTimePoint<f64>,
    cfg: &RestartConfig,
    g: &[StateFunctional],
) -> Result<RestartReport> {
    let d = model.dim();
    if start.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: start.dim() });
    }
    start.check_half_space()?;
    if !(cfg.horizon > 0.0) || !(cfg.t_cap > 0.0) || cfg.bins == 0 {
        return Err(Error::InvalidParameter { name: "restart", reason: "need u > 0, t_cap > 0 and at least one bin".into() });
    }
    let cap_steps = TimeGrid::new(0.0, cfg.t_cap, cfg.step)?.n_steps();
    let u_steps = TimeGrid::new(0.0, cfg.horizon, cfg.step)?.n_steps();
    let total = cap_steps + u_steps;
    let h = cfg.step;

    // (X_d(τ), g(continuation), g(restart)) for hitting paths
    let records: Vec<Option<(f64, Vec<f64>, Vec<f64>)>> = (0..cfg.n_paths as u64)
        .into_par_iter()
        .map(|p| {
            let mut buf = vec![0.0; (total + 1) * d];
            simulate_path_into(model, start.t, &start.x, h, total, cfg.seed, p, 0, cfg.scheme, &mut buf);
            let k = (0..=cap_steps).find(|&k| buf[k * d + d - 1] <= cfg.level)?;
            let x_tau = buf[k * d..(k + 1) * d].to_vec();
            let cont = &buf[(k + u_steps) * d..(k + u_steps + 1) * d];
            let mut x0 = x_tau.clone();
            if let Some(shift) = &cfg.perturbation {
                x0.iter_mut().zip(shift).for_each(|(a, b)| *a += b);
                x0[d - 1] = x0[d - 1].max(0.0);
            }
            let mut fresh = vec![0.0; (u_steps + 1) * d];
            let restart_stream = keyed_u64(cfg.restart_seed, &[p]);
            simulate_path_into(
                model,
                start.t + k as f64 * h,
                &x0,
                h,
                u_steps,
                cfg.restart_seed,
                restart_stream,
                0,
                cfg.scheme,
                &mut fresh,
            );
            let rest = &fresh[u_steps * d..];
            Some((x_tau[d - 1], g.iter().map(|f| f(cont)).collect(), g.iter().map(|f| f(rest)).collect()))
        })
        .collect();
    let hits: Vec<(f64, Vec<f64>, Vec<f64>)> = records.into_iter().flatten().collect();

    // quantile edges on X_d(τ), then merge sparse bins into their neighbour
    let mut xs: Vec<f64> = hits.iter().map(|r| r.0).collect();
    let mut edges: Vec<f64> = (0..=cfg.bins).map(|i| quantile(&mut xs, i as f64 / cfg.bins as f64)).collect();
    edges.dedup();
    if edges.len() < 2 {
        edges = vec![xs.first().copied().unwrap_or(0.0), xs.last().copied().unwrap_or(0.0)];
    }
    let bin_of = |x: f64, edges: &[f64]| -> usize {
        let nb = edges.len() - 1;
        (1..nb).take_while(|&i| x >= edges[i]).count()
    };
    let mut merged = 0;
    loop {
        let nb = edges.len() - 1;
        let mut counts = vec![0usize; nb];
        hits.iter().for_each(|r| counts[bin_of(r.0, &edges)] += 1);
        match counts.iter().position(|&c| c < cfg.min_per_bin) {
            Some(i) if nb > 1 => {
                // drop the inner edge shared with the smaller neighbour
                let drop = if i == 0 {
                    1
                } else if i == nb - 1 || counts[i - 1] <= counts[i + 1] {
                    i
                } else {
                    i + 1
                };
                edges.remove(drop);
                merged += 1;
            }
            _ => break,
        }
    }

    let nb = edges.len() - 1;
    let mut bins = Vec::with_capacity(nb);
    for b in 0..nb {
        let members: Vec<&(f64, Vec<f64>, Vec<f64>)> = hits.iter().filter(|r| bin_of(r.0, &edges) == b).collect();
        let mut ks = Vec::new();
        let mut null = Vec::new();
        for j in 0..g.len() {
            let a: Vec<f64> = members.iter().map(|r| r.1[j]).collect();
            let c: Vec<f64> = members.iter().map(|r| r.2[j]).collect();
            ks.push(if members.is_empty() { 0.0 } else { ks_two_sample(&a, &c) });
            if cfg.null_resamples > 0 && !members.is_empty() {
                null.push(ks_permutation_quantile(&a, &c, cfg.null_resamples, 0.95, cfg.seed ^ (b * 31 + j) as u64));
            }
        }
        bins.push(RestartBin {
            xd_low: edges[b],
            xd_high: edges[b + 1],
            count: members.len(),
            ks,
            ks_null_95: (cfg.null_resamples > 0).then_some(null),
        });
    }
    let max_ks = bins.iter().flat_map(|b| b.ks.iter().copied()).fold(0.0, f64::max);
    Ok(RestartReport {
        paths: cfg.n_paths,
        hits: hits.len(),
        merged_bins: merged,
        passed: !hits.is_empty() && max_ks <= cfg.ks_threshold,
        bins,
        max_ks,
        ks_threshold: cfg.ks_threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{BreakMode, BrokenGenerator, ConstantCoefficients, HestonModel};
    use crate::linalg::SmallMatrix;

    fn heston_ensemble(n: usize, steps: usize, seed: u64) -> (HestonModel<f64>, PathEnsemble<f64>) {
        let m = HestonModel::reference(false);
        let start = SpaceTimePoint::new(0.0, vec![0.0, 0.09]).unwrap();
        let g = TimeGrid::with_steps(0.0, 1.0, steps).unwrap();
        let ens = simulate_sde(&m, &start, &g, &SimConfig::new(n, seed, Scheme::FullTruncation)).unwrap();
        (m, ens)
    }

    #[test]
    fn builtin_functions_pass_self_check() {
        for v in [
            TestFunction::linear(vec![1.0, -2.0]),
            TestFunction::constant(2, 3.0),
            TestFunction::time_weighted_height(2, 1.0),
            TestFunction::radial_bump(vec![0.0, 0.1], 0.5).unwrap(),
            TestFunction::radial_bump(vec![0.0, 0.0], 0.3).unwrap(),
        ] {
            assert!(v.self_check(300, 5).unwrap().max_relative_error < 1e-4, "{}", v.name);
        }
    }

    #[test]
    fn small_bumps_pass_self_check() {
        for (k, r) in [0.01, 0.03, 0.05, 0.0814, 0.1, 0.2].into_iter().enumerate() {
            for center in [vec![0.0, 0.0], vec![-0.7, 0.3], vec![0.2, 0.01]] {
                let v = TestFunction::radial_bump(center, r).unwrap();
                assert!(v.self_check(500, k as u64).unwrap().max_relative_error < 1e-4);
            }
        }
    }

    #[test]
    fn wrong_derivative_is_rejected() {
        let r = TestFunction::new(
            "bad",
            1,
            |_, x| x[0] * x[0],
            |_, _| 0.0,
            |_, x, g| g[0] = x[0],
            Hessian::Plain(Arc::new(|_, _, h: &mut SmallMatrix<f64>| h[(0, 0)] = 2.0)),
            None,
        );
        assert!(matches!(r, Err(Error::DerivativeCheck(_))));
    }

    #[test]
    fn zero_model_gives_zero_martingale() {
        let m = ConstantCoefficients::<f64>::zero(2);
        let start = SpaceTimePoint::new(0.0, vec![0.1, 0.2]).unwrap();
        let g = TimeGrid::with_steps(0.0, 1.0, 16).unwrap();
        let ens = simulate_sde(&m, &start, &g, &SimConfig::new(4, 0, Scheme::FullTruncation)).unwrap();
        let v = TestFunction::radial_bump(vec![0.0, 0.0], 1.0).unwrap();
        let mp = martingale_increments(&ens, &m, &v).unwrap();
        assert!(mp.values.iter().all(|&x| x == 0.0));
        let rep = martingale_test("bump", &ens, &mp, &[0, 8, 16], &[Probe::constant()], 3.0, 5.0).unwrap();
        assert!(rep.statistics.iter().all(|s| s.verdict == Verdict::Degenerate));
        assert!(rep.passed);
    }

    #[test]
    fn starts_at_zero_and_is_linear() {
        let (m, ens) = heston_ensemble(50, 64, 2);
        let v = TestFunction::radial_bump(vec![0.0, 0.1], 0.5).unwrap();
        let w = TestFunction::linear(vec![1.0, 1.0]);
        let vw = TestFunction::combine(2.0, &v, -0.5, &w).unwrap();
        let (mv, mw, mvw) = (
            martingale_increments(&ens, &m, &v).unwrap(),
            martingale_increments(&ens, &m, &w).unwrap(),
            martingale_increments(&ens, &m, &vw).unwrap(),
        );
        for p in 0..50 {
            assert_eq!(mv.path(p)[0], 0.0);
            for k in 0..mv.n_nodes {
                let lhs = mvw.path(p)[k];
                let rhs = 2.0 * mv.path(p)[k] - 0.5 * mw.path(p)[k];
                assert!((lhs - rhs).abs() < 1e-12, "{lhs} {rhs}");
            }
        }
    }

    #[test]
    fn far_bump_is_identically_zero() {
        let (m, ens) = heston_ensemble(50, 64, 3);
        let v = TestFunction::radial_bump(vec![20.0, 20.0], 1.0).unwrap();
        let mp = martingale_increments(&ens, &m, &v).unwrap();
        assert!(mp.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn linear_function_is_a_martingale_and_broken_drift_is_detected() {
        let (m, ens) = heston_ensemble(4000, 64, 4);
        let v = TestFunction::linear(vec![1.0, 1.0]);
        let levels = [0, 16, 32, 64];
        let probes = [Probe::constant(), Probe::coordinate(1)];
        let good = martingale_test("lin", &ens, &martingale_increments(&ens, &m, &v).unwrap(), &levels, &probes, 3.0, 5.0)
            .unwrap();
        assert!(good.passed, "{:?}", good.statistics);
        let broken = BrokenGenerator { inner: m, mode: BreakMode::Drift };
        let bad = martingale_test("lin", &ens, &martingale_increments(&ens, &broken, &v).unwrap(), &levels, &probes, 3.0, 5.0)
            .unwrap();
        assert!(!bad.passed && bad.max_abs_z > 5.0);
    }

    #[test]
    fn test_needs_two_levels() {
        let (m, ens) = heston_ensemble(5, 8, 1);
        let mp = martingale_increments(&ens, &m, &TestFunction::linear(vec![1.0, 0.0])).unwrap();
        assert!(martingale_test("x", &ens, &mp, &[0], &[Probe::constant()], 3.0, 5.0).is_err());
        assert!(martingale_test("x", &ens, &mp, &[4, 2], &[Probe::constant()], 3.0, 5.0).is_err());
    }

    #[test]
    fn ito_residual_of_linear_function_vanishes_without_clipping() {
        // Feller holds comfortably and the start is far from 0: no clipping at all
        let m = HestonModel::new(2.0, 0.5, 0.2, -0.3, 0.0, 0.0, false).unwrap();
        let start = SpaceTimePoint::new(0.0, vec![0.0, 0.5]).unwrap();
        let g = TimeGrid::with_steps(0.0, 1.0, 64).unwrap();
        let ens = simulate_sde(&m, &start, &g, &SimConfig::new(200, 6, Scheme::FullTruncation)).unwrap();
        assert_eq!(crate::sdesim::support_check(&ens).clipped_steps, 0);
        let r = ito_formula_residual(&ens, &m, &TestFunction::linear(vec![0.3, -1.0])).unwrap();
        assert!(r.mean_abs_residual < 1e-12, "{}", r.mean_abs_residual);
    }

    #[test]
    fn ito_residual_of_constant_is_zero_and_plain_hessian_is_rejected() {
        let (m, ens) = heston_ensemble(20, 32, 7);
        let r = ito_formula_residual(&ens, &m, &TestFunction::constant(2, 1.5)).unwrap();
        assert_eq!(r.mean_abs_residual, 0.0);
        let bump = TestFunction::radial_bump(vec![0.0, 0.1], 0.5).unwrap();
        assert!(matches!(ito_formula_residual(&ens, &m, &bump), Err(Error::MissingEvaluator(_))));
    }

    #[test]
    fn ito_residual_decays_with_step() {
        let m = HestonModel::reference(false);
        let start = SpaceTimePoint::new(0.0, vec![0.0, 0.09]).unwrap();
        let v = TestFunction::time_weighted_height(2, 1.0);
        let rep =
            ito_residual_ladder(&m, &start, 1.0, &[64, 128, 256], &SimConfig::new(2000, 8, Scheme::FullTruncation), &v)
                .unwrap();
        for r in &rep.ratios {
            assert!((0.35..=0.65).contains(r), "{:?}", rep);
        }
    }

    fn restart_cfg(n: usize) -> RestartConfig {
        RestartConfig {
            level: 0.01,
            t_cap: 1.0,
            horizon: 0.25,
            step: 1.0 / 128.0,
            n_paths: n,
            seed: 11,
            restart_seed: 12,
            scheme: Scheme::FullTruncation,
            bins: 3,
            min_per_bin: 100,
            ks_threshold: 0.1,
            perturbation: None,
            null_resamples: 0,
        }
    }

    #[test]
    fn deterministic_restart_coincides() {
        let m = ConstantCoefficients::new(SmallMatrix::zeros(2), vec![0.1, -0.4], 0.0).unwrap();
        let start = SpaceTimePoint::new(0.0, vec![0.0, 0.3]).unwrap();
        let mut cfg = restart_cfg(300);
        cfg.min_per_bin = 1;
        let rep = strong_markov_restart_test(&m, &start, &cfg, &coordinate_functionals(2)).unwrap();
        assert_eq!(rep.hits, 300);
        assert_eq!(rep.max_ks, 0.0);
        assert!(rep.passed);
    }

    #[test]
    fn restart_detects_perturbation() {
        let m = HestonModel::reference(false);
        let start = SpaceTimePoint::new(0.0, vec![0.0, 0.09]).unwrap();
        let cfg = restart_cfg(6000);
        let ok = strong_markov_restart_test(&m, &start, &cfg, &coordinate_functionals(2)).unwrap();
        assert!(ok.hits > 500);
        assert!(ok.passed, "{ok:?}");
        let bad = RestartConfig { perturbation: Some(vec![0.0, 0.05]), ..cfg };
        let rep = strong_markov_restart_test(&m, &start, &bad, &coordinate_functionals(2)).unwrap();
        assert!(!rep.passed);
    }
}
