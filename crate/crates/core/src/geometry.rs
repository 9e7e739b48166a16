//! Half-space geometry: space-time points, the cycloidal and parabolic
//! distances, and sampled Hölder / weighted sup-norm estimators.
//!
//! The cycloidal distance
//!
//! ```text
//!              Σ_i |x¹_i − x²_i|
//! s(P1,P2) = ───────────────────────────────────────────── + √|t1 − t2|
//!            √x¹_d + √x²_d + √(Σ_{i<d} |x¹_i − x²_i|)
//! ```
//!
//! is adapted to the `√x_d` degeneracy of the diffusion: functions like `√x_d`
//! are Lipschitz in `s` up to the boundary while they are not in the usual
//! parabolic distance `ρ = Σ|Δx_i| + √|Δt|`. Away from `x_d = 0` the two are
//! equivalent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::keyed_uniform;
use crate::scalar::Scalar;

/// A point `(t, x)` of `[0, ∞) × H̄` where `H̄ = R^{d−1} × [0, ∞)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimePoint<T> {
    pub t: T,
    pub x: Vec<T>,
}

impl<T: Scalar> SpaceTimePoint<T> {
    /// Checked constructor: `d ≥ 1`, `t ≥ 0` and `x_d ≥ 0`.
    pub fn new(t: T, x: Vec<T>) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::InvalidParameter { name: "x", reason: "dimension must be at least 1".into() });
        }
        if !(t >= T::zero()) {
            return Err(Error::InvalidParameter { name: "t", reason: format!("time {t} is negative") });
        }
        let p = Self { t, x };
        p.check_half_space()?;
        Ok(p)
    }

    /// Constructor without the half-space check, for probing extensions.
    pub fn unchecked(t: T, x: Vec<T>) -> Self {
        Self { t, x }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.x.len()
    }

    /// The degenerate coordinate `x_d`.
    #[inline]
    pub fn xd(&self) -> T {
        self.x[self.x.len() - 1]
    }

    pub fn check_half_space(&self) -> Result<()> {
        let xd = self.xd();
        if xd >= T::zero() {
            Ok(())
        } else {
            Err(Error::OutsideHalfSpace(xd.as_f64()))
        }
    }

    /// Euclidean norm of the spatial part.
    pub fn spatial_norm(&self) -> T {
        self.x.iter().map(|&v| v * v).sum::<T>().sqrt()
    }
}

fn check_pair<T: Scalar>(p1: &SpaceTimePoint<T>, p2: &SpaceTimePoint<T>) -> Result<()> {
    if p1.dim() != p2.dim() {
        return Err(Error::DimensionMismatch { expected: p1.dim(), got: p2.dim() });
    }
    Ok(())
}

/// Cycloidal distance `s(P1, P2)`.
pub fn cycloidal_distance<T: Scalar>(p1: &SpaceTimePoint<T>, p2: &SpaceTimePoint<T>) -> Result<T> {
    check_pair(p1, p2)?;
    p1.check_half_space()?;
    p2.check_half_space()?;
    Ok(cycloidal_unchecked(p1, p2))
}

#[inline]
pub(crate) fn cycloidal_unchecked<T: Scalar>(p1: &SpaceTimePoint<T>, p2: &SpaceTimePoint<T>) -> T {
    let d = p1.dim();
    let tangential: T = (0..d - 1).map(|i| (p1.x[i] - p2.x[i]).abs()).sum();
    let spatial = tangential + (p1.x[d - 1] - p2.x[d - 1]).abs();
    let time = (p1.t - p2.t).abs().sqrt();
    if spatial == T::zero() {
        return time;
    }
    let denom = p1.xd().sqrt() + p2.xd().sqrt() + tangential.sqrt();
    spatial / denom + time
}

/// Parabolic distance `ρ(P1, P2) = Σ|Δx_i| + √|Δt|`.
pub fn parabolic_distance<T: Scalar>(p1: &SpaceTimePoint<T>, p2: &SpaceTimePoint<T>) -> Result<T> {
    check_pair(p1, p2)?;
    Ok(parabolic_unchecked(p1, p2))
}

#[inline]
pub(crate) fn parabolic_unchecked<T: Scalar>(p1: &SpaceTimePoint<T>, p2: &SpaceTimePoint<T>) -> T {
    let spatial: T = p1.x.iter().zip(&p2.x).map(|(a, b)| (*a - *b).abs()).sum();
    spatial + (p1.t - p2.t).abs().sqrt()
}

/// Which distance a Hölder quotient is measured in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cycloidal,
    Parabolic,
}

impl Metric {
    pub fn distance<T: Scalar>(self, p1: &SpaceTimePoint<T>, p2: &SpaceTimePoint<T>) -> T {
        match self {
            Metric::Cycloidal => cycloidal_unchecked(p1, p2),
            Metric::Parabolic => parabolic_unchecked(p1, p2),
        }
    }
}

/// Closed space-time box `[t0, t1] × Π [lower_i, upper_i]` with `lower_d ≥ 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub t0: f64,
    pub t1: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Region {
    pub fn new(t0: f64, t1: f64, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if !(t0 <= t1) {
            return Err(Error::InvalidParameter { name: "region", reason: format!("t0 = {t0} > t1 = {t1}") });
        }
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::DimensionMismatch { expected: lower.len(), got: upper.len() });
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidParameter { name: "region", reason: "lower bound above upper bound".into() });
        }
        if lower[lower.len() - 1] < 0.0 {
            return Err(Error::OutsideHalfSpace(lower[lower.len() - 1]));
        }
        Ok(Self { t0, t1, lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// True when the region is a slab `x_d ∈ [y0, y1]` with `y0 > 0`.
    pub fn is_interior_slab(&self) -> bool {
        self.lower[self.dim() - 1] > 0.0
    }

    /// Height of the region in the degenerate coordinate.
    pub fn slab_height(&self) -> f64 {
        let d = self.dim() - 1;
        self.upper[d] - self.lower[d]
    }

    fn extent(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    /// Uniform point of the region keyed by `(seed, index, salt)`. When
    /// `near_boundary` the degenerate coordinate is confined to the bottom
    /// tenth of the slab.
    fn sample_point<T: Scalar>(&self, seed: u64, index: u64, salt: u64, near_boundary: bool) -> SpaceTimePoint<T> {
        let d = self.dim();
        let u = |k: u64| keyed_uniform(seed, &[index, salt, k]);
        let t = self.t0 + (self.t1 - self.t0) * u(0);
        let x = (0..d)
            .map(|i| {
                let span = if near_boundary && i == d - 1 { 0.1 * self.extent(i) } else { self.extent(i) };
                T::lit(self.lower[i] + span * u(1 + i as u64))
            })
            .collect();
        SpaceTimePoint { t: T::lit(t), x }
    }

    /// A second point close to `p`: displacement scale log-uniform between
    /// 10⁻³ and 1 times the region extent, clamped into the region.
    fn sample_partner<T: Scalar>(&self, p: &SpaceTimePoint<T>, seed: u64, index: u64) -> SpaceTimePoint<T> {
        let d = self.dim();
        let u = |k: u64| keyed_uniform(seed, &[index, 2, k]);
        let scale = 10f64.powf(-3.0 * u(0));
        let clamp = |v: f64, lo: f64, hi: f64| v.max(lo).min(hi);
        let t = clamp(p.t.as_f64() + scale * (self.t1 - self.t0) * (2.0 * u(1) - 1.0), self.t0, self.t1);
        let x = (0..d)
            .map(|i| {
                let v = p.x[i].as_f64() + scale * self.extent(i) * (2.0 * u(2 + i as u64) - 1.0);
                T::lit(clamp(v, self.lower[i], self.upper[i]))
            })
            .collect();
        SpaceTimePoint { t: T::lit(t), x }
    }

    /// Pair number `k` of the estimator sampling design. Even indices have the
    /// first point in the near-boundary stratum when the region touches `x_d = 0`.
    pub fn sample_pair<T: Scalar>(&self, seed: u64, k: u64) -> (SpaceTimePoint<T>, SpaceTimePoint<T>) {
        let near = !self.is_interior_slab() && k % 2 == 0;
        let p1 = self.sample_point(seed, k, 1, near);
        let p2 = self.sample_partner(&p1, seed, k);
        (p1, p2)
    }
}

/// Sampled Hölder seminorm and sup-norm of a field over a region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolderEstimate {
    pub seminorm: f64,
    pub sup_norm: f64,
    /// Number of admissible pairs scored. Zero flags an empty admissible set.
    pub pairs: usize,
    pub metric: Metric,
    pub alpha: f64,
    /// Pair achieving the seminorm maximum.
    #[serde(skip)]
    pub witness: Option<(SpaceTimePoint<f64>, SpaceTimePoint<f64>)>,
}

impl HolderEstimate {
    pub fn is_empty(&self) -> bool {
        self.pairs == 0
    }

    /// `‖u‖_C + [u]_α`.
    pub fn norm(&self) -> f64 {
        self.sup_norm + self.seminorm
    }
}

fn to_f64_point<T: Scalar>(p: &SpaceTimePoint<T>) -> SpaceTimePoint<f64> {
    SpaceTimePoint { t: p.t.as_f64(), x: p.x.iter().map(|v| v.as_f64()).collect() }
}

/// Estimate `[u]_α` as the maximum of `|u(P1) − u(P2)| / dist^α` over
/// `pair_budget` sampled pairs with `0 < dist ≤ 1`, together with the sampled
/// sup-norm. Pair `k` depends only on `(seed, k)`, so a larger budget with the
/// same seed scores a superset of pairs.
pub fn holder_seminorm_estimate<T, F>(
    field: F,
    region: &Region,
    alpha: f64,
    metric: Metric,
    pair_budget: usize,
    seed: u64,
) -> Result<HolderEstimate>
where
    T: Scalar,
    F: Fn(&SpaceTimePoint<T>) -> T,
{
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter { name: "alpha", reason: format!("{alpha} not in (0,1)") });
    }
    if pair_budget == 0 {
        return Err(Error::InvalidParameter { name: "pair_budget", reason: "must be at least 1".into() });
    }
    let mut est = HolderEstimate { seminorm: 0.0, sup_norm: 0.0, pairs: 0, metric, alpha, witness: None };
    for k in 0..pair_budget as u64 {
        let (p1, p2) = region.sample_pair::<T>(seed, k);
        let (u1, u2) = (field(&p1).as_f64(), field(&p2).as_f64());
        est.sup_norm = est.sup_norm.max(u1.abs()).max(u2.abs());
        let dist = metric.distance(&p1, &p2).as_f64();
        if !(dist > 0.0 && dist <= 1.0) {
            continue;
        }
        est.pairs += 1;
        let q = (u1 - u2).abs() / dist.powf(alpha);
        if q > est.seminorm || est.witness.is_none() {
            est.seminorm = est.seminorm.max(q);
            est.witness = Some((to_f64_point(&p1), to_f64_point(&p2)));
        }
    }
    Ok(est)
}

/// Sampled `sup (1 + |x|)^q |u(t, x)|` over `samples` points of the region.
pub fn weighted_sup_norm<T, F>(field: F, region: &Region, q: f64, samples: usize, seed: u64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&SpaceTimePoint<T>) -> T,
{
    if !(q >= 0.0) {
        return Err(Error::InvalidParameter { name: "q", reason: format!("{q} is negative") });
    }
    let mut sup = 0.0f64;
    for k in 0..samples as u64 {
        let p = region.sample_point::<T>(seed, k, 7, false);
        let w = (1.0 + p.spatial_norm().as_f64()).powf(q);
        sup = sup.max(w * field(&p).as_f64().abs());
    }
    Ok(sup)
}
