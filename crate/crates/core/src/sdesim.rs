//! Euler simulation of the degenerate SDE `dX = b dt + √x_d ς dW` and of
//! general Itô processes `dX = β dt + ξ dW` on the closed half-space.
//!
//! Two boundary treatments are provided:
//!
//! * [`Scheme::FullTruncation`] keeps an unclipped internal state `y`, evaluates
//!   every coefficient at `(y', y_d⁺)` and stores `(y', y_d⁺)`;
//! * [`Scheme::AbsorbedEuler`] clips the state itself after every step.
//!
//! Neither scheme ever evaluates a coefficient outside `H̄`. Clipping is
//! counted per path, never silent.
//!
//! Paths are independent and draw their noise from counter-based streams keyed
//! by `(seed, path id)`, so an ensemble can be produced in blocks or in
//! parallel with bit-identical results.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffs::CoefficientModel;
use crate::error::{Error, Result};
use crate::geometry::SpaceTimePoint;
use crate::linalg::SmallMatrix;
use crate::rng::{NoiseStream, CHANNEL_AUX, CHANNEL_BROWNIAN};
use crate::scalar::Scalar;

/// Uniform grid `start = t_0 < t_1 < … < t_n = end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    start: f64,
    step: f64,
    n_steps: usize,
}

impl TimeGrid {
    /// Grid with step `h`; `(end − start)/h` must be an integer up to round-off.
    pub fn new(start: f64, end: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || !(end >= start) {
            return Err(Error::InvalidParameter { name: "grid", reason: format!("start {start}, end {end}, step {step}") });
        }
        let ratio = (end - start) / step;
        let n = ratio.round();
        if (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::InvalidParameter { name: "grid", reason: format!("(end − start)/h = {ratio} is not integral") });
        }
        Ok(Self { start, step, n_steps: n as usize })
    }

    pub fn with_steps(start: f64, end: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 || !(end > start) {
            return Err(Error::InvalidParameter { name: "grid", reason: "need end > start and at least one step".into() });
        }
        Ok(Self { start, step: (end - start) / n_steps as f64, n_steps })
    }

    #[inline]
    pub fn start(&self) -> f64 {
        self.start
    }

    #[inline]
    pub fn end(&self) -> f64 {
        self.node(self.n_steps)
    }

    #[inline]
    pub fn step(&self) -> f64 {
        self.step
    }

    #[inline]
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    #[inline]
    pub fn node(&self, k: usize) -> f64 {
        self.start + k as f64 * self.step
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_nodes()).map(|k| self.node(k)).collect()
    }

    /// Index of the node equal to `t` up to `1e-9 · h`.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let k = ((t - self.start) / self.step).round();
        if k < 0.0 || k as usize > self.n_steps {
            return None;
        }
        ((self.node(k as usize) - t).abs() <= 1e-9 * self.step).then_some(k as usize)
    }
}

/// Boundary treatment of the Euler scheme.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    FullTruncation,
    AbsorbedEuler,
}

/// Ensemble size and randomness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default)]
    pub scheme: Scheme,
    /// Id of the first path; ids select noise streams.
    #[serde(default)]
    pub first_path: u64,
}

impl SimConfig {
    pub fn new(n_paths: usize, seed: u64, scheme: Scheme) -> Self {
        Self { n_paths, seed, scheme, first_path: 0 }
    }

    pub fn block(mut self, first_path: u64, n_paths: usize) -> Self {
        self.first_path = first_path;
        self.n_paths = n_paths;
        self
    }
}

/// Per-path clipping record.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClipStats {
    /// Steps whose proposed `x_d` was negative.
    pub clips: u32,
    /// Most negative proposed `x_d` (0 when never clipped).
    pub min_pre_clip: f64,
}

impl ClipStats {
    #[inline]
    fn record(&mut self, proposed: f64) {
        if proposed < 0.0 {
            self.clips += 1;
            self.min_pre_clip = self.min_pre_clip.min(proposed);
        }
    }
}

/// Per-step `β` and `ξξ*` along each path of an Itô-process ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct DriverRecords<T> {
    /// `[path][step][d]`
    pub beta: Vec<T>,
    /// `[path][step][d·d]`
    pub xi2: Vec<T>,
}

/// Sample paths on a [`TimeGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct PathEnsemble<T> {
    pub grid: TimeGrid,
    pub dim: usize,
    pub seed: u64,
    pub scheme: Scheme,
    pub path_ids: Vec<u64>,
    /// `[path][node][d]`
    pub states: Vec<T>,
    pub clip: Vec<ClipStats>,
    pub drivers: Option<DriverRecords<T>>,
    /// `Σ_k (|β_k| + |ξ_kξ_k*|) h` per path, for Itô-process ensembles.
    pub integrability: Option<Vec<f64>>,
}

impl<T: Scalar> PathEnsemble<T> {
    pub fn n_paths(&self) -> usize {
        self.path_ids.len()
    }

    #[inline]
    pub fn path(&self, p: usize) -> &[T] {
        let len = self.grid.n_nodes() * self.dim;
        &self.states[p * len..(p + 1) * len]
    }

    #[inline]
    pub fn state(&self, p: usize, node: usize) -> &[T] {
        let off = (p * self.grid.n_nodes() + node) * self.dim;
        &self.states[off..off + self.dim]
    }

    /// `β` at step `k` of path `p`.
    pub fn beta(&self, p: usize, k: usize) -> Option<&[T]> {
        let d = self.dim;
        let off = (p * self.grid.n_steps() + k) * d;
        self.drivers.as_ref().map(|r| &r.beta[off..off + d])
    }

    /// `ξξ*` at step `k` of path `p`, row-major.
    pub fn xi2(&self, p: usize, k: usize) -> Option<&[T]> {
        let dd = self.dim * self.dim;
        let off = (p * self.grid.n_steps() + k) * dd;
        self.drivers.as_ref().map(|r| &r.xi2[off..off + dd])
    }

    /// All states at `node`, one row per path, as `f64`.
    pub fn marginal(&self, node: usize) -> Vec<Vec<f64>> {
        (0..self.n_paths()).map(|p| self.state(p, node).iter().map(|v| v.as_f64()).collect()).collect()
    }

    /// CSV with header `path_id,t,x_1..x_d` plus `beta_*`/`xi2_*` columns when
    /// driver records exist. Writes at most `max_paths` paths and every
    /// `stride`-th node.
    pub fn write_csv<W: Write>(&self, out: W, max_paths: Option<usize>, stride: usize) -> Result<()> {
        let d = self.dim;
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["path_id".to_string(), "t".to_string()];
        header.extend((1..=d).map(|i| format!("x_{i}")));
        if self.drivers.is_some() {
            header.extend((1..=d).map(|i| format!("beta_{i}")));
            for i in 1..=d {
                header.extend((1..=d).map(|j| format!("xi2_{i}{j}")));
            }
        }
        w.write_record(&header)?;
        let stride = stride.max(1);
        let n = max_paths.unwrap_or(usize::MAX).min(self.n_paths());
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        for p in 0..n {
            for k in (0..self.grid.n_nodes()).step_by(stride) {
                row.clear();
                row.push(self.path_ids[p].to_string());
                row.push(format!("{}", self.grid.node(k)));
                row.extend(self.state(p, k).iter().map(|v| format!("{v}")));
                if self.drivers.is_some() {
                    if k < self.grid.n_steps() {
                        row.extend(self.beta(p, k).unwrap().iter().map(|v| format!("{v}")));
                        row.extend(self.xi2(p, k).unwrap().iter().map(|v| format!("{v}")));
                    } else {
                        row.extend(std::iter::repeat(String::new()).take(d + d * d));
                    }
                }
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `σ = √(x_d⁺) ς(t, x)`.
#[inline]
pub(crate) fn fill_sigma<T: Scalar, M: CoefficientModel<T> + ?Sized>(
    model: &M,
    t: T,
    x: &[T],
    factor: &mut SmallMatrix<T>,
    sigma: &mut [T],
) {
    model.volatility_factor(t, x, factor);
    let s = x[x.len() - 1].positive_part().sqrt();
    for (o, &f) in sigma.iter_mut().zip(factor.as_slice()) {
        *o = s * f;
    }
}

/// `y ← y + β h + ξ √h z` with `ξ` stored `d × r` row-major.
#[inline]
pub(crate) fn euler_update<T: Scalar>(y: &mut [T], beta: &[T], xi: &[T], h: T, sqrt_h: T, z: &[T]) {
    let r = z.len();
    for i in 0..y.len() {
        let mut noise = T::zero();
        for j in 0..r {
            noise += xi[i * r + j] * z[j];
        }
        y[i] += beta[i] * h + noise * sqrt_h;
    }
}

/// Internal and stored state of one path.
struct BoundaryState<T> {
    scheme: Scheme,
    y: Vec<T>,
    x: Vec<T>,
}

impl<T: Scalar> BoundaryState<T> {
    fn new(scheme: Scheme, x0: &[T]) -> Self {
        Self { scheme, y: x0.to_vec(), x: x0.to_vec() }
    }

    /// After `y` was advanced: clip, refresh the stored state, account.
    #[inline]
    fn settle(&mut self, clip: &mut ClipStats) {
        let d = self.y.len() - 1;
        clip.record(self.y[d].as_f64());
        if self.scheme == Scheme::AbsorbedEuler {
            self.y[d] = self.y[d].positive_part();
        }
        self.x.copy_from_slice(&self.y);
        self.x[d] = self.y[d].positive_part();
    }
}

/// Simulate one path of the SDE from `(t0, x0)` for `n_steps` steps of size
/// `h`, writing `n_steps + 1` states into `out`. The noise of step `k` is read
/// from stream `path_id` at position `first_step + k`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_path_into<T: Scalar, M: CoefficientModel<T> + ?Sized>(
    model: &M,
    t0: f64,
    x0: &[T],
    h: f64,
    n_steps: usize,
    seed: u64,
    path_id: u64,
    first_step: u64,
    scheme: Scheme,
    out: &mut [T],
) -> ClipStats {
    let d = x0.len();
    let mut st = BoundaryState::new(scheme, x0);
    let mut clip = ClipStats::default();
    let mut noise = NoiseStream::at_step(seed, path_id, CHANNEL_BROWNIAN, d, first_step);
    let (mut b, mut factor, mut sigma) = (vec![T::zero(); d], SmallMatrix::zeros(d), vec![T::zero(); d * d]);
    let (mut zf, mut z) = (vec![0.0; d], vec![T::zero(); d]);
    let (ht, sqrt_h) = (T::lit(h), T::lit(h.sqrt()));
    out[..d].copy_from_slice(&st.x);
    for k in 0..n_steps {
        let t = T::lit(t0 + k as f64 * h);
        model.drift(t, &st.x, &mut b);
        fill_sigma(model, t, &st.x, &mut factor, &mut sigma);
        noise.next_normals(&mut zf);
        for (zt, &v) in z.iter_mut().zip(&zf) {
            *zt = T::lit(v);
        }
        euler_update(&mut st.y, &b, &sigma, ht, sqrt_h, &z);
        st.settle(&mut clip);
        out[(k + 1) * d..(k + 2) * d].copy_from_slice(&st.x);
    }
    clip
}

fn check_start<T: Scalar>(model_dim: usize, start: &[T]) -> Result<()> {
    if start.len() != model_dim {
        return Err(Error::DimensionMismatch { expected: model_dim, got: start.len() });
    }
    let xd = start[start.len() - 1];
    if !(xd >= T::zero()) {
        return Err(Error::OutsideHalfSpace(xd.as_f64()));
    }
    Ok(())
}

/// Euler simulation of `dX = b dt + √x_d ς dW`, `X(s) = x`.
pub fn simulate_sde<T: Scalar, M: CoefficientModel<T> + ?Sized>(
    model: &M,
    start: &SpaceTimePoint<T>,
    grid: &TimeGrid,
    cfg: &SimConfig,
) -> Result<PathEnsemble<T>> {
    let d = model.dim();
    check_start(d, &start.x)?;
    if (start.t.as_f64() - grid.start()).abs() > 1e-12 * grid.step() {
        return Err(Error::InvalidParameter { name: "grid", reason: "grid must start at the start time".into() });
    }
    let path_len = grid.n_nodes() * d;
    let mut states = vec![T::zero(); cfg.n_paths * path_len];
    let mut clip = vec![ClipStats::default(); cfg.n_paths];
    states.par_chunks_mut(path_len).zip(clip.par_iter_mut()).enumerate().for_each(|(p, (out, c))| {
        *c = simulate_path_into(
            model,
            grid.start(),
            &start.x,
            grid.step(),
            grid.n_steps(),
            cfg.seed,
            cfg.first_path + p as u64,
            0,
            cfg.scheme,
            out,
        );
    });
    let ens = PathEnsemble {
        grid: *grid,
        dim: d,
        seed: cfg.seed,
        scheme: cfg.scheme,
        path_ids: (0..cfg.n_paths as u64).map(|p| cfg.first_path + p).collect(),
        states,
        clip,
        drivers: None,
        integrability: None,
    };
    if ens.states.iter().any(|v| !v.is_finite()) {
        return Err(Error::Evaluation { t: f64::NAN, x: vec![] });
    }
    Ok(ens)
}

/// Coefficient source of a general Itô process `dX = β dt + ξ dW`.
///
/// `β` and `ξ` may depend on an auxiliary state (which makes `X` non-Markov)
/// that evolves with its own uniform noise.
pub trait ItoDriver<T: Scalar>: Send + Sync {
    fn dim(&self) -> usize;

    /// Brownian dimension `r`; `ξ` is `d × r`.
    fn brownian_dim(&self) -> usize;

    fn aux_dim(&self) -> usize {
        0
    }

    /// Uniforms consumed by [`advance_aux`](Self::advance_aux) per step.
    fn aux_noise_dim(&self) -> usize {
        0
    }

    fn init_aux(&self, _x0: &[T], _aux: &mut [T]) {}

    /// Writes `β` (length `d`) and `ξ` (`d × r`, row-major) at `(t, X, aux)`.
    fn coefficients(&self, t: T, x: &[T], aux: &[T], beta: &mut [T], xi: &mut [T]);

    /// Evolves the auxiliary state across `[t, t + h]`.
    fn advance_aux(&self, _t: T, _h: T, _x: &[T], _aux: &mut [T], _uniforms: &[f64]) {}
}

/// Replays a coefficient model as an Itô driver: `β = b(t, X)`,
/// `ξ = √X_d ς(t, X)`. Uses the same arithmetic as [`simulate_sde`].
pub struct ModelDriver<M>(pub M);

impl<T: Scalar, M: CoefficientModel<T>> ItoDriver<T> for ModelDriver<M> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn brownian_dim(&self) -> usize {
        self.0.dim()
    }
    fn coefficients(&self, t: T, x: &[T], _aux: &[T], beta: &mut [T], xi: &mut [T]) {
        self.0.drift(t, x, beta);
        let mut factor = SmallMatrix::zeros(self.0.dim());
        fill_sigma(&self.0, t, x, &mut factor, xi);
    }
}

/// `β = b(t, X)`, `ξ = s_m √X_d ς(t, X)` where `m ∈ {0, 1}` is a two-state
/// continuous-time Markov chain with switching rates `rates[m]`, started in
/// `initial`. The mixture makes `X` a degenerate Itô process that is not a
/// Markov diffusion.
pub struct RegimeSwitchingDriver<M> {
    pub model: M,
    pub scales: [f64; 2],
    pub rates: [f64; 2],
    pub initial: usize,
}

impl<M> RegimeSwitchingDriver<M> {
    pub fn new(model: M, scales: [f64; 2], rates: [f64; 2], initial: usize) -> Self {
        Self { model, scales, rates, initial }
    }
}

impl<T: Scalar, M: CoefficientModel<T>> ItoDriver<T> for RegimeSwitchingDriver<M> {
    fn dim(&self) -> usize {
        self.model.dim()
    }
    fn brownian_dim(&self) -> usize {
        self.model.dim()
    }
    fn aux_dim(&self) -> usize {
        1
    }
    fn aux_noise_dim(&self) -> usize {
        1
    }
    fn init_aux(&self, _x0: &[T], aux: &mut [T]) {
        aux[0] = T::lit(self.initial as f64);
    }
    fn coefficients(&self, t: T, x: &[T], aux: &[T], beta: &mut [T], xi: &mut [T]) {
        self.model.drift(t, x, beta);
        let mut factor = SmallMatrix::zeros(self.model.dim());
        fill_sigma(&self.model, t, x, &mut factor, xi);
        let s = T::lit(self.scales[regime(aux)]);
        xi.iter_mut().for_each(|v| *v *= s);
    }
    fn advance_aux(&self, _t: T, h: T, _x: &[T], aux: &mut [T], uniforms: &[f64]) {
        let m = regime(aux);
        let p_switch = 1.0 - (-self.rates[m] * h.as_f64()).exp();
        if uniforms[0] <= p_switch {
            aux[0] = T::lit((1 - m) as f64);
        }
    }
}

#[inline]
fn regime<T: Scalar>(aux: &[T]) -> usize {
    usize::from(aux[0].as_f64() > 0.5)
}

/// Euler simulation of an Itô process driven by `driver`.
pub fn simulate_ito_process<T: Scalar, D: ItoDriver<T> + ?Sized>(
    driver: &D,
    start: &[T],
    grid: &TimeGrid,
    cfg: &SimConfig,
    record_drivers: bool,
) -> Result<PathEnsemble<T>> {
    let d = driver.dim();
    let r = driver.brownian_dim();
    check_start(d, start)?;
    if r == 0 {
        return Err(Error::InvalidParameter { name: "driver", reason: "Brownian dimension must be positive".into() });
    }
    let (n, steps) = (cfg.n_paths, grid.n_steps());
    let path_len = grid.n_nodes() * d;
    let mut states = vec![T::zero(); n * path_len];
    let mut clip = vec![ClipStats::default(); n];
    let mut integ = vec![0.0; n];
    let (bl, xl) = if record_drivers { (steps * d, steps * d * d) } else { (0, 0) };
    let mut beta_rec = vec![T::zero(); n * bl];
    let mut xi2_rec = vec![T::zero(); n * xl];

    let (h, sqrt_h) = (T::lit(grid.step()), T::lit(grid.step().sqrt()));
    let body = |p: usize, out: &mut [T], c: &mut ClipStats, integ: &mut f64, brec: &mut [T], xrec: &mut [T]| {
        let path_id = cfg.first_path + p as u64;
        let mut st = BoundaryState::new(cfg.scheme, start);
        let mut noise = NoiseStream::new(cfg.seed, path_id, CHANNEL_BROWNIAN, r);
        let na = driver.aux_noise_dim();
        let mut aux_noise = NoiseStream::new(cfg.seed, path_id, CHANNEL_AUX, na.max(1));
        let mut aux = vec![T::zero(); driver.aux_dim()];
        driver.init_aux(start, &mut aux);
        let (mut beta, mut xi) = (vec![T::zero(); d], vec![T::zero(); d * r]);
        let (mut zf, mut z, mut uf) = (vec![0.0; r], vec![T::zero(); r], vec![0.0; na.max(1)]);
        out[..d].copy_from_slice(&st.x);
        for k in 0..steps {
            let t = T::lit(grid.node(k));
            driver.coefficients(t, &st.x, &aux, &mut beta, &mut xi);
            let bnorm = beta.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            let mut xi2norm = 0.0;
            for i in 0..d {
                for j in 0..d {
                    let v: T = (0..r).map(|l| xi[i * r + l] * xi[j * r + l]).sum();
                    xi2norm += v.as_f64().powi(2);
                    if record_drivers {
                        xrec[(k * d + i) * d + j] = v;
                    }
                }
            }
            if record_drivers {
                brec[k * d..(k + 1) * d].copy_from_slice(&beta);
            }
            *integ += (bnorm + xi2norm.sqrt()) * grid.step();
            noise.next_normals(&mut zf);
            for (zt, &v) in z.iter_mut().zip(&zf) {
                *zt = T::lit(v);
            }
            if na > 0 {
                aux_noise.next_uniforms(&mut uf);
                driver.advance_aux(t, h, &st.x, &mut aux, &uf[..na]);
            }
            euler_update(&mut st.y, &beta, &xi, h, sqrt_h, &z);
            st.settle(c);
            out[(k + 1) * d..(k + 2) * d].copy_from_slice(&st.x);
        }
    };

    if record_drivers {
        states
            .par_chunks_mut(path_len)
            .zip(clip.par_iter_mut())
            .zip(integ.par_iter_mut())
            .zip(beta_rec.par_chunks_mut(bl.max(1)))
            .zip(xi2_rec.par_chunks_mut(xl.max(1)))
            .enumerate()
            .for_each(|(p, ((((out, c), ig), br), xr))| body(p, out, c, ig, br, xr));
    } else {
        states
            .par_chunks_mut(path_len)
            .zip(clip.par_iter_mut())
            .zip(integ.par_iter_mut())
            .enumerate()
            .for_each(|(p, ((out, c), ig))| body(p, out, c, ig, &mut [], &mut []));
    }

    Ok(PathEnsemble {
        grid: *grid,
        dim: d,
        seed: cfg.seed,
        scheme: cfg.scheme,
        path_ids: (0..n as u64).map(|p| cfg.first_path + p).collect(),
        states,
        clip,
        drivers: record_drivers.then_some(DriverRecords { beta: beta_rec, xi2: xi2_rec }),
        integrability: Some(integ),
    })
}

/// Calls `f(first_path, count)` for consecutive blocks of at most `block`
/// paths covering `0..n_paths`, in order.
pub fn for_each_block<F>(n_paths: usize, block: usize, mut f: F) -> Result<()>
where
    F: FnMut(u64, usize) -> Result<()>,
{
    let block = block.max(1);
    let mut first = 0;
    while first < n_paths {
        let count = block.min(n_paths - first);
        f(first as u64, count)?;
        first += count;
    }
    Ok(())
}

/// Half-space membership of an ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportReport {
    /// Stored states with `x_d < 0` (must be zero).
    pub violations: usize,
    pub paths: usize,
    /// Steps whose proposed `x_d` was negative, summed over paths.
    pub clipped_steps: u64,
    /// `clipped_steps / (paths · steps)`.
    pub clip_rate: f64,
    /// Most negative proposed `x_d`.
    pub max_negative_excursion_pre_clip: f64,
    /// 99th percentile over paths of the per-path `|min pre-clip x_d|`.
    pub excursion_p99: f64,
    pub passed: bool,
}

pub fn support_check<T: Scalar>(ens: &PathEnsemble<T>) -> SupportReport {
    let d = ens.dim;
    let violations = ens.states.chunks(d).filter(|s| !(s[d - 1] >= T::zero())).count();
    let clipped_steps: u64 = ens.clip.iter().map(|c| c.clips as u64).sum();
    let total = (ens.n_paths() * ens.grid.n_steps()).max(1) as f64;
    let mut exc: Vec<f64> = ens.clip.iter().map(|c| -c.min_pre_clip).collect();
    let p99 = crate::stats::quantile(&mut exc, 0.99);
    SupportReport {
        violations,
        paths: ens.n_paths(),
        clipped_steps,
        clip_rate: clipped_steps as f64 / total,
        max_negative_excursion_pre_clip: ens.clip.iter().map(|c| c.min_pre_clip).fold(0.0, f64::min),
        excursion_p99: p99,
        passed: violations == 0,
    }
}

/// `E[max_t |X(t)|^{2m}]` over the ensemble.
pub fn running_max_moment<T: Scalar>(ens: &PathEnsemble<T>, m: u32) -> Result<f64> {
    if m == 0 {
        return Err(Error::InvalidParameter { name: "m", reason: "must be at least 1".into() });
    }
    let d = ens.dim;
    let total: f64 = (0..ens.n_paths())
        .map(|p| {
            ens.path(p)
                .chunks(d)
                .map(|s| s.iter().map(|v| v.as_f64().powi(2)).sum::<f64>())
                .fold(0.0, f64::max)
                .powi(m as i32)
        })
        .sum();
    Ok(total / ens.n_paths().max(1) as f64)
}

/// Moment bound across a family of starting points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentBoundReport {
    pub m: u32,
    pub start_norms: Vec<f64>,
    pub moments: Vec<f64>,
    /// `E[max|X|^{2m}] / (1 + |x|^{2m})`.
    pub ratios: Vec<f64>,
    /// Least-squares fit `log E = log C + γ log(1 + |x|^{2m})`.
    pub fitted_constant: f64,
    pub growth_exponent: f64,
    /// `max ratio ≤ bound_factor · ratio at the smallest |x|`.
    pub bounded: bool,
    pub bound_factor: f64,
}

/// Evaluate the running-max moment of each ensemble (one per start) and check
/// that `E[max|X|^{2m}] / (1 + |x|^{2m})` shows no systematic growth.
pub fn moment_bound_check<T: Scalar>(
    family: &[(Vec<f64>, &PathEnsemble<T>)],
    m: u32,
    bound_factor: f64,
) -> Result<MomentBoundReport> {
    let mut norms = Vec::new();
    let mut moments = Vec::new();
    for (x, ens) in family {
        norms.push(x.iter().map(|v| v * v).sum::<f64>().sqrt());
        moments.push(running_max_moment(ens, m)?);
    }
    let weights: Vec<f64> = norms.iter().map(|n| 1.0 + n.powi(2 * m as i32)).collect();
    let ratios: Vec<f64> = moments.iter().zip(&weights).map(|(e, w)| e / w).collect();
    let (lx, ly): (Vec<f64>, Vec<f64>) = weights.iter().zip(&moments).map(|(w, e)| (w.ln(), e.max(1e-300).ln())).unzip();
    let (slope, intercept) = crate::stats::linear_fit(&lx, &ly);
    let reference = norms
        .iter()
        .zip(&ratios)
        .min_by(|a, b| a.0.partial_cmp(b.0).unwrap())
        .map(|(_, r)| *r)
        .unwrap_or(0.0);
    let max_ratio = ratios.iter().cloned().fold(0.0, f64::max);
    Ok(MomentBoundReport {
        m,
        start_norms: norms,
        moments,
        bounded: ratios.iter().all(|r| r.is_finite()) && max_ratio <= bound_factor * reference,
        ratios,
        fitted_constant: intercept.exp(),
        growth_exponent: slope,
        bound_factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{ConstantCoefficients, HestonModel, PoisonedExtension};

    fn heston_start() -> SpaceTimePoint<f64> {
        SpaceTimePoint::new(0.0, vec![0.0, 0.09]).unwrap()
    }

    #[test]
    fn grid_integrality() {
        assert!(TimeGrid::new(0.0, 1.0, 1.0 / 512.0).is_ok());
        assert!(TimeGrid::new(0.0, 1.0, 0.3).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0.0).is_err());
        let g = TimeGrid::new(0.5, 1.5, 0.25).unwrap();
        assert_eq!(g.nodes(), vec![0.5, 0.75, 1.0, 1.25, 1.5]);
        assert_eq!(g.index_of(1.25), Some(3));
        assert_eq!(g.index_of(1.3), None);
    }

    #[test]
    fn zero_model_paths_are_constant() {
        let m = ConstantCoefficients::<f64>::zero(2);
        let start = SpaceTimePoint::new(0.0, vec![0.3, 0.2]).unwrap();
        let g = TimeGrid::with_steps(0.0, 1.0, 16).unwrap();
        let ens = simulate_sde(&m, &start, &g, &SimConfig::new(5, 1, Scheme::FullTruncation)).unwrap();
        assert!(ens.states.chunks(2).all(|s| s == [0.3, 0.2]));
    }

    #[test]
    fn deterministic_and_block_consistent() {
        let m = HestonModel::reference(false);
        let g = TimeGrid::with_steps(0.0, 0.5, 64).unwrap();
        let cfg = SimConfig::new(40, 99, Scheme::FullTruncation);
        let a = simulate_sde(&m, &heston_start(), &g, &cfg).unwrap();
        let b = simulate_sde(&m, &heston_start(), &g, &cfg).unwrap();
        assert_eq!(a, b);
        let tail = simulate_sde(&m, &heston_start(), &g, &cfg.block(25, 15)).unwrap();
        assert_eq!(tail.path(0), a.path(25));
        assert_eq!(tail.path(14), a.path(39));
    }

    #[test]
    fn rejects_bad_start() {
        let m = HestonModel::reference(false);
        let g = TimeGrid::with_steps(0.0, 1.0, 4).unwrap();
        let cfg = SimConfig::new(1, 0, Scheme::FullTruncation);
        let bad = SpaceTimePoint::unchecked(0.0, vec![0.0, -0.1]);
        assert!(matches!(simulate_sde(&m, &bad, &g, &cfg), Err(Error::OutsideHalfSpace(_))));
        let wrong_dim = SpaceTimePoint::new(0.0, vec![0.1]).unwrap();
        assert!(matches!(simulate_sde(&m, &wrong_dim, &g, &cfg), Err(Error::DimensionMismatch { .. })));
        assert!(simulate_ito_process(&ModelDriver(m), &[0.0, -1.0], &g, &cfg, false).is_err());
    }

    #[test]
    fn support_holds_and_clips_are_counted() {
        // Feller violated: frequent boundary hits
        let m = HestonModel::new(1.0, 0.02, 1.0, -0.3, 0.0, 0.0, false).unwrap();
        let g = TimeGrid::with_steps(0.0, 1.0, 64).unwrap();
        for scheme in [Scheme::FullTruncation, Scheme::AbsorbedEuler] {
            let ens = simulate_sde(&m, &heston_start(), &g, &SimConfig::new(400, 3, scheme)).unwrap();
            let rep = support_check(&ens);
            assert_eq!(rep.violations, 0);
            assert!(rep.clipped_steps > 0);
            assert!(rep.max_negative_excursion_pre_clip < 0.0);
        }
    }

    #[test]
    fn negative_state_is_a_violation() {
        let m = HestonModel::reference(false);
        let g = TimeGrid::with_steps(0.0, 1.0, 4).unwrap();
        let mut ens = simulate_sde(&m, &heston_start(), &g, &SimConfig::new(3, 0, Scheme::FullTruncation)).unwrap();
        let n = ens.states.len();
        ens.states[n - 1] = -1e-3;
        assert_eq!(support_check(&ens).violations, 1);
        assert!(!support_check(&ens).passed);
    }

    #[test]
    fn poisoned_extension_is_never_queried() {
        let m = HestonModel::new(1.0, 0.02, 1.0, -0.3, 0.0, 0.0, false).unwrap();
        let g = TimeGrid::with_steps(0.0, 1.0, 64).unwrap();
        for scheme in [Scheme::FullTruncation, Scheme::AbsorbedEuler] {
            let cfg = SimConfig::new(200, 8, scheme);
            let clean = simulate_sde(&m, &heston_start(), &g, &cfg).unwrap();
            let poisoned = simulate_sde(&PoisonedExtension(m.clone()), &heston_start(), &g, &cfg).unwrap();
            assert!(support_check(&clean).clipped_steps > 0);
            assert_eq!(clean, poisoned);
        }
    }

    #[test]
    fn markov_driver_replays_sde_bitwise() {
        let m = HestonModel::reference(false);
        let g = TimeGrid::with_steps(0.0, 1.0, 32).unwrap();
        for scheme in [Scheme::FullTruncation, Scheme::AbsorbedEuler] {
            let cfg = SimConfig::new(50, 21, scheme);
            let sde = simulate_sde(&m, &heston_start(), &g, &cfg).unwrap();
            let ito = simulate_ito_process(&ModelDriver(m.clone()), &[0.0, 0.09], &g, &cfg, true).unwrap();
            assert_eq!(sde.states, ito.states);
            // recorded ξξ* equals x_d a
            let x = ito.state(3, 5);
            let xi2 = ito.xi2(3, 5).unwrap();
            let a = m.a_matrix();
            for i in 0..2 {
                for j in 0..2 {
                    assert!((xi2[i * 2 + j] - x[1] * a[(i, j)]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn regime_switching_driver_runs() {
        let drv = RegimeSwitchingDriver::new(HestonModel::reference(false), [1.0, 1.5], [2.0, 2.0], 0);
        let g = TimeGrid::with_steps(0.0, 1.0, 64).unwrap();
        let ens = simulate_ito_process(&drv, &[0.0, 0.09], &g, &SimConfig::new(200, 5, Scheme::FullTruncation), true)
            .unwrap();
        assert_eq!(support_check(&ens).violations, 0);
        let integ = ens.integrability.as_ref().unwrap();
        let mean = integ.iter().sum::<f64>() / integ.len() as f64;
        assert!(mean.is_finite() && mean > 0.0);
        // ξξ*/x_d takes exactly the two regime values a and 2.25 a
        let a = HestonModel::reference(false).a_matrix()[(0, 0)];
        let mut seen = [false; 2];
        for p in 0..ens.n_paths() {
            for k in 0..g.n_steps() {
                let xd = ens.state(p, k)[1];
                if xd > 1e-3 {
                    let ratio = ens.xi2(p, k).unwrap()[0] / (xd * a);
                    if (ratio - 1.0).abs() < 1e-9 {
                        seen[0] = true;
                    } else {
                        assert!((ratio - 2.25).abs() < 1e-9, "{ratio}");
                        seen[1] = true;
                    }
                }
            }
        }
        assert_eq!(seen, [true, true]);
    }

    #[test]
    fn zero_model_moment_is_start_norm() {
        let m = ConstantCoefficients::<f64>::zero(2);
        let start = SpaceTimePoint::new(0.0, vec![3.0, 4.0]).unwrap();
        let g = TimeGrid::with_steps(0.0, 1.0, 8).unwrap();
        let ens = simulate_sde(&m, &start, &g, &SimConfig::new(4, 0, Scheme::FullTruncation)).unwrap();
        assert_eq!(running_max_moment(&ens, 1).unwrap(), 25.0);
        assert!(running_max_moment(&ens, 0).is_err());
    }

    #[test]
    fn csv_layout() {
        let drv = ModelDriver(HestonModel::reference(false));
        let g = TimeGrid::with_steps(0.0, 1.0, 4).unwrap();
        let ens = simulate_ito_process(&drv, &[0.0, 0.09], &g, &SimConfig::new(2, 5, Scheme::FullTruncation), true).unwrap();
        let mut buf = Vec::new();
        ens.write_csv(&mut buf, None, 1).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "path_id,t,x_1,x_2,beta_1,beta_2,xi2_11,xi2_12,xi2_21,xi2_22");
        assert_eq!(text.lines().count(), 1 + 2 * 5);
    }

    #[test]
    fn f32_simulation_respects_support() {
        let m = HestonModel::new(1.5f32, 0.04, 0.3, -0.5, 0.02, 0.0, false).unwrap();
        let start = SpaceTimePoint::new(0.0f32, vec![0.0, 0.09]).unwrap();
        let g = TimeGrid::with_steps(0.0, 1.0, 64).unwrap();
        let ens = simulate_sde(&m, &start, &g, &SimConfig::new(100, 1, Scheme::FullTruncation)).unwrap();
        assert_eq!(support_check(&ens).violations, 0);
    }
}
