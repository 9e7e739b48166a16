//! Finite-difference solver for `u_t = A_t u + c u + f`, `u(0, ·) = g` on a
//! truncated half-space box, and for the terminal-value problem
//! `v_t + A_t v + c v = 0`, `v(T, ·) = g` by time reversal.
//!
//! Second-order terms use centred differences (a sign-dependent 7-point stencil
//! for the mixed ones), first-order terms are upwinded. On the layer `x_d = 0`
//! the diffusion vanishes and only transport is left; nothing outside the
//! closed half-space is ever read, so no boundary data is imposed there. On the
//! outer faces of the box the second normal difference and the mixed terms are
//! dropped, and a first-order term whose upwind neighbour lies outside the box
//! is dropped too. Every row is then an M-matrix row.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffs::{CoefficientModel, TimeReversed};
use crate::error::{Error, Result};
use crate::geometry::{holder_seminorm_estimate, weighted_sup_norm, Metric, Region, SpaceTimePoint};
use crate::linalg::SmallMatrix;
use crate::sdesim::{for_each_block, simulate_sde, Scheme, SimConfig, TimeGrid};
use crate::stats::MeanEstimate;

type Matrix = SmallMatrix<f64>;

/// Space-time grid: tensor spatial nodes (last axis starts at `x_d = 0`) and
/// a uniform time grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdeGrid {
    pub axes: Vec<Vec<f64>>,
    pub time: TimeGrid,
}

impl PdeGrid {
    pub fn from_axes(axes: Vec<Vec<f64>>, time: TimeGrid) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::InvalidParameter { name: "grid", reason: "no coordinates".into() });
        }
        for (k, a) in axes.iter().enumerate() {
            if a.len() < 3 || a.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::InvalidParameter {
                    name: "grid",
                    reason: format!("coordinate {} needs at least 3 strictly increasing nodes", k + 1),
                });
            }
        }
        if axes[axes.len() - 1][0] != 0.0 {
            return Err(Error::InvalidParameter { name: "grid", reason: "x_d = 0 must be a grid layer".into() });
        }
        Ok(Self { axes, time })
    }

    /// Box `[−half_width, half_width]^{d−1} × [0, xd_max]`. With
    /// `xd_power = p > 1` the `x_d` nodes are `xd_max (i/n)^p`.
    pub fn uniform(half_width: f64, xd_max: f64, counts: &[usize], xd_power: f64, time: TimeGrid) -> Result<Self> {
        if counts.is_empty() || !(half_width > 0.0) || !(xd_max > 0.0) || !(xd_power >= 1.0) {
            return Err(Error::InvalidParameter { name: "grid", reason: "bad box or refinement".into() });
        }
        let d = counts.len();
        let axes = counts
            .iter()
            .enumerate()
            .map(|(k, &n)| {
                let m = n.max(2) - 1;
                (0..=m)
                    .map(|i| {
                        let s = i as f64 / m as f64;
                        if k + 1 == d {
                            xd_max * s.powf(xd_power)
                        } else {
                            -half_width + 2.0 * half_width * s
                        }
                    })
                    .collect()
            })
            .collect();
        Self::from_axes(axes, time)
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn flat(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.axes).fold(0, |acc, (&i, a)| acc * a.len() + i)
    }

    pub fn multi(&self, mut flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for k in (0..self.dim()).rev() {
            let n = self.axes[k].len();
            out[k] = flat % n;
            flat /= n;
        }
        out
    }

    pub fn point(&self, flat: usize) -> Vec<f64> {
        self.multi(flat).iter().zip(&self.axes).map(|(&i, a)| a[i]).collect()
    }

    fn strides(&self) -> Vec<usize> {
        let d = self.dim();
        let mut s = vec![1; d];
        for k in (0..d - 1).rev() {
            s[k] = s[k + 1] * self.axes[k + 1].len();
        }
        s
    }

    /// Every other node in space and time. Needs odd node counts and an even
    /// number of steps.
    pub fn coarsened(&self) -> Result<Self> {
        if self.axes.iter().any(|a| a.len() % 2 == 0 || a.len() < 5) || self.time.n_steps() % 2 != 0 {
            return Err(Error::InvalidParameter { name: "grid", reason: "cannot coarsen: need odd counts ≥ 5 and even steps".into() });
        }
        let axes = self.axes.iter().map(|a| a.iter().step_by(2).copied().collect()).collect();
        let time = TimeGrid::with_steps(self.time.start(), self.time.end(), self.time.n_steps() / 2)?;
        Self::from_axes(axes, time)
    }

    /// Nodes added midway in every cell and the time step halved.
    pub fn refined(&self) -> Result<Self> {
        let axes = self
            .axes
            .iter()
            .map(|a| {
                let mut out = Vec::with_capacity(2 * a.len() - 1);
                for w in a.windows(2) {
                    out.push(w[0]);
                    out.push(0.5 * (w[0] + w[1]));
                }
                out.push(a[a.len() - 1]);
                out
            })
            .collect();
        let time = TimeGrid::with_steps(self.time.start(), self.time.end(), 2 * self.time.n_steps())?;
        Self::from_axes(axes, time)
    }

    /// Central half of the box in the tangential coordinates and the lower
    /// half in `x_d`.
    pub fn inner_half_box(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let mut lo = Vec::with_capacity(d);
        let mut hi = Vec::with_capacity(d);
        for (k, a) in self.axes.iter().enumerate() {
            let (a0, a1) = (a[0], a[a.len() - 1]);
            if k + 1 == d {
                lo.push(a0);
                hi.push(a0 + 0.5 * (a1 - a0));
            } else {
                lo.push(a0 + 0.25 * (a1 - a0));
                hi.push(a1 - 0.25 * (a1 - a0));
            }
        }
        (lo, hi)
    }

    pub fn in_inner_half_box(&self, x: &[f64]) -> bool {
        let (lo, hi) = self.inner_half_box();
        x.iter().zip(lo.iter().zip(&hi)).all(|(&v, (&l, &h))| v >= l - 1e-12 && v <= h + 1e-12)
    }

    /// Cell and fraction along it, clamped.
    fn locate(axis: &[f64], x: f64) -> (usize, f64) {
        let n = axis.len();
        if !(x > axis[0]) {
            return (0, 0.0);
        }
        if x >= axis[n - 1] {
            return (n - 2, 1.0);
        }
        let i = axis.partition_point(|&v| v <= x) - 1;
        (i, (x - axis[i]) / (axis[i + 1] - axis[i]))
    }

    /// Multilinear interpolation weights of `x`, clamped to the box.
    pub fn interpolation_weights(&self, x: &[f64]) -> Vec<(usize, f64)> {
        let d = self.dim();
        let cells: Vec<(usize, f64)> = x.iter().zip(&self.axes).map(|(&v, a)| Self::locate(a, v)).collect();
        let mut out = Vec::with_capacity(1 << d);
        for mask in 0..(1usize << d) {
            let mut w = 1.0;
            let mut flat = 0;
            for k in 0..d {
                let (i, f) = cells[k];
                let up = (mask >> k) & 1 == 1;
                w *= if up { f } else { 1.0 - f };
                flat = flat * self.axes[k].len() + i + usize::from(up);
            }
            if w != 0.0 {
                out.push((flat, w));
            }
        }
        out
    }

    /// Node index if `x` is a grid node.
    pub fn node_of(&self, x: &[f64]) -> Option<usize> {
        let multi: Option<Vec<usize>> = x
            .iter()
            .zip(&self.axes)
            .map(|(&v, a)| a.iter().position(|&n| (n - v).abs() <= 1e-12 * (1.0 + v.abs())))
            .collect();
        multi.map(|m| self.flat(&m))
    }
}

/// Time-stepping scheme.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdeScheme {
    #[default]
    ImplicitEuler,
    CrankNicolson,
}

impl PdeScheme {
    fn theta(self) -> f64 {
        match self {
            PdeScheme::ImplicitEuler => 1.0,
            PdeScheme::CrankNicolson => 0.5,
        }
    }
}

/// Row-major band matrix with half-bandwidth `bw`.
#[derive(Clone, Debug)]
struct Band {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl Band {
    fn zeros(n: usize, bw: usize) -> Self {
        Self { n, bw, data: vec![0.0; n * (2 * bw + 1)] }
    }

    fn width(&self) -> usize {
        2 * self.bw + 1
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width() + j + self.bw - i]
    }

    fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        let w = self.width();
        &mut self.data[i * w + j + self.bw - i]
    }

    fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        let (bw, w) = (self.bw, self.width());
        out.par_iter_mut().enumerate().for_each(|(i, o)| {
            let row = &self.data[i * w..(i + 1) * w];
            let lo = i.saturating_sub(bw);
            let hi = (i + bw + 1).min(self.n);
            *o = (lo..hi).map(|j| row[j + bw - i] * x[j]).sum();
        });
    }

    /// In-place LU without pivoting. The θ-scheme matrices are M-matrices.
    fn factorize(&mut self) -> Result<()> {
        let (n, bw) = (self.n, self.bw);
        for i in 0..n {
            let p = self.at(i, i);
            if !(p.abs() > 1e-300) || !p.is_finite() {
                return Err(Error::LinearSolve(format!("zero pivot at row {i}")));
            }
            let hi = (i + bw + 1).min(n);
            for k in i + 1..hi {
                let l = self.at(k, i) / p;
                if l == 0.0 {
                    continue;
                }
                *self.at_mut(k, i) = l;
                for j in i + 1..hi {
                    let v = self.at(i, j);
                    if v != 0.0 {
                        *self.at_mut(k, j) -= l * v;
                    }
                }
            }
        }
        Ok(())
    }

    fn solve(&self, b: &mut [f64]) {
        let (n, bw) = (self.n, self.bw);
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut s = b[i];
            for j in lo..i {
                s -= self.at(i, j) * b[j];
            }
            b[i] = s;
        }
        for i in (0..n).rev() {
            let hi = (i + bw + 1).min(n);
            let mut s = b[i];
            for j in i + 1..hi {
                s -= self.at(i, j) * b[j];
            }
            b[i] = s / self.at(i, i);
        }
    }
}

/// Assemble the discrete `A_t + c` into `out`; returns the largest
/// `dt`-free Courant factor `max_k |b_k| / h_k`.
fn assemble<M: CoefficientModel<f64> + ?Sized>(model: &M, grid: &PdeGrid, t: f64, out: &mut Band) -> Result<f64> {
    let d = grid.dim();
    let strides = grid.strides();
    let bw = out.bw;
    let w = out.width();
    let n = out.n;
    let results: Vec<Result<f64>> = out
        .data
        .par_chunks_mut(w)
        .enumerate()
        .map(|(i, row)| {
            row.fill(0.0);
            let multi = grid.multi(i);
            let x: Vec<f64> = multi.iter().zip(&grid.axes).map(|(&m, a)| a[m]).collect();
            let mut a = Matrix::zeros(d);
            let mut b = vec![0.0; d];
            model.diffusion(t, &x, &mut a);
            model.drift(t, &x, &mut b);
            let c = model.killing(t, &x);
            if !a.is_finite() || b.iter().any(|v| !v.is_finite()) || !c.is_finite() {
                return Err(Error::Evaluation { t, x });
            }
            let xd = x[d - 1];
            let mut put = |j: isize, v: f64| {
                let col = i as isize + j;
                debug_assert!(col >= 0 && (col as usize) < n);
                row[(j + bw as isize) as usize] += v;
            };
            let mut courant: f64 = 0.0;
            let hm: Vec<f64> = (0..d).map(|k| if multi[k] > 0 { x[k] - grid.axes[k][multi[k] - 1] } else { 0.0 }).collect();
            let hp: Vec<f64> =
                (0..d).map(|k| if multi[k] + 1 < grid.axes[k].len() { grid.axes[k][multi[k] + 1] - x[k] } else { 0.0 }).collect();
            let has_lo = |k: usize| multi[k] > 0;
            let has_hi = |k: usize| multi[k] + 1 < grid.axes[k].len();
            for k in 0..d {
                let s = strides[k] as isize;
                if xd > 0.0 && has_lo(k) && has_hi(k) {
                    let coef = 0.5 * xd * a[(k, k)] * 2.0 / (hm[k] + hp[k]);
                    put(s, coef / hp[k]);
                    put(-s, coef / hm[k]);
                    put(0, -coef * (1.0 / hp[k] + 1.0 / hm[k]));
                }
                if b[k] > 0.0 && has_hi(k) {
                    put(s, b[k] / hp[k]);
                    put(0, -b[k] / hp[k]);
                    courant = courant.max(b[k] / hp[k]);
                } else if b[k] < 0.0 && has_lo(k) {
                    put(-s, -b[k] / hm[k]);
                    put(0, b[k] / hm[k]);
                    courant = courant.max(-b[k] / hm[k]);
                }
            }
            if xd > 0.0 {
                for k in 0..d {
                    for l in k + 1..d {
                        let akl = 0.5 * (a[(k, l)] + a[(l, k)]);
                        if akl == 0.0 || !(has_lo(k) && has_hi(k) && has_lo(l) && has_hi(l)) {
                            continue;
                        }
                        // x_d a_kl u_kl, the two symmetric entries of ½ x_d a:H
                        let s = xd * akl * 0.5;
                        let (sk, sl) = (strides[k] as isize, strides[l] as isize);
                        if akl > 0.0 {
                            let pp = s / (hp[k] * hp[l]);
                            put(sk + sl, pp);
                            put(sk, -pp);
                            put(sl, -pp);
                            put(0, pp);
                            let mm = s / (hm[k] * hm[l]);
                            put(-sk - sl, mm);
                            put(-sk, -mm);
                            put(-sl, -mm);
                            put(0, mm);
                        } else {
                            let pm = s / (hp[k] * hm[l]);
                            put(sk, pm);
                            put(sk - sl, -pm);
                            put(0, -pm);
                            put(-sl, pm);
                            let mp = s / (hm[k] * hp[l]);
                            put(sl, mp);
                            put(0, -mp);
                            put(-sk + sl, -mp);
                            put(-sk, mp);
                        }
                    }
                }
            }
            put(0, c);
            Ok(courant)
        })
        .collect();
    let mut courant: f64 = 0.0;
    for r in results {
        courant = courant.max(r?);
    }
    Ok(courant)
}

fn half_bandwidth(grid: &PdeGrid) -> usize {
    let s = grid.strides();
    s.iter().sum::<usize>()
}

/// Solver bookkeeping.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveInfo {
    pub steps: usize,
    pub factorizations: usize,
    /// `dt · max |b_k| / h_k` over all assemblies.
    pub max_courant: f64,
    /// Crank–Nicolson with Courant number above 1 may oscillate.
    pub cfl_warning: bool,
}

/// Nodal values on every time layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PdeSolution {
    pub grid: PdeGrid,
    pub scheme: PdeScheme,
    /// `layers[k][node]` at time `grid.time.node(k)`.
    pub layers: Vec<Vec<f64>>,
    pub info: SolveInfo,
}

/// Source term that vanishes identically.
pub fn no_source(_t: f64, _x: &[f64]) -> f64 {
    0.0
}

/// Solve `u_t = A_t u + c u + f`, `u(t_0, ·) = g` forward over the grid's
/// time nodes.
pub fn solve_cauchy<M, F, G>(model: &M, f: F, g: G, grid: &PdeGrid, scheme: PdeScheme) -> Result<PdeSolution>
where
    M: CoefficientModel<f64> + ?Sized,
    F: Fn(f64, &[f64]) -> f64 + Sync,
    G: Fn(&[f64]) -> f64,
{
    let d = grid.dim();
    if model.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: model.dim() });
    }
    let n = grid.n_nodes();
    let points: Vec<Vec<f64>> = (0..n).map(|i| grid.point(i)).collect();
    let mut u0 = Vec::with_capacity(n);
    for x in &points {
        let v = g(x);
        if !v.is_finite() {
            return Err(Error::Evaluation { t: grid.time.start(), x: x.clone() });
        }
        u0.push(v);
    }
    let source = |t: f64| -> Result<Vec<f64>> {
        let v: Vec<f64> = points.par_iter().map(|x| f(t, x)).collect();
        match v.iter().position(|s| !s.is_finite()) {
            Some(i) => Err(Error::Evaluation { t, x: points[i].clone() }),
            None => Ok(v),
        }
    };
    let theta = scheme.theta();
    let dt = grid.time.step();
    let bw = half_bandwidth(grid);
    let homogeneous = model.time_homogeneous();
    let mut info = SolveInfo::default();

    let mut l_old = Band::zeros(n, bw);
    info.max_courant = assemble(model, grid, grid.time.node(0), &mut l_old)? * dt;
    let mut lhs = Band::zeros(n, bw);
    let build_lhs = |l: &Band, lhs: &mut Band| {
        lhs.data.iter_mut().zip(&l.data).for_each(|(m, v)| *m = -theta * dt * v);
        for i in 0..n {
            *lhs.at_mut(i, i) += 1.0;
        }
        lhs.factorize()
    };
    if homogeneous {
        build_lhs(&l_old, &mut lhs)?;
        info.factorizations += 1;
    }
    let mut l_new = if homogeneous { Band::zeros(0, 0) } else { Band::zeros(n, bw) };
    let mut layers = Vec::with_capacity(grid.time.n_nodes());
    layers.push(u0);
    let mut f_old = source(grid.time.node(0))?;
    let mut lu = vec![0.0; n];
    for k in 0..grid.time.n_steps() {
        let t_new = grid.time.node(k + 1);
        let f_new = source(t_new)?;
        let prev = &layers[k];
        let mut rhs = prev.clone();
        if theta < 1.0 {
            l_old.mul_vec(prev, &mut lu);
            rhs.iter_mut().zip(&lu).for_each(|(r, v)| *r += (1.0 - theta) * dt * v);
        }
        rhs.iter_mut()
            .zip(f_new.iter().zip(&f_old))
            .for_each(|(r, (fn_, fo))| *r += dt * (theta * fn_ + (1.0 - theta) * fo));
        if !homogeneous {
            let c = assemble(model, grid, t_new, &mut l_new)? * dt;
            info.max_courant = info.max_courant.max(c);
            build_lhs(&l_new, &mut lhs)?;
            info.factorizations += 1;
            std::mem::swap(&mut l_old, &mut l_new);
        }
        lhs.solve(&mut rhs);
        if rhs.iter().any(|v| !v.is_finite()) {
            return Err(Error::LinearSolve(format!("non-finite solution at step {}", k + 1)));
        }
        layers.push(rhs);
        f_old = f_new;
        info.steps += 1;
    }
    info.cfl_warning = scheme == PdeScheme::CrankNicolson && info.max_courant > 1.0;
    Ok(PdeSolution { grid: grid.clone(), scheme, layers, info })
}

/// Solve `v_t + A_t v + c v = 0`, `v(T, ·) = g` with `T` the grid's end time:
/// [`solve_cauchy`] for the reversed coefficients, layers reordered so that
/// `layers[k]` sits at time `grid.time.node(k)`.
pub fn solve_terminal_value<M, G>(model: &M, g: G, grid: &PdeGrid, scheme: PdeScheme) -> Result<PdeSolution>
where
    M: CoefficientModel<f64> + ?Sized,
    G: Fn(&[f64]) -> f64,
{
    let reversed = TimeReversed { inner: model, horizon: grid.time.end() + grid.time.start() };
    let mut sol = solve_cauchy(&reversed, no_source, g, grid, scheme)?;
    sol.layers.reverse();
    Ok(sol)
}

impl PdeSolution {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn value(&self, layer: usize, node: usize) -> f64 {
        self.layers[layer][node]
    }

    /// Multilinear interpolation on one layer, clamped to the box.
    pub fn interpolate(&self, layer: usize, x: &[f64]) -> f64 {
        self.grid.interpolation_weights(x).iter().map(|&(i, w)| w * self.layers[layer][i]).sum()
    }

    /// Multilinear interpolation in `(t, x)`.
    pub fn interpolate_at(&self, t: f64, x: &[f64]) -> f64 {
        interpolate_layers(&self.grid, &self.layers, t, x)
    }

    /// Gradient at a node: centred differences, one-sided on the faces.
    pub fn gradient(&self, layer: usize, node: usize) -> Vec<f64> {
        gradient_of(&self.grid, &self.layers[layer], node)
    }

    /// `x_d` times the Hessian at a node, by centred differences (one-sided
    /// on the faces).
    pub fn weighted_hessian(&self, layer: usize, node: usize) -> Matrix {
        weighted_hessian_of(&self.grid, &self.layers[layer], node)
    }

    /// Backward difference in time (forward on the first layer).
    pub fn time_derivative(&self, layer: usize, node: usize) -> f64 {
        let dt = self.grid.time.step();
        if layer == 0 {
            (self.layers[1][node] - self.layers[0][node]) / dt
        } else {
            (self.layers[layer][node] - self.layers[layer - 1][node]) / dt
        }
    }

    /// `t, x_1..x_d, u` rows for every `layer_stride`-th layer (the last layer
    /// is always written).
    pub fn write_csv<W: Write>(&self, out: W, layer_stride: usize) -> Result<()> {
        let d = self.grid.dim();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|i| format!("x_{i}")));
        header.push("u".into());
        w.write_record(&header)?;
        let stride = layer_stride.max(1);
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            if k % stride != 0 && k != last {
                continue;
            }
            let t = self.grid.time.node(k);
            for (i, v) in layer.iter().enumerate() {
                let mut row = vec![format!("{t}")];
                row.extend(self.grid.point(i).iter().map(|x| format!("{x}")));
                row.push(format!("{v:e}"));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path, layer_stride: usize) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?, layer_stride)
    }
}

fn interpolate_layers(grid: &PdeGrid, layers: &[Vec<f64>], t: f64, x: &[f64]) -> f64 {
    let s = ((t - grid.time.start()) / grid.time.step()).clamp(0.0, grid.time.n_steps() as f64);
    let k = (s.floor() as usize).min(grid.time.n_steps().saturating_sub(1));
    let f = s - k as f64;
    let w = grid.interpolation_weights(x);
    let at = |layer: &Vec<f64>| -> f64 { w.iter().map(|&(i, wt)| wt * layer[i]).sum() };
    if layers.len() == 1 {
        return at(&layers[0]);
    }
    (1.0 - f) * at(&layers[k]) + f * at(&layers[k + 1])
}

fn neighbours(grid: &PdeGrid, multi: &[usize], k: usize) -> (usize, usize) {
    let n = grid.axes[k].len();
    let i = multi[k];
    if i == 0 {
        (0, 1)
    } else if i + 1 == n {
        (n - 2, n - 1)
    } else {
        (i - 1, i + 1)
    }
}

fn gradient_of(grid: &PdeGrid, u: &[f64], node: usize) -> Vec<f64> {
    let multi = grid.multi(node);
    (0..grid.dim())
        .map(|k| {
            let (lo, hi) = neighbours(grid, &multi, k);
            let mut m = multi.clone();
            m[k] = lo;
            let ul = u[grid.flat(&m)];
            m[k] = hi;
            let uh = u[grid.flat(&m)];
            (uh - ul) / (grid.axes[k][hi] - grid.axes[k][lo])
        })
        .collect()
}

fn weighted_hessian_of(grid: &PdeGrid, u: &[f64], node: usize) -> Matrix {
    let d = grid.dim();
    let multi = grid.multi(node);
    let xd = grid.axes[d - 1][multi[d - 1]];
    let mut h = Matrix::zeros(d);
    if xd == 0.0 {
        return h;
    }
    for k in 0..d {
        // three-point second difference around an interior node (shifted on faces)
        let n = grid.axes[k].len();
        let c = multi[k].clamp(1, n - 2);
        let mut m = multi.clone();
        let mut val = |i: usize| {
            m[k] = i;
            u[grid.flat(&m)]
        };
        let (um, u0, up) = (val(c - 1), val(c), val(c + 1));
        let a = &grid.axes[k];
        let (hm, hp) = (a[c] - a[c - 1], a[c + 1] - a[c]);
        h[(k, k)] = xd * 2.0 / (hm + hp) * ((up - u0) / hp - (u0 - um) / hm);
    }
    for k in 0..d {
        for l in k + 1..d {
            let (kl, kh) = neighbours(grid, &multi, k);
            let (ll, lh) = neighbours(grid, &multi, l);
            let mut m = multi.clone();
            let mut at = |i: usize, j: usize| {
                m[k] = i;
                m[l] = j;
                u[grid.flat(&m)]
            };
            let v = (at(kh, lh) - at(kh, ll) - at(kl, lh) + at(kl, ll))
                / ((grid.axes[k][kh] - grid.axes[k][kl]) * (grid.axes[l][lh] - grid.axes[l][ll]));
            h[(k, l)] = xd * v;
            h[(l, k)] = xd * v;
        }
    }
    h
}

/// Monte Carlo side of the duality check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualityConfig {
    pub n_paths: usize,
    pub seed: u64,
    pub step: f64,
    #[serde(default)]
    pub scheme: Scheme,
    /// Paths simulated at a time.
    pub block: usize,
    /// Standard errors allowed on top of the discretisation estimate.
    pub z: f64,
    /// Evaluate the PDE side here instead of at the start point. Only useful
    /// as a negative control.
    #[serde(default)]
    pub pde_point: Option<Vec<f64>>,
}

impl Default for DualityConfig {
    fn default() -> Self {
        Self { n_paths: 100_000, seed: 0, step: 1.0 / 512.0, scheme: Scheme::FullTruncation, block: 10_000, z: 3.0, pde_point: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualityReport {
    pub start: Vec<f64>,
    pub pde_point: Vec<f64>,
    pub horizon: f64,
    /// `v(0, x)` on the given grid and on its coarsening.
    pub pde_value: f64,
    pub pde_value_coarse: f64,
    /// The PDE point is not a grid node and was interpolated.
    pub interpolated: bool,
    /// Richardson estimate of the grid error of `pde_value` (first order).
    pub discretization_error: f64,
    pub mc_mean: f64,
    pub mc_se: f64,
    pub n_paths: usize,
    pub gap: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `E[exp(∫ c) g(X(T))]` by simulation from `x` at the grid start time,
/// processed in blocks. The killing integral uses left endpoints.
pub fn monte_carlo_expectation<M, G>(model: &M, g: &G, x: &[f64], start: f64, horizon: f64, cfg: &DualityConfig) -> Result<MeanEstimate>
where
    M: CoefficientModel<f64> + ?Sized,
    G: Fn(&[f64]) -> f64 + Sync,
{
    let grid = TimeGrid::new(start, horizon, cfg.step)?;
    let p0 = SpaceTimePoint::new(start, x.to_vec())?;
    let mut samples = Vec::with_capacity(cfg.n_paths);
    for_each_block(cfg.n_paths, cfg.block, |first, count| {
        let sim = SimConfig::new(count, cfg.seed, cfg.scheme).block(first, count);
        let ens = simulate_sde(model, &p0, &grid, &sim)?;
        let last = grid.n_steps();
        let vals: Vec<f64> = (0..count)
            .into_par_iter()
            .map(|p| {
                let mut k_int = 0.0;
                for k in 0..last {
                    k_int += model.killing(grid.node(k), ens.state(p, k)) * grid.step();
                }
                k_int.exp() * g(ens.state(p, last))
            })
            .collect();
        samples.extend(vals);
        Ok(())
    })?;
    Ok(MeanEstimate::from_samples(&samples))
}

/// Compare `v(0, x)` from the terminal-value problem with a Monte Carlo
/// estimate of `E[exp(∫c) g(X(T))]`. Tolerance: `z` standard errors plus a
/// Richardson estimate of the grid error from the coarsened grid.
pub fn duality_check<M, G>(model: &M, g: G, x: &[f64], grid: &PdeGrid, scheme: PdeScheme, cfg: &DualityConfig) -> Result<DualityReport>
where
    M: CoefficientModel<f64> + ?Sized,
    G: Fn(&[f64]) -> f64 + Sync,
{
    duality_check_split(model, model, g, x, grid, scheme, cfg)
}

/// [`duality_check`] with separate models for the solver and the simulator.
pub fn duality_check_split<P, S, G>(
    pde_model: &P,
    sim_model: &S,
    g: G,
    x: &[f64],
    grid: &PdeGrid,
    scheme: PdeScheme,
    cfg: &DualityConfig,
) -> Result<DualityReport>
where
    P: CoefficientModel<f64> + ?Sized,
    S: CoefficientModel<f64> + ?Sized,
    G: Fn(&[f64]) -> f64 + Sync,
{
    let fine = solve_terminal_value(pde_model, &g, grid, scheme)?;
    let coarse = solve_terminal_value(pde_model, &g, &grid.coarsened()?, scheme)?;
    let pde_point = cfg.pde_point.clone().unwrap_or_else(|| x.to_vec());
    let interpolated = grid.node_of(&pde_point).is_none();
    let v = fine.interpolate(0, &pde_point);
    let vc = coarse.interpolate(0, &pde_point);
    let disc = (v - vc).abs();
    let mc = monte_carlo_expectation(sim_model, &g, x, grid.time.start(), grid.time.end(), cfg)?;
    let gap = (v - mc.mean).abs();
    let tolerance = cfg.z * mc.se + disc;
    Ok(DualityReport {
        start: x.to_vec(),
        pde_point,
        horizon: grid.time.end(),
        pde_value: v,
        pde_value_coarse: vc,
        interpolated,
        discretization_error: disc,
        mc_mean: mc.mean,
        mc_se: mc.se,
        n_paths: mc.n,
        gap,
        tolerance,
        passed: gap <= tolerance,
    })
}

/// Successive-refinement differences at the final time on the inner half-box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// Max difference between consecutive grids at the coarsest grid's nodes.
    pub differences: Vec<f64>,
    /// `log2` of consecutive difference ratios.
    pub orders: Vec<f64>,
    pub observed_order: f64,
}

/// Solve the Cauchy problem on `grid`, then on `levels − 1` successive
/// refinements, and measure how fast the final layers settle.
pub fn self_convergence<M, G>(model: &M, g: G, grid: &PdeGrid, scheme: PdeScheme, levels: usize) -> Result<ConvergenceReport>
where
    M: CoefficientModel<f64> + ?Sized,
    G: Fn(&[f64]) -> f64,
{
    if levels < 3 {
        return Err(Error::InvalidParameter { name: "levels", reason: "need at least 3 grids".into() });
    }
    let mut grids = vec![grid.clone()];
    for _ in 1..levels {
        grids.push(grids.last().unwrap().refined()?);
    }
    let probes: Vec<Vec<f64>> =
        (0..grid.n_nodes()).map(|i| grid.point(i)).filter(|x| grid.in_inner_half_box(x)).collect();
    let mut finals = Vec::new();
    for gr in &grids {
        let sol = solve_cauchy(model, no_source, &g, gr, scheme)?;
        let last = sol.n_layers() - 1;
        finals.push(probes.iter().map(|x| sol.interpolate(last, x)).collect::<Vec<f64>>());
    }
    let differences: Vec<f64> = finals
        .windows(2)
        .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        .collect();
    let orders: Vec<f64> = differences.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let observed_order = *orders.last().unwrap();
    Ok(ConvergenceReport { differences, orders, observed_order })
}

/// Options of [`apriori_estimate_probe`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AprioriConfig {
    /// Growth exponent of the weighted norms.
    pub p: f64,
    pub alpha: f64,
    pub metric: Metric,
    pub pairs: usize,
    pub samples: usize,
    pub seed: u64,
    /// Largest tolerated max/min ratio spread.
    pub max_spread: f64,
}

impl Default for AprioriConfig {
    fn default() -> Self {
        Self { p: 1.0, alpha: 0.5, metric: Metric::Cycloidal, pairs: 4000, samples: 2000, seed: 0, max_spread: 2.0 }
    }
}

/// Data pair `(f, g)` of the probe.
pub struct ProbeData<'a> {
    pub name: String,
    pub source: &'a (dyn Fn(f64, &[f64]) -> f64 + Sync),
    pub initial: &'a (dyn Fn(&[f64]) -> f64 + Sync),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AprioriEntry {
    pub data: String,
    pub level: usize,
    pub solution_norm: f64,
    pub data_norm: f64,
    /// `None` when the data norm vanishes.
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AprioriReport {
    pub entries: Vec<AprioriEntry>,
    /// Largest max/min ratio across the ladder for one data pair.
    pub ladder_spread: f64,
    /// Largest max/min ratio across the family on one grid.
    pub family_spread: f64,
    pub max_spread: f64,
    pub passed: bool,
}

fn spread(v: &[f64]) -> f64 {
    let (lo, hi) = v.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &x| (l.min(x), h.max(x)));
    if v.is_empty() || !(lo > 0.0) {
        1.0
    } else {
        hi / lo
    }
}

/// Composite sampled norm `Σ (sup |w F| + [w F]_α)` over
/// `F ∈ {u, u_t, u_{x_i}, x_d u_{x_i x_j}}`, with weight `w = (1 + |x|)^{−p}`,
/// against the same norm of `f` and `g`, on the inner half-box.
pub fn apriori_estimate_probe<M>(
    model: &M,
    data: &[ProbeData<'_>],
    ladder: &[PdeGrid],
    scheme: PdeScheme,
    cfg: &AprioriConfig,
) -> Result<AprioriReport>
where
    M: CoefficientModel<f64> + ?Sized,
{
    if ladder.is_empty() {
        return Err(Error::InvalidParameter { name: "ladder", reason: "no grids".into() });
    }
    let weight = |x: &[f64]| (1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt()).powf(-cfg.p);
    let norm_of = |field: &(dyn Fn(f64, &[f64]) -> f64 + Sync), region: &Region| -> Result<f64> {
        let wf = |p: &SpaceTimePoint<f64>| weight(&p.x) * field(p.t, &p.x);
        let sup = weighted_sup_norm(wf, region, 0.0, cfg.samples, cfg.seed)?;
        let h = holder_seminorm_estimate(wf, region, cfg.alpha, cfg.metric, cfg.pairs, cfg.seed)?;
        Ok(sup.max(h.sup_norm) + h.seminorm)
    };
    let mut entries = Vec::new();
    for (level, grid) in ladder.iter().enumerate() {
        let d = grid.dim();
        let (lo, hi) = grid.inner_half_box();
        let region = Region::new(grid.time.start(), grid.time.end(), lo.clone(), hi.clone())?;
        let initial_region = Region::new(grid.time.start(), grid.time.start(), lo, hi)?;
        for pair in data {
            let sol = solve_cauchy(model, pair.source, pair.initial, grid, scheme)?;
            let g = pair.initial;
            let data_norm = norm_of(&|_t, x| g(x), &initial_region)? + norm_of(pair.source, &region)?;
            // nodal derivative layers, interpolated like u
            let n = grid.n_nodes();
            let nl = sol.n_layers();
            let mut fields: Vec<Vec<Vec<f64>>> = vec![sol.layers.clone()];
            fields.push((0..nl).map(|k| (0..n).map(|i| sol.time_derivative(k, i)).collect()).collect());
            let grads: Vec<Vec<Vec<f64>>> =
                (0..nl).map(|k| (0..n).into_par_iter().map(|i| sol.gradient(k, i)).collect()).collect();
            for c in 0..d {
                fields.push(grads.iter().map(|l| l.iter().map(|g| g[c]).collect()).collect());
            }
            let hess: Vec<Vec<Matrix>> =
                (0..nl).map(|k| (0..n).into_par_iter().map(|i| sol.weighted_hessian(k, i)).collect()).collect();
            for a in 0..d {
                for b in a..d {
                    fields.push(hess.iter().map(|l| l.iter().map(|h| h[(a, b)]).collect()).collect());
                }
            }
            let mut solution_norm = 0.0;
            for layers in &fields {
                solution_norm += norm_of(&|t, x| interpolate_layers(grid, layers, t, x), &region)?;
            }
            entries.push(AprioriEntry {
                data: pair.name.clone(),
                level,
                solution_norm,
                data_norm,
                ratio: (data_norm > 0.0).then(|| solution_norm / data_norm),
            });
        }
    }
    let mut ladder_spread: f64 = 1.0;
    for pair in data {
        let r: Vec<f64> = entries.iter().filter(|e| e.data == pair.name).filter_map(|e| e.ratio).collect();
        ladder_spread = ladder_spread.max(spread(&r));
    }
    let mut family_spread: f64 = 1.0;
    for level in 0..ladder.len() {
        let r: Vec<f64> = entries.iter().filter(|e| e.level == level).filter_map(|e| e.ratio).collect();
        family_spread = family_spread.max(spread(&r));
    }
    Ok(AprioriReport {
        entries,
        ladder_spread,
        family_spread,
        max_spread: cfg.max_spread,
        passed: ladder_spread < cfg.max_spread && family_spread < cfg.max_spread,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{ConstantCoefficients, HestonModel};
    use crate::martingale::TestFunction;

    fn box_grid(n: usize, steps: usize, t: f64) -> PdeGrid {
        PdeGrid::uniform(2.0, 2.0, &[n, n], 1.0, TimeGrid::with_steps(0.0, t, steps).unwrap()).unwrap()
    }

    fn constant_model() -> ConstantCoefficients<f64> {
        ConstantCoefficients::new(Matrix::from_rows(&[&[0.02, 0.005], &[0.005, 0.02]]), vec![0.1, 0.2], 0.0).unwrap()
    }

    #[test]
    fn grid_checks() {
        let t = TimeGrid::with_steps(0.0, 1.0, 4).unwrap();
        assert!(PdeGrid::from_axes(vec![vec![0.0, 1.0]], t).is_err());
        assert!(PdeGrid::from_axes(vec![vec![0.1, 0.5, 1.0]], t).is_err());
        let g = box_grid(5, 4, 1.0);
        assert_eq!(g.coarsened().unwrap().axes[0], vec![-2.0, 0.0, 2.0]);
        assert_eq!(g.refined().unwrap().axes[1].len(), 9);
        assert_eq!(g.node_of(&[0.0, 1.0]), Some(g.flat(&[2, 2])));
        assert!(g.node_of(&[0.1, 1.0]).is_none());
    }

    #[test]
    fn band_lu_solves() {
        let mut m = Band::zeros(4, 1);
        for i in 0..4 {
            *m.at_mut(i, i) = 4.0;
            if i > 0 {
                *m.at_mut(i, i - 1) = -1.0;
            }
            if i < 3 {
                *m.at_mut(i, i + 1) = -2.0;
            }
        }
        let x = [1.0, -2.0, 0.5, 3.0];
        let mut b = vec![0.0; 4];
        m.mul_vec(&x, &mut b);
        m.factorize().unwrap();
        m.solve(&mut b);
        for (u, v) in b.iter().zip(&x) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn constants_are_preserved() {
        let g = box_grid(17, 16, 1.0);
        for scheme in [PdeScheme::ImplicitEuler, PdeScheme::CrankNicolson] {
            let sol = solve_cauchy(&HestonModel::reference(false), no_source, |_| 1.0, &g, scheme).unwrap();
            for layer in &sol.layers {
                assert!(layer.iter().all(|&v| (v - 1.0).abs() < 1e-13));
            }
            let v = solve_terminal_value(&HestonModel::reference(false), |_| 1.0, &g, scheme).unwrap();
            assert!(v.layers[0].iter().all(|&v| (v - 1.0).abs() < 1e-13));
        }
    }

    #[test]
    fn affine_data_is_transported_exactly() {
        let g = box_grid(33, 20, 0.25);
        let m = constant_model();
        for i in 0..2 {
            let sol = solve_cauchy(&m, no_source, |x| x[i], &g, PdeScheme::ImplicitEuler).unwrap();
            let b = [0.1, 0.2][i];
            let mut worst: f64 = 0.0;
            for (k, layer) in sol.layers.iter().enumerate() {
                let t = g.time.node(k);
                for (node, &u) in layer.iter().enumerate() {
                    let x = g.point(node);
                    if g.in_inner_half_box(&x) {
                        worst = worst.max((u - x[i] - b * t).abs());
                    }
                }
            }
            assert!(worst < 1e-8, "{i}: {worst}");
        }
    }

    #[test]
    fn killing_gives_exponential_decay() {
        let g = PdeGrid::uniform(1.0, 0.5, &[21, 21], 1.0, TimeGrid::with_steps(0.0, 1.0, 400).unwrap()).unwrap();
        let sol = solve_cauchy(&HestonModel::reference(true), no_source, |_| 1.0, &g, PdeScheme::CrankNicolson).unwrap();
        for (k, layer) in sol.layers.iter().enumerate() {
            let e = (-0.02 * g.time.node(k)).exp();
            assert!(layer.iter().all(|&v| (v - e).abs() < 1e-6));
        }
    }

    #[test]
    fn maximum_principle_and_linearity() {
        let g = PdeGrid::uniform(1.0, 0.5, &[33, 33], 1.0, TimeGrid::with_steps(0.0, 0.5, 32).unwrap()).unwrap();
        let m = HestonModel::reference(true);
        let b1 = TestFunction::radial_bump(vec![0.1, 0.1], 0.3).unwrap();
        let b2 = TestFunction::radial_bump(vec![-0.2, 0.2], 0.2).unwrap();
        let s1 = solve_cauchy(&m, no_source, |x| b1.value(0.0, x), &g, PdeScheme::ImplicitEuler).unwrap();
        let s2 = solve_cauchy(&m, no_source, |x| b2.value(0.0, x), &g, PdeScheme::ImplicitEuler).unwrap();
        let s = solve_cauchy(&m, no_source, |x| 2.0 * b1.value(0.0, x) - 3.0 * b2.value(0.0, x), &g, PdeScheme::ImplicitEuler)
            .unwrap();
        let max1 = s1.layers[0].iter().cloned().fold(0.0, f64::max);
        for k in 0..s.n_layers() {
            for i in 0..g.n_nodes() {
                assert!(s1.layers[k][i] >= 0.0 && s1.layers[k][i] <= max1 + 1e-15);
                let lin = 2.0 * s1.layers[k][i] - 3.0 * s2.layers[k][i];
                assert!((s.layers[k][i] - lin).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn terminal_value_is_reversed_cauchy() {
        struct Tilted;
        impl CoefficientModel<f64> for Tilted {
            fn dim(&self) -> usize {
                2
            }
            fn diffusion(&self, t: f64, _x: &[f64], out: &mut Matrix) {
                *out = Matrix::from_rows(&[&[1.0 + t, 0.1], &[0.1, 0.5]]);
            }
            fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
                out[0] = t - 0.5;
                out[1] = 0.3 - x[1];
            }
            fn time_homogeneous(&self) -> bool {
                false
            }
        }
        let g = PdeGrid::uniform(1.0, 1.0, &[9, 9], 1.0, TimeGrid::with_steps(0.0, 1.0, 8).unwrap()).unwrap();
        let data = |x: &[f64]| (-x[0] * x[0] - (x[1] - 0.3).powi(2)).exp();
        for scheme in [PdeScheme::ImplicitEuler, PdeScheme::CrankNicolson] {
            let v = solve_terminal_value(&Tilted, data, &g, scheme).unwrap();
            let u = solve_cauchy(&TimeReversed { inner: Tilted, horizon: 1.0 }, no_source, data, &g, scheme).unwrap();
            for k in 0..v.n_layers() {
                assert_eq!(v.layers[k], u.layers[u.n_layers() - 1 - k]);
            }
            assert!(u.info.factorizations == 8);
        }
    }

    #[test]
    fn pure_transport_follows_characteristics() {
        let m = ConstantCoefficients::new(Matrix::zeros(2), vec![0.3, 0.4], 0.0).unwrap();
        let data = |x: &[f64]| (-(x[0] * x[0]) - (x[1] - 0.5).powi(2)).exp();
        let mut errs = Vec::new();
        for n in [33, 65] {
            let g = PdeGrid::uniform(2.0, 2.0, &[n, n], 1.0, TimeGrid::with_steps(0.0, 0.5, n - 1).unwrap()).unwrap();
            let v = solve_terminal_value(&m, data, &g, PdeScheme::ImplicitEuler).unwrap();
            let mut e: f64 = 0.0;
            for i in 0..g.n_nodes() {
                let x = g.point(i);
                if g.in_inner_half_box(&x) {
                    e = e.max((v.layers[0][i] - data(&[x[0] + 0.15, x[1] + 0.2])).abs());
                }
            }
            errs.push(e);
        }
        assert!(errs[0] < 0.05 && errs[1] < 0.6 * errs[0], "{errs:?}");
    }

    #[test]
    fn boundary_layer_reads_nothing_below() {
        // the assembled x_d = 0 rows only reference nodes in the half-space
        let g = box_grid(9, 2, 1.0);
        let mut l = Band::zeros(g.n_nodes(), half_bandwidth(&g));
        assemble(&HestonModel::reference(true), &g, 0.0, &mut l).unwrap();
        let s = g.strides();
        for i in (0..g.n_nodes()).filter(|&i| g.multi(i)[1] == 0) {
            assert!(l.at(i, i + s[1]) > 0.0);
            for j in i.saturating_sub(l.bw)..(i + l.bw + 1).min(l.n) {
                if l.at(i, j) != 0.0 {
                    assert!(g.multi(j)[1] <= 1);
                }
            }
        }
    }

    #[test]
    fn derivatives_of_quadratic() {
        let g = box_grid(9, 1, 1.0);
        let u: Vec<f64> = (0..g.n_nodes()).map(|i| {
            let x = g.point(i);
            x[0] * x[0] + 3.0 * x[0] * x[1] - x[1]
        }).collect();
        let sol = PdeSolution { grid: g.clone(), scheme: PdeScheme::ImplicitEuler, layers: vec![u.clone(), u], info: SolveInfo::default() };
        let node = g.flat(&[5, 3]);
        let x = g.point(node);
        let grad = sol.gradient(1, node);
        assert!((grad[0] - (2.0 * x[0] + 3.0 * x[1])).abs() < 1e-12);
        assert!((grad[1] - (3.0 * x[0] - 1.0)).abs() < 1e-12);
        let h = sol.weighted_hessian(1, node);
        assert!((h[(0, 0)] - 2.0 * x[1]).abs() < 1e-12);
        assert!((h[(0, 1)] - 3.0 * x[1]).abs() < 1e-12);
        assert_eq!(sol.time_derivative(1, node), 0.0);
        let mut buf = Vec::new();
        sol.write_csv(&mut buf, 1).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x_1,x_2,u\n"));
        assert_eq!(text.lines().count(), 1 + 2 * g.n_nodes());
    }

    #[test]
    fn apriori_probe_scales_linearly() {
        let m = HestonModel::reference(true);
        let ladder = vec![
            PdeGrid::uniform(1.0, 0.5, &[17, 17], 1.0, TimeGrid::with_steps(0.0, 0.25, 8).unwrap()).unwrap(),
        ];
        let bump = TestFunction::radial_bump(vec![0.0, 0.2], 0.3).unwrap();
        let g1 = |x: &[f64]| bump.value(0.0, x);
        let g2 = |x: &[f64]| 2.0 * bump.value(0.0, x);
        let zero = |_x: &[f64]| 0.0;
        let data = [
            ProbeData { name: "g".into(), source: &no_source, initial: &g1 },
            ProbeData { name: "2g".into(), source: &no_source, initial: &g2 },
            ProbeData { name: "0".into(), source: &no_source, initial: &zero },
        ];
        let cfg = AprioriConfig { pairs: 500, samples: 200, ..AprioriConfig::default() };
        let rep = apriori_estimate_probe(&m, &data, &ladder, PdeScheme::ImplicitEuler, &cfg).unwrap();
        let (e1, e2, e0) = (&rep.entries[0], &rep.entries[1], &rep.entries[2]);
        assert_eq!(e2.solution_norm, 2.0 * e1.solution_norm);
        assert_eq!(e2.data_norm, 2.0 * e1.data_norm);
        assert_eq!(e1.ratio, e2.ratio);
        assert_eq!(e0.ratio, None);
        assert_eq!(e0.solution_norm, 0.0);
    }

    #[test]
    fn duality_with_constant_data() {
        let g = PdeGrid::uniform(1.0, 0.5, &[9, 9], 1.0, TimeGrid::with_steps(0.0, 0.5, 8).unwrap()).unwrap();
        let cfg = DualityConfig { n_paths: 2000, seed: 1, step: 1.0 / 64.0, block: 700, ..DualityConfig::default() };
        let rep = duality_check(&HestonModel::reference(false), |_: &[f64]| 1.0, &[0.0, 0.125], &g, PdeScheme::ImplicitEuler, &cfg)
            .unwrap();
        assert!((rep.pde_value - 1.0).abs() < 1e-12);
        assert_eq!(rep.mc_mean, 1.0);
        assert!(rep.passed && !rep.interpolated);
    }
}
