//! Markovian projection: estimate `b(t, x) = E[β(t) | X(t) = x]` and
//! `x_d a(t, x) = E[ξξ*(t) | X(t) = x]` from Itô-process ensembles, rebuild a
//! gridded coefficient model and compare one-dimensional marginals.
//!
//! Estimation is kernel regression on a `(t, x)` lattice. Samples are binned
//! onto the lattice first (nearest node for the box kernel, linear binning for
//! the Gaussian kernel) and then smoothed across nodes. The Gaussian kernel
//! uses a local-linear fit, which reproduces affine coefficients and behaves
//! well at the `x_d = 0` edge; the box kernel is a plain local average.
//!
//! Steps are pooled into the nearest time node, so occupancy counts
//! sample-steps rather than paths.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffs::{factor_or_psd_root, CoefficientModel, Provenance};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_into, psd_clip, SmallMatrix};
use crate::sdesim::{PathEnsemble, TimeGrid};
use crate::stats::{ks_permutation_quantile, ks_two_sample, sliced_wasserstein1, unit_directions, MeanEstimate};

type Matrix = SmallMatrix<f64>;

/// Smoothing kernel across lattice nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Kernel {
    /// Average over nodes with `|x_j − x_i|_k ≤ half_widths_k` for every `k`.
    /// Zero half-widths give one cell per node.
    Box { half_widths: Vec<f64> },
    /// Product Gaussian; `None` selects `1.06 σ̂ N^{−1/(d+4)}` per coordinate,
    /// floored at the largest node spacing of that coordinate.
    Gaussian { bandwidths: Option<Vec<f64>> },
}

impl Default for Kernel {
    fn default() -> Self {
        Kernel::Gaussian { bandwidths: None }
    }
}

/// Tensor lattice of spatial nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub nodes: Vec<Vec<f64>>,
}

impl Lattice {
    pub fn new(nodes: Vec<Vec<f64>>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidParameter { name: "lattice", reason: "no coordinates".into() });
        }
        for (k, axis) in nodes.iter().enumerate() {
            if axis.len() < 2 || axis.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::InvalidParameter {
                    name: "lattice",
                    reason: format!("coordinate {} needs at least two strictly increasing nodes", k + 1),
                });
            }
        }
        if nodes[nodes.len() - 1][0] != 0.0 {
            return Err(Error::InvalidParameter { name: "lattice", reason: "x_d nodes must start at 0".into() });
        }
        Ok(Self { nodes })
    }

    /// `counts[k]` uniform nodes on `[lower[k], upper[k]]`; the last axis
    /// starts at 0 and is refined towards it with nodes `upper · (i/n)^power`.
    pub fn refined(lower: &[f64], upper: &[f64], counts: &[usize], power: f64) -> Result<Self> {
        let d = counts.len();
        if lower.len() != d || upper.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: lower.len().min(upper.len()) });
        }
        let nodes = (0..d)
            .map(|k| {
                let n = counts[k].max(2) - 1;
                (0..=n)
                    .map(|i| {
                        let s = i as f64 / n as f64;
                        if k + 1 == d {
                            upper[k] * s.powf(power)
                        } else {
                            lower[k] + (upper[k] - lower[k]) * s
                        }
                    })
                    .collect()
            })
            .collect();
        Self::new(nodes)
    }

    pub fn dim(&self) -> usize {
        self.nodes.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index, last coordinate fastest.
    pub fn flat(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.nodes).fold(0, |acc, (&i, axis)| acc * axis.len() + i)
    }

    pub fn multi(&self, mut flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for k in (0..self.dim()).rev() {
            let n = self.nodes[k].len();
            out[k] = flat % n;
            flat /= n;
        }
        out
    }

    pub fn point(&self, flat: usize) -> Vec<f64> {
        self.multi(flat).iter().zip(&self.nodes).map(|(&i, axis)| axis[i]).collect()
    }

    /// Cell `i` with `nodes[i] ≤ x ≤ nodes[i+1]` and the fraction along it,
    /// clamped to the lattice.
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

    fn nearest(axis: &[f64], x: f64) -> usize {
        let (i, f) = Self::locate(axis, x);
        if f > 0.5 {
            i + 1
        } else {
            i
        }
    }

    fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.nodes).all(|(&v, axis)| v >= axis[0] && v <= axis[axis.len() - 1])
    }

    /// Corner indices and multilinear weights of the cell containing `x`.
    fn corners(&self, x: &[f64], out: &mut Vec<(usize, f64)>) {
        let d = self.dim();
        out.clear();
        let cells: Vec<(usize, f64)> = x.iter().zip(&self.nodes).map(|(&v, a)| Self::locate(a, v)).collect();
        for mask in 0..(1usize << d) {
            let mut w = 1.0;
            let mut flat = 0;
            for k in 0..d {
                let (i, f) = cells[k];
                let up = (mask >> k) & 1 == 1;
                w *= if up { f } else { 1.0 - f };
                flat = flat * self.nodes[k].len() + i + usize::from(up);
            }
            if w != 0.0 {
                out.push((flat, w));
            }
        }
    }

    fn max_spacing(&self, k: usize) -> f64 {
        self.nodes[k].windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }
}

/// Where and how the conditional expectations are estimated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinningSpec {
    /// Time nodes, strictly increasing.
    pub times: Vec<f64>,
    pub lattice: Lattice,
    #[serde(default)]
    pub kernel: Kernel,
    /// Nodes with smaller kernel-weighted occupancy are masked.
    pub min_occupancy: f64,
}

impl BinningSpec {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.lattice.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: self.lattice.dim() });
        }
        if self.times.is_empty() || self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter { name: "times", reason: "need strictly increasing time nodes".into() });
        }
        match &self.kernel {
            Kernel::Box { half_widths: h } | Kernel::Gaussian { bandwidths: Some(h) } => {
                if h.len() != d {
                    return Err(Error::DimensionMismatch { expected: d, got: h.len() });
                }
                let positive = matches!(self.kernel, Kernel::Gaussian { .. });
                if h.iter().any(|&v| !(v >= 0.0) || (positive && v == 0.0)) {
                    return Err(Error::InvalidParameter { name: "kernel", reason: "bandwidths must be positive".into() });
                }
            }
            Kernel::Gaussian { bandwidths: None } => {}
        }
        if !(self.min_occupancy >= 0.0) {
            return Err(Error::InvalidParameter { name: "min_occupancy", reason: "must be non-negative".into() });
        }
        Ok(())
    }

    fn time_node(&self, t: f64) -> usize {
        let i = self.times.partition_point(|&v| v < t);
        if i == 0 {
            0
        } else if i == self.times.len() {
            i - 1
        } else if t - self.times[i - 1] <= self.times[i] - t {
            i - 1
        } else {
            i
        }
    }
}

/// Per-node record of binned sums. With binning weight `w`, offset
/// `u = x − node` and responses `y = (x_d, β, ξξ*)` a node stores
/// `Σw, Σwu, Σwuu*, Σwy, Σwuy*`, enough for an exact local-linear fit in the
/// sample positions.
#[derive(Clone, Copy, Debug)]
struct Layout {
    d: usize,
    m: usize,
}

impl Layout {
    fn new(d: usize) -> Self {
        Self { d, m: 1 + d + d * d }
    }
    fn u(&self) -> usize {
        1
    }
    fn uu(&self) -> usize {
        1 + self.d
    }
    fn y(&self) -> usize {
        1 + self.d + self.d * self.d
    }
    fn uy(&self) -> usize {
        self.y() + self.m
    }
    fn len(&self) -> usize {
        self.uy() + self.d * self.m
    }

    fn push(&self, rec: &mut [f64], w: f64, u: &[f64], y: &[f64]) {
        let (d, m) = (self.d, self.m);
        rec[0] += w;
        for k in 0..d {
            let wu = w * u[k];
            rec[self.u() + k] += wu;
            for l in 0..d {
                rec[self.uu() + k * d + l] += wu * u[l];
            }
            for q in 0..m {
                rec[self.uy() + k * m + q] += wu * y[q];
            }
        }
        for q in 0..m {
            rec[self.y() + q] += w * y[q];
        }
    }
}

/// Streaming accumulator over ensemble blocks. Blocks must be added in a
/// fixed order for bit-reproducible results.
#[derive(Clone, Debug)]
pub struct CoefficientAccumulator {
    spec: BinningSpec,
    dim: usize,
    grid: Option<TimeGrid>,
    /// `[time][node][response]`
    sums: Vec<f64>,
    /// `[time][coord]` sums of `x` and `x²` over pooled samples, and counts.
    moments: Vec<(f64, f64)>,
    pooled: Vec<f64>,
    paths: usize,
}

/// Fixed number of partial accumulators per block, independent of the thread
/// count.
const PARTIALS: usize = 32;

impl CoefficientAccumulator {
    pub fn new(spec: BinningSpec, dim: usize) -> Result<Self> {
        spec.validate(dim)?;
        let nt = spec.times.len();
        let size = nt * spec.lattice.len() * Layout::new(dim).len();
        Ok(Self {
            dim,
            grid: None,
            sums: vec![0.0; size],
            moments: vec![(0.0, 0.0); nt * dim],
            pooled: vec![0.0; nt],
            paths: 0,
            spec,
        })
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn add(&mut self, ens: &PathEnsemble<f64>) -> Result<()> {
        let d = self.dim;
        if ens.dim != d {
            return Err(Error::DimensionMismatch { expected: d, got: ens.dim });
        }
        if ens.drivers.is_none() {
            return Err(Error::MissingDriverRecords);
        }
        match self.grid {
            None => self.grid = Some(ens.grid),
            Some(g) if g == ens.grid => {}
            Some(_) => {
                return Err(Error::InvalidParameter { name: "ensemble", reason: "blocks must share one time grid".into() })
            }
        }
        let spec = &self.spec;
        let lay = Layout::new(d);
        let r = lay.len();
        let nn = spec.lattice.len();
        let steps = ens.grid.n_steps();
        let tnode: Vec<usize> = (0..steps).map(|k| spec.time_node(ens.grid.node(k))).collect();
        let points: Vec<Vec<f64>> = (0..nn).map(|i| spec.lattice.point(i)).collect();
        let gaussian = matches!(spec.kernel, Kernel::Gaussian { .. });
        let n = ens.n_paths();
        let chunk = n.div_ceil(PARTIALS).max(1);
        let nt = spec.times.len();
        let partials: Vec<(Vec<f64>, Vec<(f64, f64)>, Vec<f64>)> = (0..n)
            .collect::<Vec<_>>()
            .par_chunks(chunk)
            .map(|paths| {
                let mut sums = vec![0.0; nt * nn * r];
                let mut mom = vec![(0.0, 0.0); nt * d];
                let mut pooled = vec![0.0; nt];
                let mut corners = Vec::with_capacity(1 << d);
                let mut resp = vec![0.0; lay.m];
                let mut u = vec![0.0; d];
                let mut multi = vec![0; d];
                for &p in paths {
                    for k in 0..steps {
                        let x = ens.state(p, k);
                        let ti = tnode[k];
                        pooled[ti] += 1.0;
                        for i in 0..d {
                            let m = &mut mom[ti * d + i];
                            m.0 += x[i];
                            m.1 += x[i] * x[i];
                        }
                        resp[0] = x[d - 1];
                        resp[1..1 + d].copy_from_slice(ens.beta(p, k).unwrap());
                        resp[1 + d..].copy_from_slice(ens.xi2(p, k).unwrap());
                        if gaussian {
                            if !spec.lattice.contains(x) {
                                continue;
                            }
                            spec.lattice.corners(x, &mut corners);
                            for &(node, w) in &corners {
                                for (i, (ui, pi)) in u.iter_mut().zip(&points[node]).enumerate() {
                                    *ui = x[i] - pi;
                                }
                                let base = (ti * nn + node) * r;
                                lay.push(&mut sums[base..base + r], w, &u, &resp);
                            }
                        } else {
                            for i in 0..d {
                                multi[i] = Lattice::nearest(&spec.lattice.nodes[i], x[i]);
                                u[i] = x[i] - spec.lattice.nodes[i][multi[i]];
                            }
                            let base = (ti * nn + spec.lattice.flat(&multi)) * r;
                            lay.push(&mut sums[base..base + r], 1.0, &u, &resp);
                        }
                    }
                }
                (sums, mom, pooled)
            })
            .collect();
        for (sums, mom, pooled) in partials {
            self.sums.iter_mut().zip(&sums).for_each(|(a, b)| *a += b);
            self.moments.iter_mut().zip(&mom).for_each(|(a, b)| {
                a.0 += b.0;
                a.1 += b.1;
            });
            self.pooled.iter_mut().zip(&pooled).for_each(|(a, b)| *a += b);
        }
        self.paths += n;
        Ok(())
    }

    /// Smooth the binned sums into node estimates.
    pub fn finish(self) -> Result<MimickedCoefficients> {
        if self.paths == 0 {
            return Err(Error::MissingDriverRecords);
        }
        let d = self.dim;
        let lay = Layout::new(d);
        let r = lay.len();
        let e_len = 1 + lay.m;
        let spec = &self.spec;
        let lat = &spec.lattice;
        let nn = lat.len();
        let nt = spec.times.len();
        let points: Vec<Vec<f64>> = (0..nn).map(|i| lat.point(i)).collect();

        let mut bandwidths = Vec::with_capacity(nt);
        for ti in 0..nt {
            let bw: Vec<f64> = match &spec.kernel {
                Kernel::Box { half_widths } => half_widths.clone(),
                Kernel::Gaussian { bandwidths: Some(b) } => b.clone(),
                Kernel::Gaussian { bandwidths: None } => {
                    let n = self.pooled[ti].max(1.0);
                    let factor = 1.06 * (self.paths as f64).powf(-1.0 / (d as f64 + 4.0));
                    (0..d)
                        .map(|k| {
                            let (s, s2) = self.moments[ti * d + k];
                            let var = (s2 / n - (s / n).powi(2)).max(0.0);
                            (factor * var.sqrt()).max(lat.max_spacing(k))
                        })
                        .collect()
                }
            };
            bandwidths.push(bw);
        }

        let mut est = vec![0.0; nt * nn * e_len];
        est.par_chunks_mut(nn * e_len).enumerate().for_each(|(ti, layer)| {
            let bw = &bandwidths[ti];
            let sums = &self.sums[ti * nn * r..(ti + 1) * nn * r];
            for i in 0..nn {
                let out = &mut layer[i * e_len..(i + 1) * e_len];
                smooth_node(&spec.kernel, lat, &points, i, bw, sums, lay, out);
            }
        });

        let mut mc = MimickedCoefficients {
            dim: d,
            times: spec.times.clone(),
            lattice: lat.clone(),
            kernel: spec.kernel.clone(),
            bandwidths,
            min_occupancy: spec.min_occupancy,
            paths: self.paths,
            occupancy: vec![0.0; nt * nn],
            xd_mean: vec![0.0; nt * nn],
            b: vec![0.0; nt * nn * d],
            dmat: vec![0.0; nt * nn * d * d],
            a: Vec::new(),
            clip: Vec::new(),
        };
        for idx in 0..nt * nn {
            let e = &est[idx * e_len..(idx + 1) * e_len];
            mc.occupancy[idx] = e[0];
            mc.xd_mean[idx] = e[1];
            mc.b[idx * d..(idx + 1) * d].copy_from_slice(&e[2..2 + d]);
            let dm = &mut mc.dmat[idx * d * d..(idx + 1) * d * d];
            for i in 0..d {
                for j in 0..d {
                    dm[i * d + j] = 0.5 * (e[2 + d + i * d + j] + e[2 + d + j * d + i]);
                }
            }
        }
        mc.derive();
        Ok(mc)
    }
}

/// Kernel-smoothed estimate at node `i`. `out[0]` is the occupancy, the rest
/// are response estimates (NaN when nothing is in reach).
#[allow(clippy::too_many_arguments)]
fn smooth_node(
    kernel: &Kernel,
    lat: &Lattice,
    points: &[Vec<f64>],
    i: usize,
    bw: &[f64],
    sums: &[f64],
    lay: Layout,
    out: &mut [f64],
) {
    let (d, m) = (lay.d, lay.m);
    let r = lay.len();
    let xi = &points[i];
    let gaussian = matches!(kernel, Kernel::Gaussian { .. });
    let reach: Vec<f64> = bw.iter().map(|&h| if gaussian { 4.0 * h } else { h * (1.0 + 1e-12) }).collect();
    // neighbour ranges per axis
    let ranges: Vec<(usize, usize)> = (0..d)
        .map(|k| {
            let axis = &lat.nodes[k];
            let lo = axis.partition_point(|&v| v < xi[k] - reach[k]);
            let hi = axis.partition_point(|&v| v <= xi[k] + reach[k]);
            (lo, hi.max(lo + 1).min(axis.len()))
        })
        .collect();
    let p = d + 1;
    let mut gram = vec![0.0; p * p];
    let mut rhs = vec![0.0; p * m];
    let mut occ = 0.0;
    let mut multi: Vec<usize> = ranges.iter().map(|r| r.0).collect();
    let mut delta = vec![0.0; d];
    loop {
        let j = lat.flat(&multi);
        let rec = &sums[j * r..(j + 1) * r];
        let cnt = rec[0];
        if cnt > 0.0 {
            let mut w = 1.0;
            for k in 0..d {
                delta[k] = points[j][k] - xi[k];
                let s = delta[k] / bw[k].max(1e-300);
                w *= if gaussian { (-0.5 * s * s).exp() } else { 1.0 };
            }
            if w > 0.0 {
                occ += w * cnt;
                gram[0] += w * cnt;
                for k in 0..d {
                    let uk = rec[lay.u() + k];
                    let first = w * (delta[k] * cnt + uk);
                    gram[k + 1] += first;
                    gram[(k + 1) * p] += first;
                    for l in 0..d {
                        let ul = rec[lay.u() + l];
                        gram[(k + 1) * p + l + 1] +=
                            w * (delta[k] * delta[l] * cnt + delta[k] * ul + uk * delta[l] + rec[lay.uu() + k * d + l]);
                    }
                }
                for q in 0..m {
                    let y = rec[lay.y() + q];
                    rhs[q] += w * y;
                    for k in 0..d {
                        rhs[(k + 1) * m + q] += w * (delta[k] * y + rec[lay.uy() + k * m + q]);
                    }
                }
            }
        }
        // odometer over the neighbourhood
        let mut k = d;
        loop {
            if k == 0 {
                out[0] = occ;
                let fit = if gaussian { solve_local_linear(&gram, &rhs, p, m) } else { None };
                match fit {
                    Some(v) => out[1..].copy_from_slice(&v),
                    None => {
                        for q in 0..m {
                            out[q + 1] = if gram[0] > 0.0 { rhs[q] / gram[0] } else { f64::NAN };
                        }
                    }
                }
                return;
            }
            k -= 1;
            multi[k] += 1;
            if multi[k] < ranges[k].1 {
                break;
            }
            multi[k] = ranges[k].0;
        }
    }
}

/// Intercepts of the weighted least-squares fits, or `None` when the design
/// is too poorly conditioned for a local-linear fit.
fn solve_local_linear(gram: &[f64], rhs: &[f64], p: usize, m: usize) -> Option<Vec<f64>> {
    let mut a = gram.to_vec();
    let mut b = rhs.to_vec();
    let scale = (0..p).map(|i| a[i * p + i].abs()).fold(0.0, f64::max);
    if !(scale > 0.0) {
        return None;
    }
    // symmetric diagonal scaling keeps the pivot test meaningful
    let s: Vec<f64> = (0..p).map(|i| 1.0 / a[i * p + i].abs().sqrt().max(1e-300)).collect();
    for i in 0..p {
        for j in 0..p {
            a[i * p + j] *= s[i] * s[j];
        }
        for q in 0..m {
            b[i * m + q] *= s[i];
        }
    }
    for c in 0..p {
        let piv = (c..p).max_by(|&x, &y| a[x * p + c].abs().total_cmp(&a[y * p + c].abs())).unwrap();
        if a[piv * p + c].abs() < 1e-9 {
            return None;
        }
        if piv != c {
            for j in 0..p {
                a.swap(c * p + j, piv * p + j);
            }
            for q in 0..m {
                b.swap(c * m + q, piv * m + q);
            }
        }
        for row in c + 1..p {
            let f = a[row * p + c] / a[c * p + c];
            for j in c..p {
                a[row * p + j] -= f * a[c * p + j];
            }
            for q in 0..m {
                b[row * m + q] -= f * b[c * m + q];
            }
        }
    }
    let mut x = vec![0.0; p * m];
    for c in (0..p).rev() {
        for q in 0..m {
            let mut v = b[c * m + q];
            for j in c + 1..p {
                v -= a[c * p + j] * x[j * m + q];
            }
            x[c * m + q] = v / a[c * p + c];
        }
    }
    Some((0..m).map(|q| x[q] * s[0]).collect())
}

/// Estimate the mimicking coefficients from one ensemble with driver records.
pub fn estimate_mimicking_coefficients(ens: &PathEnsemble<f64>, spec: &BinningSpec) -> Result<MimickedCoefficients> {
    let mut acc = CoefficientAccumulator::new(spec.clone(), ens.dim)?;
    acc.add(ens)?;
    acc.finish()
}

/// Node estimates of `b` and `D = x_d a` with the derived, PSD-clipped `a`.
#[derive(Clone, Debug, PartialEq)]
pub struct MimickedCoefficients {
    pub dim: usize,
    pub times: Vec<f64>,
    pub lattice: Lattice,
    pub kernel: Kernel,
    /// Per time node.
    pub bandwidths: Vec<Vec<f64>>,
    pub min_occupancy: f64,
    pub paths: usize,
    /// `[time][node]`
    pub occupancy: Vec<f64>,
    /// Local estimate of `x_d`, the divisor for `a = D / x_d`.
    pub xd_mean: Vec<f64>,
    /// `[time][node][d]`
    pub b: Vec<f64>,
    /// `[time][node][d·d]`, symmetric.
    pub dmat: Vec<f64>,
    /// Derived `a`, NaN where undefined.
    pub a: Vec<f64>,
    /// Eigenvalue-floor correction applied to `a` (max-norm).
    pub clip: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    dim: usize,
    times: Vec<f64>,
    lattice: Lattice,
    kernel: Kernel,
    bandwidths: Vec<Vec<f64>>,
    min_occupancy: f64,
    paths: usize,
}

impl MimickedCoefficients {
    /// Coefficients given directly by functions `(t, x) ↦ (b, D)` at every node,
    /// with unbounded occupancy.
    pub fn from_fields(
        times: Vec<f64>,
        lattice: Lattice,
        f: impl Fn(f64, &[f64]) -> (Vec<f64>, Matrix),
    ) -> Result<Self> {
        let d = lattice.dim();
        let nn = lattice.len();
        let nt = times.len();
        let mut mc = Self {
            dim: d,
            lattice,
            kernel: Kernel::Box { half_widths: vec![0.0; d] },
            bandwidths: vec![vec![0.0; d]; nt],
            min_occupancy: 0.0,
            paths: 0,
            occupancy: vec![f64::INFINITY; nt * nn],
            xd_mean: vec![0.0; nt * nn],
            b: vec![0.0; nt * nn * d],
            dmat: vec![0.0; nt * nn * d * d],
            a: Vec::new(),
            clip: Vec::new(),
            times,
        };
        for ti in 0..nt {
            for i in 0..nn {
                let x = mc.lattice.point(i);
                let (b, dm) = f(mc.times[ti], &x);
                if b.len() != d || dm.dim() != d {
                    return Err(Error::DimensionMismatch { expected: d, got: b.len() });
                }
                let idx = ti * nn + i;
                mc.xd_mean[idx] = x[d - 1];
                mc.b[idx * d..(idx + 1) * d].copy_from_slice(&b);
                mc.dmat[idx * d * d..(idx + 1) * d * d].copy_from_slice(dm.as_slice());
            }
        }
        mc.derive();
        Ok(mc)
    }

    pub fn n_nodes(&self) -> usize {
        self.lattice.len()
    }

    pub fn is_masked(&self, idx: usize) -> bool {
        !(self.occupancy[idx] >= self.min_occupancy) || !(self.occupancy[idx] > 0.0)
    }

    pub fn masked_fraction(&self) -> f64 {
        let n = self.occupancy.len();
        (0..n).filter(|&i| self.is_masked(i)).count() as f64 / n.max(1) as f64
    }

    pub fn b_at(&self, idx: usize) -> &[f64] {
        &self.b[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn d_at(&self, idx: usize) -> Matrix {
        let dd = self.dim * self.dim;
        Matrix::from_fn(self.dim, |i, j| self.dmat[idx * dd + i * self.dim + j])
    }

    pub fn a_at(&self, idx: usize) -> Option<Matrix> {
        let dd = self.dim * self.dim;
        let s = &self.a[idx * dd..(idx + 1) * dd];
        s.iter().all(|v| v.is_finite()).then(|| Matrix::from_fn(self.dim, |i, j| s[i * self.dim + j]))
    }

    /// `a = D / x̂_d` off the boundary, linear extrapolation in `x_d` onto the
    /// boundary layer from the two nearest usable layers, then an eigenvalue
    /// floor of `1e-6 · trace/d`.
    fn derive(&mut self) {
        let d = self.dim;
        let dd = d * d;
        let nn = self.lattice.len();
        let nt = self.times.len();
        let nz = self.lattice.nodes[d - 1].len();
        let zs = self.lattice.nodes[d - 1].clone();
        self.a = vec![f64::NAN; nt * nn * dd];
        self.clip = vec![0.0; nt * nn];
        let usable = |mc: &Self, idx: usize| !mc.is_masked(idx) && mc.xd_mean[idx] > 1e-12;
        for ti in 0..nt {
            for i in 0..nn {
                let idx = ti * nn + i;
                if usable(self, idx) && zs[i % nz] > 0.0 {
                    for q in 0..dd {
                        self.a[idx * dd + q] = self.dmat[idx * dd + q] / self.xd_mean[idx];
                    }
                }
            }
            // boundary layer: i % nz == 0
            for col in (0..nn).step_by(nz) {
                let idx0 = ti * nn + col;
                if self.is_masked(idx0) {
                    continue;
                }
                let layers: Vec<usize> = (1..nz).filter(|&l| usable(self, ti * nn + col + l)).take(2).collect();
                let (i1, z1) = match layers.first() {
                    Some(&l) => (ti * nn + col + l, zs[l]),
                    None => continue,
                };
                for q in 0..dd {
                    let a1 = self.a[i1 * dd + q];
                    self.a[idx0 * dd + q] = match layers.get(1) {
                        Some(&l2) => {
                            let (i2, z2) = (ti * nn + col + l2, zs[l2]);
                            a1 - (self.a[i2 * dd + q] - a1) * z1 / (z2 - z1)
                        }
                        None => a1,
                    };
                }
            }
            for i in 0..nn {
                let idx = ti * nn + i;
                if let Some(a) = self.a_at(idx) {
                    let floor = (1e-6 * a.trace() / d as f64).max(1e-12);
                    let (clipped, mag) = psd_clip(&a, floor);
                    self.a[idx * dd..(idx + 1) * dd].copy_from_slice(clipped.as_slice());
                    self.clip[idx] = mag;
                }
            }
        }
    }

    fn sidecar_path(csv: &Path) -> PathBuf {
        csv.with_extension("json")
    }

    /// CSV (one row per time node and lattice node) plus a JSON sidecar with
    /// the lattice metadata next to it.
    pub fn save(&self, csv_path: &Path) -> Result<()> {
        let d = self.dim;
        let nn = self.lattice.len();
        let mut w = csv::Writer::from_path(csv_path)?;
        let mut header = vec!["t_index".to_string()];
        header.extend((1..=d).map(|i| format!("i_{i}")));
        header.extend((1..=d).map(|i| format!("x_{i}")));
        header.push("occupancy".into());
        header.extend((1..=d).map(|i| format!("b_{i}")));
        for i in 1..=d {
            header.extend((1..=d).map(|j| format!("D_{i}{j}")));
        }
        header.push("clip".into());
        header.push("xd_mean".into());
        w.write_record(&header)?;
        for ti in 0..self.times.len() {
            for i in 0..nn {
                let idx = ti * nn + i;
                let mut row = vec![ti.to_string()];
                row.extend(self.lattice.multi(i).iter().map(|v| v.to_string()));
                row.extend(self.lattice.point(i).iter().map(|v| format!("{v:e}")));
                row.push(format!("{:e}", self.occupancy[idx]));
                row.extend(self.b_at(idx).iter().map(|v| format!("{v:e}")));
                row.extend(self.dmat[idx * d * d..(idx + 1) * d * d].iter().map(|v| format!("{v:e}")));
                row.push(format!("{:e}", self.clip[idx]));
                row.push(format!("{:e}", self.xd_mean[idx]));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        let side = Sidecar {
            dim: d,
            times: self.times.clone(),
            lattice: self.lattice.clone(),
            kernel: self.kernel.clone(),
            bandwidths: self.bandwidths.clone(),
            min_occupancy: self.min_occupancy,
            paths: self.paths,
        };
        std::fs::write(Self::sidecar_path(csv_path), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(csv_path: &Path) -> Result<Self> {
        let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(Self::sidecar_path(csv_path))?)?;
        let d = side.dim;
        let lattice = Lattice::new(side.lattice.nodes)?;
        let nn = lattice.len();
        let nt = side.times.len();
        let mut mc = Self {
            dim: d,
            times: side.times,
            lattice,
            kernel: side.kernel,
            bandwidths: side.bandwidths,
            min_occupancy: side.min_occupancy,
            paths: side.paths,
            occupancy: vec![f64::NAN; nt * nn],
            xd_mean: vec![0.0; nt * nn],
            b: vec![0.0; nt * nn * d],
            dmat: vec![0.0; nt * nn * d * d],
            a: Vec::new(),
            clip: Vec::new(),
        };
        let mut rdr = csv::Reader::from_path(csv_path)?;
        let bad = |what: &str| Error::Format(format!("coefficient file: {what}"));
        let mut seen = 0;
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 3 + 2 * d + d + d * d + 1 {
                return Err(bad("wrong column count"));
            }
            let num = |k: usize| -> Result<f64> { rec[k].trim().parse::<f64>().map_err(|_| bad("unparsable number")) };
            let ti: usize = rec[0].parse().map_err(|_| bad("t_index"))?;
            let multi: Vec<usize> =
                (0..d).map(|k| rec[1 + k].parse::<usize>().map_err(|_| bad("cell index"))).collect::<Result<_>>()?;
            if ti >= nt || multi.iter().zip(&mc.lattice.nodes).any(|(&i, a)| i >= a.len()) {
                return Err(bad("index out of range"));
            }
            let idx = ti * nn + mc.lattice.flat(&multi);
            let mut k = 1 + 2 * d;
            mc.occupancy[idx] = num(k)?;
            k += 1;
            for i in 0..d {
                mc.b[idx * d + i] = num(k + i)?;
            }
            k += d;
            for q in 0..d * d {
                mc.dmat[idx * d * d + q] = num(k + q)?;
            }
            k += d * d + 1;
            mc.xd_mean[idx] = num(k)?;
            seen += 1;
        }
        if seen != nt * nn || mc.occupancy.iter().any(|v| v.is_nan()) {
            return Err(bad("missing rows"));
        }
        mc.derive();
        Ok(mc)
    }
}

/// How [`build_mimicking_model`] treats masked nodes and clipping.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FillPolicy {
    /// Largest tolerated fraction of masked nodes.
    pub max_masked_fraction: f64,
    /// Largest tolerated eigenvalue-floor correction; `None` for no limit.
    pub clip_budget: Option<f64>,
}

impl Default for FillPolicy {
    fn default() -> Self {
        Self { max_masked_fraction: 0.9, clip_budget: None }
    }
}

/// Coefficient model interpolated multilinearly in `(t, x)` from lattice
/// values, clamped outside the lattice. `c ≡ 0`.
#[derive(Clone, Debug)]
pub struct GriddedModel {
    dim: usize,
    times: Vec<f64>,
    lattice: Lattice,
    /// `[time][node][d·d]`
    a: Vec<f64>,
    /// `[time][node][d]`
    b: Vec<f64>,
    /// Lattice distance (in index units) to the node a value was copied from.
    pub fill_distance: Vec<f64>,
    pub masked_fraction: f64,
    pub max_clip: f64,
}

/// Fill, check and wrap mimicked coefficients as a [`CoefficientModel`].
pub fn build_mimicking_model(mc: &MimickedCoefficients, policy: &FillPolicy) -> Result<GriddedModel> {
    let masked = mc.masked_fraction();
    if masked > policy.max_masked_fraction {
        return Err(Error::ExcessiveMasking { fraction: masked, cap: policy.max_masked_fraction });
    }
    let max_clip = mc.clip.iter().cloned().fold(0.0, f64::max);
    if let Some(budget) = policy.clip_budget {
        if max_clip > budget {
            return Err(Error::ClipBudgetExceeded { magnitude: max_clip, budget });
        }
    }
    let d = mc.dim;
    let dd = d * d;
    let nn = mc.lattice.len();
    let nt = mc.times.len();
    let defined: Vec<bool> = (0..nt * nn).map(|i| !mc.is_masked(i) && mc.a_at(i).is_some()).collect();
    if !defined.iter().any(|&v| v) {
        return Err(Error::ExcessiveMasking { fraction: 1.0, cap: policy.max_masked_fraction });
    }
    let multis: Vec<Vec<usize>> = (0..nn).map(|i| mc.lattice.multi(i)).collect();
    let mut a = vec![0.0; nt * nn * dd];
    let mut b = vec![0.0; nt * nn * d];
    let mut fill = vec![0.0; nt * nn];
    for ti in 0..nt {
        // nearest layer in time that has any defined node
        let src_t = (0..nt)
            .filter(|&s| (0..nn).any(|i| defined[s * nn + i]))
            .min_by_key(|&s| (s as i64 - ti as i64).abs())
            .unwrap();
        let defined_here: Vec<usize> = (0..nn).filter(|&i| defined[src_t * nn + i]).collect();
        for i in 0..nn {
            let (src, dist) = if src_t == ti && defined[ti * nn + i] {
                (i, 0.0)
            } else {
                defined_here
                    .iter()
                    .map(|&j| {
                        let dist2: f64 =
                            multis[i].iter().zip(&multis[j]).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum();
                        (j, dist2)
                    })
                    .min_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)))
                    .map(|(j, d2)| (j, d2.sqrt() + (src_t as f64 - ti as f64).abs()))
                    .unwrap()
            };
            let (dst, from) = (ti * nn + i, src_t * nn + src);
            a[dst * dd..(dst + 1) * dd].copy_from_slice(&mc.a[from * dd..(from + 1) * dd]);
            b[dst * d..(dst + 1) * d].copy_from_slice(&mc.b[from * d..(from + 1) * d]);
            fill[dst] = dist;
        }
    }
    Ok(GriddedModel {
        dim: d,
        times: mc.times.clone(),
        lattice: mc.lattice.clone(),
        a,
        b,
        fill_distance: fill,
        masked_fraction: masked,
        max_clip,
    })
}

impl GriddedModel {
    /// Weighted `(time layer, node)` pairs for interpolation at `(t, x)`.
    fn weights(&self, t: f64, x: &[f64], out: &mut Vec<(usize, f64)>) {
        let nn = self.lattice.len();
        let (t0, ft) = if self.times.len() == 1 { (0, 0.0) } else { Lattice::locate(&self.times, t) };
        let mut corners = Vec::with_capacity(1 << self.dim);
        self.lattice.corners(x, &mut corners);
        out.clear();
        for &(node, w) in &corners {
            out.push((t0 * nn + node, w * (1.0 - ft)));
            if ft > 0.0 {
                out.push(((t0 + 1) * nn + node, w * ft));
            }
        }
    }

    fn interp_a(&self, t: f64, x: &[f64], out: &mut Matrix) {
        let dd = self.dim * self.dim;
        let mut w = Vec::with_capacity(2 << self.dim);
        self.weights(t, x, &mut w);
        out.fill(0.0);
        for &(idx, wt) in &w {
            for (o, v) in out.as_mut_slice().iter_mut().zip(&self.a[idx * dd..(idx + 1) * dd]) {
                *o += wt * v;
            }
        }
    }

    /// `a` at a lattice node of a time layer, after filling.
    pub fn node_a(&self, t_index: usize, node: usize) -> Matrix {
        let dd = self.dim * self.dim;
        let idx = t_index * self.lattice.len() + node;
        Matrix::from_fn(self.dim, |i, j| self.a[idx * dd + i * self.dim + j])
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }
}

impl CoefficientModel<f64> for GriddedModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn diffusion(&self, t: f64, x: &[f64], out: &mut Matrix) {
        self.interp_a(t, x, out)
    }

    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let mut w = Vec::with_capacity(2 << d);
        self.weights(t, x, &mut w);
        out.fill(0.0);
        for &(idx, wt) in &w {
            for (o, v) in out.iter_mut().zip(&self.b[idx * d..(idx + 1) * d]) {
                *o += wt * v;
            }
        }
    }

    fn volatility_factor(&self, t: f64, x: &[f64], out: &mut Matrix) {
        let mut a = Matrix::zeros(self.dim);
        self.interp_a(t, x, &mut a);
        if cholesky_into(&a, out).is_err() {
            factor_or_psd_root(&a, out);
        }
    }

    fn provenance(&self) -> Provenance {
        Provenance::Gridded
    }

    fn time_homogeneous(&self) -> bool {
        self.times.len() == 1
    }
}

/// A named scalar functional of the state.
#[derive(Clone)]
pub struct NamedFunctional {
    pub name: String,
    pub f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
}

impl NamedFunctional {
    pub fn new(name: impl Into<String>, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self { name: name.into(), f: Arc::new(f) }
    }
}

impl std::fmt::Debug for NamedFunctional {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name)
    }
}

/// States at selected times, `values[time]` flattened `[path][d]`. Built from
/// whole ensembles or block by block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MarginalSample {
    pub times: Vec<f64>,
    pub dim: usize,
    pub values: Vec<Vec<f64>>,
}

impl MarginalSample {
    pub fn new(times: Vec<f64>, dim: usize) -> Self {
        let values = vec![Vec::new(); times.len()];
        Self { times, dim, values }
    }

    pub fn from_ensemble(ens: &PathEnsemble<f64>, times: &[f64]) -> Result<Self> {
        let mut s = Self::new(times.to_vec(), ens.dim);
        s.append(ens)?;
        Ok(s)
    }

    pub fn append(&mut self, ens: &PathEnsemble<f64>) -> Result<()> {
        if ens.dim != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: ens.dim });
        }
        for (ti, &t) in self.times.iter().enumerate() {
            let k = ens.grid.index_of(t).ok_or(Error::TimeNotOnGrid(t))?;
            for p in 0..ens.n_paths() {
                self.values[ti].extend_from_slice(ens.state(p, k));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.first().map_or(0, |v| v.len() / self.dim.max(1))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn coordinate(&self, ti: usize, k: usize) -> Vec<f64> {
        self.values[ti].iter().skip(k).step_by(self.dim).copied().collect()
    }

    fn points(&self, ti: usize) -> Vec<Vec<f64>> {
        self.values[ti].chunks(self.dim).map(<[f64]>::to_vec).collect()
    }
}

/// Thresholds and options of [`compare_marginals`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComparisonConfig {
    pub ks_threshold: f64,
    /// Test-function gaps must be within `gap_z` pooled standard errors.
    pub gap_z: f64,
    pub directions: usize,
    pub seed: u64,
    /// Permutation resamples for the reported same-law KS quantile.
    #[serde(default)]
    pub null_resamples: usize,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        Self { ks_threshold: 0.02, gap_z: 3.0, directions: 16, seed: 0, null_resamples: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapStatistic {
    pub t: f64,
    pub functional: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub gap: f64,
    pub pooled_se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalComparison {
    pub times: Vec<f64>,
    pub n_a: usize,
    pub n_b: usize,
    /// `[time][coordinate]`
    pub ks: Vec<Vec<f64>>,
    pub ks_null_95: Option<Vec<Vec<f64>>>,
    pub sliced_w1: Vec<f64>,
    pub gaps: Vec<GapStatistic>,
    pub max_ks: f64,
    pub ks_threshold: f64,
    pub gap_z: f64,
    pub passed: bool,
}

/// Per-time, per-coordinate KS, sliced W1 and test-function gaps.
pub fn compare_samples(
    a: &MarginalSample,
    b: &MarginalSample,
    g: &[NamedFunctional],
    cfg: &ComparisonConfig,
) -> Result<MarginalComparison> {
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch { expected: a.dim, got: b.dim });
    }
    if a.times.len() != b.times.len() || a.times.iter().zip(&b.times).any(|(x, y)| (x - y).abs() > 1e-12) {
        return Err(Error::TimeNotOnGrid(a.times.first().copied().unwrap_or(f64::NAN)));
    }
    let d = a.dim;
    let dirs = unit_directions(d, cfg.directions, cfg.seed);
    let mut ks = Vec::new();
    let mut null = Vec::new();
    let mut sw = Vec::new();
    let mut gaps = Vec::new();
    for (ti, &t) in a.times.iter().enumerate() {
        let per: Vec<(f64, Option<f64>)> = (0..d)
            .into_par_iter()
            .map(|k| {
                let (xa, xb) = (a.coordinate(ti, k), b.coordinate(ti, k));
                let q = (cfg.null_resamples > 0)
                    .then(|| ks_permutation_quantile(&xa, &xb, cfg.null_resamples, 0.95, cfg.seed + (ti * d + k) as u64));
                (ks_two_sample(&xa, &xb), q)
            })
            .collect();
        ks.push(per.iter().map(|p| p.0).collect::<Vec<_>>());
        null.push(per.iter().filter_map(|p| p.1).collect::<Vec<_>>());
        sw.push(sliced_wasserstein1(&a.points(ti), &b.points(ti), &dirs));
        for gf in g {
            let ga: Vec<f64> = a.values[ti].chunks(d).map(|x| (gf.f)(x)).collect();
            let gb: Vec<f64> = b.values[ti].chunks(d).map(|x| (gf.f)(x)).collect();
            let (ea, eb) = (MeanEstimate::from_samples(&ga), MeanEstimate::from_samples(&gb));
            gaps.push(GapStatistic {
                t,
                functional: gf.name.clone(),
                mean_a: ea.mean,
                mean_b: eb.mean,
                gap: (ea.mean - eb.mean).abs(),
                pooled_se: (ea.se.powi(2) + eb.se.powi(2)).sqrt(),
            });
        }
    }
    let max_ks = ks.iter().flatten().copied().fold(0.0, f64::max);
    let gaps_ok = gaps.iter().all(|g| g.gap <= cfg.gap_z * g.pooled_se || g.gap == 0.0);
    Ok(MarginalComparison {
        times: a.times.clone(),
        n_a: a.len(),
        n_b: b.len(),
        ks,
        ks_null_95: (cfg.null_resamples > 0).then_some(null),
        sliced_w1: sw,
        gaps,
        max_ks,
        ks_threshold: cfg.ks_threshold,
        gap_z: cfg.gap_z,
        passed: max_ks <= cfg.ks_threshold && gaps_ok,
    })
}

/// [`compare_samples`] on two whole ensembles.
pub fn compare_marginals(
    a: &PathEnsemble<f64>,
    b: &PathEnsemble<f64>,
    times: &[f64],
    g: &[NamedFunctional],
    cfg: &ComparisonConfig,
) -> Result<MarginalComparison> {
    compare_samples(&MarginalSample::from_ensemble(a, times)?, &MarginalSample::from_ensemble(b, times)?, g, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::HestonModel;
    use crate::linalg::min_eigenvalue;
    use crate::sdesim::{simulate_ito_process, ModelDriver, RegimeSwitchingDriver, Scheme, SimConfig};

    fn heston_lattice() -> Lattice {
        Lattice::refined(&[-1.0, 0.0], &[1.0, 0.3], &[21, 16], 1.0).unwrap()
    }

    fn replay(n: usize, seed: u64) -> PathEnsemble<f64> {
        let drv = ModelDriver(HestonModel::reference(false));
        let g = TimeGrid::with_steps(0.0, 1.0, 64).unwrap();
        simulate_ito_process(&drv, &[0.0, 0.09], &g, &SimConfig::new(n, seed, Scheme::FullTruncation), true).unwrap()
    }

    #[test]
    fn lattice_indexing_round_trips() {
        let l = heston_lattice();
        for i in [0, 5, 77, l.len() - 1] {
            assert_eq!(l.flat(&l.multi(i)), i);
        }
        assert!(Lattice::new(vec![vec![0.0, 1.0], vec![0.1, 0.2]]).is_err());
        assert!(Lattice::new(vec![vec![0.0, 0.0]]).is_err());
        let mut c = Vec::new();
        l.corners(&[0.05, 0.01], &mut c);
        assert!((c.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn missing_driver_records_is_an_error() {
        let drv = ModelDriver(HestonModel::reference(false));
        let g = TimeGrid::with_steps(0.0, 1.0, 8).unwrap();
        let ens = simulate_ito_process(&drv, &[0.0, 0.09], &g, &SimConfig::new(4, 1, Scheme::FullTruncation), false)
            .unwrap();
        let spec = BinningSpec { times: vec![0.5], lattice: heston_lattice(), kernel: Kernel::default(), min_occupancy: 1.0 };
        assert!(matches!(estimate_mimicking_coefficients(&ens, &spec), Err(Error::MissingDriverRecords)));
    }

    #[test]
    fn box_kernel_tower_property() {
        let ens = replay(400, 3);
        let spec = BinningSpec {
            times: vec![0.25, 0.5, 0.75, 1.0],
            lattice: heston_lattice(),
            kernel: Kernel::Box { half_widths: vec![0.0, 0.0] },
            min_occupancy: 0.0,
        };
        let mc = estimate_mimicking_coefficients(&ens, &spec).unwrap();
        let nn = mc.n_nodes();
        let g = ens.grid;
        for (ti, _) in spec.times.iter().enumerate() {
            let (mut num, mut cnt) = (0.0, 0.0);
            for i in 0..nn {
                let idx = ti * nn + i;
                if mc.occupancy[idx] > 0.0 {
                    num += mc.occupancy[idx] * mc.b_at(idx)[1];
                    cnt += mc.occupancy[idx];
                }
            }
            let (mut direct, mut m) = (0.0, 0.0);
            for p in 0..ens.n_paths() {
                for k in 0..g.n_steps() {
                    if spec.time_node(g.node(k)) == ti {
                        direct += ens.beta(p, k).unwrap()[1];
                        m += 1.0;
                    }
                }
            }
            assert_eq!(cnt, m);
            assert!((num / cnt - direct / m).abs() <= 1e-12 * (direct / m).abs().max(1.0));
        }
    }

    #[test]
    fn empty_cells_are_masked() {
        let ens = replay(50, 4);
        let spec = BinningSpec {
            times: vec![0.5],
            lattice: Lattice::new(vec![vec![-1.0, 0.0, 1.0, 9.0, 10.0], vec![0.0, 0.1, 0.2, 0.3]]).unwrap(),
            kernel: Kernel::Box { half_widths: vec![0.0, 0.0] },
            min_occupancy: 1.0,
        };
        let mc = estimate_mimicking_coefficients(&ens, &spec).unwrap();
        let far = mc.lattice.flat(&[4, 1]);
        assert_eq!(mc.occupancy[far], 0.0);
        assert!(mc.is_masked(far));
        assert!(mc.a_at(far).is_none());
    }

    #[test]
    fn markov_driver_recovers_affine_coefficients() {
        let ens = replay(3000, 5);
        let spec = BinningSpec {
            times: vec![0.25, 0.5, 1.0],
            lattice: heston_lattice(),
            kernel: Kernel::default(),
            min_occupancy: 2000.0,
        };
        let mc = estimate_mimicking_coefficients(&ens, &spec).unwrap();
        let m = HestonModel::reference(false);
        let nn = mc.n_nodes();
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for ti in 0..3 {
            for i in 0..nn {
                let idx = ti * nn + i;
                let x = mc.lattice.point(i);
                if mc.is_masked(idx) || x[1] == 0.0 {
                    continue;
                }
                let mut b = [0.0; 2];
                m.drift(0.0, &x, &mut b);
                let eb = (mc.b_at(idx)[1] - b[1]).abs() / b[1].abs().max(0.05);
                let a = mc.a_at(idx).unwrap();
                let ea = (a[(0, 1)] + 0.15).abs() / 0.15;
                worst = worst.max(eb).max(ea);
                checked += 1;
            }
        }
        assert!(checked > 10);
        assert!(worst < 0.05, "{worst}");
    }

    #[test]
    fn identity_field_gives_identity_diffusion() {
        let lat = Lattice::refined(&[-1.0, 0.0], &[1.0, 1.0], &[5, 5], 1.0).unwrap();
        let mc = MimickedCoefficients::from_fields(vec![0.0, 1.0], lat, |_, x| {
            (vec![0.0, 1.0], Matrix::identity(2).scale(x[1]))
        })
        .unwrap();
        let model = build_mimicking_model(&mc, &FillPolicy::default()).unwrap();
        let mut a = Matrix::zeros(2);
        let mut s = Matrix::zeros(2);
        for x in [[0.3, 0.0], [-0.7, 0.45], [0.9, 1.0]] {
            model.diffusion(0.4, &x, &mut a);
            model.volatility_factor(0.4, &x, &mut s);
            assert!(a.max_abs_diff(&Matrix::identity(2)) < 1e-12);
            assert!(s.max_abs_diff(&Matrix::identity(2)) < 1e-12);
        }
        assert_eq!(model.provenance(), Provenance::Gridded);
    }

    #[test]
    fn negative_eigenvalue_is_clipped_and_recorded() {
        let lat = Lattice::refined(&[-1.0, 0.0], &[1.0, 1.0], &[3, 3], 1.0).unwrap();
        let mc = MimickedCoefficients::from_fields(vec![0.0], lat, |_, x| {
            (vec![0.0, 1.0], Matrix::from_rows(&[&[1.0, 0.0], &[0.0, -1e-3]]).scale(x[1]))
        })
        .unwrap();
        let idx = mc.lattice.flat(&[1, 2]);
        assert!((mc.clip[idx] - (1e-3 + 1e-6 * (1.0 - 1e-3) / 2.0)).abs() < 1e-12);
        assert!(min_eigenvalue(&mc.a_at(idx).unwrap()) > 0.0);
        let strict = FillPolicy { clip_budget: Some(1e-4), ..FillPolicy::default() };
        assert!(matches!(build_mimicking_model(&mc, &strict), Err(Error::ClipBudgetExceeded { .. })));
    }

    #[test]
    fn excessive_masking_is_rejected_and_fill_is_recorded() {
        let ens = replay(30, 6);
        let spec = BinningSpec {
            times: vec![0.5],
            lattice: Lattice::refined(&[-20.0, 0.0], &[20.0, 20.0], &[11, 11], 3.0).unwrap(),
            kernel: Kernel::Box { half_widths: vec![0.0, 0.0] },
            min_occupancy: 1.0,
        };
        let mc = estimate_mimicking_coefficients(&ens, &spec).unwrap();
        assert!(matches!(build_mimicking_model(&mc, &FillPolicy::default()), Err(Error::ExcessiveMasking { .. })));
        let lax = FillPolicy { max_masked_fraction: 1.0, clip_budget: None };
        let model = build_mimicking_model(&mc, &lax).unwrap();
        assert!(model.fill_distance.iter().any(|&d| d > 0.0));
        let unmasked: Vec<usize> = (0..mc.n_nodes()).filter(|&i| !mc.is_masked(i) && mc.a_at(i).is_some()).collect();
        for &i in &unmasked {
            assert_eq!(model.fill_distance[i], 0.0);
            assert_eq!(model.node_a(0, i), mc.a_at(i).unwrap());
        }
    }

    #[test]
    fn save_load_round_trip() {
        let ens = replay(200, 7);
        let spec = BinningSpec { times: vec![0.5, 1.0], lattice: heston_lattice(), kernel: Kernel::default(), min_occupancy: 10.0 };
        let mc = estimate_mimicking_coefficients(&ens, &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("coeffs.csv");
        mc.save(&path).unwrap();
        let back = MimickedCoefficients::load(&path).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.occupancy), bits(&mc.occupancy));
        assert_eq!(bits(&back.b), bits(&mc.b));
        assert_eq!(bits(&back.dmat), bits(&mc.dmat));
        assert_eq!(bits(&back.a), bits(&mc.a));
        assert_eq!(back.times, mc.times);
        let header = std::fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
        assert_eq!(header, "t_index,i_1,i_2,x_1,x_2,occupancy,b_1,b_2,D_11,D_12,D_21,D_22,clip,xd_mean");
    }

    #[test]
    fn regime_mixture_lies_between_regimes() {
        let drv = RegimeSwitchingDriver::new(HestonModel::reference(false), [1.0, 1.5], [2.0, 2.0], 0);
        let g = TimeGrid::with_steps(0.0, 1.0, 64).unwrap();
        let ens = simulate_ito_process(&drv, &[0.0, 0.09], &g, &SimConfig::new(2000, 8, Scheme::FullTruncation), true)
            .unwrap();
        let spec = BinningSpec {
            times: vec![0.5, 1.0],
            lattice: heston_lattice(),
            kernel: Kernel::Box { half_widths: vec![0.05, 0.01] },
            min_occupancy: 200.0,
        };
        let mc = estimate_mimicking_coefficients(&ens, &spec).unwrap();
        let a1 = HestonModel::reference(false).a_matrix().clone();
        let mut checked = 0;
        for idx in 0..mc.occupancy.len() {
            if mc.is_masked(idx) || mc.lattice.point(idx % mc.n_nodes())[1] == 0.0 {
                continue;
            }
            let a = mc.a_at(idx).unwrap();
            let lower = Matrix::from_fn(2, |i, j| a[(i, j)] - a1[(i, j)]);
            let upper = Matrix::from_fn(2, |i, j| 2.25 * a1[(i, j)] - a[(i, j)]);
            assert!(min_eigenvalue(&lower) > -1e-9, "{idx}");
            assert!(min_eigenvalue(&upper) > -1e-9, "{idx}");
            checked += 1;
        }
        assert!(checked > 5);
    }

    #[test]
    fn identical_ensembles_compare_to_zero() {
        let ens = replay(300, 9);
        let g = [NamedFunctional::new("x2", |x| x[1])];
        let rep = compare_marginals(&ens, &ens, &[0.25, 1.0], &g, &ComparisonConfig::default()).unwrap();
        assert_eq!(rep.max_ks, 0.0);
        assert!(rep.sliced_w1.iter().all(|&w| w == 0.0));
        assert!(rep.gaps.iter().all(|g| g.gap == 0.0));
        assert!(rep.passed);
        assert!(matches!(
            compare_marginals(&ens, &ens, &[0.3], &g, &ComparisonConfig::default()),
            Err(Error::TimeNotOnGrid(_))
        ));
    }
}
