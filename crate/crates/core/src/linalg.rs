//! Small dense symmetric-matrix utilities: Cholesky square roots, Jacobi
//! eigen-decomposition and eigenvalue flooring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Square `n × n` matrix, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmallMatrix<T> {
    n: usize,
    data: Vec<T>,
}

impl<T: Scalar> SmallMatrix<T> {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![T::zero(); n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[&[T]]) -> Self {
        let n = rows.len();
        let mut m = Self::zeros(n);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), n, "row {i} has wrong length");
            m.data[i * n..(i + 1) * n].copy_from_slice(r);
        }
        m
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> T) -> Self {
        Self { n, data: (0..n * n).map(|k| f(k / n, k % n)).collect() }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|e| *e = v);
    }

    pub fn trace(&self) -> T {
        (0..self.n).map(|i| self[(i, i)]).sum()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.n, |i, j| self[(j, i)])
    }

    pub fn scale(&self, s: T) -> Self {
        Self { n: self.n, data: self.data.iter().map(|&v| v * s).collect() }
    }

    pub fn mul(&self, other: &Self) -> Self {
        let n = self.n;
        Self::from_fn(n, |i, j| (0..n).map(|k| self[(i, k)] * other[(k, j)]).sum())
    }

    /// `self · selfᵀ`.
    pub fn gram(&self) -> Self {
        let n = self.n;
        Self::from_fn(n, |i, j| (0..n).map(|k| self[(i, k)] * self[(j, k)]).sum())
    }

    pub fn mul_vec(&self, v: &[T], out: &mut [T]) {
        for i in 0..self.n {
            out[i] = (0..self.n).map(|k| self[(i, k)] * v[k]).sum();
        }
    }

    /// Frobenius pairing `Σ_ij A_ij B_ij`.
    pub fn frobenius(&self, other: &Self) -> T {
        self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data.iter().zip(&other.data).map(|(&a, &b)| (a - b).abs()).fold(T::zero(), T::max)
    }

    pub fn max_asymmetry(&self) -> T {
        let mut m = T::zero();
        for i in 0..self.n {
            for j in 0..i {
                m = m.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        m
    }

    /// Symmetric up to `tol · max(1, max|A_ij|)`.
    pub fn is_symmetric(&self, tol: T) -> bool {
        let scale = self.data.iter().fold(T::one(), |m, v| m.max(v.abs()));
        self.max_asymmetry() <= tol * scale
    }

    pub fn symmetrize(&mut self) {
        for i in 0..self.n {
            for j in 0..i {
                let v = (self[(i, j)] + self[(j, i)]) * T::half();
                self[(i, j)] = v;
                self[(j, i)] = v;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<T> std::ops::Index<(usize, usize)> for SmallMatrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.n + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for SmallMatrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.n + j]
    }
}

/// Lower-triangular `ς` with `ς ςᵀ = A`.
///
/// Rejects non-symmetric input and any pivot below `10⁻¹⁰ · trace(A)/d`.
pub fn sqrt_factorize<T: Scalar>(a: &SmallMatrix<T>) -> Result<SmallMatrix<T>> {
    let n = a.dim();
    let sym_tol = T::lit(1e-12).max(T::epsilon() * T::lit(16.0));
    if !a.is_symmetric(sym_tol) {
        return Err(Error::NotSymmetric(a.max_asymmetry().as_f64()));
    }
    let mut l = SmallMatrix::zeros(n);
    cholesky_into(a, &mut l)?;
    Ok(l)
}

/// Cholesky into a preallocated output, without the symmetry check.
pub fn cholesky_into<T: Scalar>(a: &SmallMatrix<T>, l: &mut SmallMatrix<T>) -> Result<()> {
    let n = a.dim();
    let floor = T::lit(1e-10) * (a.trace() / T::lit(n as f64)).abs();
    l.fill(T::zero());
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > floor) || diag <= T::zero() {
            return Err(Error::NotPositiveDefinite { row: j, pivot: diag.as_f64() });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(())
}

/// Eigenvalues (ascending) and eigenvectors (columns) of a symmetric matrix by
/// cyclic Jacobi rotations.
pub fn symmetric_eigen<T: Scalar>(a: &SmallMatrix<T>) -> (Vec<T>, SmallMatrix<T>) {
    let n = a.dim();
    let mut m = a.clone();
    m.symmetrize();
    let mut v = SmallMatrix::identity(n);
    let tol = T::epsilon() * T::lit(4.0);
    for _sweep in 0..64 {
        let off: T = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|ij| m[ij] * m[ij]).sum();
        let scale: T = m.as_slice().iter().map(|&x| x * x).sum();
        if off <= tol * tol * scale || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].partial_cmp(&m[(j, j)]).unwrap_or(std::cmp::Ordering::Equal));
    let vals = order.iter().map(|&i| m[(i, i)]).collect();
    let vecs = SmallMatrix::from_fn(n, |r, c| v[(r, order[c])]);
    (vals, vecs)
}

/// Smallest eigenvalue of a symmetric matrix (minimum Rayleigh quotient).
pub fn min_eigenvalue<T: Scalar>(a: &SmallMatrix<T>) -> T {
    if a.dim() == 1 {
        return a[(0, 0)];
    }
    if a.dim() == 2 {
        let (p, q, r) = (a[(0, 0)], a[(0, 1)], a[(1, 1)]);
        let mean = (p + r) * T::half();
        let diff = (p - r) * T::half();
        return mean - (diff * diff + q * q).sqrt();
    }
    symmetric_eigen(a).0[0]
}

/// Floor the eigenvalues of a symmetric matrix at `floor`. Returns the clipped
/// matrix and the clip magnitude `max_k (floor − λ_k)⁺`.
pub fn psd_clip<T: Scalar>(a: &SmallMatrix<T>, floor: T) -> (SmallMatrix<T>, T) {
    let (vals, vecs) = symmetric_eigen(a);
    let mut magnitude = T::zero();
    let clipped: Vec<T> = vals
        .iter()
        .map(|&l| {
            if l < floor {
                magnitude = magnitude.max(floor - l);
                floor
            } else {
                l
            }
        })
        .collect();
    if magnitude == T::zero() {
        let mut out = a.clone();
        out.symmetrize();
        return (out, magnitude);
    }
    let n = a.dim();
    let out = SmallMatrix::from_fn(n, |i, j| (0..n).map(|k| vecs[(i, k)] * clipped[k] * vecs[(j, k)]).sum());
    (out, magnitude)
}
