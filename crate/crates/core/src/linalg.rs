//! Dense vectors and linear maps on `R^d`, and the shifted solve `(J + aI) z = w`.
//!
//! Every Newton-type step in this crate reduces to a shifted solve with a
//! Jacobian whose symmetric part is positive semidefinite. Such a system is
//! invertible for every `a > 0` with `||(J + aI)^{-1}|| <= 1/a`, but it is not
//! symmetric in general, so the factorizations here never assume symmetry.
//!
//! Two solvers are provided:
//!
//! * [`reg_solve`] factors `J + aI` from scratch with partial pivoting.
//! * [`ShiftedSystem`] reduces `J` once to upper Hessenberg form and then
//!   solves for any shift in `O(d^2)`, which pays off when `J` is constant
//!   (affine operators) and only the shift changes between solves.
//!
//! Both refine their answer against a compensated residual until
//! `||(J + aI) z - w|| <= tol * ||w||`.

use std::ops::{Add, Index, Mul, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default relative residual tolerance for shifted solves.
pub const DEFAULT_SOLVE_TOL: f64 = 1e-12;

const MAX_REFINEMENT_STEPS: usize = 6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("vector must have at least one coordinate")]
    Empty,
    #[error("non-finite coordinate {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("shift must be positive and finite, got {0}")]
    InvalidShift(f64),
    #[error(
        "shifted matrix is numerically singular: smallest pivot {smallest_pivot:e} at step {index} \
         (operator may not be monotone, or the shift is below rounding level)"
    )]
    Breakdown { smallest_pivot: f64, index: usize },
    #[error("refinement stalled at relative residual {achieved:e} (tolerance {tol:e})")]
    ResidualTolerance { achieved: f64, tol: f64 },
}

/// An element of `R^d` with finite coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector {
    coords: Vec<f64>,
}

impl Vector {
    /// Builds a vector, rejecting empty input and NaN/Inf entries.
    pub fn new(coords: Vec<f64>) -> Result<Self, LinalgError> {
        if coords.is_empty() {
            return Err(LinalgError::Empty);
        }
        if let Some((index, &value)) = coords.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(LinalgError::NonFinite { index, value });
        }
        Ok(Self { coords })
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "vector dimension must be positive");
        Self {
            coords: vec![0.0; dim],
        }
    }

    pub fn from_fn(dim: usize, f: impl FnMut(usize) -> f64) -> Self {
        assert!(dim > 0, "vector dimension must be positive");
        Self {
            coords: (0..dim).map(f).collect(),
        }
    }

    /// Wraps coordinates produced by arithmetic on finite vectors.
    pub(crate) fn from_raw(coords: Vec<f64>) -> Self {
        debug_assert!(!coords.is_empty());
        Self { coords }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.coords
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().all(|v| v.is_finite())
    }

    pub fn norm_squared(&self) -> f64 {
        self.coords.iter().map(|v| v * v).sum()
    }

    /// Euclidean norm, scaled to avoid overflow/underflow of the squares.
    pub fn norm(&self) -> f64 {
        let scale = self.coords.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if scale == 0.0 || !scale.is_finite() {
            return scale;
        }
        let sum: f64 = self
            .coords
            .iter()
            .map(|v| {
                let s = v / scale;
                s * s
            })
            .sum();
        scale * sum.sqrt()
    }

    pub fn distance(&self, other: &Vector) -> f64 {
        (self - other).norm()
    }

    pub fn scaled(&self, factor: f64) -> Vector {
        Vector::from_raw(self.coords.iter().map(|v| v * factor).collect())
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &Vector) {
        assert_eq!(self.dim(), x.dim(), "axpy dimension mismatch");
        for (s, v) in self.coords.iter_mut().zip(&x.coords) {
            *s += alpha * v;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.coords.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = LinalgError;

    fn try_from(coords: Vec<f64>) -> Result<Self, Self::Error> {
        Vector::new(coords)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.coords
    }
}

impl Index<usize> for Vector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.coords[i]
    }
}

impl Add for &Vector {
    type Output = Vector;

    fn add(self, rhs: &Vector) -> Vector {
        assert_eq!(self.dim(), rhs.dim(), "vector add dimension mismatch");
        Vector::from_raw(self.coords.iter().zip(&rhs.coords).map(|(a, b)| a + b).collect())
    }
}

impl Sub for &Vector {
    type Output = Vector;

    fn sub(self, rhs: &Vector) -> Vector {
        assert_eq!(self.dim(), rhs.dim(), "vector sub dimension mismatch");
        Vector::from_raw(self.coords.iter().zip(&rhs.coords).map(|(a, b)| a - b).collect())
    }
}

impl Mul<&Vector> for f64 {
    type Output = Vector;

    fn mul(self, rhs: &Vector) -> Vector {
        rhs.scaled(self)
    }
}

const LANES: usize = 4;

/// Dot product with independent partial sums so the loop vectorizes.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; LANES];
    let mut ac = a.chunks_exact(LANES);
    let mut bc = b.chunks_exact(LANES);
    for (x, y) in (&mut ac).zip(&mut bc) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Euclidean inner product.
pub fn inner(u: &Vector, v: &Vector) -> Result<f64, LinalgError> {
    if u.dim() != v.dim() {
        return Err(LinalgError::DimensionMismatch {
            expected: u.dim(),
            found: v.dim(),
        });
    }
    Ok(dot(&u.coords, &v.coords))
}

/// A dense `d x d` real matrix, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    dim: usize,
    data: Vec<f64>,
}

impl LinearMap {
    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "linear map dimension must be positive");
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(dim > 0, "linear map dimension must be positive");
        let mut data = Vec::with_capacity(dim * dim);
        for i in 0..dim {
            for j in 0..dim {
                data.push(f(i, j));
            }
        }
        Self { dim, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let dim = rows.len();
        if dim == 0 {
            return Err(LinalgError::Empty);
        }
        let mut data = Vec::with_capacity(dim * dim);
        for row in rows {
            if row.len() != dim {
                return Err(LinalgError::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(LinalgError::NonFinite { index, value });
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.dim + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Adds `value` to every diagonal entry.
    pub fn add_diagonal(&mut self, value: f64) {
        for i in 0..self.dim {
            self.data[i * self.dim + i] += value;
        }
    }

    pub fn add_to_diagonal(&mut self, diag: &[f64]) {
        assert_eq!(diag.len(), self.dim);
        for (i, d) in diag.iter().enumerate() {
            self.data[i * self.dim + i] += d;
        }
    }

    pub fn transpose(&self) -> LinearMap {
        LinearMap::from_fn(self.dim, |i, j| self.get(j, i))
    }

    pub fn apply(&self, v: &Vector) -> Vector {
        assert_eq!(self.dim, v.dim(), "linear map dimension mismatch");
        let x = v.as_slice();
        Vector::from_raw(
            self.data
                .chunks_exact(self.dim)
                .map(|row| dot(row, x))
                .collect(),
        )
    }

    pub fn apply_transpose(&self, v: &Vector) -> Vector {
        assert_eq!(self.dim, v.dim(), "linear map dimension mismatch");
        let mut out = vec![0.0; self.dim];
        for (row, &vi) in self.data.chunks_exact(self.dim).zip(v.as_slice()) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * vi;
            }
        }
        Vector::from_raw(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        self.data
            .chunks_exact(self.dim)
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Spectral norm estimate by power iteration on `J^T J`.
    ///
    /// Returns the estimate together with the approximate top right singular
    /// vector. The estimate never exceeds the true norm (up to rounding).
    pub fn spectral_norm(&self, max_iter: usize) -> (f64, Vector) {
        let d = self.dim;
        let mut v = Vector::from_fn(d, |i| 1.0 + 0.5 * ((i as f64) * 0.618_033_988_75).fract());
        let n0 = v.norm();
        v = v.scaled(1.0 / n0);
        let mut sigma = 0.0;
        for _ in 0..max_iter {
            let jv = self.apply(&v);
            let next_sigma = jv.norm();
            let w = self.apply_transpose(&jv);
            let wn = w.norm();
            if wn == 0.0 {
                return (next_sigma, v);
            }
            v = w.scaled(1.0 / wn);
            let converged = (next_sigma - sigma).abs() <= 1e-13 * next_sigma.max(f64::MIN_POSITIVE);
            sigma = next_sigma;
            if converged {
                break;
            }
        }
        (self.apply(&v).norm().max(sigma), v)
    }

    /// `<v, J v>`, which only sees the symmetric part of `J`.
    pub fn quadratic_form(&self, v: &Vector) -> f64 {
        inner(v, &self.apply(v)).expect("dimension checked by apply")
    }
}

/// Solves `(j + aI) z = w` by LU with partial pivoting plus refinement.
pub fn reg_solve(j: &LinearMap, a: f64, w: &Vector) -> Result<Vector, LinalgError> {
    reg_solve_with_tol(j, a, w, DEFAULT_SOLVE_TOL)
}

pub fn reg_solve_with_tol(
    j: &LinearMap,
    a: f64,
    w: &Vector,
    tol: f64,
) -> Result<Vector, LinalgError> {
    check_shift_inputs(j.dim(), a, w)?;
    let mut shifted = j.clone();
    shifted.add_diagonal(a);
    let lu = LuFactors::factor(shifted)?;
    refine(j, a, w, tol, |rhs| lu.solve(rhs))
}

fn check_shift_inputs(dim: usize, a: f64, w: &Vector) -> Result<(), LinalgError> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(LinalgError::InvalidShift(a));
    }
    if dim != w.dim() {
        return Err(LinalgError::DimensionMismatch {
            expected: dim,
            found: w.dim(),
        });
    }
    Ok(())
}

/// Iterative refinement against the compensated residual `w - (J + aI) z`.
fn refine(
    j: &LinearMap,
    a: f64,
    w: &Vector,
    tol: f64,
    solve: impl Fn(&[f64]) -> Vec<f64>,
) -> Result<Vector, LinalgError> {
    let w_norm = w.norm();
    if w_norm == 0.0 {
        return Ok(Vector::zeros(w.dim()));
    }
    let mut z = solve(w.as_slice());
    let mut best = f64::INFINITY;
    for _ in 0..=MAX_REFINEMENT_STEPS {
        let r = shifted_residual(j, a, &z, w.as_slice());
        let rel = norm_slice(&r) / w_norm;
        if !rel.is_finite() {
            break;
        }
        if rel <= tol {
            return Ok(Vector::from_raw(z));
        }
        // Refinement no longer helps once the residual stops shrinking.
        if rel >= 0.5 * best {
            return Err(LinalgError::ResidualTolerance { achieved: rel, tol });
        }
        best = rel;
        let dz = solve(&r);
        for (zi, di) in z.iter_mut().zip(&dz) {
            *zi += di;
        }
    }
    let rel = norm_slice(&shifted_residual(j, a, &z, w.as_slice())) / w_norm;
    if rel <= tol {
        Ok(Vector::from_raw(z))
    } else {
        Err(LinalgError::ResidualTolerance { achieved: rel, tol })
    }
}

fn norm_slice(v: &[f64]) -> f64 {
    Vector::from_raw(v.to_vec()).norm()
}

/// Veltkamp splitting constant `2^27 + 1`.
const SPLITTER: f64 = 134_217_729.0;

#[inline]
fn split(a: f64) -> (f64, f64) {
    let c = SPLITTER * a;
    let hi = c - (c - a);
    (hi, a - hi)
}

/// `a b = p + e` exactly (Dekker), for hosts without hardware FMA where
/// `f64::mul_add` is a library call. Valid while `|a|, |b|` stay well
/// below `1e300`.
#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let (ah, al) = split(a);
    let (bh, bl) = split(b);
    (p, ((ah * bh - p) + ah * bl + al * bh) + al * bl)
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// `w - (J + aI) z`, each row accumulated in doubled working precision.
fn shifted_residual(j: &LinearMap, a: f64, z: &[f64], w: &[f64]) -> Vec<f64> {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("fma") && std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports the enabled feature.
        return unsafe { shifted_residual_fma(j, a, z, w) };
    }
    residual_kernel(j, a, z, w, two_prod)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn shifted_residual_fma(j: &LinearMap, a: f64, z: &[f64], w: &[f64]) -> Vec<f64> {
    residual_kernel(j, a, z, w, |x, y| {
        let p = x * y;
        (p, x.mul_add(y, -p))
    })
}

/// Compensated row sums with independent lanes so they do not serialize.
#[inline(always)]
fn residual_kernel(
    j: &LinearMap,
    a: f64,
    z: &[f64],
    w: &[f64],
    prod: impl Fn(f64, f64) -> (f64, f64),
) -> Vec<f64> {
    let d = j.dim();
    let full = d - d % LANES;
    let mut out = Vec::with_capacity(d);
    for (i, m) in j.data.chunks_exact(d).enumerate() {
        let mut s = [0.0; LANES];
        let mut c = [0.0; LANES];
        for k in (0..full).step_by(LANES) {
            for l in 0..LANES {
                let (p, e) = prod(m[k + l], z[k + l]);
                let (s1, q) = two_sum(s[l], -p);
                s[l] = s1;
                c[l] += q - e;
            }
        }
        let mut acc = w[i];
        let mut comp = 0.0;
        let tail = (full..d).map(|t| (m[t], z[t]));
        for (mt, zt) in tail.chain(std::iter::once((a, z[i]))) {
            let (p, e) = prod(mt, zt);
            let (s1, q) = two_sum(acc, -p);
            acc = s1;
            comp += q - e;
        }
        for l in 0..LANES {
            let (s1, q) = two_sum(acc, s[l]);
            acc = s1;
            comp += q + c[l];
        }
        out.push(acc + comp);
    }
    out
}

/// `P M = L U` for a general square matrix.
#[derive(Debug, Clone)]
pub struct LuFactors {
    dim: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl LuFactors {
    pub fn factor(m: LinearMap) -> Result<Self, LinalgError> {
        let d = m.dim;
        let mut lu = m.data;
        let mut perm: Vec<usize> = (0..d).collect();
        let scale = lu.iter().fold(0.0_f64, |s, v| s.max(v.abs()));
        let threshold = (d as f64) * f64::EPSILON * scale;
        let mut smallest = f64::INFINITY;
        for k in 0..d {
            let (p, pivot_abs) = (k..d)
                .map(|i| (i, lu[i * d + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            smallest = smallest.min(pivot_abs);
            if pivot_abs <= threshold || !pivot_abs.is_finite() {
                return Err(LinalgError::Breakdown {
                    smallest_pivot: pivot_abs,
                    index: k,
                });
            }
            if p != k {
                for c in 0..d {
                    lu.swap(k * d + c, p * d + c);
                }
                perm.swap(k, p);
            }
            let pivot = lu[k * d + k];
            let (upper, lower) = lu.split_at_mut((k + 1) * d);
            let pivot_row = &upper[k * d + k + 1..k * d + d];
            for row in lower.chunks_exact_mut(d) {
                let l = row[k] / pivot;
                row[k] = l;
                if l != 0.0 {
                    for (x, &u) in row[k + 1..].iter_mut().zip(pivot_row) {
                        *x -= l * u;
                    }
                }
            }
        }
        log::trace!("LU of dim {d}: smallest pivot {smallest:e}");
        Ok(Self { dim: d, lu, perm })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..d {
            let row = &self.lu[i * d..i * d + i];
            let s = dot(row, &x[..i]);
            x[i] -= s;
        }
        for i in (0..d).rev() {
            let row = &self.lu[i * d + i + 1..(i + 1) * d];
            let s = dot(row, &x[i + 1..]);
            x[i] = (x[i] - s) / self.lu[i * d + i];
        }
        x
    }
}

/// `J = Q H Q^T` with `H` upper Hessenberg, reusable across shifts.
#[derive(Debug, Clone)]
pub struct ShiftedSystem {
    original: LinearMap,
    /// Largest entry of `h`.
    h_scale: f64,
    /// Row-major orthogonal factor.
    q: Vec<f64>,
    /// Row-major Hessenberg factor; entries below the subdiagonal are zero.
    h: Vec<f64>,
}

impl ShiftedSystem {
    pub fn new(j: &LinearMap) -> Self {
        let d = j.dim();
        let mut h = j.data.clone();
        let mut q = LinearMap::identity(d).data;
        let mut v = vec![0.0; d];
        for k in 0..d.saturating_sub(2) {
            // Householder vector annihilating h[k+2.., k].
            let alpha_sq: f64 = (k + 1..d).map(|i| h[i * d + k] * h[i * d + k]).sum();
            let alpha = alpha_sq.sqrt();
            if alpha == 0.0 {
                continue;
            }
            let x0 = h[(k + 1) * d + k];
            let sign = if x0 >= 0.0 { 1.0 } else { -1.0 };
            for i in 0..d {
                v[i] = if i > k { h[i * d + k] } else { 0.0 };
            }
            v[k + 1] += sign * alpha;
            let vnorm_sq: f64 = v[k + 1..].iter().map(|x| x * x).sum();
            if vnorm_sq == 0.0 {
                continue;
            }
            let beta = 2.0 / vnorm_sq;
            // H <- P H
            for c in 0..d {
                let s: f64 = (k + 1..d).map(|i| v[i] * h[i * d + c]).sum();
                let f = beta * s;
                if f != 0.0 {
                    for i in k + 1..d {
                        h[i * d + c] -= f * v[i];
                    }
                }
            }
            // H <- H P, Q <- Q P
            for r in 0..d {
                let row = &mut h[r * d..(r + 1) * d];
                let s: f64 = (k + 1..d).map(|i| row[i] * v[i]).sum();
                let f = beta * s;
                for i in k + 1..d {
                    row[i] -= f * v[i];
                }
                let qrow = &mut q[r * d..(r + 1) * d];
                let s: f64 = (k + 1..d).map(|i| qrow[i] * v[i]).sum();
                let f = beta * s;
                for i in k + 1..d {
                    qrow[i] -= f * v[i];
                }
            }
            for i in k + 2..d {
                h[i * d + k] = 0.0;
            }
        }
        Self {
            original: j.clone(),
            h_scale: h.iter().fold(0.0_f64, |s, v| s.max(v.abs())),
            q,
            h,
        }
    }

    pub fn dim(&self) -> usize {
        self.original.dim()
    }

    pub fn matrix(&self) -> &LinearMap {
        &self.original
    }

    /// Solves `(J + aI) z = w` with the same tolerance contract as [`reg_solve`].
    pub fn solve(&self, a: f64, w: &Vector) -> Result<Vector, LinalgError> {
        self.solve_with_tol(a, w, DEFAULT_SOLVE_TOL)
    }

    pub fn solve_with_tol(&self, a: f64, w: &Vector, tol: f64) -> Result<Vector, LinalgError> {
        check_shift_inputs(self.dim(), a, w)?;
        let factors = self.factor_shift(a)?;
        refine(&self.original, a, w, tol, |rhs| self.solve_factored(&factors, rhs))
    }

    fn factor_shift(&self, a: f64) -> Result<HessenbergLu, LinalgError> {
        let d = self.dim();
        let mut u = self.h.clone();
        for i in 0..d {
            u[i * d + i] += a;
        }
        // Bounds the largest entry of H + aI from above.
        let threshold = (d as f64) * f64::EPSILON * (self.h_scale + a);
        let mut swapped = vec![false; d];
        let mut mult = vec![0.0; d];
        for k in 0..d {
            if k + 1 < d && u[(k + 1) * d + k].abs() > u[k * d + k].abs() {
                for c in k..d {
                    u.swap(k * d + c, (k + 1) * d + c);
                }
                swapped[k] = true;
            }
            let pivot = u[k * d + k];
            if pivot.abs() <= threshold || !pivot.is_finite() {
                return Err(LinalgError::Breakdown {
                    smallest_pivot: pivot.abs(),
                    index: k,
                });
            }
            if k + 1 < d {
                let l = u[(k + 1) * d + k] / pivot;
                mult[k] = l;
                u[(k + 1) * d + k] = 0.0;
                if l != 0.0 {
                    let (top, bottom) = u.split_at_mut((k + 1) * d);
                    let src = &top[k * d + k + 1..k * d + d];
                    for (x, &s) in bottom[k + 1..d].iter_mut().zip(src) {
                        *x -= l * s;
                    }
                }
            }
        }
        Ok(HessenbergLu { u, swapped, mult })
    }

    fn solve_factored(&self, f: &HessenbergLu, rhs: &[f64]) -> Vec<f64> {
        let d = self.dim();
        // t = Q^T rhs
        let mut t = vec![0.0; d];
        for (qrow, &r) in self.q.chunks_exact(d).zip(rhs) {
            for (ti, &qv) in t.iter_mut().zip(qrow) {
                *ti += qv * r;
            }
        }
        for k in 0..d.saturating_sub(1) {
            if f.swapped[k] {
                t.swap(k, k + 1);
            }
            t[k + 1] -= f.mult[k] * t[k];
        }
        for i in (0..d).rev() {
            let row = &f.u[i * d + i + 1..(i + 1) * d];
            let s = dot(row, &t[i + 1..]);
            t[i] = (t[i] - s) / f.u[i * d + i];
        }
        // z = Q t
        self.q
            .chunks_exact(d)
            .map(|qrow| dot(qrow, &t))
            .collect()
    }
}

#[derive(Debug)]
struct HessenbergLu {
    u: Vec<f64>,
    swapped: Vec<bool>,
    mult: Vec<f64>,
}
