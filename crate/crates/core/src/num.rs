//! Scalar abstraction and small dense linear algebra.
//!
//! Kinematics, dynamics, and every constraint evaluator in the
//! transcription are written generically over [`Real`]. Instantiated with
//! `f64` they are plain evaluations; instantiated with [`Dual`] and one
//! input seeded via [`Dual::var`] they produce one exact column of the
//! Jacobian (forward-mode differentiation). No finite differencing is
//! involved anywhere outside of tests.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Index, IndexMut, Mul, MulAssign, Neg, Sub, SubAssign};

/// Scalar usable in the generic kinematics/dynamics routines.
pub trait Real:
    Copy
    + Debug
    + PartialEq
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    fn from_f64(x: f64) -> Self;
    /// Value part (drops any derivative information).
    fn value(self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn value(self) -> f64 {
        self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
}

/// Forward-mode dual number carrying a single directional derivative.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Dual {
    /// Value part.
    pub v: f64,
    /// Derivative part.
    pub d: f64,
}

impl Dual {
    /// A variable being differentiated (seed 1).
    pub fn var(v: f64) -> Self {
        Dual { v, d: 1.0 }
    }
    /// A constant (seed 0).
    pub fn con(v: f64) -> Self {
        Dual { v, d: 0.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, r: Dual) -> Dual {
        Dual { v: self.v + r.v, d: self.d + r.d }
    }
}
impl Sub for Dual {
    type Output = Dual;
    fn sub(self, r: Dual) -> Dual {
        Dual { v: self.v - r.v, d: self.d - r.d }
    }
}
impl Mul for Dual {
    type Output = Dual;
    fn mul(self, r: Dual) -> Dual {
        Dual { v: self.v * r.v, d: self.d * r.v + self.v * r.d }
    }
}
impl Div for Dual {
    type Output = Dual;
    fn div(self, r: Dual) -> Dual {
        let inv = 1.0 / r.v;
        Dual { v: self.v * inv, d: (self.d - self.v * inv * r.d) * inv }
    }
}
impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual { v: -self.v, d: -self.d }
    }
}
impl AddAssign for Dual {
    fn add_assign(&mut self, r: Dual) {
        *self = *self + r;
    }
}
impl SubAssign for Dual {
    fn sub_assign(&mut self, r: Dual) {
        *self = *self - r;
    }
}
impl MulAssign for Dual {
    fn mul_assign(&mut self, r: Dual) {
        *self = *self * r;
    }
}

impl Real for Dual {
    fn from_f64(x: f64) -> Self {
        Dual::con(x)
    }
    fn value(self) -> f64 {
        self.v
    }
    fn sin(self) -> Self {
        Dual { v: self.v.sin(), d: self.d * self.v.cos() }
    }
    fn cos(self) -> Self {
        Dual { v: self.v.cos(), d: -self.d * self.v.sin() }
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        Dual { v: s, d: if s == 0.0 { 0.0 } else { 0.5 * self.d / s } }
    }
    fn abs(self) -> Self {
        if self.v >= 0.0 {
            self
        } else {
            -self
        }
    }
}

/// Row-major dense matrix over a generic scalar. Sized for the small
/// systems that appear in planar rigid-body work (at most a few dozen
/// rows); the optimization layer uses `nalgebra` instead.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// y = A x.
    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.cols);
        let mut y = vec![T::zero(); self.rows];
        for r in 0..self.rows {
            let mut acc = T::zero();
            for (a, xv) in self.row(r).iter().zip(x) {
                acc += *a * *xv;
            }
            y[r] = acc;
        }
        y
    }

    /// y = A^T x.
    pub fn tr_mul_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.rows);
        let mut y = vec![T::zero(); self.cols];
        for r in 0..self.rows {
            let xr = x[r];
            for (c, a) in self.row(r).iter().enumerate() {
                y[c] += *a * xr;
            }
        }
        y
    }

    pub fn transpose(&self) -> Mat<T> {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[(c, r)] = self[(r, c)];
            }
        }
        out
    }
}

impl<T> Index<(usize, usize)> for Mat<T> {
    type Output = T;
    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize)> for Mat<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

/// The coefficient matrix of a linear solve was singular to working
/// precision.
#[derive(Debug, Clone, thiserror::Error)]
#[error("matrix is numerically singular (pivot {pivot:e} at elimination step {step})")]
pub struct SingularMatrix {
    pub step: usize,
    pub pivot: f64,
}

/// Solves A X = B by Gaussian elimination with partial pivoting. Pivoting
/// compares value parts only, so the elimination order is identical between
/// an `f64` evaluation and a seeded [`Dual`] evaluation of the same system.
pub fn solve_dense<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>, SingularMatrix> {
    let n = a.rows();
    assert_eq!(a.cols(), n, "square system required");
    assert_eq!(b.rows(), n, "rhs row count");
    let mut m = a.clone();
    let mut x = b.clone();
    let mut scale = 0.0f64;
    for v in &m.data {
        scale = scale.max(v.value().abs());
    }
    let tol = scale.max(1.0) * 1e-14;
    for k in 0..n {
        let mut piv = k;
        let mut best = m[(k, k)].value().abs();
        for r in k + 1..n {
            let cand = m[(r, k)].value().abs();
            if cand > best {
                best = cand;
                piv = r;
            }
        }
        if best <= tol {
            return Err(SingularMatrix { step: k, pivot: best });
        }
        if piv != k {
            for c in 0..n {
                let tmp = m[(k, c)];
                m[(k, c)] = m[(piv, c)];
                m[(piv, c)] = tmp;
            }
            for c in 0..x.cols() {
                let tmp = x[(k, c)];
                x[(k, c)] = x[(piv, c)];
                x[(piv, c)] = tmp;
            }
        }
        let inv = T::one() / m[(k, k)];
        for r in k + 1..n {
            let f = m[(r, k)] * inv;
            if f.value() == 0.0 && f == T::zero() {
                continue;
            }
            for c in k..n {
                let v = m[(k, c)];
                m[(r, c)] -= f * v;
            }
            for c in 0..x.cols() {
                let v = x[(k, c)];
                x[(r, c)] -= f * v;
            }
        }
    }
    for k in (0..n).rev() {
        let inv = T::one() / m[(k, k)];
        for c in 0..x.cols() {
            let mut acc = x[(k, c)];
            for j in k + 1..n {
                acc -= m[(k, j)] * x[(j, c)];
            }
            x[(k, c)] = acc * inv;
        }
    }
    Ok(x)
}

/// Column vector wrapper for [`solve_dense`].
pub fn solve_vec<T: Real>(a: &Mat<T>, b: &[T]) -> Result<Vec<T>, SingularMatrix> {
    let mut rhs = Mat::zeros(b.len(), 1);
    for (i, v) in b.iter().enumerate() {
        rhs[(i, 0)] = *v;
    }
    let x = solve_dense(a, &rhs)?;
    Ok((0..b.len()).map(|i| x[(i, 0)]).collect())
}
