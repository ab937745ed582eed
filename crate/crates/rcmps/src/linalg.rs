//! Small dense complex linear algebra layer.
//!
//! Everything in the solver lives on D x D complex matrices with D rarely
//! above 10, so the hot paths (transfer-map applications inside ODE stages)
//! use hand-rolled triple loops over contiguous row-major slices instead of
//! general-purpose GEMM: for these sizes call overhead and layout checks cost
//! more than the arithmetic. Dense factorizations (eig, eigh, solve, QR) go
//! through LAPACK via `ndarray-linalg`.

use ndarray::{Array1, Array2};
use ndarray_linalg::{Eig, Eigh, Inverse, Solve, UPLO};
use num_complex::Complex64;

use crate::error::{RcmpsError, Result};

/// Complex scalar used throughout.
pub type C64 = Complex64;
/// Dense complex matrix (always square, row-major, standard layout here).
pub type CMat = Array2<Complex64>;

/// `d x d` zero matrix.
pub fn zeros(d: usize) -> CMat {
    Array2::zeros((d, d))
}

/// `d x d` identity.
pub fn identity(d: usize) -> CMat {
    Array2::eye(d)
}

/// Conjugate transpose. Built elementwise into a fresh standard-layout
/// array: `a.t().mapv(..)` would keep the transposed (column-major) memory
/// order, which the slice kernels below cannot accept.
pub fn dagger(a: &CMat) -> CMat {
    let (n, m) = a.dim();
    Array2::from_shape_fn((m, n), |(i, j)| a[[j, i]].conj())
}

/// Hermitian part `(A + A†)/2`.
pub fn herm_part(a: &CMat) -> CMat {
    let mut h = dagger(a);
    h += a;
    h.mapv_inplace(|z| 0.5 * z);
    h
}

/// Commutator `[A, B] = AB - BA`.
pub fn commutator(a: &CMat, b: &CMat) -> CMat {
    let mut c = a.dot(b);
    c -= &b.dot(a);
    c
}

/// Matrix trace.
pub fn trace(a: &CMat) -> C64 {
    a.diag().sum()
}

/// Hilbert-Schmidt inner product `<A, B> = tr[A† B]`, antilinear in `A`.
pub fn hs_inner(a: &CMat, b: &CMat) -> C64 {
    debug_assert_eq!(a.dim(), b.dim());
    let mut s = C64::new(0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        s += x.conj() * y;
    }
    s
}

/// Frobenius norm.
pub fn fro_norm(a: &CMat) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Max absolute entry (used for scale estimates in tolerances).
pub fn max_abs(a: &CMat) -> f64 {
    a.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Slice kernels. All operate on d*d row-major contiguous blocks.
// ---------------------------------------------------------------------------

/// Borrow the contiguous data of a standard-layout matrix.
pub(crate) fn mslice(a: &CMat) -> &[C64] {
    a.as_slice().expect("matrix must be contiguous row-major")
}

/// Mutably borrow the contiguous data of a standard-layout matrix.
pub(crate) fn mslice_mut(a: &mut CMat) -> &mut [C64] {
    a.as_slice_mut().expect("matrix must be contiguous row-major")
}

/// `c += w * a` elementwise.
pub(crate) fn axpy(c: &mut [C64], a: &[C64], w: C64) {
    debug_assert_eq!(c.len(), a.len());
    for (ci, ai) in c.iter_mut().zip(a.iter()) {
        *ci += w * ai;
    }
}

/// `C += w * A B`.
pub(crate) fn mul_acc(c: &mut [C64], a: &[C64], b: &[C64], d: usize, w: C64) {
    debug_assert_eq!(a.len(), d * d);
    debug_assert_eq!(b.len(), d * d);
    debug_assert_eq!(c.len(), d * d);
    for i in 0..d {
        let arow = &a[i * d..(i + 1) * d];
        let crow = &mut c[i * d..(i + 1) * d];
        for (k, aik) in arow.iter().enumerate() {
            let f = w * aik;
            let brow = &b[k * d..(k + 1) * d];
            for (cj, bj) in crow.iter_mut().zip(brow.iter()) {
                *cj += f * bj;
            }
        }
    }
}

/// `C += w * A B†`.
pub(crate) fn mul_acc_bdag(c: &mut [C64], a: &[C64], b: &[C64], d: usize, w: C64) {
    debug_assert_eq!(a.len(), d * d);
    debug_assert_eq!(b.len(), d * d);
    debug_assert_eq!(c.len(), d * d);
    for i in 0..d {
        let arow = &a[i * d..(i + 1) * d];
        let crow = &mut c[i * d..(i + 1) * d];
        for (j, cj) in crow.iter_mut().enumerate() {
            let brow = &b[j * d..(j + 1) * d];
            let mut s = C64::new(0.0, 0.0);
            for (ak, bk) in arow.iter().zip(brow.iter()) {
                s += ak * bk.conj();
            }
            *cj += w * s;
        }
    }
}

/// `C += w * A† B`.
pub(crate) fn mul_acc_adag(c: &mut [C64], a: &[C64], b: &[C64], d: usize, w: C64) {
    debug_assert_eq!(a.len(), d * d);
    debug_assert_eq!(b.len(), d * d);
    debug_assert_eq!(c.len(), d * d);
    for i in 0..d {
        let crow = &mut c[i * d..(i + 1) * d];
        for k in 0..d {
            let f = w * a[k * d + i].conj();
            let brow = &b[k * d..(k + 1) * d];
            for (cj, bj) in crow.iter_mut().zip(brow.iter()) {
                *cj += f * bj;
            }
        }
    }
}

/// `c_ij += w * conj(a_ji)` — accumulate a scaled conjugate transpose.
pub(crate) fn axpy_dag(c: &mut [C64], a: &[C64], d: usize, w: C64) {
    debug_assert_eq!(c.len(), d * d);
    debug_assert_eq!(a.len(), d * d);
    for i in 0..d {
        let crow = &mut c[i * d..(i + 1) * d];
        for (j, cj) in crow.iter_mut().enumerate() {
            *cj += w * a[j * d + i].conj();
        }
    }
}

/// `tr[A B]` on slices.
pub(crate) fn trace_mul(a: &[C64], b: &[C64], d: usize) -> C64 {
    debug_assert_eq!(a.len(), d * d);
    debug_assert_eq!(b.len(), d * d);
    let mut s = C64::new(0.0, 0.0);
    for i in 0..d {
        let arow = &a[i * d..(i + 1) * d];
        for (j, aij) in arow.iter().enumerate() {
            s += aij * b[j * d + i];
        }
    }
    s
}

/// Euclidean norm of a complex slice.
pub(crate) fn slice_norm(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Standard complex dot product `<u, v> = sum conj(u_i) v_i`.
pub(crate) fn slice_dot(u: &[C64], v: &[C64]) -> C64 {
    debug_assert_eq!(u.len(), v.len());
    let mut s = C64::new(0.0, 0.0);
    for (a, b) in u.iter().zip(v.iter()) {
        s += a.conj() * b;
    }
    s
}

// ---------------------------------------------------------------------------
// LAPACK wrappers with crate error mapping.
// ---------------------------------------------------------------------------

/// Hermitian eigendecomposition (ascending eigenvalues, unitary eigenvectors
/// in columns). Input is used as given; callers hermitize first.
pub(crate) fn eigh(a: &CMat, context: &'static str) -> Result<(Array1<f64>, CMat)> {
    let (w, u) = a
        .eigh(UPLO::Lower)
        .map_err(|e| RcmpsError::linalg(context, e))?;
    // LAPACK reads the row-major buffer as its transpose, i.e. it
    // diagonalizes conj(A); undo the conjugation (and restore standard
    // layout) so that A = U diag(w) U^dag holds for the returned U.
    let d = u.nrows();
    let v = Array2::from_shape_fn((d, d), |(i, j)| u[[i, j]].conj());
    Ok((w, v))
}

/// General complex eigendecomposition (eigenvalues, eigenvectors in columns).
pub(crate) fn eig(a: &CMat, context: &'static str) -> Result<(Array1<C64>, CMat)> {
    a.eig().map_err(|e| RcmpsError::linalg(context, e))
}

/// Dense inverse (used for eigenvector similarity transforms in the
/// retraction; conditioning is checked downstream by residuals).
pub(crate) fn inv(a: &CMat, context: &'static str) -> Result<CMat> {
    a.inv().map_err(|e| RcmpsError::linalg(context, e))
}

/// Dense LU solve `A x = b` (small vectorized fixed-point systems).
pub(crate) fn solve(a: &CMat, b: &Array1<C64>, context: &'static str) -> Result<Array1<C64>> {
    a.solve(b).map_err(|e| RcmpsError::linalg(context, e))
}
