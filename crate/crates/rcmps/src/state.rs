//! RCMPS state data and the transfer superoperator.
//!
//! A state of bond dimension D is the triple `(K, R_1, R_2)` with K
//! Hermitian. The left-gauge generator is
//!
//! ```text
//!   Q = -iK - (1/2) (R_1^dag R_1 + R_2^dag R_2),
//! ```
//!
//! which enforces Q + Q^dag + sum_j R_j^dag R_j = 0 identically, so the
//! transfer superoperator
//!
//! ```text
//!   L(X) = Q X + X Q^dag + sum_j R_j X R_j^dag
//! ```
//!
//! is trace-free (tr L(X) = 0 for every X) and generates a completely
//! positive trace-preserving semigroup in the adjoint picture. Its spectrum
//! lies in the closed left half-plane; for injective states the eigenvalue 0
//! is simple and its right eigenvector is the fixed-point density rho_0
//! (Hermitian, positive semidefinite, normalized to tr rho_0 = 1), which
//! plays the role of the reduced density matrix of half space.
//!
//! The fixed point is produced by a trace-deflated Krylov solve: since the
//! identity spans the left kernel of L, solving `L(Y) = -L(1/D)` with GMRES
//! keeps the Krylov space inside the traceless subspace, where L is
//! invertible for injective states, and `rho_0 = 1/D + Y` after hermitization
//! and normalization. A dense eigensolve of the D^2 x D^2 matrix of L backs
//! this up, both as an independent oracle in tests and as a production
//! fallback (D <= 8) with an explicit spectral-gap diagnostic.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{RcmpsError, Result};
use crate::krylov::{gmres, GmresOptions};
use crate::linalg::{
    self, dagger, eigh, fro_norm, herm_part, identity, mslice, mslice_mut, mul_acc, mul_acc_adag,
    mul_acc_bdag, zeros, C64, CMat,
};
use crate::Tolerances;

/// An RCMPS state `(K, R_1, R_2)` with K Hermitian.
#[derive(Debug, Clone)]
pub struct RcmpsState {
    d: usize,
    k: CMat,
    r: [CMat; 2],
}

impl RcmpsState {
    /// Validate and build a state. `k` must be Hermitian to 1e-12 relative
    /// accuracy and all matrices square of one size; `k` is stored exactly
    /// as given (no hermitization) so that serialization round-trips are
    /// bit-exact.
    pub fn new(k: CMat, r1: CMat, r2: CMat) -> Result<Self> {
        let d = k.nrows();
        if d == 0 {
            return Err(RcmpsError::InvalidState("bond dimension is zero".into()));
        }
        for (name, m) in [("K", &k), ("R1", &r1), ("R2", &r2)] {
            if m.nrows() != d || m.ncols() != d {
                return Err(RcmpsError::InvalidState(format!(
                    "{name} is {}x{}, expected {d}x{d}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                return Err(RcmpsError::InvalidState(format!(
                    "{name} contains non-finite entries"
                )));
            }
        }
        let herm_defect = fro_norm(&(&k - &dagger(&k)));
        if herm_defect > 1e-12 * fro_norm(&k).max(1.0) {
            return Err(RcmpsError::InvalidState(format!(
                "K is not Hermitian: ||K - K^dag|| = {herm_defect:.3e}"
            )));
        }
        Ok(RcmpsState { d, k, r: [r1, r2] })
    }

    /// Bond dimension.
    pub fn dim(&self) -> usize {
        self.d
    }

    /// The Hermitian gauge generator K.
    pub fn k(&self) -> &CMat {
        &self.k
    }

    /// Field matrix `R_j`, `j in {0, 1}`.
    pub fn r(&self, j: usize) -> &CMat {
        &self.r[j]
    }

    /// Left-gauge generator `Q = -iK - (1/2) sum_j R_j^dag R_j`.
    pub fn q(&self) -> CMat {
        let d = self.d;
        let mut q = zeros(d);
        {
            let qs = mslice_mut(&mut q);
            for j in 0..2 {
                let rs = mslice(&self.r[j]);
                mul_acc_adag(qs, rs, rs, d, C64::new(-0.5, 0.0));
            }
        }
        let mi = C64::new(0.0, -1.0);
        q.zip_mut_with(&self.k, |qz, kz| *qz += mi * kz);
        q
    }

    /// Frobenius norm of `[R_1, R_2]`; zero on the regular submanifold.
    pub fn commutator_residual(&self) -> f64 {
        fro_norm(&linalg::commutator(&self.r[0], &self.r[1]))
    }

    /// Scale of the transfer generator, used to normalize residual checks:
    /// `2||Q|| + sum_j ||R_j||^2` (Frobenius norms).
    pub fn generator_scale(&self) -> f64 {
        2.0 * fro_norm(&self.q()) + self.r.iter().map(|r| fro_norm(r).powi(2)).sum::<f64>()
    }

    /// The transfer superoperator of this state (borrows the matrices).
    pub fn transfer(&self) -> Transfer {
        Transfer {
            d: self.d,
            q: self.q(),
            r: [self.r[0].clone(), self.r[1].clone()],
        }
    }

    /// Serializable snapshot of the raw matrices.
    pub fn to_parts(&self) -> StateParts {
        StateParts {
            d: self.d,
            k: pack(&self.k),
            r: [pack(&self.r[0]), pack(&self.r[1])],
        }
    }

    /// Rebuild from a snapshot (validates like [`RcmpsState::new`]).
    pub fn from_parts(parts: &StateParts) -> Result<Self> {
        let k = unpack(parts.d, &parts.k, "K")?;
        let r1 = unpack(parts.d, &parts.r[0], "R1")?;
        let r2 = unpack(parts.d, &parts.r[1], "R2")?;
        RcmpsState::new(k, r1, r2)
    }
}

/// Flat serialization of a state: row-major `[re, im]` pairs.
///
/// This is the on-disk format of checkpoints and CLI state files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StateParts {
    /// Bond dimension.
    #[serde(rename = "D")]
    pub d: usize,
    /// K, row-major, one `[re, im]` pair per entry.
    #[serde(rename = "K")]
    pub k: Vec<[f64; 2]>,
    /// R_1 and R_2 in the same layout.
    #[serde(rename = "R")]
    pub r: [Vec<[f64; 2]>; 2],
}

fn pack(m: &CMat) -> Vec<[f64; 2]> {
    m.iter().map(|z| [z.re, z.im]).collect()
}

fn unpack(d: usize, v: &[[f64; 2]], name: &str) -> Result<CMat> {
    if v.len() != d * d {
        return Err(RcmpsError::InvalidState(format!(
            "{name} has {} entries, expected {}",
            v.len(),
            d * d
        )));
    }
    let data: Vec<C64> = v.iter().map(|p| C64::new(p[0], p[1])).collect();
    Array2::from_shape_vec((d, d), data)
        .map_err(|e| RcmpsError::InvalidState(format!("{name}: {e}")))
}

// ---------------------------------------------------------------------------
// Transfer superoperator.
// ---------------------------------------------------------------------------

/// Materialized transfer map `L` (owns Q and the R's so that the expensive
/// Q assembly happens once per state).
#[derive(Debug, Clone)]
pub struct Transfer {
    d: usize,
    q: CMat,
    r: [CMat; 2],
}

impl Transfer {
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn q(&self) -> &CMat {
        &self.q
    }

    pub fn r(&self, j: usize) -> &CMat {
        &self.r[j]
    }

    /// `out += L(x) = Q x + x Q^dag + sum_j R_j x R_j^dag`, on flat slices.
    /// `tmp` is scratch of the same size.
    pub(crate) fn apply_acc(&self, x: &[C64], out: &mut [C64], tmp: &mut [C64]) {
        self.apply_acc_w(x, out, tmp, 1.0);
    }

    /// `out += w L(x)` with a real weight (substitution segments scale the
    /// whole generator by the coordinate Jacobian).
    pub(crate) fn apply_acc_w(&self, x: &[C64], out: &mut [C64], tmp: &mut [C64], w: f64) {
        let d = self.d;
        let one = C64::new(1.0, 0.0);
        let wc = C64::new(w, 0.0);
        let q = mslice(&self.q);
        mul_acc(out, q, x, d, wc);
        mul_acc_bdag(out, x, q, d, wc);
        for rj in &self.r {
            let r = mslice(rj);
            tmp.fill(C64::new(0.0, 0.0));
            mul_acc(tmp, r, x, d, one);
            mul_acc_bdag(out, tmp, r, d, wc);
        }
    }

    /// `out += L^dag(y) = Q^dag y + y Q + sum_j R_j^dag y R_j`.
    pub(crate) fn apply_adjoint_acc(&self, y: &[C64], out: &mut [C64], tmp: &mut [C64]) {
        self.apply_adjoint_acc_w(y, out, tmp, 1.0);
    }

    /// `out += w L^dag(y)` with a real weight.
    pub(crate) fn apply_adjoint_acc_w(&self, y: &[C64], out: &mut [C64], tmp: &mut [C64], w: f64) {
        let d = self.d;
        let one = C64::new(1.0, 0.0);
        let wc = C64::new(w, 0.0);
        let q = mslice(&self.q);
        mul_acc_adag(out, q, y, d, wc);
        mul_acc(out, y, q, d, wc);
        for rj in &self.r {
            let r = mslice(rj);
            tmp.fill(C64::new(0.0, 0.0));
            mul_acc_adag(tmp, r, y, d, one);
            mul_acc(out, tmp, r, d, wc);
        }
    }

    /// `L(x)` on matrices (convenience wrapper).
    pub fn apply(&self, x: &CMat) -> CMat {
        let d = self.d;
        let mut out = zeros(d);
        let mut tmp = vec![C64::new(0.0, 0.0); d * d];
        self.apply_acc(mslice(x), mslice_mut(&mut out), &mut tmp);
        out
    }

    /// `L^dag(y)` on matrices.
    pub fn apply_adjoint(&self, y: &CMat) -> CMat {
        let d = self.d;
        let mut out = zeros(d);
        let mut tmp = vec![C64::new(0.0, 0.0); d * d];
        self.apply_adjoint_acc(mslice(y), mslice_mut(&mut out), &mut tmp);
        out
    }

    /// Dense D^2 x D^2 matrix of `L` in the row-major vectorization
    /// `vec(X)_{iD+j} = X_{ij}`: `M = Q (x) 1 + 1 (x) conj(Q) + sum R_j (x) conj(R_j)`.
    pub fn dense_matrix(&self) -> CMat {
        let d = self.d;
        let n = d * d;
        let mut m = zeros(n);
        let id = identity(d);
        kron_acc(&mut m, &self.q, &id);
        kron_acc(&mut m, &id, &self.q.mapv(|z| z.conj()));
        for rj in &self.r {
            kron_acc(&mut m, rj, &rj.mapv(|z| z.conj()));
        }
        m
    }
}

/// `out += A (x) B` (Kronecker product on row-major vectorization).
fn kron_acc(out: &mut CMat, a: &CMat, b: &CMat) {
    let d = a.nrows();
    debug_assert_eq!(b.nrows(), d);
    for i in 0..d {
        for j in 0..d {
            let aij = a[[i, j]];
            if aij == C64::new(0.0, 0.0) {
                continue;
            }
            for k in 0..d {
                for l in 0..d {
                    out[[i * d + k, j * d + l]] += aij * b[[k, l]];
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Fixed point.
// ---------------------------------------------------------------------------

/// The fixed-point density `rho_0` with its spectral data.
#[derive(Debug, Clone)]
pub struct FixedPoint {
    rho: CMat,
    /// Eigenvalues of rho_0, ascending (clipped to >= 0).
    evals: Vec<f64>,
    /// Unitary eigenvectors (columns, matching `evals`).
    evecs: CMat,
    /// `||L(rho_0)||_F` achieved by the solve.
    pub residual: f64,
    /// Second-smallest |eigenvalue| of L relative to the generator scale,
    /// when the dense path ran (None for the Krylov path).
    pub gap: Option<f64>,
}

impl FixedPoint {
    /// The density matrix itself.
    pub fn rho(&self) -> &CMat {
        &self.rho
    }

    /// Ascending eigenvalues (all >= 0 after clipping).
    pub fn evals(&self) -> &[f64] {
        &self.evals
    }

    /// Eigenvector matrix (columns match [`FixedPoint::evals`]).
    pub fn evecs(&self) -> &CMat {
        &self.evecs
    }

    /// `M rho_0^+` through the spectral pseudo-inverse with relative cutoff
    /// `pinv_tol`: eigenvalues below `pinv_tol * max_eval` are dropped.
    pub fn right_pinv(&self, m: &CMat, pinv_tol: f64) -> CMat {
        let wmax = self.evals.last().copied().unwrap_or(0.0);
        let cut = pinv_tol * wmax;
        let mut inv = Vec::with_capacity(self.evals.len());
        let mut clipped = false;
        for &w in &self.evals {
            if w > cut {
                inv.push(C64::new(1.0 / w, 0.0));
            } else {
                inv.push(C64::new(0.0, 0.0));
                clipped = true;
            }
        }
        if clipped {
            log::warn!(
                "fixed-point density is near-singular (min eval {:.3e}, max {:.3e}); \
                 using pseudo-inverse",
                self.evals.first().copied().unwrap_or(0.0),
                wmax
            );
        }
        // m U diag(inv) U^dag
        let mu = m.dot(&self.evecs);
        let scaled = {
            let mut s = mu;
            for (mut col, iv) in s.columns_mut().into_iter().zip(inv.iter()) {
                col.mapv_inplace(|z| z * iv);
            }
            s
        };
        scaled.dot(&dagger(&self.evecs))
    }
}

impl Transfer {
    /// Compute the fixed point: Krylov solve on the traceless subspace with
    /// the dense eigensolve as fallback for D <= 8. `fp_tol` is relative to
    /// [`RcmpsState::generator_scale`].
    pub fn fixed_point(&self, tols: &Tolerances) -> Result<FixedPoint> {
        let d = self.d;
        let scale = 2.0 * fro_norm(&self.q) + self.r.iter().map(|r| fro_norm(r).powi(2)).sum::<f64>();
        let scale = scale.max(1e-300);
        let n = d * d;

        if d == 1 {
            // rho = 1 identically; residual is |L(1)| = |q + q* + |r|^2| = 0.
            let rho = identity(1);
            let res = self.apply(&rho);
            return Ok(FixedPoint {
                rho,
                evals: vec![1.0],
                evecs: identity(1),
                residual: fro_norm(&res),
                gap: None,
            });
        }

        // b = -L(1/D)
        let uniform = identity(d).mapv(|z| z / d as f64);
        let mut b = self.apply(&uniform);
        b.mapv_inplace(|z| -z);

        let mut tmp = vec![C64::new(0.0, 0.0); n];
        let apply = |v: &[C64], out: &mut [C64]| {
            out.fill(C64::new(0.0, 0.0));
            self.apply_acc(v, out, &mut tmp);
        };
        let opts = GmresOptions::new(n.min(150), 40 * n.max(30), tols.fp_tol);
        let sol = gmres(apply, mslice(&b), &opts);

        let mut rho = if sol.converged {
            let y = Array2::from_shape_vec((d, d), sol.x).expect("shape");
            &uniform + &y
        } else if d <= 8 {
            log::debug!(
                "fixed-point GMRES stalled at {:.3e}; dense fallback",
                sol.rel_residual
            );
            self.fixed_point_dense()?.rho
        } else {
            return Err(RcmpsError::KrylovStagnation {
                context: "transfer fixed point",
                residual: sol.rel_residual,
                tol: tols.fp_tol,
                iterations: sol.matvecs,
            });
        };

        // A consistent singular system (reducible transfer map) can still
        // converge to *a* fixed point; the spectral gap tells them apart.
        // The dense probe is cheap next to one ODE sweep and runs whenever
        // it is available.
        let gap = if d <= 8 {
            let g = self.spectral_gap()?;
            if g < 1e-10 {
                return Err(RcmpsError::NonInjectiveState { gap: g });
            }
            Some(g)
        } else {
            None
        };

        // Hermitize, normalize, clip.
        rho = herm_part(&rho);
        let tr = linalg::trace(&rho).re;
        if tr.abs() < 1e-12 {
            return Err(RcmpsError::NonInjectiveState { gap: 0.0 });
        }
        rho.mapv_inplace(|z| z / tr);
        let (evals, evecs) = eigh(&rho, "fixed-point eigendecomposition")?;

        // PSD check: eigenvalues may only dip below zero at roundoff level.
        let min_eval = evals.first().copied().unwrap_or(0.0);
        if min_eval < -1e-10 {
            return Err(RcmpsError::NonInjectiveState {
                gap: min_eval.abs(),
            });
        }
        let evals: Vec<f64> = evals.iter().map(|&w| w.max(0.0)).collect();

        let residual = fro_norm(&self.apply(&rho));
        if residual > 1e-10 * scale.max(1.0) {
            return Err(RcmpsError::NonInjectiveState {
                gap: gap.unwrap_or(0.0),
            });
        }

        Ok(FixedPoint {
            rho,
            evals,
            evecs,
            residual,
            gap,
        })
    }

    /// Dense-eigensolve fixed point (test oracle; production fallback for
    /// D <= 8). Finds the eigenvalue of L closest to zero, checks that it is
    /// separated from the rest of the spectrum, and returns its normalized
    /// Hermitian eigenvector.
    pub fn fixed_point_dense(&self) -> Result<FixedPoint> {
        let d = self.d;
        let scale = (2.0 * fro_norm(&self.q)
            + self.r.iter().map(|r| fro_norm(r).powi(2)).sum::<f64>())
        .max(1e-300);
        let m = self.dense_matrix();
        let (lam, vecs) = linalg::eig(&m, "dense transfer eigensolve")?;

        // Sort eigenvalue indices by |lambda|.
        let mut idx: Vec<usize> = (0..lam.len()).collect();
        idx.sort_by(|&a, &b| lam[a].norm().partial_cmp(&lam[b].norm()).unwrap());
        let lead = idx[0];
        let gap = if idx.len() > 1 {
            lam[idx[1]].norm() / scale
        } else {
            f64::INFINITY
        };
        if gap < 1e-10 {
            return Err(RcmpsError::NonInjectiveState { gap });
        }

        let v = vecs.column(lead);
        let mut rho = zeros(d);
        for i in 0..d {
            for j in 0..d {
                rho[[i, j]] = v[i * d + j];
            }
        }
        rho = herm_part(&rho);
        let tr = linalg::trace(&rho).re;
        if tr.abs() < 1e-12 * fro_norm(&rho) {
            // The Hermitian part happened to cancel; the eigenvector phase
            // makes rho anti-Hermitian instead. Retry with the i-rotation.
            let mut rho2 = zeros(d);
            for i in 0..d {
                for j in 0..d {
                    rho2[[i, j]] = C64::new(0.0, 1.0) * v[i * d + j];
                }
            }
            rho = herm_part(&rho2);
        }
        let tr = linalg::trace(&rho).re;
        if tr.abs() < 1e-12 {
            return Err(RcmpsError::NonInjectiveState { gap });
        }
        rho.mapv_inplace(|z| z / tr);

        let (evals, evecs) = eigh(&rho, "fixed-point eigendecomposition")?;
        let min_eval = evals.first().copied().unwrap_or(0.0);
        if min_eval < -1e-10 {
            return Err(RcmpsError::NonInjectiveState { gap });
        }
        let evals: Vec<f64> = evals.iter().map(|&w| w.max(0.0)).collect();
        let residual = fro_norm(&self.apply(&rho));
        Ok(FixedPoint {
            rho,
            evals,
            evecs,
            residual,
            gap: Some(gap),
        })
    }

    /// |second-smallest eigenvalue| of L relative to the generator scale.
    fn spectral_gap(&self) -> Result<f64> {
        let scale = (2.0 * fro_norm(&self.q)
            + self.r.iter().map(|r| fro_norm(r).powi(2)).sum::<f64>())
        .max(1e-300);
        let m = self.dense_matrix();
        let (lam, _) = linalg::eig(&m, "dense transfer eigensolve")?;
        let mut mags: Vec<f64> = lam.iter().map(|z| z.norm()).collect();
        mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(mags.get(1).copied().unwrap_or(f64::INFINITY) / scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{hs_inner, max_abs, trace};
    use crate::testutil::sample_state;
    use ndarray::array;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn gauge_identity_holds_by_construction() {
        for d in [1usize, 2, 3, 5] {
            let p = sample_state(d, 42 + d as u64);
            let q = p.q();
            let mut lhs = &q + &dagger(&q);
            for j in 0..2 {
                lhs += &dagger(p.r(j)).dot(p.r(j));
            }
            assert!(fro_norm(&lhs) < 1e-13 * p.generator_scale().max(1.0));
        }
    }

    #[test]
    fn transfer_is_trace_free_and_adjoint_consistent() {
        let p = sample_state(4, 7);
        let t = p.transfer();
        let x = {
            let s = sample_state(4, 19);
            s.k().clone()
        };
        let y = {
            let s = sample_state(4, 23);
            s.r(0).clone()
        };
        let lx = t.apply(&x);
        assert!(trace(&lx).norm() < 1e-13 * fro_norm(&lx).max(1.0));
        // <y, L x> = <L^dag y, x>
        let a = hs_inner(&y, &lx);
        let b = hs_inner(&t.apply_adjoint(&y), &x);
        assert!((a - b).norm() < 1e-12 * a.norm().max(1.0));
        // Identity is a left fixed point: L^dag(1) = 0.
        let lid = t.apply_adjoint(&identity(4));
        assert!(fro_norm(&lid) < 1e-13 * p.generator_scale());
    }

    #[test]
    fn dense_matrix_matches_apply() {
        let p = sample_state(3, 99);
        let t = p.transfer();
        let m = t.dense_matrix();
        let x = sample_state(3, 5).k().clone();
        let lx = t.apply(&x);
        // vec(LX) = M vec(X)
        let vx: Vec<C64> = x.iter().copied().collect();
        let mut out = vec![c(0.0, 0.0); 9];
        for i in 0..9 {
            for j in 0..9 {
                out[i] += m[[i, j]] * vx[j];
            }
        }
        let lx_flat: Vec<C64> = lx.iter().copied().collect();
        let err: f64 = out
            .iter()
            .zip(lx_flat.iter())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(err < 1e-12);
    }

    #[test]
    fn fixed_point_matches_dense_oracle() {
        for d in [2usize, 3, 4, 6] {
            let p = sample_state(d, 1000 + d as u64);
            let t = p.transfer();
            let tols = Tolerances::default();
            let fp = t.fixed_point(&tols).unwrap();
            let fd = t.fixed_point_dense().unwrap();
            assert!(
                fro_norm(&(fp.rho() - fd.rho())) < 1e-9,
                "d={d}: Krylov and dense fixed points differ by {}",
                fro_norm(&(fp.rho() - fd.rho()))
            );
            // Contracts: Hermitian, unit trace, PSD, small residual.
            assert!(fro_norm(&(fd.rho() - &dagger(fd.rho()))) < 1e-12);
            assert!((trace(fp.rho()).re - 1.0).abs() < 1e-12);
            assert!(trace(fp.rho()).im.abs() < 1e-13);
            assert!(fp.evals().iter().all(|&w| w >= 0.0));
            assert!(fp.residual <= 1e-10 * p.generator_scale().max(1.0));
        }
    }

    #[test]
    fn fixed_point_d1_is_trivial() {
        let p = sample_state(1, 3);
        let fp = p.transfer().fixed_point(&Tolerances::default()).unwrap();
        assert_eq!(fp.rho()[[0, 0]], c(1.0, 0.0));
    }

    #[test]
    fn degenerate_state_is_rejected() {
        // Block-diagonal K, R1, R2 => reducible transfer map => degenerate
        // fixed point.
        let k = array![[c(0.3, 0.0), c(0.0, 0.0)], [c(0.0, 0.0), c(-0.2, 0.0)]];
        let r1 = array![[c(0.5, 0.1), c(0.0, 0.0)], [c(0.0, 0.0), c(0.4, -0.3)]];
        let r2 = array![[c(0.1, 0.2), c(0.0, 0.0)], [c(0.0, 0.0), c(-0.3, 0.1)]];
        let p = RcmpsState::new(k, r1, r2).unwrap();
        let err = p.transfer().fixed_point(&Tolerances::default());
        assert!(
            matches!(err, Err(RcmpsError::NonInjectiveState { .. })),
            "expected NonInjectiveState, got {err:?}"
        );
    }

    #[test]
    fn right_pinv_inverts_on_the_range() {
        let p = sample_state(4, 77);
        let fp = p.transfer().fixed_point(&Tolerances::default()).unwrap();
        let m = sample_state(4, 13).r(1).clone();
        let mp = fp.right_pinv(&m, 1e-12);
        // (M rho^+) rho = M when rho is full rank.
        let back = mp.dot(fp.rho());
        assert!(
            fro_norm(&(&back - &m)) < 1e-8 * fro_norm(&m),
            "pinv defect {}",
            fro_norm(&(&back - &m))
        );
    }

    #[test]
    fn non_hermitian_k_is_rejected() {
        let k = array![[c(0.0, 0.0), c(1.0, 0.0)], [c(0.0, 0.0), c(0.0, 0.0)]];
        let r = zeros(2);
        assert!(matches!(
            RcmpsState::new(k, r.clone(), r),
            Err(RcmpsError::InvalidState(_))
        ));
    }

    #[test]
    fn parts_roundtrip_is_exact() {
        let p = sample_state(3, 2024);
        let parts = p.to_parts();
        let json = serde_json::to_string(&parts).unwrap();
        let parts2: StateParts = serde_json::from_str(&json).unwrap();
        let p2 = RcmpsState::from_parts(&parts2).unwrap();
        assert_eq!(max_abs(&(p.k() - p2.k())), 0.0);
        assert_eq!(max_abs(&(p.r(0) - p2.r(0))), 0.0);
        assert_eq!(max_abs(&(p.r(1) - p2.r(1))), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn prop_transfer_trace_free(seed in 0u64..1000, d in 2usize..5) {
            let p = sample_state(d, seed);
            let t = p.transfer();
            let x = sample_state(d, seed.wrapping_add(1)).k().clone();
            let lx = t.apply(&x);
            prop_assert!(trace(&lx).norm() < 1e-12 * fro_norm(&lx).max(1.0));
        }

        #[test]
        fn prop_fixed_point_contracts(seed in 0u64..500, d in 2usize..5) {
            let p = sample_state(d, seed);
            let t = p.transfer();
            if let Ok(fp) = t.fixed_point(&Tolerances::default()) {
                prop_assert!((trace(fp.rho()).re - 1.0).abs() < 1e-11);
                prop_assert!(fp.evals().iter().all(|&w| w >= 0.0));
                prop_assert!(fp.residual <= 1e-10 * p.generator_scale().max(1.0));
            }
        }
    }
}
