//! Geometry of the regular submanifold `[R_1, R_2] = 0`.
//!
//! The regularized energy density is finite only where the two field
//! matrices commute, so minimization runs on that constraint set: search
//! directions are projected onto its tangent space and steps are retracted
//! back onto it.
//!
//! **Tangent space.** Linearizing the constraint at a regular point gives
//! the map `L(W) = [W_1, R_2] + [R_1, W_2]`; tangent vectors are `ker L`
//! ([`tangent_constraint`] evaluates the defect). Normal directions are
//! generated by a multiplier matrix `Lambda` through
//!
//! ```text
//! delta(Lambda) = ( -[R_2^dag, Lambda] rho_0^+ ,  +[R_1^dag, Lambda] rho_0^+ ),
//! ```
//!
//! the unique family satisfying `Re tr[Lambda^dag L(W)] = g(delta(Lambda), W)`
//! for every direction `W`, so `image(delta)` is exactly the g-orthogonal
//! complement of `ker L`. Requiring `L(G - delta(Lambda)) = L(G) -
//! A(Lambda) = 0` yields the normal equations with
//! `A = L compose delta`. `A` is Hermitian positive semidefinite in the
//! Hilbert-Schmidt pairing — `<Lambda', A(Lambda)> = sum_j
//! tr[delta_j(Lambda')^dag delta_j(Lambda) rho_0]` — with kernel
//! `{Lambda : delta(Lambda) = 0}` (which contains `Lambda` proportional to
//! the identity). The kernel is harmless: it never moves `delta`, the
//! right-hand side `L(G)` lies in `range(A)`, restarted GMRES started from
//! zero stays there, and the projected gradient `G - delta(Lambda)` is
//! unique even though `Lambda` is not.
//!
//! Near a free-theory minimum the gradient is already tangent to within the
//! accuracy of the energy integrator, so `L(G)` is integration noise
//! (`~1e-7 ||G||`) whose kernel contamination GMRES cannot filter; the
//! matrix-free solve then stalls a factor above the contract. Stagnation
//! therefore falls back to a dense spectral solve of the same normal
//! equations (`D^2 x D^2` build plus one Hermitian eigensolve), which drops
//! the kernel components exactly; see [`project_tangent`] for the contract
//! both paths must meet.
//!
//! Sign audit (frozen): the right-hand side is `[G_1, R_2] + [R_1, G_2]`,
//! the same bracket pattern as the constraint itself. Flipping the first
//! commutator to `[R_2, G_1]` produces a "projection" that fails the
//! constraint outright; `projection_kills_constraint` below is the binding
//! check for this convention.
//!
//! **Retraction.** [`retract`] takes the linear step `R_j' = R_j + alpha
//! W_j` with the gauge compensation `K' = K + (i alpha / 2) sum_j
//! (W_j^dag R_j - R_j^dag W_j)` — the sign that induces `dQ = -sum_j
//! R_j^dag W_j`, matching the tangent convention frozen in the gradient
//! module — and then restores commutativity exactly: diagonalize
//! `R_1' = V diag(lambda) V^{-1}`, merge eigenvalues closer than
//! [`CLUSTER_TOL`]` * ||R_1'||` into clusters, and zero every entry of
//! `V^{-1} R_2' V` that couples distinct clusters. For tangent `W` the
//! commutator defect of the linear step is `alpha^2 [W_1, W_2]`, so the
//! repair changes `R_2'` only at second order and the retraction is rigid:
//! `Ret_p(0) = p` and `d/dalpha Ret_p(alpha W)|_0 = W`. When the repaired
//! pair still fails [`FEAS_TOL`] or the eigenbasis is too ill-conditioned,
//! fallbacks run in order: strict diagonal filtering, swapped field roles,
//! a tiny generic perturbation of `R_1'`, and finally
//! [`RcmpsError::RetractionFailed`].

use ndarray::Array2;

use crate::error::{RcmpsError, Result};
use crate::gradient::TangentVector;
use crate::krylov::{gmres, GmresOptions};
use crate::linalg::{
    commutator, dagger, eig, fro_norm, herm_part, identity, inv, mslice, zeros, C64, CMat,
};
use crate::state::{FixedPoint, RcmpsState};
use crate::Tolerances;

/// Relative eigenvalue-clustering threshold in the commutant projection:
/// eigenvalues of `R_1'` closer than this times `||R_1'||_F` count as one
/// degenerate cluster, and the full corresponding block of the rotated
/// `R_2'` is kept (any block-diagonal matrix commutes with the clustered
/// eigenprojectors). Chosen midway between roundoff and the smallest
/// spectral gaps optimization trajectories encounter in practice, so that
/// symmetry-degenerate iterates keep their block structure instead of being
/// forced diagonal.
pub const CLUSTER_TOL: f64 = 1e-8;

/// Commutator residual (absolute, Frobenius) the retracted point must
/// satisfy. Sits well below `reg_tol` so retracted iterates always pass the
/// regularity gate of the energy evaluation.
pub const FEAS_TOL: f64 = 1e-12;

/// Cap on the Frobenius condition estimate `||V|| ||V^{-1}||` of the
/// eigenvector similarity; above it the eigenbasis of `R_1'` is treated as
/// numerically defective and the fallback chain takes over.
const COND_MAX: f64 = 1e8;

/// Relative magnitude of the last-resort generic perturbation applied to
/// `R_1'` when both field orderings fail to produce a feasible repair.
const PERTURB_SCALE: f64 = 1e-10;

/// Floor of the projected-gradient constraint check: the projection must
/// deliver `||L(G_proj)|| <= max(PROJ_FLOOR, 10 * gmres_tol) * ||G||`.
const PROJ_FLOOR: f64 = 1e-10;

/// Linearized constraint `L(W) = [W_1, R_2] + [R_1, W_2]` at `p`.
///
/// Tangent vectors of the regular submanifold satisfy `L(W) = 0`; the
/// Frobenius norm of the returned matrix is the tangency defect used by
/// every post-condition in this module.
pub fn tangent_constraint(p: &RcmpsState, w: &TangentVector) -> CMat {
    assert_eq!(w.dim(), p.dim(), "tangent dimension must match the state");
    &commutator(&w.w1, p.r(1)) + &commutator(p.r(0), &w.w2)
}

/// Normal equations of the tangent projection at a fixed base point.
///
/// Bundles the pieces every operator application needs: the field matrices
/// and the spectral pseudo-inverse `rho_0^+`. The operator itself is
/// `A(Lambda) = L(delta(Lambda))`, applied matrix-free (two commutators and
/// one pseudo-inverse multiply per field), `O(D^3)` per application.
pub(crate) struct ProjectionProblem<'a> {
    r1: &'a CMat,
    r2: &'a CMat,
    /// `rho_0^+` at the caller's `pinv_tol`.
    rho_pinv: CMat,
}

impl<'a> ProjectionProblem<'a> {
    pub(crate) fn new(p: &'a RcmpsState, fp: &FixedPoint, pinv_tol: f64) -> Self {
        ProjectionProblem {
            r1: p.r(0),
            r2: p.r(1),
            rho_pinv: fp.right_pinv(&identity(p.dim()), pinv_tol),
        }
    }

    /// Normal direction generated by a multiplier:
    /// `delta(Lambda) = (-[R_2^dag, Lambda] rho_0^+, +[R_1^dag, Lambda] rho_0^+)`.
    ///
    /// `delta(Lambda + c I) = delta(Lambda)` identically — identity
    /// components of the multiplier are pure gauge.
    pub(crate) fn delta(&self, lam: &CMat) -> TangentVector {
        let w1 = commutator(&dagger(self.r2), lam)
            .dot(&self.rho_pinv)
            .mapv(|z| -z);
        let w2 = commutator(&dagger(self.r1), lam).dot(&self.rho_pinv);
        TangentVector { w1, w2 }
    }

    /// `A(Lambda) = L(delta(Lambda))`, Hermitian PSD in the HS pairing.
    pub(crate) fn apply(&self, lam: &CMat) -> CMat {
        let n = self.delta(lam);
        &commutator(&n.w1, self.r2) + &commutator(self.r1, &n.w2)
    }
}

/// g-orthogonal projection of `g` onto the tangent space at `p`.
///
/// Post-conditions (enforced, not merely hoped for): the constraint defect
/// of the result is at most `max(1e-10, 10 * gmres_tol) * ||G||_F`, and the
/// removed part `G - G_proj` is g-orthogonal to the tangent space by
/// construction. Projecting twice reproduces the first projection to solver
/// tolerance.
///
/// When `G` is already tangent to machine precision — in particular at
/// `R_1 = R_2 = 0`, where the constraint is vacuous — `G` is returned
/// unchanged without touching the transfer fixed point.
pub fn project_tangent(p: &RcmpsState, g: &TangentVector, tols: &Tolerances) -> Result<TangentVector> {
    tols.validate()?;
    if fro_norm(&tangent_constraint(p, g)) <= proj_limit(g, tols) {
        return Ok(g.clone());
    }
    let fp = p.transfer().fixed_point(tols)?;
    project_tangent_with(p, &fp, g, tols)
}

/// Constraint defect the projection contract allows on the result,
/// `max(PROJ_FLOOR, 10 * gmres_tol) * ||G||_F`. Inputs already inside the
/// limit are returned unchanged — they are valid projections of themselves,
/// and their defect is typically roundoff with no usable component in
/// `range(A)` for the solver to work with.
fn proj_limit(g: &TangentVector, tols: &Tolerances) -> f64 {
    PROJ_FLOOR.max(10.0 * tols.gmres_tol) * g.fro_norm()
}

/// [`project_tangent`] against a precomputed fixed point (the optimizer
/// already holds one per iterate).
pub(crate) fn project_tangent_with(
    p: &RcmpsState,
    fp: &FixedPoint,
    g: &TangentVector,
    tols: &Tolerances,
) -> Result<TangentVector> {
    let d = p.dim();
    let b = tangent_constraint(p, g);
    let limit = proj_limit(g, tols);
    if fro_norm(&b) <= limit {
        return Ok(g.clone());
    }
    let prob = ProjectionProblem::new(p, fp, tols.pinv_tol);
    let opts = GmresOptions::new(30, 500, tols.gmres_tol);
    let sol = gmres(
        |v, out| {
            let lam = to_mat(v, d);
            out.copy_from_slice(mslice(&prob.apply(&lam)));
        },
        mslice(&b),
        &opts,
    );
    let delta = prob.delta(&to_mat(&sol.x, d));
    let proj = TangentVector {
        w1: &g.w1 - &delta.w1,
        w2: &g.w2 - &delta.w2,
    };
    // The binding acceptance is the defect of the result on the gradient's
    // own scale, not the solver's relative residual: when b carries a
    // roundoff component outside range(A), GMRES reports stagnation even
    // though the projection it found is already within contract.
    let residual = fro_norm(&tangent_constraint(p, &proj));
    if residual <= limit {
        return Ok(proj);
    }
    // Dense fallback: solve the same normal equations spectrally, which
    // discards the out-of-range components of b instead of chasing them.
    log::debug!(
        "projection GMRES left defect {residual:.3e} (limit {limit:.3e}); dense fallback"
    );
    let delta = prob.delta(&dense_multiplier(&prob, &b, d)?);
    let proj = TangentVector {
        w1: &g.w1 - &delta.w1,
        w2: &g.w2 - &delta.w2,
    };
    let dense_residual = fro_norm(&tangent_constraint(p, &proj));
    if dense_residual <= limit {
        return Ok(proj);
    }
    if !sol.converged {
        return Err(RcmpsError::KrylovStagnation {
            context: "tangent projection",
            residual: sol.rel_residual,
            tol: tols.gmres_tol,
            iterations: sol.matvecs,
        });
    }
    Err(RcmpsError::NumericalIntegrity {
        context: "tangent projection",
        quantity: "constraint residual",
        value: dense_residual,
        limit,
    })
}

/// Rank cutoff of the dense normal-equation solve, relative to the largest
/// eigenvalue of `A`: components of `b` on eigenvalues below it are noise
/// outside the numerically meaningful range and are dropped.
const DENSE_RANK_TOL: f64 = 1e-12;

/// Minimum-norm multiplier of the normal equations `A(Lambda) = b` via a
/// dense Hermitian eigensolve with spectral cutoff.
fn dense_multiplier(prob: &ProjectionProblem, b: &CMat, d: usize) -> Result<CMat> {
    let n = d * d;
    let mut amat = Array2::<C64>::zeros((n, n));
    let mut e = zeros(d);
    for c in 0..n {
        e[[c / d, c % d]] = C64::new(1.0, 0.0);
        let col = prob.apply(&e);
        e[[c / d, c % d]] = C64::new(0.0, 0.0);
        for r in 0..n {
            amat[[r, c]] = col[[r / d, r % d]];
        }
    }
    // A is Hermitian PSD in exact arithmetic; symmetrize the roundoff.
    let (w, u) = crate::linalg::eigh(&herm_part(&amat), "dense projection eigensolve")?;
    let wmax = w.iter().cloned().fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    let bflat: Vec<C64> = (0..n).map(|i| b[[i / d, i % d]]).collect();
    let mut lam = vec![C64::new(0.0, 0.0); n];
    for k in 0..n {
        if w[k] <= DENSE_RANK_TOL * wmax {
            continue;
        }
        let mut c = C64::new(0.0, 0.0);
        for i in 0..n {
            c += u[[i, k]].conj() * bflat[i];
        }
        let c = c / w[k];
        for i in 0..n {
            lam[i] += c * u[[i, k]];
        }
    }
    Ok(to_mat(&lam, d))
}

/// Step along `W` by `alpha` and return to the regular submanifold.
///
/// `retract(p, W, 0)` returns `p` bitwise. For tangent `W` the commutant
/// repair moves `R_2'` by `O(alpha^2)`, so first-order information (energy
/// slope, gradient pairing) is preserved exactly. The returned state
/// satisfies `commutator_residual <= FEAS_TOL`; if no repair attempt
/// reaches that, the error carries the best residual achieved.
pub fn retract(p: &RcmpsState, w: &TangentVector, alpha: f64) -> Result<RcmpsState> {
    assert_eq!(w.dim(), p.dim(), "tangent dimension must match the state");
    assert!(alpha.is_finite(), "step size must be finite");
    if alpha == 0.0 {
        return Ok(p.clone());
    }
    let d = p.dim();
    let (kp, r1p, r2p) = linear_step(p, w, alpha);

    let mut best = fro_norm(&commutator(&r1p, &r2p));
    if best <= FEAS_TOL {
        // The linear step already commutes (D = 1, diagonal data, W = 0).
        return RcmpsState::new(kp, r1p, r2p);
    }
    // Primary: repair R_2' in the eigenbasis of R_1'; if the clustered
    // filter leaves a near-degenerate block infeasible, filter strictly
    // diagonally; then the same with the field roles swapped; finally split
    // a pathological spectrum with a tiny generic perturbation.
    for strict in [false, true] {
        if let Some(rt2) = attempt(&r1p, &r2p, strict, &mut best) {
            return RcmpsState::new(kp, r1p, rt2);
        }
    }
    for strict in [false, true] {
        if let Some(rt1) = attempt(&r2p, &r1p, strict, &mut best) {
            return RcmpsState::new(kp, rt1, r2p);
        }
    }
    let scale = PERTURB_SCALE * fro_norm(&r1p);
    let r1q = &r1p + &generic_direction(d).mapv(|z| z * scale);
    for strict in [false, true] {
        if let Some(rt2) = attempt(&r1q, &r2p, strict, &mut best) {
            return RcmpsState::new(kp, r1q, rt2);
        }
    }
    Err(RcmpsError::RetractionFailed {
        residual: best,
        tol: FEAS_TOL,
    })
}

/// Linear part of the retraction: `R_j' = R_j + alpha W_j` plus the gauge
/// compensation `K' = K + (i alpha / 2) sum_j (W_j^dag R_j - R_j^dag W_j)`,
/// symmetrized against roundoff. The `+` sign realizes `dQ = -sum_j R_j^dag
/// W_j`, the convention the gradient pairs against; flipping it would break
/// the finite-difference match along retraction curves.
fn linear_step(p: &RcmpsState, w: &TangentVector, alpha: f64) -> (CMat, CMat, CMat) {
    let r1p = p.r(0) + &w.w1.mapv(|z| z * alpha);
    let r2p = p.r(1) + &w.w2.mapv(|z| z * alpha);
    let half = C64::new(0.0, 0.5 * alpha);
    let mut kp = p.k().clone();
    for (rj, wj) in [(p.r(0), &w.w1), (p.r(1), &w.w2)] {
        let x = &dagger(wj).dot(rj) - &dagger(rj).dot(wj);
        kp = &kp + &x.mapv(|z| z * half);
    }
    (herm_part(&kp), r1p, r2p)
}

/// One repair attempt: make `other` commute with `base` by zeroing
/// cross-cluster (or, when `strict`, all off-diagonal) entries in `base`'s
/// eigenbasis. Returns the filtered matrix only when the pair reaches
/// [`FEAS_TOL`]; otherwise records the residual and lets the caller fall
/// through.
fn attempt(base: &CMat, other: &CMat, strict: bool, best: &mut f64) -> Option<CMat> {
    let filtered = commutant_filter(base, other, strict).ok()?;
    let res = fro_norm(&commutator(base, &filtered));
    if res <= FEAS_TOL {
        return Some(filtered);
    }
    if res < *best {
        *best = res;
    }
    None
}

/// Commutant projection of `other` against `base`: rotate into `base`'s
/// eigenbasis, keep only entries inside eigenvalue clusters (only the
/// diagonal when `strict`), rotate back. Errors when the eigenbasis is
/// numerically defective.
fn commutant_filter(base: &CMat, other: &CMat, strict: bool) -> Result<CMat> {
    let d = base.nrows();
    let (lam, v) = eig(base, "retraction eigenbasis")?;
    let vinv = inv(&v, "retraction eigenbasis")?;
    let cond = fro_norm(&v) * fro_norm(&vinv);
    if !cond.is_finite() || cond > COND_MAX {
        return Err(RcmpsError::NumericalIntegrity {
            context: "retraction eigenbasis",
            quantity: "condition estimate",
            value: cond,
            limit: COND_MAX,
        });
    }
    let ids = cluster_ids(lam.as_slice().expect("contiguous eigenvalues"), CLUSTER_TOL * fro_norm(base));
    let mut m = vinv.dot(other).dot(&v);
    for i in 0..d {
        for j in 0..d {
            let cut = if strict { i != j } else { ids[i] != ids[j] };
            if cut {
                m[[i, j]] = C64::new(0.0, 0.0);
            }
        }
    }
    Ok(v.dot(&m).dot(&vinv))
}

/// Connected components of the eigenvalue set under `|lam_i - lam_j| <=
/// tol`, by fixpoint merging (the set has at most D elements).
fn cluster_ids(lam: &[C64], tol: f64) -> Vec<usize> {
    let n = lam.len();
    let mut id: Vec<usize> = (0..n).collect();
    loop {
        let mut changed = false;
        for i in 0..n {
            for j in (i + 1)..n {
                if (lam[i] - lam[j]).norm() <= tol && id[i] != id[j] {
                    let (lo, hi) = (id[i].min(id[j]), id[i].max(id[j]));
                    for entry in id.iter_mut() {
                        if *entry == hi {
                            *entry = lo;
                        }
                    }
                    changed = true;
                }
            }
        }
        if !changed {
            return id;
        }
    }
}

/// Deterministic generic matrix of unit Frobenius norm, used to split a
/// pathological spectrum in the last-resort retry. Statistical quality is
/// irrelevant; genericity and reproducibility are the point.
fn generic_direction(d: usize) -> CMat {
    let mut s: u64 = 0x9e37_79b9_7f4a_7c15;
    let mut next = move || {
        s = s
            .wrapping_mul(6_364_136_223_846_793_005)
            .wrapping_add(1_442_695_040_888_963_407);
        (s >> 11) as f64 / 9_007_199_254_740_992.0 - 0.5
    };
    let mut e = zeros(d);
    for i in 0..d {
        for j in 0..d {
            e[[i, j]] = C64::new(next(), next());
        }
    }
    let n = fro_norm(&e);
    e.mapv(|z| z / n)
}

fn to_mat(v: &[C64], d: usize) -> CMat {
    Array2::from_shape_vec((d, d), v.to_vec()).expect("square block")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expectation::{energy_density, ModelParams};
    use crate::gradient::{gradient_report, metric};
    use crate::testutil::{regular_state, Stream};
    use ndarray_linalg::SVD;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn tight() -> Tolerances {
        Tolerances {
            ode_tol: 1e-11,
            ..Tolerances::default()
        }
    }

    fn random_direction(d: usize, seed: u64) -> TangentVector {
        let mut s = Stream::new(seed);
        TangentVector::new(s.matrix(d), s.matrix(d)).unwrap()
    }

    /// Dense g-orthogonal projector onto `ker L`, built without the
    /// multiplier formulation: rescale `u_j = W_j rho^{1/2}` so the metric
    /// becomes the plain HS inner product, assemble the dense constraint
    /// matrix in `u`-coordinates, remove its row-space component via SVD,
    /// and map back.
    fn dense_projection(p: &RcmpsState, fp: &FixedPoint, g: &TangentVector) -> TangentVector {
        let d = p.dim();
        let n = d * d;
        let (half, inv_half) = rho_half_pair(fp);
        let mut m = Array2::<C64>::zeros((n, 2 * n));
        for col in 0..2 * n {
            let idx = col % n;
            let mut e = zeros(d);
            e[[idx / d, idx % d]] = c(1.0, 0.0);
            let wj = e.dot(&inv_half);
            let lw = if col < n {
                commutator(&wj, p.r(1))
            } else {
                commutator(p.r(0), &wj)
            };
            for (row, val) in mslice(&lw).iter().enumerate() {
                m[[row, col]] = *val;
            }
        }
        let (_, s, vt) = m.svd(false, true).unwrap();
        let vt = vt.unwrap();
        let u1 = g.w1.dot(&half);
        let u2 = g.w2.dot(&half);
        let mut u: Vec<C64> = mslice(&u1)
            .iter()
            .chain(mslice(&u2).iter())
            .copied()
            .collect();
        // u -= sum over the row space: v_k (v_k^dag u) for sigma_k > cut.
        let cut = 1e-10 * s[0];
        for k in 0..s.len() {
            if s[k] <= cut {
                continue;
            }
            let coef: C64 = (0..2 * n).map(|i| vt[[k, i]] * u[i]).sum();
            for (i, entry) in u.iter_mut().enumerate() {
                *entry -= vt[[k, i]].conj() * coef;
            }
        }
        let w1 = to_mat(&u[..n], d).dot(&inv_half);
        let w2 = to_mat(&u[n..], d).dot(&inv_half);
        TangentVector { w1, w2 }
    }

    /// `rho^{1/2}` and its pseudo-inverse square root from the fixed-point
    /// eigendecomposition.
    fn rho_half_pair(fp: &FixedPoint) -> (CMat, CMat) {
        let u = fp.evecs();
        let d = u.nrows();
        let lmax = fp.evals().iter().cloned().fold(0.0, f64::max);
        let mut half = zeros(d);
        let mut ih = zeros(d);
        for (k, &lam) in fp.evals().iter().enumerate() {
            if lam <= 1e-12 * lmax {
                continue;
            }
            let (s, si) = (lam.sqrt(), 1.0 / lam.sqrt());
            for i in 0..d {
                for j in 0..d {
                    let outer = u[[i, k]] * u[[j, k]].conj();
                    half[[i, j]] += outer * s;
                    ih[[i, j]] += outer * si;
                }
            }
        }
        (half, ih)
    }

    #[test]
    fn constraint_linearity_and_zeros() {
        let p = regular_state(3, 11, 0.6);
        // Diagonal directions at a diagonal-R state commute to roundoff
        // (the BLAS complex product is not bitwise symmetric in its
        // operands, so exact zero is not guaranteed).
        let mut diag = TangentVector::zero(3);
        for i in 0..3 {
            diag.w1[[i, i]] = c(0.3 + i as f64, -0.2);
            diag.w2[[i, i]] = c(-0.1, 0.4 * i as f64);
        }
        assert!(fro_norm(&tangent_constraint(&p, &diag)) < 1e-15);
        // (R_1, R_2) itself is tangent: L = 2 [R_1, R_2] = 0 at a regular p.
        let radial = TangentVector::new(p.r(0).clone(), p.r(1).clone()).unwrap();
        assert!(fro_norm(&tangent_constraint(&p, &radial)) < 1e-14);
        // Additivity.
        let a = random_direction(3, 21);
        let b = random_direction(3, 22);
        let sum = TangentVector::new(&a.w1 + &b.w1, &a.w2 + &b.w2).unwrap();
        let lhs = tangent_constraint(&p, &sum);
        let rhs = &tangent_constraint(&p, &a) + &tangent_constraint(&p, &b);
        assert!(fro_norm(&(&lhs - &rhs)) < 1e-13);
    }

    #[test]
    fn multiplier_identity_component_is_gauge() {
        let tols = Tolerances::default();
        let p = regular_state(3, 31, 0.6);
        let fp = p.transfer().fixed_point(&tols).unwrap();
        let prob = ProjectionProblem::new(&p, &fp, tols.pinv_tol);
        let mut s = Stream::new(77);
        let lam = s.matrix(3);
        let shifted = &lam + &identity(3).mapv(|z| z * c(1.7, -0.4));
        let a = prob.delta(&lam);
        let b = prob.delta(&shifted);
        assert!(fro_norm(&(&a.w1 - &b.w1)) < 1e-13);
        assert!(fro_norm(&(&a.w2 - &b.w2)) < 1e-13);
        // And the identity alone generates no normal direction at all.
        let z = prob.delta(&identity(3));
        assert!(z.fro_norm() < 1e-14);
    }

    #[test]
    fn projection_kills_constraint() {
        let tols = Tolerances::default();
        for (d, seed) in [(2usize, 5u64), (3, 6), (4, 7)] {
            let p = regular_state(d, seed, 0.6);
            let g = random_direction(d, 100 + seed);
            let proj = project_tangent(&p, &g, &tols).unwrap();
            let defect = fro_norm(&tangent_constraint(&p, &proj));
            let limit = 1e-9 * g.fro_norm();
            assert!(
                defect <= limit,
                "D={d}: constraint defect {defect:.3e} above {limit:.3e}"
            );
        }
    }

    #[test]
    fn projection_is_orthogonal_and_idempotent() {
        let tols = Tolerances::default();
        let p = regular_state(3, 41, 0.6);
        let fp = p.transfer().fixed_point(&tols).unwrap();
        let g = random_direction(3, 42);
        let proj = project_tangent_with(&p, &fp, &g, &tols).unwrap();
        let removed = TangentVector::new(&g.w1 - &proj.w1, &g.w2 - &proj.w2).unwrap();
        let cross = metric(fp.rho(), &proj, &removed);
        let scale = metric(fp.rho(), &g, &g);
        assert!(
            cross.abs() <= 1e-9 * scale,
            "tangent/normal cross term {cross:.3e} vs scale {scale:.3e}"
        );
        let twice = project_tangent_with(&p, &fp, &proj, &tols).unwrap();
        let drift = (&twice.w1 - &proj.w1, &twice.w2 - &proj.w2);
        let drift = (fro_norm(&drift.0).powi(2) + fro_norm(&drift.1).powi(2)).sqrt();
        assert!(drift <= 1e-9, "projection not idempotent: drift {drift:.3e}");
    }

    #[test]
    fn projection_matches_dense_nullspace_oracle() {
        let tols = Tolerances::default();
        for (d, seed) in [(2usize, 51u64), (3, 52)] {
            let p = regular_state(d, seed, 0.6);
            let fp = p.transfer().fixed_point(&tols).unwrap();
            let g = random_direction(d, 200 + seed);
            let fast = project_tangent_with(&p, &fp, &g, &tols).unwrap();
            let dense = dense_projection(&p, &fp, &g);
            let err = (fro_norm(&(&fast.w1 - &dense.w1)).powi(2)
                + fro_norm(&(&fast.w2 - &dense.w2)).powi(2))
            .sqrt();
            assert!(
                err <= 1e-8 * g.fro_norm(),
                "D={d}: GMRES and dense projections differ by {err:.3e}"
            );
        }
    }

    #[test]
    fn projection_returns_tangent_input_unchanged() {
        let tols = Tolerances::default();
        // Exactly tangent input at a diagonal-R state: early return, bitwise.
        let p = regular_state(3, 61, 0.6);
        let mut diag = TangentVector::zero(3);
        for i in 0..3 {
            diag.w1[[i, i]] = c(0.2 * (i as f64 + 1.0), 0.7);
            diag.w2[[i, i]] = c(-0.5, 0.1 * i as f64);
        }
        let out = project_tangent(&p, &diag, &tols).unwrap();
        assert_eq!(fro_norm(&(&out.w1 - &diag.w1)), 0.0);
        assert_eq!(fro_norm(&(&out.w2 - &diag.w2)), 0.0);
        // Vacuum-sector state: the constraint is vacuous and the projection
        // must not touch the (non-injective) transfer fixed point.
        let mut s = Stream::new(62);
        let k = herm_part(&s.matrix(3));
        let vac = RcmpsState::new(k, zeros(3), zeros(3)).unwrap();
        let g = random_direction(3, 63);
        let out = project_tangent(&vac, &g, &tols).unwrap();
        assert_eq!(fro_norm(&(&out.w1 - &g.w1)), 0.0);
        assert_eq!(fro_norm(&(&out.w2 - &g.w2)), 0.0);
    }

    #[test]
    fn retract_at_zero_is_identity() {
        let p = regular_state(3, 71, 0.6);
        let w = random_direction(3, 72);
        let q = retract(&p, &w, 0.0).unwrap();
        assert_eq!(fro_norm(&(q.k() - p.k())), 0.0);
        assert_eq!(fro_norm(&(q.r(0) - p.r(0))), 0.0);
        assert_eq!(fro_norm(&(q.r(1) - p.r(1))), 0.0);
    }

    #[test]
    fn retract_exact_on_commuting_diagonal_data() {
        let p = regular_state(3, 81, 0.6);
        let mut w = TangentVector::zero(3);
        for i in 0..3 {
            w.w1[[i, i]] = c(0.4, -0.3 * i as f64);
            w.w2[[i, i]] = c(-0.2 * (i as f64 + 1.0), 0.5);
        }
        let alpha = 0.37;
        let q = retract(&p, &w, alpha).unwrap();
        let r2_lin = p.r(1) + &w.w2.mapv(|z| z * alpha);
        let drift = fro_norm(&(q.r(1) - &r2_lin));
        assert!(
            drift <= 1e-14 * (1.0 + fro_norm(&r2_lin)),
            "diagonal retraction altered R_2 by {drift:.3e}"
        );
        assert!(q.commutator_residual() <= FEAS_TOL);
    }

    #[test]
    fn retract_restores_feasibility() {
        let tols = Tolerances::default();
        for (d, seed) in [(3usize, 91u64), (4, 92)] {
            let p = regular_state(d, seed, 0.6);
            let g = random_direction(d, 300 + seed);
            let w = project_tangent(&p, &g, &tols).unwrap();
            let alpha = 0.3;
            let q = retract(&p, &w, alpha).unwrap();
            assert!(
                q.commutator_residual() <= FEAS_TOL,
                "D={d}: residual {:.3e}",
                q.commutator_residual()
            );
            // The repair stays subordinate to the step that caused it (its
            // alpha^2 scaling is pinned down separately by the slope test).
            let r2_lin = p.r(1) + &w.w2.mapv(|z| z * alpha);
            let moved = fro_norm(&(q.r(1) - &r2_lin));
            assert!(
                moved <= alpha * w.fro_norm(),
                "D={d}: commutant repair moved R_2 by {moved:.3e}"
            );
        }
    }

    #[test]
    fn retract_correction_is_second_order() {
        let tols = Tolerances::default();
        let p = regular_state(3, 101, 0.6);
        let g = random_direction(3, 102);
        let w = project_tangent(&p, &g, &tols).unwrap();
        let alphas = [1e-1, 1e-2, 1e-3, 1e-4];
        let mut pts = Vec::new();
        for &alpha in &alphas {
            let q = retract(&p, &w, alpha).unwrap();
            let r2_lin = p.r(1) + &w.w2.mapv(|z| z * alpha);
            let corr = fro_norm(&(q.r(1) - &r2_lin));
            assert!(corr > 0.0, "correction vanished at alpha = {alpha:.1e}");
            pts.push((alpha.ln(), corr.ln()));
        }
        // Least-squares slope in log-log coordinates.
        let n = pts.len() as f64;
        let (sx, sy): (f64, f64) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
        let (sxx, sxy): (f64, f64) = pts
            .iter()
            .fold((0.0, 0.0), |a, p| (a.0 + p.0 * p.0, a.1 + p.0 * p.1));
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        assert!(
            (slope - 2.0).abs() <= 0.1,
            "commutant correction scales as alpha^{slope:.3}, expected 2"
        );
    }

    #[test]
    fn retraction_curve_slope_matches_metric_pairing() {
        // End-to-end audit of the frozen sign conventions: the derivative
        // of the energy along a retraction curve must equal g(grad, W) for
        // tangent W. A flipped K-compensation sign would show up here as an
        // O(1) relative error.
        let tols = tight();
        let params = ModelParams::new(1.2, 0.0, 0.0).unwrap();
        let p = regular_state(2, 111, 0.5);
        let rep = gradient_report(&p, &params, &tols).unwrap();
        let fp = p.transfer().fixed_point(&tols).unwrap();
        let w = project_tangent_with(&p, &fp, &rep.gradient, &tols).unwrap();
        let eps = 1e-5;
        let h = |alpha: f64| {
            let q = retract(&p, &w, alpha).unwrap();
            energy_density(&q, &params, &tols).unwrap().h_reg
        };
        let fd = (h(eps) - h(-eps)) / (2.0 * eps);
        let pair = metric(fp.rho(), &rep.gradient, &w);
        assert!(
            (fd - pair).abs() <= 1e-5 * (1.0 + pair.abs()),
            "retraction slope {fd:.8e} vs metric pairing {pair:.8e}"
        );
    }

    #[test]
    fn cluster_filter_keeps_degenerate_blocks() {
        // Exactly degenerate pair: the 2x2 block must survive the filter,
        // cross-block noise must die.
        let mut base = zeros(3);
        base[[0, 0]] = c(0.7, 0.2);
        base[[1, 1]] = c(0.7, 0.2);
        base[[2, 2]] = c(-0.4, 0.9);
        let mut block = zeros(3);
        block[[0, 0]] = c(0.3, -0.1);
        block[[0, 1]] = c(0.8, 0.25);
        block[[1, 0]] = c(-0.6, 0.4);
        block[[1, 1]] = c(0.1, 0.7);
        block[[2, 2]] = c(-0.9, 0.05);
        let mut noisy = block.clone();
        noisy[[0, 2]] = c(1e-3, -2e-3);
        noisy[[2, 1]] = c(3e-3, 1e-3);
        let filtered = commutant_filter(&base, &noisy, false).unwrap();
        assert!(fro_norm(&(&filtered - &block)) <= 1e-12);
        assert!(fro_norm(&commutator(&base, &filtered)) <= FEAS_TOL);
        // Strict mode additionally kills the in-block off-diagonals.
        let strict = commutant_filter(&base, &noisy, true).unwrap();
        assert!(strict[[0, 1]].norm() == 0.0 && strict[[1, 0]].norm() == 0.0);
        assert!(fro_norm(&commutator(&base, &strict)) <= FEAS_TOL);
    }

    #[test]
    fn retract_falls_back_when_primary_field_is_defective() {
        // R_1 an exact Jordan block: its eigenbasis is numerically
        // defective, so the primary repair cannot run; the swapped-role
        // filter (against the scalar R_2) must take over.
        let mut r1 = zeros(2);
        r1[[0, 1]] = c(1.0, 0.0);
        let r2 = identity(2).mapv(|z| z * c(0.35, -0.15));
        let mut s = Stream::new(121);
        let k = herm_part(&s.matrix(2));
        let p = RcmpsState::new(k, r1.clone(), r2.clone()).unwrap();
        let q = retract(&p, &TangentVector::zero(2), 0.1).unwrap();
        assert!(q.commutator_residual() <= FEAS_TOL);
        assert!(fro_norm(&(q.r(0) - &r1)) <= 1e-14);
        assert!(fro_norm(&(q.r(1) - &r2)) <= 1e-14);
    }

    #[test]
    fn cluster_ids_merge_transitively() {
        // Chain 0 ~ 1 ~ 2 with |lam_0 - lam_2| > tol still forms one
        // cluster; the far eigenvalue stays separate.
        let lam = [c(0.0, 0.0), c(0.9, 0.0), c(1.8, 0.0), c(10.0, 0.0)];
        let ids = cluster_ids(&lam, 1.0);
        assert_eq!(ids[0], ids[1]);
        assert_eq!(ids[1], ids[2]);
        assert_ne!(ids[0], ids[3]);
    }
}
