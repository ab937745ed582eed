//! Matrix-free restarted GMRES on complex vectors.
//!
//! All iterative solves in the crate (transfer fixed point, tangent-space
//! projection, adjoint fixed-point solve) share this kernel. Problem sizes
//! are D^2 with D <= 10 or so; the solver is written for clarity and
//! robustness (modified Gram-Schmidt with one full reorthogonalization pass)
//! rather than large-scale performance.

use num_complex::Complex64 as C64;

use crate::linalg::{slice_dot, slice_norm};

/// Happy-breakdown threshold: the Arnoldi remainder is declared zero when
/// orthogonalization removes all but this fraction of `||A v_j||`. The
/// Krylov space is then A-invariant and already contains the least-squares
/// solution; normalizing the remainder instead would inject a roundoff
/// direction that breaks the Arnoldi relation and corrupts the
/// back-substitution (singular consistent systems — transfer fixed points,
/// tangent projections — hit this with a *small* true residual). A genuine
/// remainder after one reorthogonalization pass sits at worst a few orders
/// above machine epsilon; 1e-14 separates the two regimes.
const BREAKDOWN_RTOL: f64 = 1e-14;

#[derive(Debug, Clone)]
pub(crate) struct GmresOptions {
    /// Krylov dimension per restart cycle.
    pub restart: usize,
    /// Total matrix-vector product budget.
    pub max_matvecs: usize,
    /// Convergence threshold on ||b - Ax|| / ||b||.
    pub rel_tol: f64,
}

impl GmresOptions {
    pub(crate) fn new(restart: usize, max_matvecs: usize, rel_tol: f64) -> Self {
        GmresOptions {
            restart,
            max_matvecs,
            rel_tol,
        }
    }
}

#[derive(Debug)]
pub(crate) struct GmresSolution {
    pub x: Vec<C64>,
    /// True relative residual ||b - Ax|| / ||b||, recomputed at exit.
    pub rel_residual: f64,
    pub matvecs: usize,
    pub converged: bool,
}

/// Solve `A x = b` with zero initial guess. `apply` must compute `out = A v`.
pub(crate) fn gmres<F>(mut apply: F, b: &[C64], opts: &GmresOptions) -> GmresSolution
where
    F: FnMut(&[C64], &mut [C64]),
{
    let n = b.len();
    let zero = C64::new(0.0, 0.0);
    let bnorm = slice_norm(b);
    if bnorm == 0.0 {
        return GmresSolution {
            x: vec![zero; n],
            rel_residual: 0.0,
            matvecs: 0,
            converged: true,
        };
    }
    let tol_abs = opts.rel_tol * bnorm;
    let m = opts.restart.max(1).min(n.max(1));

    let mut x = vec![zero; n];
    let mut matvecs = 0usize;
    let mut work = vec![zero; n];

    // Outer restart loop.
    loop {
        // r = b - A x  (skip the product while x is still zero).
        let mut r = b.to_vec();
        if matvecs > 0 {
            apply(&x, &mut work);
            matvecs += 1;
            for (ri, wi) in r.iter_mut().zip(work.iter()) {
                *ri -= wi;
            }
        }
        let beta = slice_norm(&r);
        if beta <= tol_abs {
            return finish(apply, x, b, bnorm, opts.rel_tol, matvecs);
        }

        let mut basis: Vec<Vec<C64>> = Vec::with_capacity(m + 1);
        for ri in r.iter_mut() {
            *ri /= beta;
        }
        basis.push(r);

        // Hessenberg columns after Givens rotations, plus rotation history.
        let mut hcols: Vec<Vec<C64>> = Vec::with_capacity(m);
        let mut giv_c: Vec<f64> = Vec::with_capacity(m);
        let mut giv_s: Vec<C64> = Vec::with_capacity(m);
        let mut g = vec![zero; m + 1];
        g[0] = C64::new(beta, 0.0);

        let mut k_used = 0;
        let mut interior_converged = false;

        for j in 0..m {
            if matvecs >= opts.max_matvecs {
                break;
            }
            apply(&basis[j], &mut work);
            matvecs += 1;
            let wscale = slice_norm(&work);
            let mut h = vec![zero; j + 2];

            // Modified Gram-Schmidt with one reorthogonalization pass.
            for _pass in 0..2 {
                for (i, v) in basis.iter().enumerate().take(j + 1) {
                    let c = slice_dot(v, &work);
                    h[i] += c;
                    for (wk, vk) in work.iter_mut().zip(v.iter()) {
                        *wk -= c * vk;
                    }
                }
            }
            let hnext = slice_norm(&work);
            let breakdown = hnext <= BREAKDOWN_RTOL * wscale;
            h[j + 1] = if breakdown {
                zero
            } else {
                C64::new(hnext, 0.0)
            };

            // Apply accumulated rotations to the new column.
            for i in 0..j {
                let (hi, hi1) = (h[i], h[i + 1]);
                let c = giv_c[i];
                let s = giv_s[i];
                h[i] = c * hi + s * hi1;
                h[i + 1] = -s.conj() * hi + c * hi1;
            }

            // New rotation zeroing h[j+1].
            let (h1, h2) = (h[j], h[j + 1]);
            let t = (h1.norm_sqr() + h2.norm_sqr()).sqrt();
            let (c, s) = if t == 0.0 {
                (1.0, zero)
            } else if h1.norm() == 0.0 {
                (0.0, C64::new(1.0, 0.0))
            } else {
                let alpha = h1 / h1.norm();
                (h1.norm() / t, alpha * h2.conj() / t)
            };
            h[j] = if h1.norm() == 0.0 {
                h2
            } else {
                (h1 / h1.norm()) * t
            };
            h[j + 1] = zero;
            let gj = g[j];
            g[j] = c * gj;
            g[j + 1] = -s.conj() * gj;
            giv_c.push(c);
            giv_s.push(s);
            hcols.push(h);
            k_used = j + 1;

            let res_est = g[j + 1].norm();
            if res_est <= tol_abs || breakdown {
                interior_converged = true;
                break;
            }

            let mut v = work.clone();
            for vi in v.iter_mut() {
                *vi /= hnext;
            }
            basis.push(v);
        }

        if k_used > 0 {
            // Back-substitute the triangular system R y = g. A zero pivot
            // (the image of a basis vector vanished outright) contributes
            // nothing rather than an infinity.
            let mut y = vec![zero; k_used];
            for i in (0..k_used).rev() {
                let mut s = g[i];
                for (l, yl) in y.iter().enumerate().take(k_used).skip(i + 1) {
                    s -= hcols[l][i] * yl;
                }
                y[i] = if hcols[i][i].norm() == 0.0 {
                    zero
                } else {
                    s / hcols[i][i]
                };
            }
            for (i, yi) in y.iter().enumerate() {
                for (xk, vk) in x.iter_mut().zip(basis[i].iter()) {
                    *xk += yi * vk;
                }
            }
        }

        if interior_converged || matvecs >= opts.max_matvecs {
            return finish(apply, x, b, bnorm, opts.rel_tol, matvecs);
        }
    }
}

fn finish<F>(
    mut apply: F,
    x: Vec<C64>,
    b: &[C64],
    bnorm: f64,
    rel_tol: f64,
    mut matvecs: usize,
) -> GmresSolution
where
    F: FnMut(&[C64], &mut [C64]),
{
    // Trust the true residual, not the Givens estimate.
    let mut ax = vec![C64::new(0.0, 0.0); b.len()];
    apply(&x, &mut ax);
    matvecs += 1;
    let mut rr = 0.0f64;
    for (bi, axi) in b.iter().zip(ax.iter()) {
        rr += (bi - axi).norm_sqr();
    }
    let rel = rr.sqrt() / bnorm;
    GmresSolution {
        x,
        rel_residual: rel,
        matvecs,
        converged: rel <= rel_tol,
    }
}
