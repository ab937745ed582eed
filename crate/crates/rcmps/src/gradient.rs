//! Riemannian gradient of the regularized energy density.
//!
//! Strategy: **discrete adjoint**. The energy is assembled from quadrature
//! accumulators and final hierarchy traces produced by two explicit
//! Dormand-Prince runs (kinetic correlator, moment hierarchy). The gradient
//! differentiates exactly the arithmetic the forward pass performed — stage
//! by recorded stage — so primal and gradient agree to roundoff rather than
//! merely to the integration tolerance.
//!
//! Conventions fixed once here and relied on by every pullback below:
//!
//! * A perturbation `dv` pairs with a cotangent `c` as `dL = 2 Re tr[c^dag dv]`.
//!   Every accumulated cotangent (`G_Q`, `G_R_j`, `G_B_j`, `G_rho`, the
//!   returned partials `A_j`) uses this rule.
//! * Tangent directions move `(R_1, R_2)` by `(W_1, W_2)` with the left-gauge
//!   `K`-compensation `dK = (i/2) sum_j (W_j^dag R_j - R_j^dag W_j)`, which
//!   induces `dQ = -sum_j R_j^dag W_j`. Eliminating `Q` therefore folds the
//!   `Q`-cotangent into the partials as `A_j = G_R_j - R_j G_Q`.
//! * `rho_0` seeds both runs and depends on `(Q, R)` implicitly through
//!   `L(rho_0) = 0`, `tr rho_0 = 1`. One adjoint solve resolves the chain:
//!   find `nu` with `L^dag(nu) = G_rho - tr[rho_0 G_rho] I`. The right side
//!   is orthogonal to `ker L = span{rho_0}`, so the system is consistent, and
//!   the `I`-ambiguity of `nu` is harmless because `tr dL(rho_0) = 0`
//!   identically for the constrained family `Q = -iK - (1/2) sum R^dag R`.
//!   The solve runs through the same restarted GMRES as the fixed point, on
//!   the bordered operator `mu -> L^dag(mu) + tr(mu) rho_0`, which is
//!   nonsingular and lands on the traceless solution automatically. With
//!   `H = nu + nu^dag` the correction is `G_Q -= H rho_0`,
//!   `G_R_j -= H R_j rho_0`.
//!
//! The Riemannian gradient inverts the metric `g(Wt, W) =
//! Re tr[(Wt_1^dag W_1 + Wt_2^dag W_2) rho_0]`: `grad_j = 2 A_j rho_0^+`,
//! the factor 2 forced by duality with the pairing above,
//! `d/de h(p + e W)|_0 = 2 Re tr[A_j^dag W_j] = g(grad, W)`.

use std::sync::Arc;

use ndarray::{Array1, Array2};

use crate::error::{RcmpsError, Result};
use crate::expectation::{
    assemble_report, check_regular, div_coefficient, energy_orders, imag_check, vacuum_report,
    CorrelatorSystem, EnergyReport, HierarchySystem, ModelParams,
};
use crate::kernel::{bessel_k0, KernelTable};
use crate::krylov::{gmres, GmresOptions};
use crate::linalg::{
    axpy, axpy_dag, fro_norm, hs_inner, mslice, mul_acc, mul_acc_adag, mul_acc_bdag, slice_norm,
    solve, zeros, C64, CMat,
};
use crate::ode::{adjoint_sweep, integrate, OdeAdjoint, OdeOptions, OdeSystem, Trajectory};
use crate::state::{FixedPoint, RcmpsState, Transfer};
use crate::Tolerances;

/// Tangent direction `(W_1, W_2)` at a regular state.
///
/// The induced `Q`-variation `V = -sum_j R_j^dag W_j` (left gauge fixing) is
/// implicit — it is never stored. The base point itself is tracked by the
/// caller; a tangent vector is a plain coordinate pair and only its dimension
/// is checked at use sites.
#[derive(Debug, Clone)]
pub struct TangentVector {
    pub w1: CMat,
    pub w2: CMat,
}

impl TangentVector {
    /// Wrap two square matrices of equal dimension.
    pub fn new(w1: CMat, w2: CMat) -> Result<Self> {
        if w1.nrows() != w1.ncols() || w1.dim() != w2.dim() {
            return Err(RcmpsError::InvalidConfig(format!(
                "tangent components must be square and congruent, got {:?} and {:?}",
                w1.dim(),
                w2.dim()
            )));
        }
        Ok(TangentVector { w1, w2 })
    }

    /// Zero tangent vector at bond dimension `d`.
    pub fn zero(d: usize) -> Self {
        TangentVector {
            w1: zeros(d),
            w2: zeros(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.nrows()
    }

    /// Euclidean (unweighted Frobenius) norm of the pair.
    pub fn fro_norm(&self) -> f64 {
        fro_norm(&self.w1).hypot(fro_norm(&self.w2))
    }
}

/// The `rho_0`-weighted metric `g(Wa, Wb) = Re tr[(Wa_1^dag Wb_1 +
/// Wa_2^dag Wb_2) rho_0]`.
///
/// `rho` is the fixed-point density of the common base point (`I/D` works for
/// quick estimates). Symmetric, bilinear over the reals, positive
/// semidefinite; positive definite when `rho` is.
pub fn metric(rho: &CMat, wa: &TangentVector, wb: &TangentVector) -> f64 {
    assert_eq!(wa.dim(), wb.dim(), "tangent vectors from different points");
    assert_eq!(rho.nrows(), wa.dim(), "metric weight has wrong dimension");
    let s = hs_inner(&wa.w1, &wb.w1.dot(rho)) + hs_inner(&wa.w2, &wb.w2.dot(rho));
    s.re
}

/// Energy and its first-order data at one regular point, from a single
/// forward-plus-adjoint pass.
#[derive(Debug, Clone)]
pub struct GradientReport {
    /// Energy report read off the recorded forward pass (identical to
    /// [`crate::energy_density`] at the same point).
    pub energy: EnergyReport,
    /// Euclidean partials `A_j = dh/dWbar_j`: for any tangent `W`,
    /// `d/de h(p + eW)|_0 = 2 Re tr[A_1^dag W_1 + A_2^dag W_2]`.
    pub partials: TangentVector,
    /// Riemannian gradient `grad_j = 2 A_j rho_0^+`.
    pub gradient: TangentVector,
    /// `sqrt(g(grad, grad))` — the metric norm of the gradient.
    pub grad_norm: f64,
}

// ---------------------------------------------------------------------------
// Parameter cotangents.
// ---------------------------------------------------------------------------

/// Cotangent accumulator for everything the two ODE systems read: `Q`, the
/// `R_j`, the commutators `B_j = [Q, R_j]` (peeled into `Q`/`R` cotangents at
/// the end), and the shared initial condition `rho_0`.
pub(crate) struct ParamGrad {
    d: usize,
    g_q: Vec<C64>,
    g_r: [Vec<C64>; 2],
    g_b: [Vec<C64>; 2],
    g_rho: Vec<C64>,
}

impl ParamGrad {
    fn new(d: usize) -> Self {
        let z = vec![C64::new(0.0, 0.0); d * d];
        ParamGrad {
            d,
            g_q: z.clone(),
            g_r: [z.clone(), z.clone()],
            g_b: [z.clone(), z.clone()],
            g_rho: z,
        }
    }

    /// Fold the `B_j = [Q, R_j]` cotangents into `Q` and `R_j`:
    /// `G_Q += [G_B_j, R_j^dag]`, `G_R_j += [Q^dag, G_B_j]`.
    fn peel_b(&mut self, transfer: &Transfer) {
        let d = self.d;
        let one = C64::new(1.0, 0.0);
        let q = mslice(transfer.q());
        for j in 0..2 {
            let r = mslice(transfer.r(j));
            let gb = &self.g_b[j];
            mul_acc_bdag(&mut self.g_q, gb, r, d, one);
            mul_acc_adag(&mut self.g_q, r, gb, d, -one);
            mul_acc_adag(&mut self.g_r[j], q, gb, d, one);
            mul_acc_bdag(&mut self.g_r[j], gb, q, d, -one);
        }
    }
}

/// Parameter pullback of a term `lin * L(z)` against the stage cotangent
/// `kappa`: `G_Q += lin (kappa z^dag + kappa^dag z)` and, for each field,
/// `G_R_j += lin (kappa (R_j z^dag) + kappa^dag (R_j z))`.
fn lin_param_pull(
    transfer: &Transfer,
    kappa: &[C64],
    z: &[C64],
    lin: f64,
    grad: &mut ParamGrad,
    tmp: &mut [C64],
    tmp2: &mut [C64],
) {
    if lin == 0.0 {
        return;
    }
    let d = transfer.dim();
    let zero = C64::new(0.0, 0.0);
    let one = C64::new(1.0, 0.0);
    let w = C64::new(lin, 0.0);
    mul_acc_bdag(&mut grad.g_q, kappa, z, d, w);
    mul_acc_adag(&mut grad.g_q, kappa, z, d, w);
    for j in 0..2 {
        let r = mslice(transfer.r(j));
        tmp.fill(zero);
        tmp2.fill(zero);
        mul_acc_bdag(tmp, r, z, d, one); // R_j z^dag
        mul_acc(tmp2, r, z, d, one); // R_j z
        mul_acc(&mut grad.g_r[j], kappa, tmp, d, w);
        mul_acc_adag(&mut grad.g_r[j], kappa, tmp2, d, w);
    }
}

impl OdeAdjoint for HierarchySystem {
    type Grad = ParamGrad;

    fn vjp(
        &mut self,
        seg: usize,
        t: f64,
        z: &[C64],
        kappa: &[C64],
        phi: &mut [C64],
        grad: &mut ParamGrad,
    ) {
        let (lin, src) = self.weights(seg, t);
        let HierarchySystem {
            d,
            transfer,
            sources,
            tmp,
            tmp2,
            ..
        } = self;
        let d = *d;
        let dd = d * d;
        for (i, row) in sources.iter().enumerate() {
            let ki = &kappa[i * dd..(i + 1) * dd];
            let zi = &z[i * dd..(i + 1) * dd];
            // L-term: state pullback lin * L^dag(kappa_i), then parameters.
            transfer.apply_adjoint_acc_w(ki, &mut phi[i * dd..(i + 1) * dd], tmp, lin);
            lin_param_pull(transfer, ki, zi, lin, grad, tmp, tmp2);
            // Source couplings w (R_r z_s + z_s R_r^dag) feeding block i.
            for &(sb, jr, mult) in row {
                let w = C64::new(src * mult, 0.0);
                let zs = &z[sb * dd..(sb + 1) * dd];
                let r = mslice(transfer.r(jr));
                let ps = &mut phi[sb * dd..(sb + 1) * dd];
                mul_acc_adag(ps, r, ki, d, w); // R_r^dag kappa_i
                mul_acc(ps, ki, r, d, w); // kappa_i R_r
                mul_acc_bdag(&mut grad.g_r[jr], ki, zs, d, w); // kappa_i z_s^dag
                mul_acc_adag(&mut grad.g_r[jr], ki, zs, d, w); // kappa_i^dag z_s
            }
        }
    }
}

impl OdeAdjoint for CorrelatorSystem {
    type Grad = ParamGrad;

    fn vjp(
        &mut self,
        _seg: usize,
        s: f64,
        z: &[C64],
        kappa: &[C64],
        phi: &mut [C64],
        grad: &mut ParamGrad,
    ) {
        let CorrelatorSystem {
            d,
            transfer,
            b,
            kernel,
            tmp,
            tmp2,
            ..
        } = self;
        let d = *d;
        let dd = d * d;
        let w = bessel_k0(kernel.mass() * s) / (2.0 * std::f64::consts::PI);
        let probes: [&CMat; 4] = [transfer.r(0), &b[0], transfer.r(1), &b[1]];
        for k in 0..4 {
            let zk = &z[k * dd..(k + 1) * dd];
            let kk = &kappa[k * dd..(k + 1) * dd];
            // Block evolution dX_k = L X_k.
            transfer.apply_adjoint_acc_w(kk, &mut phi[k * dd..(k + 1) * dd], tmp, 1.0);
            lin_param_pull(transfer, kk, zk, 1.0, grad, tmp, tmp2);
            // Accumulator row da_k = w tr[M_k X_k].
            let ka = w * kappa[4 * dd + k];
            if ka != C64::new(0.0, 0.0) {
                axpy_dag(&mut phi[k * dd..(k + 1) * dd], mslice(probes[k]), d, ka);
                let gm = match k {
                    0 => &mut grad.g_r[0],
                    1 => &mut grad.g_b[0],
                    2 => &mut grad.g_r[1],
                    _ => &mut grad.g_b[1],
                };
                axpy_dag(gm, zk, d, ka);
            }
        }
    }
}

/// Pull the correlator's initial state at `s_0` back onto the parameters.
///
/// Mirrors [`CorrelatorSystem::initial`] exactly: per block `k` with probe
/// `M_k` and seed `Z_k = rho_0 M_k^dag`,
/// `X_k(s_0) = Z_k + s_0 L(Z_k)` and `a_k(s_0) = I_0 tr[M_k Z_k]` with
/// `I_0 = int_0^{s_0} (J*J)`.
fn correlator_ic_pull(sys: &mut CorrelatorSystem, rho: &CMat, lam0: &[C64], grad: &mut ParamGrad) {
    let CorrelatorSystem {
        d,
        transfer,
        b,
        kernel,
        s0,
        tmp,
        tmp2,
    } = sys;
    let d = *d;
    let dd = d * d;
    let zero = C64::new(0.0, 0.0);
    let one = C64::new(1.0, 0.0);
    let strip = kernel.jj_integral_small(*s0);
    let rs = mslice(rho);
    let probes: [&CMat; 4] = [transfer.r(0), &b[0], transfer.r(1), &b[1]];
    let mut z = vec![zero; dd];
    let mut lam_z = vec![zero; dd];
    for k in 0..4 {
        let m = mslice(probes[k]);
        z.fill(zero);
        mul_acc_bdag(&mut z, rs, m, d, one); // Z_k = rho_0 M_k^dag
        let lam_x = &lam0[k * dd..(k + 1) * dd];
        let lam_a = strip * lam0[4 * dd + k];

        // Euler push X = Z + s_0 L(Z): parameter pull at weight s_0 and
        // lam_Z = lam_X + s_0 L^dag(lam_X).
        lin_param_pull(transfer, lam_x, &z, *s0, grad, tmp, tmp2);
        lam_z.copy_from_slice(lam_x);
        transfer.apply_adjoint_acc_w(lam_x, &mut lam_z, tmp, *s0);

        // Analytic strip a(s_0) = I_0 tr[M Z]:
        // lam_Z += I_0 lam_a M^dag, G_M += I_0 lam_a Z^dag.
        axpy_dag(&mut lam_z, m, d, lam_a);

        // Seed Z = rho_0 M^dag: G_rho += lam_Z M, G_M += lam_Z^dag rho_0.
        mul_acc(&mut grad.g_rho, &lam_z, m, d, one);
        let gm = match k {
            0 => &mut grad.g_r[0],
            1 => &mut grad.g_b[0],
            2 => &mut grad.g_r[1],
            _ => &mut grad.g_b[1],
        };
        axpy_dag(gm, &z, d, lam_a);
        mul_acc_adag(gm, &lam_z, rs, d, one);
    }
}

/// Resolve the implicit dependence of `rho_0` on the parameters: solve the
/// bordered adjoint system `L^dag(nu) + tr(nu) rho_0 = G_rho - tr[rho_0
/// G_rho] I` and fold `H = nu + nu^dag` into the `Q`/`R` cotangents.
fn rho_chain(
    transfer: &Transfer,
    rho: &CMat,
    grad: &mut ParamGrad,
    tols: &Tolerances,
) -> Result<()> {
    let d = transfer.dim();
    let n = d * d;
    let zero = C64::new(0.0, 0.0);
    let one = C64::new(1.0, 0.0);
    let rs = mslice(rho);

    // Right side, projected orthogonal to ker L = span{rho_0}.
    let mut beff = grad.g_rho.clone();
    let c = crate::linalg::trace_mul(rs, &beff, d);
    for i in 0..d {
        beff[i * d + i] -= c;
    }
    if slice_norm(&beff) == 0.0 {
        return Ok(());
    }

    let mut tmp = vec![zero; n];
    let apply = |v: &[C64], out: &mut [C64]| {
        out.fill(zero);
        transfer.apply_adjoint_acc(v, out, &mut tmp);
        let tr: C64 = (0..d).map(|i| v[i * d + i]).sum();
        axpy(out, rs, tr);
    };
    let opts = GmresOptions::new(n.min(150), 40 * n.max(30), tols.fp_tol);
    let sol = gmres(apply, &beff, &opts);

    let mut nu = if sol.converged {
        sol.x
    } else if d <= 8 {
        log::debug!(
            "rho-adjoint GMRES stalled at {:.3e}; dense fallback",
            sol.rel_residual
        );
        // Dense bordered operator: adjoint of the vectorized transfer map is
        // its conjugate transpose, plus the rank-one trace border.
        let m = transfer.dense_matrix();
        let op = Array2::from_shape_fn((n, n), |(a, bcol)| {
            let border = if bcol % d == bcol / d { rs[a] } else { zero };
            m[[bcol, a]].conj() + border
        });
        let x = solve(&op, &Array1::from(beff.clone()), "rho-adjoint solve")?;
        x.to_vec()
    } else {
        return Err(RcmpsError::KrylovStagnation {
            context: "rho-adjoint solve",
            residual: sol.rel_residual,
            tol: tols.fp_tol,
            iterations: sol.matvecs,
        });
    };

    // The bordered solution is traceless up to solver error; re-center so
    // the I-component cannot leak into the correction.
    let tr: C64 = (0..d).map(|i| nu[i * d + i]).sum();
    let shift = tr / d as f64;
    for i in 0..d {
        nu[i * d + i] -= shift;
    }

    // H = nu + nu^dag; G_Q -= H rho_0; G_R_j -= H R_j rho_0.
    let mut h = nu.clone();
    axpy_dag(&mut h, &nu, d, one);
    mul_acc(&mut grad.g_q, &h, rs, d, -one);
    let mut rrho = vec![zero; n];
    for j in 0..2 {
        rrho.fill(zero);
        mul_acc(&mut rrho, mslice(transfer.r(j)), rs, d, one);
        mul_acc(&mut grad.g_r[j], &h, &rrho, d, -one);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Pipeline.
// ---------------------------------------------------------------------------

fn to_mat(v: &[C64], d: usize) -> CMat {
    Array2::from_shape_vec((d, d), v.to_vec()).expect("square block")
}

/// Full gradient pass against a precomputed kernel and fixed point.
pub(crate) fn gradient_with(
    p: &RcmpsState,
    params: &ModelParams,
    kernel: &Arc<KernelTable>,
    fp: &FixedPoint,
    tols: &Tolerances,
) -> Result<GradientReport> {
    let rho = fp.rho();
    let commutator_residual = check_regular(p, rho, tols)?;
    let h_div_coefficient = div_coefficient(p, rho);
    let d = p.dim();
    let dd = d * d;
    let zero = C64::new(0.0, 0.0);
    let mut grad = ParamGrad::new(d);

    // Kinetic/mass correlator: forward with recording, read the free parts,
    // then sweep the accumulator seeds (2m^2, 2) back to the start.
    let mut csys = CorrelatorSystem::new(p, kernel.clone());
    let y0 = csys.initial(rho);
    let segs = csys.segments();
    let opts = OdeOptions::new(tols.ode_tol, tols.ode_atol(), "kinetic correlator");
    let mut ctraj = Trajectory::default();
    let y_end = integrate(&mut csys, &segs, y0, &opts, Some(&mut ctraj))?;
    let free = csys.read(&y_end);

    let m2 = C64::new(2.0 * params.m * params.m, 0.0);
    let two = C64::new(2.0, 0.0);
    let mut lam = vec![zero; csys.dim()];
    lam[4 * dd] = m2;
    lam[4 * dd + 1] = two;
    lam[4 * dd + 2] = m2;
    lam[4 * dd + 3] = two;
    let lam0 = adjoint_sweep(&mut csys, &ctraj, lam, &mut grad);
    correlator_ic_pull(&mut csys, rho, &lam0, &mut grad);

    // Moment hierarchy (only when the potential is active): forward with
    // recording, seed (g/2) I on the quartic diagonal blocks and lambda I on
    // the cross block, sweep, and pull the rho_0 initial condition.
    let mut imag = 0.0f64;
    let quartic = if params.g == 0.0 && params.lambda == 0.0 {
        (0.0, 0.0, 0.0)
    } else {
        let mut hsys = HierarchySystem::new(p, kernel.clone(), energy_orders());
        let y0 = hsys.initial(rho);
        let segs = hsys.segments();
        let opts = OdeOptions::new(tols.ode_tol, tols.ode_atol(), "moment hierarchy");
        let mut htraj = Trajectory::default();
        let y_end = integrate(&mut hsys, &segs, y0, &opts, Some(&mut htraj))?;

        let pos = |a: usize, b: usize| {
            hsys.orders
                .iter()
                .position(|&o| o == (a, b))
                .expect("energy orders present")
        };
        let (i40, i04, i22, i00) = (pos(4, 0), pos(0, 4), pos(2, 2), pos(0, 0));
        let mut read = |i: usize| -> Result<f64> {
            let t: C64 = (0..d).map(|r| y_end[i * dd + r * d + r]).sum();
            imag = imag.max(imag_check("moment hierarchy", t, tols)?);
            Ok(t.re)
        };
        let quartic = (read(i40)?, read(i04)?, read(i22)?);

        let mut lam = vec![zero; hsys.dim()];
        for (i, w) in [
            (i40, 0.5 * params.g),
            (i04, 0.5 * params.g),
            (i22, params.lambda),
        ] {
            for r in 0..d {
                lam[i * dd + r * d + r] = C64::new(w, 0.0);
            }
        }
        let lam0 = adjoint_sweep(&mut hsys, &htraj, lam, &mut grad);
        // Initial condition rho^(0,0)(-x_tail) = rho_0; other blocks start
        // at zero and carry no parameter dependence.
        axpy(
            &mut grad.g_rho,
            &lam0[i00 * dd..(i00 + 1) * dd],
            C64::new(1.0, 0.0),
        );
        quartic
    };

    // Fold B_j = [Q, R_j] cotangents, then the implicit rho_0 chain, then
    // eliminate Q along the gauge-fixed directions.
    let transfer = p.transfer();
    grad.peel_b(&transfer);
    rho_chain(&transfer, rho, &mut grad, tols)?;

    let mut partials = TangentVector::zero(d);
    for j in 0..2 {
        let mut a = grad.g_r[j].clone();
        mul_acc(&mut a, mslice(p.r(j)), &grad.g_q, d, -C64::new(1.0, 0.0));
        let a = to_mat(&a, d);
        if j == 0 {
            partials.w1 = a;
        } else {
            partials.w2 = a;
        }
    }

    let mut g1 = fp.right_pinv(&partials.w1, tols.pinv_tol);
    let mut g2 = fp.right_pinv(&partials.w2, tols.pinv_tol);
    g1.mapv_inplace(|z| 2.0 * z);
    g2.mapv_inplace(|z| 2.0 * z);
    let gradient = TangentVector { w1: g1, w2: g2 };
    let grad_norm = metric(rho, &gradient, &gradient).max(0.0).sqrt();

    Ok(GradientReport {
        energy: assemble_report(
            params,
            &free,
            quartic,
            h_div_coefficient,
            commutator_residual,
            imag,
        ),
        partials,
        gradient,
        grad_norm,
    })
}

/// Energy, Euclidean partials, Riemannian gradient, and gradient norm at a
/// regular point, from one forward-plus-adjoint pass.
pub fn gradient_report(
    p: &RcmpsState,
    params: &ModelParams,
    tols: &Tolerances,
) -> Result<GradientReport> {
    params.validate()?;
    tols.validate()?;
    let d = p.dim();
    if fro_norm(p.r(0)) == 0.0 && fro_norm(p.r(1)) == 0.0 {
        // Fock vacuum: h = 0 exactly and the vacuum minimizes the free
        // theory, so both partials vanish identically.
        return Ok(GradientReport {
            energy: vacuum_report(),
            partials: TangentVector::zero(d),
            gradient: TangentVector::zero(d),
            grad_norm: 0.0,
        });
    }
    let kernel = KernelTable::shared(params.m, tols)?;
    let fp = p.transfer().fixed_point(tols)?;
    gradient_with(p, params, &kernel, &fp, tols)
}

/// Euclidean partials `A_j = dh/dWbar_j` of the energy density: for any
/// tangent `W`, `d/de h(p + eW)|_0 = 2 Re tr[A_1^dag W_1 + A_2^dag W_2]`
/// (with the gauge-fixed `K`-compensation implied in `p + eW`).
pub fn euclidean_partials(
    p: &RcmpsState,
    params: &ModelParams,
    tols: &Tolerances,
) -> Result<TangentVector> {
    Ok(gradient_report(p, params, tols)?.partials)
}

/// Riemannian gradient `grad_j = 2 A_j rho_0^+` of the energy density:
/// `g_p(grad, W)` equals the directional derivative along any tangent `W`.
pub fn riemannian_gradient(
    p: &RcmpsState,
    params: &ModelParams,
    tols: &Tolerances,
) -> Result<TangentVector> {
    Ok(gradient_report(p, params, tols)?.gradient)
}
