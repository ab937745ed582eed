//! Adaptive Dormand-Prince 5(4) integration with a discrete adjoint.
//!
//! The expectation-value engine integrates linear matrix ODEs whose right-hand
//! sides change form across segment boundaries (plain-x segments vs. the
//! substitution segments around kernel kinks). The integrator therefore works
//! on an explicit segment list and records every accepted step, so that the
//! gradient engine can run the exact discrete adjoint of the realized step
//! sequence: the reverse sweep revisits each accepted step, reconstructs its
//! stages, and pulls cotangents back through the same arithmetic the forward
//! pass used. Gradients produced this way are consistent with the computed
//! (not the exact) energy down to roundoff, which is what line searches and
//! finite-difference tests actually probe.
//!
//! Conventions:
//! - `rhs` accumulates into a pre-zeroed buffer (matches the matrix kernels).
//! - states are flat `&[C64]` blocks; callers define the layout.
//! - integration always runs in the direction of increasing `x` within each
//!   segment; segments are traversed in list order.

use num_complex::Complex64 as C64;

use crate::error::{RcmpsError, Result};

/// Right-hand side of a segmented linear ODE.
pub(crate) trait OdeSystem {
    /// Number of complex components of the state.
    fn dim(&self) -> usize;
    /// Accumulate `dy += f(seg, x, y)`. `dy` arrives zeroed.
    fn rhs(&mut self, seg: usize, x: f64, y: &[C64], dy: &mut [C64]);
}

/// Reverse-mode hooks for [`OdeSystem`].
pub(crate) trait OdeAdjoint: OdeSystem {
    /// Parameter-cotangent accumulator type.
    type Grad;

    /// Given a stage evaluation at `(seg, x, z)` with stage cotangent
    /// `kappa`, accumulate the state pullback `phi += (df/dy)^dag kappa`
    /// and the parameter pullback `grad += (df/dtheta)^dag kappa`.
    ///
    /// The cotangent convention throughout the crate pairs a perturbation
    /// `dv` with a cotangent `c` as `2 Re <c, dv>`; rhs linearity makes the
    /// same rule work for every block.
    fn vjp(
        &mut self,
        seg: usize,
        x: f64,
        z: &[C64],
        kappa: &[C64],
        phi: &mut [C64],
        grad: &mut Self::Grad,
    );
}

/// One integration segment: RHS selector plus half-open span `[x0, x1]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Segment {
    pub seg: usize,
    pub x0: f64,
    pub x1: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Total accepted+rejected step budget for one integrate() call.
    pub max_steps: usize,
    pub context: &'static str,
}

impl OdeOptions {
    pub(crate) fn new(rtol: f64, atol: f64, context: &'static str) -> Self {
        OdeOptions {
            rtol,
            atol,
            max_steps: 4_000_000,
            context,
        }
    }
}

/// Accepted step: state at the step start plus the step taken from there.
#[derive(Debug, Clone)]
pub(crate) struct StepRec {
    pub seg: usize,
    pub x: f64,
    pub h: f64,
    pub y: Vec<C64>,
}

/// Record of all accepted steps of one forward integration.
#[derive(Debug, Default)]
pub(crate) struct Trajectory {
    pub steps: Vec<StepRec>,
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A2: [f64; 1] = [1.0 / 5.0];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [
    19372.0 / 6561.0,
    -25360.0 / 2187.0,
    64448.0 / 6561.0,
    -212.0 / 729.0,
];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
/// Fifth-order weights (also the a7 row: first-same-as-last).
const B: [f64; 6] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
];
/// Error weights b - b* (embedded fourth order), including the k7 term.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

fn a_row(i: usize) -> &'static [f64] {
    match i {
        1 => &A2,
        2 => &A3,
        3 => &A4,
        4 => &A5,
        5 => &A6,
        6 => &B,
        _ => unreachable!(),
    }
}

struct Workspace {
    k: [Vec<C64>; 7],
    z: Vec<C64>,
    ynew: Vec<C64>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        let zero = C64::new(0.0, 0.0);
        Workspace {
            k: std::array::from_fn(|_| vec![zero; n]),
            z: vec![zero; n],
            ynew: vec![zero; n],
        }
    }
}

fn zero_fill(v: &mut [C64]) {
    for z in v.iter_mut() {
        *z = C64::new(0.0, 0.0);
    }
}

/// Weighted RMS error norm; `<= 1` means the step is accepted.
fn error_norm(err: &[C64], y0: &[C64], y1: &[C64], atol: f64, rtol: f64) -> f64 {
    let n = err.len().max(1);
    let mut acc = 0.0f64;
    for i in 0..err.len() {
        let sc = atol + rtol * y0[i].norm().max(y1[i].norm());
        let q = err[i].norm() / sc;
        acc += q * q;
    }
    (acc / n as f64).sqrt()
}

/// Integrate over `segments`, starting from `y0`, optionally recording the
/// accepted steps for a later adjoint sweep. Returns the final state.
pub(crate) fn integrate<S: OdeSystem>(
    sys: &mut S,
    segments: &[Segment],
    y0: Vec<C64>,
    opts: &OdeOptions,
    mut record: Option<&mut Trajectory>,
) -> Result<Vec<C64>> {
    let n = sys.dim();
    debug_assert_eq!(y0.len(), n);
    let mut y = y0;
    let mut ws = Workspace::new(n);
    let mut steps_used = 0usize;

    for segdef in segments {
        let span = segdef.x1 - segdef.x0;
        if span <= 0.0 {
            continue;
        }
        let mut x = segdef.x0;
        let mut h = span * 1e-3;
        let h_floor = span * 1e-14;
        // Fresh k1 at the segment head (the RHS may change across segments).
        zero_fill(&mut ws.k[0]);
        sys.rhs(segdef.seg, x, &y, &mut ws.k[0]);

        while x < segdef.x1 - 1e-14 * span {
            if steps_used >= opts.max_steps {
                return Err(RcmpsError::OdeStepFailure {
                    context: opts.context,
                    h,
                    x,
                    limit: h_floor,
                });
            }
            steps_used += 1;
            h = h.min(segdef.x1 - x);

            // Stages 2..=6.
            for i in 1..6 {
                let arow = a_row(i);
                ws.z.copy_from_slice(&y);
                for (j, aij) in arow.iter().enumerate() {
                    if *aij != 0.0 {
                        let w = C64::new(h * aij, 0.0);
                        for (zk, kk) in ws.z.iter_mut().zip(ws.k[j].iter()) {
                            *zk += w * kk;
                        }
                    }
                }
                zero_fill(&mut ws.k[i]);
                sys.rhs(segdef.seg, x + C[i] * h, &ws.z, &mut ws.k[i]);
            }

            // Fifth-order solution (b row), then k7 at (x+h, ynew) for the
            // error estimate; k7 doubles as the next step's k1 (FSAL).
            ws.ynew.copy_from_slice(&y);
            for (j, bj) in B.iter().enumerate() {
                if *bj != 0.0 {
                    let w = C64::new(h * bj, 0.0);
                    for (yk, kk) in ws.ynew.iter_mut().zip(ws.k[j].iter()) {
                        *yk += w * kk;
                    }
                }
            }
            zero_fill(&mut ws.k[6]);
            sys.rhs(segdef.seg, x + h, &ws.ynew, &mut ws.k[6]);

            // err = h * sum_i e_i k_i
            ws.z.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
            for (j, ej) in E.iter().enumerate() {
                if *ej != 0.0 {
                    let w = C64::new(h * ej, 0.0);
                    for (zk, kk) in ws.z.iter_mut().zip(ws.k[j].iter()) {
                        *zk += w * kk;
                    }
                }
            }
            let err = error_norm(&ws.z, &y, &ws.ynew, opts.atol, opts.rtol);

            if err <= 1.0 {
                if let Some(tr) = record.as_deref_mut() {
                    tr.steps.push(StepRec {
                        seg: segdef.seg,
                        x,
                        h,
                        y: y.clone(),
                    });
                }
                x += h;
                std::mem::swap(&mut y, &mut ws.ynew);
                ws.k.swap(0, 6); // FSAL
                let fac = (0.9 * err.powf(-0.2)).clamp(0.2, 5.0);
                h *= fac;
            } else {
                let fac = (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
                h *= fac;
                if h < h_floor {
                    return Err(RcmpsError::OdeStepFailure {
                        context: opts.context,
                        h,
                        x,
                        limit: h_floor,
                    });
                }
            }
        }
    }
    Ok(y)
}

/// Reverse sweep over a recorded trajectory.
///
/// `lambda` enters as the cotangent of the final state and leaves as the
/// cotangent of the initial state; parameter cotangents accumulate in `grad`.
pub(crate) fn adjoint_sweep<S: OdeAdjoint>(
    sys: &mut S,
    traj: &Trajectory,
    mut lambda: Vec<C64>,
    grad: &mut S::Grad,
) -> Vec<C64> {
    let n = sys.dim();
    debug_assert_eq!(lambda.len(), n);
    let zero = C64::new(0.0, 0.0);
    let mut k: [Vec<C64>; 6] = std::array::from_fn(|_| vec![zero; n]);
    let mut zs: [Vec<C64>; 6] = std::array::from_fn(|_| vec![zero; n]);
    let mut phi: [Vec<C64>; 6] = std::array::from_fn(|_| vec![zero; n]);
    let mut kappa = vec![zero; n];

    for step in traj.steps.iter().rev() {
        let (x, h, y) = (step.x, step.h, &step.y);

        // Reconstruct stage points and values (k7 never feeds the update).
        zero_fill(&mut k[0]);
        sys.rhs(step.seg, x, y, &mut k[0]);
        zs[0].copy_from_slice(y);
        for i in 1..6 {
            let arow = a_row(i);
            zs[i].copy_from_slice(y);
            for (j, aij) in arow.iter().enumerate() {
                if *aij != 0.0 {
                    let w = C64::new(h * aij, 0.0);
                    let (kj, zi) = (&k[j], &mut zs[i]);
                    for (zk, kk) in zi.iter_mut().zip(kj.iter()) {
                        *zk += w * kk;
                    }
                }
            }
            zero_fill(&mut k[i]);
            sys.rhs(step.seg, x + C[i] * h, &zs[i], &mut k[i]);
        }

        // Reverse stage recursion: kappa_i = h (b_i lambda + sum_{j>i} a_ji phi_j).
        for i in (0..6).rev() {
            for (t, kt) in kappa.iter_mut().enumerate() {
                *kt = C64::new(h * B[i], 0.0) * lambda[t];
            }
            for j in (i + 1)..6 {
                let aji = a_row(j)[i];
                if aji != 0.0 {
                    let w = C64::new(h * aji, 0.0);
                    for (kt, pj) in kappa.iter_mut().zip(phi[j].iter()) {
                        *kt += w * pj;
                    }
                }
            }
            zero_fill(&mut phi[i]);
            sys.vjp(step.seg, x + C[i] * h, &zs[i], &kappa, &mut phi[i], grad);
        }

        // lambda <- lambda + sum_i phi_i
        for p in phi.iter() {
            for (lt, pt) in lambda.iter_mut().zip(p.iter()) {
                *lt += pt;
            }
        }
    }
    lambda
}
