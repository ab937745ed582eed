//! Energy density and normal-ordered field moments.
//!
//! Every expectation value of the ansatz reduces to linear matrix ODEs driven
//! by the transfer generator `L` of the state.
//!
//! **Moments.** The normal-ordered moments `<:phi_1^a phi_2^b:>` obey the
//! spatially ordered hierarchy
//!
//! ```text
//!   d/dx rho^(a,b) = L rho^(a,b)
//!       + J(x) [ a (R_1 rho^(a-1,b) + rho^(a-1,b) R_1^dag)
//!              + b (R_2 rho^(a,b-1) + rho^(a,b-1) R_2^dag) ],
//! ```
//!
//! with `rho^(0,0)(-infinity) = rho_0` and every other block zero; the moment
//! is `tr rho^(a,b)` after the source has switched off. The window is
//! truncated to `[-x_tail, x_tail]` where `|J| <= tail_tol`. J's integrable
//! `|x|^(-1/2)` singularity at the origin is absorbed by splitting the window
//! into four segments and integrating the middle two in the substituted
//! coordinate `x = sign(u) u^2`, where the right-hand side becomes
//! `2|u| L rho + 2 g(u^2) (sources)` with the smooth `g(x) = sqrt(x) J(x)`.
//!
//! **Free part.** On the regular submanifold the free energy density per
//! field is a correlation integral against the convolution square
//! `(J*J)(s) = K_0(m|s|)/(2 pi)`:
//!
//! ```text
//!   h_j^0 = 4 Int_0^oo ds (J*J)(s) Re[ m^2 C_j(s) + D_j(s) ],
//!   C_j(s) = tr[R_j e^{s L}(rho_0 R_j^dag)],
//!   D_j(s) = tr[B_j e^{s L}(rho_0 B_j^dag)],   B_j = [Q, R_j],
//! ```
//!
//! evaluated by evolving the four propagated matrices and accumulating the
//! quadrature inside the same ODE state. The log singularity of `K_0` at
//! `s = 0` is integrated analytically over a strip `[0, s_0]` with the
//! correlator frozen at its `s = 0` value; the error is `O(s_0 ||L||)` and
//! `s_0 = 1e-8/m`. Off the regular submanifold the kinetic term acquires the
//! divergent contribution `h_div = 4 tr([R_1,R_2]^dag [R_1,R_2] rho_0) Int J^2`,
//! so evaluation refuses irregular states and reports the coefficient.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{RcmpsError, Result};
use crate::kernel::{bessel_k0, KernelTable};
use crate::linalg::{
    commutator, fro_norm, mslice, mul_acc, mul_acc_bdag, slice_norm, trace_mul, C64, CMat,
};
use crate::ode::{integrate, OdeOptions, OdeSystem, Segment};
use crate::state::{FixedPoint, RcmpsState, Transfer};
use crate::Tolerances;

/// Couplings of the two-field model
/// `h = sum_j h_j^0 + g(:phi_1^4: + :phi_2^4:) + 2 lambda :phi_1^2 phi_2^2:`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// Mass (sets the length unit; must be positive).
    pub m: f64,
    /// Quartic self-coupling of each field.
    pub g: f64,
    /// Cross-coupling; the interaction term is `2 lambda :phi_1^2 phi_2^2:`.
    pub lambda: f64,
    /// Number of fields; this implementation is specialized to 2.
    #[serde(default = "default_n_fields")]
    pub n_fields: usize,
}

fn default_n_fields() -> usize {
    2
}

impl ModelParams {
    /// Validated constructor (see [`ModelParams::validate`]).
    pub fn new(m: f64, g: f64, lambda: f64) -> Result<Self> {
        let p = ModelParams {
            m,
            g,
            lambda,
            n_fields: 2,
        };
        p.validate()?;
        Ok(p)
    }

    /// Reject unstable or malformed couplings.
    ///
    /// The classical quartic form `g(v_1^4 + v_2^4) + 2 lambda v_1^2 v_2^2`
    /// is bounded below iff `g >= 0` and `g + lambda >= 0` (the diagonal
    /// direction `v_1 = v_2` contributes `2(g + lambda) v^4`); strict
    /// violations are rejected. The boundary `g = 0` is kept admissible so
    /// that the free theory remains evaluable, with a warning since the
    /// quartic restoring force is absent.
    pub fn validate(&self) -> Result<()> {
        if !(self.m.is_finite() && self.m > 0.0) {
            return Err(RcmpsError::InvalidConfig(format!(
                "mass must be positive, got {}",
                self.m
            )));
        }
        if !self.g.is_finite() || !self.lambda.is_finite() {
            return Err(RcmpsError::InvalidConfig(
                "couplings must be finite".into(),
            ));
        }
        if self.g < 0.0 || self.g + self.lambda < 0.0 {
            return Err(RcmpsError::InvalidConfig(format!(
                "unstable potential: need g >= 0 and g + lambda >= 0, got g = {}, lambda = {}",
                self.g, self.lambda
            )));
        }
        if self.g == 0.0 && self.lambda != 0.0 {
            log::warn!(
                "g = 0 with lambda = {}: the potential is bounded but has flat quartic directions",
                self.lambda
            );
        }
        if self.n_fields != 2 {
            return Err(RcmpsError::InvalidConfig(format!(
                "this solver is specialized to n_fields = 2, got {}",
                self.n_fields
            )));
        }
        Ok(())
    }
}

/// Additive pieces of the energy density, in the order they are assembled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyParts {
    /// `4 m^2 Int w Re C_1` — smeared mass term of field 1.
    pub free_mass_1: f64,
    /// Mass term of field 2.
    pub free_mass_2: f64,
    /// `4 Int w Re D_1` — smeared kinetic term of field 1.
    pub free_kinetic_1: f64,
    /// Kinetic term of field 2.
    pub free_kinetic_2: f64,
    /// `g <:phi_1^4:>`.
    pub pot_phi1_4: f64,
    /// `g <:phi_2^4:>`.
    pub pot_phi2_4: f64,
    /// `2 lambda <:phi_1^2 phi_2^2:>`.
    pub pot_cross: f64,
}

impl EnergyParts {
    /// Sum of all parts; equals `h_reg` by construction.
    pub fn total(&self) -> f64 {
        self.free_mass_1
            + self.free_mass_2
            + self.free_kinetic_1
            + self.free_kinetic_2
            + self.pot_phi1_4
            + self.pot_phi2_4
            + self.pot_cross
    }
}

/// Energy density of a state, with diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    /// Regularized energy density (the variational objective).
    pub h_reg: f64,
    /// Itemized contributions; `h_reg` is exactly their sum.
    pub parts: EnergyParts,
    /// `4 tr([R_1,R_2]^dag [R_1,R_2] rho_0)` — the coefficient of the
    /// divergent kinetic contribution; zero on the regular submanifold.
    pub h_div_coefficient: f64,
    /// `||[R_1, R_2]||_F` of the evaluated state.
    pub commutator_residual: f64,
    /// Largest normalized imaginary part among the moment traces, which are
    /// exactly real in exact arithmetic (every hierarchy block stays
    /// Hermitian); a health diagnostic, small multiples of `ode_tol`. The
    /// free-part correlator integrals are complex for physical reasons and
    /// enter through their real parts only, so they are not monitored here.
    pub imag_residue: f64,
}

/// Normal-ordered moments `<:phi_1^a phi_2^b:>` up to a common total order.
#[derive(Debug, Clone)]
pub struct MomentHierarchy {
    orders: Vec<(usize, usize)>,
    values: Vec<f64>,
    imag_residue: f64,
    stationarity_defect: f64,
}

impl MomentHierarchy {
    /// `<:phi_1^a phi_2^b:>`, if `(a, b)` was computed.
    pub fn value(&self, a: usize, b: usize) -> Option<f64> {
        self.orders
            .iter()
            .position(|&o| o == (a, b))
            .map(|i| self.values[i])
    }

    /// The computed index pairs, ordered by total degree.
    pub fn orders(&self) -> &[(usize, usize)] {
        &self.orders
    }

    /// Largest normalized imaginary part among the moment traces.
    pub fn imag_residue(&self) -> f64 {
        self.imag_residue
    }

    /// `||rho^(0,0)(x_end) - rho_0||_F`: drift of the evolved fixed point
    /// across the whole window (an end-to-end integration health check).
    pub fn stationarity_defect(&self) -> f64 {
        self.stationarity_defect
    }
}

// ---------------------------------------------------------------------------
// Order bookkeeping.
// ---------------------------------------------------------------------------

/// All `(a, b)` with `a + b <= max_order`, sorted by total degree then `a`
/// descending-free deterministic order. Always includes `(0, 0)`.
pub(crate) fn orders_up_to(max_order: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for total in 0..=max_order {
        for a in (0..=total).rev() {
            v.push((a, total - a));
        }
    }
    v
}

/// Downward closure of the target set under `(a,b) -> (a-1,b), (a,b-1)`,
/// sorted like [`orders_up_to`]. The energy needs the closure of
/// `{(4,0), (0,4), (2,2)}`: 13 of the 15 blocks of total order <= 4.
pub(crate) fn closure_of(targets: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut need = std::collections::BTreeSet::new();
    let mut stack: Vec<(usize, usize)> = targets.to_vec();
    while let Some((a, b)) = stack.pop() {
        if !need.insert((a, b)) {
            continue;
        }
        if a > 0 {
            stack.push((a - 1, b));
        }
        if b > 0 {
            stack.push((a, b - 1));
        }
    }
    need.insert((0, 0));
    let mut v: Vec<(usize, usize)> = need.into_iter().collect();
    v.sort_by_key(|&(a, b)| (a + b, std::cmp::Reverse(a)));
    v
}

// ---------------------------------------------------------------------------
// Moment hierarchy ODE system.
// ---------------------------------------------------------------------------

/// Segment indices of the moment window.
const SEG_LEFT: usize = 0; // x in [-x_tail, -delta]
const SEG_U_NEG: usize = 1; // u in [-sqrt(delta), 0], x = -u^2
const SEG_U_POS: usize = 2; // u in [0, sqrt(delta)],  x = u^2
const SEG_RIGHT: usize = 3; // x in [delta, x_tail]

/// Boundary between plain-x and substituted segments, in units of 1/m.
const HIERARCHY_DELTA: f64 = 1e-2;

/// The stacked hierarchy as a flat ODE system. Block `i` holds
/// `rho^(orders[i])` at offset `i * D^2`.
pub(crate) struct HierarchySystem {
    pub(crate) d: usize,
    pub(crate) transfer: Transfer,
    pub(crate) kernel: Arc<KernelTable>,
    pub(crate) orders: Vec<(usize, usize)>,
    /// Per block: `(source block, R index, multiplicity)` triples.
    pub(crate) sources: Vec<Vec<(usize, usize, f64)>>,
    pub(crate) delta: f64,
    pub(crate) tmp: Vec<C64>,
    /// Second scratch block (adjoint sweeps need two).
    pub(crate) tmp2: Vec<C64>,
}

impl HierarchySystem {
    pub(crate) fn new(
        p: &RcmpsState,
        kernel: Arc<KernelTable>,
        orders: Vec<(usize, usize)>,
    ) -> Self {
        let d = p.dim();
        let find = |a: usize, b: usize| orders.iter().position(|&o| o == (a, b));
        let mut sources = Vec::with_capacity(orders.len());
        for &(a, b) in &orders {
            let mut row = Vec::new();
            if a > 0 {
                let src = find(a - 1, b).expect("hierarchy orders must be downward closed");
                row.push((src, 0usize, a as f64));
            }
            if b > 0 {
                let src = find(a, b - 1).expect("hierarchy orders must be downward closed");
                row.push((src, 1usize, b as f64));
            }
            sources.push(row);
        }
        let delta = HIERARCHY_DELTA / kernel.mass();
        HierarchySystem {
            d,
            transfer: p.transfer(),
            kernel,
            orders,
            sources,
            delta,
            tmp: vec![C64::new(0.0, 0.0); d * d],
            tmp2: vec![C64::new(0.0, 0.0); d * d],
        }
    }

    /// The four-segment window `[-x_tail, x_tail]`.
    pub(crate) fn segments(&self) -> Vec<Segment> {
        let xt = self.kernel.x_tail();
        let sq = self.delta.sqrt();
        vec![
            Segment {
                seg: SEG_LEFT,
                x0: -xt,
                x1: -self.delta,
            },
            Segment {
                seg: SEG_U_NEG,
                x0: -sq,
                x1: 0.0,
            },
            Segment {
                seg: SEG_U_POS,
                x0: 0.0,
                x1: sq,
            },
            Segment {
                seg: SEG_RIGHT,
                x0: self.delta,
                x1: xt,
            },
        ]
    }

    /// Initial state: `rho^(0,0) = rho_0`, all other blocks zero.
    pub(crate) fn initial(&self, rho: &CMat) -> Vec<C64> {
        let n = self.dim();
        let dd = self.d * self.d;
        let mut y = vec![C64::new(0.0, 0.0); n];
        let i0 = self
            .orders
            .iter()
            .position(|&o| o == (0, 0))
            .expect("orders include (0,0)");
        y[i0 * dd..(i0 + 1) * dd].copy_from_slice(mslice(rho));
        y
    }

    /// `(L-weight, source-weight)` at segment coordinate `t`: the RHS is
    /// `lin * L rho + src * (multiplicity-weighted source couplings)`.
    pub(crate) fn weights(&self, seg: usize, t: f64) -> (f64, f64) {
        match seg {
            SEG_LEFT | SEG_RIGHT => {
                let ax = t.abs();
                (1.0, self.kernel.sqrt_scaled_j(ax) / ax.sqrt())
            }
            SEG_U_NEG | SEG_U_POS => {
                let au = t.abs();
                (2.0 * au, 2.0 * self.kernel.sqrt_scaled_j(au * au))
            }
            _ => unreachable!("unknown hierarchy segment"),
        }
    }
}

impl OdeSystem for HierarchySystem {
    fn dim(&self) -> usize {
        self.orders.len() * self.d * self.d
    }

    fn rhs(&mut self, seg: usize, t: f64, y: &[C64], dy: &mut [C64]) {
        let d = self.d;
        let dd = d * d;
        let (lin, src) = self.weights(seg, t);
        for (i, row) in self.sources.iter().enumerate() {
            let out = &mut dy[i * dd..(i + 1) * dd];
            self.transfer.apply_acc_w(&y[i * dd..(i + 1) * dd], out, &mut self.tmp, lin);
            for &(sb, jr, mult) in row {
                let w = C64::new(src * mult, 0.0);
                let ys = &y[sb * dd..(sb + 1) * dd];
                let r = mslice(self.transfer.r(jr));
                mul_acc(out, r, ys, d, w);
                mul_acc_bdag(out, ys, r, d, w);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Kinetic/mass correlator ODE system.
// ---------------------------------------------------------------------------

/// Start of the numerically integrated `s` range (units of 1/m); `[0, s_0]`
/// is handled analytically with the correlator frozen at `s = 0`.
const CORRELATOR_S0: f64 = 1e-8;

/// Correlator propagation `X(s) = e^{s L}(X(0))` for the four seeds
/// `rho_0 R_1^dag, rho_0 B_1^dag, rho_0 R_2^dag, rho_0 B_2^dag`, with the
/// four quadrature accumulators `Int w(s) tr[M X(s)] ds` carried as extra
/// state components. Layout: blocks `[X_C1 | X_D1 | X_C2 | X_D2]` then the
/// accumulators `[a_C1, a_D1, a_C2, a_D2]`.
pub(crate) struct CorrelatorSystem {
    pub(crate) d: usize,
    pub(crate) transfer: Transfer,
    /// `B_j = [Q, R_j]`.
    pub(crate) b: [CMat; 2],
    pub(crate) kernel: Arc<KernelTable>,
    pub(crate) s0: f64,
    pub(crate) tmp: Vec<C64>,
    /// Second scratch block (adjoint sweeps need two).
    pub(crate) tmp2: Vec<C64>,
}

/// Free-part readout of one field.
///
/// Only the real parts of the half-line accumulators are physical: the
/// correlators `C_j`, `D_j` are genuinely complex at fixed `s > 0` (the state
/// need not be parity symmetric), and their imaginary parts cancel against
/// the reflected half-line `s < 0` in the full two-sided integral. The parts
/// are therefore real by construction, not by a numerical-reality check.
#[derive(Debug, Clone, Copy)]
pub(crate) struct FreeParts {
    pub mass: [f64; 2],
    pub kinetic: [f64; 2],
}

impl CorrelatorSystem {
    pub(crate) fn new(p: &RcmpsState, kernel: Arc<KernelTable>) -> Self {
        let d = p.dim();
        let transfer = p.transfer();
        let b = [
            commutator(transfer.q(), transfer.r(0)),
            commutator(transfer.q(), transfer.r(1)),
        ];
        let s0 = CORRELATOR_S0 / kernel.mass();
        CorrelatorSystem {
            d,
            transfer,
            b,
            kernel,
            s0,
            tmp: vec![C64::new(0.0, 0.0); d * d],
            tmp2: vec![C64::new(0.0, 0.0); d * d],
        }
    }

    /// Single segment `[s_0, s_cut]`, with `s_cut` where `(J*J)` falls below
    /// a thousandth of the kernel tail tolerance.
    pub(crate) fn segments(&self) -> Vec<Segment> {
        let cut = self.kernel.jj_cut((self.kernel.tail_tol() * 1e-3).max(1e-15));
        debug_assert!(cut > self.s0);
        vec![Segment {
            seg: 0,
            x0: self.s0,
            x1: cut,
        }]
    }

    /// Matrix paired with block `k` inside the accumulator trace.
    pub(crate) fn probe(&self, block: usize) -> &CMat {
        match block {
            0 => self.transfer.r(0),
            1 => &self.b[0],
            2 => self.transfer.r(1),
            3 => &self.b[1],
            _ => unreachable!(),
        }
    }

    /// Initial state at `s_0`: seeds advanced by one explicit Euler term
    /// (`X(s_0) = Z + s_0 L Z`, error `O(s_0^2)`), accumulators preloaded
    /// with the analytic strip `tr[M Z] Int_0^{s_0} (J*J)`.
    pub(crate) fn initial(&mut self, rho: &CMat) -> Vec<C64> {
        let d = self.d;
        let dd = d * d;
        let mut y = vec![C64::new(0.0, 0.0); self.dim()];
        let strip = self.kernel.jj_integral_small(self.s0);
        let rs = mslice(rho);
        for k in 0..4 {
            // Z = rho_0 M^dag for M = R_1, B_1, R_2, B_2.
            let mut z = vec![C64::new(0.0, 0.0); dd];
            mul_acc_bdag(&mut z, rs, mslice(self.probe(k)), d, C64::new(1.0, 0.0));
            let out = &mut y[k * dd..(k + 1) * dd];
            out.copy_from_slice(&z);
            self.transfer.apply_acc_w(&z, out, &mut self.tmp, self.s0);
            y[4 * dd + k] = strip * trace_mul(mslice(self.probe(k)), &z, d);
        }
        y
    }

    /// Assemble the free parts from the final accumulators.
    pub(crate) fn read(&self, y: &[C64]) -> FreeParts {
        let dd = self.d * self.d;
        let m2 = self.kernel.mass().powi(2);
        let acc = &y[4 * dd..];
        FreeParts {
            mass: [4.0 * m2 * acc[0].re, 4.0 * m2 * acc[2].re],
            kinetic: [4.0 * acc[1].re, 4.0 * acc[3].re],
        }
    }
}

impl OdeSystem for CorrelatorSystem {
    fn dim(&self) -> usize {
        4 * self.d * self.d + 4
    }

    fn rhs(&mut self, _seg: usize, s: f64, y: &[C64], dy: &mut [C64]) {
        let d = self.d;
        let dd = d * d;
        let w = bessel_k0(self.kernel.mass() * s) / (2.0 * std::f64::consts::PI);
        for k in 0..4 {
            let xs = &y[k * dd..(k + 1) * dd];
            self.transfer
                .apply_acc(xs, &mut dy[k * dd..(k + 1) * dd], &mut self.tmp);
            dy[4 * dd + k] += w * trace_mul(mslice(self.probe(k)), xs, d);
        }
    }
}

// ---------------------------------------------------------------------------
// Public evaluation entry points.
// ---------------------------------------------------------------------------

/// `4 tr([R_1,R_2]^dag [R_1,R_2] rho_0)` — the divergence coefficient.
pub(crate) fn div_coefficient(p: &RcmpsState, rho: &CMat) -> f64 {
    let c = commutator(p.r(0), p.r(1));
    let d = p.dim();
    let mut csq = vec![C64::new(0.0, 0.0); d * d];
    // C^dag C, then trace against rho.
    crate::linalg::mul_acc_adag(&mut csq, mslice(&c), mslice(&c), d, C64::new(1.0, 0.0));
    4.0 * trace_mul(&csq, mslice(rho), d).re
}

/// Regularity gate shared by energy and gradient evaluation: errors with
/// [`RcmpsError::IrregularState`] when `||[R_1,R_2]||` exceeds `reg_tol`
/// relative to the `R` scales.
pub(crate) fn check_regular(p: &RcmpsState, rho: &CMat, tols: &Tolerances) -> Result<f64> {
    let resid = p.commutator_residual();
    let scale = (fro_norm(p.r(0)) * fro_norm(p.r(1))).max(1.0);
    if resid > tols.reg_tol * scale {
        return Err(RcmpsError::IrregularState {
            commutator_residual: resid,
            reg_tol: tols.reg_tol,
            h_div_coefficient: div_coefficient(p, rho),
        });
    }
    Ok(resid)
}

pub(crate) fn imag_check(context: &'static str, value: C64, tols: &Tolerances) -> Result<f64> {
    let scale = value.re.abs().max(1.0);
    let resid = value.im.abs() / scale;
    if resid > 100.0 * tols.ode_tol {
        return Err(RcmpsError::NumericalIntegrity {
            context,
            quantity: "imaginary part",
            value: value.im.abs(),
            limit: 100.0 * tols.ode_tol * scale,
        });
    }
    Ok(resid)
}

/// Compute the free (mass + kinetic) parts given the fixed point.
pub(crate) fn free_parts(
    p: &RcmpsState,
    rho: &CMat,
    kernel: &Arc<KernelTable>,
    tols: &Tolerances,
) -> Result<FreeParts> {
    let mut sys = CorrelatorSystem::new(p, kernel.clone());
    let y0 = sys.initial(rho);
    let segs = sys.segments();
    let opts = OdeOptions::new(tols.ode_tol, tols.ode_atol(), "kinetic correlator");
    let y = integrate(&mut sys, &segs, y0, &opts, None)?;
    Ok(sys.read(&y))
}

/// Run the moment hierarchy for the given closed order set; returns the
/// final traces (aligned with `orders`) and the stationarity defect.
pub(crate) fn hierarchy_traces(
    p: &RcmpsState,
    rho: &CMat,
    kernel: &Arc<KernelTable>,
    orders: Vec<(usize, usize)>,
    tols: &Tolerances,
) -> Result<(Vec<(usize, usize)>, Vec<C64>, f64)> {
    let mut sys = HierarchySystem::new(p, kernel.clone(), orders);
    let y0 = sys.initial(rho);
    let segs = sys.segments();
    let opts = OdeOptions::new(tols.ode_tol, tols.ode_atol(), "moment hierarchy");
    let y = integrate(&mut sys, &segs, y0, &opts, None)?;
    let d = p.dim();
    let dd = d * d;
    let traces: Vec<C64> = (0..sys.orders.len())
        .map(|i| {
            let block = &y[i * dd..(i + 1) * dd];
            (0..d).map(|r| block[r * d + r]).sum()
        })
        .collect();
    let i0 = sys.orders.iter().position(|&o| o == (0, 0)).unwrap();
    let mut drift = y[i0 * dd..(i0 + 1) * dd].to_vec();
    for (dz, rz) in drift.iter_mut().zip(rho.iter()) {
        *dz -= rz;
    }
    let defect = slice_norm(&drift);
    Ok((sys.orders, traces, defect))
}

/// Normal-ordered moments `<:phi_1^a phi_2^b:>` for all `a + b <= max_order`.
///
/// The mass `m` fixes the smearing kernel (moments of the physical fields
/// depend on it even though the state does not).
pub fn moments(
    p: &RcmpsState,
    m: f64,
    max_order: usize,
    tols: &Tolerances,
) -> Result<MomentHierarchy> {
    tols.validate()?;
    if !(m.is_finite() && m > 0.0) {
        return Err(RcmpsError::InvalidConfig(format!(
            "mass must be positive, got {m}"
        )));
    }
    if !(1..=4).contains(&max_order) {
        return Err(RcmpsError::InvalidConfig(format!(
            "max_order must be in 1..=4, got {max_order}"
        )));
    }
    let orders = orders_up_to(max_order);
    if fro_norm(p.r(0)) == 0.0 && fro_norm(p.r(1)) == 0.0 {
        // Fock vacuum for any K: every normal-ordered moment vanishes.
        return Ok(MomentHierarchy {
            values: vec![0.0; orders.len()],
            orders,
            imag_residue: 0.0,
            stationarity_defect: 0.0,
        });
    }
    let kernel = KernelTable::shared(m, tols)?;
    moments_with(p, &kernel, orders, tols)
}

/// Moments against an explicit kernel table (mass fixed by the caller).
pub(crate) fn moments_with(
    p: &RcmpsState,
    kernel: &Arc<KernelTable>,
    orders: Vec<(usize, usize)>,
    tols: &Tolerances,
) -> Result<MomentHierarchy> {
    let fp = p.transfer().fixed_point(tols)?;
    let (orders, traces, defect) = hierarchy_traces(p, fp.rho(), kernel, orders, tols)?;
    let mut imag = 0.0f64;
    for (&o, &t) in orders.iter().zip(traces.iter()) {
        if o != (0, 0) {
            imag = imag.max(imag_check("moment hierarchy", t, tols)?);
        }
    }
    let values = traces.iter().map(|t| t.re).collect();
    Ok(MomentHierarchy {
        orders,
        values,
        imag_residue: imag,
        stationarity_defect: defect,
    })
}

/// The moment orders entering the quartic potential: downward closure of
/// `{(4,0), (0,4), (2,2)}`.
pub(crate) fn energy_orders() -> Vec<(usize, usize)> {
    closure_of(&[(4, 0), (0, 4), (2, 2)])
}

/// Energy density `h_reg` of a regular state, with itemized parts.
///
/// Refuses irregular states (`||[R_1,R_2]|| > reg_tol`, scaled) with
/// [`RcmpsError::IrregularState`] carrying the divergence coefficient.
pub fn energy_density(p: &RcmpsState, params: &ModelParams, tols: &Tolerances) -> Result<EnergyReport> {
    params.validate()?;
    tols.validate()?;
    if fro_norm(p.r(0)) == 0.0 && fro_norm(p.r(1)) == 0.0 {
        // Fock vacuum: every normal-ordered term vanishes for any K.
        return Ok(vacuum_report());
    }
    let kernel = KernelTable::shared(params.m, tols)?;
    let fp = p.transfer().fixed_point(tols)?;
    energy_given_fp(p, params, &kernel, &fp, tols, true)
}

/// The exact report at the Fock vacuum (`R_1 = R_2 = 0`, any `K`).
pub(crate) fn vacuum_report() -> EnergyReport {
    EnergyReport {
        h_reg: 0.0,
        parts: EnergyParts {
            free_mass_1: 0.0,
            free_mass_2: 0.0,
            free_kinetic_1: 0.0,
            free_kinetic_2: 0.0,
            pot_phi1_4: 0.0,
            pot_phi2_4: 0.0,
            pot_cross: 0.0,
        },
        h_div_coefficient: 0.0,
        commutator_residual: 0.0,
        imag_residue: 0.0,
    }
}

/// Energy evaluation against a precomputed fixed point (shared with the
/// gradient pipeline, which needs the same intermediates).
///
/// With `gate` unset the regularity check is skipped: finite-difference
/// probes move along straight chords that leave the regular submanifold at
/// first order, and they need the same `h_reg` formula evaluated there.
pub(crate) fn energy_given_fp(
    p: &RcmpsState,
    params: &ModelParams,
    kernel: &Arc<KernelTable>,
    fp: &FixedPoint,
    tols: &Tolerances,
    gate: bool,
) -> Result<EnergyReport> {
    let rho = fp.rho();
    let commutator_residual = if gate {
        check_regular(p, rho, tols)?
    } else {
        p.commutator_residual()
    };
    let h_div_coefficient = div_coefficient(p, rho);

    let free = free_parts(p, rho, kernel, tols)?;
    let mut imag = 0.0f64;

    let (m40, m04, m22) = if params.g == 0.0 && params.lambda == 0.0 {
        (0.0, 0.0, 0.0)
    } else {
        let (orders, traces, _defect) =
            hierarchy_traces(p, rho, kernel, energy_orders(), tols)?;
        let mut get = |a: usize, b: usize| -> Result<f64> {
            let i = orders.iter().position(|&o| o == (a, b)).unwrap();
            imag = imag.max(imag_check("moment hierarchy", traces[i], tols)?);
            Ok(traces[i].re)
        };
        (get(4, 0)?, get(0, 4)?, get(2, 2)?)
    };

    Ok(assemble_report(
        params,
        &free,
        (m40, m04, m22),
        h_div_coefficient,
        commutator_residual,
        imag,
    ))
}

/// Assemble the itemized report from the free parts and quartic moments
/// (shared between plain evaluation and the gradient pipeline, which reads
/// the energy off its own recorded forward pass).
pub(crate) fn assemble_report(
    params: &ModelParams,
    free: &FreeParts,
    quartic: (f64, f64, f64),
    h_div_coefficient: f64,
    commutator_residual: f64,
    imag_residue: f64,
) -> EnergyReport {
    let (m40, m04, m22) = quartic;
    let parts = EnergyParts {
        free_mass_1: free.mass[0],
        free_mass_2: free.mass[1],
        free_kinetic_1: free.kinetic[0],
        free_kinetic_2: free.kinetic[1],
        pot_phi1_4: params.g * m40,
        pot_phi2_4: params.g * m04,
        pot_cross: 2.0 * params.lambda * m22,
    };
    EnergyReport {
        h_reg: parts.total(),
        parts,
        h_div_coefficient,
        commutator_residual,
        imag_residue,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::gl_adaptive;
    use crate::linalg::{eig, inv, trace, zeros};
    use crate::testutil::{coherent_d1, regular_state, sample_state};
    use approx::assert_relative_eq;
    use ndarray::Array1;
    use proptest::prelude::*;

    fn tols() -> Tolerances {
        Tolerances::default()
    }

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn params_validation() {
        assert!(ModelParams::new(1.0, 0.5, 0.2).is_ok());
        assert!(ModelParams::new(1.0, 0.0, 0.0).is_ok()); // free theory admissible
        assert!(ModelParams::new(1.0, 0.5, -0.4).is_ok()); // g + lambda > 0
        assert!(ModelParams::new(0.0, 0.5, 0.2).is_err());
        assert!(ModelParams::new(-1.0, 0.5, 0.2).is_err());
        assert!(ModelParams::new(1.0, -0.1, 0.5).is_err()); // g < 0
        assert!(ModelParams::new(1.0, 0.3, -0.4).is_err()); // g + lambda < 0
        let bad = ModelParams {
            m: 1.0,
            g: 0.1,
            lambda: 0.0,
            n_fields: 3,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn order_sets() {
        let all = orders_up_to(4);
        assert_eq!(all.len(), 15);
        assert_eq!(all[0], (0, 0));
        let en = energy_orders();
        assert_eq!(en.len(), 13);
        assert!(en.contains(&(4, 0)) && en.contains(&(0, 4)) && en.contains(&(2, 2)));
        assert!(!en.contains(&(3, 1)) && !en.contains(&(1, 3)));
    }

    proptest! {
        /// The closure is exactly the set of pairs dominated by some target
        /// (plus (0,0)), listed in ascending total degree.
        #[test]
        fn closure_is_downward_closed_and_minimal(
            targets in proptest::collection::vec((0usize..=4, 0usize..=4), 1..5)
        ) {
            let cl = closure_of(&targets);
            for w in cl.windows(2) {
                let ka = (w[0].0 + w[0].1, std::cmp::Reverse(w[0].0));
                let kb = (w[1].0 + w[1].1, std::cmp::Reverse(w[1].0));
                prop_assert!(ka < kb);
            }
            for a in 0..=8usize {
                for b in 0..=8usize {
                    let dominated = (a, b) == (0, 0)
                        || targets.iter().any(|&(ta, tb)| a <= ta && b <= tb);
                    prop_assert_eq!(cl.contains(&(a, b)), dominated);
                }
            }
        }
    }

    #[test]
    fn vacuum_is_exactly_zero() {
        // R_1 = R_2 = 0 with a nontrivial K: normal ordering kills everything.
        let mut k = zeros(3);
        k[[0, 1]] = c(0.4, 0.7);
        k[[1, 0]] = c(0.4, -0.7);
        k[[2, 2]] = c(-1.3, 0.0);
        let p = RcmpsState::new(k, zeros(3), zeros(3)).unwrap();
        let params = ModelParams::new(1.0, 0.4, 0.1).unwrap();
        let rep = energy_density(&p, &params, &tols()).unwrap();
        assert_eq!(rep.h_reg, 0.0);
        assert_eq!(rep.h_div_coefficient, 0.0);
        let mom = moments(&p, 1.0, 4, &tols()).unwrap();
        for &(a, b) in mom.orders() {
            assert_eq!(mom.value(a, b), Some(0.0));
        }
    }

    #[test]
    fn d1_moments_match_coherent_oracle() {
        for (m, r1, r2) in [
            (1.0, c(0.31, 0.12), c(-0.22, 0.40)),
            (2.5, c(-0.15, -0.33), c(0.27, 0.05)),
        ] {
            let p = coherent_d1(r1, r2, 0.37);
            let mom = moments(&p, m, 4, &tols()).unwrap();
            let v1 = 2.0 * r1.re / (2.0 * m).sqrt();
            let v2 = 2.0 * r2.re / (2.0 * m).sqrt();
            for &(a, b) in mom.orders() {
                if (a, b) == (0, 0) {
                    continue;
                }
                let want = v1.powi(a as i32) * v2.powi(b as i32);
                let got = mom.value(a, b).unwrap();
                assert_relative_eq!(got, want, max_relative = 1e-6, epsilon = 1e-9);
            }
            assert!(mom.imag_residue() <= 1e-8);
            assert!(mom.stationarity_defect() <= 1e-8);
        }
    }

    #[test]
    fn d1_energy_matches_coherent_oracle() {
        for (m, g, lambda, r1, r2) in [
            (1.0, 0.3, 0.2, c(0.31, 0.12), c(-0.22, 0.40)),
            (2.5, 0.08, -0.05, c(-0.35, 0.21), c(0.18, -0.44)),
        ] {
            let p = coherent_d1(r1, r2, -0.6);
            let params = ModelParams::new(m, g, lambda).unwrap();
            let rep = energy_density(&p, &params, &tols()).unwrap();
            let v1 = 2.0 * r1.re / (2.0 * m).sqrt();
            let v2 = 2.0 * r2.re / (2.0 * m).sqrt();
            let want = m * (r1.norm_sqr() + r2.norm_sqr())
                + g * (v1.powi(4) + v2.powi(4))
                + 2.0 * lambda * v1.powi(2) * v2.powi(2);
            assert_relative_eq!(rep.h_reg, want, max_relative = 1e-6, epsilon = 1e-9);
            // Scalars commute with themselves: kinetic parts vanish.
            assert!(rep.parts.free_kinetic_1.abs() <= 1e-10);
            assert!(rep.parts.free_kinetic_2.abs() <= 1e-10);
            assert_relative_eq!(
                rep.parts.free_mass_1,
                m * r1.norm_sqr(),
                max_relative = 1e-7,
                epsilon = 1e-10
            );
            assert!(rep.imag_residue <= 1e-8);
        }
    }

    #[test]
    fn first_moments_have_closed_form() {
        // tr rho^{(1,0)} integrates the source against a constant rho_0, so
        // <phi_j> = (Int J) * 2 Re tr(R_j rho_0) independently of D.
        let m = 1.7;
        let p = regular_state(3, 11, 0.8);
        let fp = p.transfer().fixed_point(&tols()).unwrap();
        let kernel = KernelTable::shared(m, &tols()).unwrap();
        let mom = moments(&p, m, 1, &tols()).unwrap();
        for j in 0..2 {
            let want = kernel.integral_j() * 2.0 * trace(&p.r(j).dot(fp.rho())).re;
            let got = if j == 0 {
                mom.value(1, 0).unwrap()
            } else {
                mom.value(0, 1).unwrap()
            };
            assert_relative_eq!(got, want, max_relative = 1e-7, epsilon = 1e-9);
        }
    }

    /// Independent oracle for the quadratic moments: because `e^{sL}` is
    /// trace preserving, the hierarchy collapses to correlator quadratures
    ///   M_20 = 4 Re Int_0^oo (J*J)(s) tr[R_1 e^{sL} S_1] ds,
    ///   M_11 = 2 Re Int_0^oo (J*J)(s) (tr[R_1 e^{sL} S_2] + tr[R_2 e^{sL} S_1]) ds,
    /// with S_j = R_j rho_0 + rho_0 R_j^dag, evaluated here with a dense
    /// matrix exponential and adaptive quadrature.
    #[test]
    fn quadratic_moments_match_expm_quadrature_oracle() {
        let p = regular_state(2, 7, 0.9);
        let t = tols();
        let kernel = KernelTable::shared(1.0, &t).unwrap();
        let fp = p.transfer().fixed_point(&t).unwrap();
        let rho = fp.rho();
        let d = 2usize;

        let dense = p.transfer().dense_matrix();
        let (vals, vecs) = eig(&dense, "oracle").unwrap();
        let vinv = inv(&vecs, "oracle").unwrap();

        let source = |j: usize| -> CMat {
            let mut s = p.r(j).dot(rho);
            s += &rho.dot(&dagger_of(p.r(j)));
            s
        };
        let s1 = source(0);
        let s2 = source(1);
        let vec_of = |m: &CMat| Array1::from(mslice(m).to_vec());
        let (s1v, s2v) = (vec_of(&s1), vec_of(&s2));

        let expm_trace = |probe: &CMat, src: &Array1<C64>, s: f64| -> C64 {
            let mut coef = vinv.dot(src);
            for (ck, lk) in coef.iter_mut().zip(vals.iter()) {
                *ck *= (lk * s).exp();
            }
            let w = vecs.dot(&coef);
            let mut tr = c(0.0, 0.0);
            for i in 0..d {
                for j in 0..d {
                    tr += probe[[i, j]] * w[j * d + i];
                }
            }
            tr
        };

        let s0 = 1e-8f64;
        let cut = kernel.jj_cut(1e-14);
        let quad = |f: &dyn Fn(f64) -> C64| -> f64 {
            // log substitution tames the K_0 singularity at s -> 0.
            let mut g = |w: f64| {
                let s = w.exp();
                s * kernel.jj(s).unwrap() * f(s).re
            };
            let body = gl_adaptive(&mut g, s0.ln(), cut.ln(), 1e-9);
            body + kernel.jj_integral_small(s0) * f(0.0).re
        };

        let m20_oracle = 4.0 * quad(&|s| expm_trace(p.r(0), &s1v, s));
        let m02_oracle = 4.0 * quad(&|s| expm_trace(p.r(1), &s2v, s));
        let m11_oracle = 2.0
            * quad(&|s| expm_trace(p.r(0), &s2v, s) + expm_trace(p.r(1), &s1v, s));

        let mom = moments(&p, 1.0, 2, &t).unwrap();
        assert_relative_eq!(mom.value(2, 0).unwrap(), m20_oracle, max_relative = 1e-6, epsilon = 1e-8);
        assert_relative_eq!(mom.value(0, 2).unwrap(), m02_oracle, max_relative = 1e-6, epsilon = 1e-8);
        assert_relative_eq!(mom.value(1, 1).unwrap(), m11_oracle, max_relative = 1e-6, epsilon = 1e-8);
    }

    #[test]
    fn field_exchange_symmetry() {
        let p = regular_state(3, 21, 0.7);
        let swapped = RcmpsState::new(p.k().clone(), p.r(1).clone(), p.r(0).clone()).unwrap();
        let t = tols();
        let ma = moments(&p, 1.0, 3, &t).unwrap();
        let mb = moments(&swapped, 1.0, 3, &t).unwrap();
        for &(a, b) in ma.orders() {
            let va = ma.value(a, b).unwrap();
            let vb = mb.value(b, a).unwrap();
            assert!(
                (va - vb).abs() <= 1e-9 * va.abs().max(1.0),
                "swap mismatch at ({a},{b}): {va} vs {vb}"
            );
        }
    }

    #[test]
    fn single_field_reduction_is_exact() {
        let base = regular_state(3, 5, 0.8);
        let p = RcmpsState::new(base.k().clone(), base.r(0).clone(), zeros(3)).unwrap();
        let t = tols();
        let mom = moments(&p, 1.0, 4, &t).unwrap();
        for &(a, b) in mom.orders() {
            if b >= 1 {
                assert_eq!(mom.value(a, b), Some(0.0), "({a},{b}) must vanish exactly");
            }
        }
        let params = ModelParams::new(1.0, 0.4, 0.3).unwrap();
        let rep = energy_density(&p, &params, &t).unwrap();
        assert_eq!(rep.parts.free_mass_2, 0.0);
        assert_eq!(rep.parts.free_kinetic_2, 0.0);
        assert_eq!(rep.parts.pot_phi2_4, 0.0);
        assert_eq!(rep.parts.pot_cross, 0.0);
    }

    #[test]
    fn stationarity_and_trace_flatness() {
        let p = regular_state(2, 33, 0.8);
        let t = tols();
        let kernel = KernelTable::shared(1.0, &t).unwrap();
        let fp = p.transfer().fixed_point(&t).unwrap();
        let orders = orders_up_to(2);

        let (ord, tr_std, defect) =
            hierarchy_traces(&p, fp.rho(), &kernel, orders.clone(), &t).unwrap();
        assert!(defect <= 1e-8, "stationarity defect {defect}");

        // Extend the window past x_tail: with the source off, every trace
        // must stay put and rho^(0,0) must still sit on the fixed point.
        let mut sys = HierarchySystem::new(&p, kernel.clone(), orders);
        let y0 = sys.initial(fp.rho());
        let mut segs = sys.segments();
        let xt = kernel.x_tail();
        segs.push(crate::ode::Segment {
            seg: SEG_RIGHT,
            x0: xt,
            x1: 1.4 * xt,
        });
        let opts = OdeOptions::new(t.ode_tol, t.ode_atol(), "flatness test");
        let y = integrate(&mut sys, &segs, y0, &opts, None).unwrap();
        let dd = 4;
        for (i, &o) in ord.iter().enumerate() {
            let tr_ext: C64 = (0..2).map(|r| y[i * dd + r * 2 + r]).sum();
            let drift = (tr_ext - tr_std[i]).norm();
            assert!(
                drift <= 1e-8 * tr_std[i].norm().max(1.0),
                "trace of {o:?} drifted by {drift} after source-off"
            );
        }
    }

    #[test]
    fn free_energy_is_nonnegative_on_random_regular_states() {
        let t = tols();
        let params = ModelParams::new(1.0, 0.0, 0.0).unwrap();
        for seed in 0..20u64 {
            let d = 2 + (seed % 3) as usize;
            let p = regular_state(d, 1000 + seed, 0.6);
            let rep = energy_density(&p, &params, &t).unwrap();
            assert!(
                rep.h_reg >= -1e-8,
                "free energy {} < 0 at seed {seed}, D = {d}",
                rep.h_reg
            );
            assert!(rep.parts.free_mass_1 + rep.parts.free_kinetic_1 >= -1e-8);
            assert!(rep.parts.free_mass_2 + rep.parts.free_kinetic_2 >= -1e-8);
        }
    }

    #[test]
    fn correlator_clusters_to_disconnected_value() {
        // C_j(s) -> |tr(R_j rho_0)|^2 as s -> oo, at the L-gap rate.
        let p = regular_state(3, 2, 1.0);
        let t = tols();
        let kernel = KernelTable::shared(1.0, &t).unwrap();
        let fp = p.transfer().fixed_point(&t).unwrap();
        let mut sys = CorrelatorSystem::new(&p, kernel);
        let y0 = sys.initial(fp.rho());
        let segs = vec![crate::ode::Segment {
            seg: 0,
            x0: sys.s0,
            x1: 80.0,
        }];
        let opts = OdeOptions::new(t.ode_tol, t.ode_atol(), "clustering test");
        let y = integrate(&mut sys, &segs, y0, &opts, None).unwrap();
        let c_end = trace_mul(mslice(p.r(0)), &y[0..9], 3);
        let tr0 = trace(&p.r(0).dot(fp.rho()));
        let limit = tr0.norm_sqr();
        assert!(
            (c_end - c(limit, 0.0)).norm() <= 1e-5 * limit.max(1.0),
            "clustering defect {}",
            (c_end - c(limit, 0.0)).norm()
        );
    }

    #[test]
    fn irregular_state_is_rejected_with_divergence_coefficient() {
        let p = sample_state(3, 9);
        assert!(p.commutator_residual() > 1e-3);
        let t = tols();
        let params = ModelParams::new(1.0, 0.2, 0.1).unwrap();
        let err = energy_density(&p, &params, &t).unwrap_err();
        match err {
            RcmpsError::IrregularState {
                commutator_residual,
                h_div_coefficient,
                ..
            } => {
                assert!(commutator_residual > 1e-3);
                // Independent evaluation of 4 tr([R1,R2]^dag [R1,R2] rho_0).
                let fp = p.transfer().fixed_point(&t).unwrap();
                let cm = commutator(p.r(0), p.r(1));
                let want = 4.0 * trace(&dagger_of(&cm).dot(&cm).dot(fp.rho())).re;
                assert_relative_eq!(h_div_coefficient, want, max_relative = 1e-10);
                assert!(h_div_coefficient > 0.0);
            }
            other => panic!("expected IrregularState, got {other:?}"),
        }
    }

    #[test]
    fn regular_state_has_vanishing_divergence_coefficient() {
        let p = regular_state(4, 14, 0.9);
        let t = tols();
        let fp = p.transfer().fixed_point(&t).unwrap();
        assert!(div_coefficient(&p, fp.rho()).abs() <= 1e-10);
    }

    #[test]
    fn report_is_consistent_on_interacting_state() {
        let p = regular_state(2, 40, 0.8);
        let t = tols();
        let params = ModelParams::new(1.0, 0.4, 0.3).unwrap();
        let rep = energy_density(&p, &params, &t).unwrap();
        let sum = rep.parts.total();
        assert!((rep.h_reg - sum).abs() <= 1e-12 * sum.abs().max(1.0));
        assert!(rep.imag_residue <= 1e-8);
        assert!(rep.h_div_coefficient.abs() <= 1e-10);
        assert!(rep.commutator_residual <= 1e-12);
    }

    #[test]
    fn invalid_orders_are_rejected() {
        let p = regular_state(2, 1, 0.5);
        assert!(moments(&p, 1.0, 0, &tols()).is_err());
        assert!(moments(&p, 1.0, 5, &tols()).is_err());
        assert!(moments(&p, -1.0, 2, &tols()).is_err());
    }

    fn dagger_of(a: &CMat) -> CMat {
        crate::linalg::dagger(a)
    }
}
