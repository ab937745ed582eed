//! The half-power kernel J and its convolution square.
//!
//! The field operators enter the ansatz smeared by
//!
//! ```text
//!   J(x) = (1/2pi) Int dk e^{ikx} / sqrt(2 w_k),    w_k = sqrt(k^2 + m^2),
//! ```
//!
//! an even, positive kernel with an inverse-square-root singularity at the
//! origin, J(x) ~ 1/(2 sqrt(pi x)) for x -> 0, and exponential decay
//! J(x) ~ e^{-mx} x^{-3/4} for mx >> 1. Direct oscillatory quadrature of the
//! definition is hopeless at the accuracies needed here; rotating the contour
//! onto the branch cut of (k^2+m^2)^{-1/4} gives the equivalent
//!
//! ```text
//!   J(x) = (1/2pi) Int_m^oo dt e^{-t|x|} (t^2 - m^2)^{-1/4},
//! ```
//!
//! a positive monotone integrand whose endpoint singularity is removed
//! exactly by t = m + u^4. Everything in this module evaluates that
//! representation: once with adaptive Gauss-Legendre panels to build a
//! per-mass lookup table, then through cubic splines of the smooth function
//! g(x) = sqrt(x) J(x) on a logarithmic grid (small x) and a linear grid
//! (large x). g extends continuously to g(0) = 1/(2 sqrt(pi)), which is what
//! the substitution segments of the moment ODEs evaluate.
//!
//! The convolution square needed by the kinetic energy is known in closed
//! form, (J*J)(s) = K0(m|s|)/(2pi); K0 comes from its ascending series for
//! small argument and from Gauss-Legendre quadrature of
//! K0(z) = Int_1^oo e^{-zt} (t^2-1)^{-1/2} dt (with t = 1 + u^2) for large.
//! The two branches overlap on z in [2, 5] and are cross-checked there, and
//! the identities Int J = 1/sqrt(2m), (J*J) = K0/(2pi) pointwise and
//! Int (J*J) = 1/(2m) tie the table and the Bessel path together in tests.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{RcmpsError, Result};
use crate::Tolerances;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
/// g(0) = lim_{x->0} sqrt(x) J(x) = 1/(2 sqrt(pi)).
const G0: f64 = 0.282_094_791_773_878_14;

// ---------------------------------------------------------------------------
// Gauss-Legendre rules.
// ---------------------------------------------------------------------------

/// Nodes and weights on [-1, 1], computed by Newton iteration on the
/// three-term recurrence (no tabulated constants).
fn legendre_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut t = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p0 = 1.0f64;
            let mut p1 = t;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * t * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            pp = (n as f64) * (t * p1 - p0) / (t * t - 1.0);
            let dt = p1 / pp;
            t -= dt;
            if dt.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -t;
        x[n - 1 - i] = t;
        let wi = 2.0 / ((1.0 - t * t) * pp * pp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

fn gl_rule(n: usize) -> Arc<(Vec<f64>, Vec<f64>)> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<(Vec<f64>, Vec<f64>)>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = cache.lock().unwrap();
    map.entry(n)
        .or_insert_with(|| Arc::new(legendre_rule(n)))
        .clone()
}

/// Integrate `f` over `[a, b]` with one n-point Gauss-Legendre panel.
fn gl_panel<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64, rule: &(Vec<f64>, Vec<f64>)) -> f64 {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut s = 0.0;
    for (xi, wi) in rule.0.iter().zip(rule.1.iter()) {
        s += wi * f(mid + half * xi);
    }
    s * half
}

/// Composite rule: `panels` equal panels of `n` points each.
fn gl_composite<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64, panels: usize, n: usize) -> f64 {
    let rule = gl_rule(n);
    let h = (b - a) / panels as f64;
    let mut s = 0.0;
    for p in 0..panels {
        s += gl_panel(f, a + p as f64 * h, a + (p + 1) as f64 * h, &rule);
    }
    s
}

/// Panel-doubling composite quadrature to relative tolerance.
pub(crate) fn gl_adaptive<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64, rel_tol: f64) -> f64 {
    let mut panels = 32;
    let mut prev = gl_composite(f, a, b, panels, 16);
    loop {
        panels *= 2;
        let cur = gl_composite(f, a, b, panels, 16);
        if (cur - prev).abs() <= rel_tol * cur.abs().max(1e-300) || panels >= 2048 {
            return cur;
        }
        prev = cur;
    }
}

// ---------------------------------------------------------------------------
// Modified Bessel function K0.
// ---------------------------------------------------------------------------

/// K0(z) for z > 0.
///
/// z <= 2: ascending series K0 = -(ln(z/2) + gamma) I0(z) + sum_k H_k q^k/(k!)^2,
/// q = z^2/4 (exact rational coefficients, converges in < 20 terms).
/// z > 2: Gauss-Legendre quadrature of 2 e^{-z} Int_0^oo e^{-z u^2} (2+u^2)^{-1/2} du
/// in the scaled variable v = u sqrt(z), which makes the panel layout
/// z-independent. Both branches agree to ~1e-13 on the overlap.
pub fn bessel_k0(z: f64) -> f64 {
    assert!(z > 0.0, "K0 requires a positive argument, got {z}");
    if z <= 2.0 {
        let q = 0.25 * z * z;
        let mut term = 1.0f64;
        let mut i0 = 1.0f64;
        let mut s = 0.0f64;
        let mut hk = 0.0f64;
        for k in 1..=40 {
            let kf = k as f64;
            term *= q / (kf * kf);
            hk += 1.0 / kf;
            i0 += term;
            s += term * hk;
            if term * (hk + 1.0) < 1e-18 * (i0 + s) {
                break;
            }
        }
        -( (0.5 * z).ln() + EULER_GAMMA) * i0 + s
    } else {
        // (2 e^{-z} / sqrt(z)) Int_0^{sqrt(T)} e^{-v^2} (2 + v^2/z)^{-1/2} dv
        let rule = gl_rule(24);
        let edges = [0.0, 0.8, 1.7, 2.8, 4.2, 6.75];
        let mut integral = 0.0;
        let mut f = |v: f64| (-v * v).exp() / (2.0 + v * v / z).sqrt();
        for win in edges.windows(2) {
            integral += gl_panel(&mut f, win[0], win[1], &rule);
        }
        2.0 * (-z).exp() / z.sqrt() * integral
    }
}

/// `Int_0^a K0(t) dt` for small `a` (used for the analytic strip at the
/// s = 0 end of the kinetic correlator integral). Three-term expansion from
/// integrating the ascending series; absolute error O(a^7 ln a) < 1e-12 for
/// a <= 0.05, which callers maintain.
pub(crate) fn k0_integral_small(a: f64) -> f64 {
    debug_assert!((0.0..=0.05).contains(&a));
    if a == 0.0 {
        return 0.0;
    }
    let l = (0.5 * a).ln();
    a * (1.0 - EULER_GAMMA - l)
        + a.powi(3) / 12.0 * (4.0 / 3.0 - EULER_GAMMA - l)
        + a.powi(5) / 320.0 * (1.7 - EULER_GAMMA - l)
}

/// Smallest z with K0(z) <= target (monotone bisection).
pub(crate) fn k0_threshold(target: f64) -> f64 {
    debug_assert!(target > 0.0 && target < bessel_k0(1e-3));
    let (mut lo, mut hi) = (1e-3, 80.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if bessel_k0(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

// ---------------------------------------------------------------------------
// Direct quadrature of the branch-cut representation.
// ---------------------------------------------------------------------------

/// J(x) for x > 0 by adaptive quadrature of the cut representation with
/// t = m + u^4. Build-time / oracle path; production reads the table.
fn j_direct(m: f64, x: f64, rel_tol: f64) -> f64 {
    debug_assert!(x > 0.0 && m > 0.0);
    let u_max = (48.0 / x).powf(0.25);
    let mut f = |u: f64| {
        let u2 = u * u;
        let u4 = u2 * u2;
        u2 * (2.0 * m + u4).powf(-0.25) * (-(m + u4) * x).exp()
    };
    let integral = gl_adaptive(&mut f, 0.0, u_max, rel_tol);
    2.0 / std::f64::consts::PI * integral
}

// ---------------------------------------------------------------------------
// Natural cubic spline on a uniform grid.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct UniformSpline {
    x0: f64,
    h: f64,
    y: Vec<f64>,
    m2: Vec<f64>, // second derivatives at the nodes
}

impl UniformSpline {
    /// Natural boundary conditions; callers pad the grid so the boundary
    /// layers of the natural condition sit outside the service region.
    fn build(x0: f64, h: f64, y: Vec<f64>) -> Self {
        let n = y.len();
        assert!(n >= 3);
        let mut m2 = vec![0.0; n];
        // Thomas solve of the tridiagonal system for interior nodes.
        let k = n - 2;
        let mut diag = vec![4.0; k];
        let mut rhs = vec![0.0; k];
        for i in 0..k {
            rhs[i] = 6.0 * (y[i + 2] - 2.0 * y[i + 1] + y[i]) / (h * h);
        }
        for i in 1..k {
            let w = 1.0 / diag[i - 1];
            diag[i] -= w;
            rhs[i] -= w * rhs[i - 1];
        }
        let mut sol = vec![0.0; k];
        if k > 0 {
            sol[k - 1] = rhs[k - 1] / diag[k - 1];
            for i in (0..k.saturating_sub(1)).rev() {
                sol[i] = (rhs[i] - sol[i + 1]) / diag[i];
            }
        }
        m2[1..=k].copy_from_slice(&sol);
        UniformSpline { x0, h, y, m2 }
    }

    fn eval(&self, x: f64) -> f64 {
        let t = (x - self.x0) / self.h;
        let i = (t.floor() as isize).clamp(0, self.y.len() as isize - 2) as usize;
        let s = t - i as f64;
        let r = 1.0 - s;
        let h2 = self.h * self.h / 6.0;
        self.y[i] * r
            + self.y[i + 1] * s
            + h2 * ((r * r * r - r) * self.m2[i] + (s * s * s - s) * self.m2[i + 1])
    }
}

// ---------------------------------------------------------------------------
// The kernel table.
// ---------------------------------------------------------------------------

/// Tabulated kernel for one mass, shared via [`KernelTable::shared`].
#[derive(Debug)]
pub struct KernelTable {
    m: f64,
    x_min: f64,
    x_switch: f64,
    x_max: f64,
    x_tail: f64,
    tail_tol: f64,
    log_spline: UniformSpline, // g(x) vs ln x on [x_min, x_switch]
    lin_spline: UniformSpline, // g(x) vs x on [x_switch, x_max]
    j0_fit: f64,               // g(x) = G0 + j0 sqrt(x) + j1 x below x_min
    j1_fit: f64,
    integral_j: f64, // Int_R J dx, from build-time quadrature
}

fn cache_key(m: f64, quad_tol: f64, tail_tol: f64) -> (u64, u64, u64) {
    (m.to_bits(), quad_tol.to_bits(), tail_tol.to_bits())
}

impl KernelTable {
    /// Build (or fetch from the per-process cache) the table for mass `m`.
    pub fn shared(m: f64, tols: &Tolerances) -> Result<Arc<KernelTable>> {
        if !(m.is_finite() && m > 0.0) {
            return Err(RcmpsError::InvalidConfig(format!(
                "kernel requires a positive mass, got {m}"
            )));
        }
        static CACHE: OnceLock<Mutex<HashMap<(u64, u64, u64), Arc<KernelTable>>>> =
            OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let key = cache_key(m, tols.quad_tol, tols.tail_tol);
        if let Some(t) = cache.lock().unwrap().get(&key) {
            return Ok(t.clone());
        }
        let table = Arc::new(Self::build(m, tols)?);
        cache.lock().unwrap().insert(key, table.clone());
        Ok(table)
    }

    fn build(m: f64, tols: &Tolerances) -> Result<KernelTable> {
        if !(tols.tail_tol >= 1e-14 && tols.tail_tol <= 1e-4) {
            return Err(RcmpsError::InvalidConfig(format!(
                "tail_tol {} outside [1e-14, 1e-4]",
                tols.tail_tol
            )));
        }
        let quad_tol = (tols.quad_tol * 0.1).clamp(1e-13, 1e-8);
        let x_min = 1e-8 / m;
        let x_switch = 1.0 / m;
        let x_max = 40.0 / m;
        let pad = 16usize;

        // Logarithmic region: g(e^z) on a uniform z-grid.
        let hz = 0.02;
        let z_lo = x_min.ln() - pad as f64 * hz;
        let z_hi = x_switch.ln() + pad as f64 * hz;
        let n_log = ((z_hi - z_lo) / hz).ceil() as usize + 1;
        let hz = (z_hi - z_lo) / (n_log - 1) as f64;
        let mut ylog = Vec::with_capacity(n_log);
        for i in 0..n_log {
            let x = (z_lo + i as f64 * hz).exp();
            ylog.push(x.sqrt() * j_direct(m, x, quad_tol));
        }
        let log_spline = UniformSpline::build(z_lo, hz, ylog);

        // Linear region. h = 0.02/m keeps the natural-cubic interpolation
        // error of g below ~2e-9 relative across the table.
        let hx = 0.02 / m;
        let xl_lo = x_switch - pad as f64 * hx;
        let xl_hi = x_max + pad as f64 * hx;
        let n_lin = ((xl_hi - xl_lo) / hx).ceil() as usize + 1;
        let hx = (xl_hi - xl_lo) / (n_lin - 1) as f64;
        let mut ylin = Vec::with_capacity(n_lin);
        for i in 0..n_lin {
            let x = xl_lo + i as f64 * hx;
            ylin.push(x.sqrt() * j_direct(m, x, quad_tol));
        }

        // Tail cutoff: first linear-grid node past x_switch with J <= tail_tol.
        let mut x_tail = x_max;
        let mut found = false;
        for (i, yv) in ylin.iter().enumerate() {
            let x = xl_lo + i as f64 * hx;
            if x < x_switch {
                continue;
            }
            if yv / x.sqrt() <= tols.tail_tol {
                x_tail = x;
                found = true;
                break;
            }
        }
        if !found {
            return Err(RcmpsError::InvalidConfig(format!(
                "tail_tol {} not reached by x = {x_max} (mass {m})",
                tols.tail_tol
            )));
        }
        let lin_spline = UniformSpline::build(xl_lo, hx, ylin);

        // Sub-table coefficients: g(x) = G0 + j0 sqrt(x) + j1 x, fitted at
        // x_min/4 and x_min (2x2 Vandermonde in s = sqrt(x)).
        let s1 = x_min.sqrt();
        let g_half = (0.25 * x_min).sqrt() * j_direct(m, 0.25 * x_min, quad_tol);
        let g_full = s1 * j_direct(m, x_min, quad_tol);
        let (b1, b2) = (g_half - G0, g_full - G0);
        // [s1/2, s1^2/4; s1, s1^2] [j0; j1] = [b1; b2]
        let det = 0.5 * s1 * s1 * s1 - 0.25 * s1 * s1 * s1;
        let j0_fit = (b1 * s1 * s1 - b2 * 0.25 * s1 * s1) / det;
        let j1_fit = (b2 * 0.5 * s1 - b1 * s1) / det;

        // Int_R J = 2 [ Int_0^delta + Int_delta^x_max ], first part in the
        // v = sqrt(x) variable: dx = 2v dv turns the integrand into the
        // smooth 2 v J(v^2) = 2 g(v^2).
        let delta = 0.01 / m;
        let mut f_small = |v: f64| {
            if v == 0.0 {
                2.0 * G0
            } else {
                2.0 * v * j_direct(m, v * v, quad_tol)
            }
        };
        let part_small = gl_adaptive(&mut f_small, 0.0, delta.sqrt(), quad_tol);
        let mut f_large = |x: f64| j_direct(m, x, quad_tol);
        // Geometric panels from delta to x_max.
        let mut part_large = 0.0;
        let rule = gl_rule(32);
        let mut a = delta;
        while a < x_max {
            let b = (a * 2.0).min(x_max);
            part_large += gl_panel(&mut f_large, a, b, &rule);
            a = b;
        }
        let integral_j = 2.0 * (part_small + part_large);

        Ok(KernelTable {
            m,
            x_min,
            x_switch,
            x_max,
            x_tail,
            tail_tol: tols.tail_tol,
            log_spline,
            lin_spline,
            j0_fit,
            j1_fit,
            integral_j,
        })
    }

    /// Mass this table was built for.
    pub fn mass(&self) -> f64 {
        self.m
    }

    /// g(x) = sqrt(|x|) J(|x|); the combination that stays smooth through
    /// x = 0 (g(0) = 1/(2 sqrt(pi))). Zero beyond the table range.
    pub fn sqrt_scaled_j(&self, x: f64) -> f64 {
        let x = x.abs();
        if x < self.x_min {
            G0 + self.j0_fit * x.sqrt() + self.j1_fit * x
        } else if x <= self.x_switch {
            self.log_spline.eval(x.ln())
        } else if x <= self.x_max {
            self.lin_spline.eval(x)
        } else {
            0.0
        }
    }

    /// J(x). Errors at exactly x = 0, where J diverges like 1/(2 sqrt(pi|x|)).
    pub fn j(&self, x: f64) -> Result<f64> {
        if x == 0.0 {
            return Err(RcmpsError::KernelSingularity("J"));
        }
        let ax = x.abs();
        if ax > self.x_max {
            return Ok(0.0);
        }
        Ok(self.sqrt_scaled_j(ax) / ax.sqrt())
    }

    /// (J*J)(s) = K0(m|s|)/(2 pi). Errors at exactly s = 0 (log divergence).
    pub fn jj(&self, s: f64) -> Result<f64> {
        if s == 0.0 {
            return Err(RcmpsError::KernelSingularity("J*J"));
        }
        Ok(bessel_k0(self.m * s.abs()) / (2.0 * std::f64::consts::PI))
    }

    /// `Int_0^a (J*J)(s) ds` for small `a` (analytic strip; requires
    /// m a <= 0.05).
    pub fn jj_integral_small(&self, a: f64) -> f64 {
        k0_integral_small(self.m * a) / (2.0 * std::f64::consts::PI * self.m)
    }

    /// Distance beyond which |J| stays below the build's `tail_tol`; the
    /// moment ODEs integrate over [-x_tail, x_tail].
    pub fn x_tail(&self) -> f64 {
        self.x_tail
    }

    /// End of the tabulated range (J treated as 0 beyond).
    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    /// The tail tolerance the table was built with.
    pub fn tail_tol(&self) -> f64 {
        self.tail_tol
    }

    /// `Int_R J dx` from build-time quadrature (equals 1/sqrt(2m) exactly).
    pub fn integral_j(&self) -> f64 {
        self.integral_j
    }

    /// Distance beyond which (J*J)(s) stays below `tol`.
    pub fn jj_cut(&self, tol: f64) -> f64 {
        k0_threshold(2.0 * std::f64::consts::PI * tol) / self.m
    }
}
