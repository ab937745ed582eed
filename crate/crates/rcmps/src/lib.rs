//! Variational ground states of a two-field scalar QFT in 1+1 dimensions,
//! built on relativistic continuous matrix product states (RCMPS).
//!
//! The ansatz `|Q, R_1, R_2>` is parameterized by a Hermitian gauge generator
//! `K` (with `Q = -iK - (1/2) sum_j R_j^dag R_j`) and two field matrices
//! `R_1`, `R_2` of bond dimension D. The crate computes the energy density of
//! the normal-ordered Hamiltonian with interaction
//! `g(:phi_1^4: + :phi_2^4:) + 2 lambda :phi_1^2::phi_2^2:`, its Riemannian
//! gradient restricted to the regular submanifold `[R_1, R_2] = 0`, and
//! ground-state observables, and wraps them in a projected gradient-descent
//! optimizer.
//!
//! Modules follow the pipeline:
//!
//! - [`state`]: the matrix data, gauge structure, transfer map and its fixed
//!   point.
//! - [`kernel`]: the half-power smearing kernel J and its convolution square.
//! - [`expectation`]: energy density and field moments via spatially ordered
//!   moment ODEs and kinetic correlators.
//! - [`gradient`]: exact gradients of the computed energy through the
//!   discrete adjoint of the whole evaluation pipeline.
//! - [`manifold`]: tangent-space projection onto the regularity constraint
//!   and the commutant-projected retraction.
//! - [`optimizer`]: Armijo backtracking gradient descent with deterministic
//!   initialization, seeding and bond-dimension embedding.
//! - [`observables`]: vacuum expectation values, quartic moments, and the
//!   half-chain entanglement entropy.

pub mod error;
pub mod expectation;
pub mod gradient;
pub mod kernel;
pub mod linalg;
pub mod manifold;
pub mod observables;
pub mod optimizer;
pub mod state;

pub(crate) mod krylov;
pub(crate) mod ode;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{RcmpsError, Result};
pub use expectation::{energy_density, moments, EnergyParts, EnergyReport, ModelParams, MomentHierarchy};
pub use gradient::{
    euclidean_partials, gradient_report, metric, riemannian_gradient, GradientReport,
    TangentVector,
};
pub use kernel::KernelTable;
pub use manifold::{project_tangent, retract, tangent_constraint, CLUSTER_TOL, FEAS_TOL};
pub use state::RcmpsState;

/// Numerical tolerances shared across the evaluation pipeline.
///
/// The defaults reproduce every accuracy contract the test suite checks; they
/// are grouped in one struct so that a single configuration object describes
/// an entire run.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Relative tolerance of the adaptive ODE integrations (moment hierarchy
    /// and kinetic correlators). The absolute tolerance is tied to it as
    /// `1e-2 * ode_tol`.
    pub ode_tol: f64,
    /// Relative target of build-time quadratures (kernel table, identities).
    pub quad_tol: f64,
    /// Regularity guard: energy evaluation refuses states with
    /// `||[R_1, R_2]||_F > reg_tol`.
    pub reg_tol: f64,
    /// Relative eigenvalue cutoff of the fixed-point pseudo-inverse.
    pub pinv_tol: f64,
    /// Residual target of the transfer fixed-point solve, relative to the
    /// generator scale.
    pub fp_tol: f64,
    /// Relative residual target of the tangent-projection solve.
    pub gmres_tol: f64,
    /// Kernel support cutoff: the moment ODEs integrate over the window
    /// where |J| exceeds this.
    pub tail_tol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            ode_tol: 1e-9,
            quad_tol: 1e-10,
            reg_tol: 1e-10,
            pinv_tol: 1e-12,
            fp_tol: 1e-12,
            gmres_tol: 1e-10,
            tail_tol: 1e-10,
        }
    }
}

impl Tolerances {
    /// Check that every tolerance lies in a sane range.
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("ode_tol", self.ode_tol, 1e-13, 1e-4),
            ("quad_tol", self.quad_tol, 1e-13, 1e-4),
            ("reg_tol", self.reg_tol, 1e-14, 1e-2),
            ("pinv_tol", self.pinv_tol, 1e-16, 1e-2),
            ("fp_tol", self.fp_tol, 1e-14, 1e-4),
            ("gmres_tol", self.gmres_tol, 1e-14, 1e-4),
            ("tail_tol", self.tail_tol, 1e-14, 1e-4),
        ];
        for (name, v, lo, hi) in checks {
            if !(v.is_finite() && v >= lo && v <= hi) {
                return Err(RcmpsError::InvalidConfig(format!(
                    "{name} = {v:e} outside [{lo:e}, {hi:e}]"
                )));
            }
        }
        Ok(())
    }

    /// Absolute ODE tolerance used alongside [`Tolerances::ode_tol`].
    pub(crate) fn ode_atol(&self) -> f64 {
        1e-2 * self.ode_tol
    }
}
