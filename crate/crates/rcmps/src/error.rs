//! Error type shared across the crate.
//!
//! Every failure mode that can reach a caller is enumerated here; internal
//! helpers return `Result<T>` with this error so that the optimizer and the
//! CLI can classify failures (configuration vs. numerical) without string
//! matching.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, RcmpsError>;

/// All user-visible failure modes.
#[derive(Debug, Error)]
pub enum RcmpsError {
    /// State construction rejected the input matrices.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// The transfer map has a (numerically) degenerate leading eigenvalue, so
    /// the fixed-point density is not unique and expectation values are
    /// ill-defined. Carries the gap estimate when one is available.
    #[error("non-injective state: transfer fixed point is degenerate (gap estimate {gap:.3e})")]
    NonInjectiveState {
        /// Estimated magnitude of the second-smallest transfer eigenvalue,
        /// relative to the generator scale.
        gap: f64,
    },

    /// Energy density was requested on a state outside the regular
    /// submanifold [R1, R2] = 0, where the divergent part of the Hamiltonian
    /// density does not vanish.
    #[error(
        "irregular state: ||[R1,R2]|| = {commutator_residual:.3e} exceeds reg_tol = {reg_tol:.3e} \
         (divergence coefficient {h_div_coefficient:.3e})"
    )]
    IrregularState {
        /// Frobenius norm of [R1, R2].
        commutator_residual: f64,
        /// Threshold that was violated.
        reg_tol: f64,
        /// Coefficient of the divergent energy contribution on this state.
        h_div_coefficient: f64,
    },

    /// An iterative linear solve (fixed point, tangent projection, adjoint
    /// solve) did not reach its tolerance within the iteration budget.
    #[error("{context}: GMRES stagnated at relative residual {residual:.3e} after {iterations} iterations (tol {tol:.3e})")]
    KrylovStagnation {
        /// Which solve failed.
        context: &'static str,
        /// Final relative residual.
        residual: f64,
        /// Requested relative tolerance.
        tol: f64,
        /// Matrix-vector products spent.
        iterations: usize,
    },

    /// The adaptive integrator could not maintain its error target.
    #[error("ODE step failure in {context}: step size {h:.3e} at x = {x:.6} (limit {limit:.3e})")]
    OdeStepFailure {
        /// Which integration failed.
        context: &'static str,
        /// Step size at failure.
        h: f64,
        /// Independent variable at failure.
        x: f64,
        /// Smallest admissible step.
        limit: f64,
    },

    /// The commutant projection inside the retraction could not restore
    /// [R1, R2] = 0 to tolerance, even after the fallback attempts.
    #[error("retraction failed: commutator residual {residual:.3e} after commutant projection (tol {tol:.3e})")]
    RetractionFailed {
        /// Residual after the best fallback attempt.
        residual: f64,
        /// Acceptance threshold.
        tol: f64,
    },

    /// Kernel evaluated at its singular point.
    #[error("kernel singularity: {0} is not defined at x = 0")]
    KernelSingularity(&'static str),

    /// A quantity with an exact mathematical property (realness of an
    /// expectation value, trace preservation) drifted past the health
    /// threshold, indicating an integration or conditioning problem.
    #[error("numerical integrity check failed in {context}: |{quantity}| = {value:.3e} exceeds {limit:.3e}")]
    NumericalIntegrity {
        /// Which computation tripped the check.
        context: &'static str,
        /// Name of the monitored quantity.
        quantity: &'static str,
        /// Observed magnitude.
        value: f64,
        /// Allowed magnitude.
        limit: f64,
    },

    /// A dense LAPACK routine failed (does not happen for well-formed input).
    #[error("dense linear algebra failure in {context}: {message}")]
    Linalg {
        /// Which routine failed.
        context: &'static str,
        /// Backend error text.
        message: String,
    },

    /// Invalid model or tolerance configuration.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Filesystem failure while reading or writing run artifacts
    /// (checkpoints, traces).
    #[error("i/o failure on {path}: {message}")]
    Io {
        /// Offending path.
        path: String,
        /// Underlying error text.
        message: String,
    },
}

impl RcmpsError {
    pub(crate) fn linalg(context: &'static str, err: impl std::fmt::Display) -> Self {
        RcmpsError::Linalg {
            context,
            message: err.to_string(),
        }
    }
}
