//! Riemannian gradient descent on the regular submanifold.
//!
//! The loop is the projected-gradient scheme specialized to this geometry:
//! evaluate `h_reg` and its Riemannian gradient, project onto the tangent
//! space of `[R_1, R_2] = 0`, backtrack along the retraction of the
//! negative projected gradient until the Armijo condition
//!
//! ```text
//! h(Ret_p(-alpha grad)) <= h(p) - armijo_c * alpha * |grad|_g^2
//! ```
//!
//! holds, accept, repeat. Two invariants are enforced rather than assumed:
//! every accepted iterate is regular (the retraction guarantees a
//! commutator residual below [`crate::manifold::FEAS_TOL`]) and the energy
//! record is monotone non-increasing (Armijo acceptance with a positive
//! decrease term).
//!
//! Failure policy: a trial point that cannot be evaluated (fixed-point or
//! solver error on an overlong step) counts as a failed Armijo test and the
//! step shrinks — the same response as to an energy increase. Only failures
//! at an accepted base point abort the run; the trace then carries the
//! error text and the last good iterate is returned. If the line search
//! shrinks below `ALPHA_MIN` without an acceptable point, the run stops
//! with [`TerminalStatus::Stalled`].
//!
//! # The non-injective boundary
//!
//! Injective states form an open set: as `rho_0` loses rank the transfer
//! gap closes and the state approaches the boundary of the chart on which
//! the metric is nondegenerate. Exact product vacua live *on* that
//! boundary, not inside it, so a run attracted to one (the free theory is
//! the canonical case) converges in energy while `rho_0` purifies. The
//! components of `R_j` supported outside the shrinking range of `rho_0`
//! decouple from every observable — they are exactly flat directions of
//! `h_reg` — so the parameter norm `|R_j|_F` stalls at the junk content of
//! the initial draw even as `h_reg` and the particle densities
//! `tr[R_j rho_0 R_j^dag]` fall to roundoff. Physical quantities converge;
//! raw parameter norms need not. [`OptimizerConfig::rho_floor`] guards the
//! boundary: a guarded search refuses trial iterates whose smallest
//! fixed-point eigenvalue drops below the floor, halting as stalled at the
//! boundary instead of entering it. The guard is diagnostic — projected
//! descent has no tangential motion along the boundary, so it cannot shed
//! the flat junk either way.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RcmpsError, Result};
use crate::expectation::{energy_given_fp, ModelParams};
use crate::gradient::{gradient_with, metric, TangentVector};
use crate::kernel::KernelTable;
use crate::linalg::{fro_norm, herm_part, identity, zeros, C64};
use crate::manifold::{project_tangent_with, retract};
use crate::state::{FixedPoint, RcmpsState, StateParts};
use crate::Tolerances;

/// Line-search floor: shrinking below this step without an acceptable point
/// terminates the run as stalled.
const ALPHA_MIN: f64 = 1e-14;

/// Warm-start growth of the trial step after an accepted iteration.
const ALPHA_GROWTH: f64 = 2.0;

/// Cap on the warm-started trial step.
const ALPHA_MAX: f64 = 10.0;

/// Descent-loop parameters. Defaults reproduce the published runs; every
/// field is plain data so configurations serialize into run artifacts.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Iteration budget.
    pub max_iters: usize,
    /// Convergence threshold on the g-norm of the projected gradient.
    pub grad_tol: f64,
    /// Armijo sufficient-decrease constant, in (0, 1/2).
    pub armijo_c: f64,
    /// Step-shrink factor of the backtracking search, in (0, 1).
    pub backtrack_factor: f64,
    /// Trial step entering the first iteration.
    pub alpha_init: f64,
    /// Seed for every stochastic choice (initialization, seed fan-out).
    pub seed: u64,
    /// Magnitude of random initial `K` and `R` entries.
    pub init_scale: f64,
    /// Identity-shift magnitude of [`symmetry_seeded_init`].
    pub symmetry_seed_epsilon: f64,
    /// Injectivity guard: smallest admissible fixed-point eigenvalue along
    /// the line search (0 disables the guard). See the module notes on the
    /// non-injective boundary.
    pub rho_floor: f64,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
    /// Where to write checkpoints; `None` disables.
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iters: 5000,
            grad_tol: 1e-6,
            armijo_c: 1e-4,
            backtrack_factor: 0.5,
            alpha_init: 0.1,
            seed: 0,
            init_scale: 0.1,
            symmetry_seed_epsilon: 1e-3,
            rho_floor: 0.0,
            checkpoint_every: 100,
            checkpoint_path: None,
        }
    }
}

impl OptimizerConfig {
    /// Check the documented invariants.
    pub fn validate(&self) -> Result<()> {
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(RcmpsError::InvalidConfig(format!(
                "backtrack_factor must lie in (0, 1), got {}",
                self.backtrack_factor
            )));
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 0.5) {
            return Err(RcmpsError::InvalidConfig(format!(
                "armijo_c must lie in (0, 1/2), got {}",
                self.armijo_c
            )));
        }
        if self.max_iters == 0 {
            return Err(RcmpsError::InvalidConfig(
                "max_iters must be at least 1".into(),
            ));
        }
        for (name, v) in [
            ("grad_tol", self.grad_tol),
            ("alpha_init", self.alpha_init),
            ("init_scale", self.init_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(RcmpsError::InvalidConfig(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if !(self.symmetry_seed_epsilon.is_finite() && self.symmetry_seed_epsilon >= 0.0) {
            return Err(RcmpsError::InvalidConfig(format!(
                "symmetry_seed_epsilon must be nonnegative, got {}",
                self.symmetry_seed_epsilon
            )));
        }
        if !(self.rho_floor.is_finite() && (0.0..1.0).contains(&self.rho_floor)) {
            return Err(RcmpsError::InvalidConfig(format!(
                "rho_floor must lie in [0, 1), got {}",
                self.rho_floor
            )));
        }
        Ok(())
    }

    /// FNV-1a hash of the serialized configuration, stored in checkpoints
    /// so a resume can detect a configuration mismatch.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// How a run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalStatus {
    /// Projected-gradient norm fell below `grad_tol`.
    Converged,
    /// Iteration budget exhausted.
    MaxIters,
    /// Line search shrank below `ALPHA_MIN` without an acceptable step.
    Stalled,
    /// Evaluation failed at an accepted iterate; see
    /// [`OptimizationTrace::error`].
    Failed,
}

/// One evaluated iterate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Iteration index (0 = initial point).
    pub iter: usize,
    /// Energy density at this iterate.
    pub h_reg: f64,
    /// g-norm of the projected gradient at this iterate.
    pub grad_norm: f64,
    /// Step accepted *from* this iterate (0 on the terminal record).
    pub alpha: f64,
    /// `||[R_1, R_2]||_F` at this iterate.
    pub commutator_residual: f64,
    /// Seconds since the run started, at record time.
    pub wall_time: f64,
}

/// Full descent history plus the terminal status.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub records: Vec<IterationRecord>,
    pub status: TerminalStatus,
    /// Failure detail when `status == Failed`.
    pub error: Option<String>,
    /// Total wall time of the run in seconds.
    pub total_time: f64,
}

impl OptimizationTrace {
    /// Energy at the last evaluated iterate.
    pub fn final_h(&self) -> Option<f64> {
        self.records.last().map(|r| r.h_reg)
    }

    /// Projected-gradient norm at the last evaluated iterate.
    pub fn final_grad_norm(&self) -> Option<f64> {
        self.records.last().map(|r| r.grad_norm)
    }
}

/// Checkpoint artifact: enough to continue a run bit-for-bit (state, the
/// warm-started step entering the next iteration, counters, and the hash of
/// the configuration that produced it).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Format version of this artifact.
    pub schema_version: u32,
    /// Iteration index of the stored state.
    pub iter: usize,
    /// Trial step entering the next iteration.
    pub alpha: f64,
    /// Energy at the stored state.
    pub h_reg: f64,
    /// [`OptimizerConfig::hash`] of the producing configuration.
    pub config_hash: String,
    /// The iterate itself.
    pub state: StateParts,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| RcmpsError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RcmpsError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        serde_json::from_str(&text)
            .map_err(|e| RcmpsError::InvalidState(format!("checkpoint parse: {e}")))
    }
}

/// Random point on the regular submanifold: `R_j = U diag(d_j) U^dag` with
/// a common random unitary `U` (so the R's commute by construction) and a
/// random Hermitian `K`, all entries of magnitude `~init_scale`.
///
/// Deterministic: equal `(D, seed, init_scale)` give bitwise-equal states.
pub fn random_regular_init(d: usize, seed: u64, init_scale: f64) -> RcmpsState {
    assert!(d >= 1, "bond dimension must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |scale: f64| {
        let re = rng.gen_range(-scale..scale);
        let im = rng.gen_range(-scale..scale);
        C64::new(re, im)
    };
    // Unitary from the eigenbasis of a random Hermitian matrix.
    let mut a = zeros(d);
    for entry in a.iter_mut() {
        *entry = draw(1.0);
    }
    let (_, u) = crate::linalg::eigh(&herm_part(&a), "random init eigenbasis")
        .expect("random Hermitian matrices are diagonalizable");
    let udag = crate::linalg::dagger(&u);
    let mut r = Vec::with_capacity(2);
    for _ in 0..2 {
        let mut diag = zeros(d);
        for i in 0..d {
            diag[[i, i]] = draw(init_scale);
        }
        r.push(u.dot(&diag).dot(&udag));
    }
    let mut kdraw = zeros(d);
    for entry in kdraw.iter_mut() {
        *entry = draw(init_scale);
    }
    let k = herm_part(&kdraw);
    let r2 = r.pop().expect("two fields");
    let r1 = r.pop().expect("two fields");
    RcmpsState::new(k, r1, r2).expect("construction is regular and Hermitian")
}

/// Which fields receive the symmetry-breaking bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymmetryPattern {
    /// Bias `<phi_1>` and `<phi_2>` together.
    BothFields,
    /// Bias only `<phi_1>`.
    Field1Only,
}

/// Shift `R_1` (and `R_2` under [`SymmetryPattern::BothFields`]) by
/// `epsilon * I` to bias the corresponding vacuum expectation values away
/// from zero. Identity shifts commute with everything, so regularity is
/// preserved exactly.
pub fn symmetry_seeded_init(
    base: &RcmpsState,
    pattern: SymmetryPattern,
    epsilon: f64,
) -> RcmpsState {
    let shift = identity(base.dim()).mapv(|z| z * epsilon);
    let r1 = base.r(0) + &shift;
    let r2 = match pattern {
        SymmetryPattern::BothFields => base.r(1) + &shift,
        SymmetryPattern::Field1Only => base.r(1).clone(),
    };
    RcmpsState::new(base.k().clone(), r1, r2).expect("identity shift keeps the state valid")
}

/// Enlarge the bond dimension for a warm start: the original `K` and `R_j`
/// occupy the leading block, the new sector gets small random diagonal `R`
/// entries, and `K` receives a small random coupling between the sectors.
///
/// Pure zero padding would leave the transfer map block-decoupled with a
/// degenerate fixed point (the state would not even be evaluable); the
/// couplings, entering only through the Hermitian `K`, keep the embedded
/// state regular *exactly* — both `R_j'` stay block-diagonal with diagonal
/// new blocks — while restoring injectivity. `scale` controls the new
/// entries; equal inputs give bitwise-equal outputs.
pub fn embed(p: &RcmpsState, d_new: usize, seed: u64, scale: f64) -> Result<RcmpsState> {
    let d = p.dim();
    if d_new < d {
        return Err(RcmpsError::InvalidConfig(format!(
            "embed target D = {d_new} is smaller than the current D = {d}"
        )));
    }
    if d_new == d {
        return Ok(p.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |s: f64| {
        let re = rng.gen_range(-s..s);
        let im = rng.gen_range(-s..s);
        C64::new(re, im)
    };
    let mut k = zeros(d_new);
    let mut r1 = zeros(d_new);
    let mut r2 = zeros(d_new);
    for i in 0..d {
        for j in 0..d {
            k[[i, j]] = p.k()[[i, j]];
            r1[[i, j]] = p.r(0)[[i, j]];
            r2[[i, j]] = p.r(1)[[i, j]];
        }
    }
    for i in d..d_new {
        r1[[i, i]] = draw(scale);
        r2[[i, i]] = draw(scale);
        // Hermitian coupling row plus the new diagonal entry.
        for j in 0..i {
            let z = draw(scale);
            k[[i, j]] = z;
            k[[j, i]] = z.conj();
        }
        k[[i, i]] = C64::new(draw(scale).re, 0.0);
    }
    RcmpsState::new(k, r1, r2)
}

/// Everything the loop needs at an accepted iterate.
pub(crate) struct Eval {
    pub(crate) h: f64,
    pub(crate) grad_norm: f64,
    pub(crate) commutator_residual: f64,
    /// Negative projected gradient.
    pub(crate) direction: TangentVector,
}

pub(crate) fn evaluate(
    p: &RcmpsState,
    params: &ModelParams,
    kernel: &std::sync::Arc<KernelTable>,
    fp: &FixedPoint,
    tols: &Tolerances,
) -> Result<Eval> {
    let report = gradient_with(p, params, kernel, fp, tols)?;
    let proj = project_tangent_with(p, fp, &report.gradient, tols)?;
    let grad_norm = metric(fp.rho(), &proj, &proj).max(0.0).sqrt();
    let direction = TangentVector {
        w1: proj.w1.mapv(|z| -z),
        w2: proj.w2.mapv(|z| -z),
    };
    Ok(Eval {
        h: report.energy.h_reg,
        grad_norm,
        commutator_residual: report.energy.commutator_residual,
        direction,
    })
}

/// Minimize `h_reg` from `p0` by projected gradient descent with Armijo
/// backtracking. See the module docs for the loop and the failure policy.
///
/// Returns the best (last accepted) iterate together with the full trace.
/// Errors are returned only for precondition violations — invalid
/// configuration or parameters, or a `p0` that cannot be evaluated at all;
/// runtime failures after the first iterate end the run with
/// [`TerminalStatus::Failed`] and the last good iterate preserved.
pub fn minimize(
    p0: &RcmpsState,
    params: &ModelParams,
    cfg: &OptimizerConfig,
    tols: &Tolerances,
) -> Result<(RcmpsState, OptimizationTrace)> {
    minimize_from(p0, params, cfg, tols, None)
}

/// [`minimize`] with an explicit warm-started first trial step, used when
/// resuming from a [`Checkpoint`] (pass `Some(checkpoint.alpha)`). With
/// `None` the first trial step is `cfg.alpha_init`.
pub fn minimize_from(
    p0: &RcmpsState,
    params: &ModelParams,
    cfg: &OptimizerConfig,
    tols: &Tolerances,
    alpha0: Option<f64>,
) -> Result<(RcmpsState, OptimizationTrace)> {
    cfg.validate()?;
    params.validate()?;
    tols.validate()?;
    let kernel = KernelTable::shared(params.m, tols)?;
    let start = Instant::now();
    let config_hash = cfg.hash();

    let mut p = p0.clone();
    let fp0 = p.transfer().fixed_point(tols)?;
    let mut cur = evaluate(&p, params, &kernel, &fp0, tols)?;
    let mut alpha = alpha0.unwrap_or(cfg.alpha_init).clamp(ALPHA_MIN, ALPHA_MAX);

    let mut records: Vec<IterationRecord> = Vec::new();
    let mut status = TerminalStatus::MaxIters;
    let mut error: Option<String> = None;

    let record = |iter: usize, cur: &Eval, alpha: f64, records: &mut Vec<IterationRecord>| {
        records.push(IterationRecord {
            iter,
            h_reg: cur.h,
            grad_norm: cur.grad_norm,
            alpha,
            commutator_residual: cur.commutator_residual,
            wall_time: start.elapsed().as_secs_f64(),
        });
    };
    let checkpoint = |iter: usize, p: &RcmpsState, cur: &Eval, alpha: f64, force: bool| {
        let Some(path) = &cfg.checkpoint_path else {
            return;
        };
        if cfg.checkpoint_every == 0 || (!force && iter % cfg.checkpoint_every != 0) {
            return;
        }
        let art = Checkpoint {
            schema_version: 1,
            iter,
            alpha,
            h_reg: cur.h,
            config_hash: config_hash.clone(),
            state: p.to_parts(),
        };
        if let Err(e) = art.save(path) {
            log::warn!("checkpoint write failed: {e}");
        }
    };

    for iter in 0..cfg.max_iters {
        if iter > 0 {
            checkpoint(iter, &p, &cur, alpha, false);
        }
        if cur.grad_norm < cfg.grad_tol {
            status = TerminalStatus::Converged;
            record(iter, &cur, 0.0, &mut records);
            break;
        }
        // Backtracking Armijo search along Ret_p(-a * grad).
        let decrease = cfg.armijo_c * cur.grad_norm * cur.grad_norm;
        let mut a = alpha;
        let mut accepted: Option<(RcmpsState, FixedPoint)> = None;
        while a >= ALPHA_MIN {
            let trial = match retract(&p, &cur.direction, a) {
                Ok(t) => t,
                Err(_) => {
                    a *= cfg.backtrack_factor;
                    continue;
                }
            };
            let outcome = trial.transfer().fixed_point(tols).and_then(|fp| {
                energy_given_fp(&trial, params, &kernel, &fp, tols, true).map(|rep| (fp, rep))
            });
            match outcome {
                Ok((fp, rep))
                    if rep.h_reg <= cur.h - a * decrease
                        && (cfg.rho_floor == 0.0 || fp.evals()[0] >= cfg.rho_floor) =>
                {
                    accepted = Some((trial, fp));
                    break;
                }
                _ => a *= cfg.backtrack_factor,
            }
        }
        let Some((p_new, fp_new)) = accepted else {
            status = TerminalStatus::Stalled;
            record(iter, &cur, 0.0, &mut records);
            break;
        };
        record(iter, &cur, a, &mut records);
        match evaluate(&p_new, params, &kernel, &fp_new, tols) {
            Ok(next) => {
                p = p_new;
                cur = next;
            }
            Err(e) => {
                // Keep the last fully evaluated iterate.
                status = TerminalStatus::Failed;
                error = Some(e.to_string());
                break;
            }
        }
        alpha = (a * ALPHA_GROWTH).min(ALPHA_MAX);
        if iter + 1 == cfg.max_iters {
            record(iter + 1, &cur, 0.0, &mut records);
        }
    }

    // Terminal checkpoint so a finished run can always be resumed.
    checkpoint(records.last().map_or(0, |r| r.iter), &p, &cur, alpha, true);
    let trace = OptimizationTrace {
        records,
        status,
        error,
        total_time: start.elapsed().as_secs_f64(),
    };
    Ok((p, trace))
}

/// Cold-start strategy for a nonconvex landscape: run [`minimize`] from
/// `k` random regular initializations (seeds fanned out deterministically
/// from `cfg.seed`) and keep the lowest final energy. Runs that fail
/// outright are skipped; if every run fails, the last error is returned.
pub fn best_of_seeds(
    d: usize,
    params: &ModelParams,
    cfg: &OptimizerConfig,
    tols: &Tolerances,
    k: usize,
) -> Result<(RcmpsState, OptimizationTrace)> {
    assert!(k >= 1, "need at least one seed");
    let mut best: Option<(RcmpsState, OptimizationTrace)> = None;
    let mut last_err = None;
    for i in 0..k {
        let seed = cfg
            .seed
            .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1));
        let p0 = random_regular_init(d, seed, cfg.init_scale);
        match minimize(&p0, params, cfg, tols) {
            Ok((p, trace)) => {
                let h = trace.final_h().unwrap_or(f64::INFINITY);
                let better = best
                    .as_ref()
                    .and_then(|(_, t)| t.final_h())
                    .map_or(true, |cur| h < cur);
                if better {
                    best = Some((p, trace));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match best {
        Some(out) => Ok(out),
        None => Err(last_err.expect("k >= 1 runs attempted")),
    }
}
