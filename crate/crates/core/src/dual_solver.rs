//! Scalar dual of the KL projection and its n-ary bracketing solver.
//!
//! For a step size `eta >= 0` the primal solution is the geometric
//! interpolation `pi(eta) ∝ exp((log target + eta * log reference) / (eta + 1))`.
//! `KL(pi(eta) || reference)` decreases monotonically from `KL(target || reference)`
//! at `eta = 0` towards zero as `eta -> inf`, and the optimal `eta*` is where it
//! crosses `epsilon` (stationarity of the dual). The solver brackets that
//! crossing in log-eta space, shrinking the bracket by a factor `num_points + 1`
//! per step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logspace::logsumexp_with_repeated;
use crate::sparse_dist::{kl_shared, SparseDist};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BracketingParams {
    pub log_eta_lower: f64,
    pub log_eta_upper: f64,
    /// Interior evaluation points per refinement step.
    pub num_points: usize,
    pub max_steps: usize,
    /// Convergence width of the bracket in log-eta.
    pub x_threshold: f64,
}

impl Default for BracketingParams {
    fn default() -> Self {
        Self {
            log_eta_lower: -18.0,
            log_eta_upper: 18.0,
            num_points: 8,
            max_steps: 40,
            x_threshold: 1e-10,
        }
    }
}

impl BracketingParams {
    /// Tight settings used by oracles and the gradient checker, where the
    /// bracket is driven down to a few ulps of log-eta.
    pub fn precise() -> Self {
        Self {
            max_steps: 100,
            x_threshold: 1e-14,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.log_eta_lower < self.log_eta_upper) {
            return Err(Error::Config("log_eta_lower must be < log_eta_upper".into()));
        }
        if !(self.log_eta_lower.is_finite() && self.log_eta_upper.is_finite()) {
            return Err(Error::Config("log-eta bracket must be finite".into()));
        }
        if self.num_points < 2 {
            return Err(Error::Config("num_points must be >= 2".into()));
        }
        if self.max_steps < 1 {
            return Err(Error::Config("max_steps must be >= 1".into()));
        }
        if !(self.x_threshold > 0.0) {
            return Err(Error::Config("x_threshold must be > 0".into()));
        }
        Ok(())
    }
}

/// A projection dual on a shared sparse support.
///
/// Dropped tokens enter as one pseudo-token of multiplicity `dropped`.
#[derive(Debug, Clone, Copy)]
pub struct DualProblem<'a> {
    target: &'a [f64],
    reference: &'a [f64],
    target_default: f64,
    reference_default: f64,
    dropped: usize,
    epsilon: f64,
}

impl<'a> DualProblem<'a> {
    pub fn new(target: &'a SparseDist, reference: &'a SparseDist, epsilon: f64) -> Result<Self> {
        if !target.same_support(reference) {
            return Err(Error::SupportMismatch(
                "dual problem requires identical supports".into(),
            ));
        }
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {epsilon}")));
        }
        Ok(Self {
            target: target.kept_log_probs(),
            reference: reference.kept_log_probs(),
            target_default: target.default_log_prob(),
            reference_default: reference.default_log_prob(),
            dropped: target.num_dropped(),
            epsilon,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    #[inline]
    fn mix(&self, a: f64, b: f64, eta: f64) -> f64 {
        (a + eta * b) / (eta + 1.0)
    }

    /// Log-normalizer of the interpolated logits.
    fn log_normalizer(&self, eta: f64) -> f64 {
        let max = self
            .target
            .iter()
            .zip(self.reference)
            .map(|(&a, &b)| self.mix(a, b, eta))
            .fold(f64::NEG_INFINITY, f64::max);
        let dz = self.mix(self.target_default, self.reference_default, eta);
        let max = if self.dropped > 0 {
            max.max(dz + (self.dropped as f64).ln())
        } else {
            max
        };
        let mut sum: f64 = self
            .target
            .iter()
            .zip(self.reference)
            .map(|(&a, &b)| (self.mix(a, b, eta) - max).exp())
            .sum();
        if self.dropped > 0 {
            sum += (dz + (self.dropped as f64).ln() - max).exp();
        }
        max + sum.ln()
    }

    /// `KL(pi(eta) || reference)`. At `eta = 0` this is exactly `KL(target || reference)`.
    pub fn kl_at(&self, eta: f64) -> f64 {
        if eta == 0.0 {
            return kl_shared(
                self.target,
                self.target_default,
                self.reference,
                self.reference_default,
                self.dropped,
            );
        }
        // Same arithmetic as evaluating `kl` on the interpolated distribution,
        // so the feasibility of the returned eta carries over bitwise.
        let (log_probs, default) = self.interpolate(eta);
        kl_shared(
            &log_probs,
            default,
            self.reference,
            self.reference_default,
            self.dropped,
        )
    }

    /// Constraint residual `KL(pi(eta) || reference) - epsilon`.
    pub fn residual(&self, eta: f64) -> f64 {
        self.kl_at(eta) - self.epsilon
    }

    /// `D(eta) = -eta * epsilon - (eta + 1) * logsumexp((log target + eta log reference) / (eta + 1))`.
    pub fn dual_value(&self, eta: f64) -> Result<f64> {
        if !(eta >= 0.0) {
            return Err(Error::Domain(format!("eta must be >= 0, got {eta}")));
        }
        Ok(-eta * self.epsilon - (eta + 1.0) * self.log_normalizer(eta))
    }

    /// Normalized interpolated log-probabilities (kept entries, default).
    pub fn interpolate(&self, eta: f64) -> (Vec<f64>, f64) {
        let z: Vec<f64> = self
            .target
            .iter()
            .zip(self.reference)
            .map(|(&a, &b)| self.mix(a, b, eta))
            .collect();
        let zd = self.mix(self.target_default, self.reference_default, eta);
        let lse = logsumexp_with_repeated(&z, zd, self.dropped);
        (z.into_iter().map(|x| x - lse).collect(), zd - lse)
    }
}

/// Result of [`solve_dual`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualSolution {
    pub eta: f64,
    pub iterations: usize,
    /// False when `max_steps` ran out before the bracket width reached `x_threshold`.
    pub converged: bool,
    /// `KL(pi(eta) || reference) - epsilon` at the returned eta.
    pub residual: f64,
}

/// Shrinks `[lo, hi]` with `f(lo) > 0 >= f(hi)` around the sign change.
fn bracket_root(
    f: impl Fn(f64) -> f64,
    mut lo: f64,
    mut hi: f64,
    num_points: usize,
    max_steps: usize,
    x_threshold: f64,
) -> (f64, f64, usize, bool) {
    let segments = (num_points + 1) as f64;
    for step in 0..max_steps {
        if hi - lo < x_threshold {
            return (lo, hi, step, true);
        }
        let width = hi - lo;
        let mut new_lo = lo;
        let mut new_hi = hi;
        for k in 1..=num_points {
            let x = lo + width * (k as f64 / segments);
            if f(x) <= 0.0 {
                new_hi = x;
                break;
            }
            new_lo = x;
        }
        if new_lo == lo && new_hi == hi {
            // bracket cannot shrink further in floating point
            return (lo, hi, step + 1, true);
        }
        lo = new_lo;
        hi = new_hi;
    }
    let converged = hi - lo < x_threshold;
    (lo, hi, max_steps, converged)
}

/// Finds `eta*` with `KL(pi(eta*) || reference) = epsilon`.
///
/// Requires `KL(target || reference) >= epsilon`; equality returns `eta* = 0`.
pub fn solve_dual(problem: &DualProblem<'_>, params: &BracketingParams) -> Result<DualSolution> {
    params.validate()?;
    let eps = problem.epsilon;
    let kl0 = problem.kl_at(0.0);
    if kl0 < eps || kl0.is_nan() {
        return Err(Error::NotViolated { kl: kl0, epsilon: eps });
    }
    if kl0 == eps {
        return Ok(DualSolution {
            eta: 0.0,
            iterations: 0,
            converged: true,
            residual: 0.0,
        });
    }

    let eta_upper = params.log_eta_upper.exp();
    let at_upper = problem.residual(eta_upper);
    if at_upper > 0.0 {
        return Err(Error::BracketExhausted {
            kl_at_upper: at_upper + eps,
            eta_upper,
            epsilon: eps,
        });
    }

    let eta_lower = params.log_eta_lower.exp();
    // The upper end of the final bracket is always on the feasible side.
    let (eta, iterations, converged) = if problem.residual(eta_lower) > 0.0 {
        let (_, hi, it, conv) = bracket_root(
            |log_eta| problem.residual(log_eta.exp()),
            params.log_eta_lower,
            params.log_eta_upper,
            params.num_points,
            params.max_steps,
            params.x_threshold,
        );
        (hi.exp(), it, conv)
    } else {
        // Root below exp(log_eta_lower): bracket linearly on [0, eta_lower].
        let (_, hi, it, conv) = bracket_root(
            |eta| problem.residual(eta),
            0.0,
            eta_lower,
            params.num_points,
            params.max_steps,
            params.x_threshold * eta_lower,
        );
        (hi, it, conv)
    };
    Ok(DualSolution {
        eta,
        iterations,
        converged,
        residual: problem.residual(eta),
    })
}

/// Solves independent problems; errors carry the element index.
pub fn solve_dual_batch(
    problems: &[DualProblem<'_>],
    params: &BracketingParams,
) -> Result<Vec<DualSolution>> {
    problems
        .par_iter()
        .enumerate()
        .map(|(i, p)| solve_dual(p, params).map_err(|e| Error::at(i, e)))
        .collect()
}
