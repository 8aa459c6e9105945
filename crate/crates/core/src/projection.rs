//! Differentiable KL trust-region projection.
//!
//! Forward: if `KL(target || reference) <= epsilon` the target passes through
//! unchanged. Otherwise the dual is solved for `eta*` and the target is replaced
//! by the normalized geometric interpolation
//! `log pi = log_softmax((log target + eta* log reference) / (eta* + 1))`,
//! which lies on the epsilon sphere around the reference.
//!
//! Backward: the reference is a constant. At fixed `eta*` the interpolation is a
//! log-softmax, and `eta*` itself depends on the target through the active
//! constraint `KL(pi || reference) = epsilon`; implicit differentiation gives
//!
//! ```text
//! d eta*/d target = [q ⊙ (w - <q, w>)] / (η+1)  ÷  ( -Cov_q(w, Δ) / (η+1)² )
//! ```
//!
//! with `q = pi`, `w = log q - log reference` and `Δ = log reference - log target`.
//! Nothing is materialized beyond a handful of length-`m` vectors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dual_solver::{solve_dual, BracketingParams, DualProblem, DualSolution};
use crate::error::{Error, Result};
use crate::sparse_dist::{align_supports, kl, SparseDist, SparsifyParams};

/// Every scalar hyperparameter of the trust-region machinery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrustRegionConfig {
    /// KL bound (nats).
    pub epsilon: f64,
    /// Weight of the regression towards the projected distribution.
    pub alpha: f64,
    pub sparsify: SparsifyParams,
    pub bracketing: BracketingParams,
    /// Clip range of the PPO-style baseline.
    pub clip_epsilon: f64,
    pub chunk_size: usize,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            alpha: 1.0,
            sparsify: SparsifyParams::default(),
            bracketing: BracketingParams::default(),
            clip_epsilon: 0.2,
            chunk_size: 1024,
        }
    }
}

impl TrustRegionConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::Config(format!(
                "clip_epsilon must lie in (0, 1), got {}",
                self.clip_epsilon
            )));
        }
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk_size must be >= 1".into()));
        }
        self.bracketing.validate()
    }
}

/// Gradient with respect to the log-probabilities of a [`SparseDist`]:
/// one entry per kept token plus the summed gradient of all dropped tokens
/// (they share the single default log-probability).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseGradient {
    pub kept: Vec<f64>,
    pub default: f64,
}

impl SparseGradient {
    pub fn zeros(num_kept: usize) -> Self {
        Self {
            kept: vec![0.0; num_kept],
            default: 0.0,
        }
    }

    /// `scale` on kept position `pos`, zero elsewhere.
    pub fn one_hot(num_kept: usize, pos: usize, scale: f64) -> Self {
        let mut g = Self::zeros(num_kept);
        g.kept[pos] = scale;
        g
    }

    pub fn add_assign(&mut self, other: &SparseGradient) {
        debug_assert_eq!(self.kept.len(), other.kept.len());
        for (a, b) in self.kept.iter_mut().zip(&other.kept) {
            *a += b;
        }
        self.default += other.default;
    }

    pub fn is_finite(&self) -> bool {
        self.default.is_finite() && self.kept.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.kept.iter().fold(self.default.abs(), |m, x| m.max(x.abs()))
    }

    /// Maps a gradient on `support` onto the smaller `ids` (a subset). Entries
    /// of ids outside `ids` were copies of the default and fold into it.
    pub fn restrict(&self, support: &[usize], ids: &[usize]) -> SparseGradient {
        let mut out = SparseGradient::zeros(ids.len());
        out.default = self.default;
        let mut j = 0;
        for (&id, &g) in support.iter().zip(&self.kept) {
            if j < ids.len() && ids[j] == id {
                out.kept[j] = g;
                j += 1;
            } else {
                out.default += g;
            }
        }
        out
    }
}

/// Forward record of one projection, kept for the backward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionOutcome {
    /// Projected distribution on the union support of target and reference.
    pub projected: SparseDist,
    pub eta_star: f64,
    pub was_projected: bool,
    pub kl_before: f64,
    pub kl_after: f64,
    /// Solver statistics; `None` for pass-through positions.
    pub solver: Option<DualSolution>,
}

/// Projects `target` onto the epsilon-KL ball around `reference`.
pub fn project(
    target: &SparseDist,
    reference: &SparseDist,
    config: &TrustRegionConfig,
) -> Result<ProjectionOutcome> {
    project_with(target, reference, config.epsilon, &config.bracketing)
}

pub fn project_with(
    target: &SparseDist,
    reference: &SparseDist,
    epsilon: f64,
    bracketing: &BracketingParams,
) -> Result<ProjectionOutcome> {
    let (target, reference) = align_supports(target, reference)?;
    let kl_before = kl(&target, &reference)?;
    if !(kl_before > epsilon) {
        if kl_before.is_nan() {
            return Err(Error::Domain("KL is NaN".into()));
        }
        return Ok(ProjectionOutcome {
            projected: target,
            eta_star: 0.0,
            was_projected: false,
            kl_before,
            kl_after: kl_before,
            solver: None,
        });
    }
    let problem = DualProblem::new(&target, &reference, epsilon)?;
    let solution = solve_dual(&problem, bracketing)?;
    let (log_probs, default) = problem.interpolate(solution.eta);
    let projected = SparseDist::from_parts_unchecked(
        target.vocab_size(),
        target.kept_ids().to_vec(),
        log_probs,
        default,
    );
    let kl_after = kl(&projected, &reference)?;
    Ok(ProjectionOutcome {
        projected,
        eta_star: solution.eta,
        was_projected: true,
        kl_before,
        kl_after,
        solver: Some(solution),
    })
}

/// Projects independent positions in parallel; order is preserved.
pub fn project_batch(
    pairs: &[(SparseDist, SparseDist)],
    config: &TrustRegionConfig,
) -> Result<Vec<ProjectionOutcome>> {
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, (t, r))| project(t, r, config).map_err(|e| Error::at(i, e)))
        .collect()
}

/// Vector-Jacobian product of [`project`].
///
/// `upstream` is the gradient with respect to `outcome.projected`'s
/// log-probabilities; the result is the gradient with respect to the target's
/// log-probabilities on the same (union) support.
pub fn project_vjp(
    outcome: &ProjectionOutcome,
    target: &SparseDist,
    reference: &SparseDist,
    upstream: &SparseGradient,
) -> Result<SparseGradient> {
    let q = &outcome.projected;
    if upstream.kept.len() != q.num_kept() {
        return Err(Error::Validation(format!(
            "upstream has {} entries, projected support has {}",
            upstream.kept.len(),
            q.num_kept()
        )));
    }
    if !outcome.was_projected {
        return Ok(upstream.clone());
    }
    if !(outcome.eta_star > 0.0) {
        return Err(Error::InconsistentOutcome(
            "projected outcome with eta* = 0".into(),
        ));
    }
    let (target, reference) = align_supports(target, reference)?;
    if !target.same_support(q) {
        return Err(Error::SupportMismatch(
            "target support differs from the projected support".into(),
        ));
    }

    let eta = outcome.eta_star;
    let inv = 1.0 / (eta + 1.0);
    let n = q.num_dropped() as f64;
    let lq = q.kept_log_probs();
    let la = target.kept_log_probs();
    let lb = reference.kept_log_probs();
    let (lqd, lad, lbd) = (
        q.default_log_prob(),
        target.default_log_prob(),
        reference.default_log_prob(),
    );
    // probability mass of all dropped tokens together
    let qd_total = if n > 0.0 { (lqd + n.ln()).exp() } else { 0.0 };

    // expectations under q, the default pseudo-token weighted by its multiplicity
    let mut upstream_sum = upstream.default;
    let mut q_delta = qd_total * (lbd - lad);
    let mut u_delta = upstream.default * (lbd - lad);
    let mut q_w = qd_total * (lqd - lbd);
    let mut q_w_delta = qd_total * (lqd - lbd) * (lbd - lad);
    for i in 0..lq.len() {
        let qi = lq[i].exp();
        let delta = lb[i] - la[i];
        let w = lq[i] - lb[i];
        upstream_sum += upstream.kept[i];
        q_delta += qi * delta;
        u_delta += upstream.kept[i] * delta;
        q_w += qi * w;
        q_w_delta += qi * w * delta;
    }

    // upstream · d log q / d eta
    let u_dlogq_deta = (u_delta - upstream_sum * q_delta) * inv * inv;
    // -(w · dq/d eta); positive while the constraint is active
    let denominator = -(q_w_delta - q_w * q_delta) * inv * inv;
    if !(denominator.abs() > 0.0) || !denominator.is_finite() {
        return Err(Error::InconsistentOutcome(format!(
            "degenerate implicit derivative denominator {denominator}"
        )));
    }
    let coupling = u_dlogq_deta / denominator;

    let kept = (0..lq.len())
        .map(|i| {
            let qi = lq[i].exp();
            let w = lq[i] - lb[i];
            let direct = (upstream.kept[i] - qi * upstream_sum) * inv;
            let deta = qi * (w - q_w) * inv;
            direct + coupling * deta
        })
        .collect();
    let default = if n > 0.0 {
        let direct = (upstream.default - qd_total * upstream_sum) * inv;
        let deta = qd_total * ((lqd - lbd) - q_w) * inv;
        direct + coupling * deta
    } else {
        0.0
    };
    Ok(SparseGradient { kept, default })
}
