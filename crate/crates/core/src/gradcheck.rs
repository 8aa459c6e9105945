//! Central finite-difference verification of [`project_vjp`].
//!
//! Each perturbation bumps one target log-probability (or the shared default)
//! by `±h`, renormalizes, and re-runs the full projection including the dual
//! solve. Because the projected output only depends on the target through a
//! softmax, its gradient sums to zero and the renormalization Jacobian is the
//! identity on it, so analytic and numeric gradients compare directly.
//!
//! Instances where a perturbation flips the projection branch sit on the
//! constraint-activation kink and are excluded from the tolerance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dual_solver::BracketingParams;
use crate::error::{Error, Result};
use crate::logspace::logsumexp_with_repeated;
use crate::projection::{project_vjp, project_with, SparseGradient};
use crate::sparse_dist::{align_supports, kl, SparseDist};
use crate::synthetic::{random_pair, random_violated_pair};

/// How one instance fared.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum InstanceCheck {
    /// In-region instance whose VJP returned the upstream bit for bit.
    IdentityExact,
    /// In-region instance whose VJP differs from the upstream.
    IdentityMismatch,
    /// Projected instance compared against finite differences.
    Compared { rel_error: f64 },
    /// A `±h` perturbation crossed the constraint boundary.
    ExcludedKink,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    /// Projected instances to draw.
    pub trials: usize,
    /// In-region instances to draw.
    pub in_region_trials: usize,
    pub vocab_min: usize,
    pub vocab_max: usize,
    pub epsilons: Vec<f64>,
    pub h: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            trials: 500,
            in_region_trials: 100,
            vocab_min: 3,
            vocab_max: 64,
            epsilons: vec![0.01, 0.05, 0.25],
            h: 1e-6,
            tolerance: 1e-4,
        }
    }
}

impl GradCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1e-8..=1e-4).contains(&self.h) {
            return Err(Error::Config(format!("h must lie in [1e-8, 1e-4], got {}", self.h)));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("tolerance must be > 0".into()));
        }
        if self.vocab_min < 2 || self.vocab_max < self.vocab_min {
            return Err(Error::Config(format!(
                "invalid vocab range {}..={}",
                self.vocab_min, self.vocab_max
            )));
        }
        if self.epsilons.is_empty() || self.epsilons.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::Config("epsilons must be non-empty and positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckFailure {
    pub trial: usize,
    pub vocab_size: usize,
    pub epsilon: f64,
    pub check: InstanceCheck,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub compared: usize,
    pub identity_exact: usize,
    pub excluded_kink: usize,
    pub max_rel_error: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Shifts one log-probability (`None` = the shared default) by `h` and renormalizes.
pub fn perturb(d: &SparseDist, pos: Option<usize>, h: f64) -> SparseDist {
    let mut lp = d.kept_log_probs().to_vec();
    let mut default = d.default_log_prob();
    match pos {
        Some(i) => lp[i] += h,
        None => default += h,
    }
    let lse = logsumexp_with_repeated(&lp, default, d.num_dropped());
    SparseDist::from_parts_unchecked(
        d.vocab_size(),
        d.kept_ids().to_vec(),
        lp.iter().map(|x| x - lse).collect(),
        default - lse,
    )
}

fn max_abs_diff(a: &SparseGradient, b: &SparseGradient) -> f64 {
    a.kept
        .iter()
        .zip(&b.kept)
        .fold((a.default - b.default).abs(), |m, (x, y)| m.max((x - y).abs()))
}

/// `‖analytic − numeric‖∞ / max(‖numeric‖∞, tiny)`.
pub fn relative_error(analytic: &SparseGradient, numeric: &SparseGradient) -> f64 {
    max_abs_diff(analytic, numeric) / numeric.max_abs().max(f64::MIN_POSITIVE)
}

/// Checks `project_vjp` on one pair against central differences of
/// `<upstream, log pi>`.
pub fn check_instance(
    target: &SparseDist,
    reference: &SparseDist,
    epsilon: f64,
    upstream: &SparseGradient,
    h: f64,
) -> Result<InstanceCheck> {
    let params = BracketingParams::precise();
    let (target, reference) = align_supports(target, reference)?;
    let base = project_with(&target, &reference, epsilon, &params)?;
    let analytic = project_vjp(&base, &target, &reference, upstream)?;
    if !base.was_projected {
        return Ok(if analytic == *upstream {
            InstanceCheck::IdentityExact
        } else {
            InstanceCheck::IdentityMismatch
        });
    }

    let mut kink = false;
    let mut eval = |d: &SparseDist| -> Result<f64> {
        let o = project_with(d, &reference, epsilon, &params)?;
        kink |= !o.was_projected;
        let p = &o.projected;
        Ok(p.kept_log_probs()
            .iter()
            .zip(&upstream.kept)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + upstream.default * p.default_log_prob())
    };
    let mut numeric = SparseGradient::zeros(target.num_kept());
    for i in 0..target.num_kept() {
        let plus = eval(&perturb(&target, Some(i), h))?;
        let minus = eval(&perturb(&target, Some(i), -h))?;
        numeric.kept[i] = (plus - minus) / (2.0 * h);
    }
    if target.num_dropped() > 0 {
        let plus = eval(&perturb(&target, None, h))?;
        let minus = eval(&perturb(&target, None, -h))?;
        numeric.default = (plus - minus) / (2.0 * h);
    }
    if kink {
        return Ok(InstanceCheck::ExcludedKink);
    }
    Ok(InstanceCheck::Compared {
        rel_error: relative_error(&analytic, &numeric),
    })
}

fn random_upstream<R: Rng + ?Sized>(rng: &mut R, d: &SparseDist) -> SparseGradient {
    SparseGradient {
        kept: (0..d.num_kept()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        default: if d.num_dropped() > 0 {
            rng.gen_range(-1.0..1.0)
        } else {
            0.0
        },
    }
}

/// In-region pair: small drifts until the KL falls below `epsilon`.
fn random_in_region_pair<R: Rng + ?Sized>(
    rng: &mut R,
    vocab_size: usize,
    epsilon: f64,
) -> (SparseDist, SparseDist) {
    let mut drift = 0.2;
    loop {
        let scale = rng.gen_range(0.5..3.0);
        let (t, r) = random_pair(rng, vocab_size, scale, drift);
        if kl(&t, &r).unwrap() <= epsilon {
            return (t, r);
        }
        drift *= 0.5;
    }
}

/// Runs the randomized check described by `config`.
pub fn check_gradient<R: Rng + ?Sized>(config: &GradCheckConfig, rng: &mut R) -> Result<GradCheckReport> {
    config.validate()?;
    let mut report = GradCheckReport::default();
    let total = config.trials + config.in_region_trials;
    for trial in 0..total {
        let vocab_size = rng.gen_range(config.vocab_min..=config.vocab_max);
        let epsilon = config.epsilons[rng.gen_range(0..config.epsilons.len())];
        let (t, r) = if trial < config.trials {
            random_violated_pair(rng, vocab_size, epsilon)
        } else {
            random_in_region_pair(rng, vocab_size, epsilon)
        };
        let upstream = random_upstream(rng, &t);
        let check = check_instance(&t, &r, epsilon, &upstream, config.h)?;
        let failed = match check {
            InstanceCheck::IdentityExact => {
                report.identity_exact += 1;
                false
            }
            InstanceCheck::IdentityMismatch => true,
            InstanceCheck::ExcludedKink => {
                report.excluded_kink += 1;
                false
            }
            InstanceCheck::Compared { rel_error } => {
                report.compared += 1;
                report.max_rel_error = report.max_rel_error.max(rel_error);
                !(rel_error < config.tolerance)
            }
        };
        if failed {
            report.failures.push(GradCheckFailure {
                trial,
                vocab_size,
                epsilon,
                check,
            });
        }
    }
    Ok(report)
}
