//! Surrogate objectives and group advantage estimators.
//!
//! All objectives are maximized. Gradients are partial derivatives with
//! respect to the normalized log-probabilities of each token's new
//! distribution, laid out on the union support of the new and old
//! distributions. Ratios are formed in log space; tokens whose log ratio
//! exceeds [`MAX_LOG_RATIO`] are skipped and counted.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::{project, project_vjp, SparseGradient, TrustRegionConfig};
use crate::sparse_dist::{align_supports, kl, SparseDist};

pub const MAX_LOG_RATIO: f64 = 50.0;
pub const GRPO_STD_FLOOR: f64 = 1e-8;

/// One generated token: old (rollout-time) and new (current) distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub old: SparseDist,
    pub new: SparseDist,
    pub sampled: usize,
    pub advantage: f64,
    /// Index of the sequence this token belongs to. Tokens of a sequence are contiguous.
    pub sequence: usize,
}

/// How per-token terms are reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Sum over tokens divided by the total token count.
    TokenMean,
    /// Mean over sequences of the per-sequence token mean.
    SequenceMean,
    /// Sum over tokens divided by `sequences * max_len`.
    ConstantLength(usize),
}

/// Which update rule produces the per-token (or per-sequence) term.
#[derive(Debug, Clone, Copy)]
pub enum Surrogate<'a> {
    Ratio,
    Clip { epsilon: f64 },
    Troll(&'a TrustRegionConfig),
}

/// Diagnostics accumulated while evaluating an objective.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveStats {
    pub tokens: usize,
    pub skipped: usize,
    pub clipped: usize,
    pub projected: usize,
    /// Mean `eta*` over projected tokens (0 if none).
    pub mean_eta_star: f64,
    pub mean_kl_before: f64,
    pub mean_kept_tokens: f64,
}

impl ObjectiveStats {
    pub fn clipped_fraction(&self) -> f64 {
        fraction(self.clipped, self.tokens)
    }

    pub fn projected_fraction(&self) -> f64 {
        fraction(self.projected, self.tokens)
    }
}

fn fraction(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Gradient of one token's contribution, on `support` (union of the token's
/// new and old kept ids).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenGradient {
    pub support: Vec<usize>,
    pub grad: SparseGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveOutput {
    pub value: f64,
    pub grads: Vec<TokenGradient>,
    pub stats: ObjectiveStats,
}

/// Per-token forward state shared by the token- and sequence-level paths.
struct Prepared {
    support: Vec<usize>,
    new: SparseDist,
    old: SparseDist,
    pos: usize,
    log_ratio: f64,
    kl_before: f64,
    projection: Option<crate::projection::ProjectionOutcome>,
}

fn prepare(record: &TokenRecord, surrogate: Surrogate<'_>) -> Result<Prepared> {
    if !record.advantage.is_finite() {
        return Err(Error::Validation(format!(
            "non-finite advantage {}",
            record.advantage
        )));
    }
    let (new, old) = align_supports(&record.new, &record.old)?;
    let pos = new.position(record.sampled).ok_or_else(|| {
        Error::SupportMismatch(format!("sampled token {} is not kept", record.sampled))
    })?;
    if record.new.position(record.sampled).is_none() || record.old.position(record.sampled).is_none() {
        return Err(Error::SupportMismatch(format!(
            "sampled token {} must be kept by both distributions",
            record.sampled
        )));
    }
    let (kl_before, projection) = match surrogate {
        Surrogate::Troll(config) => {
            let outcome = project(&new, &old, config)?;
            (outcome.kl_before, Some(outcome))
        }
        _ => (kl(&new, &old)?, None),
    };
    // ratio on the projected distribution where one exists
    let policy = projection.as_ref().map_or(&new, |o| &o.projected);
    let log_ratio = policy.kept_log_probs()[pos] - old.kept_log_probs()[pos];
    Ok(Prepared {
        support: new.kept_ids().to_vec(),
        new,
        old,
        pos,
        log_ratio,
        kl_before,
        projection,
    })
}

/// `KL(new || stopgrad(projected))` and its centered gradient with respect
/// to the new log-probabilities.
fn regression(new: &SparseDist, projected: &SparseDist) -> Result<(f64, SparseGradient)> {
    let value = kl(new, projected)?;
    let kept = new
        .kept_log_probs()
        .iter()
        .zip(projected.kept_log_probs())
        .map(|(&a, &b)| a.exp() * ((a - b) - value))
        .collect();
    let n = new.num_dropped();
    let default = if n > 0 {
        let a = new.default_log_prob();
        (a + (n as f64).ln()).exp() * ((a - projected.default_log_prob()) - value)
    } else {
        0.0
    };
    Ok((value, SparseGradient { kept, default }))
}

/// Per-token weights implied by `aggregation`; `seq_len[t]` is the length of
/// token t's sequence.
fn token_weights(records: &[TokenRecord], aggregation: Aggregation) -> Result<Vec<f64>> {
    let mut lengths: Vec<usize> = Vec::new();
    let mut prev: Option<usize> = None;
    let mut seen = std::collections::HashSet::new();
    for r in records {
        if prev != Some(r.sequence) {
            if !seen.insert(r.sequence) {
                return Err(Error::Validation(format!(
                    "tokens of sequence {} are not contiguous",
                    r.sequence
                )));
            }
            lengths.push(0);
            prev = Some(r.sequence);
        }
        *lengths.last_mut().unwrap() += 1;
    }
    let sequences = lengths.len() as f64;
    let mut weights = Vec::with_capacity(records.len());
    for &len in &lengths {
        let w = match aggregation {
            Aggregation::TokenMean => 1.0 / records.len() as f64,
            Aggregation::SequenceMean => 1.0 / (sequences * len as f64),
            Aggregation::ConstantLength(max_len) => {
                if max_len < len {
                    return Err(Error::Validation(format!(
                        "sequence of length {len} exceeds constant length {max_len}"
                    )));
                }
                1.0 / (sequences * max_len as f64)
            }
        };
        weights.extend(std::iter::repeat_n(w, len));
    }
    Ok(weights)
}

/// `min(r A, clip(r) A)` and whether the clipped branch is strictly binding.
fn clipped_term(ratio: f64, advantage: f64, epsilon: f64) -> (f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    if clipped < unclipped {
        (clipped, true)
    } else {
        (unclipped, false)
    }
}

fn prepare_all(records: &[TokenRecord], surrogate: Surrogate<'_>) -> Result<Vec<Prepared>> {
    records
        .par_iter()
        .enumerate()
        .map(|(i, r)| prepare(r, surrogate).map_err(|e| Error::at(i, e)))
        .collect()
}

fn finish_stats(stats: &mut ObjectiveStats, prepared: &[Prepared]) {
    stats.tokens = prepared.len();
    let n = prepared.len().max(1) as f64;
    stats.mean_kl_before = prepared.iter().map(|p| p.kl_before).sum::<f64>() / n;
    stats.mean_kept_tokens = prepared.iter().map(|p| p.support.len() as f64).sum::<f64>() / n;
    let etas: Vec<f64> = prepared
        .iter()
        .filter_map(|p| p.projection.as_ref())
        .filter(|o| o.was_projected)
        .map(|o| o.eta_star)
        .collect();
    stats.projected = etas.len();
    stats.mean_eta_star = if etas.is_empty() {
        0.0
    } else {
        etas.iter().sum::<f64>() / etas.len() as f64
    };
}

/// Adds the regression term (projected tokens only) and maps the ratio
/// upstream through the projection where applicable.
fn token_gradient(
    p: &Prepared,
    ratio_upstream: f64,
    weight: f64,
    surrogate: Surrogate<'_>,
) -> Result<(f64, SparseGradient)> {
    let m = p.support.len();
    let upstream = SparseGradient::one_hot(m, p.pos, ratio_upstream);
    match (surrogate, &p.projection) {
        (Surrogate::Troll(config), Some(outcome)) if outcome.was_projected => {
            let mut grad = project_vjp(outcome, &p.new, &p.old, &upstream)?;
            let (reg, mut reg_grad) = regression(&p.new, &outcome.projected)?;
            let scale = -config.alpha * weight;
            reg_grad.kept.iter_mut().for_each(|g| *g *= scale);
            reg_grad.default *= scale;
            grad.add_assign(&reg_grad);
            Ok((scale * reg, grad))
        }
        _ => Ok((0.0, upstream)),
    }
}

/// Token-level objective: `sum_t w_t * term_t` with `term_t` chosen by `surrogate`.
pub fn token_objective(
    records: &[TokenRecord],
    surrogate: Surrogate<'_>,
    aggregation: Aggregation,
) -> Result<ObjectiveOutput> {
    if let Surrogate::Troll(config) = surrogate {
        config.validate()?;
    }
    let weights = token_weights(records, aggregation)?;
    let prepared = prepare_all(records, surrogate)?;
    let mut stats = ObjectiveStats::default();
    finish_stats(&mut stats, &prepared);

    let terms: Vec<Result<(f64, SparseGradient, bool, bool)>> = prepared
        .par_iter()
        .zip(records)
        .zip(&weights)
        .map(|((p, r), &w)| {
            if p.log_ratio > MAX_LOG_RATIO {
                return Ok((0.0, SparseGradient::zeros(p.support.len()), false, true));
            }
            let ratio = p.log_ratio.exp();
            let (term, clipped) = match surrogate {
                Surrogate::Clip { epsilon } => clipped_term(ratio, r.advantage, epsilon),
                _ => (ratio * r.advantage, false),
            };
            let upstream = if clipped { 0.0 } else { w * ratio * r.advantage };
            let (reg, grad) = token_gradient(p, upstream, w, surrogate)?;
            Ok((w * term + reg, grad, clipped, false))
        })
        .collect();

    let mut value = 0.0;
    let mut grads = Vec::with_capacity(records.len());
    for (i, (t, p)) in terms.into_iter().zip(&prepared).enumerate() {
        let (v, grad, clipped, skipped) = t.map_err(|e| Error::at(i, e))?;
        value += v;
        stats.clipped += clipped as usize;
        stats.skipped += skipped as usize;
        grads.push(TokenGradient {
            support: p.support.clone(),
            grad,
        });
    }
    Ok(ObjectiveOutput { value, grads, stats })
}

/// Plain importance-ratio objective.
pub fn ratio_objective(records: &[TokenRecord], aggregation: Aggregation) -> Result<ObjectiveOutput> {
    token_objective(records, Surrogate::Ratio, aggregation)
}

/// PPO-style clipped objective.
pub fn clip_objective(
    records: &[TokenRecord],
    clip_epsilon: f64,
    aggregation: Aggregation,
) -> Result<ObjectiveOutput> {
    if !(clip_epsilon > 0.0 && clip_epsilon < 1.0) {
        return Err(Error::Config(format!(
            "clip epsilon must lie in (0, 1), got {clip_epsilon}"
        )));
    }
    token_objective(records, Surrogate::Clip { epsilon: clip_epsilon }, aggregation)
}

/// Trust-region objective: ratio on the projected distribution minus the
/// weighted regression `KL(new || stopgrad(projected))` on projected tokens.
pub fn troll_objective(
    records: &[TokenRecord],
    config: &TrustRegionConfig,
    aggregation: Aggregation,
) -> Result<ObjectiveOutput> {
    token_objective(records, Surrogate::Troll(config), aggregation)
}

/// Geometric-mean token ratio `exp(mean(log pi - log pi_old))`.
pub fn gspo_sequence_ratio(log_probs: &[f64], old_log_probs: &[f64]) -> Result<f64> {
    if log_probs.is_empty() || log_probs.len() != old_log_probs.len() {
        return Err(Error::Validation(format!(
            "need equal non-empty lengths, got {} and {}",
            log_probs.len(),
            old_log_probs.len()
        )));
    }
    if log_probs.iter().chain(old_log_probs).any(|x| !x.is_finite()) {
        return Err(Error::Domain("log-probabilities must be finite".into()));
    }
    let mean = log_probs
        .iter()
        .zip(old_log_probs)
        .map(|(a, b)| a - b)
        .sum::<f64>()
        / log_probs.len() as f64;
    Ok(mean.exp())
}

/// Sequence-level objective: the geometric-mean ratio of each sequence replaces
/// the token ratios, clipped or computed on projected distributions as
/// `surrogate` dictates. Sequences are averaged; the regression term uses
/// sequence-mean token weights.
pub fn gspo_objective(records: &[TokenRecord], surrogate: Surrogate<'_>) -> Result<ObjectiveOutput> {
    if let Surrogate::Troll(config) = surrogate {
        config.validate()?;
    }
    let weights = token_weights(records, Aggregation::SequenceMean)?;
    let prepared = prepare_all(records, surrogate)?;
    let mut stats = ObjectiveStats::default();
    finish_stats(&mut stats, &prepared);

    let mut value = 0.0;
    let mut grads = Vec::with_capacity(records.len());
    let mut start = 0;
    while start < records.len() {
        let seq = records[start].sequence;
        let end = start + records[start..].iter().take_while(|r| r.sequence == seq).count();
        let len = (end - start) as f64;
        let advantage = records[start].advantage;
        let seq_weight = weights[start] * len;
        let log_s = prepared[start..end].iter().map(|p| p.log_ratio).sum::<f64>() / len;
        let (term, clipped, skipped) = if log_s > MAX_LOG_RATIO {
            (0.0, false, true)
        } else {
            let s = log_s.exp();
            match surrogate {
                Surrogate::Clip { epsilon } => {
                    let (t, c) = clipped_term(s, advantage, epsilon);
                    (t, c, false)
                }
                _ => (s * advantage, false, false),
            }
        };
        value += seq_weight * term;
        let per_token = if clipped || skipped {
            0.0
        } else {
            seq_weight * log_s.exp() * advantage / len
        };
        for t in start..end {
            let (reg, grad) =
                token_gradient(&prepared[t], per_token, weights[t], surrogate).map_err(|e| Error::at(t, e))?;
            value += reg;
            stats.clipped += clipped as usize;
            stats.skipped += skipped as usize;
            grads.push(TokenGradient {
                support: prepared[t].support.clone(),
                grad,
            });
        }
        start = end;
    }
    Ok(ObjectiveOutput { value, grads, stats })
}

fn check_group(rewards: &[f64]) -> Result<()> {
    if rewards.len() < 2 {
        return Err(Error::Validation(format!(
            "group size must be >= 2, got {}",
            rewards.len()
        )));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::Validation("rewards must be finite".into()));
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `(r - mean) / max(population std, 1e-8)`.
pub fn grpo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    check_group(rewards)?;
    let m = mean(rewards);
    let var = rewards.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / rewards.len() as f64;
    let std = var.sqrt().max(GRPO_STD_FLOOR);
    Ok(rewards.iter().map(|r| (r - m) / std).collect())
}

/// `r - mean`.
pub fn drgrpo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    check_group(rewards)?;
    let m = mean(rewards);
    Ok(rewards.iter().map(|r| r - m).collect())
}
