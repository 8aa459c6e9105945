//! Rollouts and the on-policy update loop.

use std::time::Instant;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dual_solver::BracketingParams;
use crate::error::{Error, Result};
use crate::logspace::entropy;
use crate::objectives::{
    drgrpo_advantages, grpo_advantages, gspo_objective, token_objective, Aggregation, ObjectiveOutput,
    Surrogate, TokenRecord,
};
use crate::projection::TrustRegionConfig;
use crate::sparse_dist::{sparsify, sparsify_vjp, DenseLogits, SparseDist, SparsifyParams};
use crate::toy_rlvr::policy::LinearSoftmaxPolicy;
use crate::toy_rlvr::task::{ToyTask, Transform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Troll,
    Clip,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Troll => "troll",
            Method::Clip => "clip",
        }
    }

    /// CSV column for the share of tokens the update rule intervened on.
    pub fn intervention_column(self) -> &'static str {
        match self {
            Method::Troll => "projected_fraction",
            Method::Clip => "clipped_fraction",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "troll" => Ok(Self::Troll),
            "clip" => Ok(Self::Clip),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Grpo,
    Drgrpo,
    Gspo,
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grpo" => Ok(Self::Grpo),
            "drgrpo" => Ok(Self::Drgrpo),
            "gspo" => Ok(Self::Gspo),
            other => Err(Error::Config(format!("unknown estimator {other:?}"))),
        }
    }
}

/// Every task, trainer and trust-region setting of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub vocab_size: usize,
    pub query_length: usize,
    pub transform: Transform,
    pub estimator: Estimator,
    pub steps: usize,
    pub num_queries: usize,
    pub group_size: usize,
    pub minibatches: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub max_grad_norm: f64,
    /// Supervised steps on the exact targets before reinforcement learning.
    pub pretrain_steps: usize,
    pub pretrain_learning_rate: f64,
    pub top_k: usize,
    pub delta: f64,
    pub p_default: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub clip_epsilon: f64,
    pub bracketing: BracketingParams,
    /// Steps averaged for the final-window summary.
    pub final_window: usize,
    /// Record wall-clock milliseconds per step (breaks byte-identical CSVs).
    pub wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            vocab_size: 17,
            query_length: 4,
            transform: Transform::Reverse,
            estimator: Estimator::Grpo,
            steps: 2000,
            num_queries: 4,
            group_size: 8,
            minibatches: 4,
            epochs: 1,
            learning_rate: 0.05,
            momentum: 0.0,
            max_grad_norm: 1.0,
            pretrain_steps: 110,
            pretrain_learning_rate: 3.0,
            top_k: 8,
            delta: 1e-3,
            p_default: 1e-12,
            epsilon: 0.05,
            alpha: 1.0,
            clip_epsilon: 0.2,
            bracketing: BracketingParams::default(),
            final_window: 100,
            wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn task(&self) -> ToyTask {
        ToyTask {
            vocab_size: self.vocab_size,
            query_length: self.query_length,
            transform: self.transform,
        }
    }

    pub fn sparsify(&self) -> SparsifyParams {
        SparsifyParams {
            top_k: self.top_k,
            delta: self.delta,
            p_default: self.p_default,
            forced_id: None,
        }
    }

    pub fn trust_region(&self) -> TrustRegionConfig {
        TrustRegionConfig {
            epsilon: self.epsilon,
            alpha: self.alpha,
            sparsify: self.sparsify(),
            bracketing: self.bracketing,
            clip_epsilon: self.clip_epsilon,
            ..TrustRegionConfig::default()
        }
    }

    pub fn aggregation(&self) -> Aggregation {
        match self.estimator {
            Estimator::Grpo => Aggregation::TokenMean,
            Estimator::Drgrpo => Aggregation::ConstantLength(self.task().max_response_len()),
            Estimator::Gspo => Aggregation::SequenceMean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task().validate()?;
        self.sparsify().validate(self.vocab_size)?;
        self.trust_region().validate()?;
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be >= 2".into()));
        }
        if self.num_queries == 0 || self.minibatches == 0 || self.epochs == 0 {
            return Err(Error::Config("num_queries, minibatches and epochs must be >= 1".into()));
        }
        if self.minibatches > self.num_queries * self.group_size {
            return Err(Error::Config("more minibatches than sequences".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.pretrain_learning_rate >= 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(Error::Config("max_grad_norm must be > 0".into()));
        }
        if self.final_window == 0 {
            return Err(Error::Config("final_window must be >= 1".into()));
        }
        Ok(())
    }
}

/// One sampled token with the rollout-time distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub features: Vec<usize>,
    pub sampled: usize,
    pub old: SparseDist,
    /// Entropy of the dense rollout distribution.
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRollout {
    pub query: Vec<usize>,
    pub steps: Vec<StepRecord>,
    pub reward: f64,
}

impl SequenceRollout {
    pub fn response(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.sampled).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRollouts {
    pub query: Vec<usize>,
    pub sequences: Vec<SequenceRollout>,
}

impl GroupRollouts {
    pub fn rewards(&self) -> Vec<f64> {
        self.sequences.iter().map(|s| s.reward).collect()
    }
}

/// Samples one response and returns it with its per-step records.
pub fn sample_sequence<R: Rng + ?Sized>(
    policy: &LinearSoftmaxPolicy,
    task: &ToyTask,
    query: &[usize],
    sparsify_params: &SparsifyParams,
    rng: &mut R,
) -> Result<SequenceRollout> {
    let mut steps = Vec::with_capacity(task.max_response_len());
    let mut prev = None;
    for t in 0..task.max_response_len() {
        let features = policy.features(query, t, prev);
        let log_probs = policy.log_probs(&features);
        let probs: Vec<f64> = log_probs.iter().map(|x| x.exp()).collect();
        let sampled = WeightedIndex::new(&probs)
            .map_err(|e| Error::Domain(format!("sampling weights: {e}")))?
            .sample(rng);
        let h = entropy(&log_probs);
        let old = sparsify(
            &DenseLogits::new(log_probs)?,
            &sparsify_params.with_forced(Some(sampled)),
        )?;
        steps.push(StepRecord {
            features,
            sampled,
            old,
            entropy: h,
        });
        prev = Some(sampled);
        if sampled == task.end_token() {
            break;
        }
    }
    let response: Vec<usize> = steps.iter().map(|s| s.sampled).collect();
    Ok(SequenceRollout {
        reward: task.reward(query, &response),
        query: query.to_vec(),
        steps,
    })
}

/// `group_size` responses for each of `num_queries` fresh queries.
pub fn rollout<R: Rng + ?Sized>(
    policy: &LinearSoftmaxPolicy,
    task: &ToyTask,
    num_queries: usize,
    group_size: usize,
    sparsify_params: &SparsifyParams,
    rng: &mut R,
) -> Result<Vec<GroupRollouts>> {
    if group_size < 2 {
        return Err(Error::Validation("group_size must be >= 2".into()));
    }
    (0..num_queries)
        .map(|_| {
            let query = task.sample_query(rng);
            let sequences = (0..group_size)
                .map(|_| sample_sequence(policy, task, &query, sparsify_params, rng))
                .collect::<Result<Vec<_>>>()?;
            Ok(GroupRollouts { query, sequences })
        })
        .collect()
}

/// Per-step metrics, in CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub objective: f64,
    pub success_rate: f64,
    pub entropy_mean: f64,
    /// Projected fraction for TROLL, clipped fraction for clip.
    pub intervention_fraction: f64,
    pub mean_eta_star: f64,
    pub mean_kl_before: f64,
    pub mean_kept_tokens: f64,
    pub wall_ms: f64,
    /// Non-finite gradient: parameters were left unchanged.
    pub aborted: bool,
}

impl StepMetrics {
    pub fn csv_header(method: Method) -> String {
        format!(
            "step,objective,success_rate,entropy_mean,{},mean_eta_star,mean_kl_before,mean_kept_tokens,wall_ms",
            method.intervention_column()
        )
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.objective,
            self.success_rate,
            self.entropy_mean,
            self.intervention_fraction,
            self.mean_eta_star,
            self.mean_kl_before,
            self.mean_kept_tokens,
            self.wall_ms
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub policy: LinearSoftmaxPolicy,
    pub velocity: Vec<f64>,
    pub step: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh zero policy followed by the configured supervised warm start.
    pub fn new(config: &TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let task = config.task();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut policy = LinearSoftmaxPolicy::zeros(&task);
        for _ in 0..config.pretrain_steps {
            pretrain_step(&mut policy, &task, config.num_queries, config.pretrain_learning_rate, &mut rng);
        }
        Ok(Self {
            velocity: vec![0.0; policy.num_parameters()],
            policy,
            step: 0,
            rng,
        })
    }
}

/// One SGD step on the teacher-forced log-likelihood of the exact targets.
pub fn pretrain_step<R: Rng + ?Sized>(
    policy: &mut LinearSoftmaxPolicy,
    task: &ToyTask,
    num_queries: usize,
    learning_rate: f64,
    rng: &mut R,
) {
    let v = task.vocab_size;
    let mut grad = vec![0.0; policy.num_parameters()];
    let mut count = 0usize;
    for _ in 0..num_queries {
        let query = task.sample_query(rng);
        let mut prev = None;
        for (t, &tok) in task.target(&query).iter().enumerate() {
            let features = policy.features(&query, t, prev);
            let log_probs = policy.log_probs(&features);
            let mut g = vec![0.0; v];
            g[tok] = 1.0;
            policy.accumulate_grad(&features, &log_probs, &g, &mut grad);
            prev = Some(tok);
            count += 1;
        }
    }
    let scale = learning_rate / count as f64;
    for (w, g) in policy.weights_mut().iter_mut().zip(&grad) {
        *w += scale * g;
    }
}

/// Advantage of every sequence, per group, for `estimator`.
pub fn group_advantages(groups: &[GroupRollouts], estimator: Estimator) -> Result<Vec<Vec<f64>>> {
    groups
        .iter()
        .map(|g| match estimator {
            Estimator::Drgrpo => drgrpo_advantages(&g.rewards()),
            Estimator::Grpo | Estimator::Gspo => grpo_advantages(&g.rewards()),
        })
        .collect()
}

/// Evaluates `method` on a minibatch of sequences and returns the objective
/// together with the gradient with respect to the policy weights.
pub fn minibatch_gradient(
    policy: &LinearSoftmaxPolicy,
    config: &TrainConfig,
    method: Method,
    sequences: &[(&SequenceRollout, f64)],
) -> Result<(ObjectiveOutput, Vec<f64>)> {
    let sp = config.sparsify();
    let mut records = Vec::new();
    let mut dense = Vec::new();
    for (s, (seq, advantage)) in sequences.iter().enumerate() {
        for step in &seq.steps {
            let log_probs = policy.log_probs(&step.features);
            let new = sparsify(
                &DenseLogits::new(log_probs.clone())?,
                &sp.with_forced(Some(step.sampled)),
            )?;
            records.push(TokenRecord {
                old: step.old.clone(),
                new,
                sampled: step.sampled,
                advantage: *advantage,
                sequence: s,
            });
            dense.push((&step.features, log_probs));
        }
    }
    let trust_region = config.trust_region();
    let surrogate = match method {
        Method::Troll => Surrogate::Troll(&trust_region),
        Method::Clip => Surrogate::Clip {
            epsilon: config.clip_epsilon,
        },
    };
    let out = match config.estimator {
        Estimator::Gspo => gspo_objective(&records, surrogate)?,
        _ => token_objective(&records, surrogate, config.aggregation())?,
    };

    let mut grad = vec![0.0; policy.num_parameters()];
    for ((record, token_grad), (features, log_probs)) in records.iter().zip(&out.grads).zip(&dense) {
        // Union entries outside the new support and the default are constants.
        let kept_ids = record.new.kept_ids();
        let on_new = token_grad.grad.restrict(&token_grad.support, kept_ids);
        let dense_grad = sparsify_vjp(log_probs, kept_ids, &on_new.kept);
        policy.accumulate_grad(features, log_probs, &dense_grad, &mut grad);
    }
    Ok((out, grad))
}

/// One rollout followed by `epochs x minibatches` updates.
pub fn train_step(state: &mut TrainState, config: &TrainConfig, method: Method) -> Result<StepMetrics> {
    let started = Instant::now();
    let task = config.task();
    let groups = rollout(
        &state.policy,
        &task,
        config.num_queries,
        config.group_size,
        &config.sparsify(),
        &mut state.rng,
    )?;
    let advantages = group_advantages(&groups, config.estimator)?;
    let flat: Vec<(&SequenceRollout, f64)> = groups
        .iter()
        .zip(&advantages)
        .flat_map(|(g, a)| g.sequences.iter().zip(a.iter().copied()))
        .collect();

    let num_sequences = flat.len() as f64;
    let success_rate = flat.iter().map(|(s, _)| s.reward).sum::<f64>() / num_sequences;
    let (entropy_sum, token_count) = flat
        .iter()
        .flat_map(|(s, _)| s.steps.iter())
        .fold((0.0, 0usize), |(h, n), st| (h + st.entropy, n + 1));

    let snapshot = (state.policy.clone(), state.velocity.clone());
    let mut objective_sum = 0.0;
    let mut updates = 0usize;
    let (mut tokens, mut intervened, mut projected) = (0usize, 0usize, 0usize);
    let (mut eta_sum, mut kl_sum, mut kept_sum) = (0.0, 0.0, 0.0);
    let mut aborted = false;
    let mut order: Vec<usize> = (0..flat.len()).collect();

    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut state.rng);
        for mb in 0..config.minibatches {
            let lo = mb * flat.len() / config.minibatches;
            let hi = (mb + 1) * flat.len() / config.minibatches;
            let batch: Vec<(&SequenceRollout, f64)> = order[lo..hi].iter().map(|&i| flat[i]).collect();
            let (out, mut grad) = minibatch_gradient(&state.policy, config, method, &batch)?;
            let stats = &out.stats;
            if epoch == 0 && mb == 0 {
                debug_assert_eq!(stats.projected, 0, "first on-policy minibatch projected");
                debug_assert_eq!(stats.clipped, 0, "first on-policy minibatch clipped");
            }
            if !out.value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                aborted = true;
                break 'epochs;
            }
            objective_sum += out.value;
            updates += 1;
            tokens += stats.tokens;
            intervened += match method {
                Method::Troll => stats.projected,
                Method::Clip => stats.clipped,
            };
            projected += stats.projected;
            eta_sum += stats.mean_eta_star * stats.projected as f64;
            kl_sum += stats.mean_kl_before * stats.tokens as f64;
            kept_sum += stats.mean_kept_tokens * stats.tokens as f64;

            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > config.max_grad_norm {
                let scale = config.max_grad_norm / norm;
                grad.iter_mut().for_each(|g| *g *= scale);
            }
            let lr = config.learning_rate;
            let mu = config.momentum;
            for ((w, v), g) in state
                .policy
                .weights_mut()
                .iter_mut()
                .zip(state.velocity.iter_mut())
                .zip(&grad)
            {
                *v = mu * *v + g;
                *w += lr * *v;
            }
        }
    }
    if aborted {
        state.policy = snapshot.0;
        state.velocity = snapshot.1;
    }

    let per = |x: f64, n: usize| if n == 0 { 0.0 } else { x / n as f64 };
    let metrics = StepMetrics {
        step: state.step,
        objective: per(objective_sum, updates),
        success_rate,
        entropy_mean: per(entropy_sum, token_count),
        intervention_fraction: per(intervened as f64, tokens),
        mean_eta_star: per(eta_sum, projected),
        mean_kl_before: per(kl_sum, tokens),
        mean_kept_tokens: per(kept_sum, tokens),
        wall_ms: if config.wall_time {
            started.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        },
        aborted,
    };
    state.step += 1;
    Ok(metrics)
}
