//! Sparse categorical distributions with an implicit default mass.
//!
//! A [`SparseDist`] stores the log-probabilities of a sorted set of kept tokens
//! and a single `default_log_prob` shared by every other token of the
//! vocabulary. Sparsification keeps the most probable tokens up to a cumulative
//! mass of `1 - delta` (capped at `K`), gives each dropped token the default
//! probability `p_d` and rescales the kept tokens by
//! `gamma = (1 - (V - m) * p_d) / kept_mass` so the result stays normalized.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logspace::{logsumexp, logsumexp_with_repeated};

/// Tolerance on total mass for a distribution to count as normalized.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

/// Slack on the cumulative-mass comparison; absorbs rounding of `exp(log p)`
/// accumulated over the sorted prefix.
const CUMULATIVE_SLACK: f64 = 1e-12;

/// Default probability of a dropped token.
pub const DEFAULT_P_DEFAULT: f64 = 1e-12;

/// A full-vocabulary, normalized log-probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DenseRepr")]
pub struct DenseLogits {
    log_probs: Vec<f64>,
}

#[derive(Deserialize)]
struct DenseRepr {
    log_probs: Vec<f64>,
}

impl TryFrom<DenseRepr> for DenseLogits {
    type Error = Error;

    fn try_from(repr: DenseRepr) -> Result<Self> {
        DenseLogits::new(repr.log_probs)
    }
}

impl DenseLogits {
    pub fn new(log_probs: Vec<f64>) -> Result<Self> {
        if log_probs.len() < 2 {
            return Err(Error::Validation(format!(
                "vocab_size must be >= 2, got {}",
                log_probs.len()
            )));
        }
        if let Some(bad) = log_probs.iter().find(|x| x.is_nan() || **x == f64::INFINITY) {
            return Err(Error::Validation(format!("invalid log-probability {bad}")));
        }
        let lse = logsumexp(&log_probs);
        if !(lse.abs() <= NORMALIZATION_TOLERANCE) {
            return Err(Error::Validation(format!(
                "log-probabilities not normalized: logsumexp = {lse:e}"
            )));
        }
        Ok(Self { log_probs })
    }

    /// Normalizes arbitrary finite logits with a log-softmax.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        Self::new(crate::logspace::log_softmax(logits))
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn vocab_size(&self) -> usize {
        self.log_probs.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.log_probs
    }
}

/// Sparse categorical distribution over `vocab_size` tokens.
///
/// Tokens outside `kept_ids` all carry `default_log_prob`. Distributions built by
/// [`sparsify`] additionally have every kept entry strictly above the default;
/// distributions that were aligned onto a larger support
/// ([`SparseDist::expand_to_support`]) may carry kept entries equal to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SparseRepr")]
pub struct SparseDist {
    vocab_size: usize,
    kept_ids: Vec<usize>,
    kept_log_probs: Vec<f64>,
    default_log_prob: f64,
}

#[derive(Deserialize)]
struct SparseRepr {
    vocab_size: usize,
    kept_ids: Vec<usize>,
    kept_log_probs: Vec<f64>,
    default_log_prob: f64,
}

impl TryFrom<SparseRepr> for SparseDist {
    type Error = Error;

    fn try_from(r: SparseRepr) -> Result<Self> {
        SparseDist::new(r.vocab_size, r.kept_ids, r.kept_log_probs, r.default_log_prob)
    }
}

impl SparseDist {
    pub fn new(
        vocab_size: usize,
        kept_ids: Vec<usize>,
        kept_log_probs: Vec<f64>,
        default_log_prob: f64,
    ) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::Validation(format!(
                "vocab_size must be >= 2, got {vocab_size}"
            )));
        }
        if kept_ids.len() != kept_log_probs.len() {
            return Err(Error::Validation(format!(
                "{} kept ids but {} kept log-probabilities",
                kept_ids.len(),
                kept_log_probs.len()
            )));
        }
        if kept_ids.is_empty() || kept_ids.len() > vocab_size {
            return Err(Error::Validation(format!(
                "number of kept tokens {} outside [1, {vocab_size}]",
                kept_ids.len()
            )));
        }
        if kept_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation(
                "kept_ids must be sorted and unique".into(),
            ));
        }
        if kept_ids[kept_ids.len() - 1] >= vocab_size {
            return Err(Error::Validation(format!(
                "kept id {} out of range for vocab_size {vocab_size}",
                kept_ids[kept_ids.len() - 1]
            )));
        }
        if let Some(bad) = kept_log_probs.iter().find(|x| !x.is_finite()) {
            return Err(Error::Validation(format!(
                "kept log-probabilities must be finite, got {bad}"
            )));
        }
        if !default_log_prob.is_finite() {
            return Err(Error::Validation(
                "default_log_prob must be finite (p_d > 0)".into(),
            ));
        }
        let dist = Self {
            vocab_size,
            kept_ids,
            kept_log_probs,
            default_log_prob,
        };
        let lse = dist.log_total_mass();
        if !(lse.abs() <= NORMALIZATION_TOLERANCE) {
            return Err(Error::Validation(format!(
                "sparse distribution not normalized: log total mass = {lse:e}"
            )));
        }
        Ok(dist)
    }

    pub(crate) fn from_parts_unchecked(
        vocab_size: usize,
        kept_ids: Vec<usize>,
        kept_log_probs: Vec<f64>,
        default_log_prob: f64,
    ) -> Self {
        debug_assert_eq!(kept_ids.len(), kept_log_probs.len());
        Self {
            vocab_size,
            kept_ids,
            kept_log_probs,
            default_log_prob,
        }
    }

    /// Keeps every token of a dense distribution.
    ///
    /// The default is irrelevant for the mass (nothing is dropped) but must be
    /// finite; it is set below the smallest kept entry.
    pub fn from_dense_full(dense: &DenseLogits) -> Self {
        let lp = dense.log_probs().to_vec();
        let min = lp.iter().copied().fold(f64::INFINITY, f64::min);
        let default = DEFAULT_P_DEFAULT.ln().min(min - 1.0);
        Self::from_parts_unchecked(lp.len(), (0..lp.len()).collect(), lp, default)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn kept_ids(&self) -> &[usize] {
        &self.kept_ids
    }

    pub fn kept_log_probs(&self) -> &[f64] {
        &self.kept_log_probs
    }

    pub fn default_log_prob(&self) -> f64 {
        self.default_log_prob
    }

    pub fn default_prob(&self) -> f64 {
        self.default_log_prob.exp()
    }

    pub fn num_kept(&self) -> usize {
        self.kept_ids.len()
    }

    pub fn num_dropped(&self) -> usize {
        self.vocab_size - self.kept_ids.len()
    }

    /// Index of `token` within the kept arrays.
    pub fn position(&self, token: usize) -> Option<usize> {
        self.kept_ids.binary_search(&token).ok()
    }

    pub fn log_prob(&self, token: usize) -> f64 {
        match self.position(token) {
            Some(i) => self.kept_log_probs[i],
            None => self.default_log_prob,
        }
    }

    pub fn log_total_mass(&self) -> f64 {
        logsumexp_with_repeated(&self.kept_log_probs, self.default_log_prob, self.num_dropped())
    }

    /// Whether every kept token is strictly more probable than a dropped one.
    pub fn kept_dominate_default(&self) -> bool {
        self.kept_log_probs.iter().all(|&lp| lp > self.default_log_prob)
    }

    /// Dense log-probability vector. Test fixtures and small vocabularies only.
    pub fn densify(&self) -> Vec<f64> {
        let mut out = vec![self.default_log_prob; self.vocab_size];
        for (&id, &lp) in self.kept_ids.iter().zip(&self.kept_log_probs) {
            out[id] = lp;
        }
        out
    }

    pub fn same_support(&self, other: &SparseDist) -> bool {
        self.vocab_size == other.vocab_size && self.kept_ids == other.kept_ids
    }

    /// Re-expresses the distribution on a superset of its kept ids; added ids
    /// carry the default log-probability, so the distribution is unchanged.
    pub fn expand_to_support(&self, ids: &[usize]) -> Result<SparseDist> {
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation("support must be sorted and unique".into()));
        }
        if ids.last().is_some_and(|&id| id >= self.vocab_size) {
            return Err(Error::Validation("support id out of range".into()));
        }
        let mut log_probs = Vec::with_capacity(ids.len());
        let mut matched = 0;
        for &id in ids {
            match self.position(id) {
                Some(i) => {
                    matched += 1;
                    log_probs.push(self.kept_log_probs[i]);
                }
                None => log_probs.push(self.default_log_prob),
            }
        }
        if matched != self.kept_ids.len() {
            return Err(Error::SupportMismatch(
                "target support does not contain every kept id".into(),
            ));
        }
        Ok(Self::from_parts_unchecked(
            self.vocab_size,
            ids.to_vec(),
            log_probs,
            self.default_log_prob,
        ))
    }
}

/// Sorted union of two sorted id lists.
pub fn union_support(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Brings two distributions onto the union of their kept ids.
///
/// Tokens absent from one side take that side's default log-probability; no
/// renormalization is needed since the defaults already carry that mass.
pub fn align_supports(p: &SparseDist, q: &SparseDist) -> Result<(SparseDist, SparseDist)> {
    if p.vocab_size != q.vocab_size {
        return Err(Error::VocabMismatch {
            left: p.vocab_size,
            right: q.vocab_size,
        });
    }
    if p.kept_ids == q.kept_ids {
        return Ok((p.clone(), q.clone()));
    }
    let support = union_support(&p.kept_ids, &q.kept_ids);
    Ok((p.expand_to_support(&support)?, q.expand_to_support(&support)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsifyParams {
    /// Maximum number of tokens kept by the top-K stage.
    pub top_k: usize,
    /// Dropped-mass budget; the kept prefix covers at least `1 - delta`.
    pub delta: f64,
    /// Probability assigned to each dropped token.
    pub p_default: f64,
    /// Token that is always kept (the sampled one).
    #[serde(default)]
    pub forced_id: Option<usize>,
}

impl Default for SparsifyParams {
    fn default() -> Self {
        Self {
            top_k: 64,
            delta: 1e-5,
            p_default: DEFAULT_P_DEFAULT,
            forced_id: None,
        }
    }
}

impl SparsifyParams {
    pub fn with_forced(&self, forced_id: Option<usize>) -> Self {
        Self {
            forced_id,
            ..self.clone()
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.top_k < 1 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if !(self.p_default > 0.0) {
            return Err(Error::Config("p_default must be > 0".into()));
        }
        if self.p_default >= self.delta / vocab_size as f64 {
            return Err(Error::Config(format!(
                "p_default {} must be below delta / vocab_size = {}",
                self.p_default,
                self.delta / vocab_size as f64
            )));
        }
        if (vocab_size - 1) as f64 * self.p_default >= 1.0 {
            return Err(Error::Config("(vocab_size - 1) * p_default must be < 1".into()));
        }
        if let Some(f) = self.forced_id {
            if f >= vocab_size {
                return Err(Error::Config(format!(
                    "forced_id {f} out of range for vocab_size {vocab_size}"
                )));
            }
        }
        Ok(())
    }
}

/// Side information produced by [`sparsify_with_info`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsifyInfo {
    /// Raw (pre-rescaling) mass of the kept tokens.
    pub kept_raw_mass: f64,
    /// Renormalization factor applied to the kept tokens.
    pub gamma: f64,
    /// The `1 - delta` prefix did not fit in `top_k` tokens.
    pub truncated: bool,
    /// The forced token was added on top of the prefix.
    pub forced_added: bool,
}

/// Descending probability, ties by ascending token id.
fn by_prob_desc(lp: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b))
}

pub fn sparsify(dense: &DenseLogits, params: &SparsifyParams) -> Result<SparseDist> {
    sparsify_with_info(dense, params).map(|(d, _)| d)
}

pub fn sparsify_with_info(
    dense: &DenseLogits,
    params: &SparsifyParams,
) -> Result<(SparseDist, SparsifyInfo)> {
    let vocab = dense.vocab_size();
    params.validate(vocab)?;
    let lp = dense.log_probs();
    let cmp = by_prob_desc(lp);

    let mut order: Vec<usize> = (0..vocab).collect();
    let k = params.top_k.min(vocab);
    if k < vocab {
        order.select_nth_unstable_by(k - 1, &cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(&cmp);

    let threshold = 1.0 - params.delta - CUMULATIVE_SLACK;
    let mut cumulative = 0.0;
    let mut kept = Vec::with_capacity(k + 1);
    for &id in &order {
        kept.push(id);
        cumulative += lp[id].exp();
        if cumulative >= threshold {
            break;
        }
    }
    let truncated = cumulative < threshold;

    let mut forced_added = false;
    if let Some(f) = params.forced_id {
        if !kept.contains(&f) {
            kept.push(f);
            forced_added = true;
        }
    }
    kept.sort_unstable();

    let (dist, kept_raw_mass, gamma) = restrict_sorted(lp, kept, params.p_default);
    Ok((
        dist,
        SparsifyInfo {
            kept_raw_mass,
            gamma,
            truncated,
            forced_added,
        },
    ))
}

/// Sparsifies a dense distribution onto an explicit kept set (any subset of
/// the vocabulary), dropped tokens receiving `p_default`.
pub fn restrict_to_support(
    dense: &DenseLogits,
    support: &[usize],
    p_default: f64,
) -> Result<SparseDist> {
    let vocab = dense.vocab_size();
    if support.is_empty() || support.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Validation("support must be non-empty, sorted and unique".into()));
    }
    if support[support.len() - 1] >= vocab {
        return Err(Error::Validation("support id out of range".into()));
    }
    let dropped = (vocab - support.len()) as f64;
    if !(p_default > 0.0) || dropped * p_default >= 1.0 {
        return Err(Error::Config(format!(
            "p_default {p_default} incompatible with {dropped} dropped tokens"
        )));
    }
    Ok(restrict_sorted(dense.log_probs(), support.to_vec(), p_default).0)
}

fn restrict_sorted(lp: &[f64], kept: Vec<usize>, p_default: f64) -> (SparseDist, f64, f64) {
    let vocab = lp.len();
    let dropped = vocab - kept.len();
    let raw: Vec<f64> = kept.iter().map(|&i| lp[i]).collect();
    let log_kept_mass = logsumexp(&raw);
    let log_gamma = (-(dropped as f64) * p_default).ln_1p() - log_kept_mass;
    let kept_log_probs = raw.iter().map(|&x| x + log_gamma).collect();
    let dist = SparseDist::from_parts_unchecked(vocab, kept, kept_log_probs, p_default.ln());
    (dist, log_kept_mass.exp(), log_gamma.exp())
}

/// Applies [`sparsify`] to a sequence, `chunk_size` positions at a time.
///
/// Chunking bounds the working set only; the output is identical to mapping
/// [`sparsify`] over the input.
pub fn sparsify_chunked(
    dense_sequence: &[DenseLogits],
    params: &SparsifyParams,
    chunk_size: usize,
) -> Result<Vec<SparseDist>> {
    if chunk_size == 0 {
        return Err(Error::Config("chunk_size must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(dense_sequence.len());
    for (c, chunk) in dense_sequence.chunks(chunk_size).enumerate() {
        let mut part = Vec::with_capacity(chunk.len());
        for (i, dense) in chunk.iter().enumerate() {
            part.push(sparsify(dense, params).map_err(|e| Error::at(c * chunk_size + i, e))?);
        }
        out.append(&mut part);
    }
    Ok(out)
}

/// VJP of the renormalization `log p'_i = log p_i + log(1 - n p_d) - log sum_S p`
/// on a fixed kept set, mapping gradients on the kept entries back to the dense
/// log-probabilities (zero for dropped tokens, whose value is a constant).
pub fn sparsify_vjp(dense_log_probs: &[f64], kept_ids: &[usize], kept_grad: &[f64]) -> Vec<f64> {
    debug_assert_eq!(kept_ids.len(), kept_grad.len());
    let raw: Vec<f64> = kept_ids.iter().map(|&i| dense_log_probs[i]).collect();
    let lse = logsumexp(&raw);
    let total: f64 = kept_grad.iter().sum();
    let mut out = vec![0.0; dense_log_probs.len()];
    for ((&id, &lp), &g) in kept_ids.iter().zip(&raw).zip(kept_grad) {
        out[id] = g - (lp - lse).exp() * total;
    }
    out
}

/// `sum_i p_i (log p_i - log q_i) + n * p_d (log p_d - log q_d)` on a shared support.
pub(crate) fn kl_shared(
    p: &[f64],
    p_default: f64,
    q: &[f64],
    q_default: f64,
    dropped: usize,
) -> f64 {
    let mut kl: f64 = p.iter().zip(q).map(|(&a, &b)| a.exp() * (a - b)).sum();
    if dropped > 0 {
        kl += (p_default + (dropped as f64).ln()).exp() * (p_default - q_default);
    }
    kl
}

/// KL(p || q). Distributions on different supports are first aligned to the
/// union of their kept ids.
pub fn kl(p: &SparseDist, q: &SparseDist) -> Result<f64> {
    if p.vocab_size != q.vocab_size {
        return Err(Error::VocabMismatch {
            left: p.vocab_size,
            right: q.vocab_size,
        });
    }
    if p.kept_ids == q.kept_ids {
        return Ok(kl_shared(
            &p.kept_log_probs,
            p.default_log_prob,
            &q.kept_log_probs,
            q.default_log_prob,
            p.num_dropped(),
        ));
    }
    let (p, q) = align_supports(p, q)?;
    kl(&p, &q)
}

pub fn entropy(p: &SparseDist) -> f64 {
    let kept: f64 = p.kept_log_probs.iter().map(|&lp| lp.exp() * lp).sum();
    let n = p.num_dropped();
    let dropped = if n > 0 {
        (p.default_log_prob + (n as f64).ln()).exp() * p.default_log_prob
    } else {
        0.0
    };
    -(kept + dropped)
}

/// Both sides of the pairwise KL-term ordering statement for tokens `i`, `j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlTermOrdering {
    /// `p(i) log(p(i)/q(i)) >= p(j) log(p(j)/q(j))`.
    pub direct: bool,
    /// `exp(kappa) >= gamma'`.
    pub predicate: bool,
    /// `p(i) / p(j)`.
    pub kappa: f64,
    /// `(q(i) / q(j)) / kappa`.
    pub gamma: f64,
}

impl KlTermOrdering {
    pub fn agree(&self) -> bool {
        self.direct == self.predicate
    }
}

/// Evaluates the direct comparison of the KL terms of tokens `i` and `j` and
/// the closed-form predicate `e^kappa >= gamma'` claimed to be equivalent.
///
/// Requires `p(i) >= p(j)` and both tokens in the shared kept support.
pub fn kl_term_ordering(
    p: &SparseDist,
    q: &SparseDist,
    i: usize,
    j: usize,
) -> Result<KlTermOrdering> {
    if !p.same_support(q) {
        return Err(Error::SupportMismatch("p and q must share kept ids".into()));
    }
    let (pi, pj) = match (p.position(i), p.position(j)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Domain(format!("tokens {i}, {j} must be kept"))),
    };
    let (lpi, lpj) = (p.kept_log_probs[pi], p.kept_log_probs[pj]);
    let (lqi, lqj) = (q.kept_log_probs[pi], q.kept_log_probs[pj]);
    if [lpi, lpj, lqi, lqj].iter().any(|x| x.exp() == 0.0) {
        return Err(Error::Domain("zero probability in KL term comparison".into()));
    }
    if lpi < lpj {
        return Err(Error::Domain("requires p(i) >= p(j)".into()));
    }
    let term_i = lpi.exp() * (lpi - lqi);
    let term_j = lpj.exp() * (lpj - lqj);
    let kappa = (lpi - lpj).exp();
    let gamma = (lqi - lqj).exp() / kappa;
    Ok(KlTermOrdering {
        direct: term_i >= term_j,
        predicate: kappa.exp() >= gamma,
        kappa,
        gamma,
    })
}

/// Terms of the dense-KL upper bound `gamma^-1 * KL(p'||q') + delta log(delta / q_min)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KlBound {
    /// `(1 - delta) / (1 - (V - k) p_d)`.
    pub inverse_gamma: f64,
    /// `delta * log(delta / q_min)`.
    pub slack: f64,
    pub sparse_kl: f64,
    pub bound: f64,
}

pub fn kl_bound_from_constants(
    kept: usize,
    vocab_size: usize,
    delta: f64,
    p_default: f64,
    q_min: f64,
    sparse_kl: f64,
) -> Result<KlBound> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    if !(q_min > 0.0) {
        return Err(Error::Domain(format!("q_min must be > 0, got {q_min}")));
    }
    if kept == 0 || kept > vocab_size {
        return Err(Error::Domain(format!("kept count {kept} outside [1, {vocab_size}]")));
    }
    let default_mass = (vocab_size - kept) as f64 * p_default;
    if !(p_default > 0.0) || default_mass >= 1.0 {
        return Err(Error::Domain("default mass must lie in (0, 1)".into()));
    }
    let inverse_gamma = (1.0 - delta) / (1.0 - default_mass);
    let slack = delta * (delta / q_min).ln();
    Ok(KlBound {
        inverse_gamma,
        slack,
        sparse_kl,
        bound: inverse_gamma * sparse_kl + slack,
    })
}

/// Certified upper bound on the dense KL from two sparsified distributions
/// with identical kept sets of raw mass `1 - delta`.
pub fn sparsification_kl_bound(
    p_sparse: &SparseDist,
    q_sparse: &SparseDist,
    delta: f64,
    q_min: f64,
) -> Result<KlBound> {
    if p_sparse.vocab_size != q_sparse.vocab_size {
        return Err(Error::VocabMismatch {
            left: p_sparse.vocab_size,
            right: q_sparse.vocab_size,
        });
    }
    if p_sparse.kept_ids != q_sparse.kept_ids {
        return Err(Error::SupportMismatch(
            "bound requires identical kept sets for p and q".into(),
        ));
    }
    if (p_sparse.default_log_prob - q_sparse.default_log_prob).abs() > 1e-12 {
        return Err(Error::SupportMismatch(
            "bound requires equal default masses for p and q".into(),
        ));
    }
    let sparse_kl = kl(p_sparse, q_sparse)?;
    kl_bound_from_constants(
        p_sparse.num_kept(),
        p_sparse.vocab_size,
        delta,
        p_sparse.default_prob(),
        q_min,
        sparse_kl,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logspace::{entropy as dense_entropy, kl_dense};
    use crate::synthetic::random_dense;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense(p: &[f64]) -> DenseLogits {
        DenseLogits::new(p.iter().map(|x| x.ln()).collect()).unwrap()
    }

    fn params(top_k: usize, delta: f64) -> SparsifyParams {
        SparsifyParams {
            top_k,
            delta,
            p_default: 1e-12,
            forced_id: None,
        }
    }

    fn probs(d: &SparseDist) -> Vec<f64> {
        d.kept_log_probs().iter().map(|x| x.exp()).collect()
    }

    #[test]
    fn six_token_example_keeps_three() {
        let d = dense(&[0.6, 0.3, 0.09, 0.009, 0.0009, 0.0001]);
        let (s, info) = sparsify_with_info(&d, &params(64, 0.01)).unwrap();
        assert_eq!(s.kept_ids(), &[0, 1, 2]);
        let gamma = (1.0 - 3e-12) / 0.99;
        assert!((info.gamma - gamma).abs() < 1e-12);
        for (got, raw) in probs(&s).iter().zip([0.6, 0.3, 0.09]) {
            assert!((got - gamma * raw).abs() < 1e-12);
        }
        assert!((s.default_prob() - 1e-12).abs() < 1e-24);
        assert!(!info.truncated);
        assert!(s.kept_dominate_default());
    }

    #[test]
    fn uniform_ties_break_by_index() {
        let d = dense(&[0.25; 4]);
        let (s, info) = sparsify_with_info(&d, &params(4, 0.5)).unwrap();
        assert_eq!(s.kept_ids(), &[0, 1]);
        assert!((info.gamma - (1.0 - 2e-12) / 0.5).abs() < 1e-12);
    }

    #[test]
    fn no_drop_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = random_dense(&mut rng, 10, 2.0);
        let p = SparsifyParams {
            top_k: 10,
            delta: 1e-12 * 10.0 * 2.0,
            p_default: 1e-12,
            forced_id: None,
        };
        let (s, info) = sparsify_with_info(&d, &p).unwrap();
        assert_eq!(s.num_kept(), 10);
        assert!((info.gamma - 1.0).abs() < 1e-12);
        for (a, b) in s.densify().iter().zip(d.log_probs()) {
            assert!((a.exp() - b.exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn large_vocab_near_deterministic_keeps_one_plus_forced() {
        let vocab = 151_936;
        let rest = (1e-5f64 / (vocab - 1) as f64).ln();
        let mut lp = vec![rest; vocab];
        lp[1234] = 0.99999f64.ln();
        let d = DenseLogits::new(lp).unwrap();
        let p = params(64, 1e-5);
        let s = sparsify(&d, &p).unwrap();
        assert_eq!(s.kept_ids(), &[1234]);
        let s = sparsify(&d, &p.with_forced(Some(7))).unwrap();
        assert_eq!(s.kept_ids(), &[7, 1234]);
        assert!(s.log_total_mass().abs() < 1e-9);
    }

    #[test]
    fn top_k_binding_sets_truncated() {
        let d = dense(&[0.2; 5]);
        let (s, info) = sparsify_with_info(&d, &params(2, 0.01)).unwrap();
        assert_eq!(s.num_kept(), 2);
        assert!(info.truncated);
        assert!(s.log_total_mass().abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(DenseLogits::new(vec![0.5f64.ln(), 0.6f64.ln()]).is_err());
        assert!(DenseLogits::new(vec![0.0]).is_err());
        let d = dense(&[0.5, 0.5]);
        // p_d too large relative to delta / V
        let p = SparsifyParams {
            top_k: 2,
            delta: 1e-3,
            p_default: 1e-3,
            forced_id: None,
        };
        assert!(matches!(sparsify(&d, &p), Err(Error::Config(_))));
        assert!(SparseDist::new(3, vec![2, 1], vec![0.5f64.ln(); 2], -30.0).is_err());
        assert!(SparseDist::new(3, vec![0, 1], vec![0.3f64.ln(); 2], -30.0).is_err());
    }

    #[test]
    fn chunked_edge_cases() {
        let p = params(8, 1e-3);
        assert!(sparsify_chunked(&[], &p, 1024).unwrap().is_empty());
        assert!(sparsify_chunked(&[], &p, 0).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let seq: Vec<_> = (0..37).map(|_| random_dense(&mut rng, 20, 3.0)).collect();
        let a = sparsify_chunked(&seq, &p, 1).unwrap();
        let b = sparsify_chunked(&seq, &p, seq.len()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kl_matches_dense_oracle() {
        let p = SparseDist::new(
            10,
            vec![2, 5],
            vec![(0.7f64 * (1.0 - 8e-12)).ln(), (0.3f64 * (1.0 - 8e-12)).ln()],
            (1e-12f64).ln(),
        )
        .unwrap();
        let q = SparseDist::new(
            10,
            vec![2, 5],
            vec![(0.5f64 * (1.0 - 8e-12)).ln(), (0.5f64 * (1.0 - 8e-12)).ln()],
            (1e-12f64).ln(),
        )
        .unwrap();
        let got = kl(&p, &q).unwrap();
        let want = kl_dense(&p.densify(), &q.densify());
        assert!((got - want).abs() < 1e-12);
        assert_eq!(kl(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_on_mismatched_supports_uses_union() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = sparsify(&random_dense(&mut rng, 30, 4.0), &params(6, 1e-3)).unwrap();
        let q = sparsify(&random_dense(&mut rng, 30, 4.0), &params(6, 1e-3)).unwrap();
        let got = kl(&p, &q).unwrap();
        let want = kl_dense(&p.densify(), &q.densify());
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        let other = SparseDist::from_dense_full(&random_dense(&mut rng, 31, 1.0));
        assert!(matches!(kl(&p, &other), Err(Error::VocabMismatch { .. })));
    }

    #[test]
    fn random_pairs_are_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let v = rng.gen_range(2..40);
            let p = sparsify(&random_dense(&mut rng, v, 3.0), &params(8, 1e-3)).unwrap();
            let q = sparsify(&random_dense(&mut rng, v, 3.0), &params(8, 1e-3)).unwrap();
            assert!(kl(&p, &q).unwrap() >= -1e-12);
            assert_eq!(kl(&p, &p).unwrap(), 0.0);
        }
    }

    #[test]
    fn entropy_cases() {
        let v = 50;
        let pd = 1e-12f64;
        let det = SparseDist::new(v, vec![3], vec![(1.0 - (v - 1) as f64 * pd).ln()], pd.ln())
            .unwrap();
        let h = entropy(&det);
        // 49 * 1e-12 * ln(1e12) from the default mass
        assert!((0.0..2e-9).contains(&h));
        assert!((h - dense_entropy(&det.densify())).abs() < 1e-12);

        let uniform = SparseDist::from_dense_full(&dense(&[0.125; 8]));
        assert!((entropy(&uniform) - 8f64.ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = sparsify(&random_dense(&mut rng, 64, 2.0), &params(16, 1e-3)).unwrap();
        assert!((entropy(&s) - dense_entropy(&s.densify())).abs() < 1e-12);
    }

    #[test]
    fn kl_term_ordering_examples() {
        let p = SparseDist::from_dense_full(&dense(&[0.4, 0.4, 0.2]));
        let q = SparseDist::from_dense_full(&dense(&[0.3, 0.3, 0.4]));
        let o = kl_term_ordering(&p, &q, 0, 1).unwrap();
        assert!(o.direct && o.predicate && o.agree());
        assert!((o.kappa - 1.0).abs() < 1e-12 && (o.gamma - 1.0).abs() < 1e-12);

        let p = SparseDist::from_dense_full(&dense(&[0.7, 0.2, 0.1]));
        let q = SparseDist::from_dense_full(&dense(&[0.5, 0.4, 0.1]));
        let o = kl_term_ordering(&p, &q, 0, 1).unwrap();
        // 0.7 ln 1.4 = 0.2355 >= 0.2 ln 0.5 = -0.1386; e^3.5 >= (0.5/0.4)/3.5
        assert!(o.direct && o.predicate);
        assert!((o.kappa - 3.5).abs() < 1e-12);
        assert!((o.gamma - 1.25 / 3.5).abs() < 1e-12);
        assert!(kl_term_ordering(&p, &q, 1, 0).is_err());
    }

    #[test]
    fn kl_term_predicate_is_not_equivalent_in_general() {
        // Equal p, q(i) = 2 q(j): the direct comparison fails while e >= 2 holds.
        let p = SparseDist::from_dense_full(&dense(&[0.3, 0.3, 0.4]));
        let q = SparseDist::from_dense_full(&dense(&[0.4, 0.2, 0.4]));
        let o = kl_term_ordering(&p, &q, 0, 1).unwrap();
        assert!(!o.direct);
        assert!(o.predicate);
    }

    #[test]
    fn bound_reproduces_reference_constants() {
        let b = kl_bound_from_constants(256, 151_936, 1e-5, 1e-12, 1.17549e-38, 0.05).unwrap();
        assert!((b.slack - 0.00075823623).abs() / 0.00075823623 < 1e-9);
        assert!((b.inverse_gamma - 0.99999015168).abs() < 1e-11);
        assert!((b.bound - 0.050757743814).abs() / 0.050757743814 < 1e-9);
        assert!(kl_bound_from_constants(256, 151_936, 0.0, 1e-12, 1e-38, 0.05).is_err());
        assert!(kl_bound_from_constants(256, 151_936, 1e-5, 1e-12, 0.0, 0.05).is_err());
    }

    #[test]
    fn bound_identity_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = random_dense(&mut rng, 40, 3.0);
        let s = sparsify(&d, &params(8, 1e-2)).unwrap();
        let b = sparsification_kl_bound(&s, &s, 1e-2, 1e-30).unwrap();
        assert_eq!(b.sparse_kl, 0.0);
        assert!((b.bound - 1e-2 * (1e-2f64 / 1e-30).ln()).abs() < 1e-15);
        let other = sparsify(&random_dense(&mut rng, 40, 0.1), &params(30, 1e-2)).unwrap();
        assert!(matches!(
            sparsification_kl_bound(&s, &other, 1e-2, 1e-30),
            Err(Error::SupportMismatch(_))
        ));
    }

    #[test]
    fn sparsify_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = random_dense(&mut rng, 12, 2.0);
        let s = sparsify(&d, &params(5, 1e-2)).unwrap();
        let ids = s.kept_ids().to_vec();
        let g: Vec<f64> = (0..ids.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = |lp: &[f64]| -> f64 {
            let dd = DenseLogits::new(crate::logspace::log_softmax(lp)).unwrap();
            let r = restrict_to_support(&dd, &ids, 1e-12).unwrap();
            r.kept_log_probs().iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        let analytic = crate::logspace::log_softmax_vjp(
            d.log_probs(),
            &sparsify_vjp(d.log_probs(), &ids, &g),
        );
        let h = 1e-6;
        for k in 0..12 {
            let mut plus = d.log_probs().to_vec();
            let mut minus = plus.clone();
            plus[k] += h;
            minus[k] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            assert!((fd - analytic[k]).abs() < 1e-7, "{k}: {fd} vs {}", analytic[k]);
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = sparsify(&random_dense(&mut rng, 100, 5.0), &params(10, 1e-4)).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        let back: SparseDist = serde_json::from_str(&text).unwrap();
        assert_eq!(s, back);
        assert!(serde_json::from_str::<SparseDist>(
            r#"{"vocab_size":3,"kept_ids":[0],"kept_log_probs":[-0.1],"default_log_prob":-27.6}"#
        )
        .is_err());
    }
}
