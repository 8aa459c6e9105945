//! Log-space arithmetic with max-subtraction.

/// `log(sum(exp(xs)))`, `-inf` for an empty slice or all `-inf` entries.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Log-sum-exp of `xs` plus an extra term `count * exp(extra)`.
///
/// Used for sparse distributions where all dropped tokens share one log value.
pub fn logsumexp_with_repeated(xs: &[f64], extra: f64, count: usize) -> f64 {
    let repeated = if count == 0 {
        f64::NEG_INFINITY
    } else {
        extra + (count as f64).ln()
    };
    let max = xs.iter().copied().fold(repeated, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    if count > 0 {
        sum += (repeated - max).exp();
    }
    max + sum.ln()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|&x| x - lse).collect()
}

/// Vector-Jacobian product of `log_softmax` given its output `log_probs`.
///
/// `d/dx_k = g_k - p_k * sum(g)`.
pub fn log_softmax_vjp(log_probs: &[f64], grad: &[f64]) -> Vec<f64> {
    debug_assert_eq!(log_probs.len(), grad.len());
    let total: f64 = grad.iter().sum();
    log_probs
        .iter()
        .zip(grad)
        .map(|(&lp, &g)| g - lp.exp() * total)
        .collect()
}

/// Shannon entropy (nats) of a dense log-probability vector.
pub fn entropy(log_probs: &[f64]) -> f64 {
    -log_probs
        .iter()
        .filter(|lp| lp.is_finite())
        .map(|&lp| lp.exp() * lp)
        .sum::<f64>()
}

/// KL(p || q) between dense log-probability vectors.
pub fn kl_dense(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(lp, _)| lp.is_finite())
        .map(|(&lp, &lq)| lp.exp() * (lp - lq))
        .sum()
}
