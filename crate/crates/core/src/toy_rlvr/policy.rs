//! Linear softmax policy over sparse binary context features.
//!
//! Active features at step `t` of a response:
//! a bias, the position `t`, the previous output symbol (or a start marker),
//! and one indicator per query slot `j` holding symbol `s`, conditioned on `t`.
//! The position-conditioned query indicators let a linear model express
//! order-dependent transforms such as reversal.

use serde::{Deserialize, Serialize};

use crate::logspace::{log_softmax, log_softmax_vjp};
use crate::toy_rlvr::task::ToyTask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSoftmaxPolicy {
    vocab_size: usize,
    num_symbols: usize,
    query_length: usize,
    max_len: usize,
    /// Row-major `[num_features][vocab_size]`.
    weights: Vec<f64>,
}

impl LinearSoftmaxPolicy {
    pub fn zeros(task: &ToyTask) -> Self {
        let mut p = Self {
            vocab_size: task.vocab_size,
            num_symbols: task.num_symbols(),
            query_length: task.query_length,
            max_len: task.max_response_len(),
            weights: Vec::new(),
        };
        p.weights = vec![0.0; p.num_features() * p.vocab_size];
        p
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn num_features(&self) -> usize {
        1 + self.max_len + (self.vocab_size + 1) + self.max_len * self.query_length * self.num_symbols
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Active feature indices for step `t` with `prev` the last emitted token.
    pub fn features(&self, query: &[usize], t: usize, prev: Option<usize>) -> Vec<usize> {
        debug_assert!(t < self.max_len);
        let mut f = Vec::with_capacity(3 + self.query_length);
        f.push(0);
        f.push(self.position_feature(t));
        let prev_base = 1 + self.max_len;
        f.push(prev_base + prev.unwrap_or(self.vocab_size));
        for (j, &s) in query.iter().enumerate() {
            f.push(self.query_feature(t, j, s));
        }
        f
    }

    /// Index of the indicator "query slot `slot` holds `symbol`" at step `t`.
    pub fn query_feature(&self, t: usize, slot: usize, symbol: usize) -> usize {
        1 + self.max_len + self.vocab_size + 1 + (t * self.query_length + slot) * self.num_symbols + symbol
    }

    /// Index of the position indicator for step `t`.
    pub fn position_feature(&self, t: usize) -> usize {
        1 + t
    }

    pub fn logits(&self, features: &[usize]) -> Vec<f64> {
        let v = self.vocab_size;
        let mut z = vec![0.0; v];
        for &f in features {
            for (zi, w) in z.iter_mut().zip(&self.weights[f * v..(f + 1) * v]) {
                *zi += w;
            }
        }
        z
    }

    pub fn log_probs(&self, features: &[usize]) -> Vec<f64> {
        log_softmax(&self.logits(features))
    }

    /// Accumulates `d objective / d weights` into `grad` given the gradient
    /// with respect to this step's dense log-probabilities.
    pub fn accumulate_grad(&self, features: &[usize], log_probs: &[f64], grad_log_probs: &[f64], grad: &mut [f64]) {
        let v = self.vocab_size;
        let dz = log_softmax_vjp(log_probs, grad_log_probs);
        for &f in features {
            for (g, d) in grad[f * v..(f + 1) * v].iter_mut().zip(&dz) {
                *g += d;
            }
        }
    }
}
