//! Sequence transformation task with an exact-match reward.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Reverse,
    Copy,
    /// Each symbol plus one, modulo the number of symbols.
    Increment,
}

impl std::str::FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reverse" => Ok(Self::Reverse),
            "copy" => Ok(Self::Copy),
            "increment" => Ok(Self::Increment),
            other => Err(Error::Config(format!("unknown transform {other:?}"))),
        }
    }
}

/// Queries are `query_length` symbols from `0..vocab_size - 1`; the last
/// vocabulary entry is the end token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTask {
    pub vocab_size: usize,
    pub query_length: usize,
    pub transform: Transform,
}

impl Default for ToyTask {
    fn default() -> Self {
        Self {
            vocab_size: 17,
            query_length: 4,
            transform: Transform::Reverse,
        }
    }
}

impl ToyTask {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            return Err(Error::Config(format!("vocab_size must be >= 3, got {}", self.vocab_size)));
        }
        if self.query_length == 0 {
            return Err(Error::Config("query_length must be >= 1".into()));
        }
        Ok(())
    }

    pub fn num_symbols(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn end_token(&self) -> usize {
        self.vocab_size - 1
    }

    /// Generation stops here; hitting the limit without the end token scores 0.
    pub fn max_response_len(&self) -> usize {
        self.query_length + 2
    }

    pub fn sample_query<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        (0..self.query_length)
            .map(|_| rng.gen_range(0..self.num_symbols()))
            .collect()
    }

    /// `transform(query)` followed by the end token.
    pub fn target(&self, query: &[usize]) -> Vec<usize> {
        let mut out: Vec<usize> = match self.transform {
            Transform::Reverse => query.iter().rev().copied().collect(),
            Transform::Copy => query.to_vec(),
            Transform::Increment => query.iter().map(|&s| (s + 1) % self.num_symbols()).collect(),
        };
        out.push(self.end_token());
        out
    }

    pub fn reward(&self, query: &[usize], response: &[usize]) -> f64 {
        if response == self.target(query).as_slice() {
            1.0
        } else {
            0.0
        }
    }
}
