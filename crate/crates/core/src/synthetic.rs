//! Random instance generators shared by tests, the gradient checker and the
//! benchmark command.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::sparse_dist::{DenseLogits, SparseDist};

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Dense distribution with i.i.d. Gaussian logits of standard deviation `scale`.
pub fn random_dense<R: Rng + ?Sized>(rng: &mut R, vocab_size: usize, scale: f64) -> DenseLogits {
    let logits: Vec<f64> = (0..vocab_size)
        .map(|_| scale * normal(rng))
        .collect();
    DenseLogits::from_logits(&logits).expect("finite logits normalize")
}

/// Reference distribution and a perturbed target: the target's logits are the
/// reference logits plus Gaussian noise of standard deviation `drift`.
pub fn random_pair<R: Rng + ?Sized>(
    rng: &mut R,
    vocab_size: usize,
    scale: f64,
    drift: f64,
) -> (SparseDist, SparseDist) {
    let base: Vec<f64> = (0..vocab_size)
        .map(|_| scale * normal(rng))
        .collect();
    let moved: Vec<f64> = base
        .iter()
        .map(|&x| x + drift * normal(rng))
        .collect();
    let reference = SparseDist::from_dense_full(&DenseLogits::from_logits(&base).unwrap());
    let target = SparseDist::from_dense_full(&DenseLogits::from_logits(&moved).unwrap());
    (target, reference)
}

/// Full-support pair whose KL exceeds `epsilon`, re-drawing with growing drift
/// until it does.
pub fn random_violated_pair<R: Rng + ?Sized>(
    rng: &mut R,
    vocab_size: usize,
    epsilon: f64,
) -> (SparseDist, SparseDist) {
    let mut drift = 1.0;
    loop {
        let scale = rng.gen_range(0.5..3.0);
        let (t, r) = random_pair(rng, vocab_size, scale, drift);
        let kl = crate::sparse_dist::kl(&t, &r).unwrap();
        if kl > epsilon * 1.01 {
            return (t, r);
        }
        drift *= 1.5;
    }
}
