use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{sample_window, CorpusSet};

/// How the domain of each optimizer step is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Sampling {
    /// Uniform random domain.
    Balanced,
    /// Domains in fixed cyclic order.
    RoundRobin,
    /// Domain `j` with probability proportional to `size_j^alpha`.
    Oversample { alpha: f64 },
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling::Oversample { alpha: 0.5 }
    }
}

/// Draws domain indices for a fixed list of domain sizes.
#[derive(Clone, Debug)]
pub struct DomainSampler {
    mode: Sampling,
    probs: Vec<f64>,
    next: usize,
}

impl DomainSampler {
    pub fn new(mode: Sampling, sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::Data("no domains to sample from".into()));
        }
        let weights: Vec<f64> = match mode {
            Sampling::Oversample { alpha } => {
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(Error::Config(format!("oversampling exponent {alpha} outside [0, 1]")));
                }
                sizes.iter().map(|&s| (s as f64).powf(alpha)).collect()
            }
            _ => vec![1.0; sizes.len()],
        };
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Data("all domains are empty".into()));
        }
        Ok(Self {
            mode,
            probs: weights.iter().map(|w| w / total).collect(),
            next: 0,
        })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        match self.mode {
            Sampling::RoundRobin => {
                let d = self.next % self.probs.len();
                self.next += 1;
                d
            }
            Sampling::Balanced => rng.random_range(0..self.probs.len()),
            Sampling::Oversample { .. } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (i, p) in self.probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return i;
                    }
                }
                self.probs.len() - 1
            }
        }
    }
}

/// `batch_size` windows of `seq_len + 1` tokens from domain `domain`.
pub fn sample_windows<R: Rng + ?Sized>(
    corpora: &CorpusSet,
    domain: usize,
    batch_size: usize,
    seq_len: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let tokens = corpora.domains()[domain].tokens();
    (0..batch_size).map(|_| sample_window(tokens, seq_len + 1, rng)).collect()
}

/// One domain and a batch of windows from it.
pub fn sample_batch<R: Rng + ?Sized>(
    corpora: &CorpusSet,
    sampler: &mut DomainSampler,
    batch_size: usize,
    seq_len: usize,
    rng: &mut R,
) -> (usize, Vec<Vec<usize>>) {
    let d = sampler.sample(rng);
    (d, sample_windows(corpora, d, batch_size, seq_len, rng))
}
