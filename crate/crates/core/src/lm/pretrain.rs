use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::CorpusSet;
use super::model::{Backbone, LmConfig};
use crate::error::{Error, Result};
use crate::numcore::Tape;
use crate::trainer::{Adam, AdamConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Input positions per window; each window holds `seq_len + 1` tokens.
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 3e-3,
            batch_size: 4,
            seq_len: 64,
            seed: 0,
        }
    }
}

/// `len` consecutive tokens starting at `start`, wrapping around the stream end.
pub fn window(tokens: &[usize], start: usize, len: usize) -> Vec<usize> {
    (0..len).map(|i| tokens[(start + i) % tokens.len()]).collect()
}

/// Uniformly placed window of `len` tokens; short streams wrap with a warning.
pub fn sample_window<R: Rng + ?Sized>(tokens: &[usize], len: usize, rng: &mut R) -> Vec<usize> {
    if tokens.len() >= len {
        let start = rng.random_range(0..=tokens.len() - len);
        tokens[start..start + len].to_vec()
    } else {
        log::warn!(
            "stream of {} tokens is shorter than a {len}-token window; wrapping",
            tokens.len()
        );
        let start = rng.random_range(0..tokens.len());
        window(tokens, start, len)
    }
}

/// Result of a pretraining run.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub backbone: Backbone,
    pub losses: Vec<f64>,
}

/// Trains a fresh backbone by next-token cross-entropy on windows drawn
/// uniformly over domains.
pub fn pretrain(corpora: &CorpusSet, config: LmConfig, train: &PretrainConfig) -> Result<Pretrained> {
    corpora.require_non_empty()?;
    if train.seq_len > config.context_len || train.seq_len == 0 {
        return Err(Error::Config(format!(
            "seq_len {} must be in 1..={}",
            train.seq_len, config.context_len
        )));
    }
    if train.batch_size == 0 || !(train.lr > 0.0) {
        return Err(Error::Config("batch_size and lr must be positive".into()));
    }
    let mut backbone = Backbone::init(config, train.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed_0001);
    let mut opt = Adam::new(backbone.params(), AdamConfig::default());
    let all: Vec<usize> = (0..backbone.params().len()).collect();
    let mut losses = Vec::with_capacity(train.steps);

    for _ in 0..train.steps {
        let domain = &corpora.domains()[rng.random_range(0..corpora.len())];
        let mut sums: Vec<Vec<f64>> = backbone.params().tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        let mut loss_sum = 0.0;
        for _ in 0..train.batch_size {
            let w = sample_window(domain.tokens(), train.seq_len + 1, &mut rng);
            let mut tape = Tape::new();
            let vars = backbone.bind(&mut tape, true);
            let loss = backbone.window_loss(&mut tape, &vars, &w, None)?;
            loss_sum += tape.value(loss)[0];
            tape.backward(loss)?;
            for (s, v) in sums.iter_mut().zip(&vars) {
                if let Some(g) = tape.grad(*v) {
                    s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
        }
        let n = train.batch_size as f64;
        sums.iter_mut().flatten().for_each(|g| *g /= n);
        opt.step(backbone.params_mut(), &all, &sums, train.lr)?;
        losses.push(loss_sum / n);
    }
    backbone.set_step(train.steps as u64);
    Ok(Pretrained { backbone, losses })
}
