//! Synthetic text domains with a planted two-level hierarchy.
//!
//! Each domain is a first-order Markov chain over a small byte alphabet.
//! Domains come in groups: members of a group share an alphabet and a base
//! transition matrix, and differ by a per-domain perturbation of strength
//! `divergence`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{Corpus, CorpusSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub groups: usize,
    pub per_group: usize,
    pub docs_per_domain: usize,
    pub doc_len: usize,
    /// Weight of each domain's own transitions against its group's base.
    pub divergence: f64,
    /// Dirichlet concentration of transition rows; smaller is peakier.
    pub concentration: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            groups: 2,
            per_group: 2,
            docs_per_domain: 200,
            doc_len: 96,
            divergence: 0.5,
            concentration: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.per_group == 0 || self.docs_per_domain == 0 || self.doc_len < 2 {
            return Err(Error::Config("synthetic corpus sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.divergence) {
            return Err(Error::Config(format!("divergence {} outside [0, 1]", self.divergence)));
        }
        if !(self.concentration > 0.0) {
            return Err(Error::Config("concentration must be positive".into()));
        }
        if self.groups > 4 {
            return Err(Error::Config(format!("at most 4 groups, got {}", self.groups)));
        }
        Ok(())
    }
}

/// A Markov-chain text source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub group: usize,
    pub alphabet: Vec<u8>,
    /// Row-stochastic, `alphabet.len()` square.
    pub transitions: Vec<Vec<f64>>,
}

impl DomainSpec {
    pub fn document<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> String {
        let mut state = rng.random_range(0..self.alphabet.len());
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(self.alphabet[state]);
            state = draw(&self.transitions[state], rng);
        }
        String::from_utf8(out).expect("alphabet is ascii")
    }

    pub fn corpus(&self, docs: usize, len: usize, seed: u64) -> Corpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Corpus::new(self.name.clone(), (0..docs).map(|_| self.document(len, &mut rng)).collect())
    }
}

fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn dirichlet_row<R: Rng + ?Sized>(n: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive shape");
    loop {
        let row: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let s: f64 = row.iter().sum();
        if s > 0.0 && s.is_finite() {
            return row.into_iter().map(|x| x / s).collect();
        }
    }
}

fn dirichlet_matrix<R: Rng + ?Sized>(n: usize, alpha: f64, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n).map(|_| dirichlet_row(n, alpha, rng)).collect()
}

const GROUP_LETTERS: [&[u8]; 4] = [b"abcdefghijkl", b"ghijklmnopqr", b"stuvwxyz0123", b"456789ABCDEF"];

/// Domain name for member `j` of group `g`: `a1`, `a2`, `b1`, ...
pub fn domain_name(g: usize, j: usize) -> String {
    format!("{}{}", (b'a' + g as u8) as char, j + 1)
}

/// The planted domain sources, group-major.
pub fn planted_specs(cfg: &SynthConfig) -> Result<Vec<DomainSpec>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut specs = Vec::new();
    for g in 0..cfg.groups {
        let mut alphabet = GROUP_LETTERS[g].to_vec();
        alphabet.push(b' ');
        let n = alphabet.len();
        let base = dirichlet_matrix(n, cfg.concentration, &mut rng);
        for j in 0..cfg.per_group {
            let own = dirichlet_matrix(n, cfg.concentration, &mut rng);
            let transitions = base
                .iter()
                .zip(&own)
                .map(|(b, o)| b.iter().zip(o).map(|(b, o)| (1.0 - cfg.divergence) * b + cfg.divergence * o).collect())
                .collect();
            specs.push(DomainSpec {
                name: domain_name(g, j),
                group: g,
                alphabet: alphabet.clone(),
                transitions,
            });
        }
    }
    Ok(specs)
}

/// One corpus per planted domain.
pub fn planted_corpora(cfg: &SynthConfig) -> Result<CorpusSet> {
    let specs = planted_specs(cfg)?;
    CorpusSet::new(
        specs
            .iter()
            .enumerate()
            .map(|(i, s)| s.corpus(cfg.docs_per_domain, cfg.doc_len, cfg.seed.wrapping_add(1000 + i as u64)))
            .collect(),
    )
}

/// Manual grouping of the planted domains, e.g. `((a1, a2), (b1, b2))`.
pub fn planted_grouping(cfg: &SynthConfig) -> String {
    let groups: Vec<String> = (0..cfg.groups)
        .map(|g| {
            let names: Vec<String> = (0..cfg.per_group).map(|j| domain_name(g, j)).collect();
            format!("({})", names.join(", "))
        })
        .collect();
    format!("({})", groups.join(", "))
}

/// A held-out domain whose documents each come from one source chosen with
/// the given weights.
pub fn mixed_corpus(name: &str, sources: &[(&DomainSpec, f64)], docs: usize, len: usize, seed: u64) -> Result<Corpus> {
    let total: f64 = sources.iter().map(|(_, w)| w).sum();
    if sources.is_empty() || sources.iter().any(|(_, w)| !(*w >= 0.0)) || !(total > 0.0) {
        return Err(Error::Config("mixture weights must be non-negative with a positive sum".into()));
    }
    let weights: Vec<f64> = sources.iter().map(|(_, w)| w / total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let documents = (0..docs)
        .map(|_| {
            let k = draw(&weights, &mut rng);
            sources[k].0.document(len, &mut rng)
        })
        .collect();
    Ok(Corpus::new(name, documents))
}

/// Writes each corpus to `dir/<name>.txt`, one document per line.
pub fn write_corpora(corpora: &CorpusSet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for c in corpora.domains() {
        std::fs::write(dir.join(format!("{}.txt", c.name())), c.documents().join("\n") + "\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_stochastic_and_deterministic() {
        let cfg = SynthConfig::default();
        let specs = planted_specs(&cfg).unwrap();
        assert_eq!(specs.len(), 4);
        assert_eq!(specs.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(), ["a1", "a2", "b1", "b2"]);
        for s in &specs {
            for row in &s.transitions {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(planted_corpora(&cfg).unwrap(), planted_corpora(&cfg).unwrap());
        assert_eq!(planted_grouping(&cfg), "((a1, a2), (b1, b2))");
    }

    #[test]
    fn documents_use_the_group_alphabet() {
        let cfg = SynthConfig {
            docs_per_domain: 5,
            ..SynthConfig::default()
        };
        let corpora = planted_corpora(&cfg).unwrap();
        let a = corpora.get("a1").unwrap();
        assert_eq!(a.documents().len(), 5);
        assert!(a.documents().iter().all(|d| d.len() == 96 && d.bytes().all(|b| b" abcdefghijkl".contains(&b))));
    }

    #[test]
    fn mixture_follows_weights() {
        let specs = planted_specs(&SynthConfig::default()).unwrap();
        let mix = mixed_corpus("held", &[(&specs[0], 0.7), (&specs[2], 0.3)], 1000, 20, 3).unwrap();
        // group b letters never occur in group a documents
        let from_b = mix.documents().iter().filter(|d| d.bytes().any(|b| b"mnopqr".contains(&b))).count();
        assert!((from_b as f64 / 1000.0 - 0.3).abs() < 0.05, "{from_b}");
        assert!(mixed_corpus("x", &[], 1, 2, 0).is_err());
    }

    #[test]
    fn bad_configs() {
        for cfg in [
            SynthConfig { groups: 0, ..Default::default() },
            SynthConfig { divergence: 1.5, ..Default::default() },
            SynthConfig { groups: 5, ..Default::default() },
        ] {
            assert!(matches!(planted_specs(&cfg), Err(Error::Config(_))));
        }
    }
}
