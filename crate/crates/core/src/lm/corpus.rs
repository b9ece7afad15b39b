use std::path::Path;

use super::vocab::Vocab;
use crate::error::{Error, Result};

/// One domain's documents and their concatenated token stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    name: String,
    documents: Vec<String>,
    tokens: Vec<usize>,
}

impl Corpus {
    pub fn new(name: impl Into<String>, documents: Vec<String>) -> Self {
        let vocab = Vocab;
        let tokens = documents.iter().flat_map(|d| vocab.tokenize(d)).collect();
        Self {
            name: name.into(),
            documents,
            tokens,
        }
    }

    /// Reads a UTF-8 file with one document per line; blank lines are skipped.
    pub fn load(name: impl Into<String>, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let docs = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect();
        Ok(Self::new(name, docs))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn documents(&self) -> &[String] {
        &self.documents
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Splits off the trailing `fraction` of documents (at least one when possible).
    pub fn split_tail(&self, fraction: f64) -> (Corpus, Corpus) {
        let n = self.documents.len();
        let tail = ((n as f64 * fraction).round() as usize).clamp(usize::from(n > 1), n.saturating_sub(1));
        let (head, rest) = self.documents.split_at(n - tail);
        (
            Corpus::new(self.name.clone(), head.to_vec()),
            Corpus::new(self.name.clone(), rest.to_vec()),
        )
    }

    /// Splits off the first `count` documents.
    pub fn split_head(&self, count: usize) -> (Corpus, Corpus) {
        let count = count.min(self.documents.len());
        let (head, rest) = self.documents.split_at(count);
        (
            Corpus::new(self.name.clone(), head.to_vec()),
            Corpus::new(self.name.clone(), rest.to_vec()),
        )
    }
}

/// Ordered set of named domain corpora.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusSet {
    domains: Vec<Corpus>,
}

impl CorpusSet {
    pub fn new(domains: Vec<Corpus>) -> Result<Self> {
        for (i, d) in domains.iter().enumerate() {
            if domains[..i].iter().any(|o| o.name == d.name) {
                return Err(Error::Validation(format!("duplicate domain {}", d.name)));
            }
        }
        Ok(Self { domains })
    }

    pub fn domains(&self) -> &[Corpus] {
        &self.domains
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.domains.iter().map(Corpus::name).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Corpus> {
        self.domains.iter().find(|d| d.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d.name == name)
    }

    /// Fails with a data error naming the first empty domain, if any.
    pub fn require_non_empty(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::Data("no domains given".into()));
        }
        match self.domains.iter().find(|d| d.is_empty()) {
            Some(d) => Err(Error::Data(format!("domain {} has no documents", d.name))),
            None => Ok(()),
        }
    }
}
