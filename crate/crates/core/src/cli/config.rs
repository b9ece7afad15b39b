use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clustering::GmmConfig;
use crate::costmodel::TableInputs;
use crate::error::{Error, Result};
use crate::lm::{Corpus, CorpusSet, LmConfig, PretrainConfig, Vocab};
use crate::routing::RoutingConfig;
use crate::trainer::{LrSchedule, Sampling, TrainConfig};

pub const SEED_ENV: &str = "HIERADAPT_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEntry {
    pub name: String,
    /// One document per line, relative to the config file.
    pub path: PathBuf,
    /// Held-out domains are never trained on; `route` evaluates them.
    #[serde(default)]
    pub held_out: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub context_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let lm = LmConfig::default();
        Self {
            n_layers: lm.n_layers,
            d_model: lm.d_model,
            n_heads: lm.n_heads,
            context_len: lm.context_len,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            steps: p.steps,
            lr: p.lr,
            batch_size: p.batch_size,
            seq_len: p.seq_len,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub accum_steps: usize,
    pub total_steps: usize,
    pub seq_len: usize,
    pub batch_size: usize,
    pub sampling: Sampling,
    pub schedule: LrSchedule,
    /// Bottleneck of every tree node.
    pub bottleneck: usize,
    /// Bottleneck of the one-adapter baselines; defaults to the flop-parity
    /// width `bottleneck × average path length`.
    pub baseline_bottleneck: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            accum_steps: t.accum_steps,
            total_steps: t.total_steps,
            seq_len: t.seq_len,
            batch_size: t.batch_size,
            sampling: t.sampling,
            schedule: t.schedule,
            bottleneck: 8,
            baseline_bottleneck: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeSection {
    /// Nested grouping such as `((a, b), (c, d))`; when absent the tree is
    /// built by clustering.
    pub manual: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringSection {
    pub pca_dim: usize,
    pub n_components: usize,
    /// Covariance ridge as a fraction of the mean data variance.
    pub reg_scale: f64,
    pub n_init: usize,
    pub max_iter: usize,
    pub tol: f64,
    /// Documents embedded per domain.
    pub per_domain: usize,
    /// Tokens embedded per document.
    pub seq_len: usize,
}

impl Default for ClusteringSection {
    fn default() -> Self {
        let g = GmmConfig::default();
        Self {
            pca_dim: 16,
            n_components: 4,
            reg_scale: g.reg_scale,
            n_init: g.n_init,
            max_iter: g.max_iter,
            tol: g.tol,
            per_domain: 100,
            seq_len: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Trailing fraction of every domain's documents held back for evaluation.
    pub test_fraction: f64,
    pub seq_len: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            seq_len: 32,
        }
    }
}

/// Declarative description of a full run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(rename = "domain", default)]
    pub domains: Vec<DomainEntry>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub tree: TreeSection,
    #[serde(default)]
    pub clustering: ClusteringSection,
    #[serde(default)]
    pub routing: RoutingConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub cost: Option<TableInputs>,
    /// Directory relative paths resolve against; not part of the document.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}='{s}' is not an unsigned integer")))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out(&self, file: &str) -> PathBuf {
        self.resolve(&self.out_dir).join(file)
    }

    /// Checks every section and that all corpus files exist.
    pub fn validate(&self) -> Result<()> {
        if self.domains.iter().all(|d| d.held_out) {
            return Err(Error::Config("at least one training [[domain]] is required".into()));
        }
        for (i, d) in self.domains.iter().enumerate() {
            if d.name.is_empty() || d.name.contains([',', '(', ')', ';']) || d.name.trim() != d.name {
                return Err(Error::Config(format!("invalid domain name '{}'", d.name)));
            }
            if self.domains[..i].iter().any(|o| o.name == d.name) {
                return Err(Error::Config(format!("duplicate domain '{}'", d.name)));
            }
            let p = self.resolve(&d.path);
            if !p.is_file() {
                return Err(Error::Config(format!("corpus for '{}' not found at {}", d.name, p.display())));
            }
        }
        self.lm().validate()?;
        self.train_config().validate()?;
        self.routing.validate()?;
        if self.train.bottleneck == 0 || self.train.baseline_bottleneck == Some(0) {
            return Err(Error::Config("bottleneck must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.eval.test_fraction) {
            return Err(Error::Config(format!("test_fraction {} outside [0, 1)", self.eval.test_fraction)));
        }
        let ctx = self.model.context_len;
        for (what, len) in [
            ("pretrain", self.pretrain.seq_len),
            ("train", self.train.seq_len),
            ("eval", self.eval.seq_len),
            ("clustering", self.clustering.seq_len),
        ] {
            if len == 0 || len > ctx {
                return Err(Error::Config(format!("{what} seq_len {len} must be in 1..={ctx}")));
            }
        }
        Ok(())
    }

    pub fn lm(&self) -> LmConfig {
        LmConfig {
            n_layers: self.model.n_layers,
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            context_len: self.model.context_len,
            vocab_size: Vocab::SIZE,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain.steps,
            lr: self.pretrain.lr,
            batch_size: self.pretrain.batch_size,
            seq_len: self.pretrain.seq_len,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            accum_steps: self.train.accum_steps,
            total_steps: self.train.total_steps,
            seq_len: self.train.seq_len,
            batch_size: self.train.batch_size,
            sampling: self.train.sampling,
            seed: self.seed,
            schedule: self.train.schedule,
        }
    }

    pub fn gmm_config(&self) -> GmmConfig {
        GmmConfig {
            max_iter: self.clustering.max_iter,
            tol: self.clustering.tol,
            reg_scale: self.clustering.reg_scale,
            seed: self.seed,
            n_init: self.clustering.n_init,
        }
    }

    pub fn corpus_paths(&self, held_out: bool) -> Vec<PathBuf> {
        self.domains
            .iter()
            .filter(|d| d.held_out == held_out)
            .map(|d| self.resolve(&d.path))
            .collect()
    }

    /// Training and evaluation splits of the training domains, or the full
    /// held-out corpora.
    pub fn corpora(&self, held_out: bool) -> Result<(CorpusSet, CorpusSet)> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for d in self.domains.iter().filter(|d| d.held_out == held_out) {
            let c = Corpus::load(d.name.clone(), &self.resolve(&d.path))?;
            if held_out {
                test.push(c);
            } else if self.eval.test_fraction > 0.0 {
                let (a, b) = c.split_tail(self.eval.test_fraction);
                train.push(a);
                test.push(b);
            } else {
                train.push(c.clone());
                test.push(c);
            }
        }
        Ok((CorpusSet::new(train)?, CorpusSet::new(test)?))
    }
}
