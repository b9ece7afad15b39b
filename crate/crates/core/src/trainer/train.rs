use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::counters::UpdateCounters;
use super::sampling::{sample_windows, DomainSampler, Sampling};
use crate::adapters::{AdapterHook, AdapterStore};
use crate::domtree::DomainTree;
use crate::error::{Error, Result};
use crate::lm::{Backbone, Corpus, CorpusSet};
use crate::numcore::Tape;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear decay to zero at `total_steps`.
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Micro-batches accumulated into each optimizer step.
    pub accum_steps: usize,
    /// Optimizer steps.
    pub total_steps: usize,
    pub seq_len: usize,
    /// Windows per micro-batch.
    pub batch_size: usize,
    pub sampling: Sampling,
    pub seed: u64,
    #[serde(default)]
    pub schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            accum_steps: 2,
            total_steps: 200,
            seq_len: 32,
            batch_size: 2,
            sampling: Sampling::default(),
            seed: 0,
            schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.accum_steps == 0 || self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::Config("accum_steps, batch_size and seq_len must be at least 1".into()));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Linear => self.lr * (1.0 - step as f64 / self.total_steps as f64),
        }
    }
}

/// Which adapter layout a run trains.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// One adapter set per node of a domain tree.
    Hierarchical,
    /// One adapter set shared by every domain.
    MultiDomain,
    /// One adapter set trained on a single domain.
    Single(String),
}

impl Variant {
    pub fn label(&self) -> String {
        match self {
            Variant::Hierarchical => "hierarchical".into(),
            Variant::MultiDomain => "multi_domain".into(),
            Variant::Single(d) => format!("single:{d}"),
        }
    }

    /// Tree realising this variant; baselines are one-node trees.
    pub fn tree(&self, hierarchical: &DomainTree, domains: &[&str]) -> Result<DomainTree> {
        match self {
            Variant::Hierarchical => Ok(hierarchical.clone()),
            Variant::MultiDomain => DomainTree::single(domains),
            Variant::Single(d) => {
                if !domains.contains(&d.as_str()) {
                    return Err(Error::Config(format!("unknown domain '{d}' for a single-adapter run")));
                }
                DomainTree::single(&[d.as_str()])
            }
        }
    }
}

/// One row of the loss trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub domain: String,
    /// Mean window loss over the step's micro-batches.
    pub loss: f64,
    pub active_nodes: Vec<usize>,
}

/// `step,domain,loss,active_nodes` with node ids joined by `;`.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("step,domain,loss,active_nodes\n");
    for r in rows {
        let nodes: Vec<String> = r.active_nodes.iter().map(|n| n.to_string()).collect();
        s.push_str(&format!("{},{},{:.17e},{}\n", r.step, r.domain, r.loss, nodes.join(";")));
    }
    s
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub store: AdapterStore,
    pub counters: UpdateCounters,
    pub trace: Vec<TraceRow>,
}

/// Trains the adapters of `tree` on the corpora whose domains the tree
/// maps, with the backbone frozen.
///
/// Every optimizer step draws one domain, runs `accum_steps` micro-batches
/// of `batch_size` windows from it through the path to that domain's leaf,
/// averages the gradients over all windows and applies Adam to the path's
/// adapters and the shared norms only.
pub fn train_adapters(
    backbone: &Backbone,
    tree: &DomainTree,
    mut store: AdapterStore,
    corpora: &CorpusSet,
    cfg: &TrainConfig,
) -> Result<Trained> {
    cfg.validate()?;
    store.check_compatible(backbone.config())?;
    if store.node_count() != tree.node_count() {
        return Err(Error::Config(format!(
            "adapter store has {} nodes but the tree has {}",
            store.node_count(),
            tree.node_count()
        )));
    }
    if cfg.seq_len > backbone.config().context_len {
        return Err(Error::Config(format!(
            "seq_len {} exceeds the context of {}",
            cfg.seq_len,
            backbone.config().context_len
        )));
    }
    let domains: Vec<&Corpus> = corpora
        .domains()
        .iter()
        .filter(|c| tree.leaf_of_domain().contains_key(c.name()))
        .collect();
    if domains.is_empty() {
        return Err(Error::Data("no corpus domain is mapped to a tree leaf".into()));
    }
    for c in corpora.domains().iter().filter(|c| !tree.leaf_of_domain().contains_key(c.name())) {
        log::info!("domain '{}' has no leaf in this tree and is not trained on", c.name());
    }
    let train_set = CorpusSet::new(domains.into_iter().cloned().collect())?;
    train_set.require_non_empty()?;
    let paths: Vec<Vec<usize>> = train_set
        .domains()
        .iter()
        .map(|c| tree.path_for_domain(c.name()))
        .collect::<Result<_>>()?;

    let sizes: Vec<usize> = train_set.domains().iter().map(|c| c.tokens().len()).collect();
    let mut sampler = DomainSampler::new(cfg.sampling, &sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(store.params(), AdamConfig::default());
    let mut counters = UpdateCounters::new(tree.node_count());
    let mut trace = Vec::with_capacity(cfg.total_steps);
    let windows_per_step = (cfg.accum_steps * cfg.batch_size) as f64;

    for step in 0..cfg.total_steps {
        let d = sampler.sample(&mut rng);
        let path = &paths[d];
        let mut sums: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut loss_sum = 0.0;
        for _ in 0..cfg.accum_steps {
            for w in sample_windows(&train_set, d, cfg.batch_size, cfg.seq_len, &mut rng) {
                let mut tape = Tape::new();
                let vars = backbone.bind(&mut tape, false);
                let mut hook = AdapterHook::single(&store, path.clone(), true)?;
                let loss = backbone
                    .window_loss(&mut tape, &vars, &w, Some(&mut hook))
                    .map_err(|e| step_error(e, step, train_set.domains()[d].name()))?;
                loss_sum += tape.value(loss)[0];
                tape.backward(loss)?;
                for (&idx, &v) in hook.bound() {
                    let g = tape.grad(v).ok_or_else(|| Error::Contract("adapter parameter without gradient".into()))?;
                    let acc = sums.entry(idx).or_insert_with(|| vec![0.0; g.len()]);
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
        }
        let (active, grads): (Vec<usize>, Vec<Vec<f64>>) = sums
            .into_iter()
            .map(|(i, mut g)| {
                g.iter_mut().for_each(|v| *v /= windows_per_step);
                (i, g)
            })
            .unzip();
        opt.step(store.params_mut(), &active, &grads, cfg.lr_at(step))
            .map_err(|e| step_error(e, step, train_set.domains()[d].name()))?;
        counters.record(path);
        trace.push(TraceRow {
            step,
            domain: train_set.domains()[d].name().to_string(),
            loss: loss_sum / windows_per_step,
            active_nodes: path.clone(),
        });
    }
    Ok(Trained { store, counters, trace })
}

fn step_error(e: Error, step: usize, domain: &str) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} at step {step} on domain '{domain}'")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domtree::{build_manual_tree, Grouping};
    use crate::lm::{LmConfig, Vocab};

    fn lm() -> LmConfig {
        LmConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            context_len: 16,
            vocab_size: Vocab::SIZE,
        }
    }

    fn corpora(names: &[&str]) -> CorpusSet {
        CorpusSet::new(
            names
                .iter()
                .map(|n| Corpus::new(*n, vec![format!("{n} says {n} and {n} again"); 6]))
                .collect(),
        )
        .unwrap()
    }

    fn tree() -> DomainTree {
        build_manual_tree(&Grouping::parse("((a, b), (c, d))").unwrap()).unwrap()
    }

    fn cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            lr: 1e-2,
            accum_steps: 2,
            total_steps: steps,
            seq_len: 8,
            batch_size: 1,
            sampling: Sampling::RoundRobin,
            seed: 3,
            schedule: LrSchedule::Constant,
        }
    }

    /// Fresh backbone with a random head, so hidden states reach the loss.
    fn backbone() -> Backbone {
        use crate::numcore::Tensor;
        let mut b = Backbone::init(lm(), 1).unwrap();
        let head = b.params().index_of("head.weight").unwrap();
        let shape = b.params().get(head).shape().to_vec();
        *b.params_mut().get_mut(head) = Tensor::randn(&shape, 0.5, &mut ChaCha8Rng::seed_from_u64(7));
        b
    }

    fn run(names: &[&str], c: &TrainConfig) -> (Backbone, AdapterStore, Trained) {
        let backbone = backbone();
        let t = tree();
        let store = t.attach_adapters(&lm(), 2, 2).unwrap();
        let out = train_adapters(&backbone, &t, store.clone(), &corpora(names), c).unwrap();
        (backbone, store, out)
    }

    #[test]
    fn zero_steps_leave_adapters_untouched() {
        let (_, init, out) = run(&["a", "b", "c", "d"], &cfg(0));
        assert_eq!(out.store, init);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn round_robin_counters_are_exact() {
        let (_, _, out) = run(&["a", "b", "c", "d"], &cfg(8));
        let t = tree();
        out.counters.check_conservation(&t).unwrap();
        assert_eq!(out.counters.get(t.root()), 8);
        for leaf in t.leaves() {
            assert_eq!(out.counters.get(t.root()) / out.counters.get(leaf), 4);
            assert_eq!(out.counters.get(t.root()) % out.counters.get(leaf), 0);
        }
        assert_eq!(out.trace[1].active_nodes, vec![1, 4, 6]);
        let json: serde_json::Value = serde_json::from_str(&out.counters.to_json().unwrap()).unwrap();
        assert_eq!(json["nodes"][6]["updates"], 8);
    }

    #[test]
    fn off_path_adapters_and_backbone_stay_frozen() {
        let backbone_before = backbone().checksum();
        let (backbone, init, out) = run(&["a", "b"], &cfg(4));
        assert_eq!(backbone.checksum(), backbone_before);
        for node in [2, 3, 5] {
            assert_eq!(out.store.node_tensors(node), init.node_tensors(node), "node {node}");
        }
        for node in [0, 1, 4, 6] {
            assert_ne!(out.store.node_tensors(node), init.node_tensors(node), "node {node}");
        }
        for i in out.store.shared_ln_indices() {
            assert_ne!(out.store.params().get(i), init.params().get(i));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let c = TrainConfig {
            sampling: Sampling::Balanced,
            ..cfg(3)
        };
        let (_, _, x) = run(&["a", "b", "c", "d"], &c);
        let (_, _, y) = run(&["a", "b", "c", "d"], &c);
        assert_eq!(x.store, y.store);
        assert_eq!(x.trace, y.trace);
    }

    #[test]
    fn accumulation_matches_a_larger_batch() {
        let split = TrainConfig {
            accum_steps: 2,
            batch_size: 1,
            ..cfg(3)
        };
        let whole = TrainConfig {
            accum_steps: 1,
            batch_size: 2,
            ..cfg(3)
        };
        let (_, _, x) = run(&["a", "b", "c", "d"], &split);
        let (_, _, y) = run(&["a", "b", "c", "d"], &whole);
        assert_eq!(x.store, y.store);
        assert_eq!(x.trace, y.trace);
    }

    #[test]
    fn baseline_variants_are_single_nodes() {
        let t = tree();
        let names = ["a", "b", "c", "d"];
        let multi = Variant::MultiDomain.tree(&t, &names).unwrap();
        assert_eq!(multi.node_count(), 1);
        assert_eq!(multi.leaf_of_domain().len(), 4);
        let single = Variant::Single("c".into()).tree(&t, &names).unwrap();
        assert_eq!(single.leaf_of_domain().keys().collect::<Vec<_>>(), vec!["c"]);
        assert!(Variant::Single("zz".into()).tree(&t, &names).is_err());

        let backbone = backbone();
        let store = single.attach_adapters(&lm(), 2, 0).unwrap();
        let out = train_adapters(&backbone, &single, store, &corpora(&names), &cfg(2)).unwrap();
        assert!(out.trace.iter().all(|r| r.domain == "c"));
    }

    #[test]
    fn trace_csv_layout() {
        let rows = vec![TraceRow {
            step: 0,
            domain: "a".into(),
            loss: 1.5,
            active_nodes: vec![0, 4, 6],
        }];
        assert_eq!(trace_csv(&rows), "step,domain,loss,active_nodes\n0,a,1.50000000000000000e0,0;4;6\n");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let backbone = Backbone::init(lm(), 1).unwrap();
        let t = tree();
        let store = t.attach_adapters(&lm(), 2, 0).unwrap();
        let bad = TrainConfig { lr: 0.0, ..cfg(1) };
        assert!(matches!(
            train_adapters(&backbone, &t, store.clone(), &corpora(&["a"]), &bad),
            Err(Error::Config(_))
        ));
        let long = TrainConfig { seq_len: 17, ..cfg(1) };
        assert!(train_adapters(&backbone, &t, store.clone(), &corpora(&["a"]), &long).is_err());
        assert!(matches!(
            train_adapters(&backbone, &t, store, &corpora(&["zz"]), &cfg(1)),
            Err(Error::Data(_))
        ));
    }
}
