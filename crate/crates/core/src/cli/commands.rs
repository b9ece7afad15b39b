use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::artifacts::{require, Recorder};
use super::config::RunConfig;
use crate::adapters::{AdapterHook, AdapterStore, PathCombine};
use crate::clustering::{discover_tree, fit_router, embed_documents, embed_domains, DiscoveryConfig, EmbeddingMatrix, GmmModel, PcaModel};
use crate::costmodel::{parameter_table, parity_bottleneck, table_csv, table_text, TableInputs};
use crate::domtree::{build_manual_tree, DomainTree, Grouping};
use crate::error::{Error, Result};
use crate::lm::{pretrain, Backbone, CorpusSet};
use crate::routing::{evaluate_perplexity, multi_path_hook, perplexity_csv, select_paths, PerplexityRow, RouteReport};
use crate::synth::{mixed_corpus, planted_corpora, planted_grouping, planted_specs, write_corpora, SynthConfig};
use crate::trainer::{train_adapters, trace_csv, Variant};

pub const BACKBONE: &str = "backbone.bin";
pub const EMBEDDINGS: &str = "embeddings.bin";
pub const TREE: &str = "tree.json";
pub const ROUTER: &str = "router.json";

/// Projection and mixture needed to route new text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Router {
    pub pca: PcaModel,
    pub gmm: GmmModel,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

fn load_backbone(cfg: &RunConfig, rec: &mut Recorder) -> Result<Backbone> {
    let path = require(cfg.out(BACKBONE), "pretrain")?;
    rec.input(&path);
    let bb = Backbone::load(&mut open(&path)?)?;
    if *bb.config() != cfg.lm() {
        return Err(Error::Config("backbone checkpoint does not match the [model] section".into()));
    }
    Ok(bb)
}

fn load_tree(cfg: &RunConfig, rec: &mut Recorder) -> Result<DomainTree> {
    let path = require(cfg.out(TREE), "build-tree")?;
    rec.input(&path);
    DomainTree::load(&mut open(&path)?)
}

fn training_corpora(cfg: &RunConfig, rec: &mut Recorder) -> Result<(CorpusSet, CorpusSet)> {
    rec.inputs(cfg.corpus_paths(false));
    cfg.corpora(false)
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let mut rec = Recorder::new(cfg, "pretrain");
    let (train, _) = training_corpora(cfg, &mut rec)?;
    let out = pretrain(&train, cfg.lm(), &cfg.pretrain_config())?;
    let mut bytes = Vec::new();
    out.backbone.save(&mut bytes)?;
    rec.write(BACKBONE, &bytes)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in out.losses.iter().enumerate() {
        csv.push_str(&format!("{},{:.17e}\n", i + 1, l));
    }
    rec.write("pretrain_loss.csv", csv.as_bytes())?;
    rec.finish()?;
    Ok(())
}

pub fn cmd_embed(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let mut rec = Recorder::new(cfg, "embed");
    let bb = load_backbone(cfg, &mut rec)?;
    let (train, _) = training_corpora(cfg, &mut rec)?;
    let emb = embed_domains(&bb, &train, cfg.clustering.per_domain, cfg.clustering.seq_len, cfg.seed)?;
    let mut bytes = Vec::new();
    emb.write_to(&mut bytes)?;
    rec.write(EMBEDDINGS, &bytes)?;
    rec.finish()?;
    Ok(())
}

fn discovery_config(cfg: &RunConfig) -> DiscoveryConfig {
    DiscoveryConfig {
        pca_dim: cfg.clustering.pca_dim,
        n_components: cfg.clustering.n_components,
        gmm: cfg.gmm_config(),
    }
}

pub fn cmd_build_tree(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let mut rec = Recorder::new(cfg, "build_tree");
    let tree = if let Some(spec) = &cfg.tree.manual {
        let mut tree = build_manual_tree(&Grouping::parse(spec)?)?;
        for d in cfg.domains.iter().filter(|d| !d.held_out) {
            tree.leaf_for_domain(&d.name)
                .map_err(|_| Error::Config(format!("training domain '{}' is not in the manual tree", d.name)))?;
        }
        // embeddings are optional here; with them the tree also becomes routable
        let emb_path = cfg.out(EMBEDDINGS);
        if emb_path.is_file() {
            rec.input(&emb_path);
            let emb = EmbeddingMatrix::read_from(&mut open(&emb_path)?)?;
            let (pca, gmm, assignment, unroutable) = fit_router(&emb, &discovery_config(cfg), &mut tree)?;
            if !unroutable.is_empty() {
                log::warn!("leaves {unroutable:?} share a mixture component with another leaf and cannot be routed to");
            }
            rec.write("confusion.csv", assignment.confusion_csv().as_bytes())?;
            rec.write(ROUTER, serde_json::to_string(&Router { pca, gmm })?.as_bytes())?;
        }
        tree
    } else {
        let path = require(cfg.out(EMBEDDINGS), "embed")?;
        rec.input(&path);
        let emb = EmbeddingMatrix::read_from(&mut open(&path)?)?;
        let disc = discover_tree(&emb, &discovery_config(cfg))?;
        rec.write("confusion.csv", disc.assignment.confusion_csv().as_bytes())?;
        if let Some(d) = &disc.distances {
            rec.write("distances.csv", d.to_csv().as_bytes())?;
        }
        let router = Router {
            pca: disc.pca,
            gmm: disc.gmm,
        };
        rec.write(ROUTER, serde_json::to_string(&router)?.as_bytes())?;
        disc.tree
    };
    rec.write(TREE, tree.to_json()?.as_bytes())?;
    rec.finish()?;
    Ok(())
}

/// Which runs `train --baseline` selects.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Baseline {
    Multi,
    /// One single-domain run per training domain.
    SingleAll,
    Single(String),
}

impl Baseline {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "multi" | "multi_domain" => Ok(Baseline::Multi),
            "single" => Ok(Baseline::SingleAll),
            _ => match s.strip_prefix("single:") {
                Some(d) if !d.is_empty() => Ok(Baseline::Single(d.to_string())),
                _ => Err(Error::Config(format!(
                    "unknown baseline '{s}' (expected multi, single or single:<domain>)"
                ))),
            },
        }
    }
}

/// File stem for a variant's artifacts.
pub fn variant_stem(v: &Variant) -> String {
    match v {
        Variant::Single(d) => format!("single_{d}"),
        other => other.label(),
    }
}

fn adapters_file(v: &Variant) -> String {
    format!("adapters_{}.bin", variant_stem(v))
}

fn baseline_bottleneck(cfg: &RunConfig) -> Result<usize> {
    if let Some(d) = cfg.train.baseline_bottleneck {
        return Ok(d);
    }
    let path = require(cfg.out(TREE), "build-tree")?;
    let tree = DomainTree::load(&mut open(&path)?)?;
    // hierarchical bottleneck d with average depth T has the flops of one adapter of width d·T
    let t = tree.average_path_length();
    let d_multi = (cfg.train.bottleneck as f64 * t).round() as u64;
    parity_bottleneck(d_multi, t)?;
    Ok(d_multi as usize)
}

pub fn cmd_train(cfg: &RunConfig, baseline: Option<&Baseline>) -> Result<()> {
    cfg.validate()?;
    let training: Vec<&str> = cfg.domains.iter().filter(|d| !d.held_out).map(|d| d.name.as_str()).collect();
    let variants = match baseline {
        None => vec![Variant::Hierarchical],
        Some(Baseline::Multi) => vec![Variant::MultiDomain],
        Some(Baseline::SingleAll) => training.iter().map(|d| Variant::Single(d.to_string())).collect(),
        Some(Baseline::Single(d)) => vec![Variant::Single(d.clone())],
    };
    for v in &variants {
        let mut rec = Recorder::new(cfg, format!("train_{}", variant_stem(v)));
        let bb = load_backbone(cfg, &mut rec)?;
        let (tree, d) = match v {
            Variant::Hierarchical => (load_tree(cfg, &mut rec)?, cfg.train.bottleneck),
            _ => (v.tree(&DomainTree::single(&training)?, &training)?, baseline_bottleneck(cfg)?),
        };
        let (train, _) = training_corpora(cfg, &mut rec)?;
        let store = tree.attach_adapters(bb.config(), d, cfg.seed)?;
        let before = bb.checksum();
        let out = train_adapters(&bb, &tree, store, &train, &cfg.train_config())?;
        if bb.checksum() != before {
            return Err(Error::Contract("backbone changed during adapter training".into()));
        }
        let stem = variant_stem(v);
        let mut bytes = Vec::new();
        out.store.save(&mut bytes)?;
        rec.write(&adapters_file(v), &bytes)?;
        rec.write(&format!("counters_{stem}.json"), out.counters.to_json()?.as_bytes())?;
        rec.write(&format!("trace_{stem}.csv"), trace_csv(&out.trace).as_bytes())?;
        rec.finish()?;
    }
    Ok(())
}

fn load_store(cfg: &RunConfig, v: &Variant, rec: &mut Recorder) -> Result<Option<AdapterStore>> {
    let path = cfg.out(&adapters_file(v));
    if !path.is_file() {
        return Ok(None);
    }
    rec.input(&path);
    Ok(Some(AdapterStore::load(&mut open(&path)?)?))
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let mut rec = Recorder::new(cfg, "eval");
    let bb = load_backbone(cfg, &mut rec)?;
    let (_, test) = training_corpora(cfg, &mut rec)?;
    let seq = cfg.eval.seq_len;
    let names: Vec<&str> = test.names();
    let mut rows = Vec::new();
    let row = |domain: &str, variant: &str, n_paths: usize, ppl: crate::routing::Perplexity| PerplexityRow {
        domain: domain.to_string(),
        model_variant: variant.to_string(),
        n_paths,
        perplexity: ppl.value,
        tokens: ppl.tokens,
    };
    for c in test.domains() {
        rows.push(row(c.name(), "backbone", 0, evaluate_perplexity(&bb, None, c.tokens(), seq)?));
    }
    let mut variants = vec![Variant::Hierarchical, Variant::MultiDomain];
    variants.extend(names.iter().map(|d| Variant::Single(d.to_string())));
    let mut found = 0;
    for v in &variants {
        let Some(store) = load_store(cfg, v, &mut rec)? else {
            continue;
        };
        found += 1;
        let tree = match v {
            Variant::Hierarchical => load_tree(cfg, &mut rec)?,
            _ => v.tree(&DomainTree::single(&names)?, &names)?,
        };
        for c in test.domains() {
            let Ok(path) = tree.path_for_domain(c.name()) else {
                continue;
            };
            let mut hook = AdapterHook::single(&store, path, false)?;
            let ppl = evaluate_perplexity(&bb, Some(&mut hook), c.tokens(), seq)?;
            rows.push(row(c.name(), &v.label(), 1, ppl));
        }
    }
    if found == 0 {
        return Err(Error::Dependency {
            stage: "train",
            path: cfg.out(&adapters_file(&Variant::Hierarchical)),
        });
    }
    rec.write("perplexity.csv", perplexity_csv(&rows).as_bytes())?;
    rec.finish()?;
    Ok(())
}

pub fn cmd_route(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let mut rec = Recorder::new(cfg, "route");
    let bb = load_backbone(cfg, &mut rec)?;
    let tree = load_tree(cfg, &mut rec)?;
    let router_path = require(cfg.out(ROUTER), "build-tree")?;
    rec.input(&router_path);
    let router: Router = serde_json::from_reader(open(&router_path)?)?;
    let store = load_store(cfg, &Variant::Hierarchical, &mut rec)?.ok_or_else(|| Error::Dependency {
        stage: "train",
        path: cfg.out(&adapters_file(&Variant::Hierarchical)),
    })?;
    rec.inputs(cfg.corpus_paths(true));
    let (_, held) = cfg.corpora(true)?;
    if held.is_empty() {
        return Err(Error::Config("no held_out [[domain]] to route".into()));
    }
    let n_leaves = tree.cluster_of_leaf().len();
    let max_paths = cfg.routing.n_paths.min(n_leaves);
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for c in held.domains() {
        let docs = &c.documents()[..c.documents().len().min(cfg.routing.n_probe)];
        let probes = router.pca.transform(&embed_documents(&bb, docs, cfg.clustering.seq_len)?)?;
        let sel = select_paths(&router.gmm, &tree, &probes, max_paths)?;
        log::info!("{}: paths to leaves {:?}", c.name(), sel.paths_used);
        let base = evaluate_perplexity(&bb, None, c.tokens(), cfg.eval.seq_len)?;
        rows.push(PerplexityRow {
            domain: c.name().to_string(),
            model_variant: "backbone".into(),
            n_paths: 0,
            perplexity: base.value,
            tokens: base.tokens,
        });
        for n in 1..=max_paths {
            let mut hook = multi_path_hook(&tree, &store, &sel.paths_used[..n], PathCombine::MeanOfPaths)?;
            let ppl = evaluate_perplexity(&bb, Some(&mut hook), c.tokens(), cfg.eval.seq_len)?;
            rows.push(PerplexityRow {
                domain: c.name().to_string(),
                model_variant: "hierarchical".into(),
                n_paths: n,
                perplexity: ppl.value,
                tokens: ppl.tokens,
            });
        }
        reports.push(RouteReport::new(c.name(), &sel));
    }
    rec.write("routes.json", serde_json::to_string_pretty(&reports)?.as_bytes())?;
    rec.write("route_perplexity.csv", perplexity_csv(&rows).as_bytes())?;
    rec.finish()?;
    Ok(())
}

/// Parameter table for the config's `[cost]` inputs (the built-in
/// GPT-2-sized trees when absent), optionally moved onto its `[model]`.
pub fn cost_inputs(cfg: Option<&RunConfig>, from_model: bool) -> Result<TableInputs> {
    let base = cfg.and_then(|c| c.cost).unwrap_or_default();
    match (cfg, from_model) {
        (Some(c), true) => Ok(base.for_model(&c.lm())),
        (None, true) => Err(Error::Config("--from-model needs --config".into())),
        _ => Ok(base),
    }
}

/// Returns the text and CSV renderings; with a config both are also written
/// to its output directory.
pub fn cmd_cost(cfg: Option<&RunConfig>, from_model: bool) -> Result<(String, String)> {
    let rows = parameter_table(&cost_inputs(cfg, from_model)?);
    let (text, csv) = (table_text(&rows), table_csv(&rows));
    if let Some(cfg) = cfg {
        let mut rec = Recorder::new(cfg, "cost");
        rec.write("cost.txt", text.as_bytes())?;
        rec.write("cost.csv", csv.as_bytes())?;
        rec.finish()?;
    }
    Ok((text, csv))
}

/// Writes the planted four-domain corpus, a 70/30 held-out mixture and a
/// ready-to-run config into `dir`.
pub fn cmd_synth(dir: &Path, seed: u64) -> Result<PathBuf> {
    let sc = SynthConfig {
        seed,
        ..SynthConfig::default()
    };
    let corpora = planted_corpora(&sc)?;
    let specs = planted_specs(&sc)?;
    let held = mixed_corpus("held_a1b1", &[(&specs[0], 0.7), (&specs[2], 0.3)], 60, sc.doc_len, seed ^ 0x4e1d)?;
    let corpus_dir = dir.join("corpora");
    write_corpora(&corpora, &corpus_dir)?;
    write_corpora(&CorpusSet::new(vec![held.clone()])?, &corpus_dir)?;
    let mut doc = format!("seed = {seed}\nout_dir = \"run\"\n");
    for name in corpora.names().into_iter().chain([held.name()]) {
        doc.push_str(&format!("\n[[domain]]\nname = \"{name}\"\npath = \"corpora/{name}.txt\"\n"));
        if name == held.name() {
            doc.push_str("held_out = true\n");
        }
    }
    doc.push_str(&format!(
        r#"
[model]
n_layers = 2
d_model = 64
n_heads = 2
context_len = 64

[pretrain]
steps = 300
seq_len = 32

[train]
lr = 0.003
total_steps = 200
bottleneck = 8
sampling = {{ mode = "balanced" }}

[tree]
manual = "{}"

[routing]
n_probe = 1000
n_paths = 2
"#,
        planted_grouping(&sc)
    ));
    let path = dir.join("run.toml");
    std::fs::create_dir_all(dir)?;
    std::fs::write(&path, doc)?;
    Ok(path)
}
