//! Routes an unseen domain, mixed 70/30 from two training domains, to the
//! leaves whose mixture components its documents fall into, then compares
//! evaluation through one and two paths. With short training the second
//! path can still hurt; try `-- 1500 2000`.
//!
//! `cargo run --release --example held_out_routing -- [pretrain_steps] [adapter_steps]`

use hieradapt::adapters::PathCombine;
use hieradapt::clustering::{discover_tree, embed_documents, embed_domains, DiscoveryConfig};
use hieradapt::lm::{pretrain, LmConfig, PretrainConfig, Vocab};
use hieradapt::routing::{evaluate_perplexity, multi_path_hook, select_paths};
use hieradapt::synth::{mixed_corpus, planted_corpora, planted_specs, SynthConfig};
use hieradapt::trainer::{train_adapters, TrainConfig};

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> hieradapt::Result<()> {
    let synth = SynthConfig {
        groups: 4,
        per_group: 1,
        ..SynthConfig::default()
    };
    let corpora = planted_corpora(&synth)?;
    let specs = planted_specs(&synth)?;
    let lm = LmConfig {
        n_layers: 2,
        d_model: 64,
        n_heads: 2,
        context_len: 64,
        vocab_size: Vocab::SIZE,
    };
    let pcfg = PretrainConfig {
        steps: arg(1, 600),
        seq_len: 32,
        ..PretrainConfig::default()
    };
    let backbone = pretrain(&corpora, lm, &pcfg)?.backbone;
    let found = discover_tree(&embed_domains(&backbone, &corpora, 100, 32, 0)?, &DiscoveryConfig::default())?;
    let tree = &found.tree;

    let cfg = TrainConfig {
        lr: 3e-3,
        total_steps: arg(2, 600),
        seq_len: 32,
        ..TrainConfig::default()
    };
    let trained = train_adapters(&backbone, tree, tree.attach_adapters(backbone.config(), 8, 0)?, &corpora, &cfg)?;

    let held = mixed_corpus("held", &[(&specs[0], 0.7), (&specs[1], 0.3)], 60, synth.doc_len, 99)?;
    let probes = found.pca.transform(&embed_documents(&backbone, held.documents(), 32)?)?;
    let sel = select_paths(&found.gmm, tree, &probes, 2)?;
    for r in &sel.ranked {
        println!("leaf {} (component {}): {} votes", r.leaf + 1, r.cluster, r.votes);
    }
    println!("backbone: {:.3}", evaluate_perplexity(&backbone, None, held.tokens(), 32)?.value);
    for n in 1..=sel.paths_used.len() {
        let mut hook = multi_path_hook(tree, &trained.store, &sel.paths_used[..n], PathCombine::MeanOfPaths)?;
        println!("{n} path(s): {:.3}", evaluate_perplexity(&backbone, Some(&mut hook), held.tokens(), 32)?.value);
    }
    Ok(())
}
