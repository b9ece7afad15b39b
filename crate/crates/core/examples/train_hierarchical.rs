//! Pretrains a small backbone on four synthetic domains, trains one adapter
//! per tree node and compares every domain's own path with the others.
//!
//! `cargo run --release --example train_hierarchical -- [pretrain_steps] [adapter_steps]`

use hieradapt::adapters::AdapterHook;
use hieradapt::domtree::{build_manual_tree, Grouping};
use hieradapt::lm::{pretrain, LmConfig, PretrainConfig, Vocab};
use hieradapt::routing::evaluate_perplexity;
use hieradapt::synth::{planted_corpora, planted_grouping, SynthConfig};
use hieradapt::trainer::{train_adapters, Sampling, TrainConfig};

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> hieradapt::Result<()> {
    let synth = SynthConfig::default();
    let corpora = planted_corpora(&synth)?;
    let lm = LmConfig {
        n_layers: 2,
        d_model: 64,
        n_heads: 2,
        context_len: 64,
        vocab_size: Vocab::SIZE,
    };
    let backbone = pretrain(
        &corpora,
        lm,
        &PretrainConfig {
            steps: arg(1, 400),
            seq_len: 32,
            ..PretrainConfig::default()
        },
    )?
    .backbone;

    let tree = build_manual_tree(&Grouping::parse(&planted_grouping(&synth))?)?;
    let cfg = TrainConfig {
        lr: 3e-3,
        total_steps: arg(2, 400),
        seq_len: 32,
        sampling: Sampling::Balanced,
        ..TrainConfig::default()
    };
    let store = tree.attach_adapters(backbone.config(), 8, 0)?;
    let trained = train_adapters(&backbone, &tree, store, &corpora, &cfg)?;
    for node in 0..tree.node_count() {
        println!("node {} updated {} times", node + 1, trained.counters.get(node));
    }

    // rows: evaluated domain, columns: leaf whose path is used
    let leaves = tree.leaves();
    for corpus in corpora.domains() {
        let tokens = &corpus.tokens()[..corpus.tokens().len().min(4000)];
        let base = evaluate_perplexity(&backbone, None, tokens, 32)?.value;
        print!("{:>4}  backbone {base:7.3}", corpus.name());
        for &leaf in &leaves {
            let mut hook = AdapterHook::single(&trained.store, tree.path_to_leaf(leaf)?, false)?;
            let p = evaluate_perplexity(&backbone, Some(&mut hook), tokens, 32)?.value;
            print!("  leaf {} {p:7.3}", leaf + 1);
        }
        println!();
    }
    Ok(())
}
