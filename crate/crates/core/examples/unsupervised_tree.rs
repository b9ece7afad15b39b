//! Recovers a domain hierarchy from backbone embeddings alone: PCA, a
//! Gaussian mixture, symmetrised KL between components and average linkage.

use hieradapt::clustering::{discover_tree, embed_domains, DiscoveryConfig};
use hieradapt::domtree::DomainTree;
use hieradapt::lm::{pretrain, LmConfig, PretrainConfig, Vocab};
use hieradapt::synth::{planted_corpora, SynthConfig};

fn main() -> hieradapt::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let corpora = planted_corpora(&SynthConfig {
        groups: 4,
        per_group: 1,
        ..SynthConfig::default()
    })?;
    let lm = LmConfig {
        n_layers: 2,
        d_model: 64,
        n_heads: 2,
        context_len: 64,
        vocab_size: Vocab::SIZE,
    };
    let pcfg = PretrainConfig {
        steps,
        seq_len: 32,
        ..PretrainConfig::default()
    };
    let backbone = pretrain(&corpora, lm, &pcfg)?.backbone;

    let emb = embed_domains(&backbone, &corpora, 100, 32, 0)?;
    let found = discover_tree(&emb, &DiscoveryConfig::default())?;
    println!("retained components: {:?}", found.assignment.retained);
    for step in found.tree.linkage() {
        println!(
            "merge {} + {} -> {} at {:.3}",
            DomainTree::label(step.left),
            DomainTree::label(step.right),
            DomainTree::label(step.new_id),
            step.height
        );
    }
    for (domain, leaf) in found.tree.leaf_of_domain() {
        println!("{domain} -> leaf {}", DomainTree::label(*leaf));
    }
    Ok(())
}
