//! Builds a tree from a bracketed grouping and shows the adapter path of
//! every domain.

use hieradapt::domtree::{build_manual_tree, DomainTree, Grouping};

fn main() -> hieradapt::Result<()> {
    let text = std::env::args().nth(1).unwrap_or_else(|| "((news, sports), (reviews, (food, travel)))".into());
    let tree = build_manual_tree(&Grouping::parse(&text)?)?;
    println!("{} nodes, average path length {:.2}", tree.node_count(), tree.average_path_length());
    for (domain, &leaf) in tree.leaf_of_domain() {
        let labels: Vec<String> = tree.path_to_leaf(leaf)?.iter().map(|&n| DomainTree::label(n).to_string()).collect();
        println!("{domain:>10}: {}", labels.join(" -> "));
    }
    println!("{}", tree.to_json()?);
    Ok(())
}
