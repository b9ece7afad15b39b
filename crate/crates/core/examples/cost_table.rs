//! Parameter and flop accounting for a GPT-2-sized backbone, plus the
//! bottleneck that gives a single adapter the same cost as a tree path.

use hieradapt::costmodel::{
    flops_overhead, inference_param_report, parameter_table, parity_bottleneck, table_text, AdapterDims, CostInputs,
    TableInputs,
};
use hieradapt::domtree::{build_manual_tree, Grouping};

fn main() -> hieradapt::Result<()> {
    let inputs = TableInputs::default();
    print!("{}", table_text(&parameter_table(&inputs)));

    for n_paths in [1, 2] {
        let report = flops_overhead(&CostInputs {
            layers: 12,
            d_model: 768,
            d: 64,
            n_backbone: 84_000_000,
            avg_depth: 8.0,
            n_paths,
            node_count: 49,
            path_len: 8,
        })?;
        println!("{n_paths} path(s): {:.1}% extra flops", 100.0 * report.overhead_ratio);
    }

    // a 2x2 tree evaluated on two leaves shares the root adapter
    let tree = build_manual_tree(&Grouping::parse("((a1, a2), (b1, b2))")?)?;
    let dims = AdapterDims {
        layers: 12,
        d_model: 768,
        d: 256,
        with_bias: false,
    };
    let leaves = [tree.leaf_for_domain("a1")?, tree.leaf_for_domain("b1")?];
    let p = inference_param_report(84_000_000, &tree, dims, &leaves)?;
    println!("two leaves: {} adapter nodes, {} parameters in total", p.adapter_nodes, p.total);
    println!("matching single bottleneck: {}", parity_bottleneck(768, tree.average_path_length())?);
    Ok(())
}
