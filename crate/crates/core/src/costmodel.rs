//! Closed-form parameter and flop accounting for adapter trees.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::domtree::DomainTree;
use crate::error::{Error, Result};
use crate::lm::LmConfig;

/// Adapter parameters of one node: `L·2·m·d`, plus `L·(d + m)` with biases.
pub fn adapter_params(layers: u64, d_model: u64, d: u64, with_bias: bool) -> u64 {
    let weights = layers * 2 * d_model * d;
    if with_bias {
        weights + layers * (d + d_model)
    } else {
        weights
    }
}

/// Shared layer-norm parameters: `L·2·m`.
pub fn shared_ln_params(layers: u64, d_model: u64) -> u64 {
    2 * layers * d_model
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostInputs {
    pub layers: u64,
    pub d_model: u64,
    pub d: u64,
    /// Non-embedding backbone parameters.
    pub n_backbone: u64,
    /// Average tree depth (nodes on a path).
    pub avg_depth: f64,
    pub n_paths: u64,
    pub node_count: u64,
    pub path_len: u64,
}

impl CostInputs {
    /// Inputs for a backbone built from `cfg`, with `N` counted analytically.
    pub fn from_lm(cfg: &LmConfig, d: u64, tree: &DomainTree, n_paths: u64) -> Result<Self> {
        let avg_depth = tree.average_path_length();
        Ok(Self {
            layers: cfg.n_layers as u64,
            d_model: cfg.d_model as u64,
            d,
            n_backbone: cfg.non_embedding_params() as u64,
            avg_depth,
            n_paths,
            node_count: tree.node_count() as u64,
            path_len: avg_depth.round() as u64,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.n_backbone == 0 || self.n_paths == 0 {
            return Err(Error::Config("cost inputs must be positive".into()));
        }
        if !(self.avg_depth >= 1.0) {
            return Err(Error::Config(format!("average depth {} must be at least 1", self.avg_depth)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub adapter_flops_per_token: f64,
    pub backbone_flops_per_token: f64,
    pub overhead_ratio: f64,
}

/// Backbone `2N` flops per token against `paths·T·4·L·m·d` adapter flops.
pub fn flops_overhead(c: &CostInputs) -> Result<FlopReport> {
    c.validate()?;
    let adapter = c.n_paths as f64 * c.avg_depth * 4.0 * (c.layers * c.d_model * c.d) as f64;
    let backbone = 2.0 * c.n_backbone as f64;
    Ok(FlopReport {
        adapter_flops_per_token: adapter,
        backbone_flops_per_token: backbone,
        overhead_ratio: adapter / backbone,
    })
}

/// Bottleneck giving a path of average depth `T` the flops of one adapter of
/// width `d_multi`: `d_multi / T` rounded to nearest, halves away from zero.
pub fn parity_bottleneck(d_multi: u64, avg_depth: f64) -> Result<u64> {
    if !(avg_depth >= 1.0) || !avg_depth.is_finite() {
        return Err(Error::Sizing(format!("average depth {avg_depth} must be at least 1")));
    }
    if (d_multi as f64) < avg_depth {
        return Err(Error::Sizing(format!("bottleneck {d_multi} is smaller than depth {avg_depth}")));
    }
    let d = (d_multi as f64 / avg_depth).round() as u64;
    if d < 1 {
        return Err(Error::Sizing(format!(
            "bottleneck {d_multi} split over depth {avg_depth} rounds to zero"
        )));
    }
    Ok(d)
}

/// Adapter geometry shared by every node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterDims {
    pub layers: u64,
    pub d_model: u64,
    pub d: u64,
    pub with_bias: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceParams {
    pub backbone: u64,
    pub adapter_nodes: u64,
    pub adapters: u64,
    pub shared_ln: u64,
    pub total: u64,
}

/// Parameters touched at inference when `n_nodes` distinct nodes are active.
pub fn inference_params_for_nodes(backbone: u64, dims: AdapterDims, n_nodes: u64) -> InferenceParams {
    let adapters = n_nodes * adapter_params(dims.layers, dims.d_model, dims.d, dims.with_bias);
    let shared_ln = shared_ln_params(dims.layers, dims.d_model);
    InferenceParams {
        backbone,
        adapter_nodes: n_nodes,
        adapters,
        shared_ln,
        total: backbone + adapters + shared_ln,
    }
}

/// Backbone plus adapters on the union of the paths to `leaves`, each node
/// counted once, plus the shared norms.
pub fn inference_param_report(backbone: u64, tree: &DomainTree, dims: AdapterDims, leaves: &[usize]) -> Result<InferenceParams> {
    let mut nodes = BTreeSet::new();
    for &l in leaves {
        nodes.extend(tree.path_to_leaf(l)?);
    }
    Ok(inference_params_for_nodes(backbone, dims, nodes.len() as u64))
}

/// One column group of the parameter table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Setup {
    pub d: u64,
    pub nodes: u64,
    pub avg_path: f64,
    pub d_multi: u64,
    pub steps: u64,
    pub leaves: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TableInputs {
    pub layers: u64,
    pub d_model: u64,
    /// Non-embedding backbone parameters behind the flop figures.
    pub n_backbone: u64,
    pub few: Setup,
    pub many: Setup,
}

impl Default for TableInputs {
    /// GPT-2 small geometry with the few-domain (7-node) and many-domain
    /// (49-node) trees.
    fn default() -> Self {
        Self {
            layers: 12,
            d_model: 768,
            n_backbone: 84_000_000,
            few: Setup {
                d: 256,
                nodes: 7,
                avg_path: 3.0,
                d_multi: 768,
                steps: 22_000,
                leaves: 4,
            },
            many: Setup {
                d: 64,
                nodes: 49,
                avg_path: 8.0,
                d_multi: 512,
                steps: 11_000,
                leaves: 25,
            },
        }
    }
}

impl TableInputs {
    /// Same trees on the geometry of `lm`, with `N` counted from it.
    pub fn for_model(&self, lm: &LmConfig) -> Self {
        Self {
            layers: lm.n_layers as u64,
            d_model: lm.d_model as u64,
            n_backbone: lm.non_embedding_params() as u64,
            ..*self
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub quantity: String,
    pub few: f64,
    pub many: f64,
}

/// Rows mirroring the parameter table: sizes, counts, total and active
/// parameters (without and with biases), balanced update counts and the
/// flop overhead of one and two disjoint paths.
pub fn parameter_table(t: &TableInputs) -> Vec<TableRow> {
    let per = |d: u64, bias: bool| adapter_params(t.layers, t.d_model, d, bias) as f64;
    let row = |model: &str, q: &str, f: &dyn Fn(&Setup) -> f64| TableRow {
        model: model.into(),
        quantity: q.into(),
        few: f(&t.few),
        many: f(&t.many),
    };
    let h = "hierarchical";
    let m = "multi_domain";
    vec![
        row(h, "adapter_size", &|s| s.d as f64),
        row(h, "adapters", &|s| s.nodes as f64),
        row(h, "average_path_length", &|s| s.avg_path),
        row(h, "total_parameters", &|s| s.nodes as f64 * per(s.d, false)),
        row(h, "active_parameters", &|s| s.avg_path * per(s.d, false)),
        row(h, "total_parameters_with_bias", &|s| s.nodes as f64 * per(s.d, true)),
        row(h, "active_parameters_with_bias", &|s| s.avg_path * per(s.d, true)),
        row(h, "updates_root", &|s| s.steps as f64),
        row(h, "updates_leaf", &|s| s.steps as f64 / s.leaves as f64),
        row(m, "adapter_size", &|s| s.d_multi as f64),
        row(m, "adapters", &|_| 1.0),
        row(m, "average_path_length", &|_| 1.0),
        row(m, "total_parameters", &|s| per(s.d_multi, false)),
        row(m, "active_parameters", &|s| per(s.d_multi, false)),
        row(m, "total_parameters_with_bias", &|s| per(s.d_multi, true)),
        row(m, "active_parameters_with_bias", &|s| per(s.d_multi, true)),
        row(m, "updates", &|s| s.steps as f64),
        row(h, "flop_overhead_ratio_1_path", &|s| flop_ratio(t, s, 1)),
        row(h, "flop_overhead_ratio_2_paths", &|s| flop_ratio(t, s, 2)),
    ]
}

fn flop_ratio(t: &TableInputs, s: &Setup, n_paths: u64) -> f64 {
    let c = CostInputs {
        layers: t.layers,
        d_model: t.d_model,
        d: s.d,
        n_backbone: t.n_backbone,
        avg_depth: s.avg_path,
        n_paths,
        node_count: s.nodes,
        path_len: s.avg_path.round() as u64,
    };
    flops_overhead(&c).map_or(f64::NAN, |f| f.overhead_ratio)
}

fn human(v: f64) -> String {
    if v.is_nan() {
        "n/a".into()
    } else if v >= 1e6 {
        format!("{:.2}M", v / 1e6)
    } else if v >= 1e4 {
        format!("{:.1}K", v / 1e3)
    } else if v.fract() == 0.0 {
        format!("{v}")
    } else {
        format!("{v:.4}")
    }
}

pub fn table_text(rows: &[TableRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<14} {:<28} {:>12} {:>12}", "model", "quantity", "few-domain", "many-domain");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<14} {:<28} {:>12} {:>12}",
            r.model,
            r.quantity,
            human(r.few),
            human(r.many)
        );
    }
    s
}

pub fn table_csv(rows: &[TableRow]) -> String {
    let mut s = String::from("model,quantity,few_domain,many_domain\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.model, r.quantity, r.few, r.many);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domtree::{build_manual_tree, Grouping};
    use proptest::prelude::*;

    fn within(v: f64, target: f64, rel: f64) -> bool {
        (v - target).abs() <= rel * target
    }

    #[test]
    fn per_node_counts() {
        assert_eq!(adapter_params(12, 768, 256, false), 4_718_592);
        assert_eq!(adapter_params(12, 768, 64, false), 1_179_648);
        assert_eq!(adapter_params(1, 4, 2, true), 22);
        assert_eq!(7 * adapter_params(12, 768, 256, false), 33_030_144);
        assert_eq!(3 * adapter_params(12, 768, 256, false), 14_155_776);
        assert_eq!(49 * adapter_params(12, 768, 64, false), 57_802_752);
        assert_eq!(8 * adapter_params(12, 768, 64, false), 9_437_184);
        assert_eq!(adapter_params(12, 768, 768, false), 14_155_776);
        assert_eq!(adapter_params(12, 768, 512, false), 9_437_184);
    }

    fn many(n_paths: u64, d: u64, n: u64) -> CostInputs {
        CostInputs {
            layers: 12,
            d_model: 768,
            d,
            n_backbone: n,
            avg_depth: 8.0,
            n_paths,
            node_count: 49,
            path_len: 8,
        }
    }

    #[test]
    fn flop_overheads() {
        let one = flops_overhead(&many(1, 64, 84_000_000)).unwrap().overhead_ratio;
        assert!((one - 0.11).abs() <= 0.01, "{one}");
        assert!((one - 4.0 * 12.0 * 768.0 * 64.0 * 8.0 / 168e6).abs() < 1e-15);
        let two = flops_overhead(&many(2, 64, 84_000_000)).unwrap().overhead_ratio;
        assert!((two - 0.22).abs() <= 0.01, "{two}");
        assert_eq!(flops_overhead(&many(1, 0, 84_000_000)).unwrap().overhead_ratio, 0.0);
        let double_d = flops_overhead(&many(1, 128, 84_000_000)).unwrap().overhead_ratio;
        let double_n = flops_overhead(&many(1, 64, 168_000_000)).unwrap().overhead_ratio;
        assert!((double_d - 2.0 * one).abs() < 1e-15);
        assert!((double_n - one / 2.0).abs() < 1e-15);
    }

    #[test]
    fn parity_sizes() {
        assert_eq!(parity_bottleneck(512, 8.0).unwrap(), 64);
        assert_eq!(parity_bottleneck(768, 3.0).unwrap(), 256);
        assert_eq!(parity_bottleneck(100, 1.0).unwrap(), 100);
        assert!(matches!(parity_bottleneck(1, 3.0), Err(Error::Sizing(_))));
        assert!(parity_bottleneck(10, 0.5).is_err());
    }

    #[test]
    fn inference_totals() {
        let dims = AdapterDims {
            layers: 12,
            d_model: 768,
            d: 256,
            with_bias: false,
        };
        let tree = build_manual_tree(&Grouping::parse("((a, b), (c, d))").unwrap()).unwrap();
        let one = inference_param_report(112_000_000, &tree, dims, &[0]).unwrap();
        assert!(within(one.total as f64, 126e6, 0.01), "{}", one.total);
        let same = inference_param_report(112_000_000, &tree, dims, &[0, 0]).unwrap();
        assert_eq!(same, one);
        let apart = inference_param_report(112_000_000, &tree, dims, &[0, 2]).unwrap();
        assert_eq!(apart.adapter_nodes, 5);

        // disjoint paths add up
        let forest = build_manual_tree(&Grouping::parse("(a, b)").unwrap()).unwrap();
        let a = inference_param_report(0, &forest, dims, &[0]).unwrap();
        let both = inference_param_report(0, &forest, dims, &[0, 1]).unwrap();
        let per = adapter_params(12, 768, 256, false);
        assert_eq!(both.adapters, a.adapters + per);

        let many_dims = AdapterDims { d: 64, ..dims };
        let avg = inference_params_for_nodes(112_000_000, many_dims, 8);
        assert!(within(avg.total as f64, 122e6, 0.01), "{}", avg.total);
    }

    #[test]
    fn table_report_values() {
        let rows = parameter_table(&TableInputs::default());
        let get = |m: &str, q: &str| rows.iter().find(|r| r.model == m && r.quantity == q).unwrap();
        let total = get("hierarchical", "total_parameters");
        assert!(within(total.few, 33e6, 0.01) && within(total.many, 58e6, 0.01));
        let active = get("hierarchical", "active_parameters");
        assert!(within(active.few, 14.2e6, 0.01) && within(active.many, 9.44e6, 0.01));
        let multi = get("multi_domain", "total_parameters");
        assert_eq!((multi.few, multi.many), (active.few, active.many));
        let root = get("hierarchical", "updates_root");
        let leaf = get("hierarchical", "updates_leaf");
        assert_eq!(root.few / leaf.few, 4.0);
        let flops = get("hierarchical", "flop_overhead_ratio_1_path");
        assert!((flops.many - 0.1123).abs() < 1e-4, "{}", flops.many);
        let two = get("hierarchical", "flop_overhead_ratio_2_paths");
        assert!((two.many - 2.0 * flops.many).abs() < 1e-15);
        assert!(table_text(&rows).contains("33.03M"));
        assert!(table_csv(&rows).starts_with("model,quantity,few_domain,many_domain\n"));
    }

    #[test]
    fn table_on_another_model() {
        let lm = LmConfig::default();
        let t = TableInputs::default().for_model(&lm);
        assert_eq!((t.layers, t.d_model), (2, 64));
        assert_eq!(t.n_backbone, lm.non_embedding_params() as u64);
        assert_eq!(t.few, TableInputs::default().few);
    }

    proptest! {
        #[test]
        fn linear_in_each_argument(l in 1u64..20, m in 1u64..1000, d in 1u64..300, k in 2u64..5) {
            let base = adapter_params(l, m, d, false);
            prop_assert_eq!(adapter_params(k * l, m, d, false), k * base);
            prop_assert_eq!(adapter_params(l, k * m, d, false), k * base);
            prop_assert_eq!(adapter_params(l, m, k * d, false), k * base);
            prop_assert_eq!(adapter_params(k * l, m, d, true), k * adapter_params(l, m, d, true));
        }
    }
}
