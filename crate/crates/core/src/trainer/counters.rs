use serde::{Deserialize, Serialize};

use crate::domtree::DomainTree;
use crate::error::{Error, Result};

/// Optimizer updates applied to each tree node.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateCounters {
    pub counts: Vec<u64>,
}

impl UpdateCounters {
    pub fn new(node_count: usize) -> Self {
        Self {
            counts: vec![0; node_count],
        }
    }

    pub fn record(&mut self, nodes: &[usize]) {
        for &n in nodes {
            self.counts[n] += 1;
        }
    }

    pub fn get(&self, node: usize) -> u64 {
        self.counts[node]
    }

    /// Checks that leaves sum to the root and every internal node to its
    /// children.
    pub fn check_conservation(&self, tree: &DomainTree) -> Result<()> {
        let root = self.counts[tree.root()];
        let leaves: u64 = tree.leaves().iter().map(|&l| self.counts[l]).sum();
        if leaves != root {
            return Err(Error::Validation(format!("leaf updates {leaves} differ from root updates {root}")));
        }
        for node in tree.nodes().iter().filter(|n| !n.children.is_empty()) {
            let below: u64 = node.children.iter().map(|&c| self.counts[c]).sum();
            if below != self.counts[node.id] {
                return Err(Error::Validation(format!(
                    "node {} has {} updates but its children {below}",
                    node.id, self.counts[node.id]
                )));
            }
        }
        Ok(())
    }

    /// `{"nodes": [{"node": id, "updates": n}, ...]}`.
    pub fn to_json(&self) -> Result<String> {
        let nodes: Vec<serde_json::Value> = self
            .counts
            .iter()
            .enumerate()
            .map(|(i, c)| serde_json::json!({ "node": i, "updates": c }))
            .collect();
        Ok(serde_json::to_string_pretty(&serde_json::json!({ "nodes": nodes }))?)
    }
}
