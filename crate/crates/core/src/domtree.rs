//! Domain trees: manual nested groupings or binary trees from an
//! agglomerative linkage, with leaf/domain bookkeeping and path extraction.
//!
//! Node ids are 0-based: leaves first in input order, then internal nodes in
//! creation order (post-order for manual groupings, merge order for
//! linkages), so the root always carries the largest id.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterStore;
use crate::error::{Error, Result};
use crate::lm::LmConfig;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

/// One binary merge of an agglomerative clustering.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeStep {
    pub left: usize,
    pub right: usize,
    pub new_id: usize,
    pub height: f64,
    pub size: usize,
}

/// Nested grouping of domain names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Grouping {
    Leaf(String),
    Group(Vec<Grouping>),
}

impl Grouping {
    /// Parses text such as `((a, b), (c, d))`. Names are any run of
    /// characters other than parentheses, commas and whitespace.
    pub fn parse(text: &str) -> Result<Self> {
        let mut p = Parser {
            chars: text.chars().collect(),
            pos: 0,
        };
        let g = p.item()?;
        p.skip_ws();
        if p.pos != p.chars.len() {
            return Err(Error::Validation(format!("unexpected trailing input at {}", p.pos)));
        }
        Ok(g)
    }
}

struct Parser {
    chars: Vec<char>,
    pos: usize,
}

impl Parser {
    fn skip_ws(&mut self) {
        while self.chars.get(self.pos).is_some_and(|c| c.is_whitespace()) {
            self.pos += 1;
        }
    }

    fn item(&mut self) -> Result<Grouping> {
        self.skip_ws();
        match self.chars.get(self.pos) {
            Some('(') => {
                self.pos += 1;
                let mut items = vec![self.item()?];
                loop {
                    self.skip_ws();
                    match self.chars.get(self.pos) {
                        Some(',') => {
                            self.pos += 1;
                            items.push(self.item()?);
                        }
                        Some(')') => {
                            self.pos += 1;
                            return Ok(Grouping::Group(items));
                        }
                        _ => return Err(Error::Validation(format!("expected ',' or ')' at {}", self.pos))),
                    }
                }
            }
            _ => {
                let start = self.pos;
                while self
                    .chars
                    .get(self.pos)
                    .is_some_and(|&c| !matches!(c, '(' | ')' | ',') && !c.is_whitespace())
                {
                    self.pos += 1;
                }
                if start == self.pos {
                    return Err(Error::Validation(format!("expected a domain name at {start}")));
                }
                Ok(Grouping::Leaf(self.chars[start..self.pos].iter().collect()))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainTree {
    nodes: Vec<TreeNode>,
    leaf_of_domain: BTreeMap<String, usize>,
    #[serde(default)]
    cluster_of_leaf: BTreeMap<usize, usize>,
    #[serde(default)]
    linkage: Vec<MergeStep>,
}

/// Builds a tree mirroring `spec`; single-member groups collapse into
/// their member.
pub fn build_manual_tree(spec: &Grouping) -> Result<DomainTree> {
    fn leaves<'a>(g: &'a Grouping, out: &mut Vec<&'a str>) {
        match g {
            Grouping::Leaf(n) => out.push(n),
            Grouping::Group(items) => items.iter().for_each(|i| leaves(i, out)),
        }
    }
    let mut names = Vec::new();
    leaves(spec, &mut names);
    if names.is_empty() {
        return Err(Error::Validation("tree grouping has no domains".into()));
    }
    let mut seen = BTreeSet::new();
    for n in &names {
        if !seen.insert(*n) {
            return Err(Error::Validation(format!("duplicate domain '{n}' in tree grouping")));
        }
    }

    let k = names.len();
    let mut nodes: Vec<TreeNode> = (0..k)
        .map(|id| TreeNode {
            id,
            parent: None,
            children: vec![],
        })
        .collect();
    let mut next_leaf = 0;

    fn build(g: &Grouping, nodes: &mut Vec<TreeNode>, next_leaf: &mut usize) -> Result<usize> {
        match g {
            Grouping::Leaf(_) => {
                *next_leaf += 1;
                Ok(*next_leaf - 1)
            }
            Grouping::Group(items) if items.len() == 1 => build(&items[0], nodes, next_leaf),
            Grouping::Group(items) if items.is_empty() => Err(Error::Validation("empty group".into())),
            Grouping::Group(items) => {
                let children = items
                    .iter()
                    .map(|i| build(i, nodes, next_leaf))
                    .collect::<Result<Vec<_>>>()?;
                let id = nodes.len();
                for &c in &children {
                    nodes[c].parent = Some(id);
                }
                nodes.push(TreeNode {
                    id,
                    parent: None,
                    children,
                });
                Ok(id)
            }
        }
    }
    build(spec, &mut nodes, &mut next_leaf)?;

    let tree = DomainTree {
        nodes,
        leaf_of_domain: names.iter().enumerate().map(|(i, n)| (n.to_string(), i)).collect(),
        cluster_of_leaf: BTreeMap::new(),
        linkage: vec![],
    };
    tree.validate()?;
    Ok(tree)
}

/// Binary tree from `steps`; leaf `i` stands for cluster `leaf_clusters[i]`
/// and merge ids refer to leaf positions `0..k` and then `k + j` for step `j`.
pub fn from_linkage(steps: &[MergeStep], leaf_clusters: &[usize]) -> Result<DomainTree> {
    let k = leaf_clusters.len();
    if k == 0 {
        return Err(Error::Validation("linkage over zero leaves".into()));
    }
    if steps.len() != k - 1 {
        return Err(Error::Validation(format!(
            "{} merges cannot join {k} leaves",
            steps.len()
        )));
    }
    let mut nodes: Vec<TreeNode> = (0..k)
        .map(|id| TreeNode {
            id,
            parent: None,
            children: vec![],
        })
        .collect();
    let mut active: BTreeSet<usize> = (0..k).collect();
    for (j, s) in steps.iter().enumerate() {
        let id = k + j;
        if s.new_id != id {
            return Err(Error::Validation(format!("merge {j} creates id {} instead of {id}", s.new_id)));
        }
        if s.left == s.right || !active.contains(&s.left) || !active.contains(&s.right) {
            return Err(Error::Validation(format!(
                "merge {j} joins {} and {} which are not both open clusters",
                s.left, s.right
            )));
        }
        active.remove(&s.left);
        active.remove(&s.right);
        active.insert(id);
        nodes[s.left].parent = Some(id);
        nodes[s.right].parent = Some(id);
        nodes.push(TreeNode {
            id,
            parent: None,
            children: vec![s.left, s.right],
        });
    }
    let tree = DomainTree {
        nodes,
        leaf_of_domain: BTreeMap::new(),
        cluster_of_leaf: leaf_clusters.iter().copied().enumerate().collect(),
        linkage: steps.to_vec(),
    };
    tree.validate()?;
    Ok(tree)
}

impl DomainTree {
    /// Single-node tree carrying every given domain at its root.
    pub fn single<S: AsRef<str>>(domains: &[S]) -> Result<Self> {
        let tree = Self {
            nodes: vec![TreeNode {
                id: 0,
                parent: None,
                children: vec![],
            }],
            leaf_of_domain: domains.iter().map(|d| (d.as_ref().to_string(), 0)).collect(),
            cluster_of_leaf: BTreeMap::new(),
            linkage: vec![],
        };
        tree.validate()?;
        Ok(tree)
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn root(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn is_leaf(&self, id: usize) -> bool {
        self.nodes.get(id).is_some_and(|n| n.children.is_empty())
    }

    pub fn leaves(&self) -> Vec<usize> {
        self.nodes.iter().filter(|n| n.children.is_empty()).map(|n| n.id).collect()
    }

    pub fn linkage(&self) -> &[MergeStep] {
        &self.linkage
    }

    pub fn leaf_of_domain(&self) -> &BTreeMap<String, usize> {
        &self.leaf_of_domain
    }

    pub fn cluster_of_leaf(&self) -> &BTreeMap<usize, usize> {
        &self.cluster_of_leaf
    }

    /// 1-based label used in figures and reports.
    pub fn label(id: usize) -> usize {
        id + 1
    }

    pub fn leaf_for_domain(&self, domain: &str) -> Result<usize> {
        self.leaf_of_domain
            .get(domain)
            .copied()
            .ok_or_else(|| Error::Validation(format!("domain '{domain}' is not mapped to a leaf")))
    }

    pub fn leaf_of_cluster(&self, cluster: usize) -> Option<usize> {
        self.cluster_of_leaf
            .iter()
            .find(|(_, &c)| c == cluster)
            .map(|(&l, _)| l)
    }

    pub fn set_domain_leaf(&mut self, domain: impl Into<String>, leaf: usize) -> Result<()> {
        self.require_leaf(leaf)?;
        self.leaf_of_domain.insert(domain.into(), leaf);
        Ok(())
    }

    pub fn set_cluster_of_leaf(&mut self, leaf: usize, cluster: usize) -> Result<()> {
        self.require_leaf(leaf)?;
        if let Some(other) = self.leaf_of_cluster(cluster).filter(|&l| l != leaf) {
            return Err(Error::Validation(format!("cluster {cluster} already belongs to leaf {other}")));
        }
        self.cluster_of_leaf.insert(leaf, cluster);
        Ok(())
    }

    fn require_leaf(&self, id: usize) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(Error::Index {
                what: "tree node",
                index: id,
                bound: self.nodes.len(),
            });
        }
        if !self.is_leaf(id) {
            return Err(Error::Contract(format!("node {id} is internal, not a leaf")));
        }
        Ok(())
    }

    /// Node ids from `leaf` up to the root.
    pub fn path_to_leaf(&self, leaf: usize) -> Result<Vec<usize>> {
        self.require_leaf(leaf)?;
        let mut path = vec![leaf];
        let mut cur = leaf;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        Ok(path)
    }

    pub fn path_for_domain(&self, domain: &str) -> Result<Vec<usize>> {
        self.path_to_leaf(self.leaf_for_domain(domain)?)
    }

    /// Mean number of nodes on a root-to-leaf path.
    pub fn average_path_length(&self) -> f64 {
        let leaves = self.leaves();
        let total: usize = leaves
            .iter()
            .map(|&l| self.path_to_leaf(l).map_or(0, |p| p.len()))
            .sum();
        total as f64 / leaves.len() as f64
    }

    /// Fresh adapters for every node plus the shared per-layer norms.
    pub fn attach_adapters(&self, lm: &LmConfig, bottleneck: usize, seed: u64) -> Result<AdapterStore> {
        AdapterStore::new(self.node_count(), lm, bottleneck, seed)
    }

    /// Checks ids, parent/child consistency, a single root with the largest
    /// id, reachability and the domain map.
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        if n == 0 {
            return Err(Error::Validation("tree has no nodes".into()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i {
                return Err(Error::Validation(format!("node at position {i} has id {}", node.id)));
            }
            if let Some(p) = node.parent {
                if p >= n || !self.nodes[p].children.contains(&i) {
                    return Err(Error::Validation(format!("node {i} has inconsistent parent {p}")));
                }
            }
            for &c in &node.children {
                if c >= n || self.nodes[c].parent != Some(i) {
                    return Err(Error::Validation(format!("node {i} lists non-child {c}")));
                }
            }
        }
        let roots: Vec<usize> = (0..n).filter(|&i| self.nodes[i].parent.is_none()).collect();
        if roots != [n - 1] {
            return Err(Error::Validation(format!("expected the single root {}, found {roots:?}", n - 1)));
        }
        for i in 0..n {
            let mut cur = i;
            let mut steps = 0;
            while let Some(p) = self.nodes[cur].parent {
                cur = p;
                steps += 1;
                if steps > n {
                    return Err(Error::Validation("tree contains a cycle".into()));
                }
            }
        }
        for (d, &l) in &self.leaf_of_domain {
            if !self.is_leaf(l) {
                return Err(Error::Validation(format!("domain '{d}' maps to non-leaf {l}")));
            }
        }
        for &l in self.cluster_of_leaf.keys() {
            if !self.is_leaf(l) {
                return Err(Error::Validation(format!("cluster map names non-leaf {l}")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let tree: Self = serde_json::from_str(text)?;
        tree.validate()?;
        Ok(tree)
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(self.to_json()?.as_bytes())?;
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        let mut s = String::new();
        r.read_to_string(&mut s)?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn figure_tree() -> DomainTree {
        build_manual_tree(&Grouping::parse("((frontiersin, journals),(booking, yelp))").unwrap()).unwrap()
    }

    fn chain_linkage(k: usize) -> Vec<MergeStep> {
        (0..k - 1)
            .map(|j| MergeStep {
                left: if j == 0 { 0 } else { k + j - 1 },
                right: j + 1,
                new_id: k + j,
                height: j as f64,
                size: j + 2,
            })
            .collect()
    }

    #[test]
    fn manual_figure_tree() {
        let t = figure_tree();
        assert_eq!(t.node_count(), 7);
        assert_eq!(t.root(), 6);
        assert_eq!(t.nodes()[6].children, vec![4, 5]);
        assert!(t.nodes()[6].children.iter().all(|&c| !t.is_leaf(c)));
        let path = t.path_for_domain("frontiersin").unwrap();
        assert_eq!(path, vec![0, 4, 6]);
        let labels: Vec<usize> = path.into_iter().map(DomainTree::label).collect();
        assert_eq!(labels, vec![1, 5, 7]);
        assert_eq!(t.path_for_domain("booking").unwrap(), vec![2, 5, 6]);
        assert_eq!(t.average_path_length(), 3.0);
    }

    #[test]
    fn manual_small_trees() {
        let one = build_manual_tree(&Grouping::parse("(a)").unwrap()).unwrap();
        assert_eq!(one.node_count(), 1);
        assert_eq!(one.path_for_domain("a").unwrap(), vec![one.root()]);
        assert_eq!(one.average_path_length(), 1.0);

        let t = build_manual_tree(&Grouping::parse("((a,b),c)").unwrap()).unwrap();
        assert_eq!(t.node_count(), 5);
        assert_eq!(t.path_for_domain("c").unwrap().len(), 2);
        assert_eq!(t.path_for_domain("a").unwrap().len(), 3);
        assert!((t.average_path_length() - 8.0 / 3.0).abs() < 1e-12);

        let wide = build_manual_tree(&Grouping::parse("(a, b, c)").unwrap()).unwrap();
        assert_eq!(wide.node_count(), 4);
        assert_eq!(wide.nodes()[3].children, vec![0, 1, 2]);
    }

    #[test]
    fn manual_tree_rejects_duplicates_and_bad_text() {
        let g = Grouping::parse("((a,b),a)").unwrap();
        assert!(matches!(build_manual_tree(&g), Err(Error::Validation(_))));
        assert!(Grouping::parse("((a,b)").is_err());
        assert!(Grouping::parse("(a,)").is_err());
        assert!(Grouping::parse("(a) b").is_err());
    }

    #[test]
    fn linkage_trees() {
        let t = from_linkage(&chain_linkage(25), &(0..25).collect::<Vec<_>>()).unwrap();
        assert_eq!(t.node_count(), 49);

        let steps = [MergeStep {
            left: 0,
            right: 1,
            new_id: 2,
            height: 1.0,
            size: 2,
        }];
        assert_eq!(from_linkage(&steps, &[7, 9]).unwrap().node_count(), 3);

        let steps = [
            MergeStep {
                left: 0,
                right: 1,
                new_id: 3,
                height: 1.0,
                size: 2,
            },
            MergeStep {
                left: 3,
                right: 2,
                new_id: 4,
                height: 2.0,
                size: 3,
            },
        ];
        let t = from_linkage(&steps, &[0, 1, 2]).unwrap();
        assert_eq!(t.path_to_leaf(2).unwrap(), vec![2, 4]);
        assert_eq!(t.leaf_of_cluster(1), Some(1));
        assert!(matches!(t.path_to_leaf(3), Err(Error::Contract(_))));
    }

    #[test]
    fn malformed_linkage_is_rejected() {
        let steps = [
            MergeStep {
                left: 0,
                right: 1,
                new_id: 3,
                height: 1.0,
                size: 2,
            },
            MergeStep {
                left: 0,
                right: 2,
                new_id: 4,
                height: 2.0,
                size: 3,
            },
        ];
        assert!(matches!(from_linkage(&steps, &[0, 1, 2]), Err(Error::Validation(_))));
        assert!(from_linkage(&steps[..1], &[0, 1, 2]).is_err());
    }

    #[test]
    fn balanced_paths_have_equal_length() {
        let t = build_manual_tree(&Grouping::parse("((a,b),(c,d))").unwrap()).unwrap();
        for l in t.leaves() {
            assert_eq!(t.path_to_leaf(l).unwrap().len(), 3);
        }
    }

    #[test]
    fn attach_adapter_counts() {
        let lm = |l, m| LmConfig {
            n_layers: l,
            d_model: m,
            n_heads: 1,
            context_len: 2,
            vocab_size: 4,
        };
        let one = DomainTree::single(&["a"]).unwrap();
        let store = one.attach_adapters(&lm(1, 4), 2, 0).unwrap();
        assert_eq!(store.params_per_node(), 22);
        assert_eq!(store.shared_ln_params(), 8);

        let a = figure_tree().attach_adapters(&lm(2, 8), 3, 5).unwrap();
        let b = figure_tree().attach_adapters(&lm(2, 8), 3, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.node_count(), 7);
    }

    #[test]
    fn json_round_trip() {
        let mut t = from_linkage(&chain_linkage(4), &[3, 0, 2, 5]).unwrap();
        t.set_domain_leaf("x", 1).unwrap();
        t.set_domain_leaf("y", 1).unwrap();
        assert!(t.set_domain_leaf("z", 6).is_err());
        let mut bytes = Vec::new();
        t.save(&mut bytes).unwrap();
        let back = DomainTree::load(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, t);
        let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        for key in ["nodes", "leaf_of_domain", "cluster_of_leaf", "linkage"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    fn random_linkage(k: usize, picks: &[(usize, usize)]) -> Vec<MergeStep> {
        let mut open: Vec<usize> = (0..k).collect();
        let mut steps = Vec::new();
        for j in 0..k - 1 {
            let (a, b) = picks[j];
            let i = a % open.len();
            let left = open.remove(i);
            let r = b % open.len();
            let right = open.remove(r);
            open.push(k + j);
            steps.push(MergeStep {
                left,
                right,
                new_id: k + j,
                height: j as f64,
                size: 0,
            });
        }
        steps
    }

    proptest! {
        #[test]
        fn binary_trees_from_linkage(
            k in 1usize..20,
            picks in prop::collection::vec((0usize..100, 0usize..100), 19),
        ) {
            let steps = random_linkage(k, &picks);
            let t = from_linkage(&steps, &(0..k).collect::<Vec<_>>()).unwrap();
            prop_assert_eq!(t.node_count(), 2 * k - 1);
            prop_assert_eq!(t.leaves().len(), k);
            for n in t.nodes() {
                prop_assert!(n.children.is_empty() || n.children.len() == 2);
            }
            for a in t.leaves() {
                let pa = t.path_to_leaf(a).unwrap();
                prop_assert_eq!(*pa.last().unwrap(), t.root());
                for b in t.leaves() {
                    let pb = t.path_to_leaf(b).unwrap();
                    // shared nodes form a common suffix starting at the lowest common ancestor
                    let shared: Vec<usize> = pa.iter().copied().filter(|n| pb.contains(n)).collect();
                    prop_assert!(!shared.is_empty());
                    prop_assert_eq!(&pa[pa.len() - shared.len()..], &shared[..]);
                    prop_assert_eq!(&pb[pb.len() - shared.len()..], &shared[..]);
                }
            }
        }
    }
}
