use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::agglo::{agglomerate, DistanceMatrix};
use super::assign::{assign_and_prune, Assignment};
use super::embedfile::EmbeddingMatrix;
use super::gmm::{gmm_fit, GmmConfig, GmmModel};
use super::pca::{pca_fit, PcaModel};
use crate::domtree::{from_linkage, DomainTree};
use crate::error::{Error, Result};
use crate::lm::{Backbone, CorpusSet, Vocab};

/// Embeds the first `seq_len` tokens of each document.
pub fn embed_documents(backbone: &Backbone, docs: &[String], seq_len: usize) -> Result<Vec<Vec<f64>>> {
    if seq_len == 0 {
        return Err(Error::Config("seq_len must be at least 1".into()));
    }
    docs.iter()
        .map(|d| {
            let ids = Vocab.tokenize(d);
            backbone.embed_sequence(&ids[..ids.len().min(seq_len)])
        })
        .collect()
}

/// Embeds `per_domain` documents drawn uniformly with replacement from every
/// domain, each truncated to `seq_len` tokens.
pub fn embed_domains(
    backbone: &Backbone,
    corpora: &CorpusSet,
    per_domain: usize,
    seq_len: usize,
    seed: u64,
) -> Result<EmbeddingMatrix> {
    corpora.require_non_empty()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(per_domain * corpora.len());
    let mut labels = Vec::with_capacity(rows.capacity());
    for c in corpora.domains() {
        let docs: Vec<String> = (0..per_domain)
            .map(|_| c.documents()[rng.random_range(0..c.documents().len())].clone())
            .collect();
        rows.extend(embed_documents(backbone, &docs, seq_len)?);
        labels.extend(std::iter::repeat_n(c.name().to_string(), per_domain));
    }
    EmbeddingMatrix::new(rows, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryConfig {
    pub pca_dim: usize,
    pub n_components: usize,
    pub gmm: GmmConfig,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            pca_dim: 16,
            n_components: 4,
            gmm: GmmConfig::default(),
        }
    }
}

/// Everything produced while turning embeddings into a tree.
#[derive(Clone, Debug)]
pub struct Discovery {
    pub pca: PcaModel,
    pub gmm: GmmModel,
    pub assignment: Assignment,
    pub distances: Option<DistanceMatrix>,
    pub tree: DomainTree,
}

/// PCA, mixture fit, assignment and pruning, symmetrised-KL distances and
/// average-linkage agglomeration. Leaf `i` is the `i`-th retained component.
pub fn discover_tree(emb: &EmbeddingMatrix, cfg: &DiscoveryConfig) -> Result<Discovery> {
    emb.validate()?;
    let pca = pca_fit(&emb.rows, cfg.pca_dim)?;
    let reduced = pca.transform(&emb.rows)?;
    let gmm = gmm_fit(&reduced, cfg.n_components, &cfg.gmm)?;
    let assignment = assign_and_prune(&gmm, &emb.grouped(&reduced))?;
    let retained = &assignment.retained;

    let (distances, mut tree) = if retained.len() >= 2 {
        let d = DistanceMatrix::from_components(&gmm.components, retained)?;
        let steps = agglomerate(&d)?;
        let tree = from_linkage(&steps, retained)?;
        (Some(d), tree)
    } else {
        let mut tree = DomainTree::single::<&str>(&[])?;
        tree.set_cluster_of_leaf(0, retained[0])?;
        (None, tree)
    };
    for (domain, &c) in assignment.domains.iter().zip(&assignment.domain_cluster) {
        let leaf = retained.iter().position(|&r| r == c).expect("assigned clusters are retained");
        tree.set_domain_leaf(domain.clone(), leaf)?;
    }
    Ok(Discovery {
        pca,
        gmm,
        assignment,
        distances,
        tree,
    })
}

/// Gives each leaf of an existing tree the component its domain was assigned
/// to. When several leaves compete for one component, the leaf whose domain
/// put the most samples there keeps it (lowest leaf on ties) and the others
/// stay unroutable. Returns the unroutable leaves.
pub fn attach_clusters(tree: &mut DomainTree, assignment: &Assignment) -> Result<Vec<usize>> {
    let mut claims = Vec::new();
    for (i, d) in assignment.domains.iter().enumerate() {
        if let Ok(leaf) = tree.leaf_for_domain(d) {
            let c = assignment.domain_cluster[i];
            claims.push((assignment.confusion[i][c], leaf, c));
        }
    }
    claims.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut used = Vec::new();
    for (_, leaf, c) in claims {
        if !used.contains(&c) && tree.cluster_of_leaf().get(&leaf).is_none() {
            tree.set_cluster_of_leaf(leaf, c)?;
            used.push(c);
        }
    }
    Ok(tree
        .leaves()
        .into_iter()
        .filter(|l| !tree.cluster_of_leaf().contains_key(l))
        .collect())
}

/// Projection and mixture fitted on embeddings, with clusters attached to
/// the leaves of a given tree.
pub fn fit_router(emb: &EmbeddingMatrix, cfg: &DiscoveryConfig, tree: &mut DomainTree) -> Result<(PcaModel, GmmModel, Assignment, Vec<usize>)> {
    emb.validate()?;
    let pca = pca_fit(&emb.rows, cfg.pca_dim)?;
    let reduced = pca.transform(&emb.rows)?;
    let gmm = gmm_fit(&reduced, cfg.n_components, &cfg.gmm)?;
    let assignment = assign_and_prune(&gmm, &emb.grouped(&reduced))?;
    let unroutable = attach_clusters(tree, &assignment)?;
    Ok((pca, gmm, assignment, unroutable))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn planted(seed: u64) -> EmbeddingMatrix {
        // two groups far apart, each holding two nearby domains
        let centers = [
            ("a0", [0.0, 0.0, 0.0]),
            ("a1", [3.0, 0.0, 0.0]),
            ("b0", [0.0, 40.0, 0.0]),
            ("b1", [3.0, 40.0, 0.0]),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Normal::new(0.0, 0.3).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (name, c) in centers {
            for _ in 0..60 {
                rows.push(c.iter().map(|v| v + g.sample(&mut rng)).collect());
                labels.push(name.to_string());
            }
        }
        EmbeddingMatrix::new(rows, labels).unwrap()
    }

    #[test]
    fn planted_hierarchy_is_recovered_deterministically() {
        let cfg = DiscoveryConfig {
            pca_dim: 3,
            n_components: 4,
            gmm: GmmConfig::default(),
        };
        let emb = planted(5);
        let d = discover_tree(&emb, &cfg).unwrap();
        assert_eq!(d.assignment.retained.len(), 4);
        assert_eq!(d.tree.node_count(), 7);
        let path = |n: &str| d.tree.path_for_domain(n).unwrap();
        assert_eq!(path("a0")[1], path("a1")[1]);
        assert_eq!(path("b0")[1], path("b1")[1]);
        assert_ne!(path("a0")[1], path("b0")[1]);

        let again = discover_tree(&emb, &cfg).unwrap();
        assert_eq!(again.tree, d.tree);
    }

    #[test]
    fn single_retained_cluster_gives_one_node() {
        let emb = EmbeddingMatrix::new(
            (0..10).map(|i| vec![i as f64 * 0.01, 0.0]).collect(),
            (0..10).map(|i| if i < 5 { "x".into() } else { "y".into() }).collect(),
        )
        .unwrap();
        let cfg = DiscoveryConfig {
            pca_dim: 1,
            n_components: 1,
            gmm: GmmConfig::default(),
        };
        let d = discover_tree(&emb, &cfg).unwrap();
        assert_eq!(d.tree.node_count(), 1);
        assert_eq!(d.tree.path_for_domain("y").unwrap(), vec![0]);
    }
}
