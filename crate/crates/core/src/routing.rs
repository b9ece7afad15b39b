//! Path choice and evaluation: leaf voting by mixture responsibilities,
//! multi-path adapter hooks and perplexity over fixed windows.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{AdapterHook, AdapterStore, PathCombine};
use crate::clustering::{log_sum_exp, GmmModel};
use crate::domtree::DomainTree;
use crate::error::{Error, Result};
use crate::lm::{Backbone, LayerHook};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingConfig {
    /// Probe sequences used to vote for leaves.
    pub n_probe: usize,
    /// Paths combined at inference.
    pub n_paths: usize,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            n_probe: 1000,
            n_paths: 1,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_probe == 0 || self.n_paths == 0 {
            return Err(Error::Config("n_probe and n_paths must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedLeaf {
    pub leaf: usize,
    pub cluster: usize,
    pub votes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathSelection {
    /// Every clustered leaf, by votes descending then cluster ascending.
    pub ranked: Vec<RankedLeaf>,
    /// Leaves of the chosen paths.
    pub paths_used: Vec<usize>,
    /// SHA-256 of the probe set.
    pub fingerprint: String,
}

fn fingerprint(probes: &[Vec<f64>]) -> String {
    let mut h = Sha256::new();
    h.update((probes.len() as u64).to_le_bytes());
    for p in probes {
        h.update((p.len() as u64).to_le_bytes());
        for v in p {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Cluster each probe votes for: its most responsible component among
/// `allowed`, lowest index on ties.
pub fn probe_votes(gmm: &GmmModel, allowed: &[usize], probes: &[Vec<f64>]) -> Result<Vec<usize>> {
    if allowed.is_empty() {
        return Err(Error::Config("no retained clusters to route to".into()));
    }
    if let Some(&c) = allowed.iter().find(|&&c| c >= gmm.k()) {
        return Err(Error::Config(format!("cluster {c} is not a mixture component")));
    }
    let mut allowed = allowed.to_vec();
    allowed.sort_unstable();
    Ok(gmm
        .responsibilities_many(probes)?
        .iter()
        .map(|r| {
            let mut best = allowed[0];
            for &c in &allowed[1..] {
                if r[c] > r[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Ranks the tree's clustered leaves by probe votes and keeps the top `n_paths`.
pub fn select_paths(gmm: &GmmModel, tree: &DomainTree, probes: &[Vec<f64>], n_paths: usize) -> Result<PathSelection> {
    if probes.is_empty() {
        return Err(Error::Data("no probe sequences".into()));
    }
    let map = tree.cluster_of_leaf();
    if map.is_empty() {
        return Err(Error::Config("tree has no retained clusters".into()));
    }
    if n_paths == 0 || n_paths > map.len() {
        return Err(Error::Config(format!(
            "cannot select {n_paths} paths from {} clustered leaves",
            map.len()
        )));
    }
    let clusters: Vec<usize> = map.values().copied().collect();
    let votes = probe_votes(gmm, &clusters, probes)?;
    let mut ranked: Vec<RankedLeaf> = map
        .iter()
        .map(|(&leaf, &cluster)| RankedLeaf {
            leaf,
            cluster,
            votes: votes.iter().filter(|&&v| v == cluster).count(),
        })
        .collect();
    ranked.sort_by(|a, b| b.votes.cmp(&a.votes).then(a.cluster.cmp(&b.cluster)));
    let paths_used = ranked[..n_paths].iter().map(|r| r.leaf).collect();
    Ok(PathSelection {
        ranked,
        paths_used,
        fingerprint: fingerprint(probes),
    })
}

/// Hook running the root-to-leaf paths of `leaves` together.
pub fn multi_path_hook<'a>(
    tree: &DomainTree,
    store: &'a AdapterStore,
    leaves: &[usize],
    combine: PathCombine,
) -> Result<AdapterHook<'a>> {
    if leaves.is_empty() {
        return Err(Error::Contract("at least one path is required".into()));
    }
    let paths = leaves
        .iter()
        .map(|&l| tree.path_to_leaf(l))
        .collect::<Result<Vec<_>>>()?;
    AdapterHook::new(store, paths, combine, false)
}

/// Perplexity with its supporting totals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Perplexity {
    pub value: f64,
    pub nll: f64,
    pub tokens: usize,
}

/// Non-overlapping windows of `seq_len + 1` tokens with stride `seq_len`;
/// a trailing partial window is dropped.
pub fn eval_windows(tokens: &[usize], seq_len: usize) -> Vec<&[usize]> {
    if seq_len == 0 {
        return vec![];
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + seq_len < tokens.len() {
        out.push(&tokens[start..start + seq_len + 1]);
        start += seq_len;
    }
    out
}

/// Summed next-token negative log-likelihood and predicted-token count.
pub fn window_nll(backbone: &Backbone, hook: Option<&mut dyn LayerHook>, window: &[usize]) -> Result<(f64, usize)> {
    if window.len() < 2 {
        return Err(Error::Contract("a window needs at least two tokens".into()));
    }
    let logits = backbone.logits(&window[..window.len() - 1], hook)?;
    let v = logits.cols();
    let mut nll = 0.0;
    for (r, &t) in window[1..].iter().enumerate() {
        let row = logits.row(r);
        if t >= v {
            return Err(Error::Index {
                what: "vocabulary",
                index: t,
                bound: v,
            });
        }
        nll += log_sum_exp(row) - row[t];
    }
    Ok((nll, window.len() - 1))
}

/// `exp` of the mean next-token loss over [`eval_windows`] of `tokens`.
pub fn evaluate_perplexity(
    backbone: &Backbone,
    mut hook: Option<&mut dyn LayerHook>,
    tokens: &[usize],
    seq_len: usize,
) -> Result<Perplexity> {
    let windows = eval_windows(tokens, seq_len);
    if windows.is_empty() {
        return Err(Error::Data(format!(
            "{} tokens do not fill one evaluation window of {}",
            tokens.len(),
            seq_len + 1
        )));
    }
    let mut nll = 0.0;
    let mut count = 0;
    for w in windows {
        let h: Option<&mut dyn LayerHook> = match hook.as_mut() {
            Some(h) => Some(&mut **h),
            None => None,
        };
        let (n, c) = window_nll(backbone, h, w)?;
        nll += n;
        count += c;
    }
    Ok(Perplexity {
        value: (nll / count as f64).exp(),
        nll,
        tokens: count,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteReport {
    pub domain: String,
    pub ranked: Vec<RankedLeaf>,
    pub paths_used: Vec<usize>,
}

impl RouteReport {
    pub fn new(domain: impl Into<String>, sel: &PathSelection) -> Self {
        Self {
            domain: domain.into(),
            ranked: sel.ranked.clone(),
            paths_used: sel.paths_used.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerplexityRow {
    pub domain: String,
    pub model_variant: String,
    pub n_paths: usize,
    pub perplexity: f64,
    pub tokens: usize,
}

pub fn perplexity_csv(rows: &[PerplexityRow]) -> String {
    let mut s = String::from("domain,model_variant,n_paths,perplexity,tokens\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.10},{}\n",
            r.domain, r.model_variant, r.n_paths, r.perplexity, r.tokens
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::GaussianComponent;
    use crate::domtree::{build_manual_tree, from_linkage, Grouping, MergeStep};
    use crate::lm::{LmConfig, Vocab};
    use crate::numcore::{Tape, Tensor};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// 1-D mixture with unit variances at the given means.
    fn line_gmm(means: &[f64]) -> GmmModel {
        GmmModel {
            components: means
                .iter()
                .map(|&m| GaussianComponent {
                    weight: 1.0 / means.len() as f64,
                    mean: vec![m],
                    cov: vec![1.0],
                })
                .collect(),
            dim: 1,
            reg: 0.0,
            ll_trace: vec![],
        }
    }

    /// Flat binary tree whose leaf `i` carries cluster `clusters[i]`.
    fn chain_tree(clusters: &[usize]) -> DomainTree {
        let k = clusters.len();
        let steps: Vec<MergeStep> = (0..k - 1)
            .map(|j| MergeStep {
                left: if j == 0 { 0 } else { k + j - 1 },
                right: j + 1,
                new_id: k + j,
                height: 0.0,
                size: j + 2,
            })
            .collect();
        from_linkage(&steps, clusters).unwrap()
    }

    fn probes_at(points: &[(f64, usize)]) -> Vec<Vec<f64>> {
        points.iter().flat_map(|&(x, n)| std::iter::repeat_n(vec![x], n)).collect()
    }

    /// Brute force: count argmax over all retained clusters, sort.
    fn oracle(gmm: &GmmModel, tree: &DomainTree, probes: &[Vec<f64>], p: usize) -> Vec<(usize, usize, usize)> {
        let mut rows: Vec<(usize, usize, usize)> = tree
            .cluster_of_leaf()
            .iter()
            .map(|(&l, &c)| {
                let votes = probes
                    .iter()
                    .filter(|x| {
                        let r = gmm.responsibilities(x).unwrap();
                        let winner = tree
                            .cluster_of_leaf()
                            .values()
                            .copied()
                            .fold(None::<usize>, |b, k| match b {
                                Some(b) if r[b] > r[k] || (r[b] == r[k] && b < k) => Some(b),
                                _ => Some(k),
                            })
                            .unwrap();
                        winner == c
                    })
                    .count();
                (votes, c, l)
            })
            .collect();
        rows.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        rows.truncate(p);
        rows
    }

    #[test]
    fn counting_example() {
        let gmm = line_gmm(&[0.0, 10.0, 20.0]);
        let tree = chain_tree(&[0, 1, 2]);
        let probes = probes_at(&[(10.0, 6), (0.0, 3), (20.0, 1)]);
        let sel = select_paths(&gmm, &tree, &probes, 2).unwrap();
        assert_eq!(sel.paths_used, vec![1, 0]);
        assert_eq!(sel.ranked.iter().map(|r| r.votes).sum::<usize>(), 10);

        let all = probes_at(&[(20.0, 7)]);
        let sel = select_paths(&gmm, &tree, &all, 1).unwrap();
        assert_eq!((sel.paths_used[0], sel.ranked[0].votes), (2, 7));
    }

    #[test]
    fn exact_tie_goes_to_lowest_cluster() {
        let gmm = line_gmm(&[0.0, 1.0, 2.0, 50.0, 4.0, 5.0, 6.0, 100.0]);
        let tree = chain_tree(&[7, 3]);
        let probes = probes_at(&[(50.0, 5), (100.0, 5)]);
        let sel = select_paths(&gmm, &tree, &probes, 1).unwrap();
        assert_eq!(sel.ranked[0].cluster, 3);
        assert_eq!(sel.paths_used, vec![1]);
    }

    #[test]
    fn pruned_votes_move_to_retained_clusters() {
        let gmm = line_gmm(&[0.0, 5.0, 10.0]);
        let tree = chain_tree(&[0, 2]);
        let probes = probes_at(&[(5.5, 4), (0.0, 3)]);
        let sel = select_paths(&gmm, &tree, &probes, 1).unwrap();
        assert_eq!(sel.ranked[0], RankedLeaf { leaf: 1, cluster: 2, votes: 4 });
    }

    #[test]
    fn selection_errors() {
        let gmm = line_gmm(&[0.0, 1.0]);
        let tree = chain_tree(&[0, 1]);
        assert!(matches!(select_paths(&gmm, &tree, &[vec![0.0]], 3), Err(Error::Config(_))));
        assert!(select_paths(&gmm, &tree, &[], 1).is_err());
        let bare = DomainTree::single(&["a"]).unwrap();
        assert!(matches!(select_paths(&gmm, &bare, &[vec![0.0]], 1), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            means in prop::collection::vec(-5.0f64..5.0, 2..7),
            keep in prop::collection::vec(any::<bool>(), 7),
            xs in prop::collection::vec(-8.0f64..8.0, 1..40),
            p in 1usize..4,
        ) {
            let gmm = line_gmm(&means);
            let mut retained: Vec<usize> = (0..means.len()).filter(|&c| keep[c]).collect();
            if retained.len() < 2 {
                retained = vec![0, 1];
            }
            let tree = chain_tree(&retained);
            let p = p.min(retained.len());
            let probes: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
            let sel = select_paths(&gmm, &tree, &probes, p).unwrap();
            let want = oracle(&gmm, &tree, &probes, p);
            let got: Vec<(usize, usize, usize)> = sel.ranked[..p].iter().map(|r| (r.votes, r.cluster, r.leaf)).collect();
            prop_assert_eq!(got, want);
            prop_assert_eq!(sel.ranked.iter().map(|r| r.votes).sum::<usize>(), probes.len());

            // extra votes for the leader keep it on top
            let top = sel.ranked[0].cluster;
            let mut more = probes.clone();
            more.extend(std::iter::repeat_n(vec![means[top]], 3));
            let again = select_paths(&gmm, &tree, &more, 1).unwrap();
            let leader_votes = probe_votes(&gmm, &retained, &[vec![means[top]]]).unwrap()[0];
            if leader_votes == top {
                prop_assert_eq!(again.ranked[0].cluster, top);
            }
        }
    }

    fn lm() -> LmConfig {
        LmConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            context_len: 16,
            vocab_size: Vocab::SIZE,
        }
    }

    fn randomized_store(nodes: usize, seed: u64) -> AdapterStore {
        let mut store = AdapterStore::new(nodes, &lm(), 3, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for i in 0..store.params().len() {
            let shape = store.params().get(i).shape().to_vec();
            *store.params_mut().get_mut(i) = Tensor::randn(&shape, 0.3, &mut rng);
        }
        store
    }

    fn figure_tree() -> DomainTree {
        build_manual_tree(&Grouping::parse("((a, b), (c, d))").unwrap()).unwrap()
    }

    #[test]
    fn single_path_and_duplicate_paths_agree() {
        let tree = figure_tree();
        let store = randomized_store(7, 3);
        let b = Backbone::init(lm(), 4).unwrap();
        let ids = Vocab.tokenize("route me");
        let mut one = multi_path_hook(&tree, &store, &[1], PathCombine::MeanOfPaths).unwrap();
        let mut direct = AdapterHook::single(&store, tree.path_to_leaf(1).unwrap(), false).unwrap();
        let mut twice = multi_path_hook(&tree, &store, &[1, 1], PathCombine::MeanOfPaths).unwrap();
        let a = b.logits(&ids, Some(&mut one)).unwrap();
        assert_eq!(a, b.logits(&ids, Some(&mut direct)).unwrap());
        assert_eq!(a, b.logits(&ids, Some(&mut twice)).unwrap());
    }

    #[test]
    fn sibling_paths_average_their_path_means() {
        let tree = figure_tree();
        let store = randomized_store(7, 5);
        let h = Tensor::randn(&[3, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(6));
        let mut tape = Tape::new();
        let hv = tape.constant(&h);
        let mut hook = multi_path_hook(&tree, &store, &[0, 1], PathCombine::MeanOfPaths).unwrap();
        let y = hook.apply(&mut tape, 0, hv).unwrap();
        let y = tape.value(y).to_vec();

        // direct recomputation of each node's full output y_n
        let out = |n: usize| {
            let mut t = Tape::new();
            let hv = t.constant(&h);
            let mut one = AdapterHook::single(&store, vec![n], false).unwrap();
            let r = one.apply(&mut t, 0, hv).unwrap();
            t.value(r).to_vec()
        };
        let (y0, y1, y4, y6) = (out(0), out(1), out(4), out(6));
        for i in 0..y.len() {
            let p0 = (y0[i] + y4[i] + y6[i]) / 3.0;
            let p1 = (y1[i] + y4[i] + y6[i]) / 3.0;
            assert!((y[i] - (p0 + p1) / 2.0).abs() < 1e-12);
        }

        let mut union = multi_path_hook(&tree, &store, &[0, 1], PathCombine::UnionOfNodes).unwrap();
        let mut tape = Tape::new();
        let hv = tape.constant(&h);
        let u = union.apply(&mut tape, 0, hv).unwrap();
        for (i, v) in tape.value(u).iter().enumerate() {
            assert!((v - (y0[i] + y1[i] + y4[i] + y6[i]) / 4.0).abs() < 1e-12);
        }
        assert!(multi_path_hook(&tree, &store, &[4], PathCombine::MeanOfPaths).is_err());
    }

    #[test]
    fn perplexity_of_uniform_model_is_vocab_size() {
        let b = Backbone::init(lm(), 7).unwrap();
        let tokens = Vocab.tokenize(&"some text for evaluation ".repeat(4));
        let p = evaluate_perplexity(&b, None, &tokens, 10).unwrap();
        assert!((p.value - Vocab::SIZE as f64).abs() < 1e-6 * Vocab::SIZE as f64);
        assert_eq!(p.tokens, (tokens.len() - 1) / 10 * 10);
        assert!(matches!(evaluate_perplexity(&b, None, &tokens[..5], 10), Err(Error::Data(_))));
    }

    #[test]
    fn zero_init_adapters_match_backbone_bitwise() {
        let mut b = Backbone::init(lm(), 8).unwrap();
        let head = b.params().index_of("head.weight").unwrap();
        let shape = b.params().get(head).shape().to_vec();
        *b.params_mut().get_mut(head) = Tensor::randn(&shape, 0.5, &mut ChaCha8Rng::seed_from_u64(9));
        let tree = figure_tree();
        let store = tree.attach_adapters(&lm(), 4, 10).unwrap();
        let tokens = Vocab.tokenize(&"zero init check ".repeat(5));
        let base = evaluate_perplexity(&b, None, &tokens, 12).unwrap();
        let mut hook = multi_path_hook(&tree, &store, &[2, 0], PathCombine::MeanOfPaths).unwrap();
        let adapted = evaluate_perplexity(&b, Some(&mut hook), &tokens, 12).unwrap();
        assert_eq!(base.value.to_bits(), adapted.value.to_bits());
    }

    #[test]
    fn batch_partitioning_does_not_change_perplexity() {
        let mut b = Backbone::init(lm(), 11).unwrap();
        let head = b.params().index_of("head.weight").unwrap();
        let shape = b.params().get(head).shape().to_vec();
        *b.params_mut().get_mut(head) = Tensor::randn(&shape, 0.5, &mut ChaCha8Rng::seed_from_u64(12));
        let tokens = Vocab.tokenize(&"partition invariance text ".repeat(6));
        let whole = evaluate_perplexity(&b, None, &tokens, 8).unwrap();
        let windows = eval_windows(&tokens, 8);
        let (mut nll, mut count) = (0.0, 0);
        for chunk in windows.chunks(3).rev() {
            let mut part = 0.0;
            for w in chunk {
                let (n, c) = window_nll(&b, None, w).unwrap();
                part += n;
                count += c;
            }
            nll += part;
        }
        assert_eq!(count, whole.tokens);
        assert!(((nll / count as f64).exp() - whole.value).abs() <= 1e-10 * whole.value);
    }

    #[test]
    fn report_formats() {
        let rows = vec![PerplexityRow {
            domain: "a".into(),
            model_variant: "hierarchical".into(),
            n_paths: 2,
            perplexity: 3.5,
            tokens: 100,
        }];
        assert_eq!(
            perplexity_csv(&rows),
            "domain,model_variant,n_paths,perplexity,tokens\na,hierarchical,2,3.5000000000,100\n"
        );
        let sel = PathSelection {
            ranked: vec![RankedLeaf { leaf: 1, cluster: 4, votes: 9 }],
            paths_used: vec![1],
            fingerprint: String::new(),
        };
        let v = serde_json::to_value(RouteReport::new("held", &sel)).unwrap();
        assert_eq!(v["ranked"][0]["votes"], 9);
        assert_eq!(v["paths_used"][0], 1);
    }
}
