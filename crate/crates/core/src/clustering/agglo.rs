use super::gmm::GaussianComponent;
use super::kl::sym_kl;
use crate::domtree::MergeStep;
use crate::error::{Error, Result};

/// Symmetric non-negative matrix with zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    k: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(k: usize, d: Vec<f64>) -> Result<Self> {
        if d.len() != k * k {
            return Err(Error::Validation(format!("distance matrix needs {} entries, got {}", k * k, d.len())));
        }
        for i in 0..k {
            if d[i * k + i] != 0.0 {
                return Err(Error::Validation(format!("diagonal entry {i} is not zero")));
            }
            for j in 0..k {
                let v = d[i * k + j];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Validation(format!("entry ({i},{j}) = {v} is not a distance")));
                }
                if v != d[j * k + i] {
                    return Err(Error::Validation(format!("entries ({i},{j}) and ({j},{i}) differ")));
                }
            }
        }
        Ok(Self { k, d })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows.len(), rows.concat())
    }

    /// Symmetrised KL between the selected components; slightly negative
    /// round-off is clamped to zero.
    pub fn from_components(components: &[GaussianComponent], selected: &[usize]) -> Result<Self> {
        let k = selected.len();
        let mut d = vec![0.0; k * k];
        for i in 0..k {
            for j in i + 1..k {
                let v = sym_kl(&components[selected[i]], &components[selected[j]])?.max(0.0);
                d[i * k + j] = v;
                d[j * k + i] = v;
            }
        }
        Self::new(k, d)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.k + j]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.k {
            let row: Vec<String> = (0..self.k).map(|j| format!("{}", self.get(i, j))).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// Average-linkage agglomeration. Cluster ids are `0..k` for the inputs and
/// `k + s` for the cluster formed at step `s`; the closest pair merges first,
/// ties going to the lexicographically smallest id pair.
pub fn agglomerate(dist: &DistanceMatrix) -> Result<Vec<MergeStep>> {
    let k = dist.k();
    if k < 2 {
        return Err(Error::Validation(format!("agglomeration needs at least 2 clusters, got {k}")));
    }
    let total = 2 * k - 1;
    let mut d = vec![vec![0.0; total]; total];
    for (i, row) in d.iter_mut().enumerate().take(k) {
        for (j, v) in row.iter_mut().enumerate().take(k) {
            *v = dist.get(i, j);
        }
    }
    let mut size = vec![1usize; total];
    let mut active: Vec<usize> = (0..k).collect();
    let mut steps = Vec::with_capacity(k - 1);
    for s in 0..k - 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for (a, &i) in active.iter().enumerate() {
            for &j in &active[a + 1..] {
                if best.is_none_or(|(bd, _, _)| d[i][j] < bd) {
                    best = Some((d[i][j], i, j));
                }
            }
        }
        let (h, i, j) = best.expect("two open clusters");
        let new = k + s;
        size[new] = size[i] + size[j];
        let (wi, wj) = (size[i] as f64, size[j] as f64);
        active.retain(|&x| x != i && x != j);
        for &x in &active {
            let v = (wi * d[i][x] + wj * d[j][x]) / (wi + wj);
            d[new][x] = v;
            d[x][new] = v;
        }
        active.push(new);
        steps.push(MergeStep {
            left: i,
            right: j,
            new_id: new,
            height: h,
            size: size[new],
        });
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn members(steps: &[MergeStep], k: usize, id: usize) -> Vec<usize> {
        if id < k {
            return vec![id];
        }
        let s = &steps[id - k];
        let mut m = members(steps, k, s.left);
        m.extend(members(steps, k, s.right));
        m
    }

    /// Average linkage from its definition: mean over all member pairs.
    fn oracle_steps(dist: &DistanceMatrix) -> Vec<(Vec<usize>, Vec<usize>, f64)> {
        let k = dist.k();
        let mut clusters: Vec<Vec<usize>> = (0..k).map(|i| vec![i]).collect();
        let mut out = Vec::new();
        while clusters.len() > 1 {
            let mut best = (f64::INFINITY, 0, 0);
            for a in 0..clusters.len() {
                for b in a + 1..clusters.len() {
                    let mut s = 0.0;
                    for &x in &clusters[a] {
                        for &y in &clusters[b] {
                            s += dist.get(x, y);
                        }
                    }
                    let v = s / (clusters[a].len() * clusters[b].len()) as f64;
                    if v < best.0 - 1e-12 {
                        best = (v, a, b);
                    }
                }
            }
            let (v, a, b) = best;
            let right = clusters.remove(b);
            let left = clusters.remove(a);
            out.push((left.clone(), right.clone(), v));
            clusters.push([left, right].concat());
        }
        out
    }

    #[test]
    fn three_point_example() {
        let d = DistanceMatrix::from_rows(&[vec![0.0, 1.0, 5.0], vec![1.0, 0.0, 6.0], vec![5.0, 6.0, 0.0]]).unwrap();
        let steps = agglomerate(&d).unwrap();
        assert_eq!((steps[0].left, steps[0].right, steps[0].new_id, steps[0].height), (0, 1, 3, 1.0));
        assert_eq!((steps[1].left, steps[1].right, steps[1].new_id, steps[1].height), (2, 3, 4, 5.5));
        assert_eq!(steps[1].size, 3);
    }

    #[test]
    fn two_clusters_merge_once() {
        let d = DistanceMatrix::from_rows(&[vec![0.0, 2.5], vec![2.5, 0.0]]).unwrap();
        let steps = agglomerate(&d).unwrap();
        assert_eq!(steps.len(), 1);
        assert_eq!(steps[0].height, 2.5);
    }

    #[test]
    fn planted_pairs_merge_first() {
        let d = DistanceMatrix::from_rows(&[
            vec![0.0, 10.0, 1.0, 11.0],
            vec![10.0, 0.0, 12.0, 0.5],
            vec![1.0, 12.0, 0.0, 10.5],
            vec![11.0, 0.5, 10.5, 0.0],
        ])
        .unwrap();
        let steps = agglomerate(&d).unwrap();
        let first: Vec<(usize, usize)> = steps[..2].iter().map(|s| (s.left, s.right)).collect();
        assert_eq!(first, vec![(1, 3), (0, 2)]);
    }

    #[test]
    fn invalid_matrices_are_rejected() {
        assert!(DistanceMatrix::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.0]]).is_err());
        assert!(DistanceMatrix::from_rows(&[vec![0.0, -1.0], vec![-1.0, 0.0]]).is_err());
        assert!(DistanceMatrix::from_rows(&[vec![1.0]]).is_err());
        let one = DistanceMatrix::from_rows(&[vec![0.0]]).unwrap();
        assert!(matches!(agglomerate(&one), Err(Error::Validation(_))));
    }

    proptest! {
        #[test]
        fn matches_definition_and_uses_each_id_once(k in 2usize..9, vals in prop::collection::vec(0.0f64..10.0, 64)) {
            let mut rows = vec![vec![0.0; k]; k];
            for i in 0..k {
                for j in i + 1..k {
                    rows[i][j] = vals[i * 8 + j];
                    rows[j][i] = vals[i * 8 + j];
                }
            }
            let d = DistanceMatrix::from_rows(&rows).unwrap();
            let steps = agglomerate(&d).unwrap();
            prop_assert_eq!(steps.len(), k - 1);
            let mut used = vec![0; 2 * k - 1];
            for (s, st) in steps.iter().enumerate() {
                prop_assert_eq!(st.new_id, k + s);
                used[st.left] += 1;
                used[st.right] += 1;
            }
            prop_assert!(used[..2 * k - 2].iter().all(|&u| u == 1));
            prop_assert_eq!(used[2 * k - 2], 0);

            for (st, (l, r, h)) in steps.iter().zip(oracle_steps(&d)) {
                let mut a = members(&steps, k, st.left);
                let mut b = members(&steps, k, st.right);
                a.sort();
                b.sort();
                let mut pair = [a, b];
                pair.sort();
                let mut want = [l, r];
                want.iter_mut().for_each(|v| v.sort());
                want.sort();
                prop_assert_eq!(pair, want);
                prop_assert!((st.height - h).abs() <= 1e-9);
            }
        }
    }
}
