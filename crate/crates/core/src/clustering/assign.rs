use super::gmm::GmmModel;
use crate::error::{Error, Result};

/// Domain-to-component assignment with pruning of unused components.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub domains: Vec<String>,
    /// Rows are domains, columns components; entries count samples whose
    /// most responsible component is that column.
    pub confusion: Vec<Vec<usize>>,
    pub domain_cluster: Vec<usize>,
    /// Components chosen by at least one domain, ascending.
    pub retained: Vec<usize>,
}

fn argmax_lowest<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl Assignment {
    /// Derives assignment and retained set from argmax counts.
    pub fn from_confusion(domains: Vec<String>, confusion: Vec<Vec<usize>>) -> Result<Self> {
        if domains.len() != confusion.len() {
            return Err(Error::Validation("one confusion row per domain required".into()));
        }
        let k = confusion.first().map_or(0, Vec::len);
        if k == 0 || confusion.iter().any(|r| r.len() != k) {
            return Err(Error::Validation("confusion rows must share a positive width".into()));
        }
        let domain_cluster: Vec<usize> = confusion.iter().map(|r| argmax_lowest(r)).collect();
        let mut retained = domain_cluster.clone();
        retained.sort_unstable();
        retained.dedup();
        Ok(Self {
            domains,
            confusion,
            domain_cluster,
            retained,
        })
    }

    pub fn k(&self) -> usize {
        self.confusion[0].len()
    }

    pub fn cluster_of(&self, domain: &str) -> Option<usize> {
        self.domains.iter().position(|d| d == domain).map(|i| self.domain_cluster[i])
    }

    pub fn pruned(&self) -> Vec<usize> {
        (0..self.k()).filter(|c| !self.retained.contains(c)).collect()
    }

    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("domain");
        for c in 0..self.k() {
            s.push_str(&format!(",c{c}"));
        }
        s.push('\n');
        for (d, row) in self.domains.iter().zip(&self.confusion) {
            s.push_str(d);
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Each domain goes to the component most often holding the highest
/// responsibility for its samples; components no domain picks are pruned.
/// Ties go to the lowest component index.
pub fn assign_and_prune(gmm: &GmmModel, samples_by_domain: &[(String, Vec<Vec<f64>>)]) -> Result<Assignment> {
    let k = gmm.k();
    let mut confusion = Vec::with_capacity(samples_by_domain.len());
    for (name, rows) in samples_by_domain {
        if rows.is_empty() {
            return Err(Error::Data(format!("domain '{name}' has no samples to assign")));
        }
        let mut counts = vec![0usize; k];
        for r in gmm.responsibilities_many(rows)? {
            counts[argmax_lowest(&r)] += 1;
        }
        confusion.push(counts);
    }
    Assignment::from_confusion(samples_by_domain.iter().map(|(n, _)| n.clone()).collect(), confusion)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::gmm::GaussianComponent;

    fn model(means: &[f64]) -> GmmModel {
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

    #[test]
    fn separable_domains_are_bijective() {
        let g = model(&[0.0, 10.0]);
        let samples = vec![
            ("a".to_string(), vec![vec![0.1], vec![-0.3]]),
            ("b".to_string(), vec![vec![9.5], vec![10.2], vec![11.0]]),
        ];
        let a = assign_and_prune(&g, &samples).unwrap();
        assert_eq!(a.domain_cluster, vec![0, 1]);
        assert_eq!(a.retained, vec![0, 1]);
        assert!(a.pruned().is_empty());
        assert_eq!(a.confusion_csv(), "domain,c0,c1\na,2,0\nb,0,3\n");
    }

    #[test]
    fn degenerate_fit_keeps_one_component() {
        let g = model(&[0.0, 50.0, 100.0, 150.0]);
        let samples: Vec<(String, Vec<Vec<f64>>)> = ["x", "y", "z"]
            .iter()
            .map(|d| (d.to_string(), vec![vec![1.0], vec![-2.0]]))
            .collect();
        let a = assign_and_prune(&g, &samples).unwrap();
        assert_eq!(a.retained, vec![0]);
        assert_eq!(a.pruned(), vec![1, 2, 3]);
    }

    #[test]
    fn ties_go_to_lowest_component() {
        let a = Assignment::from_confusion(vec!["d".into()], vec![vec![0, 3, 3]]).unwrap();
        assert_eq!(a.domain_cluster, vec![1]);
        let g = model(&[-1.0, 1.0]);
        let a = assign_and_prune(&g, &[("m".into(), vec![vec![0.0]])]).unwrap();
        assert_eq!(a.domain_cluster, vec![0]);
    }

    #[test]
    fn thirty_domains_five_pruned() {
        let domains: Vec<String> = (0..30).map(|i| format!("site{i}")).collect();
        let confusion: Vec<Vec<usize>> = (0..30)
            .map(|d| {
                let mut row = vec![1; 30];
                row[d % 25] = 40;
                row
            })
            .collect();
        let a = Assignment::from_confusion(domains, confusion).unwrap();
        assert_eq!(a.retained.len(), 25);
        assert_eq!(a.pruned(), vec![25, 26, 27, 28, 29]);
    }

    #[test]
    fn empty_domain_is_rejected() {
        let g = model(&[0.0]);
        assert!(matches!(assign_and_prune(&g, &[("e".into(), vec![])]), Err(Error::Data(_))));
    }
}
