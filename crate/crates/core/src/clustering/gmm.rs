use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::linalg::{cholesky, chol_logdet, forward_sub, mean_and_cov, trace};
use crate::error::{Error, Result};

/// Weight below which a component counts as collapsed.
pub const COLLAPSE_WEIGHT: f64 = 1e-8;
const REG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major `p×p`.
    pub cov: Vec<f64>,
}

impl GaussianComponent {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        Ok(Factored::new(self)?.log_density(&self.mean, x))
    }
}

/// Cholesky factor and log-determinant of one covariance.
pub(crate) struct Factored {
    pub chol: Vec<f64>,
    pub logdet: f64,
    pub p: usize,
}

impl Factored {
    pub fn new(c: &GaussianComponent) -> Result<Self> {
        let p = c.dim();
        let chol = cholesky(&c.cov, p)?;
        let logdet = chol_logdet(&chol, p);
        Ok(Self { chol, logdet, p })
    }

    pub fn mahalanobis(&self, mean: &[f64], x: &[f64]) -> f64 {
        let mut d: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
        forward_sub(&self.chol, self.p, &mut d);
        d.iter().map(|v| v * v).sum()
    }

    pub fn log_density(&self, mean: &[f64], x: &[f64]) -> f64 {
        -0.5 * (self.p as f64 * (2.0 * PI).ln() + self.logdet + self.mahalanobis(mean, x))
    }

    /// `tr(Σ⁻¹)` as the squared Frobenius norm of `L⁻¹`.
    pub fn trace_inverse(&self) -> f64 {
        let mut total = 0.0;
        for j in 0..self.p {
            let mut e = vec![0.0; self.p];
            e[j] = 1.0;
            forward_sub(&self.chol, self.p, &mut e);
            total += e.iter().map(|v| v * v).sum::<f64>();
        }
        total
    }
}

/// Stable `log Σ exp`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Normalises log-weights into probabilities.
pub fn normalize_log(logs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logs);
    let mut p: Vec<f64> = logs.iter().map(|l| (l - lse).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub max_iter: usize,
    /// Stop once the per-sample objective improves by less than this.
    pub tol: f64,
    /// Covariance ridge as a fraction of the mean data variance.
    pub reg_scale: f64,
    pub seed: u64,
    pub n_init: usize,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-9,
            reg_scale: 1e-6,
            seed: 0,
            n_init: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub components: Vec<GaussianComponent>,
    pub dim: usize,
    /// Covariance ridge added at every M-step.
    pub reg: f64,
    /// Per-sample EM objective after each E-step of the kept restart.
    pub ll_trace: Vec<f64>,
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    fn factor(&self) -> Result<Vec<Factored>> {
        self.components.iter().map(Factored::new).collect()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension {
                op: "gmm",
                lhs: vec![x.len()],
                rhs: vec![self.dim],
            });
        }
        Ok(())
    }

    /// `log π_j + log N(x | μ_j, Σ_j)` for every component.
    pub fn log_joint(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let f = self.factor()?;
        Ok(self.log_joint_with(&f, x))
    }

    fn log_joint_with(&self, f: &[Factored], x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .zip(f)
            .map(|(c, fc)| c.weight.ln() + fc.log_density(&c.mean, x))
            .collect()
    }

    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(normalize_log(&self.log_joint(x)?))
    }

    pub fn responsibilities_many(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let f = self.factor()?;
        rows.iter()
            .map(|x| {
                self.check_dim(x)?;
                Ok(normalize_log(&self.log_joint_with(&f, x)))
            })
            .collect()
    }

    /// Mean log-likelihood per row.
    pub fn log_likelihood(&self, rows: &[Vec<f64>]) -> Result<f64> {
        let f = self.factor()?;
        let mut total = 0.0;
        for x in rows {
            self.check_dim(x)?;
            total += log_sum_exp(&self.log_joint_with(&f, x));
        }
        Ok(total / rows.len() as f64)
    }
}

pub fn responsibilities(gmm: &GmmModel, x: &[f64]) -> Result<Vec<f64>> {
    gmm.responsibilities(x)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn kmeans_pp<R: Rng>(rows: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centers = vec![rows[rng.random_range(0..rows.len())].clone()];
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = rows.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..rows.len())
        };
        centers.push(rows[idx].clone());
        for (d, r) in d2.iter_mut().zip(rows) {
            *d = d.min(sq_dist(r, &centers[centers.len() - 1]));
        }
    }
    centers
}

struct Restart {
    model: GmmModel,
    objective: f64,
}

/// Fits a full-covariance mixture by EM, keeping the best of `n_init`
/// k-means++ seeded restarts.
///
/// Each M-step sets `Σ_j = S_j + εI` with `ε = reg_scale · tr(S)/p` from the
/// data covariance `S`. That update exactly maximises the EM bound of
/// `Σ_i log Σ_j π_j N(x_i | μ_j, Σ_j) exp(-ε/2 · tr Σ_j⁻¹)`, which is the
/// objective recorded in the trace and is non-decreasing between reseeds.
pub fn gmm_fit(rows: &[Vec<f64>], k: usize, cfg: &GmmConfig) -> Result<GmmModel> {
    let n = rows.len();
    if k == 0 || n < k {
        return Err(Error::Config(format!("GMM needs 1 <= k <= n, got k={k}, n={n}")));
    }
    let p = rows[0].len();
    if p == 0 || rows.iter().any(|r| r.len() != p || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::Data("GMM rows must be finite and equally sized".into()));
    }
    if cfg.n_init == 0 || cfg.max_iter == 0 {
        return Err(Error::Config("n_init and max_iter must be positive".into()));
    }
    let (_, data_cov) = mean_and_cov(rows);
    let reg = (cfg.reg_scale * trace(&data_cov, p) / p as f64).max(REG_FLOOR);

    let mut best: Option<Restart> = None;
    let mut failures = Vec::new();
    for r in 0..cfg.n_init {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(r as u64));
        match em_restart(rows, k, p, reg, &data_cov, cfg, &mut rng) {
            Ok(run) => {
                if best.as_ref().is_none_or(|b| run.objective > b.objective) {
                    best = Some(run);
                }
            }
            Err(Error::Convergence(msg)) => failures.push(msg),
            Err(e) => return Err(e),
        }
    }
    best.map(|b| b.model).ok_or_else(|| {
        Error::Convergence(format!(
            "all {} restarts failed: {}",
            cfg.n_init,
            failures.join("; ")
        ))
    })
}

fn em_restart<R: Rng>(
    rows: &[Vec<f64>],
    k: usize,
    p: usize,
    reg: f64,
    data_cov: &[f64],
    cfg: &GmmConfig,
    rng: &mut R,
) -> Result<Restart> {
    let n = rows.len();
    let centers = kmeans_pp(rows, k, rng);
    let mut resp = vec![vec![0.0; k]; n];
    for (row, r) in rows.iter().zip(resp.iter_mut()) {
        let mut best = 0;
        for j in 1..k {
            if sq_dist(row, &centers[j]) < sq_dist(row, &centers[best]) {
                best = j;
            }
        }
        r[best] = 1.0;
    }
    let mut comps: Vec<GaussianComponent> = (0..k)
        .map(|j| GaussianComponent {
            weight: 1.0 / k as f64,
            mean: centers[j].clone(),
            cov: ridge(data_cov, p, reg),
        })
        .collect();
    let mut trace_ll = Vec::new();
    let mut reseeds = 0;
    let mut last_point_ll = vec![0.0f64; n];
    m_step(rows, &resp, &mut comps, p, reg);

    for iter in 0..=cfg.max_iter {
        if let Some(j) = comps.iter().position(|c| !(c.weight >= COLLAPSE_WEIGHT)) {
            reseeds += 1;
            if reseeds > 2 * k {
                return Err(Error::Convergence(format!("component {j} keeps collapsing")));
            }
            let worst = (0..n)
                .min_by(|&a, &b| last_point_ll[a].total_cmp(&last_point_ll[b]).then(a.cmp(&b)))
                .unwrap_or(0);
            comps[j].mean = rows[worst].clone();
            comps[j].cov = ridge(data_cov, p, reg);
            comps[j].weight = 1.0 / k as f64;
            let s: f64 = comps.iter().map(|c| c.weight).sum();
            comps.iter_mut().for_each(|c| c.weight /= s);
            trace_ll.clear();
        }

        let factors = comps.iter().map(Factored::new).collect::<Result<Vec<_>>>()?;
        let penalty: Vec<f64> = factors.iter().map(|f| 0.5 * reg * f.trace_inverse()).collect();
        let mut total = 0.0;
        for (i, x) in rows.iter().enumerate() {
            let logs: Vec<f64> = comps
                .iter()
                .zip(&factors)
                .zip(&penalty)
                .map(|((c, f), pen)| c.weight.ln() + f.log_density(&c.mean, x) - pen)
                .collect();
            let lse = log_sum_exp(&logs);
            last_point_ll[i] = lse;
            total += lse;
            for (r, l) in resp[i].iter_mut().zip(&logs) {
                *r = (l - lse).exp();
            }
        }
        let objective = total / n as f64;
        if !objective.is_finite() {
            return Err(Error::NonFinite("GMM objective".into()));
        }
        let converged = trace_ll.last().is_some_and(|prev: &f64| (objective - prev).abs() < cfg.tol);
        trace_ll.push(objective);
        if converged || iter == cfg.max_iter {
            break;
        }
        m_step(rows, &resp, &mut comps, p, reg);
    }
    let objective = *trace_ll.last().expect("at least one E-step");
    Ok(Restart {
        model: GmmModel {
            components: comps,
            dim: p,
            reg,
            ll_trace: trace_ll,
        },
        objective,
    })
}

fn ridge(cov: &[f64], p: usize, reg: f64) -> Vec<f64> {
    let mut c = cov.to_vec();
    for i in 0..p {
        c[i * p + i] += reg;
    }
    c
}

fn m_step(rows: &[Vec<f64>], resp: &[Vec<f64>], comps: &mut [GaussianComponent], p: usize, reg: f64) {
    let n = rows.len() as f64;
    for (j, c) in comps.iter_mut().enumerate() {
        let nk: f64 = resp.iter().map(|r| r[j]).sum();
        c.weight = nk / n;
        if c.weight < COLLAPSE_WEIGHT {
            continue;
        }
        let mut mean = vec![0.0; p];
        for (x, r) in rows.iter().zip(resp) {
            mean.iter_mut().zip(x).for_each(|(m, v)| *m += r[j] * v);
        }
        mean.iter_mut().for_each(|m| *m /= nk);
        let mut cov = vec![0.0; p * p];
        for (x, r) in rows.iter().zip(resp) {
            let w = r[j];
            if w == 0.0 {
                continue;
            }
            for a in 0..p {
                let da = w * (x[a] - mean[a]);
                for b in 0..=a {
                    cov[a * p + b] += da * (x[b] - mean[b]);
                }
            }
        }
        for a in 0..p {
            for b in 0..=a {
                let v = cov[a * p + b] / nk;
                cov[a * p + b] = v;
                cov[b * p + a] = v;
            }
            cov[a * p + a] += reg;
        }
        c.mean = mean;
        c.cov = cov;
    }
}
