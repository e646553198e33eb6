//! Empirical (or population) voltage statistics consumed by the learners.
//!
//! All estimators use divisor `m`, so variances are the biased maximum
//! likelihood form `Σ x²/m − μ²`. Pairwise statistics are either read off
//! precomputed covariance matrices (small networks) or computed on demand from
//! the centered samples and memoized.

use std::collections::HashMap;
use std::path::Path;
use std::sync::RwLock;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GridError, Result};
use crate::grid::NodeId;
use crate::lcpf::{AnalyticMoments, VoltageSamples};
use crate::par::Execution;

/// Networks up to this many observed nodes get dense pairwise matrices.
pub const DENSE_PAIR_LIMIT: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    /// Voltage magnitude deviation.
    Eps,
    /// Phase angle.
    Theta,
    /// Product of the ε and θ differences.
    Cross,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PairStrategy {
    #[default]
    Auto,
    Dense,
    Lazy,
}

enum Pairs {
    /// Covariances `C_εε`, `C_θθ`, `C_εθ` (entry `(i, j)` is `cov(ε_i, θ_j)`).
    Dense { eps: DMatrix<f64>, theta: Option<DMatrix<f64>>, eps_theta: Option<DMatrix<f64>> },
    Lazy {
        m: usize,
        eps: Vec<Vec<f64>>,
        theta: Option<Vec<Vec<f64>>>,
        cache: RwLock<HashMap<(Channel, usize, usize), f64>>,
    },
}

pub struct MomentSet {
    nodes: Vec<NodeId>,
    index: HashMap<NodeId, usize>,
    m: Option<usize>,
    mu_eps: Vec<f64>,
    mu_theta: Option<Vec<f64>>,
    var_eps: Vec<f64>,
    var_theta: Option<Vec<f64>>,
    /// `cov(ε_a, θ_a)`
    cov_eps_theta: Option<Vec<f64>>,
    pairs: Pairs,
}

impl std::fmt::Debug for MomentSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MomentSet")
            .field("nodes", &self.nodes.len())
            .field("m", &self.m)
            .field("has_theta", &self.has_theta())
            .finish()
    }
}

fn column(samples: &VoltageSamples, data: &[f64], col: usize) -> Vec<f64> {
    let n = samples.n_nodes();
    (0..samples.m).map(|j| data[j * n + col]).collect()
}

fn center(mut col: Vec<f64>) -> (f64, f64, Vec<f64>) {
    let m = col.len() as f64;
    let mean = col.iter().sum::<f64>() / m;
    let var = col.iter().map(|v| v * v).sum::<f64>() / m - mean * mean;
    for v in &mut col {
        *v -= mean;
    }
    (mean, var.max(0.0), col)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gram(a: &[Vec<f64>], b: &[Vec<f64>], m: usize, symmetric: bool, exec: Execution) -> DMatrix<f64> {
    let n = a.len();
    let rows = exec.map_range(n, |i| {
        let start = if symmetric { i } else { 0 };
        (start..n).map(|j| dot(&a[i], &b[j]) / m as f64).collect::<Vec<f64>>()
    });
    let mut out = DMatrix::zeros(n, n);
    for (i, row) in rows.into_iter().enumerate() {
        let start = if symmetric { i } else { 0 };
        for (k, v) in row.into_iter().enumerate() {
            let j = start + k;
            out[(i, j)] = v;
            if symmetric {
                out[(j, i)] = v;
            }
        }
    }
    out
}

impl MomentSet {
    /// Sample statistics over `observed` nodes.
    pub fn estimate(samples: &VoltageSamples, observed: &[NodeId], exec: Execution) -> Result<Self> {
        Self::estimate_with(samples, observed, PairStrategy::Auto, exec)
    }

    pub fn estimate_with(
        samples: &VoltageSamples,
        observed: &[NodeId],
        strategy: PairStrategy,
        exec: Execution,
    ) -> Result<Self> {
        if samples.m < 2 {
            return Err(GridError::TooFewSamples { needed: 2, got: samples.m });
        }
        let cols: Vec<usize> = observed
            .iter()
            .map(|id| samples.nodes.iter().position(|x| x == id).ok_or(GridError::UnobservedNode(*id)))
            .collect::<Result<_>>()?;
        let m = samples.m;

        let eps_stats = exec.map_slice(&cols, |&c| center(column(samples, &samples.eps, c)));
        let theta_stats = samples
            .theta
            .as_ref()
            .map(|t| exec.map_slice(&cols, |&c| center(column(samples, t, c))));

        let mu_eps = eps_stats.iter().map(|s| s.0).collect();
        let var_eps = eps_stats.iter().map(|s| s.1).collect();
        let eps_cols: Vec<Vec<f64>> = eps_stats.into_iter().map(|s| s.2).collect();
        let (mu_theta, var_theta, theta_cols) = match theta_stats {
            Some(ts) => {
                let mu: Vec<f64> = ts.iter().map(|s| s.0).collect();
                let var: Vec<f64> = ts.iter().map(|s| s.1).collect();
                let cols: Vec<Vec<f64>> = ts.into_iter().map(|s| s.2).collect();
                (Some(mu), Some(var), Some(cols))
            }
            None => (None, None, None),
        };
        let cov_eps_theta = theta_cols
            .as_ref()
            .map(|tc| eps_cols.iter().zip(tc).map(|(e, t)| dot(e, t) / m as f64).collect());

        let dense = match strategy {
            PairStrategy::Auto => observed.len() <= DENSE_PAIR_LIMIT,
            PairStrategy::Dense => true,
            PairStrategy::Lazy => false,
        };
        let pairs = if dense {
            let eps = gram(&eps_cols, &eps_cols, m, true, exec);
            let theta = theta_cols.as_ref().map(|tc| gram(tc, tc, m, true, exec));
            let eps_theta = theta_cols.as_ref().map(|tc| gram(&eps_cols, tc, m, false, exec));
            Pairs::Dense { eps, theta, eps_theta }
        } else {
            Pairs::Lazy { m, eps: eps_cols, theta: theta_cols, cache: RwLock::new(HashMap::new()) }
        };

        Ok(Self {
            nodes: observed.to_vec(),
            index: observed.iter().enumerate().map(|(i, &id)| (id, i)).collect(),
            m: Some(m),
            mu_eps,
            mu_theta,
            var_eps,
            var_theta,
            cov_eps_theta,
            pairs,
        })
    }

    /// Population moments restricted to `observed`.
    pub fn from_analytic(mom: &AnalyticMoments, observed: &[NodeId]) -> Result<Self> {
        let idx: Vec<usize> = observed
            .iter()
            .map(|id| mom.nodes.iter().position(|x| x == id).ok_or(GridError::UnknownNode(*id)))
            .collect::<Result<_>>()?;
        let n = idx.len();
        let sub = |mat: &DMatrix<f64>| DMatrix::from_fn(n, n, |i, j| mat[(idx[i], idx[j])]);
        let eps = sub(&mom.omega_eps);
        let theta = sub(&mom.omega_theta);
        let eps_theta = sub(&mom.omega_eps_theta);
        Ok(Self {
            nodes: observed.to_vec(),
            index: observed.iter().enumerate().map(|(i, &id)| (id, i)).collect(),
            m: None,
            mu_eps: idx.iter().map(|&i| mom.mu_eps[i]).collect(),
            mu_theta: Some(idx.iter().map(|&i| mom.mu_theta[i]).collect()),
            var_eps: (0..n).map(|i| eps[(i, i)]).collect(),
            var_theta: Some((0..n).map(|i| theta[(i, i)]).collect()),
            cov_eps_theta: Some((0..n).map(|i| eps_theta[(i, i)]).collect()),
            pairs: Pairs::Dense { eps, theta: Some(theta), eps_theta: Some(eps_theta) },
        })
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sample count, `None` for population moments.
    pub fn sample_count(&self) -> Option<usize> {
        self.m
    }

    pub fn has_theta(&self) -> bool {
        self.var_theta.is_some()
    }

    pub fn index_of(&self, id: NodeId) -> Result<usize> {
        self.index.get(&id).copied().ok_or(GridError::UnobservedNode(id))
    }

    pub fn mean_eps(&self) -> &[f64] {
        &self.mu_eps
    }

    pub fn mean_theta(&self) -> Option<&[f64]> {
        self.mu_theta.as_deref()
    }

    pub fn var_eps(&self, i: usize) -> f64 {
        self.var_eps[i]
    }

    /// Diagonal second moment: `var(ε_i)`, `var(θ_i)` or `cov(ε_i, θ_i)`. This
    /// is also the pairwise statistic between `i` and a substation.
    pub fn diag(&self, channel: Channel, i: usize) -> Result<f64> {
        match channel {
            Channel::Eps => Ok(self.var_eps[i]),
            Channel::Theta => self.var_theta.as_ref().map(|v| v[i]).ok_or(GridError::MissingPhaseChannel),
            Channel::Cross => self.cov_eps_theta.as_ref().map(|v| v[i]).ok_or(GridError::MissingPhaseChannel),
        }
    }

    /// Centered squared difference (or cross product) between two observed
    /// nodes by dense index.
    pub fn sqdiff_idx(&self, channel: Channel, i: usize, j: usize) -> Result<f64> {
        if i == j {
            return Ok(0.0);
        }
        match &self.pairs {
            Pairs::Dense { eps, theta, eps_theta } => Ok(match channel {
                Channel::Eps => eps[(i, i)] + eps[(j, j)] - 2.0 * eps[(i, j)],
                Channel::Theta => {
                    let t = theta.as_ref().ok_or(GridError::MissingPhaseChannel)?;
                    t[(i, i)] + t[(j, j)] - 2.0 * t[(i, j)]
                }
                Channel::Cross => {
                    let c = eps_theta.as_ref().ok_or(GridError::MissingPhaseChannel)?;
                    c[(i, i)] + c[(j, j)] - c[(i, j)] - c[(j, i)]
                }
            }),
            Pairs::Lazy { m, eps, theta, cache } => {
                let key = (channel, i.min(j), i.max(j));
                if let Some(&v) = cache.read().expect("moment cache poisoned").get(&key) {
                    return Ok(v);
                }
                let diff = |cols: &[Vec<f64>]| -> Vec<f64> { cols[i].iter().zip(&cols[j]).map(|(a, b)| a - b).collect() };
                let v = match channel {
                    Channel::Eps => {
                        let d = diff(eps);
                        dot(&d, &d)
                    }
                    Channel::Theta => {
                        let d = diff(theta.as_ref().ok_or(GridError::MissingPhaseChannel)?);
                        dot(&d, &d)
                    }
                    Channel::Cross => {
                        let dt = diff(theta.as_ref().ok_or(GridError::MissingPhaseChannel)?);
                        dot(&diff(eps), &dt)
                    }
                } / *m as f64;
                cache.write().expect("moment cache poisoned").insert(key, v);
                Ok(v)
            }
        }
    }

    pub fn sqdiff(&self, channel: Channel, a: NodeId, b: NodeId) -> Result<f64> {
        let (i, j) = (self.index_of(a)?, self.index_of(b)?);
        self.sqdiff_idx(channel, i, j)
    }

    /// Covariance `cov(ε_i, ε_j)` (or θ, or `cov(ε_i, θ_j)` for `Cross`).
    pub fn cov_idx(&self, channel: Channel, i: usize, j: usize) -> Result<f64> {
        match &self.pairs {
            Pairs::Dense { eps, theta, eps_theta } => match channel {
                Channel::Eps => Ok(eps[(i, j)]),
                Channel::Theta => theta.as_ref().map(|t| t[(i, j)]).ok_or(GridError::MissingPhaseChannel),
                Channel::Cross => eps_theta.as_ref().map(|t| t[(i, j)]).ok_or(GridError::MissingPhaseChannel),
            },
            Pairs::Lazy { m, eps, theta, .. } => {
                let t = || theta.as_ref().ok_or(GridError::MissingPhaseChannel);
                let v = match channel {
                    Channel::Eps => dot(&eps[i], &eps[j]),
                    Channel::Theta => dot(&t()?[i], &t()?[j]),
                    Channel::Cross => dot(&eps[i], &t()?[j]),
                };
                Ok(v / *m as f64)
            }
        }
    }

    pub fn dump(&self) -> MomentDump {
        MomentDump {
            nodes: self.nodes.clone(),
            m: self.m,
            mu_eps: self.mu_eps.clone(),
            mu_theta: self.mu_theta.clone(),
            var_eps: self.var_eps.clone(),
            var_theta: self.var_theta.clone(),
            cov_eps_theta: self.cov_eps_theta.clone(),
        }
    }
}

/// Per-node summary written by the `moments` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentDump {
    pub nodes: Vec<NodeId>,
    pub m: Option<usize>,
    pub mu_eps: Vec<f64>,
    pub mu_theta: Option<Vec<f64>>,
    pub var_eps: Vec<f64>,
    pub var_theta: Option<Vec<f64>>,
    pub cov_eps_theta: Option<Vec<f64>>,
}

impl MomentDump {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
