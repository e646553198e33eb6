//! Linear-coupled power flow on a radial forest.
//!
//! With `Hr = H⁻¹_{1/r}` and `Hx = H⁻¹_{1/x}` the path-sum inverses of the
//! reduced Laplacians,
//!
//! ```text
//! θ = Hx·p − Hr·q        ε = Hr·p + Hx·q
//! ```
//!
//! Substations are the reference (zero deviation) and carry no rows.

use std::ops::{Add, AddAssign, Sub};
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{GridError, Result};
use crate::grid::{Impedance, NodeId, RadialForest, Upstream, Weight};
use crate::moments::Channel;
use crate::par::Execution;

/// Per-node draw distribution for the sampler. The learners never rely on it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    #[default]
    Gaussian,
    /// Independent uniforms scaled to unit variance, then correlated.
    Uniform,
}

/// Nodal injection statistics with diagonal covariance blocks.
///
/// Stored as parallel arrays keyed by `node_ids`; this is also the JSON layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionModel {
    pub node_ids: Vec<NodeId>,
    pub mu_p: Vec<f64>,
    pub mu_q: Vec<f64>,
    pub var_p: Vec<f64>,
    pub var_q: Vec<f64>,
    pub cov_pq: Vec<f64>,
    #[serde(default)]
    pub distribution: SamplerKind,
}

/// Covariance of one node's `(p, q)` pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CovTriple {
    pub var_p: f64,
    pub var_q: f64,
    pub cov_pq: f64,
}

impl Add for CovTriple {
    type Output = CovTriple;
    fn add(self, o: CovTriple) -> CovTriple {
        CovTriple { var_p: self.var_p + o.var_p, var_q: self.var_q + o.var_q, cov_pq: self.cov_pq + o.cov_pq }
    }
}

impl AddAssign for CovTriple {
    fn add_assign(&mut self, o: CovTriple) {
        *self = *self + o;
    }
}

impl Sub for CovTriple {
    type Output = CovTriple;
    fn sub(self, o: CovTriple) -> CovTriple {
        CovTriple { var_p: self.var_p - o.var_p, var_q: self.var_q - o.var_q, cov_pq: self.cov_pq - o.cov_pq }
    }
}

impl InjectionModel {
    pub fn zeros(node_ids: Vec<NodeId>) -> Self {
        let n = node_ids.len();
        Self {
            node_ids,
            mu_p: vec![0.0; n],
            mu_q: vec![0.0; n],
            var_p: vec![0.0; n],
            var_q: vec![0.0; n],
            cov_pq: vec![0.0; n],
            distribution: SamplerKind::Gaussian,
        }
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    pub fn position(&self, id: NodeId) -> Option<usize> {
        self.node_ids.iter().position(|&n| n == id)
    }

    pub fn cov(&self, i: usize) -> CovTriple {
        CovTriple { var_p: self.var_p[i], var_q: self.var_q[i], cov_pq: self.cov_pq[i] }
    }

    pub fn cov_of(&self, id: NodeId) -> Option<CovTriple> {
        self.position(id).map(|i| self.cov(i))
    }

    fn check_lengths(&self) -> Result<()> {
        let n = self.node_ids.len();
        for len in [self.mu_p.len(), self.mu_q.len(), self.var_p.len(), self.var_q.len(), self.cov_pq.len()] {
            if len != n {
                return Err(GridError::DimensionMismatch { expected: n, got: len });
            }
        }
        Ok(())
    }

    /// Non-negative variances and `cov_pq² ≤ var_p·var_q`.
    pub fn check_covariances(&self) -> Result<()> {
        self.check_lengths()?;
        for i in 0..self.len() {
            let node = self.node_ids[i];
            let (vp, vq, c) = (self.var_p[i], self.var_q[i], self.cov_pq[i]);
            if !(vp >= 0.0 && vq >= 0.0) {
                return Err(GridError::InvalidCovariance { node, reason: format!("negative variance ({vp}, {vq})") });
            }
            if c * c > vp * vq * (1.0 + 1e-12) {
                return Err(GridError::InvalidCovariance {
                    node,
                    reason: format!("|cov_pq| = {} exceeds sqrt(var_p var_q) = {}", c.abs(), (vp * vq).sqrt()),
                });
            }
        }
        Ok(())
    }

    /// Strictly positive variances and active/reactive covariance, plus
    /// Cauchy–Schwarz.
    pub fn check_positive_correlation(&self) -> Result<()> {
        self.check_covariances()?;
        for i in 0..self.len() {
            if !(self.var_p[i] > 0.0 && self.var_q[i] > 0.0 && self.cov_pq[i] > 0.0) {
                return Err(GridError::InvalidCovariance {
                    node: self.node_ids[i],
                    reason: "variances and cov_pq must be strictly positive".into(),
                });
            }
        }
        Ok(())
    }

    /// Reorders to `order`; every id in `order` must be present.
    pub fn reindexed(&self, order: &[NodeId]) -> Result<Self> {
        self.check_lengths()?;
        let pos: std::collections::HashMap<NodeId, usize> =
            self.node_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let idx: Vec<usize> =
            order.iter().map(|id| pos.get(id).copied().ok_or(GridError::UnknownNode(*id))).collect::<Result<_>>()?;
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        Ok(Self {
            node_ids: order.to_vec(),
            mu_p: pick(&self.mu_p),
            mu_q: pick(&self.mu_q),
            var_p: pick(&self.var_p),
            var_q: pick(&self.var_q),
            cov_pq: pick(&self.cov_pq),
            distribution: self.distribution,
        })
    }

    fn aligned(&self, forest: &RadialForest) -> Result<std::borrow::Cow<'_, Self>> {
        if self.node_ids == forest.loads() {
            self.check_lengths()?;
            Ok(std::borrow::Cow::Borrowed(self))
        } else {
            if self.len() != forest.n_loads() {
                return Err(GridError::DimensionMismatch { expected: forest.n_loads(), got: self.len() });
            }
            Ok(std::borrow::Cow::Owned(self.reindexed(forest.loads())?))
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// `m` joint observations of `(ε, θ)` at a set of nodes, row-major by sample.
#[derive(Clone, Debug, PartialEq)]
pub struct VoltageSamples {
    pub nodes: Vec<NodeId>,
    pub m: usize,
    pub eps: Vec<f64>,
    pub theta: Option<Vec<f64>>,
}

impl VoltageSamples {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn eps_at(&self, sample: usize, node: usize) -> f64 {
        self.eps[sample * self.nodes.len() + node]
    }

    pub fn theta_at(&self, sample: usize, node: usize) -> Option<f64> {
        self.theta.as_ref().map(|t| t[sample * self.nodes.len() + node])
    }

    /// Keeps only the listed nodes (in the given order).
    pub fn restrict(&self, keep: &[NodeId]) -> Result<Self> {
        let n = self.nodes.len();
        let cols: Vec<usize> = keep
            .iter()
            .map(|id| self.nodes.iter().position(|x| x == id).ok_or(GridError::UnobservedNode(*id)))
            .collect::<Result<_>>()?;
        let pick = |v: &Vec<f64>| {
            let mut out = Vec::with_capacity(self.m * cols.len());
            for j in 0..self.m {
                out.extend(cols.iter().map(|&c| v[j * n + c]));
            }
            out
        };
        Ok(Self { nodes: keep.to_vec(), m: self.m, eps: pick(&self.eps), theta: self.theta.as_ref().map(pick) })
    }

    pub fn without_theta(mut self) -> Self {
        self.theta = None;
        self
    }
}

/// Exact means and covariance matrices of `(θ, ε)` over load nodes in
/// forest order.
#[derive(Clone, Debug)]
pub struct AnalyticMoments {
    pub nodes: Vec<NodeId>,
    pub mu_theta: Vec<f64>,
    pub mu_eps: Vec<f64>,
    pub omega_theta: DMatrix<f64>,
    pub omega_eps: DMatrix<f64>,
    /// `E[(θ−μθ)(ε−με)ᵀ]`
    pub omega_theta_eps: DMatrix<f64>,
    /// `E[(ε−με)(θ−μθ)ᵀ]`, the transpose of `omega_theta_eps`.
    pub omega_eps_theta: DMatrix<f64>,
}

/// Reusable scratch space for repeated solves on one forest.
struct Sweep {
    flow_p: Vec<f64>,
    flow_q: Vec<f64>,
}

impl Sweep {
    fn new(n: usize) -> Self {
        Self { flow_p: vec![0.0; n], flow_q: vec![0.0; n] }
    }

    /// Upward sweep accumulates subtree injections on each edge; downward sweep
    /// adds the edge drops from the substation out.
    fn run(&mut self, forest: &RadialForest, p: &[f64], q: &[f64], theta: &mut [f64], eps: &mut [f64]) {
        self.flow_p.copy_from_slice(p);
        self.flow_q.copy_from_slice(q);
        for i in forest.postorder() {
            if let Upstream::Load(parent) = forest.upstream(i) {
                self.flow_p[parent] += self.flow_p[i];
                self.flow_q[parent] += self.flow_q[i];
            }
        }
        for &i in forest.topological_order() {
            let z = forest.impedance(i);
            let (fp, fq) = (self.flow_p[i], self.flow_q[i]);
            let (t0, e0) = match forest.upstream(i) {
                Upstream::Load(parent) => (theta[parent], eps[parent]),
                Upstream::Slack(_) => (0.0, 0.0),
            };
            theta[i] = t0 + z.x * fp - z.r * fq;
            eps[i] = e0 + z.r * fp + z.x * fq;
        }
    }
}

/// Solves the LC-PF for load-indexed injections; returns `(θ, ε)`.
pub fn solve_lcpf(forest: &RadialForest, p: &[f64], q: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = forest.n_loads();
    for len in [p.len(), q.len()] {
        if len != n {
            return Err(GridError::DimensionMismatch { expected: n, got: len });
        }
    }
    let mut theta = vec![0.0; n];
    let mut eps = vec![0.0; n];
    Sweep::new(n).run(forest, p, q, &mut theta, &mut eps);
    Ok((theta, eps))
}

/// Inverts the LC-PF: recovers `(p, q)` from `(θ, ε)` edge by edge.
///
/// Across edge `(a, parent)` the drops are `Δε = r·Fp + x·Fq` and
/// `Δθ = x·Fp − r·Fq`, with `F` the subtree injection; each 2×2 system has
/// determinant `−(r² + x²)` and is always solvable.
pub fn invert_lcpf(forest: &RadialForest, theta: &[f64], eps: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = forest.n_loads();
    for len in [theta.len(), eps.len()] {
        if len != n {
            return Err(GridError::DimensionMismatch { expected: n, got: len });
        }
    }
    let mut flow_p = vec![0.0; n];
    let mut flow_q = vec![0.0; n];
    for i in 0..n {
        let (t0, e0) = match forest.upstream(i) {
            Upstream::Load(parent) => (theta[parent], eps[parent]),
            Upstream::Slack(_) => (0.0, 0.0),
        };
        let (dt, de) = (theta[i] - t0, eps[i] - e0);
        let z = forest.impedance(i);
        let norm = z.r * z.r + z.x * z.x;
        flow_p[i] = (z.r * de + z.x * dt) / norm;
        flow_q[i] = (z.x * de - z.r * dt) / norm;
    }
    let mut p = flow_p.clone();
    let mut q = flow_q.clone();
    for i in 0..n {
        if let Upstream::Load(parent) = forest.upstream(i) {
            p[parent] -= flow_p[i];
            q[parent] -= flow_q[i];
        }
    }
    Ok((p, q))
}

/// Means and covariances of `(θ, ε)` implied by the injection model.
pub fn analytic_moments(forest: &RadialForest, inj: &InjectionModel) -> Result<AnalyticMoments> {
    let inj = inj.aligned(forest)?;
    inj.check_covariances()?;
    let (mu_theta, mu_eps) = solve_lcpf(forest, &inj.mu_p, &inj.mu_q)?;

    let hr = forest.h_inverse_dense(Weight::Resistance);
    let hx = forest.h_inverse_dense(Weight::Reactance);
    let scale = |h: &DMatrix<f64>, d: &[f64]| {
        let mut out = h.clone();
        for (j, &w) in d.iter().enumerate() {
            out.column_mut(j).scale_mut(w);
        }
        out
    };
    // H·D·Hᵀ with H symmetric
    let hr_p = scale(&hr, &inj.var_p);
    let hx_p = scale(&hx, &inj.var_p);
    let hr_q = scale(&hr, &inj.var_q);
    let hx_q = scale(&hx, &inj.var_q);
    let hr_pq = scale(&hr, &inj.cov_pq);
    let hx_pq = scale(&hx, &inj.cov_pq);

    let omega_eps = &hr_p * &hr + &hx_q * &hx + &hr_pq * &hx + &hx_pq * &hr;
    let omega_theta = &hx_p * &hx + &hr_q * &hr - &hx_pq * &hr - &hr_pq * &hx;
    let omega_theta_eps = &hx_p * &hr - &hr_q * &hx + &hx_pq * &hx - &hr_pq * &hr;
    let omega_eps_theta = omega_theta_eps.transpose();

    Ok(AnalyticMoments {
        nodes: forest.loads().to_vec(),
        mu_theta,
        mu_eps,
        omega_theta,
        omega_eps,
        omega_theta_eps,
        omega_eps_theta,
    })
}

/// Second moments of the centered differences across one edge whose
/// child-side subtree carries the summed injection covariances `sums`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeMoments {
    /// `E[(Δε)²] = r²·Σp + x²·Σq + 2rx·Σpq`
    pub eps: f64,
    /// `E[(Δθ)²] = x²·Σp + r²·Σq − 2rx·Σpq`
    pub theta: f64,
    /// `E[Δε·Δθ] = rx·(Σp − Σq) + (x² − r²)·Σpq`
    pub cross: f64,
}

impl EdgeMoments {
    pub fn get(&self, channel: Channel) -> f64 {
        match channel {
            Channel::Eps => self.eps,
            Channel::Theta => self.theta,
            Channel::Cross => self.cross,
        }
    }
}

pub fn parent_edge_moments(z: Impedance, sums: CovTriple) -> EdgeMoments {
    let (r, x) = (z.r, z.x);
    EdgeMoments {
        eps: r * r * sums.var_p + x * x * sums.var_q + 2.0 * r * x * sums.cov_pq,
        theta: x * x * sums.var_p + r * r * sums.var_q - 2.0 * r * x * sums.cov_pq,
        cross: r * x * (sums.var_p - sums.var_q) + (x * x - r * r) * sums.cov_pq,
    }
}

/// Expected centered squared difference between two load nodes of one tree,
/// summed over every injection in the tree:
/// `Σ_c ΔHr(c)²·Ωp + ΔHx(c)²·Ωq + 2·ΔHr·ΔHx·Ωpq` for the ε channel, where
/// `ΔH(c) = H⁻¹(a,c) − H⁻¹(b,c)`.
pub fn pairwise_sqdiff_analytic(
    forest: &RadialForest,
    inj: &InjectionModel,
    a: NodeId,
    b: NodeId,
    channel: Channel,
) -> Result<f64> {
    if a == b {
        return Err(GridError::SameNode(a));
    }
    let (ia, ib) = (forest.index_of(a)?, forest.index_of(b)?);
    if forest.tree_of(ia) != forest.tree_of(ib) {
        return Err(GridError::DifferentTrees(a, b));
    }
    let inj = inj.aligned(forest)?;
    let tree = forest.tree_of(ia);
    let mut total = 0.0;
    for c in (0..forest.n_loads()).filter(|&c| forest.tree_of(c) == tree) {
        let dr = forest.h_inverse_at(Weight::Resistance, ia, c) - forest.h_inverse_at(Weight::Resistance, ib, c);
        let dx = forest.h_inverse_at(Weight::Reactance, ia, c) - forest.h_inverse_at(Weight::Reactance, ib, c);
        let (vp, vq, cpq) = (inj.var_p[c], inj.var_q[c], inj.cov_pq[c]);
        total += match channel {
            Channel::Eps => dr * dr * vp + dx * dx * vq + 2.0 * dr * dx * cpq,
            Channel::Theta => dx * dx * vp + dr * dr * vq - 2.0 * dr * dx * cpq,
            Channel::Cross => dr * dx * (vp - vq) + (dx * dx - dr * dr) * cpq,
        };
    }
    Ok(total)
}

/// Closed form of the pairwise statistic across the edge from `a` to its parent
/// (a load or the substation): only `a`'s subtree contributes.
pub fn parent_sqdiff_closed_form(
    forest: &RadialForest,
    inj: &InjectionModel,
    a: NodeId,
    channel: Channel,
) -> Result<f64> {
    let ia = forest.index_of(a)?;
    let inj = inj.aligned(forest)?;
    let sums = forest.descendants(ia).into_iter().fold(CovTriple::default(), |acc, c| acc + inj.cov(c));
    Ok(parent_edge_moments(forest.impedance(ia), sums).get(channel))
}

const SAMPLE_CHUNK: usize = 2048;

/// Draws `m` i.i.d. injection vectors and solves the LC-PF for each.
///
/// Samples are generated in fixed chunks, each with its own ChaCha stream
/// keyed by `(seed, chunk)`, so output is identical under every [`Execution`].
pub fn sample_voltages(
    forest: &RadialForest,
    inj: &InjectionModel,
    m: usize,
    seed: u64,
    exec: Execution,
) -> Result<VoltageSamples> {
    if m == 0 {
        return Err(GridError::TooFewSamples { needed: 1, got: 0 });
    }
    let inj = inj.aligned(forest)?;
    inj.check_covariances()?;
    let n = forest.n_loads();
    // 2×2 Cholesky factor per node
    let chol: Vec<(f64, f64, f64)> = (0..n)
        .map(|i| {
            let l11 = inj.var_p[i].sqrt();
            let l21 = if l11 > 0.0 { inj.cov_pq[i] / l11 } else { 0.0 };
            let l22 = (inj.var_q[i] - l21 * l21).max(0.0).sqrt();
            (l11, l21, l22)
        })
        .collect();
    let kind = inj.distribution;
    let n_chunks = m.div_ceil(SAMPLE_CHUNK);

    let chunks = exec.map_range(n_chunks, |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        let uniform = Uniform::new_inclusive(-(3.0f64.sqrt()), 3.0f64.sqrt()).expect("finite bounds");
        let rows = SAMPLE_CHUNK.min(m - c * SAMPLE_CHUNK);
        let mut eps = vec![0.0; rows * n];
        let mut theta = vec![0.0; rows * n];
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        let mut sweep = Sweep::new(n);
        for j in 0..rows {
            for i in 0..n {
                let (z1, z2): (f64, f64) = match kind {
                    SamplerKind::Gaussian => (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)),
                    SamplerKind::Uniform => (uniform.sample(&mut rng), uniform.sample(&mut rng)),
                };
                let (l11, l21, l22) = chol[i];
                p[i] = inj.mu_p[i] + l11 * z1;
                q[i] = inj.mu_q[i] + l21 * z1 + l22 * z2;
            }
            sweep.run(forest, &p, &q, &mut theta[j * n..(j + 1) * n], &mut eps[j * n..(j + 1) * n]);
        }
        (eps, theta)
    });

    let mut eps = Vec::with_capacity(m * n);
    let mut theta = Vec::with_capacity(m * n);
    for (e, t) in chunks {
        eps.extend_from_slice(&e);
        theta.extend_from_slice(&t);
    }
    Ok(VoltageSamples { nodes: forest.loads().to_vec(), m, eps, theta: Some(theta) })
}
