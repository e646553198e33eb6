//! Spanning-forest recovery from voltage-magnitude statistics, followed by
//! leaf-upward estimation of nodal injection statistics.
//!
//! Structure: nodes are visited in decreasing `var(ε)`. A visited node waits in
//! the leaf set until some later node `b*` is the minimiser of the centered
//! squared difference over the still-unvisited set, at which point `b*` becomes
//! its parent. Substation children are declared up front and attached last.
//!
//! Statistics: for each edge, children first, the three edge moments
//! `(E[Δε²], E[Δθ²], E[ΔεΔθ])` are linear in the subtree sums of
//! `(Ωp, Ωq, Ωpq)`; subtracting the already-solved descendant sums leaves the
//! node's own triple.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{GridError, Result};
use crate::grid::{Impedance, LineCatalog, NodeId, RadialForest, Upstream, Weight};
use crate::lcpf::{invert_lcpf, CovTriple, InjectionModel, SamplerKind};
use crate::moments::{Channel, MomentSet};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StructureConfig {
    /// Relative gap under which two candidates count as tied.
    pub tie_rel_tol: f64,
    /// Fail on nodes left without a parent instead of returning them.
    pub strict: bool,
}

impl Default for StructureConfig {
    fn default() -> Self {
        Self { tie_rel_tol: 1e-9, strict: true }
    }
}

/// Learned child → parent links; parents are loads or substations.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub slacks: Vec<NodeId>,
    pub parent: BTreeMap<NodeId, NodeId>,
}

impl Topology {
    pub fn from_forest(forest: &RadialForest) -> Self {
        Self {
            slacks: forest.slacks().to_vec(),
            parent: forest.edges().into_iter().map(|(c, p, _)| (c, p)).collect(),
        }
    }

    fn undirected(&self) -> BTreeSet<(NodeId, NodeId)> {
        self.parent.iter().map(|(&c, &p)| if c < p { (c, p) } else { (p, c) }).collect()
    }

    /// Fraction of `truth`'s edges missing here.
    pub fn structural_error(&self, truth: &Topology) -> f64 {
        let want = truth.undirected();
        if want.is_empty() {
            return 0.0;
        }
        let got = self.undirected();
        want.difference(&got).count() as f64 / want.len() as f64
    }

    /// Attaches impedances from `catalog`; every learned edge must be a known line.
    pub fn with_impedances(&self, catalog: &LineCatalog) -> Result<RadialForest> {
        let loads: Vec<NodeId> = self.parent.keys().copied().collect();
        let edges = self
            .parent
            .iter()
            .map(|(&c, &p)| catalog.get(c, p).map(|z| (c, p, z)).ok_or(GridError::MissingLine(c, p)))
            .collect::<Result<Vec<_>>>()?;
        RadialForest::from_parent_edges(&self.slacks, &loads, &edges)
    }

    pub fn with_edge_impedances(&self, z: &BTreeMap<NodeId, Impedance>) -> Result<RadialForest> {
        let loads: Vec<NodeId> = self.parent.keys().copied().collect();
        let edges = self
            .parent
            .iter()
            .map(|(&c, &p)| z.get(&c).map(|&z| (c, p, z)).ok_or(GridError::MissingLine(c, p)))
            .collect::<Result<Vec<_>>>()?;
        RadialForest::from_parent_edges(&self.slacks, &loads, &edges)
    }
}

/// Why a parent was chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeSelection {
    pub child: NodeId,
    pub parent: NodeId,
    /// Winning pairwise statistic; `None` for declared substation links.
    pub best: Option<f64>,
    pub runner_up: Option<f64>,
    /// `(runner_up − best) / best`
    pub margin: Option<f64>,
    /// Winner and runner-up within the tie tolerance; the lower node id won.
    pub ambiguous: bool,
}

#[derive(Clone, Debug)]
pub struct StructureOutcome {
    pub topology: Topology,
    pub selections: Vec<EdgeSelection>,
    /// Visits where two variances tied within tolerance.
    pub variance_ties: usize,
    /// Nodes left without a parent (only in non-strict mode).
    pub unattached: Vec<NodeId>,
}

/// Maps declared substation children to momset indices.
pub(crate) fn declared_roots(
    momset: &MomentSet,
    substation_children: &BTreeMap<NodeId, Vec<NodeId>>,
) -> Result<(HashMap<usize, NodeId>, Vec<NodeId>)> {
    let mut roots = HashMap::new();
    for (&slack, children) in substation_children {
        for &c in children {
            roots.insert(momset.index_of(c)?, slack);
        }
    }
    Ok((roots, substation_children.keys().copied().collect()))
}

/// Visit order: decreasing `var(ε)`, ties to the lower node id.
pub(crate) fn visit_order(momset: &MomentSet, tie_rel_tol: f64) -> (Vec<usize>, usize) {
    let nodes = momset.nodes();
    let mut order: Vec<usize> = (0..momset.len()).collect();
    order.sort_by(|&i, &j| {
        momset.var_eps(j).total_cmp(&momset.var_eps(i)).then_with(|| nodes[i].cmp(&nodes[j]))
    });
    let ties = order
        .windows(2)
        .filter(|w| {
            let (a, b) = (momset.var_eps(w[0]), momset.var_eps(w[1]));
            (a - b).abs() <= tie_rel_tol * a.abs().max(b.abs())
        })
        .count();
    (order, ties)
}

/// Minimiser of the ε squared difference from `a` over the unvisited set,
/// with the runner-up value. Ties go to the lower node id.
pub(crate) fn argmin_unvisited(
    momset: &MomentSet,
    a: usize,
    unvisited: &BTreeSet<usize>,
) -> Result<Option<(usize, f64, Option<f64>)>> {
    let nodes = momset.nodes();
    let mut best: Option<(usize, f64)> = None;
    let mut second: Option<f64> = None;
    for &c in unvisited {
        let v = momset.sqdiff_idx(Channel::Eps, a, c)?;
        match best {
            None => best = Some((c, v)),
            Some((bc, bv)) => {
                if v < bv || (v == bv && nodes[c] < nodes[bc]) {
                    second = Some(bv);
                    best = Some((c, v));
                } else if second.is_none_or(|s| v < s) {
                    second = Some(v);
                }
            }
        }
    }
    Ok(best.map(|(c, v)| (c, v, second)))
}

pub(crate) fn selection(
    momset: &MomentSet,
    child: usize,
    parent: NodeId,
    best: f64,
    runner_up: Option<f64>,
    tol: f64,
) -> EdgeSelection {
    let margin = runner_up.map(|s| if best > 0.0 { (s - best) / best } else { f64::INFINITY });
    EdgeSelection {
        child: momset.nodes()[child],
        parent,
        best: Some(best),
        runner_up,
        margin,
        ambiguous: runner_up.is_some_and(|s| (s - best).abs() <= tol * best.abs().max(s.abs())),
    }
}

/// Recovers the operational forest from voltage-magnitude statistics alone.
pub fn learn_structure(
    momset: &MomentSet,
    substation_children: &BTreeMap<NodeId, Vec<NodeId>>,
    cfg: &StructureConfig,
) -> Result<StructureOutcome> {
    let (roots, slacks) = declared_roots(momset, substation_children)?;
    let (order, variance_ties) = visit_order(momset, cfg.tie_rel_tol);
    let nodes = momset.nodes();

    let mut unvisited: BTreeSet<usize> = (0..momset.len()).collect();
    let mut leaves: Vec<usize> = Vec::new();
    let mut parent = BTreeMap::new();
    let mut selections = Vec::new();

    for &b in &order {
        let mut still_waiting = Vec::with_capacity(leaves.len());
        for &a in &leaves {
            if roots.contains_key(&a) {
                still_waiting.push(a);
                continue;
            }
            match argmin_unvisited(momset, a, &unvisited)? {
                Some((c, best, runner_up)) if c == b => {
                    parent.insert(nodes[a], nodes[b]);
                    selections.push(selection(momset, a, nodes[b], best, runner_up, cfg.tie_rel_tol));
                }
                _ => still_waiting.push(a),
            }
        }
        leaves = still_waiting;
        unvisited.remove(&b);
        leaves.push(b);
    }

    let mut unattached = Vec::new();
    for a in leaves {
        match roots.get(&a) {
            Some(&slack) => {
                parent.insert(nodes[a], slack);
                selections.push(EdgeSelection {
                    child: nodes[a],
                    parent: slack,
                    best: None,
                    runner_up: None,
                    margin: None,
                    ambiguous: false,
                });
            }
            None => unattached.push(nodes[a]),
        }
    }
    unattached.sort();
    if cfg.strict && !unattached.is_empty() {
        return Err(GridError::IncompleteCover { unattached });
    }
    Ok(StructureOutcome { topology: Topology { slacks, parent }, selections, variance_ties, unattached })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimationConfig {
    /// Solved variances below this are reported at the floor.
    pub var_floor: f64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self { var_floor: 0.0 }
    }
}

#[derive(Clone, Debug)]
pub struct InjectionEstimate {
    /// Reported statistics, variances clamped at the floor.
    pub model: InjectionModel,
    /// Raw solved triples in `model.node_ids` order.
    pub unclamped: Vec<CovTriple>,
    pub clamped: Vec<NodeId>,
}

/// Solves the three edge-moment equations for the subtree sums.
///
/// The system is `[[r², x², 2rx], [x², r², −2rx], [rx, −rx, x²−r²]]·S = (A, B, C)`.
/// Its determinant is `−(r² + x²)³`, so it is regular for any positive line.
pub fn solve_edge_system(child: NodeId, parent: NodeId, z: Impedance, a: f64, b: f64, c: f64) -> Result<CovTriple> {
    let (r, x) = (z.r, z.x);
    let m = Matrix3::new(r * r, x * x, 2.0 * r * x, x * x, r * r, -2.0 * r * x, r * x, -r * x, x * x - r * r);
    let scale = (r * r + x * x).powi(3);
    let det = m.determinant();
    if det.is_nan() || det.abs() <= 1e-12 * scale || scale == 0.0 {
        return Err(GridError::SingularSystem { child, parent, sum_identifiable: (a + b) / (r * r + x * x) });
    }
    let s = m
        .lu()
        .solve(&Vector3::new(a, b, c))
        .ok_or(GridError::SingularSystem { child, parent, sum_identifiable: (a + b) / (r * r + x * x) })?;
    Ok(CovTriple { var_p: s[0], var_q: s[1], cov_pq: s[2] })
}

fn momset_positions(momset: &MomentSet, forest: &RadialForest) -> Result<Vec<usize>> {
    forest.loads().iter().map(|&id| momset.index_of(id)).collect()
}

/// Edge moments `(A, B, C)` between load index `i` and its parent.
fn edge_statistics(momset: &MomentSet, forest: &RadialForest, pos: &[usize], i: usize) -> Result<(f64, f64, f64)> {
    let a = pos[i];
    Ok(match forest.upstream(i) {
        Upstream::Load(p) => {
            let b = pos[p];
            (
                momset.sqdiff_idx(Channel::Eps, a, b)?,
                momset.sqdiff_idx(Channel::Theta, a, b)?,
                momset.sqdiff_idx(Channel::Cross, a, b)?,
            )
        }
        Upstream::Slack(_) => {
            (momset.diag(Channel::Eps, a)?, momset.diag(Channel::Theta, a)?, momset.diag(Channel::Cross, a)?)
        }
    })
}

fn recover_means(momset: &MomentSet, forest: &RadialForest, pos: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mu_theta_all = momset.mean_theta().ok_or(GridError::MissingPhaseChannel)?;
    let mu_eps: Vec<f64> = pos.iter().map(|&k| momset.mean_eps()[k]).collect();
    let mu_theta: Vec<f64> = pos.iter().map(|&k| mu_theta_all[k]).collect();
    invert_lcpf(forest, &mu_theta, &mu_eps)
}

fn finish(forest: &RadialForest, raw: Vec<CovTriple>, mu: (Vec<f64>, Vec<f64>), cfg: &EstimationConfig) -> InjectionEstimate {
    let mut clamped = Vec::new();
    let mut model = InjectionModel::zeros(forest.loads().to_vec());
    model.distribution = SamplerKind::Gaussian;
    model.mu_p = mu.0;
    model.mu_q = mu.1;
    for (i, t) in raw.iter().enumerate() {
        let (vp, vq) = (t.var_p.max(cfg.var_floor), t.var_q.max(cfg.var_floor));
        if vp != t.var_p || vq != t.var_q {
            clamped.push(forest.id(i));
        }
        model.var_p[i] = vp;
        model.var_q[i] = vq;
        model.cov_pq[i] = t.cov_pq;
    }
    InjectionEstimate { model, unclamped: raw, clamped }
}

/// Estimates `μp, μq, Ωp, Ωq, Ωpq` on a known forest with known impedances,
/// solving one 3×3 system per edge from the leaves upward.
pub fn estimate_injection_stats(
    momset: &MomentSet,
    forest: &RadialForest,
    cfg: &EstimationConfig,
) -> Result<InjectionEstimate> {
    if !momset.has_theta() {
        return Err(GridError::MissingPhaseChannel);
    }
    let pos = momset_positions(momset, forest)?;
    let n = forest.n_loads();
    let mut below = vec![CovTriple::default(); n];
    let mut raw = vec![CovTriple::default(); n];
    for i in forest.postorder() {
        let (a, b, c) = edge_statistics(momset, forest, &pos, i)?;
        let total = solve_edge_system(forest.id(i), forest.parent_id(i), forest.impedance(i), a, b, c)?;
        raw[i] = total - below[i];
        if let Upstream::Load(p) = forest.upstream(i) {
            below[p] += total;
        }
    }
    let mu = recover_means(momset, forest, &pos)?;
    Ok(finish(forest, raw, mu, cfg))
}

/// One-shot alternative: with `T = [[Hr, Hx], [Hx, −Hr]]` mapping `(p, q)` to
/// `(ε, θ)`, the injection covariance is `T⁻¹·Cov(ε, θ)·T⁻ᵀ`; its diagonal
/// blocks are read off directly.
pub fn estimate_injection_stats_joint(
    momset: &MomentSet,
    forest: &RadialForest,
    cfg: &EstimationConfig,
) -> Result<InjectionEstimate> {
    if !momset.has_theta() {
        return Err(GridError::MissingPhaseChannel);
    }
    let pos = momset_positions(momset, forest)?;
    let n = forest.n_loads();
    let hr = forest.h_inverse_dense(Weight::Resistance);
    let hx = forest.h_inverse_dense(Weight::Reactance);
    let mut t = DMatrix::zeros(2 * n, 2 * n);
    t.view_mut((0, 0), (n, n)).copy_from(&hr);
    t.view_mut((0, n), (n, n)).copy_from(&hx);
    t.view_mut((n, 0), (n, n)).copy_from(&hx);
    t.view_mut((n, n), (n, n)).copy_from(&(-&hr));

    let mut cov = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (pos[i], pos[j]);
            cov[(i, j)] = momset.cov_idx(Channel::Eps, a, b)?;
            cov[(n + i, n + j)] = momset.cov_idx(Channel::Theta, a, b)?;
            let et = momset.cov_idx(Channel::Cross, a, b)?;
            cov[(i, n + j)] = et;
            cov[(n + j, i)] = et;
        }
    }
    let t_inv = t.try_inverse().ok_or(GridError::SingularSystem {
        child: forest.id(0),
        parent: forest.parent_id(0),
        sum_identifiable: f64::NAN,
    })?;
    let sigma = &t_inv * cov * t_inv.transpose();
    let raw = (0..n)
        .map(|i| CovTriple { var_p: sigma[(i, i)], var_q: sigma[(n + i, n + i)], cov_pq: sigma[(i, n + i)] })
        .collect();
    let mu = recover_means(momset, forest, &pos)?;
    Ok(finish(forest, raw, mu, cfg))
}

#[derive(Clone, Debug)]
pub struct LearnResult {
    pub structure: StructureOutcome,
    pub forest: RadialForest,
    pub injections: InjectionEstimate,
}

/// Structure from ε, then injection statistics on the recovered forest using
/// catalog impedances.
pub fn learn_topology_and_injections(
    momset: &MomentSet,
    substation_children: &BTreeMap<NodeId, Vec<NodeId>>,
    catalog: &LineCatalog,
    structure_cfg: &StructureConfig,
    estimation_cfg: &EstimationConfig,
) -> Result<LearnResult> {
    let structure = learn_structure(momset, substation_children, structure_cfg)?;
    if !structure.unattached.is_empty() {
        return Err(GridError::IncompleteCover { unattached: structure.unattached });
    }
    let forest = structure.topology.with_impedances(catalog)?;
    let injections = estimate_injection_stats(momset, &forest, estimation_cfg)?;
    Ok(LearnResult { structure, forest, injections })
}
