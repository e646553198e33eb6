//! Forest recovery when some nodes are never observed.
//!
//! Hidden nodes are at least three hops apart and never feed directly off a
//! substation. Injection covariances of every node and all line impedances
//! are known, so each candidate link can be tested against the predicted
//! ε squared difference
//! `r²·Sp + x²·Sq + 2rx·Spq` over the child's accumulated subtree sums.
//!
//! When the ε minimiser `b*` of a waiting node `a` is popped:
//! - with nothing parked under `a`: try the direct link `a → b*`, then a hidden
//!   leaf `d` under `a`;
//! - with nodes parked under `a`: a hidden `d` sits between `a` and them.
//!
//! A node matching neither may share a hidden parent with `b*`; it keeps
//! waiting. Otherwise it is parked under `b*` as an unconnected descendant.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GridError, Result};
use crate::grid::{Impedance, LineCatalog, NodeId, RadialForest};
use crate::lcpf::{parent_edge_moments, CovTriple, InjectionModel};
use crate::moments::{Channel, MomentSet};
use crate::topology::{argmin_unvisited, declared_roots, visit_order, Topology};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenNode {
    pub id: NodeId,
    pub var_p: f64,
    pub var_q: f64,
    pub cov_pq: f64,
}

impl HiddenNode {
    pub fn cov(&self) -> CovTriple {
        CovTriple { var_p: self.var_p, var_q: self.var_q, cov_pq: self.cov_pq }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MissingSpec {
    pub hidden: Vec<HiddenNode>,
}

impl MissingSpec {
    /// Hidden set with covariances taken from `inj`.
    pub fn from_model(ids: &[NodeId], inj: &InjectionModel) -> Result<Self> {
        let hidden = ids
            .iter()
            .map(|&id| {
                let c = inj.cov_of(id).ok_or(GridError::UnknownNode(id))?;
                Ok(HiddenNode { id, var_p: c.var_p, var_q: c.var_q, cov_pq: c.cov_pq })
            })
            .collect::<Result<_>>()?;
        Ok(Self { hidden })
    }

    pub fn ids(&self) -> Vec<NodeId> {
        self.hidden.iter().map(|h| h.id).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        serde_json::to_writer_pretty(std::io::BufWriter::new(std::fs::File::create(path)?), self)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    WithinTwoHops { a: NodeId, b: NodeId, hops: usize },
    SubstationChild { node: NodeId, substation: NodeId },
    NotALoad { node: NodeId },
}

/// Every hidden pair within two hops and every hidden substation child.
pub fn validate_missing_spec(forest: &RadialForest, spec: &MissingSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut idx = Vec::new();
    for h in &spec.hidden {
        match forest.index_of(h.id) {
            Ok(i) => idx.push((h.id, i)),
            Err(_) => out.push(Violation::NotALoad { node: h.id }),
        }
    }
    for (k, &(a, i)) in idx.iter().enumerate() {
        for &(b, j) in &idx[k + 1..] {
            if let Some(hops) = forest.tree_distance(i, j) {
                if hops <= 2 {
                    out.push(Violation::WithinTwoHops { a, b, hops });
                }
            }
        }
    }
    for &(node, i) in &idx {
        if let crate::grid::Upstream::Slack(_) = forest.upstream(i) {
            out.push(Violation::SubstationChild { node, substation: forest.parent_id(i) });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MissingConfig {
    pub tol_rel: f64,
    pub tol_abs: f64,
    /// Two candidates closer than this (relative) are a tie.
    pub tie_rel_tol: f64,
    /// Fail on unmatched events instead of forcing the best candidate.
    pub strict: bool,
}

impl Default for MissingConfig {
    fn default() -> Self {
        Self { tol_rel: 1e-8, tol_abs: 0.0, tie_rel_tol: 1e-9, strict: true }
    }
}

impl MissingConfig {
    /// `3/√m` relative tolerance, forcing rather than failing.
    pub fn for_samples(m: usize) -> Self {
        Self { tol_rel: 3.0 / (m as f64).sqrt(), tol_abs: 0.0, tie_rel_tol: 1e-9, strict: false }
    }
}

pub fn residual_match(lhs: f64, rhs: f64, scale: f64, cfg: &MissingConfig) -> bool {
    (lhs - rhs).abs() <= cfg.tol_rel * scale + cfg.tol_abs
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    DirectEdge,
    MissingLeafChild,
    MissingIntermediate,
    /// `a` and `b*` hang off the same hidden node; `a` keeps waiting.
    SiblingViaHidden,
    /// Nothing matched; `a` becomes an unconnected descendant of `b*`.
    Parked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchCheck {
    pub child: NodeId,
    pub parent: NodeId,
    pub kind: CheckKind,
    pub hidden: Option<NodeId>,
    pub lhs: f64,
    pub rhs: f64,
    /// `|lhs − rhs| / max(|lhs|, |rhs|)`
    pub residual: f64,
    /// Smallest residual among the rejected alternatives.
    pub runner_up: Option<f64>,
    /// Accepted without passing the tolerance (non-strict mode).
    pub forced: bool,
}

#[derive(Clone, Debug)]
pub struct MissingOutcome {
    pub topology: Topology,
    pub events: Vec<MatchCheck>,
    pub unplaced_hidden: Vec<NodeId>,
    pub unattached: Vec<NodeId>,
}

impl MissingOutcome {
    pub fn forest(&self, catalog: &LineCatalog) -> Result<RadialForest> {
        self.topology.with_impedances(catalog)
    }
}

fn relative(lhs: f64, rhs: f64) -> f64 {
    let scale = lhs.abs().max(rhs.abs());
    if scale == 0.0 {
        0.0
    } else {
        (lhs - rhs).abs() / scale
    }
}

fn eq_eps(z: Impedance, sums: CovTriple) -> f64 {
    parent_edge_moments(z, sums).eps
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    kind: CheckKind,
    hidden: Option<NodeId>,
    rhs: f64,
    residual: f64,
}

struct Learner<'a> {
    momset: &'a MomentSet,
    catalog: &'a LineCatalog,
    cfg: &'a MissingConfig,
    own: HashMap<NodeId, CovTriple>,
    below: HashMap<NodeId, CovTriple>,
    parked: HashMap<NodeId, Vec<NodeId>>,
    hidden_left: BTreeSet<NodeId>,
    parent: BTreeMap<NodeId, NodeId>,
    events: Vec<MatchCheck>,
}

enum Resolution {
    Attached,
    Unresolved(Vec<Candidate>),
}

impl Learner<'_> {
    fn sums(&self, a: NodeId) -> CovTriple {
        self.own[&a] + self.below.get(&a).copied().unwrap_or_default()
    }

    fn add_below(&mut self, b: NodeId, t: CovTriple) {
        *self.below.entry(b).or_default() += t;
    }

    fn lhs(&self, a: NodeId, b: NodeId, b_is_slack: bool) -> Result<f64> {
        let ai = self.momset.index_of(a)?;
        if b_is_slack {
            self.momset.diag(Channel::Eps, ai)
        } else {
            self.momset.sqdiff_idx(Channel::Eps, ai, self.momset.index_of(b)?)
        }
    }

    fn option(&self, kind: CheckKind, hidden: Option<NodeId>, lhs: f64, rhs: f64) -> Candidate {
        Candidate { kind, hidden, rhs, residual: relative(lhs, rhs) }
    }

    fn passes(&self, lhs: f64, o: &Candidate) -> bool {
        residual_match(lhs, o.rhs, lhs.abs().max(o.rhs.abs()), self.cfg)
    }

    fn record(&mut self, a: NodeId, b: NodeId, lhs: f64, chosen: &Candidate, others: &[Candidate], forced: bool) {
        let runner_up = others
            .iter()
            .filter(|o| !(o.kind == chosen.kind && o.hidden == chosen.hidden))
            .map(|o| o.residual)
            .min_by(f64::total_cmp);
        self.events.push(MatchCheck {
            child: a,
            parent: b,
            kind: chosen.kind,
            hidden: chosen.hidden,
            lhs,
            rhs: chosen.rhs,
            residual: chosen.residual,
            runner_up,
            forced,
        });
    }

    /// Best passing option; errors on a tie between distinct hidden nodes in strict mode.
    fn pick(&self, a: NodeId, b: NodeId, lhs: f64, opts: &[Candidate]) -> Result<Option<Candidate>> {
        let mut passing: Vec<Candidate> = opts.iter().copied().filter(|o| self.passes(lhs, o)).collect();
        passing.sort_by(|x, y| x.residual.total_cmp(&y.residual).then(x.hidden.cmp(&y.hidden)));
        if self.cfg.strict && passing.len() > 1 {
            let (p, q) = (passing[0], passing[1]);
            if (q.residual - p.residual).abs() <= self.cfg.tie_rel_tol && p.hidden != q.hidden {
                return Err(GridError::NoConsistentPlacement { node: a, parent: b, best_residual: p.residual });
            }
        }
        Ok(passing.first().copied())
    }

    fn attach(&mut self, a: NodeId, b: NodeId, extra: CovTriple) {
        self.parent.insert(a, b);
        let t = self.sums(a) + extra;
        self.add_below(b, t);
    }

    /// Direct, hidden-leaf or hidden-intermediate resolution of `a` under `b`.
    fn resolve(&mut self, a: NodeId, b: NodeId, b_is_slack: bool) -> Result<Resolution> {
        let lhs = self.lhs(a, b, b_is_slack)?;
        let z_ab = self.catalog.get(a, b);
        let sums_a = self.sums(a);
        let parked = self.parked.get(&a).cloned().unwrap_or_default();

        if parked.is_empty() {
            let direct = z_ab.map(|z| self.option(CheckKind::DirectEdge, None, lhs, eq_eps(z, sums_a)));
            let leaves: Vec<Candidate> = match z_ab {
                Some(z) => self
                    .hidden_left
                    .iter()
                    .filter(|&&d| self.catalog.get(a, d).is_some())
                    .map(|&d| self.option(CheckKind::MissingLeafChild, Some(d), lhs, eq_eps(z, sums_a + self.own[&d])))
                    .collect(),
                None => Vec::new(),
            };
            let all: Vec<Candidate> = direct.iter().copied().chain(leaves.iter().copied()).collect();
            if let Some(o) = direct.filter(|o| self.passes(lhs, o)) {
                self.record(a, b, lhs, &o, &all, false);
                self.attach(a, b, CovTriple::default());
                return Ok(Resolution::Attached);
            }
            if let Some(o) = self.pick(a, b, lhs, &leaves)? {
                let d = o.hidden.expect("leaf option names a hidden node");
                self.record(a, b, lhs, &o, &all, false);
                self.place_hidden_leaf(a, b, d);
                return Ok(Resolution::Attached);
            }
            return Ok(Resolution::Unresolved(all));
        }

        let mids: Vec<Candidate> = match z_ab {
            Some(z) => self
                .hidden_left
                .iter()
                .filter(|&&d| self.catalog.get(a, d).is_some() && parked.iter().all(|&e| self.catalog.get(d, e).is_some()))
                .map(|&d| self.option(CheckKind::MissingIntermediate, Some(d), lhs, eq_eps(z, sums_a + self.own[&d])))
                .collect(),
            None => Vec::new(),
        };
        let chosen = match self.pick(a, b, lhs, &mids)? {
            Some(o) => Some((o, false)),
            None if self.cfg.strict => {
                let best = mids.iter().map(|o| o.residual).min_by(f64::total_cmp).unwrap_or(f64::INFINITY);
                return Err(GridError::NoConsistentPlacement { node: a, parent: b, best_residual: best });
            }
            None => mids.iter().copied().min_by(|x, y| x.residual.total_cmp(&y.residual)).map(|o| (o, true)),
        };
        match chosen {
            Some((o, forced)) => {
                let d = o.hidden.expect("intermediate option names a hidden node");
                self.record(a, b, lhs, &o, &mids, forced);
                self.hidden_left.remove(&d);
                self.parent.insert(d, a);
                for e in parked {
                    self.parent.insert(e, d);
                }
                self.attach(a, b, self.own[&d]);
            }
            None => {
                let o = Candidate { kind: CheckKind::DirectEdge, hidden: None, rhs: f64::NAN, residual: f64::INFINITY };
                self.record(a, b, lhs, &o, &[], true);
                for e in parked {
                    self.parent.insert(e, a);
                }
                self.attach(a, b, CovTriple::default());
            }
        }
        self.parked.remove(&a);
        Ok(Resolution::Attached)
    }

    fn place_hidden_leaf(&mut self, a: NodeId, b: NodeId, d: NodeId) {
        self.hidden_left.remove(&d);
        self.parent.insert(d, a);
        self.add_below(a, self.own[&d]);
        self.attach(a, b, CovTriple::default());
    }

    /// `a` and `b` both children of some remaining hidden `d`.
    fn sibling_options(&self, a: NodeId, b: NodeId, lhs: f64) -> Vec<Candidate> {
        let (sa, sb) = (self.sums(a), self.sums(b));
        self.hidden_left
            .iter()
            .filter_map(|&d| {
                let (za, zb) = (self.catalog.get(a, d)?, self.catalog.get(b, d)?);
                Some(self.option(CheckKind::SiblingViaHidden, Some(d), lhs, eq_eps(za, sa) + eq_eps(zb, sb)))
            })
            .collect()
    }
}

/// Recovers the full forest, hidden nodes included, from ε statistics over the
/// observed nodes. `known` must cover every observed node; hidden-node
/// covariances come from `spec`.
pub fn learn_with_missing(
    momset: &MomentSet,
    spec: &MissingSpec,
    catalog: &LineCatalog,
    known: &InjectionModel,
    substation_children: &BTreeMap<NodeId, Vec<NodeId>>,
    cfg: &MissingConfig,
) -> Result<MissingOutcome> {
    for h in &spec.hidden {
        if momset.index_of(h.id).is_ok() {
            return Err(GridError::AssumptionViolated(format!("hidden node {} is observed", h.id)));
        }
        if substation_children.values().any(|ch| ch.contains(&h.id)) {
            return Err(GridError::AssumptionViolated(format!("hidden node {} is a substation child", h.id)));
        }
    }
    let (roots, slacks) = declared_roots(momset, substation_children)?;
    let nodes = momset.nodes();
    let mut own = HashMap::new();
    for &id in nodes {
        own.insert(id, known.cov_of(id).ok_or(GridError::UnknownNode(id))?);
    }
    for h in &spec.hidden {
        own.insert(h.id, h.cov());
    }

    let mut st = Learner {
        momset,
        catalog,
        cfg,
        own,
        below: HashMap::new(),
        parked: HashMap::new(),
        hidden_left: spec.ids().into_iter().collect(),
        parent: BTreeMap::new(),
        events: Vec::new(),
    };

    let (order, _) = visit_order(momset, cfg.tie_rel_tol);
    let mut unvisited: BTreeSet<usize> = (0..momset.len()).collect();
    let mut leaves: Vec<usize> = Vec::new();

    for &bi in &order {
        let b = nodes[bi];
        let mut waiting = Vec::with_capacity(leaves.len());
        let mut unresolved = Vec::new();
        for &ai in &leaves {
            if roots.contains_key(&ai) {
                waiting.push(ai);
                continue;
            }
            match argmin_unvisited(momset, ai, &unvisited)? {
                Some((c, _, _)) if c == bi => match st.resolve(nodes[ai], b, false)? {
                    Resolution::Attached => {}
                    Resolution::Unresolved(tried) => unresolved.push((ai, tried)),
                },
                _ => waiting.push(ai),
            }
        }
        let mut to_park = Vec::new();
        for (ai, tried) in unresolved {
            let a = nodes[ai];
            let lhs = st.lhs(a, b, false)?;
            let siblings = st.sibling_options(a, b, lhs);
            let all: Vec<Candidate> = tried.iter().chain(&siblings).copied().collect();
            match st.pick(a, b, lhs, &siblings)? {
                Some(o) => {
                    st.record(a, b, lhs, &o, &all, false);
                    waiting.push(ai);
                }
                None => {
                    let best = all.iter().copied().min_by(|x, y| x.residual.total_cmp(&y.residual));
                    let o = Candidate {
                        kind: CheckKind::Parked,
                        hidden: None,
                        rhs: best.map_or(f64::NAN, |o| o.rhs),
                        residual: best.map_or(f64::INFINITY, |o| o.residual),
                    };
                    st.record(a, b, lhs, &o, &[], false);
                    to_park.push(a);
                }
            }
        }
        for a in to_park {
            st.parked.entry(b).or_default().push(a);
            let t = st.sums(a);
            st.add_below(b, t);
        }
        leaves = waiting;
        unvisited.remove(&bi);
        leaves.push(bi);
    }

    let mut unattached = Vec::new();
    for ai in leaves {
        let a = nodes[ai];
        match roots.get(&ai) {
            Some(&slack) => {
                if let Resolution::Unresolved(tried) = st.resolve(a, slack, true)? {
                    if cfg.strict {
                        let best = tried.iter().map(|o| o.residual).min_by(f64::total_cmp).unwrap_or(f64::INFINITY);
                        return Err(GridError::NoConsistentPlacement { node: a, parent: slack, best_residual: best });
                    }
                    let lhs = st.lhs(a, slack, true)?;
                    let o = tried.iter().copied().min_by(|x, y| x.residual.total_cmp(&y.residual)).unwrap_or(Candidate {
                        kind: CheckKind::DirectEdge,
                        hidden: None,
                        rhs: f64::NAN,
                        residual: f64::INFINITY,
                    });
                    st.record(a, slack, lhs, &o, &tried, true);
                    match (o.kind, o.hidden) {
                        (CheckKind::MissingLeafChild, Some(d)) => st.place_hidden_leaf(a, slack, d),
                        _ => st.attach(a, slack, CovTriple::default()),
                    }
                }
            }
            None => unattached.push(a),
        }
    }
    // nodes still parked under something never resolved
    for (_, parked) in std::mem::take(&mut st.parked) {
        unattached.extend(parked.into_iter().filter(|e| !st.parent.contains_key(e)));
    }
    unattached.sort();
    unattached.dedup();
    let unplaced_hidden: Vec<NodeId> = st.hidden_left.iter().copied().collect();
    if cfg.strict && (!unattached.is_empty() || !unplaced_hidden.is_empty()) {
        let mut all = unattached;
        all.extend(unplaced_hidden);
        return Err(GridError::IncompleteCover { unattached: all });
    }
    Ok(MissingOutcome { topology: Topology { slacks, parent: st.parent }, events: st.events, unplaced_hidden, unattached })
}
