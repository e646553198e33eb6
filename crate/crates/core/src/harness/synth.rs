//! Random radial feeders and injection models.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GridError, Result};
use crate::grid::{Line, LineStatus, Network, Node, NodeId, NodeRole, RadialForest, Upstream};
use crate::lcpf::{InjectionModel, SamplerKind};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectionRanges {
    pub var_p: (f64, f64),
    pub var_q: (f64, f64),
    /// Correlation `cov_pq / √(var_p·var_q)`.
    pub rho: (f64, f64),
    pub mu_p: (f64, f64),
    pub mu_q: (f64, f64),
    pub distribution: SamplerKind,
}

impl Default for InjectionRanges {
    fn default() -> Self {
        Self {
            var_p: (0.5e-4, 2.0e-4),
            var_q: (0.3e-4, 1.2e-4),
            rho: (0.1, 0.9),
            mu_p: (-0.05, -0.01),
            mu_q: (-0.02, -0.005),
            distribution: SamplerKind::Gaussian,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeederSpec {
    pub n_loads: usize,
    pub n_trees: usize,
    pub n_open_lines: usize,
    pub r_range: (f64, f64),
    pub x_range: (f64, f64),
    /// Minimum `|r − x| / max(r, x)` per line.
    pub min_rx_gap: f64,
    pub max_depth: Option<usize>,
    pub max_children: Option<usize>,
    pub injections: InjectionRanges,
}

impl Default for FeederSpec {
    fn default() -> Self {
        Self {
            n_loads: 13,
            n_trees: 3,
            n_open_lines: 13,
            r_range: (0.01, 0.05),
            x_range: (0.01, 0.05),
            min_rx_gap: 0.05,
            max_depth: None,
            max_children: None,
            injections: InjectionRanges::default(),
        }
    }
}

impl FeederSpec {
    /// Sized like the named test systems: loads / substations / open lines.
    pub fn preset(name: &str) -> Result<Self> {
        let (n, k, open) = match name {
            "bus_13_3" => (13, 3, 13),
            "bus_29_1" => (29, 1, 21),
            "bus_83_11" => (83, 11, 43),
            _ => return Err(GridError::InfeasibleSpec(format!("unknown preset {name:?}"))),
        };
        Ok(Self { n_loads: n, n_trees: k, n_open_lines: open, ..Self::default() })
    }

    pub const PRESETS: [&'static str; 3] = ["bus_13_3", "bus_29_1", "bus_83_11"];
}

#[derive(Clone, Debug)]
pub struct SynthFeeder {
    /// Operational and open lines.
    pub network: Network,
    pub forest: RadialForest,
    pub injections: InjectionModel,
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo { rng.random_range(lo..hi) } else { lo }
}

/// Random feeder: `n_trees` substations (ids `0..K`), loads `K..K+N` hung as
/// random recursive trees, plus open lines between unconnected pairs.
pub fn synth_feeder(spec: &FeederSpec, seed: u64) -> Result<SynthFeeder> {
    let (n, k) = (spec.n_loads, spec.n_trees);
    if k == 0 || n < k {
        return Err(GridError::InfeasibleSpec(format!("need at least one load per tree (N={n}, K={k})")));
    }
    if !(spec.r_range.0 > 0.0 && spec.x_range.0 > 0.0) {
        return Err(GridError::InfeasibleSpec("impedance ranges must be positive".into()));
    }
    let total = n + k;
    let max_pairs = total * (total - 1) / 2 - n - k * (k - 1) / 2;
    if spec.n_open_lines > max_pairs {
        return Err(GridError::InfeasibleSpec(format!("{} open lines requested, {max_pairs} pairs free", spec.n_open_lines)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut tree_of: Vec<usize> = (0..k).chain((k..n).map(|_| rng.random_range(0..k))).collect();
    tree_of.shuffle(&mut rng);

    // (node, depth, children) per tree, slack first
    let mut members: Vec<Vec<(usize, usize)>> = (0..k).map(|t| vec![(t, 0)]).collect();
    let mut n_children = vec![0usize; total];
    let mut edges = Vec::with_capacity(n);
    for (i, &t) in tree_of.iter().enumerate() {
        let id = k + i;
        let open: Vec<(usize, usize)> = members[t]
            .iter()
            .copied()
            .filter(|&(p, d)| {
                spec.max_depth.is_none_or(|m| d < m) && spec.max_children.is_none_or(|m| n_children[p] < m)
            })
            .collect();
        let &(p, d) = open
            .choose(&mut rng)
            .ok_or_else(|| GridError::InfeasibleSpec("depth/degree bounds leave no parent".into()))?;
        n_children[p] += 1;
        members[t].push((id, d + 1));
        edges.push((id, p));
    }

    let draw_line = |rng: &mut ChaCha8Rng, a: usize, b: usize, status| {
        let r = uniform(rng, spec.r_range);
        let mut x = uniform(rng, spec.x_range);
        for _ in 0..1000 {
            if (r - x).abs() > spec.min_rx_gap * r.max(x) {
                break;
            }
            x = uniform(rng, spec.x_range);
        }
        Line { a: NodeId(a), b: NodeId(b), r, x, status }
    };
    let mut lines: Vec<Line> = edges.iter().map(|&(c, p)| draw_line(&mut rng, p, c, LineStatus::Operational)).collect();
    let mut taken: BTreeSet<(usize, usize)> = edges.iter().map(|&(c, p)| (p.min(c), p.max(c))).collect();
    while lines.len() < n + spec.n_open_lines {
        let a = rng.random_range(0..total);
        let b = rng.random_range(0..total);
        if a == b || (a < k && b < k) || !taken.insert((a.min(b), a.max(b))) {
            continue;
        }
        lines.push(draw_line(&mut rng, a, b, LineStatus::Open));
    }

    let nodes: Vec<Node> = (0..total)
        .map(|i| Node { id: NodeId(i), role: if i < k { NodeRole::Substation } else { NodeRole::Load } })
        .collect();
    let network = Network { nodes, lines };
    let forest = network.forest()?;
    let injections = synth_injections(forest.loads(), &spec.injections, &mut rng);
    Ok(SynthFeeder { network, forest, injections })
}

/// Independent injection statistics for `loads`, positively correlated.
pub fn synth_injections(loads: &[NodeId], ranges: &InjectionRanges, rng: &mut impl Rng) -> InjectionModel {
    let mut inj = InjectionModel::zeros(loads.to_vec());
    inj.distribution = ranges.distribution;
    for i in 0..loads.len() {
        inj.var_p[i] = uniform(rng, ranges.var_p);
        inj.var_q[i] = uniform(rng, ranges.var_q);
        inj.cov_pq[i] = uniform(rng, ranges.rho) * (inj.var_p[i] * inj.var_q[i]).sqrt();
        inj.mu_p[i] = uniform(rng, ranges.mu_p);
        inj.mu_q[i] = uniform(rng, ranges.mu_q);
    }
    inj
}

/// Random hidden set of `count` loads satisfying the separation rules.
pub fn choose_hidden(forest: &RadialForest, count: usize, rng: &mut impl Rng) -> Result<Vec<NodeId>> {
    let eligible: Vec<usize> =
        (0..forest.n_loads()).filter(|&i| matches!(forest.upstream(i), Upstream::Load(_))).collect();
    for _ in 0..200 {
        let mut pool = eligible.clone();
        pool.shuffle(rng);
        let mut chosen: Vec<usize> = Vec::with_capacity(count);
        for i in pool {
            if chosen.len() == count {
                break;
            }
            if chosen.iter().all(|&j| forest.tree_distance(i, j).is_none_or(|h| h > 2)) {
                chosen.push(i);
            }
        }
        if chosen.len() == count {
            let mut ids: Vec<NodeId> = chosen.into_iter().map(|i| forest.id(i)).collect();
            ids.sort();
            return Ok(ids);
        }
    }
    Err(GridError::InfeasibleSpec(format!("cannot place {count} hidden nodes more than two hops apart")))
}
