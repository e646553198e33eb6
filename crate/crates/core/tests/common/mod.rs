#![allow(dead_code)]

use gridtopo::harness::synth::{synth_feeder, FeederSpec, SynthFeeder};
use gridtopo::{Line, LineStatus, Node, NodeId, NodeRole, RadialForest};

/// Forest from `(a, b, r, x)` operational lines; `slacks` are substations.
pub fn forest(lines: &[(usize, usize, f64, f64)], slacks: &[usize]) -> RadialForest {
    let mut ids: Vec<usize> = lines.iter().flat_map(|l| [l.0, l.1]).collect();
    ids.sort();
    ids.dedup();
    let nodes: Vec<Node> = ids
        .iter()
        .map(|&id| Node { id: NodeId(id), role: if slacks.contains(&id) { NodeRole::Substation } else { NodeRole::Load } })
        .collect();
    let lines: Vec<Line> = lines
        .iter()
        .map(|&(a, b, r, x)| Line { a: NodeId(a), b: NodeId(b), r, x, status: LineStatus::Operational })
        .collect();
    RadialForest::build(&nodes, &lines).unwrap()
}

/// Random feeder with `n` loads over `k` trees.
pub fn feeder(n: usize, k: usize, seed: u64) -> SynthFeeder {
    let k = k.min(n);
    let total = n + k;
    let free = total * (total - 1) / 2 - n - k * (k - 1) / 2;
    let spec = FeederSpec { n_loads: n, n_trees: k, n_open_lines: n.min(20).min(free), ..FeederSpec::default() };
    synth_feeder(&spec, seed).unwrap()
}

/// Feeder sizes for exhaustive suites: up to 50 nodes in total.
pub fn small_feeders(count: u64) -> impl Iterator<Item = SynthFeeder> {
    (0..count).map(|s| {
        let k = 1 + (s as usize % 5);
        let n = (k + 3 + (s as usize * 7) % 40).min(50 - k);
        feeder(n, k, 1000 + s)
    })
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
