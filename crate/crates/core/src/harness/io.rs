//! Sample CSV and learner result JSON.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GridError, Result};
use crate::grid::NodeId;
use crate::lcpf::{InjectionModel, VoltageSamples};
use crate::line_params::EdgeEstimate;
use crate::missing::MatchCheck;
use crate::topology::{EdgeSelection, Topology};

#[derive(Debug, Serialize, Deserialize)]
struct SampleRow {
    sample: usize,
    node: NodeId,
    eps: f64,
    theta: Option<f64>,
}

/// One row per (sample, node); `theta` left empty when absent.
pub fn write_samples_csv(path: impl AsRef<Path>, samples: &VoltageSamples) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for j in 0..samples.m {
        for (i, &node) in samples.nodes.iter().enumerate() {
            w.serialize(SampleRow { sample: j, node, eps: samples.eps_at(j, i), theta: samples.theta_at(j, i) })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples_csv(path: impl AsRef<Path>) -> Result<VoltageSamples> {
    let mut rows: Vec<SampleRow> = Vec::new();
    for row in csv::Reader::from_path(path)?.deserialize() {
        rows.push(row?);
    }
    let mut nodes: Vec<NodeId> = rows.iter().map(|r| r.node).collect();
    nodes.sort();
    nodes.dedup();
    let m = rows.iter().map(|r| r.sample + 1).max().unwrap_or(0);
    let n = nodes.len();
    if rows.len() != m * n {
        return Err(GridError::Malformed(format!("{} rows for {m} samples x {n} nodes", rows.len())));
    }
    let col: BTreeMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let with_theta = rows.first().is_some_and(|r| r.theta.is_some());
    let mut eps = vec![f64::NAN; m * n];
    let mut theta = with_theta.then(|| vec![f64::NAN; m * n]);
    let mut seen = vec![false; m * n];
    for r in &rows {
        let k = r.sample * n + col[&r.node];
        if std::mem::replace(&mut seen[k], true) {
            return Err(GridError::Malformed(format!("duplicate row for sample {} node {}", r.sample, r.node)));
        }
        eps[k] = r.eps;
        match (&mut theta, r.theta) {
            (Some(t), Some(v)) => t[k] = v,
            (None, None) => {}
            _ => return Err(GridError::Malformed("theta column must be filled on all rows or none".into())),
        }
    }
    Ok(VoltageSamples { nodes, m, eps, theta })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub child: NodeId,
    pub parent: NodeId,
}

/// What a learner run produced, written as JSON.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ResultReport {
    pub task: String,
    pub edges: Vec<EdgeRecord>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub unattached: Vec<NodeId>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub injections: Option<InjectionModel>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub clamped: Vec<NodeId>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub edge_estimates: BTreeMap<NodeId, EdgeEstimate>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub selections: Vec<EdgeSelection>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub events: Vec<MatchCheck>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub unplaced_hidden: Vec<NodeId>,
}

impl ResultReport {
    pub fn new(task: &str, topology: &Topology) -> Self {
        Self {
            task: task.to_string(),
            edges: topology.parent.iter().map(|(&child, &parent)| EdgeRecord { child, parent }).collect(),
            ..Self::default()
        }
    }

    pub fn topology(&self, slacks: &[NodeId]) -> Topology {
        Topology { slacks: slacks.to_vec(), parent: self.edges.iter().map(|e| (e.child, e.parent)).collect() }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
