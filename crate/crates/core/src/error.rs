use thiserror::Error;

use crate::grid::NodeId;

pub type Result<T> = std::result::Result<T, GridError>;

#[derive(Debug, Error)]
pub enum GridError {
    // network construction
    #[error("operational lines contain a cycle through nodes {0} and {1}")]
    CycleDetected(NodeId, NodeId),
    #[error("load node {0} is not connected to any substation")]
    DisconnectedLoadNode(NodeId),
    #[error("substations {0} and {1} lie in the same connected component")]
    MultipleSlacksInComponent(NodeId, NodeId),
    #[error("parallel lines between {0} and {1}")]
    ParallelLines(NodeId, NodeId),
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("line ({0}, {1}) has non-positive impedance or identical endpoints")]
    InvalidLine(NodeId, NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} is not a load node")]
    NotALoad(NodeId),
    #[error("{parent} is not the parent of {child}")]
    NotParent { child: NodeId, parent: NodeId },
    #[error("pairwise statistic needs two distinct nodes, got {0} twice")]
    SameNode(NodeId),
    #[error("nodes {0} and {1} belong to different trees")]
    DifferentTrees(NodeId, NodeId),
    #[error("no line between {0} and {1} in the network catalog")]
    MissingLine(NodeId, NodeId),

    // forward model
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid injection covariance at node {node}: {reason}")]
    InvalidCovariance { node: NodeId, reason: String },

    // statistics
    #[error("at least {needed} samples are required, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("node {0} is not observed")]
    UnobservedNode(NodeId),
    #[error("phase-angle samples are required for this estimate")]
    MissingPhaseChannel,

    // learners
    #[error("learning left nodes without a parent: {unattached:?}")]
    IncompleteCover { unattached: Vec<NodeId> },
    #[error("singular 3x3 system on edge ({child}, {parent}); identifiable: var_p+var_q sum = {sum_identifiable}")]
    SingularSystem { child: NodeId, parent: NodeId, sum_identifiable: f64 },
    #[error("no real root for the line-parameter quadratic (discriminant {discriminant:e})")]
    NoRealRoot { discriminant: f64 },
    #[error("both quadratic roots are feasible: r^2 in {{{r2_plus}, {r2_minus}}}")]
    BothRootsFeasible { r2_plus: f64, r2_minus: f64 },
    #[error("line split unidentifiable (A=B, C=0, equal variance sums); r^2+x^2 = {impedance_sq_sum}, cov_pq sum = {cov_pq_sum}")]
    Unidentifiable { impedance_sq_sum: f64, cov_pq_sum: f64 },
    #[error("no consistent placement for node {node} under {parent}: best residual {best_residual:e}")]
    NoConsistentPlacement { node: NodeId, parent: NodeId, best_residual: f64 },
    #[error("missing-node assumption violated: {0}")]
    AssumptionViolated(String),

    // harness / io
    #[error("infeasible specification: {0}")]
    InfeasibleSpec(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed input: {0}")]
    Malformed(String),
}

impl GridError {
    /// Errors raised by a learner on otherwise well-formed input.
    pub fn is_learner_failure(&self) -> bool {
        matches!(
            self,
            GridError::IncompleteCover { .. }
                | GridError::SingularSystem { .. }
                | GridError::NoRealRoot { .. }
                | GridError::BothRootsFeasible { .. }
                | GridError::Unidentifiable { .. }
                | GridError::NoConsistentPlacement { .. }
                | GridError::AssumptionViolated(_)
                | GridError::MissingLine(..)
        )
    }
}
