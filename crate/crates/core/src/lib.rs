pub mod error;
pub mod grid;
pub mod harness;
pub mod lcpf;
pub mod line_params;
pub mod missing;
pub mod moments;
pub mod par;
pub mod topology;

pub use error::{GridError, Result};
pub use grid::{Impedance, Line, LineCatalog, LineStatus, Network, Node, NodeId, NodeRole, RadialForest, Upstream, Weight};
pub use lcpf::{analytic_moments, sample_voltages, solve_lcpf, AnalyticMoments, CovTriple, InjectionModel, SamplerKind, VoltageSamples};
pub use moments::{Channel, MomentSet};
pub use par::Execution;
