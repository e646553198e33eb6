//! Line impedances and injection cross-covariance from the three edge moments
//! when the injection variances are known.
//!
//! With `u = r²`, `v = x²`, `w = rx`, subtree sums `Sp, Sq, Spq` and `δ = Sp − Sq`:
//!
//! ```text
//! A = u·Sp + v·Sq + 2w·Spq
//! B = v·Sp + u·Sq − 2w·Spq
//! C = w·δ + (v − u)·Spq
//! ```
//!
//! `A + B` fixes `s = u + v`. Eliminating `w` and `Spq` leaves a quadratic in
//! `d = u − v`:
//!
//! ```text
//! ((A−B)² + 4C²)·d² − 2s²δ(A−B)·d + s²(s²δ² − 4C²) = 0
//! ```
//!
//! Squaring admits a spurious root with the sign of `w` flipped; it is rejected
//! by the residual of the `C` equation. The two genuine roots carry opposite
//! signs of `Spq`.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{GridError, Result};
use crate::grid::{Impedance, NodeId, RadialForest, Upstream};
use crate::lcpf::InjectionModel;
use crate::moments::{Channel, MomentSet};
use crate::topology::{learn_structure, StructureConfig, StructureOutcome};

const DISCRIMINANT_CLAMP: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RootChoice {
    Plus,
    Minus,
    /// Double root.
    Coincident,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeFlags {
    pub discriminant_clamped: bool,
    /// `|r − x| / max(r, x)` below 1e-6.
    pub symmetric_line: bool,
    /// Chosen root implies a non-positive own cross-covariance.
    pub nonpositive_cov_pq: bool,
    /// No root satisfied the cross-moment equation within tolerance.
    pub inconsistent: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeEstimate {
    pub r_hat: f64,
    pub x_hat: f64,
    /// Own cross-covariance: subtree sum minus descendants.
    pub cov_pq_hat: f64,
    /// Subtree sum of the cross-covariance.
    pub cov_pq_sum: f64,
    /// `|C − Ĉ| / (A + B)`
    pub residual: f64,
    pub root_choice: RootChoice,
    pub flags: EdgeFlags,
}

impl EdgeEstimate {
    pub fn impedance(&self) -> Impedance {
        Impedance::new(self.r_hat, self.x_hat)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineConfig {
    /// Relative residual under which a root satisfies the cross-moment equation.
    pub residual_tol: f64,
}

impl Default for LineConfig {
    fn default() -> Self {
        Self { residual_tol: 1e-7 }
    }
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    d: f64,
    choice: RootChoice,
    u: f64,
    v: f64,
    k: f64,
    own: f64,
    residual: f64,
}

/// Roots of `a2·t² + a1·t + a0` without cancellation.
fn stable_roots(a2: f64, a1: f64, a0: f64, disc: f64) -> (f64, f64) {
    let q = -0.5 * (a1 + a1.signum() * disc.max(0.0).sqrt());
    if q == 0.0 {
        return (0.0, 0.0);
    }
    (q / a2, a0 / q)
}

/// Recovers `(r, x, Ωpq)` for one edge. `below_cov_pq` is the cross-covariance
/// already attributed to descendants (0 for a leaf).
pub fn estimate_edge_with(
    a: f64,
    b: f64,
    c: f64,
    sum_var_p: f64,
    sum_var_q: f64,
    below_cov_pq: f64,
    cfg: &LineConfig,
) -> Result<EdgeEstimate> {
    if !(sum_var_p > 0.0 && sum_var_q > 0.0) || !(a > 0.0 && b > 0.0) {
        return Err(GridError::Malformed(format!(
            "edge estimate needs positive A, B and variance sums (A={a}, B={b}, Sp={sum_var_p}, Sq={sum_var_q})"
        )));
    }
    let s = (a + b) / (sum_var_p + sum_var_q);
    let delta = sum_var_p - sum_var_q;
    let amb = a - b;
    let a2 = amb * amb + 4.0 * c * c;
    let a1 = -2.0 * s * s * delta * amb;
    let a0 = s * s * (s * s * delta * delta - 4.0 * c * c);

    let mut flags = EdgeFlags::default();
    let scale2 = a1 * a1 + (4.0 * a2 * a0).abs();
    if a2 <= 1e-300 || a2 <= f64::EPSILON * f64::EPSILON * (a + b) * (a + b) {
        // A = B and C = 0: only r² + x² and Spq = 0 are determined
        return Err(GridError::Unidentifiable { impedance_sq_sum: s, cov_pq_sum: 0.0 });
    }
    let mut disc = a1 * a1 - 4.0 * a2 * a0;
    if disc < 0.0 {
        if disc >= -DISCRIMINANT_CLAMP * scale2 {
            disc = 0.0;
            flags.discriminant_clamped = true;
        } else {
            return Err(GridError::NoRealRoot { discriminant: disc });
        }
    }
    let coincident = disc <= 4.0 * f64::EPSILON * scale2;
    let (r1, r2) = stable_roots(a2, a1, a0, disc);
    let (d_plus, d_minus) = if r1 >= r2 { (r1, r2) } else { (r2, r1) };
    let roots: Vec<(f64, RootChoice)> = if coincident {
        vec![(0.5 * (d_plus + d_minus), RootChoice::Coincident)]
    } else {
        vec![(d_plus, RootChoice::Plus), (d_minus, RootChoice::Minus)]
    };

    let candidates: Vec<Candidate> = roots
        .into_iter()
        .filter(|&(d, _)| d.abs() < s)
        .map(|(d, choice)| {
            let u = 0.5 * (s + d);
            let v = 0.5 * (s - d);
            let w = (u * v).sqrt();
            let k = (a - u * sum_var_p - v * sum_var_q) / (2.0 * w);
            let residual = (c - (w * delta - d * k)).abs() / (a + b);
            Candidate { d, choice, u, v, k, own: k - below_cov_pq, residual }
        })
        .collect();
    if candidates.is_empty() {
        return Err(GridError::NoRealRoot { discriminant: disc });
    }

    let consistent: Vec<&Candidate> = candidates.iter().filter(|c| c.residual <= cfg.residual_tol).collect();
    let best = if consistent.is_empty() {
        flags.inconsistent = true;
        *candidates.iter().min_by(|x, y| x.residual.total_cmp(&y.residual)).expect("non-empty")
    } else {
        let positive: Vec<&&Candidate> = consistent.iter().filter(|c| c.own > 0.0).collect();
        if positive.len() > 1 && (positive[0].d - positive[1].d).abs() > 1e-9 * s {
            return Err(GridError::BothRootsFeasible { r2_plus: positive[0].u, r2_minus: positive[1].u });
        }
        match positive.first() {
            Some(c) => ***c,
            None => **consistent.iter().min_by(|x, y| x.residual.total_cmp(&y.residual)).expect("non-empty"),
        }
    };
    let (r_hat, x_hat) = (best.u.sqrt(), best.v.sqrt());
    flags.nonpositive_cov_pq = best.own <= 0.0;
    flags.symmetric_line = (r_hat - x_hat).abs() < 1e-6 * r_hat.max(x_hat);
    Ok(EdgeEstimate {
        r_hat,
        x_hat,
        cov_pq_hat: best.own,
        cov_pq_sum: best.k,
        residual: best.residual,
        root_choice: best.choice,
        flags,
    })
}

/// Leaf-edge form: no descendants, default tolerance.
pub fn estimate_edge(a: f64, b: f64, c: f64, sum_var_p: f64, sum_var_q: f64) -> Result<EdgeEstimate> {
    estimate_edge_with(a, b, c, sum_var_p, sum_var_q, 0.0, &LineConfig::default())
}

/// Cross-validation path when `Spq` is also known: the moments are linear in
/// `(r², x², rx)`.
pub fn estimate_edge_linear(a: f64, b: f64, c: f64, sum_var_p: f64, sum_var_q: f64, sum_cov_pq: f64) -> Result<Impedance> {
    let (sp, sq, spq) = (sum_var_p, sum_var_q, sum_cov_pq);
    let m = Matrix3::new(sp, sq, 2.0 * spq, sq, sp, -2.0 * spq, -spq, spq, sp - sq);
    let sol = m.lu().solve(&Vector3::new(a, b, c)).ok_or(GridError::Unidentifiable {
        impedance_sq_sum: (a + b) / (sp + sq),
        cov_pq_sum: spq,
    })?;
    if !(sol[0] > 0.0 && sol[1] > 0.0) {
        return Err(GridError::NoRealRoot { discriminant: sol[0].min(sol[1]) });
    }
    Ok(Impedance::new(sol[0].sqrt(), sol[1].sqrt()))
}

#[derive(Clone, Debug)]
pub struct ParamsResult {
    pub structure: StructureOutcome,
    pub forest: RadialForest,
    pub estimates: BTreeMap<NodeId, EdgeEstimate>,
}

/// Structure from ε, then per-edge impedances and cross-covariances from the
/// leaves upward using known injection variances.
pub fn learn_structure_and_params(
    momset: &MomentSet,
    known: &InjectionModel,
    substation_children: &BTreeMap<NodeId, Vec<NodeId>>,
    structure_cfg: &StructureConfig,
    line_cfg: &LineConfig,
) -> Result<ParamsResult> {
    let structure = learn_structure(momset, substation_children, structure_cfg)?;
    if !structure.unattached.is_empty() {
        return Err(GridError::IncompleteCover { unattached: structure.unattached });
    }
    let unit: BTreeMap<NodeId, Impedance> =
        structure.topology.parent.keys().map(|&c| (c, Impedance::new(1.0, 1.0))).collect();
    let shape = structure.topology.with_edge_impedances(&unit)?;
    let n = shape.n_loads();
    let mut sums = vec![(0.0, 0.0, 0.0); n];
    let mut estimates = BTreeMap::new();
    for i in shape.postorder() {
        let id = shape.id(i);
        let cov = known.cov_of(id).ok_or(GridError::UnknownNode(id))?;
        let (sp, sq, below_pq) = (sums[i].0 + cov.var_p, sums[i].1 + cov.var_q, sums[i].2);
        let ai = momset.index_of(id)?;
        let (a, b, c) = match shape.upstream(i) {
            Upstream::Load(p) => {
                let bi = momset.index_of(shape.id(p))?;
                (
                    momset.sqdiff_idx(Channel::Eps, ai, bi)?,
                    momset.sqdiff_idx(Channel::Theta, ai, bi)?,
                    momset.sqdiff_idx(Channel::Cross, ai, bi)?,
                )
            }
            Upstream::Slack(_) => {
                (momset.diag(Channel::Eps, ai)?, momset.diag(Channel::Theta, ai)?, momset.diag(Channel::Cross, ai)?)
            }
        };
        let est = estimate_edge_with(a, b, c, sp, sq, below_pq, line_cfg)?;
        if let Upstream::Load(p) = shape.upstream(i) {
            sums[p].0 += sp;
            sums[p].1 += sq;
            sums[p].2 += est.cov_pq_sum;
        }
        estimates.insert(id, est);
    }
    let z: BTreeMap<NodeId, Impedance> = estimates.iter().map(|(&id, e)| (id, e.impedance())).collect();
    let forest = structure.topology.with_edge_impedances(&z)?;
    Ok(ParamsResult { structure, forest, estimates })
}
