//! Sample-size sweeps over seeds: draw data, learn, score against the truth.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::{choose_hidden, synth_feeder, synth_injections, FeederSpec, InjectionRanges};
use crate::error::{GridError, Result};
use crate::grid::{Network, NodeId, RadialForest};
use crate::lcpf::{analytic_moments, sample_voltages, InjectionModel, VoltageSamples};
use crate::line_params::{learn_structure_and_params, LineConfig};
use crate::missing::{learn_with_missing, MissingConfig, MissingSpec};
use crate::moments::MomentSet;
use crate::par::Execution;
use crate::topology::{estimate_injection_stats, learn_structure, EstimationConfig, StructureConfig, Topology};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Structure from ε only.
    Structure,
    /// Structure, then injection means and covariances.
    Injections,
    /// Structure, then line impedances with known variances.
    Params,
    /// Structure with hidden nodes, once per entry of `missing_counts`.
    Missing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub tasks: Vec<Task>,
    /// Named feeder size; ignored when `feeder` or `network` is set.
    pub preset: Option<String>,
    pub feeder: Option<FeederSpec>,
    /// User-supplied network JSON.
    pub network: Option<PathBuf>,
    pub feeder_seed: u64,
    pub injections: InjectionRanges,
    pub samples: Vec<usize>,
    pub seed: u64,
    pub n_seeds: usize,
    pub missing_counts: Vec<usize>,
    /// Relative tolerance for missing-data checks; `3/√m` when unset.
    pub tol_rel: Option<f64>,
    /// Population moments instead of samples; every cell reports `m = 0`.
    pub analytic: bool,
    pub var_floor: f64,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            tasks: vec![Task::Structure, Task::Injections],
            preset: Some("bus_13_3".into()),
            feeder: None,
            network: None,
            feeder_seed: 0,
            injections: InjectionRanges::default(),
            samples: vec![100, 400, 1600, 6400, 25600],
            seed: 0,
            n_seeds: 20,
            missing_counts: vec![1, 2, 3],
            tol_rel: None,
            analytic: false,
            var_floor: 0.0,
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn fig4(preset: &str) -> Self {
        Self {
            tasks: vec![Task::Structure, Task::Injections],
            preset: Some(preset.into()),
            samples: vec![10, 20, 50, 100, 200, 400, 1600, 6400, 25600],
            ..Self::default()
        }
    }

    pub fn fig5(preset: &str) -> Self {
        Self {
            tasks: vec![Task::Missing],
            preset: Some(preset.into()),
            samples: vec![100, 400, 1600, 6400, 25600],
            missing_counts: vec![1, 2, 3],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(GridError::InfeasibleSpec("no tasks selected".into()));
        }
        if !self.analytic {
            if self.samples.is_empty() {
                return Err(GridError::InfeasibleSpec("empty sample grid".into()));
            }
            if let Some(&m) = self.samples.iter().find(|&&m| m < 2) {
                return Err(GridError::InfeasibleSpec(format!("sample count {m} below 2")));
            }
        }
        if self.n_seeds == 0 {
            return Err(GridError::InfeasibleSpec("no seeds".into()));
        }
        if self.tasks.contains(&Task::Missing) && self.missing_counts.is_empty() {
            return Err(GridError::InfeasibleSpec("missing task without hidden-node counts".into()));
        }
        Ok(())
    }

    fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|k| self.seed.wrapping_add(k)).collect()
    }

    fn sample_grid(&self) -> Vec<usize> {
        if self.analytic {
            vec![0]
        } else {
            let mut m = self.samples.clone();
            m.sort_unstable();
            m.dedup();
            m
        }
    }

    /// Feeder network (operational plus open lines).
    pub fn network(&self) -> Result<Network> {
        if let Some(path) = &self.network {
            return Network::load(path);
        }
        let spec = match (&self.feeder, &self.preset) {
            (Some(spec), _) => spec.clone(),
            (None, Some(name)) => FeederSpec::preset(name)?,
            (None, None) => return Err(GridError::InfeasibleSpec("no feeder given".into())),
        };
        Ok(synth_feeder(&spec, self.feeder_seed)?.network)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub task: String,
    pub m: usize,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub task: String,
    pub m: usize,
    pub metric: String,
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Default)]
pub struct MetricsReport {
    /// Per-seed rows in deterministic order.
    pub rows: Vec<CurveRow>,
    /// Mean over seeds per `(task, m, metric)`.
    pub summary: Vec<SummaryRow>,
}

impl MetricsReport {
    fn from_rows(rows: Vec<CurveRow>) -> Self {
        let mut groups: BTreeMap<(String, usize, String), Vec<f64>> = BTreeMap::new();
        for r in &rows {
            groups.entry((r.task.clone(), r.m, r.metric.clone())).or_default().push(r.value);
        }
        let summary = groups
            .into_iter()
            .map(|((task, m, metric), v)| {
                let n = v.len();
                let mean = v.iter().sum::<f64>() / n as f64;
                let var = if n > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
                SummaryRow { task, m, metric, mean, std_err: (var / n as f64).sqrt(), n }
            })
            .collect();
        Self { rows, summary }
    }

    pub fn mean(&self, task: &str, m: usize, metric: &str) -> Option<f64> {
        self.summary.iter().find(|r| r.task == task && r.m == m && r.metric == metric).map(|r| r.mean)
    }

    /// `(m, mean)` pairs for one task and metric, increasing in `m`.
    pub fn curve(&self, task: &str, metric: &str) -> Vec<(usize, f64)> {
        self.summary.iter().filter(|r| r.task == task && r.metric == metric).map(|r| (r.m, r.mean)).collect()
    }

    pub fn write_curves(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.summary {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `curves.csv` and `summary.csv` under `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        std::fs::create_dir_all(&dir)?;
        self.write_curves(dir.as_ref().join("curves.csv"))?;
        self.write_summary(dir.as_ref().join("summary.csv"))
    }
}

/// Mean of `|est − true| / |true|` over nodes present in both.
pub fn mean_fractional_error(truth: &[(NodeId, f64)], est: &BTreeMap<NodeId, f64>) -> f64 {
    let errs: Vec<f64> = truth
        .iter()
        .filter(|(_, t)| *t != 0.0)
        .filter_map(|(id, t)| est.get(id).map(|e| ((e - t) / t).abs()))
        .collect();
    if errs.is_empty() {
        f64::NAN
    } else {
        errs.iter().sum::<f64>() / errs.len() as f64
    }
}

fn per_node(model: &InjectionModel, field: fn(&InjectionModel) -> &Vec<f64>) -> Vec<(NodeId, f64)> {
    model.node_ids.iter().copied().zip(field(model).iter().copied()).collect()
}

fn stream_seed(seed: u64, tag: u64) -> u64 {
    // splitmix-style mixing of (seed, tag)
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn truncate(s: &VoltageSamples, m: usize) -> VoltageSamples {
    let k = m * s.nodes.len();
    VoltageSamples { nodes: s.nodes.clone(), m, eps: s.eps[..k].to_vec(), theta: s.theta.as_ref().map(|t| t[..k].to_vec()) }
}

struct Fixture<'a> {
    cfg: &'a ExperimentConfig,
    forest: RadialForest,
    network: Network,
    truth: Topology,
}

struct SeedData {
    injections: InjectionModel,
    hidden: BTreeMap<usize, Vec<NodeId>>,
    samples: Option<VoltageSamples>,
}

impl Fixture<'_> {
    fn seed_data(&self, seed: u64, m_max: usize) -> Result<SeedData> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 1));
        let injections = synth_injections(self.forest.loads(), &self.cfg.injections, &mut rng);
        let mut hidden = BTreeMap::new();
        if self.cfg.tasks.contains(&Task::Missing) {
            for &k in &self.cfg.missing_counts {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 100 + k as u64));
                hidden.insert(k, choose_hidden(&self.forest, k, &mut rng)?);
            }
        }
        let samples = if self.cfg.analytic {
            None
        } else {
            Some(sample_voltages(&self.forest, &injections, m_max, stream_seed(seed, 2), Execution::Sequential)?)
        };
        Ok(SeedData { injections, hidden, samples })
    }

    fn moments(&self, data: &SeedData, m: usize, observed: &[NodeId]) -> Result<MomentSet> {
        match &data.samples {
            Some(s) => MomentSet::estimate(&truncate(s, m).restrict(observed)?, observed, Execution::Sequential),
            None => MomentSet::from_analytic(&analytic_moments(&self.forest, &data.injections)?, observed),
        }
    }

    fn cell(&self, seed: u64, m: usize, data: &SeedData) -> Result<Vec<CurveRow>> {
        let mut rows = Vec::new();
        let mut push = |task: &str, metric: &str, value: f64| {
            rows.push(CurveRow { task: task.into(), m, seed, metric: metric.into(), value });
        };
        let roots = self.forest.substation_children();
        let catalog = self.network.catalog();
        let lenient = StructureConfig { strict: false, ..Default::default() };
        let needs_full = self.cfg.tasks.iter().any(|t| *t != Task::Missing);
        let full = if needs_full { Some(self.moments(data, m, self.forest.loads())?) } else { None };

        for &task in &self.cfg.tasks {
            match task {
                Task::Structure => {
                    let ms = full.as_ref().expect("full moments");
                    let out = learn_structure(ms, &roots, &lenient)?;
                    push("structure", "structural_error", out.topology.structural_error(&self.truth));
                }
                Task::Injections => {
                    let ms = full.as_ref().expect("full moments");
                    let out = learn_structure(ms, &roots, &lenient)?;
                    push("injections", "structural_error", out.topology.structural_error(&self.truth));
                    let est = if out.unattached.is_empty() {
                        out.topology.with_impedances(&catalog).and_then(|f| {
                            estimate_injection_stats(ms, &f, &EstimationConfig { var_floor: self.cfg.var_floor })
                        })
                    } else {
                        Err(GridError::IncompleteCover { unattached: out.unattached.clone() })
                    };
                    match est {
                        Ok(est) => {
                            push("injections", "failure", 0.0);
                            let t = &data.injections;
                            type Field = fn(&InjectionModel) -> &Vec<f64>;
                            let fields: [(&str, Field); 5] = [
                                ("mu_p_frac_err", |m| &m.mu_p),
                                ("mu_q_frac_err", |m| &m.mu_q),
                                ("var_p_frac_err", |m| &m.var_p),
                                ("var_q_frac_err", |m| &m.var_q),
                                ("cov_pq_frac_err", |m| &m.cov_pq),
                            ];
                            for (name, f) in fields {
                                let e: BTreeMap<NodeId, f64> = per_node(&est.model, f).into_iter().collect();
                                push("injections", name, mean_fractional_error(&per_node(t, f), &e));
                            }
                        }
                        Err(e) if e.is_learner_failure() => push("injections", "failure", 1.0),
                        Err(e) => return Err(e),
                    }
                }
                Task::Params => {
                    let ms = full.as_ref().expect("full moments");
                    let structure_cfg = if self.cfg.analytic { StructureConfig::default() } else { lenient };
                    match learn_structure_and_params(ms, &data.injections, &roots, &structure_cfg, &LineConfig::default()) {
                        Ok(out) => {
                            push("params", "failure", 0.0);
                            push("params", "structural_error", out.structure.topology.structural_error(&self.truth));
                            let mut r_true = Vec::new();
                            let mut x_true = Vec::new();
                            let (mut r_est, mut x_est) = (BTreeMap::new(), BTreeMap::new());
                            for (c, p, z) in self.forest.edges() {
                                if out.structure.topology.parent.get(&c) == Some(&p) {
                                    r_true.push((c, z.r));
                                    x_true.push((c, z.x));
                                    r_est.insert(c, out.estimates[&c].r_hat);
                                    x_est.insert(c, out.estimates[&c].x_hat);
                                }
                            }
                            push("params", "r_frac_err", mean_fractional_error(&r_true, &r_est));
                            push("params", "x_frac_err", mean_fractional_error(&x_true, &x_est));
                            let pq: BTreeMap<NodeId, f64> =
                                out.estimates.iter().map(|(&c, e)| (c, e.cov_pq_hat)).collect();
                            push("params", "cov_pq_frac_err", mean_fractional_error(&per_node(&data.injections, |m| &m.cov_pq), &pq));
                        }
                        Err(e) if e.is_learner_failure() => {
                            let out = learn_structure(ms, &roots, &lenient)?;
                            push("params", "structural_error", out.topology.structural_error(&self.truth));
                            push("params", "failure", 1.0);
                        }
                        Err(e) => return Err(e),
                    }
                }
                Task::Missing => {
                    for (&k, hidden) in &data.hidden {
                        let name = format!("missing_h{k}");
                        let observed: Vec<NodeId> =
                            self.forest.loads().iter().copied().filter(|id| !hidden.contains(id)).collect();
                        let ms = self.moments(data, m, &observed)?;
                        let spec = MissingSpec::from_model(hidden, &data.injections)?;
                        let mcfg = match (self.cfg.analytic, self.cfg.tol_rel) {
                            (true, tol) => MissingConfig { strict: false, tol_rel: tol.unwrap_or(1e-8), ..Default::default() },
                            (false, Some(tol)) => MissingConfig { tol_rel: tol, ..MissingConfig::for_samples(m) },
                            (false, None) => MissingConfig::for_samples(m),
                        };
                        let out = learn_with_missing(&ms, &spec, &catalog, &data.injections, &roots, &mcfg)?;
                        push(&name, "structural_error", out.topology.structural_error(&self.truth));
                    }
                }
            }
        }
        Ok(rows)
    }
}

/// Runs every `(m, seed)` cell, in parallel when `exec` allows. Output order
/// is seed-major then `m`, independent of scheduling.
pub fn run_experiment(cfg: &ExperimentConfig, exec: Execution) -> Result<MetricsReport> {
    cfg.validate()?;
    let network = cfg.network()?;
    let forest = network.forest()?;
    let truth = Topology::from_forest(&forest);
    let fx = Fixture { cfg, forest, network, truth };
    let grid = cfg.sample_grid();
    let m_max = *grid.last().expect("validated grid");
    let seeds = cfg.seeds();

    let per_seed: Vec<Result<Vec<CurveRow>>> = exec.map_slice(&seeds, |&seed| {
        let data = fx.seed_data(seed, m_max)?;
        let cells: Vec<Result<Vec<CurveRow>>> = exec.map_slice(&grid, |&m| fx.cell(seed, m, &data));
        cells.into_iter().collect::<Result<Vec<_>>>().map(|v| v.concat())
    });
    let rows = per_seed.into_iter().collect::<Result<Vec<_>>>()?.concat();
    let report = MetricsReport::from_rows(rows);
    if let Some(dir) = &cfg.out {
        report.write_dir(dir)?;
    }
    Ok(report)
}
