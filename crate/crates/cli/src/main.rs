use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use gridtopo::harness::experiment::{run_experiment, ExperimentConfig, Task};
use gridtopo::harness::io::{read_samples_csv, write_samples_csv, ResultReport};
use gridtopo::harness::synth::{synth_feeder, FeederSpec};
use gridtopo::line_params::{learn_structure_and_params, LineConfig};
use gridtopo::missing::{learn_with_missing, MissingConfig, MissingSpec};
use gridtopo::topology::{
    estimate_injection_stats, learn_structure, EstimationConfig, StructureConfig, Topology,
};
use gridtopo::{analytic_moments, sample_voltages, Execution, GridError, InjectionModel, MomentSet, Network, NodeId};

/// Learn radial distribution grid topology, injection statistics and line
/// parameters from nodal voltage data.
#[derive(Parser, Debug)]
#[command(name = "gridtopo", version)]
struct Cli {
    /// TOML or JSON file with defaults for the flags below.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default, Clone)]
struct CommonArgs {
    /// Network JSON: nodes with roles, lines with impedance and status.
    #[arg(long, global = true)]
    network: Option<PathBuf>,
    /// Injection model JSON.
    #[arg(long, global = true)]
    inj: Option<PathBuf>,
    /// Sample count; a comma-separated grid for the reproduce commands.
    #[arg(long, global = true, value_delimiter = ',')]
    samples: Option<Vec<usize>>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Hidden-node spec JSON.
    #[arg(long, global = true)]
    missing: Option<PathBuf>,
    /// Relative tolerance for the missing-data residual checks.
    #[arg(long = "tol-rel", global = true)]
    tol_rel: Option<f64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Use population moments of the network and injection model.
    #[arg(long, global = true)]
    analytic: bool,
    /// Samples CSV (sample,node,eps,theta) to learn from.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Feeder size preset: bus_13_3, bus_29_1 or bus_83_11.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Seeds per sample size in the reproduce commands.
    #[arg(long = "n-seeds", global = true)]
    n_seeds: Option<usize>,
    /// Learner result JSON to score (eval).
    #[arg(long, global = true)]
    result: Option<PathBuf>,
    /// Run sequentially.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Random feeder and injection model.
    Synth,
    /// Draw voltage samples from a network and injection model.
    Simulate,
    /// Voltage moments per node.
    Moments,
    /// Structure from voltage magnitudes, then injection statistics.
    Learn,
    /// Structure and line parameters with known injection variances.
    LearnParams,
    /// Structure with hidden nodes.
    LearnMissing,
    /// Structural error of a result against the network.
    Eval,
    /// Injection-statistics and structure error vs sample size.
    ReproduceFig4,
    /// Missing-data structure error vs sample size and hidden count.
    ReproduceFig5,
}

/// File-level settings; any flag given on the command line wins.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    network: Option<PathBuf>,
    inj: Option<PathBuf>,
    samples: Option<Vec<usize>>,
    seed: Option<u64>,
    missing: Option<PathBuf>,
    tol_rel: Option<f64>,
    out: Option<PathBuf>,
    analytic: Option<bool>,
    data: Option<PathBuf>,
    preset: Option<String>,
    n_seeds: Option<usize>,
    result: Option<PathBuf>,
    sequential: Option<bool>,
    feeder: Option<FeederSpec>,
    experiment: Option<ExperimentConfig>,
}

#[derive(Debug, Default)]
struct Settings {
    args: CommonArgs,
    feeder: Option<FeederSpec>,
    experiment: Option<ExperimentConfig>,
}

impl Settings {
    fn resolve(cli: &Cli) -> anyhow::Result<Self> {
        let file: FileConfig = match &cli.config {
            None => FileConfig::default(),
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                if path.extension().is_some_and(|e| e == "json") {
                    serde_json::from_str(&text)?
                } else {
                    toml::from_str(&text)?
                }
            }
        };
        let c = cli.common.clone();
        let args = CommonArgs {
            network: c.network.or(file.network),
            inj: c.inj.or(file.inj),
            samples: c.samples.or(file.samples),
            seed: c.seed.or(file.seed),
            missing: c.missing.or(file.missing),
            tol_rel: c.tol_rel.or(file.tol_rel),
            out: c.out.or(file.out),
            analytic: c.analytic || file.analytic.unwrap_or(false),
            data: c.data.or(file.data),
            preset: c.preset.or(file.preset),
            n_seeds: c.n_seeds.or(file.n_seeds),
            result: c.result.or(file.result),
            sequential: c.sequential || file.sequential.unwrap_or(false),
        };
        Ok(Self { args, feeder: file.feeder, experiment: file.experiment })
    }

    fn exec(&self) -> Execution {
        if self.args.sequential { Execution::Sequential } else { Execution::Parallel }
    }

    fn seed(&self) -> u64 {
        self.args.seed.unwrap_or(0)
    }

    fn out_dir(&self) -> anyhow::Result<PathBuf> {
        let dir = self.args.out.clone().unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn network(&self) -> anyhow::Result<Network> {
        let path = self.args.network.as_ref().ok_or_else(|| anyhow!("--network is required"))?;
        Network::load(path).with_context(|| format!("loading {}", path.display()))
    }

    fn injections(&self) -> anyhow::Result<InjectionModel> {
        let path = self.args.inj.as_ref().ok_or_else(|| anyhow!("--inj is required"))?;
        InjectionModel::load(path).with_context(|| format!("loading {}", path.display()))
    }

    fn single_m(&self) -> anyhow::Result<usize> {
        match self.args.samples.as_deref() {
            Some([m]) => Ok(*m),
            Some(_) => bail!("--samples takes one value here"),
            None => bail!("--samples is required"),
        }
    }

    /// Moments over `observed` from a samples file, population moments or a
    /// fresh simulation, in that order of preference.
    fn moments(&self, network: &Network, observed: &[NodeId]) -> anyhow::Result<MomentSet> {
        if let Some(path) = &self.args.data {
            let samples = read_samples_csv(path).with_context(|| format!("loading {}", path.display()))?;
            return Ok(MomentSet::estimate(&samples.restrict(observed)?, observed, self.exec())?);
        }
        let forest = network.forest()?;
        let inj = self.injections()?;
        if self.args.analytic {
            return Ok(MomentSet::from_analytic(&analytic_moments(&forest, &inj)?, observed)?);
        }
        let m = self.single_m().context("give --data, --analytic or --samples")?;
        let samples = sample_voltages(&forest, &inj, m, self.seed(), self.exec())?;
        Ok(MomentSet::estimate(&samples.restrict(observed)?, observed, self.exec())?)
    }
}

fn save_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn synth(s: &Settings) -> anyhow::Result<()> {
    let spec = match (&s.feeder, &s.args.preset) {
        (Some(spec), _) => spec.clone(),
        (None, Some(name)) => FeederSpec::preset(name)?,
        (None, None) => FeederSpec::default(),
    };
    let feeder = synth_feeder(&spec, s.seed())?;
    let dir = s.out_dir()?;
    feeder.network.save(dir.join("network.json"))?;
    feeder.injections.save(dir.join("inj.json"))?;
    println!("wrote {} and {}", dir.join("network.json").display(), dir.join("inj.json").display());
    Ok(())
}

fn simulate(s: &Settings) -> anyhow::Result<()> {
    let forest = s.network()?.forest()?;
    let samples = sample_voltages(&forest, &s.injections()?, s.single_m()?, s.seed(), s.exec())?;
    let path = s.out_dir()?.join("samples.csv");
    write_samples_csv(&path, &samples)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn moments(s: &Settings) -> anyhow::Result<()> {
    let network = s.network()?;
    let loads = network.forest()?.loads().to_vec();
    save_json(&s.out_dir()?.join("moments.json"), &s.moments(&network, &loads)?.dump())
}

fn learn(s: &Settings) -> anyhow::Result<()> {
    let network = s.network()?;
    let forest = network.forest()?;
    let ms = s.moments(&network, forest.loads())?;
    let structure = learn_structure(&ms, &network.substation_children(), &StructureConfig::default())?;
    let mut report = ResultReport::new("learn", &structure.topology);
    report.selections = structure.selections.clone();
    if ms.has_theta() {
        let learned = structure.topology.with_impedances(&network.catalog())?;
        let est = estimate_injection_stats(&ms, &learned, &EstimationConfig::default())?;
        report.injections = Some(est.model);
        report.clamped = est.clamped;
    }
    save_json(&s.out_dir()?.join("result.json"), &report)
}

fn learn_params(s: &Settings) -> anyhow::Result<()> {
    let network = s.network()?;
    let forest = network.forest()?;
    let ms = s.moments(&network, forest.loads())?;
    let out = learn_structure_and_params(
        &ms,
        &s.injections()?,
        &network.substation_children(),
        &StructureConfig::default(),
        &LineConfig::default(),
    )?;
    let mut report = ResultReport::new("learn-params", &out.structure.topology);
    report.selections = out.structure.selections;
    report.edge_estimates = out.estimates;
    save_json(&s.out_dir()?.join("result.json"), &report)
}

fn learn_missing(s: &Settings) -> anyhow::Result<()> {
    let network = s.network()?;
    let forest = network.forest()?;
    let path = s.args.missing.as_ref().ok_or_else(|| anyhow!("--missing is required"))?;
    let spec = MissingSpec::load(path).with_context(|| format!("loading {}", path.display()))?;
    let hidden = spec.ids();
    let observed: Vec<NodeId> = forest.loads().iter().copied().filter(|id| !hidden.contains(id)).collect();
    let ms = s.moments(&network, &observed)?;
    let mut cfg = match ms.sample_count() {
        Some(m) => MissingConfig { strict: true, ..MissingConfig::for_samples(m) },
        None => MissingConfig::default(),
    };
    if let Some(tol) = s.args.tol_rel {
        cfg.tol_rel = tol;
    }
    let out =
        learn_with_missing(&ms, &spec, &network.catalog(), &s.injections()?, &network.substation_children(), &cfg)?;
    let mut report = ResultReport::new("learn-missing", &out.topology);
    report.events = out.events;
    save_json(&s.out_dir()?.join("result.json"), &report)
}

#[derive(Serialize)]
struct EvalReport {
    structural_error: f64,
    missing_edges: Vec<(NodeId, NodeId)>,
    extra_edges: Vec<(NodeId, NodeId)>,
}

fn eval(s: &Settings) -> anyhow::Result<()> {
    let forest = s.network()?.forest()?;
    let path = s.args.result.as_ref().ok_or_else(|| anyhow!("--result is required"))?;
    let report = ResultReport::load(path).with_context(|| format!("loading {}", path.display()))?;
    let truth = Topology::from_forest(&forest);
    let learned = report.topology(forest.slacks());
    let undirected = |t: &Topology| -> std::collections::BTreeSet<(NodeId, NodeId)> {
        t.parent.iter().map(|(&c, &p)| (c.min(p), c.max(p))).collect()
    };
    let (want, got) = (undirected(&truth), undirected(&learned));
    let ev = EvalReport {
        structural_error: learned.structural_error(&truth),
        missing_edges: want.difference(&got).copied().collect(),
        extra_edges: got.difference(&want).copied().collect(),
    };
    println!("structural_error {}", ev.structural_error);
    save_json(&s.out_dir()?.join("eval.json"), &ev)
}

fn reproduce(s: &Settings, fig5: bool) -> anyhow::Result<()> {
    let preset = s.args.preset.clone().unwrap_or_else(|| "bus_13_3".into());
    let mut cfg = match &s.experiment {
        Some(c) => c.clone(),
        None if fig5 => ExperimentConfig::fig5(&preset),
        None => ExperimentConfig::fig4(&preset),
    };
    cfg.tasks = if fig5 { vec![Task::Missing] } else { vec![Task::Structure, Task::Injections] };
    if s.args.preset.is_some() {
        cfg.preset = Some(preset);
        cfg.feeder = None;
    }
    if let Some(path) = &s.args.network {
        cfg.network = Some(path.clone());
    }
    if let Some(m) = &s.args.samples {
        cfg.samples = m.clone();
    }
    if let Some(seed) = s.args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = s.args.n_seeds {
        cfg.n_seeds = n;
    }
    if let Some(tol) = s.args.tol_rel {
        cfg.tol_rel = Some(tol);
    }
    cfg.analytic |= s.args.analytic;
    cfg.out = Some(s.out_dir()?);
    let report = run_experiment(&cfg, s.exec())?;
    for r in &report.summary {
        println!("{:<12} m={:<6} {:<18} {:.6} ± {:.6}", r.task, r.m, r.metric, r.mean, r.std_err);
    }
    println!("wrote {}", cfg.out.as_ref().expect("set above").join("curves.csv").display());
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let s = Settings::resolve(cli)?;
    match cli.command {
        Command::Synth => synth(&s),
        Command::Simulate => simulate(&s),
        Command::Moments => moments(&s),
        Command::Learn => learn(&s),
        Command::LearnParams => learn_params(&s),
        Command::LearnMissing => learn_missing(&s),
        Command::Eval => eval(&s),
        Command::ReproduceFig4 => reproduce(&s, false),
        Command::ReproduceFig5 => reproduce(&s, true),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let learner = e.chain().any(|c| c.downcast_ref::<GridError>().is_some_and(GridError::is_learner_failure));
            ExitCode::from(if learner { 2 } else { 1 })
        }
    }
}
