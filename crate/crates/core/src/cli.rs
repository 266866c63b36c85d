//! Command-line front end: parse, sample, assemble, solve, validate, report.
//!
//! Every run writes a `manifest.toml` next to its outputs. The manifest is a
//! complete configuration file (absolute input paths, the resolved sample
//! count, all settings) plus the hashes of inputs and outputs, so
//! `--config <out>/manifest.toml` regenerates the same bytes.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::admm::{self, AdmmSettings, PartitionDoc};
use crate::feeder_file::parse_feeder;
use crate::grid::{CurrentIndexing, FeederModel};
use crate::reconfig::{
    self, default_settings, validate_lol, write_sweep_csv, CostSpec, ReconfigError,
    ReconfigSolution,
};
use crate::scenario::{
    min_sample_size_mr3, parse_scenario_spec, sample_bounds, CorrelationModel, ForecastErrorSpec,
};
use crate::socp::SolverSettings;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "mgreconfig",
    version,
    about = "Risk-constrained microgrid reconfiguration"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Centralized solve at one λ.
    Solve(RunArgs),
    /// Centralized solves over an ascending λ list.
    Sweep(RunArgs),
    /// Distributed solve over an area partition.
    Distributed(RunArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Solve(_) => "solve",
            Command::Sweep(_) => "sweep",
            Command::Distributed(_) => "distributed",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::Solve(a) | Command::Sweep(a) | Command::Distributed(a) => a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Subgradient,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, conflicts_with = "lambda_list")]
    pub lambda: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub lambda_list: Option<Vec<f64>>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Sample count, or `auto` for the bound of the group-sparse surrogate.
    #[arg(long)]
    pub samples: Option<Samples>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub partition: Option<PathBuf>,
    /// One value or a comma-separated list (one distributed run each).
    #[arg(long, value_delimiter = ',')]
    pub kappa: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    #[arg(long)]
    pub check_central: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Samples {
    #[default]
    Auto,
    Count(u64),
}

impl std::str::FromStr for Samples {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(Samples::Auto);
        }
        match s.parse::<u64>() {
            Ok(n) if n > 0 => Ok(Samples::Count(n)),
            _ => Err(format!("expected a positive count or \"auto\", got {s:?}")),
        }
    }
}

impl fmt::Display for Samples {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Samples::Auto => f.write_str("auto"),
            Samples::Count(n) => write!(f, "{n}"),
        }
    }
}

impl Serialize for Samples {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Samples::Auto => s.serialize_str("auto"),
            Samples::Count(n) => s.serialize_u64(*n),
        }
    }
}

impl<'de> Deserialize<'de> for Samples {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(u64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(0) => Err(serde::de::Error::custom("samples must be positive")),
            Raw::Count(n) => Ok(Samples::Count(n)),
            Raw::Word(w) => w.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Overrides of the centralized solver settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol_primal: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol_dual: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol_feas: Option<f64>,
}

impl SolverDoc {
    fn apply(&self, mut s: SolverSettings) -> SolverSettings {
        if let Some(v) = self.max_iters {
            s.max_iters = v;
        }
        if let Some(v) = self.tol_primal {
            s.tol_primal = v;
        }
        if let Some(v) = self.tol_dual {
            s.tol_dual = v;
        }
        if let Some(v) = self.tol_feas {
            s.tol_feas = v;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmmDoc {
    #[serde(default = "default_kappas")]
    pub kappa: Vec<f64>,
    #[serde(default = "default_admm_iters")]
    pub max_iters: usize,
    #[serde(default = "default_admm_tol")]
    pub tol: f64,
    #[serde(default = "default_step")]
    pub baseline_step: f64,
    /// Iterations of the baseline; defaults to `max_iters`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_iters: Option<usize>,
}

fn default_kappas() -> Vec<f64> {
    vec![1.0]
}
fn default_admm_iters() -> usize {
    AdmmSettings::default().max_iters
}
fn default_admm_tol() -> f64 {
    AdmmSettings::default().tol
}
fn default_step() -> f64 {
    0.1
}

impl Default for AdmmDoc {
    fn default() -> Self {
        AdmmDoc {
            kappa: default_kappas(),
            max_iters: default_admm_iters(),
            tol: default_admm_tol(),
            baseline_step: default_step(),
            baseline_iters: None,
        }
    }
}

fn default_rho() -> f64 {
    0.01
}
fn default_beta() -> f64 {
    0.05
}
fn default_validate() -> usize {
    10_000
}

/// Run configuration file. Relative paths are taken from the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub feeder: PathBuf,
    /// Forecast-error spec; without one the forecasts are taken as exact.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lambdas: Vec<f64>,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub samples: Samples,
    #[serde(default)]
    pub seed: u64,
    /// Fresh scenarios drawn to check the loss-of-load rate (0 skips it).
    #[serde(default = "default_validate")]
    pub validate_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Baseline>,
    #[serde(default)]
    pub check_central: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default = "default_cost")]
    pub cost: CostSpec,
    #[serde(default)]
    pub solver: SolverDoc,
    #[serde(default)]
    pub admm: AdmmDoc,
    /// Written into manifests; ignored on input.
    #[serde(default, skip_serializing)]
    pub provenance: Option<toml::Table>,
}

fn default_cost() -> CostSpec {
    CostSpec::weighted(1.0, 1.0)
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
        let src = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&src).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let abs = |p: &Path| absolute(&base.join(p));
        cfg.feeder = abs(&cfg.feeder)?;
        cfg.scenario = cfg.scenario.as_deref().map(abs).transpose()?;
        cfg.partition = cfg.partition.as_deref().map(abs).transpose()?;
        cfg.out = Some(abs(cfg.out.as_deref().unwrap_or(Path::new("out")))?);
        cfg.provenance = None;
        Ok(cfg)
    }

    /// Applies command-line overrides.
    pub fn apply(&mut self, a: &RunArgs) -> anyhow::Result<()> {
        if let Some(l) = a.lambda {
            self.lambda = Some(l);
            self.lambdas.clear();
        }
        if let Some(ls) = &a.lambda_list {
            self.lambda = None;
            self.lambdas = ls.clone();
        }
        if let Some(v) = a.rho {
            self.rho = v;
        }
        if let Some(v) = a.beta {
            self.beta = v;
        }
        if let Some(v) = a.samples {
            self.samples = v;
        }
        if let Some(v) = a.seed {
            self.seed = v;
        }
        if let Some(p) = &a.partition {
            self.partition = Some(absolute(p)?);
        }
        if let Some(k) = &a.kappa {
            self.admm.kappa = k.clone();
        }
        if a.baseline.is_some() {
            self.baseline = a.baseline;
        }
        self.check_central |= a.check_central;
        if let Some(o) = &a.out {
            self.out = Some(absolute(o)?);
        }
        Ok(())
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        for (name, v) in [("rho", self.rho), ("beta", self.beta)] {
            if !(v > 0.0 && v < 1.0) {
                bail!("{name} must lie in (0, 1), got {v}");
            }
        }
        if self.lambda.is_some() && !self.lambdas.is_empty() {
            bail!("give either lambda or lambdas, not both");
        }
        if self
            .lambda_list()
            .iter()
            .any(|l| !(*l >= 0.0 && l.is_finite()))
        {
            bail!("lambda values must be finite and nonnegative");
        }
        if self.admm.kappa.is_empty()
            || self.admm.kappa.iter().any(|k| !(*k > 0.0 && k.is_finite()))
        {
            bail!("kappa values must be positive");
        }
        Ok(())
    }

    pub fn lambda_list(&self) -> Vec<f64> {
        match self.lambda {
            Some(l) => vec![l],
            None if self.lambdas.is_empty() => vec![0.0],
            None => self.lambdas.clone(),
        }
    }

    fn single_lambda(&self, command: &str) -> anyhow::Result<f64> {
        match self.lambda_list().as_slice() {
            [l] => Ok(*l),
            _ => bail!("{command} takes a single lambda"),
        }
    }

    fn out_dir(&self) -> &Path {
        self.out.as_deref().expect("set by load")
    }
}

fn absolute(p: &Path) -> anyhow::Result<PathBuf> {
    std::path::absolute(p).with_context(|| format!("resolving {}", p.display()))
}

/// Inputs after parsing and sampling.
struct Prepared {
    model: FeederModel,
    spec: ForecastErrorSpec,
    corr: CorrelationModel,
    bounds: crate::scenario::NetInjectionBounds,
    k: u64,
    k_formula: u64,
    inputs: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn prepare(cfg: &RunConfig) -> anyhow::Result<Prepared> {
    let mut inputs = BTreeMap::new();
    let read = |p: &Path, inputs: &mut BTreeMap<String, String>| -> anyhow::Result<String> {
        let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
        inputs.insert(p.display().to_string(), sha256_hex(&bytes));
        String::from_utf8(bytes).with_context(|| format!("{} is not UTF-8", p.display()))
    };
    let model = parse_feeder(&read(&cfg.feeder, &mut inputs)?)
        .with_context(|| format!("feeder {}", cfg.feeder.display()))?;
    let (spec, corr) = match &cfg.scenario {
        Some(p) => {
            let src = read(p, &mut inputs)?;
            let base = p.parent().unwrap_or(Path::new("."));
            parse_scenario_spec(&src, &model, base)
                .with_context(|| format!("scenario spec {}", p.display()))?
        }
        None => (
            ForecastErrorSpec::zero(&model),
            CorrelationModel::Independent,
        ),
    };
    let k_formula = min_sample_size_mr3(
        cfg.rho,
        cfg.beta,
        model.dg_count() as u64,
        model.line_phase_count() as u64,
    )?;
    let k = match cfg.samples {
        Samples::Auto => k_formula,
        Samples::Count(n) => n,
    };
    eprintln!(
        "samples: K = {k} (bound at rho={}, beta={}: {k_formula})",
        cfg.rho, cfg.beta
    );
    let k_usize = usize::try_from(k).map_err(|_| anyhow!("sample count {k} too large"))?;
    let bounds = sample_bounds(&model, &spec, &corr, k_usize, cfg.seed)?;
    Ok(Prepared {
        model,
        spec,
        corr,
        bounds,
        k,
        k_formula,
        inputs,
    })
}

#[derive(Debug, Serialize)]
struct LineState {
    line: String,
    switchable: bool,
    used: bool,
    current_mag_a: f64,
}

#[derive(Debug, Serialize)]
struct PhaseCurrent {
    line: String,
    phase: String,
    re_a: f64,
    im_a: f64,
}

#[derive(Debug, Serialize)]
struct SolutionDoc<'a> {
    status: &'static str,
    lambda: f64,
    objective: f64,
    cost: f64,
    open_switches: Vec<String>,
    radial: bool,
    max_violation: f64,
    iterations: usize,
    topology: Vec<LineState>,
    currents: Vec<PhaseCurrent>,
    dg_setpoints: &'a [reconfig::DgSetpoint],
    lol_margins: &'a [reconfig::LolMargin],
}

fn line_name(model: &FeederModel, l: usize) -> String {
    let line = &model.lines()[l];
    format!("{}-{}", line.from, line.to)
}

fn solution_doc<'a>(model: &FeederModel, s: &'a ReconfigSolution) -> SolutionDoc<'a> {
    let idx = CurrentIndexing::new(model);
    SolutionDoc {
        status: "optimal",
        lambda: s.lambda,
        objective: s.objective,
        cost: s.cost,
        open_switches: s.open_lines.iter().map(|&l| line_name(model, l)).collect(),
        radial: s.radial,
        max_violation: s.max_violation,
        iterations: s.iterations,
        topology: (0..model.lines().len())
            .map(|l| LineState {
                line: line_name(model, l),
                switchable: model.lines()[l].switchable,
                used: s.used[l],
                current_mag_a: s.line_current_mag[l],
            })
            .collect(),
        currents: idx
            .slots()
            .iter()
            .enumerate()
            .map(|(k, slot)| PhaseCurrent {
                line: line_name(model, slot.line),
                phase: slot.phase.label().to_string(),
                re_a: s.xi[2 * k],
                im_a: s.xi[2 * k + 1],
            })
            .collect(),
        dg_setpoints: &s.dg_setpoints,
        lol_margins: &s.lol_margin,
    }
}

#[derive(Debug, Serialize)]
struct Failure {
    status: &'static str,
    lambda: f64,
    message: String,
}

#[derive(Debug, Serialize)]
struct ValidationDoc {
    scenarios: usize,
    seed: u64,
    joint_rate: f64,
    target: f64,
    violated: Vec<String>,
    marginal: BTreeMap<String, f64>,
}

fn json<T: Serialize>(v: &T) -> anyhow::Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v)?;
    s.push(b'\n');
    Ok(s)
}

fn validation(cfg: &RunConfig, p: &Prepared, s: &ReconfigSolution) -> anyhow::Result<Vec<u8>> {
    let seed = cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let r = validate_lol(s, &p.model, &p.spec, &p.corr, cfg.validate_samples, seed)?;
    json(&ValidationDoc {
        scenarios: cfg.validate_samples,
        seed,
        joint_rate: r.joint_rate,
        target: 1.0 - cfg.rho,
        violated: r
            .violated
            .iter()
            .map(|(n, ph)| format!("{n}{}", ph.label()))
            .collect(),
        marginal: r
            .marginal
            .iter()
            .map(|((n, ph), v)| (format!("{n}{}", ph.label()), *v))
            .collect(),
    })
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> csv::Result<()>) -> anyhow::Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn fmt_kappa(k: f64) -> String {
    format!("{k}")
}

/// Files of one run, kept in memory until the run is over so that a failing
/// run leaves nothing behind.
struct Bundle {
    files: Vec<(String, Vec<u8>)>,
}

impl Bundle {
    fn new() -> Self {
        Bundle { files: Vec::new() }
    }

    fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    fn write(mut self, cfg: &RunConfig, command: &str, p: &Prepared) -> anyhow::Result<()> {
        let mut manifest_cfg = cfg.clone();
        manifest_cfg.samples = Samples::Count(p.k);
        manifest_cfg.out = None;
        let mut text = String::from("# Regenerate with: mgreconfig ");
        text.push_str(command);
        text.push_str(" --config manifest.toml --out <dir>\n");
        text.push_str(&toml::to_string(&manifest_cfg)?);
        let mut prov = toml::Table::new();
        prov.insert("command".into(), command.into());
        prov.insert(
            "version".into(),
            env!("CARGO_PKG_VERSION").to_string().into(),
        );
        prov.insert("k_formula".into(), toml::Value::Integer(p.k_formula as i64));
        let inputs: toml::Table = p
            .inputs
            .iter()
            .map(|(k, v)| (k.clone(), toml::Value::from(v.clone())))
            .collect();
        prov.insert("inputs".into(), inputs.into());
        let mut outputs = toml::Table::new();
        for (name, bytes) in &self.files {
            outputs.insert(name.clone(), sha256_hex(bytes).into());
        }
        prov.insert("outputs".into(), outputs.into());
        let mut wrapper = toml::Table::new();
        wrapper.insert("provenance".into(), prov.into());
        text.push('\n');
        text.push_str(&toml::to_string(&wrapper)?);
        self.add("manifest.toml", text.into_bytes());

        let out = cfg.out_dir();
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let stage = out.join(format!(".staging-{}", std::process::id()));
        std::fs::create_dir_all(&stage)?;
        let staged = (|| -> anyhow::Result<()> {
            for (name, bytes) in &self.files {
                std::fs::write(stage.join(name), bytes)?;
            }
            for (name, _) in &self.files {
                std::fs::rename(stage.join(name), out.join(name))?;
            }
            Ok(())
        })();
        let _ = std::fs::remove_dir_all(&stage);
        staged.with_context(|| format!("writing outputs to {}", out.display()))
    }
}

fn solver_settings(cfg: &RunConfig) -> SolverSettings {
    let mut s = cfg.solver.apply(default_settings());
    s.record_trace = false;
    s
}

fn cmd_solve(cfg: &RunConfig) -> anyhow::Result<i32> {
    let lambda = cfg.single_lambda("solve")?;
    let p = prepare(cfg)?;
    let mut bundle = Bundle::new();
    let code = match reconfig::solve(
        &p.model,
        &p.bounds,
        &cfg.cost,
        lambda,
        &solver_settings(cfg),
    ) {
        Ok(s) => {
            bundle.add("solution.json", json(&solution_doc(&p.model, &s))?);
            let points = [reconfig::SweepPoint {
                lambda,
                outcome: Ok(s),
                last_feasible: Some(0),
            }];
            bundle.add(
                "currents.csv",
                csv_bytes(|w| write_sweep_csv(&p.model, &points, w))?,
            );
            let Ok(s) = &points[0].outcome else {
                unreachable!()
            };
            if cfg.validate_samples > 0 {
                bundle.add("validation.json", validation(cfg, &p, s)?);
            }
            eprintln!("optimal: {} open switches", s.open_count());
            EXIT_OK
        }
        Err(ReconfigError::Infeasible(m)) => {
            bundle.add(
                "solution.json",
                json(&Failure {
                    status: "infeasible",
                    lambda,
                    message: format!("problem is infeasible{m}"),
                })?,
            );
            eprintln!("infeasible at lambda {lambda}");
            EXIT_INFEASIBLE
        }
        Err(e) => return Err(e.into()),
    };
    bundle.write(cfg, "solve", &p)?;
    Ok(code)
}

#[derive(Debug, Serialize)]
struct SweepRow {
    lambda: f64,
    status: &'static str,
    open_switches: Option<Vec<String>>,
    objective: Option<f64>,
    cost: Option<f64>,
    last_feasible_lambda: Option<f64>,
    message: Option<String>,
}

fn cmd_sweep(cfg: &RunConfig) -> anyhow::Result<i32> {
    let lambdas = cfg.lambda_list();
    let p = prepare(cfg)?;
    let points = reconfig::sweep_lambda(
        &p.model,
        &p.bounds,
        &cfg.cost,
        &lambdas,
        &solver_settings(cfg),
    )?;
    let mut rows = Vec::new();
    for pt in &points {
        let last = pt.last_feasible.map(|i| points[i].lambda);
        rows.push(match &pt.outcome {
            Ok(s) => SweepRow {
                lambda: pt.lambda,
                status: "optimal",
                open_switches: Some(
                    s.open_lines
                        .iter()
                        .map(|&l| line_name(&p.model, l))
                        .collect(),
                ),
                objective: Some(s.objective),
                cost: Some(s.cost),
                last_feasible_lambda: last,
                message: None,
            },
            Err(ReconfigError::Infeasible(_)) => SweepRow {
                lambda: pt.lambda,
                status: "infeasible",
                open_switches: None,
                objective: None,
                cost: None,
                last_feasible_lambda: last,
                message: None,
            },
            Err(e) => SweepRow {
                lambda: pt.lambda,
                status: "error",
                open_switches: None,
                objective: None,
                cost: None,
                last_feasible_lambda: last,
                message: Some(e.to_string()),
            },
        });
    }
    if let Some(r) = rows.iter().find(|r| r.status == "error") {
        bail!(
            "lambda {}: {}",
            r.lambda,
            r.message.as_deref().unwrap_or_default()
        );
    }
    let mut bundle = Bundle::new();
    bundle.add(
        "currents.csv",
        csv_bytes(|w| write_sweep_csv(&p.model, &points, w))?,
    );
    bundle.add("sweep.json", json(&rows)?);
    let any = points.iter().any(|pt| pt.outcome.is_ok());
    for r in &rows {
        eprintln!(
            "lambda {}: {}{}",
            r.lambda,
            r.status,
            r.open_switches
                .as_ref()
                .map(|o| format!(", {} open", o.len()))
                .unwrap_or_default()
        );
    }
    bundle.write(cfg, "sweep", &p)?;
    Ok(if any { EXIT_OK } else { EXIT_INFEASIBLE })
}

#[derive(Debug, Serialize)]
struct DistributedRow {
    kappa: f64,
    converged: bool,
    iterations: usize,
    dual_sum_max: f64,
    iterations_to_tol: Option<usize>,
    rel_dist_to_central: Option<f64>,
}

#[derive(Debug, Serialize)]
struct DistributedDoc {
    lambda: f64,
    areas: Vec<String>,
    tie_lines: Vec<String>,
    runs: Vec<DistributedRow>,
    central_objective: Option<f64>,
    baseline_iterations_to_tol: Option<usize>,
}

fn rel_dist(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    d / b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12)
}

fn cmd_distributed(cfg: &RunConfig) -> anyhow::Result<i32> {
    let lambda = cfg.single_lambda("distributed")?;
    let part_path = cfg
        .partition
        .as_ref()
        .ok_or_else(|| anyhow!("distributed runs need a partition file"))?;
    let mut p = prepare(cfg)?;
    let part_src =
        std::fs::read(part_path).with_context(|| format!("reading {}", part_path.display()))?;
    p.inputs
        .insert(part_path.display().to_string(), sha256_hex(&part_src));
    let part = PartitionDoc::parse(std::str::from_utf8(&part_src)?)?
        .to_partition(&p.model)
        .with_context(|| format!("partition {}", part_path.display()))?;

    let central = if cfg.check_central {
        match reconfig::solve(
            &p.model,
            &p.bounds,
            &cfg.cost,
            lambda,
            &solver_settings(cfg),
        ) {
            Ok(s) => Some(s),
            Err(ReconfigError::Infeasible(_)) => {
                eprintln!("infeasible at lambda {lambda}");
                return infeasible_bundle(cfg, &p, lambda);
            }
            Err(e) => return Err(e.into()),
        }
    } else {
        None
    };
    let central_xi = central.as_ref().map(|s| s.xi.as_slice());
    let base = AdmmSettings {
        max_iters: cfg.admm.max_iters,
        tol: cfg.admm.tol,
        ..AdmmSettings::default()
    };
    let multi = cfg.admm.kappa.len() > 1;
    let suffix = |k: f64| {
        if multi {
            format!("_kappa_{}", fmt_kappa(k))
        } else {
            String::new()
        }
    };
    let mut bundle = Bundle::new();
    let mut rows = Vec::new();
    let mut all_converged = true;
    for &kappa in &cfg.admm.kappa {
        let settings = AdmmSettings {
            kappa,
            ..base.clone()
        };
        let out = match admm::run(
            &p.model, &p.bounds, &cfg.cost, lambda, &part, &settings, central_xi,
        ) {
            Ok(o) => o,
            Err(admm::AdmmError::LocalInfeasible { area }) => {
                eprintln!("area {area}: local subproblem infeasible");
                return infeasible_bundle(cfg, &p, lambda);
            }
            Err(e) => return Err(e.into()),
        };
        all_converged &= out.converged;
        let sfx = suffix(kappa);
        bundle.add(
            format!("solution{sfx}.json"),
            json(&solution_doc(&p.model, &out.solution))?,
        );
        bundle.add(
            format!("trace{sfx}.csv"),
            csv_bytes(|w| out.trace.write_csv(w))?,
        );
        bundle.add(
            format!("messages{sfx}.csv"),
            csv_bytes(|w| out.messages.write_csv(&part, w))?,
        );
        eprintln!(
            "kappa {kappa}: {} after {} iterations",
            if out.converged {
                "converged"
            } else {
                "not converged"
            },
            out.iterations
        );
        rows.push(DistributedRow {
            kappa,
            converged: out.converged,
            iterations: out.iterations,
            dual_sum_max: out.dual_sum_max,
            iterations_to_tol: out.trace.iterations_to(cfg.admm.tol),
            rel_dist_to_central: central_xi.map(|c| rel_dist(&out.solution.xi, c)),
        });
    }
    let mut baseline_iters = None;
    if let Some(Baseline::Subgradient) = cfg.baseline {
        let settings = AdmmSettings {
            kappa: cfg.admm.kappa[0],
            max_iters: cfg.admm.baseline_iters.unwrap_or(cfg.admm.max_iters),
            ..base.clone()
        };
        let trace = admm::subgradient_baseline(
            &p.model,
            &p.bounds,
            &cfg.cost,
            lambda,
            &part,
            &settings,
            cfg.admm.baseline_step,
            central_xi,
        )?;
        baseline_iters = trace.iterations_to(cfg.admm.tol);
        bundle.add("trace_subgradient.csv", csv_bytes(|w| trace.write_csv(w))?);
    }
    let doc = DistributedDoc {
        lambda,
        areas: part.areas.iter().map(|a| a.name.clone()).collect(),
        tie_lines: part
            .ties
            .iter()
            .map(|t| line_name(&p.model, t.line))
            .collect(),
        runs: rows,
        central_objective: central.as_ref().map(|s| s.objective),
        baseline_iterations_to_tol: baseline_iters,
    };
    bundle.add("distributed.json", json(&doc)?);
    bundle.write(cfg, "distributed", &p)?;
    Ok(if all_converged {
        EXIT_OK
    } else {
        EXIT_NOT_CONVERGED
    })
}

fn infeasible_bundle(cfg: &RunConfig, p: &Prepared, lambda: f64) -> anyhow::Result<i32> {
    let mut bundle = Bundle::new();
    bundle.add(
        "solution.json",
        json(&Failure {
            status: "infeasible",
            lambda,
            message: "problem is infeasible".into(),
        })?,
    );
    bundle.write(cfg, "distributed", p)?;
    Ok(EXIT_INFEASIBLE)
}

/// Runs a parsed command and returns its exit code.
pub fn run(cli: &Cli) -> i32 {
    let result = (|| -> anyhow::Result<i32> {
        let args = cli.command.args();
        let mut cfg = RunConfig::load(&args.config)?;
        cfg.apply(args)?;
        cfg.validate()?;
        match &cli.command {
            Command::Solve(_) => cmd_solve(&cfg),
            Command::Sweep(_) => cmd_sweep(&cfg),
            Command::Distributed(_) => cmd_distributed(&cfg),
        }
    })();
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error ({}): {e:#}", cli.command.name());
            EXIT_ERROR
        }
    }
}

/// Entry point for the binary: parses `args` and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_parse() {
        assert_eq!("auto".parse::<Samples>().unwrap(), Samples::Auto);
        assert_eq!("42".parse::<Samples>().unwrap(), Samples::Count(42));
        assert!("0".parse::<Samples>().is_err());
        assert!("many".parse::<Samples>().is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let src = r#"
            feeder = "/x/feeder.toml"
            lambdas = [0.0, 10.0]
            samples = 50
            seed = 3
            [admm]
            kappa = [0.5, 2.0]
        "#;
        let cfg: RunConfig = toml::from_str(src).unwrap();
        assert_eq!(cfg.samples, Samples::Count(50));
        assert_eq!(cfg.rho, 0.01);
        let back: RunConfig = toml::from_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn flags_override_config() {
        let mut cfg: RunConfig = toml::from_str("feeder = \"/f.toml\"\nlambda = 3.0").unwrap();
        let cli = Cli::try_parse_from([
            "mgreconfig",
            "sweep",
            "--config",
            "c.toml",
            "--lambda-list",
            "0,1,2",
            "--samples",
            "auto",
            "--rho",
            "0.1",
            "--kappa",
            "0.5,1",
        ])
        .unwrap();
        cfg.apply(cli.command.args()).unwrap();
        assert_eq!(cfg.lambda_list(), vec![0.0, 1.0, 2.0]);
        assert_eq!(cfg.rho, 0.1);
        assert_eq!(cfg.admm.kappa, vec![0.5, 1.0]);
        cfg.validate().unwrap();
    }

    #[test]
    fn bad_probabilities_rejected() {
        let cfg: RunConfig = toml::from_str("feeder = \"/f.toml\"\nrho = 1.5").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_config_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("feeder = \"/f.toml\"\nlamda = 1").is_err());
    }
}
