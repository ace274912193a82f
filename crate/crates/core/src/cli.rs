//! Implementations of the `covsteer` subcommands.
//!
//! Every command writes its artifacts plus a `manifest_<command>.json`
//! listing each file with its SHA-256 digest. Wall-clock timings appear in
//! the manifest only, so all other artifacts are reproducible byte for byte.
//!
//! Exit codes: 0 success, 2 input error, 3 runtime error, 4 non-convergence.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::export::{self, EllipseRow, EnvelopeRow, FanRow, MeanRow, NormRow, PlotMeta, ScatterRow};
use crate::linalg::{matrix_to_rows, max_eigenvalue, vector_to_vec, Matrix};
use crate::model::{load_model, MjlsModel, ModelError};
use crate::montecarlo::{self, McError, McReport, SimulationConfig, Trajectory};
use crate::propagation::{
    evaluate_cost, propagate_policy, CovarianceTrajectory, MeanTrajectory, Policy, PropagationError,
};
use crate::steering::{run_algorithm1, solve_two_step, SteeringError, SteeringOptions, SteeringSolution};

#[derive(Debug)]
pub enum CliError {
    /// Bad or missing input: exit 2.
    Input(String),
    /// Failure while computing: exit 3.
    Runtime(String),
    /// The refinement loop stopped without meeting its tolerance: exit 4.
    NotConverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::NotConverged(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
            CliError::NotConverged(m) => write!(f, "not converged: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<SteeringError> for CliError {
    fn from(e: SteeringError) -> Self {
        match e {
            SteeringError::InvalidOptions(_) | SteeringError::InvalidRisk(_) => CliError::Input(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<McError> for CliError {
    fn from(e: McError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<PropagationError> for CliError {
    fn from(e: PropagationError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub model_path: Option<String>,
    pub policy_path: Option<String>,
    pub backend: String,
    pub options: BTreeMap<String, serde_json::Value>,
    pub out_dir: String,
    pub status: String,
    /// File name to hex SHA-256.
    pub artifacts: BTreeMap<String, String>,
    /// Seconds, by stage.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    fn new(command: &str, out: &Path) -> Self {
        Self {
            command: command.into(),
            model_path: None,
            policy_path: None,
            backend: crate::conic::Backend::from_env().as_str().into(),
            options: BTreeMap::new(),
            out_dir: out.display().to_string(),
            status: "ok".into(),
            artifacts: BTreeMap::new(),
            timings: BTreeMap::new(),
        }
    }

    fn option(&mut self, key: &str, value: impl Serialize) {
        self.options.insert(key.into(), serde_json::to_value(value).expect("option values serialize"));
    }

    pub fn file_name(command: &str) -> String {
        format!("manifest_{command}.json")
    }

    fn write(mut self, out: &Path, files: &[String]) -> Result<Self, CliError> {
        for f in files {
            let bytes = fs::read(out.join(f)).map_err(|e| CliError::Runtime(format!("{f}: {e}")))?;
            self.artifacts.insert(f.clone(), hex::encode(Sha256::digest(&bytes)));
        }
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        write_file(&out.join(Self::file_name(&self.command)), &text)?;
        Ok(self)
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn prepare_out(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Input(format!("cannot create {}: {e}", out.display())))
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("artifact serializes")
}

/// Writes `name` into `out` and records it.
struct Artifacts<'a> {
    out: &'a Path,
    files: Vec<String>,
}

impl<'a> Artifacts<'a> {
    fn new(out: &'a Path) -> Self {
        Self { out, files: Vec::new() }
    }

    fn text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        write_file(&self.out.join(name), text)?;
        self.files.push(name.into());
        Ok(())
    }

    fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<(), CliError> {
        export::write_csv(&self.out.join(name), rows).map_err(CliError::Runtime)?;
        self.files.push(name.into());
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Trajectory export

#[derive(Serialize)]
struct TrajectoryFile {
    horizon: usize,
    num_modes: usize,
    rho: Vec<Vec<f64>>,
    mu: Vec<Vec<f64>>,
    q: Vec<Vec<Vec<f64>>>,
    xbar: Vec<Vec<Vec<f64>>>,
    ubar: Vec<Vec<Vec<f64>>>,
    s: Vec<Vec<Vec<Vec<f64>>>>,
    sigma: Vec<Vec<Vec<f64>>>,
    l: Vec<Vec<Vec<Vec<f64>>>>,
    y: Vec<Vec<Vec<Vec<f64>>>>,
}

fn trajectory_file(tau: &MeanTrajectory, xi: &CovarianceTrajectory) -> TrajectoryFile {
    let vv = |x: &Vec<Vec<crate::linalg::Vector>>| x.iter().map(|r| r.iter().map(vector_to_vec).collect()).collect();
    let mm = |x: &Vec<Vec<Matrix>>| x.iter().map(|r| r.iter().map(matrix_to_rows).collect()).collect();
    TrajectoryFile {
        horizon: tau.horizon(),
        num_modes: tau.num_modes(),
        rho: tau.rho.iter().map(vector_to_vec).collect(),
        mu: tau.mu.iter().map(vector_to_vec).collect(),
        q: vv(&tau.q),
        xbar: vv(&tau.xbar),
        ubar: vv(&tau.ubar),
        s: mm(&xi.s),
        sigma: xi.sigma.iter().map(matrix_to_rows).collect(),
        l: mm(&xi.l),
        y: mm(&xi.y),
    }
}

#[derive(Serialize)]
struct MomentRow {
    k: usize,
    mode: usize,
    rho: f64,
    q: String,
    xbar: String,
    s: String,
}

#[derive(Serialize)]
struct TotalRow {
    k: usize,
    mu: String,
    sigma: String,
}

fn flat(v: impl IntoIterator<Item = f64>) -> String {
    v.into_iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ")
}

/// Writes `trajectories.json`, `moments.csv` (one row per `(k, i)`, vectors
/// and row-major matrices as space-separated lists) and `totals.csv`.
fn write_trajectories(a: &mut Artifacts, tau: &MeanTrajectory, xi: &CovarianceTrajectory) -> Result<(), CliError> {
    a.text("trajectories.json", &json(&trajectory_file(tau, xi)))?;
    let mut rows = Vec::new();
    for k in 0..tau.rho.len() {
        for i in 0..tau.num_modes() {
            rows.push(MomentRow {
                k,
                mode: i,
                rho: tau.rho[k][i],
                q: flat(tau.q[k][i].iter().copied()),
                xbar: flat(tau.xbar[k][i].iter().copied()),
                s: flat(xi.s[k][i].transpose().iter().copied()),
            });
        }
    }
    a.csv("moments.csv", &rows)?;
    let totals: Vec<TotalRow> = (0..tau.mu.len())
        .map(|k| TotalRow {
            k,
            mu: flat(tau.mu[k].iter().copied()),
            sigma: flat(xi.sigma[k].transpose().iter().copied()),
        })
        .collect();
    a.csv("totals.csv", &totals)
}

fn load_policy(path: &Path, model: &MjlsModel) -> Result<Policy, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read policy {}: {e}", path.display())))?;
    let policy = Policy::from_json(&text).map_err(|e| CliError::Input(format!("policy {}: {e}", path.display())))?;
    policy.check_dimensions(model).map_err(|e| CliError::Runtime(format!("policy {}: {e}", path.display())))?;
    Ok(policy)
}

// ---------------------------------------------------------------------------
// Commands

pub struct PropagateArgs {
    pub model: PathBuf,
    pub policy: Option<PathBuf>,
    pub out: PathBuf,
}

/// Propagates the moments of a model under a policy (zero policy by default).
pub fn cmd_propagate(args: &PropagateArgs) -> Result<RunManifest, CliError> {
    let start = Instant::now();
    let (model, _) = load_model(&args.model)?;
    let policy = match &args.policy {
        Some(p) => load_policy(p, &model)?,
        None => Policy::zero(&model),
    };
    prepare_out(&args.out)?;
    let (tau, xi) = propagate_policy(&model, &policy)?;
    let mut a = Artifacts::new(&args.out);
    write_trajectories(&mut a, &tau, &xi)?;
    a.text("cost.json", &json(&evaluate_cost(&tau, &xi, &model)))?;
    let mut m = RunManifest::new("propagate", &args.out);
    m.model_path = Some(args.model.display().to_string());
    m.policy_path = args.policy.as_ref().map(|p| p.display().to_string());
    m.timings.insert("total".into(), start.elapsed().as_secs_f64());
    let files = a.files;
    m.write(&args.out, &files)
}

pub struct SolveArgs {
    pub model: PathBuf,
    pub out: PathBuf,
    pub options: SteeringOptions,
    /// Overrides the model file's terminal chance-constraint flag.
    pub include_terminal_cc: Option<bool>,
}

#[derive(Serialize)]
struct StageSummary {
    stage: String,
    iteration: usize,
    status: String,
    retried: bool,
    backend: String,
    iterations: u32,
    primal_residual: f64,
    dual_residual: f64,
    gap: f64,
}

#[derive(Serialize)]
struct SolutionFile<'a> {
    status: crate::steering::SteeringStatus,
    pipeline: &'a str,
    iterations: usize,
    cost: crate::propagation::CostBreakdown,
    mean_objective: f64,
    covariance_objective: f64,
    terminal_mean_error: f64,
    terminal_covariance_excess: f64,
    flags: &'a [String],
    slack_history: &'a [crate::steering::SlackReport],
    stages: Vec<StageSummary>,
}

/// Runs the refinement loop when the model carries chance constraints and
/// the two-step pipeline otherwise.
pub fn cmd_solve(args: &SolveArgs) -> Result<RunManifest, CliError> {
    let start = Instant::now();
    let (model, mut cc) = load_model(&args.model)?;
    if let Some(t) = args.include_terminal_cc {
        cc.include_terminal = t;
    }
    prepare_out(&args.out)?;
    let (pipeline, sol) = if cc.is_empty() {
        ("two_step", solve_two_step(&model, &args.options)?)
    } else {
        ("refinement", run_algorithm1(&model, &cc, &args.options)?)
    };
    let mut a = Artifacts::new(&args.out);
    write_solution(&mut a, &model, pipeline, &sol)?;
    let mut m = RunManifest::new("solve", &args.out);
    m.model_path = Some(args.model.display().to_string());
    m.backend = args.options.solver.backend.as_str().into();
    m.option("tol", args.options.tol);
    m.option("alpha_init", args.options.alpha_init);
    m.option("eta", args.options.eta);
    m.option("max_iter", args.options.max_iter);
    m.option("include_terminal_cc", cc.include_terminal);
    for (j, st) in sol.stages.iter().enumerate() {
        m.timings.insert(format!("{:03}_{}_{}", j, st.stage, st.iteration), st.stats.solve_seconds);
    }
    m.timings.insert("total".into(), start.elapsed().as_secs_f64());
    if !sol.converged() {
        m.status = "max_iterations".into();
    }
    let files = a.files;
    let m = m.write(&args.out, &files)?;
    if !sol.converged() {
        let last = sol.slack_history.last().map_or(f64::NAN, |s| s.max());
        return Err(CliError::NotConverged(format!(
            "{} iterations without meeting tol; last max slack {last:.3e}; artifacts in {}",
            sol.iterations,
            args.out.display()
        )));
    }
    Ok(m)
}

fn write_solution(a: &mut Artifacts, model: &MjlsModel, pipeline: &str, sol: &SteeringSolution) -> Result<(), CliError> {
    a.text("policy.json", &sol.policy.to_json())?;
    write_trajectories(a, &sol.tau, &sol.xi)?;
    let log: String = sol.run_log.iter().map(|v| serde_json::to_string(v).expect("log entry serializes") + "\n").collect();
    a.text("run_log.jsonl", &log)?;
    a.text("losslessness.json", &json(&sol.losslessness))?;
    a.text("cost.json", &json(&sol.cost))?;
    let stages = sol
        .stages
        .iter()
        .map(|s| StageSummary {
            stage: s.stage.clone(),
            iteration: s.iteration,
            status: format!("{:?}", s.status),
            retried: s.retried,
            backend: s.stats.backend.clone(),
            iterations: s.stats.iterations,
            primal_residual: s.stats.primal_residual,
            dual_residual: s.stats.dual_residual,
            gap: s.stats.gap,
        })
        .collect();
    let file = SolutionFile {
        status: sol.status,
        pipeline,
        iterations: sol.iterations,
        cost: sol.cost,
        mean_objective: sol.mean_objective,
        covariance_objective: sol.covariance_objective,
        terminal_mean_error: sol.terminal_mean_error(model),
        terminal_covariance_excess: sol.terminal_covariance_excess(model),
        flags: &sol.flags,
        slack_history: &sol.slack_history,
        stages,
    };
    a.text("solution.json", &json(&file))
}

pub struct MonteCarloArgs {
    pub model: PathBuf,
    /// Defaults to `policy.json` in the output directory.
    pub policy: Option<PathBuf>,
    pub out: PathBuf,
    pub samples: usize,
    pub seed: u64,
    /// Also write every sample as `samples.csv`.
    pub raw_samples: bool,
}

#[derive(Serialize)]
struct ViolationRow {
    k: usize,
    state: Option<f64>,
    tube: Option<f64>,
    control: Option<f64>,
    control_norm: Option<f64>,
}

#[derive(Serialize)]
struct SampleRow {
    sample: usize,
    k: usize,
    mode: usize,
    state: String,
    control: String,
}

/// Simulates a policy, writes the report, the violation table and plot data.
pub fn cmd_montecarlo(args: &MonteCarloArgs) -> Result<RunManifest, CliError> {
    let start = Instant::now();
    let (model, cc) = load_model(&args.model)?;
    let policy_path = args.policy.clone().unwrap_or_else(|| args.out.join("policy.json"));
    let policy = load_policy(&policy_path, &model)?;
    if args.samples == 0 {
        return Err(CliError::Input("--samples must be at least 1".into()));
    }
    prepare_out(&args.out)?;
    let config = SimulationConfig { num_samples: args.samples, seed: args.seed, ..SimulationConfig::default() };
    let (report, samples) = montecarlo::run(&model, &policy, Some(&cc), &config)?;
    let (tau, xi) = propagate_policy(&model, &policy)?;
    let mut a = Artifacts::new(&args.out);
    a.text("mc_report.json", &json(&report))?;
    a.csv("violations.csv", &violation_rows(&report, model.horizon))?;
    let t = model.horizon;
    let emp = &report.moments.steps[t];
    let mu_hat = emp.mu.mean.column(0).into_owned();
    let sigma_hat = if report.moments.insufficient { Matrix::zeros(model.n_x, model.n_x) } else { emp.sigma.mean.clone() };
    let files = export::write_plot_data(&args.out, &model, &cc, &tau, &xi, &samples, (&mu_hat, &sigma_hat))
        .map_err(CliError::Runtime)?;
    a.files.extend(files);
    if args.raw_samples {
        a.csv("samples.csv", &sample_rows(&samples))?;
    }
    let mut m = RunManifest::new("montecarlo", &args.out);
    m.model_path = Some(args.model.display().to_string());
    m.policy_path = Some(policy_path.display().to_string());
    m.option("samples", args.samples);
    m.option("seed", args.seed);
    m.timings.insert("total".into(), start.elapsed().as_secs_f64());
    let files = a.files;
    m.write(&args.out, &files)
}

fn violation_rows(report: &McReport, horizon: usize) -> Vec<ViolationRow> {
    let v = report.violations.as_ref();
    (0..=horizon)
        .map(|k| ViolationRow {
            k,
            state: v.and_then(|v| v.state_per_step.get(k).copied()),
            tube: v.and_then(|v| v.tube_per_step.get(k).copied()),
            control: v.and_then(|v| v.control_per_step.get(k).copied()),
            control_norm: v.and_then(|v| v.control_norm_per_step.get(k).copied()),
        })
        .collect()
}

fn sample_rows(samples: &[Trajectory]) -> Vec<SampleRow> {
    let mut rows = Vec::new();
    for (n, s) in samples.iter().enumerate() {
        for k in 0..s.states.len() {
            rows.push(SampleRow {
                sample: n,
                k,
                mode: s.modes[k],
                state: flat(s.states[k].iter().copied()),
                control: s.controls.get(k).map(|u| flat(u.iter().copied())).unwrap_or_default(),
            });
        }
    }
    rows
}

/// Renders `summary.txt` and the SVG figures from existing artifacts.
pub fn cmd_report(out: &Path) -> Result<RunManifest, CliError> {
    let start = Instant::now();
    let has = |f: &str| out.join(f).is_file();
    let manifests: Vec<&str> = ["propagate", "solve", "montecarlo"]
        .into_iter()
        .filter(|c| has(&RunManifest::file_name(c)))
        .collect();
    if manifests.is_empty() {
        return Err(CliError::Input(format!("no run artifacts in {}", out.display())));
    }
    let mut a = Artifacts::new(out);
    let mut summary = String::from("covsteer report\n\n");
    summary.push_str(&format!(
        "Terminal ellipses contain 95% of Gaussian mass: unit ellipse scaled by the chi-square(2) quantile {:.3}.\n\n",
        export::chi2_95_2dof()
    ));
    if has("solution.json") {
        let v = read_json(&out.join("solution.json"))?;
        summary.push_str("Solve\n");
        for key in ["status", "pipeline", "iterations", "terminal_mean_error", "terminal_covariance_excess"] {
            summary.push_str(&format!("  {key}: {}\n", v[key]));
        }
        summary.push_str(&format!("  cost: {}\n", v["cost"]["total"]));
        if let Ok(l) = read_json(&out.join("losslessness.json")) {
            summary.push_str(&format!("  losslessness residual: {}\n", l["max"]));
        }
        summary.push('\n');
    }
    if has("mc_report.json") {
        let v = read_json(&out.join("mc_report.json"))?;
        summary.push_str("Monte Carlo\n");
        summary.push_str(&format!("  samples: {}  seed: {}\n", v["num_samples"], v["seed"]));
        summary.push_str(&format!(
            "  cost: {} +- {} (analytic {})\n",
            v["cost"]["mean"], v["cost"]["stderr"], v["cost"]["analytic"]
        ));
        summary.push_str(&format!("  identities passed: {}\n", v["identities"]["passed"]));
        if let Some(viol) = v["violations"].as_object() {
            summary.push_str(&format!("  state violation (trajectory-wise): {}\n", viol["state_trajectory"]));
            summary.push_str(&format!("  control violation (trajectory-wise): {}\n", viol["control_trajectory"]));
        }
        summary.push('\n');
    }
    if has(export::META_JSON) {
        let meta: PlotMeta = serde_json::from_value(read_json(&out.join(export::META_JSON))?)
            .map_err(|e| CliError::Input(format!("{}: {e}", export::META_JSON)))?;
        let load = |f: &str| -> Result<_, CliError> { Ok(out.join(f)) };
        let fan: Vec<FanRow> = export::read_csv(&load(export::FAN_CSV)?).map_err(CliError::Input)?;
        let means: Vec<MeanRow> = export::read_csv(&load(export::MEAN_CSV)?).map_err(CliError::Input)?;
        a.text(export::FAN_SVG, &export::render_fan(&fan, &means, &meta))?;
        let norms: Vec<NormRow> = export::read_csv(&load(export::NORMS_CSV)?).map_err(CliError::Input)?;
        let env: Vec<EnvelopeRow> = export::read_csv(&load(export::ENVELOPE_CSV)?).map_err(CliError::Input)?;
        a.text(export::NORMS_SVG, &export::render_control_norms(&norms, &env, &meta))?;
        let scatter: Vec<ScatterRow> = export::read_csv(&load(export::SCATTER_CSV)?).map_err(CliError::Input)?;
        let ell: Vec<EllipseRow> = export::read_csv(&load(export::ELLIPSES_CSV)?).map_err(CliError::Input)?;
        a.text(export::TERMINAL_SVG, &export::render_terminal(&scatter, &ell))?;
        summary.push_str(&format!("Figures: {}, {}, {}\n", export::FAN_SVG, export::NORMS_SVG, export::TERMINAL_SVG));
    }
    a.text("summary.txt", &summary)?;
    let mut m = RunManifest::new("report", out);
    m.option("sources", &manifests);
    m.timings.insert("total".into(), start.elapsed().as_secs_f64());
    let files = a.files;
    m.write(out, &files)
}

fn read_json(path: &Path) -> Result<serde_json::Value, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// `λ_max(Σ̂_T − Σ_f)` from a Monte Carlo report.
pub fn empirical_terminal_excess(report: &McReport, model: &MjlsModel) -> f64 {
    max_eigenvalue(&(&report.moments.steps[model.horizon].sigma.mean - &model.sigma_f))
}

