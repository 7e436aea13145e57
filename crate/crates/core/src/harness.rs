//! Run/compare/campaign drivers behind the CLI, plus their output formats.
//!
//! Outputs: `trace.csv` (one row per iteration and a final row for the
//! returned iterate), `trace.manifest.json` (versioned column manifest),
//! `summary.json`, `compare.{csv,json}`, `campaign.{csv,json}`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::direction::EndpointFactorization;
use crate::error::{Error, Result};
use crate::model::{Iterate, Problem};
use crate::problems::{build, cold_start, DynamicsForm, ProblemSpec};
use crate::solver::{solve, SolverOptions, SolverStats, Status};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// Trace columns, in order. Timing columns are the only non-reproducible ones.
pub const TRACE_COLUMNS: [(&str, &str); 17] = [
    ("iteration", "outer iteration; the last row is the returned iterate"),
    ("cost", "objective at the iterate"),
    ("normalized_cost", "cost divided by the initial iterate's cost"),
    ("endpoint_l1", "l1 norm of the endpoint residual r(x_N)"),
    ("dyn_gap_l1", "sum of l1 norms of the dynamics defects"),
    ("stage_gap_l1", "sum of l1 norms of stagewise constraint residuals"),
    ("kkt", "KKT residual of the local LQ model"),
    ("merit", "cost + penalty * total l1 infeasibility"),
    ("envelope", "nonmonotone line-search reference (window maximum)"),
    ("penalty", "merit penalty after the line search"),
    ("predicted", "model-predicted merit change at the accepted step (negative is descent)"),
    ("alpha", "accepted step length; 0 on the final row or a rejected step"),
    ("reg", "Levenberg-Marquardt regularization used for the step"),
    ("endpoint_route", "factorization that produced the endpoint multiplier"),
    ("linearize_seconds", "wall time of the derivative evaluation"),
    ("direction_seconds", "wall time of the direction computation"),
    ("line_search_seconds", "wall time of the line search"),
];

pub const TIMING_COLUMNS: [&str; 3] = ["linearize_seconds", "direction_seconds", "line_search_seconds"];

pub fn trace_header() -> Vec<&'static str> {
    TRACE_COLUMNS.iter().map(|c| c.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct OutputPaths {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_trace")]
    pub trace: String,
    #[serde(default = "default_summary")]
    pub summary: String,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_trace() -> String {
    "trace.csv".into()
}
fn default_summary() -> String {
    "summary.json".into()
}

impl Default for OutputPaths {
    fn default() -> Self {
        Self { dir: default_dir(), trace: default_trace(), summary: default_summary() }
    }
}

/// Whole configuration file.
///
/// ```toml
/// repetitions = 10
/// seed = 0
/// magnitude = 0.1
/// variants = ["schur", "null-lu", "null-qr"]
///
/// [problem]
/// family = "dpend-inverse"
///
/// [solver]
/// max-iters = 200
///
/// [output]
/// dir = "out"
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub output: OutputPaths,
    /// Trials per campaign form / timing repetitions per compare variant.
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    /// Half-width of the uniform cold-start perturbation.
    #[serde(default = "default_magnitude")]
    pub magnitude: f64,
    #[serde(default = "default_variants")]
    pub variants: Vec<EndpointFactorization>,
}

fn default_repetitions() -> usize {
    10
}
fn default_magnitude() -> f64 {
    0.1
}
fn default_variants() -> Vec<EndpointFactorization> {
    EndpointFactorization::ALL.to_vec()
}

impl RunConfig {
    pub fn new(problem: ProblemSpec) -> Self {
        Self {
            problem,
            solver: SolverOptions::default(),
            output: OutputPaths::default(),
            repetitions: default_repetitions(),
            seed: 0,
            magnitude: default_magnitude(),
            variants: default_variants(),
        }
    }

    /// Parse TOML; errors carry the line/field diagnostic from the parser.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidOption(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::InvalidOption(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::InvalidOption(m) => Error::InvalidOption(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::InvalidOption("repetitions must be at least 1".into()));
        }
        if !(self.magnitude >= 0.0 && self.magnitude.is_finite()) {
            return Err(Error::InvalidOption("magnitude must be finite and non-negative".into()));
        }
        self.problem.validate()?;
        self.solver.validate()
    }

    fn out(&self, name: &str) -> PathBuf {
        self.output.dir.join(name)
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::InvalidOption(format!("cannot write {}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
}

/// Shortest round-trip scientific notation, so traces reproduce bitwise.
fn num(v: f64) -> String {
    format!("{v:e}")
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| io_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| io_err(path, e))?;
    write_text(path, &String::from_utf8(bytes).expect("utf8"))
}

/// One trace row per record plus a final row for the returned iterate.
pub fn trace_rows(stats: &SolverStats, last: &Iterate) -> Vec<Vec<String>> {
    let norm = |c: f64| c / stats.initial_cost;
    let f = num;
    let mut rows: Vec<Vec<String>> = stats
        .records
        .iter()
        .map(|r| {
            vec![
                r.iteration.to_string(),
                f(r.cost),
                f(norm(r.cost)),
                f(r.endpoint_l1),
                f(r.dyn_gap_l1),
                f(r.stage_gap_l1),
                f(r.kkt),
                f(r.merit),
                f(r.envelope),
                f(r.penalty),
                f(r.predicted),
                f(r.alpha),
                f(r.reg),
                r.endpoint_route.name().to_string(),
                f(r.linearize_seconds),
                f(r.direction_seconds),
                f(r.line_search_seconds),
            ]
        })
        .collect();
    let penalty = stats.records.last().map_or(0.0, |r| r.penalty);
    let merit = last.cost + penalty * last.infeasibility_l1();
    rows.push(vec![
        stats.records.len().to_string(),
        f(last.cost),
        f(norm(last.cost)),
        f(last.endpoint_gap_l1()),
        f(last.dyn_gap_l1()),
        f(last.stage_gap_l1()),
        f(*stats.kkt_residuals.last().unwrap_or(&f64::NAN)),
        f(merit),
        f(merit),
        f(penalty),
        f(0.0),
        f(0.0),
        f(stats.records.last().map_or(0.0, |r| r.reg)),
        stats.records.last().map_or("", |r| r.endpoint_route.name()).to_string(),
        f(0.0),
        f(0.0),
        f(0.0),
    ]);
    rows
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub delimiter: String,
    pub columns: Vec<ManifestColumn>,
    pub timing_columns: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestColumn {
    pub name: String,
    pub description: String,
}

pub fn manifest() -> Manifest {
    Manifest {
        schema_version: TRACE_SCHEMA_VERSION,
        delimiter: ",".into(),
        columns: TRACE_COLUMNS
            .iter()
            .map(|(n, d)| ManifestColumn { name: n.to_string(), description: d.to_string() })
            .collect(),
        timing_columns: TIMING_COLUMNS.iter().map(|s| s.to_string()).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub family: String,
    pub form: DynamicsForm,
    pub seed: u64,
    pub status: Status,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub final_endpoint_l1: f64,
    pub final_infeasibility_l1: f64,
    pub total_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub summary: Summary,
    pub stats: SolverStats,
    pub iterate: Iterate,
    pub trace_path: PathBuf,
    pub summary_path: PathBuf,
}

fn initial_guess(problem: &Problem, cfg: &RunConfig, seed: u64) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    cold_start(problem, seed, cfg.magnitude)
}

/// Solve once from the seeded cold start and write trace, manifest and summary.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let problem = build(&cfg.problem)?;
    let (xs, us) = initial_guess(&problem, cfg, cfg.seed);
    let (iterate, stats) = solve(&problem, &xs, &us, &cfg.solver)?;
    let (family, form) = cfg.problem.resolve();
    let summary = Summary {
        schema_version: TRACE_SCHEMA_VERSION,
        family: family.to_string(),
        form,
        seed: cfg.seed,
        status: stats.status,
        iterations: stats.iterations,
        initial_cost: stats.initial_cost,
        final_cost: stats.final_cost,
        final_endpoint_l1: stats.final_endpoint_l1,
        final_infeasibility_l1: stats.final_infeasibility_l1,
        total_seconds: stats.total_seconds,
    };
    let trace_path = cfg.out(&cfg.output.trace);
    let summary_path = cfg.out(&cfg.output.summary);
    write_csv(&trace_path, &trace_header(), &trace_rows(&stats, &iterate))?;
    write_json(&cfg.out("trace.manifest.json"), &manifest())?;
    write_json(&summary_path, &summary)?;
    Ok(RunOutcome { summary, stats, iterate, trace_path, summary_path })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: EndpointFactorization,
    /// `ok`, a non-converged status, or `FAILED(<error>)`.
    pub outcome: String,
    pub iterations: usize,
    /// Direction-computation time per iteration, averaged over repetitions.
    pub mean_direction_seconds: f64,
    pub min_direction_seconds: f64,
    pub mean_total_seconds: f64,
    pub min_total_seconds: f64,
    pub final_endpoint_l1: f64,
    /// Max state/control deviation from the first successful variant.
    pub max_deviation: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareReport {
    pub family: String,
    pub repetitions: usize,
    pub variants: Vec<VariantReport>,
    /// All successful variants agree to `AGREEMENT_TOL`.
    pub trajectories_agree: bool,
}

pub const AGREEMENT_TOL: f64 = 1e-6;

fn trajectory_deviation(a: &Iterate, b: &Iterate) -> f64 {
    let d = |p: &[DVector<f64>], q: &[DVector<f64>]| p.iter().zip(q).map(|(p, q)| (p - q).amax()).fold(0.0, f64::max);
    d(&a.xs, &b.xs).max(d(&a.us, &b.us))
}

fn failure_label(e: &Error) -> String {
    let name = format!("{e:?}");
    let name = name.split([' ', '(', '{']).next().unwrap_or("Error");
    format!("FAILED({name})")
}

/// Solve with each endpoint factorization from the identical warm start.
/// Fallback is disabled so that each variant is measured on its own.
pub fn compare_factorizations(cfg: &RunConfig) -> Result<CompareReport> {
    cfg.validate()?;
    let mut variants: Vec<EndpointFactorization> = Vec::new();
    for v in &cfg.variants {
        if !variants.contains(v) {
            variants.push(*v);
        }
    }
    if variants.len() < 2 {
        return Err(Error::InvalidOption("compare needs at least two distinct variants".into()));
    }
    let problem = build(&cfg.problem)?;
    let (xs, us) = initial_guess(&problem, cfg, cfg.seed);
    let mut reports = Vec::new();
    let mut finals: Vec<Option<Iterate>> = Vec::new();
    for &variant in &variants {
        let opts = SolverOptions { endpoint: variant, fallback: false, ..cfg.solver.clone() };
        let mut dir_times = Vec::new();
        let mut totals = Vec::new();
        let mut last = None;
        let mut failure = None;
        for _ in 0..cfg.repetitions {
            match solve(&problem, &xs, &us, &opts) {
                Ok((it, stats)) => {
                    let n = stats.records.len().max(1) as f64;
                    dir_times.push(stats.records.iter().map(|r| r.direction_seconds).sum::<f64>() / n);
                    totals.push(stats.total_seconds);
                    last = Some((it, stats));
                }
                Err(e) => {
                    failure = Some(failure_label(&e));
                    break;
                }
            }
        }
        let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
        let mut report = VariantReport {
            variant,
            outcome: String::new(),
            iterations: 0,
            mean_direction_seconds: mean(&dir_times),
            min_direction_seconds: if dir_times.is_empty() { f64::NAN } else { min(&dir_times) },
            mean_total_seconds: mean(&totals),
            min_total_seconds: if totals.is_empty() { f64::NAN } else { min(&totals) },
            final_endpoint_l1: f64::NAN,
            max_deviation: f64::NAN,
        };
        match (failure, last) {
            (Some(f), _) => {
                report.outcome = f;
                finals.push(None);
            }
            (None, None) => {
                report.outcome = "FAILED(NoRun)".into();
                finals.push(None);
            }
            (None, Some((it, stats))) => {
                report.outcome = match stats.status {
                    Status::Converged => "ok".into(),
                    s => format!("{s:?}"),
                };
                report.iterations = stats.iterations;
                report.final_endpoint_l1 = stats.final_endpoint_l1;
                finals.push((stats.status == Status::Converged).then_some(it));
            }
        }
        reports.push(report);
    }
    let reference = finals.iter().flatten().next().cloned();
    let mut agree = true;
    for (r, f) in reports.iter_mut().zip(&finals) {
        if let (Some(a), Some(b)) = (f, &reference) {
            r.max_deviation = trajectory_deviation(a, b);
            agree &= r.max_deviation <= AGREEMENT_TOL;
        }
    }
    let report = CompareReport {
        family: cfg.problem.family.clone(),
        repetitions: cfg.repetitions,
        variants: reports,
        trajectories_agree: agree && reference.is_some(),
    };
    let rows: Vec<Vec<String>> = report
        .variants
        .iter()
        .map(|v| {
            vec![
                v.variant.name().to_string(),
                v.outcome.clone(),
                v.iterations.to_string(),
                num(v.mean_direction_seconds),
                num(v.min_direction_seconds),
                num(v.mean_total_seconds),
                num(v.min_total_seconds),
                num(v.final_endpoint_l1),
                num(v.max_deviation),
            ]
        })
        .collect();
    write_csv(&cfg.out("compare.csv"), &COMPARE_COLUMNS, &rows)?;
    write_json(&cfg.out("compare.json"), &report)?;
    Ok(report)
}

pub const COMPARE_COLUMNS: [&str; 9] = [
    "variant",
    "outcome",
    "iterations",
    "mean_direction_seconds",
    "min_direction_seconds",
    "mean_total_seconds",
    "min_total_seconds",
    "final_endpoint_l1",
    "max_deviation",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub seed: u64,
    /// Solver status, or `FAILED(<error>)`.
    pub outcome: String,
    pub success: bool,
    pub iterations: usize,
    pub final_endpoint_l1: f64,
    pub final_cost: f64,
}

/// One row of the convergence table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignRow {
    pub family: String,
    pub form: DynamicsForm,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Mean iterations over successful trials (NaN when there are none).
    pub mean_iterations: f64,
    /// Mean final endpoint l1 residual over all trials.
    pub mean_final_endpoint_l1: f64,
    pub runs: Vec<Trial>,
}

pub const CAMPAIGN_COLUMNS: [&str; 7] =
    ["family", "form", "trials", "successes", "success_rate", "mean_iterations", "mean_final_endpoint_l1"];

fn campaign_form(cfg: &RunConfig, base: &str, form: DynamicsForm) -> Result<CampaignRow> {
    let spec = ProblemSpec { family: base.to_string(), form, ..cfg.problem.clone() };
    let problem = build(&spec)?;
    // trials are independent; collect keeps seed order so output is deterministic
    let runs: Vec<Trial> = (0..cfg.repetitions as u64)
        .into_par_iter()
        .map(|t| {
            let seed = cfg.seed + t;
            let (xs, us) = initial_guess(&problem, cfg, seed);
            match solve(&problem, &xs, &us, &cfg.solver) {
                Ok((_, stats)) => Trial {
                    seed,
                    outcome: format!("{:?}", stats.status),
                    success: stats.status == Status::Converged,
                    iterations: stats.iterations,
                    final_endpoint_l1: stats.final_endpoint_l1,
                    final_cost: stats.final_cost,
                },
                Err(e) => Trial {
                    seed,
                    outcome: failure_label(&e),
                    success: false,
                    iterations: 0,
                    final_endpoint_l1: f64::NAN,
                    final_cost: f64::NAN,
                },
            }
        })
        .collect();
    let ok: Vec<&Trial> = runs.iter().filter(|t| t.success).collect();
    let n = runs.len() as f64;
    Ok(CampaignRow {
        family: base.to_string(),
        form,
        trials: runs.len(),
        successes: ok.len(),
        success_rate: ok.len() as f64 / n,
        mean_iterations: if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().map(|t| t.iterations as f64).sum::<f64>() / ok.len() as f64
        },
        mean_final_endpoint_l1: runs.iter().map(|t| t.final_endpoint_l1).sum::<f64>() / n,
        runs,
    })
}

/// Seeded cold starts (`seed + trial`), both dynamics forms.
pub fn cold_start_campaign(cfg: &RunConfig) -> Result<Vec<CampaignRow>> {
    cfg.validate()?;
    let (base, _) = cfg.problem.resolve();
    let base = base.to_string();
    let rows = [DynamicsForm::Forward, DynamicsForm::Inverse]
        .into_iter()
        .map(|form| campaign_form(cfg, &base, form))
        .collect::<Result<Vec<_>>>()?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.family.clone(),
                form_name(r.form).to_string(),
                r.trials.to_string(),
                r.successes.to_string(),
                num(r.success_rate),
                num(r.mean_iterations),
                num(r.mean_final_endpoint_l1),
            ]
        })
        .collect();
    write_csv(&cfg.out("campaign.csv"), &CAMPAIGN_COLUMNS, &table)?;
    write_json(&cfg.out("campaign.json"), &rows)?;
    Ok(rows)
}

pub fn form_name(form: DynamicsForm) -> &'static str {
    match form {
        DynamicsForm::Forward => "forward",
        DynamicsForm::Inverse => "inverse",
    }
}
