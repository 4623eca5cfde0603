//! Command-line front end: JSON run configs, seed fan-out, and the output
//! layout `<out>/<mode>/<scheduler>/<seed>.csv` plus `<out>/summary.json`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    export_csv, export_summary_json, pooled_matched_mean_params, summarize, SchedulerSummary, TrajectoryTrace,
};
use crate::editor::{edit, EditRunSpec, TargetScaling};
use crate::error::{Error, Result};
use crate::guidance::{SchedulerKind, SchedulerParams};
use crate::sampler::{generate, GenRunSpec, TimeGrid};
use crate::vecmath::LatentVector;
use crate::velocity::{ConditionLabel, GaussianComponent, MixtureField, VelocityField, WEIGHT_SUM_TOL};

pub const MATCHED_MEAN_LABEL: &str = "matched_mean";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Generate,
    Edit,
    Ablate,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Generate => "generate",
            Mode::Edit => "edit",
            Mode::Ablate => "ablate",
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ComponentSpec {
    mean: Vec<f64>,
    variance: f64,
    weight: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldSpec {
    components: Vec<ComponentSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum SeedSpec {
    List(Vec<u64>),
    Range { base: u64, count: u64 },
}

fn default_lambda_src() -> f64 {
    3.5
}
fn default_lambda_tar() -> f64 {
    13.5
}
fn default_kappa_tar() -> f64 {
    crate::guidance::DEFAULT_KAPPA_EDIT
}
fn default_edit_n() -> usize {
    50
}
fn default_n_max() -> usize {
    33
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EditSection {
    x_src: Vec<f64>,
    c_src: ConditionLabel,
    c_tar: ConditionLabel,
    #[serde(default = "default_lambda_src")]
    lambda_src: f64,
    #[serde(default = "default_lambda_tar")]
    lambda_tar: f64,
    #[serde(default = "default_kappa_tar")]
    kappa_tar: f64,
    #[serde(default = "default_edit_n")]
    n: usize,
    #[serde(default = "default_n_max")]
    n_max: usize,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    target: TargetScaling,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    mode: Mode,
    field: FieldSpec,
    #[serde(default)]
    scheduler: Option<SchedulerParams>,
    #[serde(default)]
    schedulers: Option<Vec<SchedulerParams>>,
    #[serde(default)]
    condition: Option<ConditionLabel>,
    #[serde(default)]
    n: Option<usize>,
    #[serde(default)]
    seeds: Option<SeedSpec>,
    #[serde(default)]
    edit: Option<EditSection>,
    #[serde(default)]
    output_dir: Option<PathBuf>,
}

/// Validated editing parameters (everything in an [`EditRunSpec`] but the seed).
#[derive(Debug, Clone, PartialEq)]
pub struct EditSettings {
    pub x_src: LatentVector,
    pub c_src: ConditionLabel,
    pub c_tar: ConditionLabel,
    pub lambda_src: f64,
    pub lambda_tar: f64,
    pub kappa_tar: f64,
    pub target: TargetScaling,
    pub n: usize,
    pub n_max: usize,
}

impl EditSettings {
    pub fn spec(&self, seed: u64) -> Result<EditRunSpec> {
        Ok(EditRunSpec {
            x_src: self.x_src.clone(),
            c_src: self.c_src,
            c_tar: self.c_tar,
            lambda_src: self.lambda_src,
            lambda_tar: self.lambda_tar,
            kappa_tar: self.kappa_tar,
            target: self.target,
            grid: TimeGrid::uniform(self.n)?,
            n_max: self.n_max,
            seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub field: MixtureField,
    /// Labelled schedulers: one for `generate`, two or more for `ablate`.
    pub schedulers: Vec<(String, SchedulerParams)>,
    pub condition: ConditionLabel,
    pub n: usize,
    pub edit: Option<EditSettings>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

fn check_condition(field: &MixtureField, condition: ConditionLabel, name: &str) -> Result<()> {
    field
        .check_condition(condition)
        .map_err(|e| Error::validation(name, e.to_string()))
}

fn build_field(spec: FieldSpec) -> Result<MixtureField> {
    if spec.components.is_empty() {
        return Err(Error::validation("field.components", "at least one component is required"));
    }
    let dim = spec.components[0].mean.len();
    let mut components = Vec::with_capacity(spec.components.len());
    for (k, c) in spec.components.into_iter().enumerate() {
        let at = |f: &str| format!("field.components[{k}].{f}");
        if c.mean.len() != dim || dim == 0 {
            return Err(Error::validation(at("mean"), format!("expected {dim} finite values")));
        }
        let mean = LatentVector::new(c.mean).map_err(|e| Error::validation(at("mean"), e.to_string()))?;
        if !(c.variance > 0.0 && c.variance.is_finite()) {
            return Err(Error::validation(at("variance"), format!("must be positive, got {}", c.variance)));
        }
        if !(c.weight > 0.0 && c.weight <= 1.0) {
            return Err(Error::validation(at("weight"), format!("must be in (0, 1], got {}", c.weight)));
        }
        components.push(GaussianComponent::new(mean, c.variance, c.weight)?);
    }
    let total: f64 = components.iter().map(|c| c.weight).sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::validation("field.components[].weight", format!("weights sum to {total}, expected 1")));
    }
    MixtureField::new(components).map_err(|e| Error::validation("field", e.to_string()))
}

/// Labels schedulers by kind, suffixing the position when a kind repeats.
fn label_schedulers(list: Vec<SchedulerParams>) -> Vec<(String, SchedulerParams)> {
    let count = |k: SchedulerKind| list.iter().filter(|p| p.kind == k).count();
    list.iter()
        .enumerate()
        .map(|(i, p)| {
            let label = if count(p.kind) > 1 {
                format!("{}_{i}", p.kind)
            } else {
                p.kind.to_string()
            };
            (label, p.clone())
        })
        .collect()
}

fn validate_scheduler(p: &SchedulerParams, at: &str) -> Result<()> {
    p.validate().map_err(|e| match e {
        Error::Validation { field, message } => Error::validation(format!("{at}.{field}"), message),
        other => other,
    })
}

impl RunConfig {
    pub fn from_json_str(text: &str, path: &Path) -> Result<Self> {
        let raw: RawConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        Self::from_raw(raw)
    }

    fn from_raw(raw: RawConfig) -> Result<Self> {
        let field = build_field(raw.field)?;
        let condition = raw.condition.unwrap_or(ConditionLabel::Component(0));
        check_condition(&field, condition, "condition")?;
        let n = raw.n.unwrap_or(25);
        if n < 2 {
            return Err(Error::validation("n", format!("must be >= 2, got {n}")));
        }

        let schedulers = match raw.mode {
            Mode::Generate => {
                let p = raw
                    .scheduler
                    .ok_or_else(|| Error::validation("scheduler", "required for generate"))?;
                validate_scheduler(&p, "scheduler")?;
                vec![(p.kind.to_string(), p)]
            }
            Mode::Ablate => {
                let list = raw
                    .schedulers
                    .ok_or_else(|| Error::validation("schedulers", "required for ablate"))?;
                if list.len() < 2 {
                    return Err(Error::validation(
                        "schedulers",
                        format!("ablate needs at least 2 schedulers, got {}", list.len()),
                    ));
                }
                for (i, p) in list.iter().enumerate() {
                    validate_scheduler(p, &format!("schedulers[{i}]"))?;
                }
                label_schedulers(list)
            }
            Mode::Edit => Vec::new(),
        };

        let edit = match (raw.mode, raw.edit) {
            (Mode::Edit, None) => return Err(Error::validation("edit", "required for edit")),
            (Mode::Edit, Some(e)) => {
                let x_src = LatentVector::new(e.x_src).map_err(|err| Error::validation("edit.x_src", err.to_string()))?;
                if x_src.dim() != field.dim() {
                    return Err(Error::validation(
                        "edit.x_src",
                        format!("expected {} values, got {}", field.dim(), x_src.dim()),
                    ));
                }
                check_condition(&field, e.c_src, "edit.c_src")?;
                check_condition(&field, e.c_tar, "edit.c_tar")?;
                for (name, value) in [
                    ("edit.lambda_src", e.lambda_src),
                    ("edit.lambda_tar", e.lambda_tar),
                    ("edit.kappa_tar", e.kappa_tar),
                ] {
                    if !(value >= 0.0 && value.is_finite()) {
                        return Err(Error::validation(name, format!("must be finite and >= 0, got {value}")));
                    }
                }
                if e.n < 2 {
                    return Err(Error::validation("edit.n", format!("must be >= 2, got {}", e.n)));
                }
                if e.n_max < 2 || e.n_max > e.n {
                    return Err(Error::validation(
                        "edit.n_max",
                        format!("must satisfy 2 <= n_max <= n = {}, got {}", e.n, e.n_max),
                    ));
                }
                Some((
                    EditSettings {
                        x_src,
                        c_src: e.c_src,
                        c_tar: e.c_tar,
                        lambda_src: e.lambda_src,
                        lambda_tar: e.lambda_tar,
                        kappa_tar: e.kappa_tar,
                        target: e.target,
                        n: e.n,
                        n_max: e.n_max,
                    },
                    e.seed,
                ))
            }
            (_, Some(_)) => return Err(Error::validation("edit", "only allowed in edit mode")),
            (_, None) => None,
        };

        let seeds = match (raw.seeds, edit.as_ref().and_then(|(_, s)| *s)) {
            (Some(_), Some(_)) => {
                return Err(Error::validation("edit.seed", "give either seeds or edit.seed, not both"));
            }
            (Some(SeedSpec::List(list)), None) => list,
            (Some(SeedSpec::Range { base, count }), None) => (0..count).map(|k| base.wrapping_add(k)).collect(),
            (None, Some(seed)) => vec![seed],
            (None, None) => vec![0],
        };
        if seeds.is_empty() {
            return Err(Error::validation("seeds", "at least one seed is required"));
        }

        Ok(Self {
            mode: raw.mode,
            field,
            schedulers,
            condition,
            n,
            edit: edit.map(|(e, _)| e),
            seeds,
            output_dir: raw.output_dir.unwrap_or_else(|| PathBuf::from("out")),
        })
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.n)
    }

    pub fn gen_spec(&self, scheduler: &SchedulerParams, seed: u64) -> Result<GenRunSpec> {
        Ok(GenRunSpec {
            condition: self.condition,
            scheduler: scheduler.clone(),
            grid: self.grid()?,
            seed,
        })
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_json_str(&text, path)
}

#[derive(Debug, Serialize)]
struct FinalState<'a> {
    mode: &'a str,
    scheduler: &'a str,
    seed: u64,
    state: &'a LatentVector,
}

#[derive(Debug, Serialize)]
struct Failure {
    scheduler: String,
    seed: u64,
    error: String,
}

/// What a run wrote, plus the per-scheduler aggregates.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub traces: Vec<TrajectoryTrace>,
    pub summary: Vec<SchedulerSummary>,
    pub files: Vec<PathBuf>,
}

struct Outcome {
    label: String,
    seed: u64,
    result: Result<TrajectoryTrace>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes traces (and optionally final states), the summary, and a failure
/// manifest when any run failed. Returns the first failure after flushing.
fn flush(config: &RunConfig, outcomes: Vec<Outcome>, write_finals: bool) -> Result<RunReport> {
    let root = &config.output_dir;
    let mode_dir = root.join(config.mode.as_str());
    let mut files = Vec::new();
    let mut traces = Vec::new();
    let mut failures = Vec::new();
    let mut first_error = None;

    for o in outcomes {
        match o.result {
            Ok(trace) => {
                let dir = mode_dir.join(&o.label);
                create_dir(&dir)?;
                let csv = dir.join(format!("{}.csv", o.seed));
                export_csv(&trace, &csv)?;
                files.push(csv);
                if write_finals {
                    if let Some(end) = &trace.endpoint {
                        let path = dir.join(format!("{}.final.json", o.seed));
                        write_json(
                            &path,
                            &FinalState {
                                mode: config.mode.as_str(),
                                scheduler: &o.label,
                                seed: o.seed,
                                state: end,
                            },
                        )?;
                        files.push(path);
                    }
                }
                traces.push(trace);
            }
            Err(e) => {
                failures.push(Failure {
                    scheduler: o.label,
                    seed: o.seed,
                    error: e.to_string(),
                });
                first_error.get_or_insert(e);
            }
        }
    }

    create_dir(root)?;
    let summary_path = root.join("summary.json");
    export_summary_json(&traces, &summary_path)?;
    files.push(summary_path);
    if !failures.is_empty() {
        let path = root.join("failures.json");
        write_json(&path, &failures)?;
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(RunReport {
            summary: summarize(&traces),
            traces,
            files,
        }),
    }
}

fn generate_all(config: &RunConfig, label: &str, scheduler: &SchedulerParams) -> Vec<Outcome> {
    config
        .seeds
        .par_iter()
        .map(|&seed| Outcome {
            label: label.to_string(),
            seed,
            result: config
                .gen_spec(scheduler, seed)
                .and_then(|spec| generate(&config.field, &spec))
                .map(|(_, mut trace)| {
                    trace.scheduler = label.to_string();
                    trace
                }),
        })
        .collect()
}

pub fn run_generate(config: &RunConfig) -> Result<RunReport> {
    let (label, scheduler) = config
        .schedulers
        .first()
        .ok_or_else(|| Error::validation("scheduler", "required for generate"))?;
    flush(config, generate_all(config, label, scheduler), true)
}

pub fn run_edit(config: &RunConfig) -> Result<RunReport> {
    let settings = config
        .edit
        .as_ref()
        .ok_or_else(|| Error::validation("edit", "required for edit"))?;
    let outcomes = config
        .seeds
        .par_iter()
        .map(|&seed| Outcome {
            label: settings.target.as_str().to_string(),
            seed,
            result: settings.spec(seed).and_then(|spec| edit(&config.field, &spec)).map(|(_, t)| t),
        })
        .collect();
    flush(config, outcomes, true)
}

/// Runs every scheduler over the same seeds. When a `vags` scheduler is
/// present, a fixed-scale control at the mean adaptive scale of its runs is
/// added under the label `matched_mean`.
pub fn run_ablate(config: &RunConfig) -> Result<RunReport> {
    if config.schedulers.len() < 2 {
        return Err(Error::validation("schedulers", "ablate needs at least 2 schedulers"));
    }
    let mut outcomes = Vec::new();
    let mut matched = None;
    for (label, scheduler) in &config.schedulers {
        let runs = generate_all(config, label, scheduler);
        if matched.is_none() && scheduler.kind == SchedulerKind::Vags {
            let traces: Vec<&TrajectoryTrace> = runs.iter().filter_map(|o| o.result.as_ref().ok()).collect();
            if !traces.is_empty() {
                matched = Some(pooled_matched_mean_params(&traces, scheduler)?);
            }
        }
        outcomes.extend(runs);
    }
    if let Some(control) = matched {
        outcomes.extend(generate_all(config, MATCHED_MEAN_LABEL, &control));
    }
    flush(config, outcomes, false)
}

pub fn run(config: &RunConfig) -> Result<RunReport> {
    match config.mode {
        Mode::Generate => run_generate(config),
        Mode::Edit => run_edit(config),
        Mode::Ablate => run_ablate(config),
    }
}

#[derive(Debug, Parser)]
#[command(name = "vags", about = "Velocity-adaptive guidance for flow-matching sampling and editing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample from noise with guided Euler steps.
    Generate(RunArgs),
    /// Edit a source point toward a target condition.
    Edit(RunArgs),
    /// Compare several schedulers on identical seeds.
    Ablate(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON run config.
    #[arg(long)]
    config: PathBuf,
    /// Replace the config's seeds with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn execute(mode: Mode, args: RunArgs) -> Result<RunReport> {
    let mut config = parse_config(&args.config)?;
    if config.mode != mode {
        return Err(Error::validation(
            "mode",
            format!("config is for {}, not {}", config.mode.as_str(), mode.as_str()),
        ));
    }
    if let Some(seed) = args.seed {
        config.seeds = vec![seed];
    }
    if let Some(out) = args.out {
        config.output_dir = out;
    }
    run(&config)
}

/// Entry point. Returns the process exit code: 0 success, 1 usage or
/// validation error, 2 divergence, 3 I/O error.
pub fn main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let _ = write!(std::io::stderr(), "{}", e.render());
            return 1;
        }
    };
    let (mode, args) = match cli.command {
        Command::Generate(a) => (Mode::Generate, a),
        Command::Edit(a) => (Mode::Edit, a),
        Command::Ablate(a) => (Mode::Ablate, a),
    };
    match execute(mode, args) {
        Ok(report) => {
            let out = std::io::stdout();
            let mut out = out.lock();
            for s in &report.summary {
                let _ = writeln!(
                    out,
                    "{}: {} run(s), mean lambda {:.4} [{:.4}, {:.4}]",
                    s.scheduler, s.n_runs, s.lambda_mean, s.lambda_min, s.lambda_max
                );
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
