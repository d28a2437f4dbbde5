use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;
use serde_json::{json, Value};

use subcurr_core::config::Config;
use subcurr_core::cost::{self, CostPoint, Effectiveness};
use subcurr_core::curriculum::{self, Schedule, Strategy};
use subcurr_core::masking::{self, EmitOptions};
use subcurr_core::metrics::{self, RunRecord};
use subcurr_core::synthesis::{self, Converter, EndpointConfig, HttpEndpoint, SynthesisError};
use subcurr_core::trajectory::{self, Budgets, ErrorPatterns, SubtaskKind, Trajectory};

use crate::{
    Cli, Command, ConvertArgs, EmitArgs, MetricsArgs, ParetoArgs, ScheduleArgs, StatsArgs, ValidateArgs,
};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FINDINGS: u8 = 1;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_ENDPOINT: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

type CmdResult = Result<u8, Failure>;

trait ExitWith<T> {
    fn exit_with(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> ExitWith<T> for Result<T, E> {
    fn exit_with(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code,
            error: e.into(),
        })
    }
}

fn input_error(error: anyhow::Error) -> Failure {
    Failure {
        code: EXIT_INPUT,
        error,
    }
}

pub fn run(cli: Cli) -> CmdResult {
    let config = match &cli.run_config {
        Some(path) => Config::load(path).exit_with(EXIT_INPUT)?,
        None => Config::default(),
    };
    match cli.command {
        Command::Validate(args) => validate(args, &config),
        Command::Schedule(args) => schedule(args, &config),
        Command::Emit(args) => emit(args, &config),
        Command::Metrics(args) => metrics_cmd(args, &config),
        Command::Pareto(args) => pareto(args),
        Command::Convert(args) => convert(args, &config),
        Command::Stats(args) => stats(args, &config),
    }
}

fn print_json<T: Serialize>(report: &T) {
    let value = serde_json::to_value(report).expect("report serializes");
    println!("{}", serde_json::to_string_pretty(&value).expect("value serializes"));
}

fn require_path(flag: Option<PathBuf>, from_config: &Option<PathBuf>, name: &str) -> Result<PathBuf, Failure> {
    flag.or_else(|| from_config.clone())
        .ok_or_else(|| input_error(anyhow!("no {name} given (flag or run config)")))
}

fn error_patterns(flag: Option<&Path>, config: &Config) -> Result<ErrorPatterns, Failure> {
    match flag.or(config.error_pattern_file.as_deref()) {
        Some(path) => ErrorPatterns::from_file(path).exit_with(EXIT_INPUT),
        None => Ok(ErrorPatterns::defaults()),
    }
}

fn load_trajectories(path: &Path) -> Result<Vec<(Trajectory, Vec<trajectory::Violation>)>, Failure> {
    trajectory::load_corpus(path)
        .with_context(|| format!("loading corpus {}", path.display()))
        .exit_with(EXIT_INPUT)
}

fn validate(args: ValidateArgs, config: &Config) -> CmdResult {
    let corpus = require_path(args.corpus, &config.corpus_dir, "corpus")?;
    let budgets = Budgets {
        max_subtasks: args.max_subtasks.unwrap_or(config.budgets.max_subtasks),
        max_steps_per_subtask: args.max_steps.unwrap_or(config.budgets.max_steps_per_subtask),
    };
    let loaded = load_trajectories(&corpus)?;
    let mut reports = Vec::new();
    let mut failing = 0;
    for (t, warnings) in &loaded {
        let report = trajectory::validate_trajectory(t, budgets).with_warnings(warnings.clone());
        if !report.ok {
            failing += 1;
            for v in &report.violations {
                eprintln!("{}: {} {}", t.task_id, v.code, v.message);
            }
        }
        reports.push(json!({ "task_id": t.task_id, "report": report }));
    }
    eprintln!("{} trajectories, {} with violations", loaded.len(), failing);
    print_json(&json!({
        "trajectories": loaded.len(),
        "failing": failing,
        "budgets": budgets,
        "results": reports,
    }));
    Ok(if failing == 0 { EXIT_OK } else { EXIT_FINDINGS })
}

/// Kinds for an M-subtask task when none are given: the same default rule
/// the classifier applies to unlabelled trajectories.
fn default_kinds(m: usize) -> Vec<SubtaskKind> {
    (1..=m)
        .map(|i| {
            if i == m {
                SubtaskKind::Completion
            } else if i == 1 {
                SubtaskKind::Login
            } else {
                SubtaskKind::TaskSpecific
            }
        })
        .collect()
}

fn schedule(args: ScheduleArgs, config: &Config) -> CmdResult {
    let kinds = match &args.kinds {
        Some(names) => names
            .iter()
            .map(|k| k.trim().parse::<SubtaskKind>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| input_error(anyhow!("--kinds: {e}")))?,
        None => default_kinds(args.subtasks),
    };
    if kinds.len() != args.subtasks {
        return Err(input_error(anyhow!(
            "--kinds lists {} kinds but --subtasks is {}",
            kinds.len(),
            args.subtasks
        )));
    }
    let strategy = args.strategy.unwrap_or(config.strategy);
    let epochs = args.epochs.unwrap_or(config.epochs);
    let seed = args.seed.or(config.seed);
    let s = curriculum::build_schedule_with(strategy, &kinds, epochs, seed, args.decrement_mode.into())
        .exit_with(EXIT_INPUT)?;
    let violations = curriculum::verify_schedule(&s);
    eprint!("{}", s.to_text());
    for v in &violations {
        eprintln!("violation: {v:?}");
    }
    print_json(&schedule_report(&s, &kinds, &violations));
    Ok(if violations.is_empty() { EXIT_OK } else { EXIT_FINDINGS })
}

fn schedule_report(s: &Schedule, kinds: &[SubtaskKind], violations: &[curriculum::ScheduleViolation]) -> Value {
    json!({
        "strategy": s.strategy,
        "subtask_count": s.subtask_count,
        "kinds": kinds,
        "seed": s.seed,
        "epochs": s.epochs,
        "text": s.to_text(),
        "violations": violations,
    })
}

fn emit(args: EmitArgs, config: &Config) -> CmdResult {
    let corpus_path = require_path(args.corpus, &config.corpus_dir, "corpus")?;
    let out = require_path(args.out, &config.output_dir, "output directory")?;
    let patterns = error_patterns(args.patterns.as_deref(), config)?;
    let options = EmitOptions {
        strategy: args.strategy.unwrap_or(config.strategy),
        epochs: args.epochs.unwrap_or(config.epochs),
        seed: args.seed.or(config.seed),
        history_mode: args.history_mode.into(),
        decrement_mode: args.decrement_mode.into(),
    };
    if options.strategy == Strategy::Random && options.seed.is_none() {
        return Err(input_error(anyhow!("the random strategy needs --seed")));
    }

    let mut corpus = Vec::new();
    let mut invalid = Vec::new();
    for (t, _) in load_trajectories(&corpus_path)? {
        let report = trajectory::validate_trajectory(&t, config.budgets);
        if !report.ok {
            for v in &report.violations {
                eprintln!("{}: {} {}", t.task_id, v.code, v.message);
            }
            invalid.push(json!({ "task_id": t.task_id, "report": report }));
            continue;
        }
        let t = trajectory::classify_subtasks_keep_existing(&t);
        let t = if t.is_step_classified() {
            t
        } else {
            trajectory::classify_steps(&t, &patterns)
        };
        corpus.push(t);
    }
    if !invalid.is_empty() {
        print_json(&json!({ "written": false, "invalid": invalid }));
        return Ok(EXIT_FINDINGS);
    }

    let manifest = masking::emit_epoch_datasets(&corpus, &options, &out).exit_with(EXIT_INPUT)?;
    for f in &manifest.files {
        eprintln!("{:<28} {:>6} records", f.file, f.records);
    }
    eprintln!("wrote {} files to {}", manifest.files.len(), out.display());
    print_json(&manifest);
    Ok(EXIT_OK)
}

fn load_run_log(path: &Path) -> Result<Vec<RunRecord>, Failure> {
    let records = metrics::load_runs(path).exit_with(EXIT_INPUT)?;
    if records.is_empty() {
        return Err(input_error(anyhow!("{}: run log has no records", path.display())));
    }
    Ok(records)
}

fn metrics_cmd(args: MetricsArgs, config: &Config) -> CmdResult {
    let records = load_run_log(&args.runs)?;
    let min_successful = args.min_successful.unwrap_or(config.min_successful);
    let tgc = metrics::tgc(&records).exit_with(EXIT_INPUT)?;
    let sgc = metrics::sgc(&records).exit_with(EXIT_INPUT)?;
    let rates = metrics::inference_error_rates(&records, min_successful);
    eprintln!("records {}  TGC {tgc:.1}%  SGC {sgc:.1}%", records.len());
    eprint!("{}", rates.to_text());
    print_json(&json!({
        "records": records.len(),
        "tgc_percent": tgc,
        "sgc_percent": sgc,
        "min_successful": min_successful,
        "error_rates": rates,
    }));
    Ok(EXIT_OK)
}

fn read_points(path: &Path) -> Result<Vec<CostPoint>, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .exit_with(EXIT_INPUT)?;
    let points = if path.extension().is_some_and(|x| x == "csv") {
        cost::points_from_csv(&text).exit_with(EXIT_INPUT)?
    } else {
        let points: Vec<CostPoint> = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))
            .exit_with(EXIT_INPUT)?;
        for p in &points {
            p.validate().exit_with(EXIT_INPUT)?;
        }
        points
    };
    Ok(points)
}

fn points_from_runs(runs: &[PathBuf], config_path: &Path) -> Result<Vec<CostPoint>, Failure> {
    let text = fs::read_to_string(config_path)
        .with_context(|| format!("reading {}", config_path.display()))
        .exit_with(EXIT_INPUT)?;
    let systems = cost::parse_system_configs(&text).exit_with(EXIT_INPUT)?;
    if systems.len() != runs.len() {
        return Err(input_error(anyhow!(
            "{} run logs but {} system configs",
            runs.len(),
            systems.len()
        )));
    }
    systems
        .iter()
        .zip(runs)
        .map(|(system, path)| {
            let records = load_run_log(path)?;
            CostPoint::from_runs(system, &records).exit_with(EXIT_INPUT)
        })
        .collect()
}

fn pareto(args: ParetoArgs) -> CmdResult {
    let points = match (&args.points, &args.runs, &args.config) {
        (Some(p), _, _) => read_points(p)?,
        (None, Some(runs), Some(c)) => points_from_runs(runs, c)?,
        _ => return Err(input_error(anyhow!("give either --points or --runs with --config"))),
    };
    let e: Effectiveness = args.effectiveness;
    let front = cost::pareto_front(&points, e).exit_with(EXIT_INPUT)?;
    if let Some(csv_path) = &args.csv {
        let csv = cost::points_to_csv(&points, e).exit_with(EXIT_INPUT)?;
        fs::write(csv_path, csv)
            .with_context(|| format!("writing {}", csv_path.display()))
            .exit_with(EXIT_INPUT)?;
    }
    eprintln!("{:<24} {:>16} {:>7} {:>7}  front", "system", "FLOPs/task", "TGC%", "SGC%");
    for p in &points {
        eprintln!(
            "{:<24} {:>16} {:>7.1} {:>7.1}  {}",
            p.system_id,
            cost::format_flops(p.mean_flops_per_task),
            p.tgc_percent,
            p.sgc_percent,
            if front.contains(p) { "*" } else { "" }
        );
    }
    print_json(&json!({
        "effectiveness": e,
        "points": points,
        "front": front,
    }));
    Ok(EXIT_OK)
}

fn convert(args: ConvertArgs, config: &Config) -> CmdResult {
    let endpoint_config: EndpointConfig = match (&args.endpoint_config, &config.endpoint) {
        (Some(path), _) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .exit_with(EXIT_INPUT)?;
            let cfg: EndpointConfig = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))
                .exit_with(EXIT_INPUT)?;
            cfg.validate().map_err(|e| input_error(anyhow!(e)))?;
            cfg
        }
        (None, Some(cfg)) => cfg.clone(),
        (None, None) => return Err(input_error(anyhow!("no endpoint config (flag or run config)"))),
    };
    let out = require_path(args.out, &config.output_dir, "output directory")?;
    let exemplar = fs::read_to_string(&args.exemplar)
        .with_context(|| format!("reading {}", args.exemplar.display()))
        .exit_with(EXIT_INPUT)?;
    let sources = synthesis::load_single_agent_corpus(&args.input).exit_with(EXIT_INPUT)?;
    fs::create_dir_all(&out)
        .with_context(|| format!("creating {}", out.display()))
        .exit_with(EXIT_INPUT)?;

    let endpoint = HttpEndpoint::new(endpoint_config.clone()).exit_with(EXIT_ENDPOINT)?;
    let converter = Converter::new(&endpoint, exemplar)
        .with_config(&endpoint_config)
        .audit_dir(out.join("audit"));
    let outcomes = converter.convert_all(&sources);

    let mut endpoint_failures = 0;
    let mut findings = 0;
    let mut results = Vec::new();
    for o in &outcomes {
        let mut entry = json!({ "task_id": o.task_id, "attempts": o.attempts });
        match &o.result {
            Ok(t) => {
                let path = out.join(format!("{}.json", o.task_id));
                fs::write(&path, t.to_canonical_json())
                    .with_context(|| format!("writing {}", path.display()))
                    .exit_with(EXIT_INPUT)?;
                let preserved = o.preservation.as_ref().is_some_and(|p| p.ok);
                if !preserved {
                    findings += 1;
                }
                entry["status"] = json!(if preserved { "converted" } else { "steps_differ" });
                entry["output"] = json!(path.display().to_string());
                entry["preservation"] = json!(o.preservation);
            }
            Err(e) => {
                if is_endpoint_failure(e) {
                    endpoint_failures += 1;
                    entry["status"] = json!("endpoint_failure");
                } else {
                    findings += 1;
                    entry["status"] = json!("rejected");
                }
                entry["error"] = json!(e.to_string());
            }
        }
        eprintln!("{:<24} {}", o.task_id, entry["status"].as_str().unwrap_or_default());
        results.push(entry);
    }
    print_json(&json!({
        "tasks": outcomes.len(),
        "endpoint_failures": endpoint_failures,
        "findings": findings,
        "audit_dir": out.join("audit").display().to_string(),
        "results": results,
    }));
    Ok(if endpoint_failures > 0 {
        EXIT_ENDPOINT
    } else if findings > 0 {
        EXIT_FINDINGS
    } else {
        EXIT_OK
    })
}

fn is_endpoint_failure(e: &SynthesisError) -> bool {
    matches!(e, SynthesisError::Endpoint { .. })
}

fn stats(args: StatsArgs, config: &Config) -> CmdResult {
    let records = load_run_log(&args.runs)?;
    let tokens = metrics::token_stats(&records).exit_with(EXIT_INPUT)?;
    eprintln!(
        "records {} (passed {}, failed {})  success tokens {}  failure tokens {}",
        tokens.records, tokens.passed, tokens.failed, tokens.success_tokens, tokens.failure_tokens
    );
    let training = match &args.corpus {
        Some(path) => {
            let patterns = error_patterns(args.patterns.as_deref(), config)?;
            let corpus: Vec<Trajectory> = load_trajectories(path)?
                .into_iter()
                .map(|(t, _)| trajectory::classify_steps(&t, &patterns))
                .collect();
            let table = metrics::training_error_rates(&corpus);
            eprint!("{}", table.to_text());
            Some(table)
        }
        None => None,
    };
    print_json(&json!({
        "tokens": tokens,
        "training_error_rates": training,
    }));
    Ok(EXIT_OK)
}
