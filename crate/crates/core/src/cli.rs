//! The `gno` command line.
//!
//! Run configuration is layered: built-in defaults, then a JSON config file,
//! then `GNO_*` environment variables, then flags (including `--set
//! key=value`). Keys are the dotted paths of the run manifest, for example
//! `backend.model` or `strategy.sampling.temperature`; the environment form
//! of `backend.model` is `GNO_BACKEND_MODEL`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use crate::backend::{read_transcripts, Backend, BackendProfile};
use crate::error::Error;
use crate::evaluation::{evaluate_ner, evaluate_re, macro_average, EvalReport, MacroBlock, MatchMode};
use crate::grounding::tokenize;
use crate::labels::{export_conll, resolve_all, to_bio2, ResolutionStats};
use crate::pipeline::{predictions_from_results, read_results, write_run, Pipeline, RunManifest, RunOutput};
use crate::prompting::{base_re_prompt, build_re_prompt_request, TemplateSet};
use crate::schema::{load_corpus, ReMatching, Strategy, Task, TaskSchema};

pub const EXIT_OK: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
pub const EXIT_BUDGET: u8 = 2;

const MAX_DEFAULT_JOBS: usize = 8;

#[derive(Parser, Debug)]
#[command(name = "gno", version, about = "Zero-shot NER and relation extraction with generate-and-organize prompting")]
struct Cli {
    /// Report errors on stderr as JSON lines.
    #[arg(long, global = true)]
    log_json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract entities or relations from a corpus.
    Run(RunArgs),
    /// Score predictions against a gold corpus.
    Eval(EvalArgs),
    /// Resolve entity-type conflicts in an existing NER run directory.
    Conflicts(ConflictsArgs),
    /// Write NER predictions as BIO2 CoNLL after resolving conflicts at random.
    #[command(name = "export-bio2")]
    ExportBio2(ExportArgs),
    /// Print the meta-prompt that asks a model to improve a relation prompt.
    #[command(name = "gen-re-prompt")]
    GenRePrompt(GenArgs),
    /// Macro-average F1 over several datasets.
    Report(ReportArgs),
}

#[derive(Args, Debug, Default)]
struct OverrideArgs {
    /// JSON config file (nested objects or dotted keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any manifest key, e.g. `--set backend.max_retries=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Backend kind: replay or http.
    #[arg(long)]
    backend: Option<String>,
    /// Replay fixture directory (implies the replay backend).
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Response cache directory for the http backend.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Worker threads; defaults to the logical core count, at most 8.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// ner or re.
    #[arg(long)]
    task: Option<String>,
    /// gno, onestep or aeio.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Template directory overlaying the built-in prompts.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Drop the step-by-step suffix from identify prompts.
    #[arg(long)]
    no_cot: bool,
    /// Skip the clean-up stage.
    #[arg(long)]
    no_cleanup: bool,
    /// Omit the system message.
    #[arg(long)]
    no_system: bool,
    /// Run conflict resolution after NER.
    #[arg(long)]
    cr: bool,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_tokens: Option<u32>,
    #[arg(long)]
    failure_budget: Option<f64>,
    /// Fuzzy grounding cutoff.
    #[arg(long)]
    cutoff: Option<f64>,
    #[command(flatten)]
    overrides: OverrideArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    gold: PathBuf,
    /// predictions.jsonl from `run` or any file in the same format.
    #[arg(long)]
    pred: PathBuf,
    /// ner or re; inferred from the predictions when omitted.
    #[arg(long)]
    task: Option<String>,
    /// strict or lenient relation matching.
    #[arg(long, default_value = "strict")]
    re_policy: String,
    /// Directory for report.json and report.md; defaults to the predictions' directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ConflictsArgs {
    /// Directory written by `run --task ner`.
    #[arg(long)]
    run: PathBuf,
    /// Output directory; defaults to `<run>/cr`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: OverrideArgs,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Destination .conll file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    relation: String,
    /// Annotated corpus supplying the examples.
    #[arg(long)]
    corpus: PathBuf,
    /// Number of documents to use as examples.
    #[arg(long, default_value_t = 3)]
    examples: usize,
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// `name=value` F1 scores.
    #[arg(long = "f1", value_name = "NAME=F1")]
    f1: Vec<String>,
    /// `name=path` to a report.json written by `eval`.
    #[arg(long = "report", value_name = "NAME=PATH")]
    reports: Vec<String>,
    /// Which match mode to read from report files.
    #[arg(long, default_value = "partial")]
    mode: String,
    /// Directory for macro.json and macro.md.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum CliError {
    /// Bad invocation; the usage line is printed too.
    Usage(String),
    Message(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    let log_json = cli.log_json;
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Conflicts(a) => cmd_conflicts(a),
        Command::ExportBio2(a) => cmd_export(a),
        Command::GenRePrompt(a) => cmd_gen(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let (code, message) = match &e {
                CliError::Usage(m) | CliError::Message(m) => (EXIT_ERROR, m.clone()),
                CliError::Lib(err @ Error::FailureBudget { .. }) => (EXIT_BUDGET, err.to_string()),
                CliError::Lib(err) => (EXIT_ERROR, err.to_string()),
            };
            if log_json {
                eprintln!("{}", serde_json::json!({"level": "error", "exit": code, "message": message}));
            } else {
                eprintln!("error: {message}");
                if let CliError::Usage(_) = e {
                    eprintln!("\n{}", Cli::command().render_usage());
                }
            }
            code
        }
    }
}

fn default_jobs() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(MAX_DEFAULT_JOBS)
}

/// Defaults of every configurable key, as a JSON tree.
pub fn default_config() -> Value {
    let mut m = RunManifest::new(
        Task::Ner,
        PathBuf::new(),
        PathBuf::new(),
        BackendProfile::default(),
        PathBuf::new(),
    );
    m.jobs = default_jobs();
    serde_json::to_value(m).expect("manifest serializes")
}

/// Every dotted key of `tree` that holds a leaf value.
pub fn config_keys(tree: &Value) -> Vec<String> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }
    let mut out = Vec::new();
    walk("", tree, &mut out);
    out
}

/// Replace the leaf at dotted `key`. Only keys present in `tree` are accepted.
pub fn set_key(tree: &mut Value, key: &str, value: Value) -> crate::Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        let child = map
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        if i + 1 == parts.len() {
            if child.is_object() {
                return Err(Error::Config(format!("config key {key:?} is a section, not a value")));
            }
            *child = value;
            return Ok(());
        }
        node = child;
    }
    unreachable!("split yields at least one part")
}

/// A raw string value: JSON when it parses as JSON, otherwise a string.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn flatten_file(prefix: &str, v: &Value, defaults: &Value, out: &mut Vec<(String, Value)>) {
    if let Value::Object(map) = v {
        for (k, child) in map {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            let is_section = lookup(defaults, &key).is_some_and(Value::is_object);
            if is_section && child.is_object() {
                flatten_file(&key, child, defaults, out);
            } else {
                out.push((key, child.clone()));
            }
        }
    }
}

fn lookup<'a>(tree: &'a Value, key: &str) -> Option<&'a Value> {
    key.split('.').try_fold(tree, |node, part| node.get(part))
}

pub fn env_var_for(key: &str) -> String {
    format!("GNO_{}", key.replace(['.', '-'], "_").to_uppercase())
}

/// Merge the layers into a manifest. `explicit` holds flag values, applied
/// last in order.
pub fn resolve_manifest(
    file: Option<&Path>,
    env: &dyn Fn(&str) -> Option<String>,
    explicit: &[(String, Value)],
    base: Value,
) -> crate::Result<RunManifest> {
    let mut tree = base;
    if let Some(path) = file {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed: Value = serde_json::from_str(&raw).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if !parsed.is_object() {
            return Err(Error::Config(format!("{}: config must be a JSON object", path.display())));
        }
        let mut entries = Vec::new();
        flatten_file("", &parsed, &tree, &mut entries);
        for (k, v) in entries {
            set_key(&mut tree, &k, v)?;
        }
    }
    for key in config_keys(&tree) {
        if let Some(raw) = env(&env_var_for(&key)) {
            set_key(&mut tree, &key, parse_value(&raw))?;
        }
    }
    for (k, v) in explicit {
        set_key(&mut tree, k, v.clone())?;
    }
    serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))
}

fn push_path(out: &mut Vec<(String, Value)>, key: &str, p: &Option<PathBuf>) {
    if let Some(p) = p {
        out.push((key.into(), Value::String(p.to_string_lossy().into_owned())));
    }
}

impl OverrideArgs {
    fn explicit(&self) -> CliResult<Vec<(String, Value)>> {
        let mut out = Vec::new();
        if self.fixtures.is_some() && self.cache_dir.is_some() {
            return Err(CliError::Usage("--fixtures and --cache-dir are mutually exclusive".into()));
        }
        if let Some(kind) = &self.backend {
            out.push(("backend.kind".into(), Value::String(kind.to_lowercase())));
        } else if self.fixtures.is_some() {
            out.push(("backend.kind".into(), Value::String("replay".into())));
        }
        push_path(&mut out, "backend.cache_dir", &self.fixtures);
        push_path(&mut out, "backend.cache_dir", &self.cache_dir);
        if let Some(u) = &self.base_url {
            out.push(("backend.base_url".into(), Value::String(u.clone())));
        }
        if let Some(m) = &self.model {
            out.push(("backend.model".into(), Value::String(m.clone())));
        }
        if let Some(j) = self.jobs {
            if j == 0 {
                return Err(CliError::Usage("--jobs must be at least 1".into()));
            }
            out.push(("jobs".into(), j.into()));
        }
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
            out.push((k.trim().to_string(), parse_value(v)));
        }
        Ok(out)
    }
}

fn system_env(name: &str) -> Option<String> {
    std::env::var(name).ok()
}

fn cmd_run(a: RunArgs) -> CliResult {
    let mut explicit = Vec::new();
    if let Some(t) = &a.task {
        explicit.push(("task".into(), serde_json::to_value(t.parse::<Task>()?).map_err(Error::from)?));
    }
    if let Some(s) = &a.strategy {
        explicit.push((
            "strategy.strategy".into(),
            serde_json::to_value(s.parse::<Strategy>()?).map_err(Error::from)?,
        ));
    }
    push_path(&mut explicit, "corpus", &a.corpus);
    push_path(&mut explicit, "schema", &a.schema);
    push_path(&mut explicit, "outdir", &a.out);
    push_path(&mut explicit, "templates", &a.templates);
    let mut flag = |key: &str, on: bool, value: bool| {
        if on {
            explicit.push((key.to_string(), Value::Bool(value)));
        }
    };
    flag("strategy.cot", a.no_cot, false);
    flag("strategy.cleanup", a.no_cleanup, false);
    flag("backend.system_enabled", a.no_system, false);
    flag("strategy.cr_pass", a.cr, true);
    if let Some(t) = a.temperature {
        explicit.push(("strategy.sampling.temperature".into(), t.into()));
    }
    if let Some(t) = a.max_tokens {
        explicit.push(("strategy.sampling.max_tokens".into(), t.into()));
    }
    if let Some(b) = a.failure_budget {
        explicit.push(("failure_budget".into(), b.into()));
    }
    if let Some(c) = a.cutoff {
        explicit.push(("grounding.cutoff".into(), c.into()));
    }
    explicit.extend(a.overrides.explicit()?);
    let manifest = resolve_manifest(a.overrides.config.as_deref(), &system_env, &explicit, default_config())?;
    for (path, flag) in [
        (&manifest.corpus, "--corpus"),
        (&manifest.schema, "--schema"),
        (&manifest.outdir, "--out"),
    ] {
        if path.as_os_str().is_empty() {
            return Err(CliError::Usage(format!("missing required option {flag}")));
        }
    }
    let backend = Backend::from_profile(manifest.backend.clone())?;
    let pipeline = Pipeline::new(manifest.clone(), &backend)?;
    let output = pipeline.run()?;
    let written = write_run(&manifest, &output);
    print_run_summary(&output, &backend);
    written?;
    Ok(())
}

fn print_run_summary(output: &RunOutput, backend: &Backend) {
    let c = backend.counters();
    let mentions: usize = output.results.iter().map(|r| r.entities.len() + r.relations.len()).sum();
    println!(
        "documents {} targets {} failed {} mentions {}",
        output.results.len(),
        output.targets,
        output.failed_targets,
        mentions
    );
    println!(
        "conversations {} requests {} cache_hits {} network {}",
        c.conversations, c.requests, c.cache_hits, c.network_requests
    );
}

fn write_snapshot<T: Serialize>(path: &Path, value: &T) -> crate::Result<()> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct EvalSnapshot<'a> {
    gold: &'a Path,
    pred: &'a Path,
    task: Task,
    re_policy: ReMatching,
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let policy: ReMatching = a.re_policy.parse()?;
    let gold = load_corpus(&a.gold)?;
    let results = read_results(&a.pred)?;
    let pred = predictions_from_results(&results, &gold)?;
    let task = match &a.task {
        Some(t) => t.parse::<Task>()?,
        None if pred.has_relations() => Task::Re,
        None => Task::Ner,
    };
    let report = match task {
        Task::Ner => evaluate_ner(&gold, &pred)?,
        Task::Re => evaluate_re(&gold, &pred, policy)?,
    };
    let out = match a.out {
        Some(o) => o,
        None => a.pred.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let out = if out.as_os_str().is_empty() { PathBuf::from(".") } else { out };
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_snapshot(&out.join("report.json"), &report)?;
    let md = out.join("report.md");
    fs::write(&md, report.to_markdown()).map_err(|e| Error::io(&md, e))?;
    write_snapshot(
        &out.join("eval_config.json"),
        &EvalSnapshot {
            gold: &a.gold,
            pred: &a.pred,
            task,
            re_policy: policy,
        },
    )?;
    print_f1(&report);
    Ok(())
}

fn print_f1(report: &EvalReport) {
    println!(
        "partial F1 {:.4} / full F1 {:.4}",
        report.mode(MatchMode::Partial).f1,
        report.mode(MatchMode::Full).f1
    );
}

fn cmd_conflicts(a: ConflictsArgs) -> CliResult {
    let snapshot = a.run.join("manifest.json");
    let prior_manifest = RunManifest::load(&snapshot)?;
    if prior_manifest.task != Task::Ner {
        return Err(CliError::Message("conflict resolution needs an NER run".into()));
    }
    let mut explicit = a.overrides.explicit()?;
    let out = a.out.clone().unwrap_or_else(|| a.run.join("cr"));
    explicit.push(("outdir".into(), Value::String(out.to_string_lossy().into_owned())));
    explicit.push(("strategy.cr_pass".into(), Value::Bool(true)));
    let base = serde_json::to_value(&prior_manifest).map_err(Error::from)?;
    let manifest = resolve_manifest(a.overrides.config.as_deref(), &|_| None, &explicit, base)?;
    let prior = read_results(&a.run.join("predictions.jsonl"))?;
    let transcripts = read_transcripts(&a.run.join("transcripts.jsonl"))?;
    let backend = Backend::from_profile(manifest.backend.clone())?;
    let pipeline = Pipeline::new(manifest.clone(), &backend)?;
    let mut output = pipeline.run_cr(&prior, &transcripts)?;
    let mut all = transcripts;
    all.append(&mut output.transcripts);
    output.transcripts = all;
    let written = write_run(&manifest, &output);
    print_run_summary(&output, &backend);
    written?;
    Ok(())
}

#[derive(Serialize)]
struct ExportSnapshot<'a> {
    corpus: &'a Path,
    pred: &'a Path,
    seed: u64,
    stats: ResolutionStats,
}

fn cmd_export(a: ExportArgs) -> CliResult {
    let corpus = load_corpus(&a.corpus)?;
    let results = read_results(&a.pred)?;
    if results.iter().any(|r| !r.relations.is_empty()) && results.iter().all(|r| r.entities.is_empty()) {
        return Err(CliError::Message("NER predictions required".into()));
    }
    let pred = predictions_from_results(&results, &corpus)?;
    let mut stats = ResolutionStats::default();
    let mut sequences = Vec::new();
    for ad in &corpus.docs {
        let Some(mentions) = pred.entities.get(&ad.document.id) else {
            continue;
        };
        let (resolved, s) = resolve_all(mentions, a.seed);
        stats.groups += s.groups;
        stats.removed += s.removed;
        sequences.push(to_bio2(&tokenize(&ad.document.text), &resolved));
    }
    export_conll(&sequences, &a.out)?;
    let mut snap = a.out.clone().into_os_string();
    snap.push(".config.json");
    write_snapshot(
        Path::new(&snap),
        &ExportSnapshot {
            corpus: &a.corpus,
            pred: &a.pred,
            seed: a.seed,
            stats,
        },
    )?;
    println!("{} conflict groups, {} members removed", stats.groups, stats.removed);
    Ok(())
}

fn cmd_gen(a: GenArgs) -> CliResult {
    let schema = TaskSchema::load(&a.schema)?;
    let rtype = schema.relation_type(&a.relation)?;
    let templates = match &a.templates {
        Some(d) => TemplateSet::load_dir(d)?,
        None => TemplateSet::default(),
    };
    let corpus = load_corpus(&a.corpus)?;
    let examples: Vec<(String, Vec<Vec<String>>)> = corpus
        .docs
        .iter()
        .take(a.examples)
        .map(|ad| {
            let tuples = ad
                .relations
                .iter()
                .filter(|r| r.rtype == rtype.name)
                .map(|r| r.constituents.iter().map(|c| c.surface.clone()).collect())
                .collect();
            (ad.document.text.clone(), tuples)
        })
        .collect();
    let base = base_re_prompt(&schema, rtype, &templates)?;
    let message = build_re_prompt_request(&base, &schema, rtype, &examples, &templates)?;
    println!("{}", message.content);
    Ok(())
}

#[derive(Serialize)]
struct MacroReport<'a> {
    mode: MatchMode,
    #[serde(rename = "macro")]
    block: &'a MacroBlock,
}

fn cmd_report(a: ReportArgs) -> CliResult {
    let mode = match a.mode.to_lowercase().as_str() {
        "partial" => MatchMode::Partial,
        "full" => MatchMode::Full,
        other => return Err(CliError::Usage(format!("unknown mode {other:?}"))),
    };
    let mut datasets = Vec::new();
    for entry in &a.f1 {
        let (name, v) = entry
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--f1 expects NAME=F1, got {entry:?}")))?;
        let f1: f64 = v
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("not a number: {v:?}")))?;
        datasets.push((name.to_string(), f1));
    }
    for entry in &a.reports {
        let (name, path) = entry
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--report expects NAME=PATH, got {entry:?}")))?;
        let path = Path::new(path);
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: EvalReport = serde_json::from_str(&raw).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        datasets.push((name.to_string(), report.mode(mode).f1));
    }
    let f1s: Vec<f64> = datasets.iter().map(|(_, f)| *f).collect();
    let mean = macro_average(&f1s)?;
    for (name, f1) in &datasets {
        println!("{name} {f1:.4}");
    }
    println!("macro {mean:.4}");
    if let Some(out) = a.out {
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let block = MacroBlock { datasets, mean };
        write_snapshot(&out.join("macro.json"), &MacroReport { mode, block: &block })?;
        let mut md = String::from("| Dataset | F1 |\n| --- | --- |\n");
        for (name, f1) in &block.datasets {
            md.push_str(&format!("| {name} | {f1:.4} |\n"));
        }
        md.push_str(&format!("| **macro average** | {mean:.4} |\n"));
        let path = out.join("macro.md");
        fs::write(&path, md).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
