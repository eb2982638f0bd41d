//! Subcommand implementations for the `toolfault` binary. Kept in a library so
//! integration tests can drive them without spawning a process.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use toolfault_core::agents::{by_name, AgentPolicy, RemoteChatPolicy, AGENT_NAMES};
use toolfault_core::bank::pydict::convert_python_dictionary;
use toolfault_core::bank::{load_bank, DictionaryFile, ExemplarBank};
use toolfault_core::benchgen::{
    generalization_split, generate_suite, manifest, read_suite, task_pool, write_suite, Protocol, SuiteManifest,
    SuiteSpec,
};
use toolfault_core::chat::{ChatClient, EndpointConfig};
use toolfault_core::harness::{run_suite, RunOptions};
use toolfault_core::metrics::{build_report, Metric, MetricsReport, RemoteGrader, ReportConfig};
use toolfault_core::pipeline::{build_corpus, CorpusSpec, TeacherBackend};
use toolfault_core::seed::{mix, sha256_hex};

/// Endpoint used when `--endpoint` is not given.
pub const ENDPOINT_ENV: &str = "TOOLFAULT_ENDPOINT";

/// Exit code for `--assert-*` threshold violations.
pub const ASSERT_EXIT_CODE: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "toolfault", version, about = "Fault-injection benchmark for tool-calling agents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded evaluation suite.
    GenSuite(GenSuiteArgs),
    /// Run an agent over a suite, grade it and write a report.
    Evaluate(EvaluateArgs),
    /// Build a recovery-annotated training corpus.
    BuildCorpus(BuildCorpusArgs),
    /// Convert a Python-literal recovery dictionary to the JSON bank format.
    ConvertDictionary(ConvertArgs),
    /// Compare two evaluation reports metric by metric.
    ReportDiff(ReportDiffArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    Paladin,
    ToolReflect,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Paladin => Protocol::Paladin,
            ProtocolArg::ToolReflect => Protocol::ToolReflect,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenSuiteArgs {
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Failure kinds hidden from the agent's bank (comma separated or repeated).
    #[arg(long = "hold-out", value_delimiter = ',')]
    pub hold_out: Vec<String>,
    #[arg(long, value_enum, default_value_t = ProtocolArg::Paladin)]
    pub protocol: ProtocolArg,
    /// Share of clean episodes, as a decimal or `a/b`.
    #[arg(long, default_value = "1/5", value_parser = parse_ratio)]
    pub clean_fraction: Ratio<u64>,
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GraderArg {
    Rule,
    Remote,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// One of vanilla, toolbench, reflect, critic, paladin or remote.
    #[arg(long)]
    pub agent: String,
    #[arg(long)]
    pub suite: PathBuf,
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Run without exemplar retrieval.
    #[arg(long)]
    pub no_retrieval: bool,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Overrides the agent seed recorded in every card.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub resamples: usize,
    #[arg(long, default_value = "1", value_parser = parse_ratio_i64)]
    pub alpha: Ratio<i64>,
    #[arg(long, value_enum, default_value_t = GraderArg::Rule)]
    pub grader: GraderArg,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    #[arg(long)]
    pub assert_min_tsr: Option<f64>,
    #[arg(long)]
    pub assert_min_rr: Option<f64>,
    #[arg(long)]
    pub assert_min_csr: Option<f64>,
    #[arg(long)]
    pub assert_min_es: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct EndpointArgs {
    /// Chat-completion base URL; falls back to `TOOLFAULT_ENDPOINT`.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long, default_value = "default")]
    pub model: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TeacherArg {
    Rule,
    Remote,
}

#[derive(Debug, Args)]
pub struct BuildCorpusArgs {
    #[arg(long, default_value_t = 100)]
    pub target: usize,
    #[arg(long, default_value = "4/5", value_parser = parse_ratio)]
    pub recovery_fraction: Ratio<u64>,
    #[arg(long, value_enum, default_value_t = TeacherArg::Rule)]
    pub teacher: TeacherArg,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "dict-version", default_value = "converted")]
    pub dict_version: String,
    /// JSON dictionary the converted branches are merged into (default: the shipped one).
    #[arg(long)]
    pub base: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportDiffArgs {
    pub base: PathBuf,
    pub other: PathBuf,
}

/// Parses `0.8`, `4/5` or `1` into an exact ratio.
pub fn parse_ratio(text: &str) -> Result<Ratio<u64>, String> {
    let text = text.trim();
    if let Some((n, d)) = text.split_once('/') {
        let n: u64 = n.trim().parse().map_err(|_| format!("bad numerator in `{text}`"))?;
        let d: u64 = d.trim().parse().map_err(|_| format!("bad denominator in `{text}`"))?;
        if d == 0 {
            return Err(format!("zero denominator in `{text}`"));
        }
        return Ok(Ratio::new(n, d));
    }
    let (int, frac) = text.split_once('.').unwrap_or((text, ""));
    if frac.len() > 18 || (int.is_empty() && frac.is_empty()) {
        return Err(format!("`{text}` is not a decimal"));
    }
    let digits = |s: &str| s.is_empty() || s.bytes().all(|b| b.is_ascii_digit());
    if !digits(int) || !digits(frac) {
        return Err(format!("`{text}` is not a decimal"));
    }
    let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| format!("`{text}` is too large"))? };
    let scale = 10u64.pow(frac.len() as u32);
    let frac: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| format!("`{text}` is too large"))? };
    let numer =
        int.checked_mul(scale).and_then(|v| v.checked_add(frac)).ok_or_else(|| format!("`{text}` is too large"))?;
    Ok(Ratio::new(numer, scale))
}

fn parse_ratio_i64(text: &str) -> Result<Ratio<i64>, String> {
    let r = parse_ratio(text)?;
    let n = i64::try_from(*r.numer()).map_err(|_| format!("`{text}` is too large"))?;
    let d = i64::try_from(*r.denom()).map_err(|_| format!("`{text}` is too large"))?;
    Ok(Ratio::new(n, d))
}

/// Returns the seed and whether it was generated.
pub fn resolve_seed(seed: Option<u64>) -> (u64, bool) {
    match seed {
        Some(s) => (s, false),
        None => (rand::random(), true),
    }
}

fn announce_seed(seed: u64, generated: bool) {
    if generated {
        eprintln!("seed: {seed} (generated; pass --seed {seed} to reproduce)");
    }
}

fn load_bank_arg(path: Option<&Path>) -> Result<ExemplarBank> {
    match path {
        Some(p) => load_bank(p).with_context(|| format!("loading bank {}", p.display())),
        None => Ok(ExemplarBank::shipped().clone()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Manifest written next to a suite file: `s.jsonl` → `s.manifest.json`.
pub fn manifest_path(suite: &Path) -> PathBuf {
    let stem = suite.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    suite.with_file_name(format!("{stem}.manifest.json"))
}

pub fn gen_suite(args: &GenSuiteArgs) -> Result<SuiteManifest> {
    let (seed, generated) = resolve_seed(args.seed);
    announce_seed(seed, generated);
    let mut spec = SuiteSpec::new(args.n, seed);
    spec.clean_fraction = args.clean_fraction;
    spec.protocol = args.protocol.into();
    spec.held_out_kinds = args.hold_out.iter().map(|k| k.trim().to_string()).filter(|k| !k.is_empty()).collect();
    let bank = load_bank_arg(args.bank.as_deref())?;
    let pool = task_pool();
    let (visible, cards) = if spec.held_out_kinds.is_empty() {
        (bank, generate_suite(&pool, &spec)?)
    } else {
        generalization_split(&pool, &spec, &bank)?
    };
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_suite(&args.out, &cards)?;
    let m = manifest(&spec, &cards, &visible);
    write_json(&manifest_path(&args.out), &m)?;
    let counts: Vec<String> = m.class_counts.iter().map(|(c, n)| format!("{c}={n}")).collect();
    println!("wrote {} cards ({} clean) to {}", m.n_cards, m.n_clean, args.out.display());
    println!("seed {} | {}", seed, counts.join(" "));
    Ok(m)
}

fn endpoint_client(args: &EndpointArgs, what: &str) -> Result<ChatClient> {
    let base = args
        .endpoint
        .clone()
        .or_else(|| std::env::var(ENDPOINT_ENV).ok().filter(|v| !v.is_empty()))
        .ok_or_else(|| anyhow!("{what} needs --endpoint or {ENDPOINT_ENV}"))?;
    let config = EndpointConfig::new(&base, &args.model);
    if std::env::var(&config.token_env).map_or(true, |t| t.is_empty()) {
        bail!("{what} needs an API token in {}", config.token_env);
    }
    Ok(ChatClient::new(config))
}

/// Everything that determines an evaluation's output; its hash names the
/// output directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub suite: String,
    pub suite_sha256: String,
    pub agent: String,
    pub retrieval_enabled: bool,
    pub bank_version: String,
    pub held_out_kinds: BTreeSet<String>,
    pub seed_override: Option<u64>,
    pub report_seed: u64,
    pub resamples: usize,
    pub alpha: String,
    pub grader: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
}

impl RunRecord {
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("record serializes").as_bytes())
    }
}

#[derive(Debug)]
pub struct EvaluateOutcome {
    pub dir: PathBuf,
    pub report: MetricsReport,
    /// Threshold violations from `--assert-*`.
    pub violations: Vec<String>,
}

fn build_agent(args: &EvaluateArgs) -> Result<Box<dyn AgentPolicy>> {
    if args.agent == "remote" {
        return Ok(Box::new(RemoteChatPolicy::new(endpoint_client(&args.endpoint, "the remote agent")?)));
    }
    by_name(&args.agent)
        .ok_or_else(|| anyhow!("unknown agent `{}` (expected one of {}, remote)", args.agent, AGENT_NAMES.join(", ")))
}

pub fn evaluate(args: &EvaluateArgs) -> Result<EvaluateOutcome> {
    let agent = build_agent(args)?;
    let suite_bytes = fs::read(&args.suite).with_context(|| format!("reading suite {}", args.suite.display()))?;
    let cards = read_suite(&args.suite)?;
    if cards.is_empty() {
        bail!("suite {} has no cards", args.suite.display());
    }
    let held_out: BTreeSet<String> = match fs::read_to_string(manifest_path(&args.suite)) {
        Ok(text) => serde_json::from_str::<SuiteManifest>(&text)?.spec.held_out_kinds,
        Err(_) => BTreeSet::new(),
    };
    let bank = load_bank_arg(args.bank.as_deref())?.without_kinds(&held_out);
    let suite_name = args.suite.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let grader = match args.grader {
        GraderArg::Rule => None,
        GraderArg::Remote => Some(RemoteGrader::new(endpoint_client(&args.endpoint, "the remote grader")?)),
    };
    let record = RunRecord {
        suite: suite_name.clone(),
        suite_sha256: sha256_hex(&suite_bytes),
        agent: args.agent.clone(),
        retrieval_enabled: !args.no_retrieval,
        bank_version: bank.version.clone(),
        held_out_kinds: held_out,
        seed_override: args.seed,
        report_seed: mix(args.seed.unwrap_or(0), 0xB007),
        resamples: args.resamples,
        alpha: args.alpha.to_string(),
        grader: format!("{:?}", args.grader).to_lowercase(),
        endpoint: args.endpoint.endpoint.clone().filter(|_| args.agent == "remote" || grader.is_some()),
    };
    let hash = record.hash();
    let dir = args.out.join(&hash[..16]);

    let options = RunOptions { bank: (!args.no_retrieval).then_some(&bank), jobs: args.jobs, seed: args.seed };
    let mut run = run_suite(&cards, agent.as_ref(), &options)?;
    if let Some(grader) = &grader {
        for ((grade, trace), card) in run.grades.iter_mut().zip(&run.trajectories).zip(&cards) {
            match grader.grade(trace, card) {
                Ok(g) => *grade = g,
                Err(e) => eprintln!("remote grader failed on {}: {e}; keeping rule-based grade", card.episode_id),
            }
        }
    }
    let config =
        ReportConfig { alpha: args.alpha, n_resamples: args.resamples, confidence: 0.95, seed: record.report_seed };
    let label = if args.no_retrieval { format!("{}-no-retrieval", args.agent) } else { args.agent.clone() };
    let report = build_report(&suite_name, &label, &run.grades, &config)?;

    let mut trajectories = String::new();
    for t in &run.trajectories {
        trajectories.push_str(&t.to_json_line());
        trajectories.push('\n');
    }
    let mut grades = String::new();
    for g in &run.grades {
        grades.push_str(&serde_json::to_string(g)?);
        grades.push('\n');
    }
    let files: Vec<(&str, Vec<u8>)> = vec![
        ("run.json", format!("{}\n", serde_json::to_string_pretty(&record)?).into_bytes()),
        ("trajectories.jsonl", trajectories.into_bytes()),
        ("grades.jsonl", grades.into_bytes()),
        ("report.json", format!("{}\n", serde_json::to_string_pretty(&report)?).into_bytes()),
        ("report.csv", report.to_csv().into_bytes()),
    ];
    write_run_dir(&dir, &files)?;

    print!("{}", summary(&report));
    println!("output: {}", dir.display());

    let mut violations = Vec::new();
    for (metric, min) in [
        (Metric::Tsr, args.assert_min_tsr),
        (Metric::Rr, args.assert_min_rr),
        (Metric::Csr, args.assert_min_csr),
        (Metric::Es, args.assert_min_es),
    ] {
        let Some(min) = min else { continue };
        match report.point(metric) {
            Some(v) if v >= min => {}
            Some(v) => violations.push(format!("{} = {v:.4} < {min}", metric.as_str())),
            None => violations.push(format!("{} is not applicable on this suite", metric.as_str())),
        }
    }
    Ok(EvaluateOutcome { dir, report, violations })
}

/// Writes a run directory. An existing directory is never overwritten; it
/// must already hold identical bytes.
fn write_run_dir(dir: &Path, files: &[(&str, Vec<u8>)]) -> Result<()> {
    if dir.exists() {
        for (name, bytes) in files {
            let path = dir.join(name);
            let existing = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            if &existing != bytes {
                bail!("{} exists with different content; refusing to overwrite", path.display());
            }
        }
        eprintln!("{} already holds this run", dir.display());
        return Ok(());
    }
    let staging = dir.with_extension("partial");
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;
    for (name, bytes) in files {
        fs::write(staging.join(name), bytes)?;
    }
    fs::rename(&staging, dir).with_context(|| format!("publishing {}", dir.display()))?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

pub fn summary(report: &MetricsReport) -> String {
    let mut out = format!("{} on {} ({} episodes)\n", report.agent, report.suite, report.n_episodes);
    for row in &report.metrics {
        let ci = match (row.ci_lo, row.ci_hi) {
            (Some(lo), Some(hi)) => format!("  [{lo:.4}, {hi:.4}]"),
            _ => String::new(),
        };
        let _ = writeln!(out, "  {:<4} {}{}", row.metric, fmt_opt(row.point), ci);
    }
    let _ = writeln!(out, "  composite (alpha {}) {}", report.alpha, report.composite);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusOutcome {
    pub seed: u64,
    pub n_recovery: usize,
    pub n_clean: usize,
    pub quarantined: usize,
}

pub fn build_corpus_cmd(args: &BuildCorpusArgs) -> Result<CorpusOutcome> {
    let client = match args.teacher {
        TeacherArg::Rule => None,
        TeacherArg::Remote => Some(endpoint_client(&args.endpoint, "--teacher remote")?),
    };
    let (seed, generated) = resolve_seed(args.seed);
    announce_seed(seed, generated);
    let bank = load_bank_arg(args.bank.as_deref())?;
    let teacher = match client {
        None => TeacherBackend::RuleBased(&bank),
        Some(c) => TeacherBackend::Remote(c),
    };
    let spec = CorpusSpec { target_size: args.target, recovery_fraction: args.recovery_fraction, seed };
    let build = build_corpus(&spec, &teacher, &bank)?;
    build.write(&args.out)?;
    let m = &build.corpus.manifest;
    println!(
        "wrote {} traces ({} recovery, {} clean) to {}; {} duplicates dropped, {} quarantined",
        build.corpus.traces.len(),
        m.n_recovery,
        m.n_clean,
        args.out.display(),
        m.duplicates_dropped,
        build.quarantine.len()
    );
    Ok(CorpusOutcome { seed, n_recovery: m.n_recovery, n_clean: m.n_clean, quarantined: build.quarantine.len() })
}

pub fn convert_dictionary(args: &ConvertArgs) -> Result<usize> {
    let src = fs::read_to_string(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let converted = convert_python_dictionary(&src, &args.dict_version)?;
    let n_branches = converted.branches.len();
    let mut file = match &args.base {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => DictionaryFile::shipped(),
    };
    file.merge(converted);
    file.version = args.dict_version.clone();
    let n = file.clone().into_bank().context("merged dictionary fails validation")?.len();
    write_json(&args.out, &file)?;
    println!("merged {n_branches} branches; {n} exemplars after expansion; wrote {}", args.out.display());
    Ok(n)
}

/// `metric,base,other,delta` rows; empty cells for not-applicable values.
pub fn report_diff(base: &MetricsReport, other: &MetricsReport) -> String {
    let mut out = String::from("metric,base,other,delta\n");
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for metric in Metric::ALL {
        let (a, b) = (base.point(metric), other.point(metric));
        let delta = a.zip(b).map(|(a, b)| b - a);
        let _ = writeln!(out, "{},{},{},{}", metric.as_str(), cell(a), cell(b), cell(delta));
    }
    out
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let path = if path.is_dir() { path.join("report.json") } else { path.to_path_buf() };
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

/// Runs a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::GenSuite(a) => {
            gen_suite(&a)?;
        }
        Command::Evaluate(a) => {
            let outcome = evaluate(&a)?;
            if !outcome.violations.is_empty() {
                for v in &outcome.violations {
                    eprintln!("assertion failed: {v}");
                }
                return Ok(ASSERT_EXIT_CODE);
            }
        }
        Command::BuildCorpus(a) => {
            build_corpus_cmd(&a)?;
        }
        Command::ConvertDictionary(a) => {
            convert_dictionary(&a)?;
        }
        Command::ReportDiff(a) => {
            print!("{}", report_diff(&read_report(&a.base)?, &read_report(&a.other)?));
        }
    }
    Ok(0)
}
