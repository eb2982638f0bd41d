//! Acceptance gate. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line each; exits nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use num_rational::Ratio;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::seq::SliceRandom;
use rand::Rng;

use toolfault_core::agents::{by_name, consults_oracle, AgentPolicy};
use toolfault_core::bank::{default_script_for_kind, ExemplarBank, RecoveryAction, SignaturePattern};
use toolfault_core::benchgen::{generalization_split, generate_suite, task_pool, EpisodeCard, SuiteSpec};
use toolfault_core::harness::{run_suite, RunOptions};
use toolfault_core::metrics::{aggregate, bootstrap_ci, EpisodeGrade, Metric};
use toolfault_core::pipeline::detect_first_failure;
use toolfault_core::seed::{mix, rng};
use toolfault_core::sim::clock::{backoff_ceiling, backoff_delay, BackoffPolicy};
use toolfault_core::sim::{Role, Trajectory};
use toolfault_core::taxonomy::{Catalog, ErrorClass, ErrorSignature, Manifestation};

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, fail: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

fn jobs() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn run(cards: &[EpisodeCard], agent: &str, bank: Option<&ExemplarBank>) -> Vec<EpisodeGrade> {
    let policy: Box<dyn AgentPolicy> = by_name(agent).expect("known agent");
    run_suite(cards, policy.as_ref(), &RunOptions { bank, jobs: jobs(), seed: None }).expect("suite runs").grades
}

fn rr(grades: &[EpisodeGrade]) -> Ratio<u64> {
    aggregate(grades).unwrap().rr.expect("suite has failures")
}

fn pct(r: Ratio<u64>) -> f64 {
    100.0 * *r.numer() as f64 / *r.denom() as f64
}

// 1

#[derive(Debug, PartialEq)]
struct Recount {
    tsr: Ratio<u64>,
    rr: Option<Ratio<u64>>,
    csr: Option<Ratio<u64>>,
    es: Ratio<u64>,
}

fn recount(grades: &[EpisodeGrade]) -> Recount {
    let mut succeeded = 0u64;
    let mut failures = 0u64;
    let mut recoveries = 0u64;
    let mut fabricated = 0u64;
    let mut steps = 0u64;
    for g in grades {
        succeeded += u64::from(g.task_success);
        failures += u64::from(g.failures_encountered);
        recoveries += u64::from(g.failures_recovered);
        fabricated += u64::from(g.hallucinated_success);
        steps += u64::from(g.steps_taken);
    }
    let n = grades.len() as u64;
    Recount {
        tsr: Ratio::new(succeeded, n),
        rr: (failures > 0).then(|| Ratio::new(recoveries, failures)),
        csr: (failures > 0).then(|| Ratio::new(failures - fabricated, failures)),
        es: Ratio::new(n, steps),
    }
}

fn random_grades(r: &mut impl Rng) -> Vec<EpisodeGrade> {
    (0..r.gen_range(1..60))
        .map(|i| {
            let enc = if r.gen_bool(0.2) { 0 } else { r.gen_range(1..4) };
            let rec = r.gen_range(0..=enc);
            EpisodeGrade {
                episode_id: format!("e{i}"),
                class: None,
                task_success: r.gen_bool(0.5),
                failures_encountered: enc,
                failures_recovered: rec,
                hallucinated_success: rec < enc && r.gen_bool(0.3),
                steps_taken: r.gen_range(1..12),
            }
        })
        .collect()
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(0xC1);
    let mut agree = 0;
    for _ in 0..500 {
        let grades = random_grades(&mut r);
        let m = aggregate(&grades).map_err(|e| e.to_string())?;
        let got = Recount { tsr: m.tsr, rr: m.rr, csr: m.csr, es: m.es };
        agree += usize::from(got == recount(&grades));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        agree == 500 && secs < 5.0,
        format!("500/500 grade sets agree exactly in {secs:.2}s"),
        format!("{agree}/500 agree in {secs:.2}s"),
    )
}

// 2

fn oracle_distance(sig: &ErrorSignature, p: &SignaturePattern) -> Ratio<u64> {
    let tokens = |s: &str| -> BTreeSet<String> {
        s.split(|c: char| !c.is_alphanumeric())
            .map(|t| t.chars().filter(|c| !c.is_ascii_digit()).collect::<String>().to_lowercase())
            .filter(|t| !t.is_empty())
            .collect()
    };
    let mut d = Ratio::from_integer(0u64);
    if p.error_class.is_some_and(|c| c != sig.error_class) {
        d += 4;
    }
    if p.kind.as_ref().is_some_and(|k| *k != sig.kind) {
        d += 2;
    }
    let implied = p.kind.as_ref().map(|k| k.strip_prefix("http_").and_then(|c| c.parse::<u16>().ok()));
    let status_ok = match (p.status_code, implied) {
        (Some(code), _) => sig.status_code == Some(code),
        (None, Some(code)) => sig.status_code == code,
        (None, None) => true,
    };
    if !status_ok {
        d += 1;
    }
    if let Some(words) = &p.message_tokens {
        let a = tokens(&words.join(" "));
        let b = tokens(&sig.message);
        let union = a.union(&b).count() as u64;
        let inter = a.intersection(&b).count() as u64;
        let sim = if union == 0 { Ratio::from_integer(1) } else { Ratio::new(inter, union) };
        d += Ratio::from_integer(1) - sim;
    }
    d
}

fn random_signature(r: &mut impl Rng, catalog: &Catalog, vocab: &[String]) -> ErrorSignature {
    let kinds: Vec<&str> =
        catalog.failures.iter().map(|k| k.identifier.as_str()).chain(["unknown", "http_418"]).collect();
    let kind = (*kinds.choose(r).unwrap()).to_string();
    let class = if r.gen_bool(0.8) {
        catalog.class_of(&kind).unwrap_or(ErrorClass::InvalidToolInvocation)
    } else {
        *ErrorClass::ALL.choose(r).unwrap()
    };
    let status = match r.gen_range(0..4) {
        0 => None,
        1 => Some(*[400u16, 401, 404, 429, 500, 503].choose(r).unwrap()),
        _ => kind.strip_prefix("http_").and_then(|c| c.parse().ok()),
    };
    let n_words = r.gen_range(0..8);
    let mut words: Vec<String> = (0..n_words).map(|_| vocab.choose(r).unwrap().clone()).collect();
    if r.gen_bool(0.3) {
        words.push(format!("id{}", r.gen_range(0..10_000)));
    }
    ErrorSignature {
        error_class: class,
        kind,
        status_code: status,
        message: words.join(" "),
        tool_name: "t".into(),
        turn_index: 1,
        manifestation: Manifestation::ErrorPayload,
        retry_after_ms: None,
    }
}

fn retrieval_oracle() -> Outcome {
    let bank = ExemplarBank::shipped();
    let catalog = Catalog::shipped();
    if bank.len() < 55 {
        return Err(format!("bank has only {} exemplars", bank.len()));
    }
    let vocab: Vec<String> = bank
        .exemplars
        .iter()
        .flat_map(|e| e.pattern.message_tokens.clone().unwrap_or_default())
        .chain(["zebra", "quartz"].map(String::from))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let start = Instant::now();
    let mut r = rng(0xC2);
    let mut agree = 0;
    for _ in 0..1000 {
        let sig = random_signature(&mut r, catalog, &vocab);
        let mut best: Option<(Ratio<u64>, &str)> = None;
        for e in &bank.exemplars {
            let d = oracle_distance(&sig, &e.pattern);
            if best.is_none_or(|(bd, bid)| d < bd || (d == bd && e.id.as_str() < bid)) {
                best = Some((d, &e.id));
            }
        }
        let got = bank.retrieve(&sig).map(|e| e.id.as_str());
        agree += usize::from(got == best.map(|b| b.1));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        agree == 1000 && secs < 5.0,
        format!("1000/1000 signatures match the linear scan over {} exemplars in {secs:.2}s", bank.len()),
        format!("{agree}/1000 agree in {secs:.2}s"),
    )
}

// 3

fn toolfault(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_toolfault"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    toolfault(d, &["gen-suite", "--n", "70", "--seed", "42", "--out", "s.jsonl"])?;
    let mut runs: Vec<BTreeMap<String, Vec<u8>>> = Vec::new();
    for i in 0..3 {
        let out_root = format!("runs{i}");
        let stdout = toolfault(
            d,
            &[
                "evaluate", "--agent", "paladin", "--seed", "42", "--suite", "s.jsonl", "--jobs", "4", "--out",
                &out_root,
            ],
        )?;
        let run_dir = stdout.lines().find_map(|l| l.strip_prefix("output: ")).ok_or("no output line")?;
        let mut files = BTreeMap::new();
        for entry in std::fs::read_dir(d.join(run_dir)).map_err(|e| e.to_string())? {
            let entry = entry.map_err(|e| e.to_string())?;
            files.insert(
                entry.file_name().to_string_lossy().into_owned(),
                std::fs::read(entry.path()).map_err(|e| e.to_string())?,
            );
        }
        runs.push(files);
    }
    let same = runs.windows(2).all(|w| w[0] == w[1]);
    let n_files = runs[0].len();
    check(
        same && runs[0].contains_key("trajectories.jsonl") && runs[0].contains_key("report.json"),
        format!("3 runs, {n_files} files each, byte-identical"),
        "runs differ".into(),
    )
}

// 4

fn injection_fidelity() -> Outcome {
    let mut spec = SuiteSpec::new(70, 42);
    spec.clean_fraction = Ratio::from_integer(0);
    let cards = generate_suite(&task_pool(), &spec).map_err(|e| e.to_string())?;
    let policy = by_name("toolbench").unwrap();
    let traces: Vec<Trajectory> =
        run_suite(&cards, policy.as_ref(), &RunOptions { bank: None, jobs: jobs(), seed: None })
            .map_err(|e| e.to_string())?
            .trajectories;
    let mut per_class: BTreeMap<ErrorClass, usize> = BTreeMap::new();
    let mut faithful = 0;
    for (card, trace) in cards.iter().zip(&traces) {
        if let Some(class) = card.class() {
            *per_class.entry(class).or_default() += 1;
        }
        let found = detect_first_failure(trace).ok().flatten();
        let ok = match (&found, card.plan.kind.as_deref()) {
            (Some((turn, sig)), Some(kind)) => sig.kind == kind && trace.turns[*turn].role == Role::Function,
            _ => false,
        };
        faithful += usize::from(ok);
    }
    let even = per_class.len() == 7 && per_class.values().all(|&n| n == 10);
    check(
        faithful == 70 && even,
        "70/70 failures classify back to their planned kind; 10 per class".into(),
        format!("{faithful}/70 faithful; per-class {per_class:?}"),
    )
}

// 5, 6, 7

struct Standard {
    cards: Vec<EpisodeCard>,
    paladin: Vec<EpisodeGrade>,
}

fn baseline_ordering(std_suite: &mut Option<Standard>) -> Outcome {
    let start = Instant::now();
    let cards = generate_suite(&task_pool(), &SuiteSpec::standard(42)).map_err(|e| e.to_string())?;
    let bank = ExemplarBank::shipped();
    let mut rates = Vec::new();
    let mut paladin = Vec::new();
    for agent in ["paladin", "critic", "reflect", "vanilla"] {
        let grades = run(&cards, agent, Some(bank));
        rates.push((agent, rr(&grades)));
        if agent == "paladin" {
            paladin = grades;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let csr = aggregate(&paladin).unwrap().csr;
    let gaps_ok = rates.windows(2).all(|w| pct(w[0].1) - pct(w[1].1) >= 5.0);
    let summary: Vec<String> = rates.iter().map(|(a, r)| format!("{a} {:.1}", pct(*r))).collect();
    *std_suite = Some(Standard { cards, paladin });
    check(
        gaps_ok && csr == Some(Ratio::from_integer(1)) && secs < 60.0,
        format!("RR {} (gaps >= 5 pts); paladin CSR 1; {secs:.1}s", summary.join(" > ")),
        format!("RR {}; paladin CSR {csr:?}; {secs:.1}s", summary.join(", ")),
    )
}

fn ablation(std_suite: &Option<Standard>) -> Outcome {
    let s = std_suite.as_ref().ok_or("standard suite unavailable")?;
    let with = pct(rr(&s.paladin));
    let without = pct(rr(&run(&s.cards, "paladin", None)));
    check(
        with - without >= 15.0,
        format!("paladin RR {with:.1} -> {without:.1} without retrieval ({:.1} pts)", with - without),
        format!("paladin RR {with:.1} -> {without:.1} without retrieval"),
    )
}

fn generalization(std_suite: &Option<Standard>) -> Outcome {
    let s = std_suite.as_ref().ok_or("standard suite unavailable")?;
    let in_bank = pct(rr(&s.paladin));
    let mut spec = SuiteSpec::standard(42);
    spec.held_out_kinds = ["http_503", "http_422", "schema_violation", "stale_reference"].map(String::from).into();
    let (visible, cards) =
        generalization_split(&task_pool(), &spec, ExemplarBank::shipped()).map_err(|e| e.to_string())?;
    let held_out = pct(rr(&run(&cards, "paladin", Some(&visible))));
    let same_cards_full_bank = pct(rr(&run(&cards, "paladin", Some(ExemplarBank::shipped()))));
    let retention = held_out / in_bank;
    check(
        retention >= 0.85,
        format!(
            "held-out RR {held_out:.1} vs in-bank {in_bank:.1} (retention {:.1}%; same cards with full bank {same_cards_full_bank:.1})",
            100.0 * retention
        ),
        format!("held-out RR {held_out:.1} vs in-bank {in_bank:.1} (retention {:.1}%)", 100.0 * retention),
    )
}

// 8

fn critic_gating() -> Outcome {
    let consulted = (0..10_000u64).filter(|&i| consults_oracle(mix(42, i), 1 + i % 4)).count();
    let freq = consulted as f64 / 10_000.0;
    check(
        (freq - 0.70).abs() <= 0.02,
        format!("oracle consulted on {consulted}/10000 events ({freq:.4})"),
        format!("oracle frequency {freq:.4}"),
    )
}

// 9

fn backoff_compliance() -> Outcome {
    let mut runner = TestRunner::new(Config { cases: 2000, failure_persistence: None, ..Config::default() });
    let strategy =
        (1u32..40, 1u64..5_000, 1u64..100_000, proptest::option::of(0u64..60_000), any::<bool>(), any::<u64>());
    runner
        .run(&strategy, |(attempt, base, cap, after, respect, seed)| {
            let policy = BackoffPolicy { base_delay_ms: base, cap_ms: cap, respect_retry_after: respect };
            let window = (base as u128 * (1u128 << (attempt - 1).min(100))).min(cap as u128) as u64;
            prop_assert_eq!(backoff_ceiling(attempt, &policy), window);
            prop_assert!(backoff_ceiling(attempt, &policy) <= cap);
            let delay = backoff_delay(attempt, &policy, after, seed);
            match (respect, after) {
                (true, Some(a)) => prop_assert_eq!(delay, a),
                _ => prop_assert!(delay <= window),
            }
            Ok(())
        })
        .map_err(|e| format!("backoff property: {e}"))?;

    let bank = ExemplarBank::shipped();
    let catalog = Catalog::shipped();
    let retry_first = |script: &[RecoveryAction]| {
        matches!(script.first(), Some(RecoveryAction::RetryWithBackoff { respect_retry_after: true, .. }))
    };
    for kind in ["http_429", "http_503", "http_500"] {
        let sig = catalog.get(kind).unwrap().example_signature("t", 1);
        let retrieved = bank.retrieve(&sig).ok_or("empty bank")?;
        if !retry_first(&retrieved.script) || !retry_first(&default_script_for_kind(kind)) {
            return Err(format!("{kind} does not open with a Retry-After-respecting backoff"));
        }
    }
    for kind in ["http_401", "http_403"] {
        let sig = catalog.get(kind).unwrap().example_signature("t", 1);
        let mut scripts = vec![default_script_for_kind(kind), bank.retrieve(&sig).unwrap().script.clone()];
        scripts.extend(
            bank.exemplars.iter().filter(|e| e.pattern.kind.as_deref() == Some(kind)).map(|e| e.script.clone()),
        );
        if scripts.iter().flatten().any(RecoveryAction::is_retry) {
            return Err(format!("{kind} script retries"));
        }
    }
    Ok("2000 jitter/cap/Retry-After cases hold; 429/503/500 back off, 401/403 never retry".into())
}

// 10

fn corpus_composition() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    toolfault(
        d,
        &[
            "build-corpus",
            "--target",
            "100",
            "--recovery-fraction",
            "0.8",
            "--teacher",
            "rule",
            "--seed",
            "42",
            "--out",
            "c",
        ],
    )?;
    let text = std::fs::read_to_string(d.join("c/corpus.jsonl")).map_err(|e| e.to_string())?;
    let spans: BTreeMap<String, Vec<[usize; 3]>> =
        serde_json::from_str(&std::fs::read_to_string(d.join("c/spans.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let (mut recovery, mut clean, mut stable, mut turns, mut covered) = (0, 0, 0, 0, 0);
    for line in text.lines() {
        let trace = Trajectory::from_json_line(line).map_err(|e| e.to_string())?;
        stable += usize::from(trace.to_json_line() == line);
        let rec_turns: Vec<usize> = trace
            .turns
            .iter()
            .enumerate()
            .filter(|(_, t)| t.role == Role::Assistant && t.content.starts_with("Recovery:"))
            .map(|(i, _)| i)
            .collect();
        if rec_turns.is_empty() {
            clean += 1;
        } else {
            recovery += 1;
        }
        turns += rec_turns.len();
        let listed: BTreeSet<usize> = spans.get(&trace.episode_id).into_iter().flatten().map(|s| s[0]).collect();
        covered += rec_turns.iter().filter(|i| listed.contains(i)).count();
    }
    let total = recovery + clean;
    check(
        recovery == 80 && clean == 20 && stable == total && covered == turns && turns > 0,
        format!("{recovery} recovery + {clean} clean; {stable}/{total} round-trip; spans cover {covered}/{turns} Recovery turns"),
        format!("{recovery} recovery + {clean} clean; {stable}/{total} stable; {covered}/{turns} covered"),
    )
}

// 11

fn bootstrap_correctness() -> Outcome {
    let flat: Vec<EpisodeGrade> = (0..50)
        .map(|i| EpisodeGrade {
            episode_id: format!("e{i}"),
            class: None,
            task_success: true,
            failures_encountered: 1,
            failures_recovered: 1,
            hallucinated_success: false,
            steps_taken: 3,
        })
        .collect();
    for m in Metric::ALL {
        let point = aggregate(&flat).unwrap().get(m).map(|r| *r.numer() as f64 / *r.denom() as f64);
        let ci = bootstrap_ci(&flat, m, 1000, 0.95, 7).map_err(|e| e.to_string())?;
        if ci != point.map(|p| (p, p)) {
            return Err(format!("zero-variance {} CI {ci:?} != point {point:?}", m.as_str()));
        }
    }
    let truth = 0.7;
    let mut covered = 0;
    for trial in 0..100u64 {
        let mut r = rng(mix(0xB00, trial));
        let grades: Vec<EpisodeGrade> = (0..200)
            .map(|i| EpisodeGrade {
                episode_id: format!("e{i}"),
                class: None,
                task_success: r.gen_bool(truth),
                failures_encountered: 0,
                failures_recovered: 0,
                hallucinated_success: false,
                steps_taken: 1,
            })
            .collect();
        if let Some((lo, hi)) = bootstrap_ci(&grades, Metric::Tsr, 1000, 0.95, trial).map_err(|e| e.to_string())? {
            covered += usize::from(lo <= truth && truth <= hi);
        }
    }
    check(
        covered >= 93,
        format!("zero-variance CIs collapse; planted TSR 0.7 bracketed in {covered}/100 trials"),
        format!("planted TSR bracketed in {covered}/100 trials"),
    )
}

fn main() {
    let mut standard = None;
    let results: Vec<(&str, Outcome)> = vec![
        ("1 metric-formula oracle", metric_oracle()),
        ("2 retrieval oracle", retrieval_oracle()),
        ("3 determinism", determinism()),
        ("4 injection fidelity", injection_fidelity()),
        ("5 baseline ordering", baseline_ordering(&mut standard)),
        ("6 ablation direction", ablation(&standard)),
        ("7 generalization retention", generalization(&standard)),
        ("8 critic gating", critic_gating()),
        ("9 backoff compliance", backoff_compliance()),
        ("10 corpus composition", corpus_composition()),
        ("11 bootstrap correctness", bootstrap_correctness()),
    ];
    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{}/{} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
